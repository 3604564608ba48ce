//! Parameter storage, seeded initialisation and the layers shared by the
//! encoder and the heads.
//!
//! Parameters are candle `Var`s kept in name order. Randomness (init,
//! dropout, drop-path) comes from a seeded ChaCha stream rather than the
//! device RNG so runs are reproducible.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, IoContext, Result};

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable tensors plus non-trainable buffers (running statistics).
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
    buffers: RefCell<BTreeMap<String, Tensor>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("vars", &self.vars.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            dtype,
            vars: BTreeMap::new(),
            buffers: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn insert_buffer(&self, name: &str, t: Tensor) -> Result<()> {
        self.buffers.borrow_mut().insert(name.to_string(), t.to_dtype(self.dtype)?);
        Ok(())
    }

    pub fn from_values(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<()> {
        let t = Tensor::from_vec(values, shape, &device())?;
        self.insert(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
        let v: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
        self.from_values(name, v, shape)
    }

    /// Truncated to two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, 1.0).map_err(|e| Error::Argument(e.to_string()))?;
        let v: Vec<f32> = (0..n)
            .map(|_| loop {
                let z: f64 = dist.sample(rng);
                if z.abs() <= 2.0 {
                    break (z * std) as f32;
                }
            })
            .collect();
        self.from_values(name, v, shape)
    }

    /// Uniform in ±1/sqrt(fan_in), the usual affine-layer default.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
        self.from_values(name, v, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.from_values(name, vec![value as f32; n], shape)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn buffer(&self, name: &str) -> Result<Tensor> {
        self.buffers
            .borrow()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{name}`")))
    }

    pub fn set_buffer(&self, name: &str, t: Tensor) {
        self.buffers.borrow_mut().insert(name.to_string(), t);
    }

    /// Replaces a parameter's value in place (keeps the `Var` identity).
    pub fn assign(&self, name: &str, t: &Tensor) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if v.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                v.shape(),
                t.shape()
            )));
        }
        v.set(&t.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Vars whose names start with any of `prefixes` (all when empty).
    pub fn trainable(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy with fresh vars.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let mut out = ParamStore::new(self.dtype);
        for (k, v) in &self.vars {
            out.insert(k, v.as_tensor().copy()?)?;
        }
        for (k, b) in self.buffers.borrow().iter() {
            out.insert_buffer(k, b.copy()?)?;
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let mut out = ParamStore::new(dtype);
        for (k, v) in &self.vars {
            out.insert(k, v.as_tensor().clone())?;
        }
        for (k, b) in self.buffers.borrow().iter() {
            out.insert_buffer(k, b.clone())?;
        }
        Ok(out)
    }

    /// Copies every tensor of `other` whose name and shape match.
    pub fn load_matching(&self, other: &ParamStore, skip_prefixes: &[&str]) -> Result<usize> {
        let mut n = 0;
        for (k, v) in &self.vars {
            if skip_prefixes.iter().any(|p| k.starts_with(p)) {
                continue;
            }
            if let Some(src) = other.vars.get(k) {
                if src.shape() == v.shape() {
                    v.set(&src.as_tensor().to_dtype(self.dtype)?)?;
                    n += 1;
                }
            }
        }
        for (k, b) in other.buffers.borrow().iter() {
            if skip_prefixes.iter().any(|p| k.starts_with(p)) {
                continue;
            }
            if self.buffers.borrow().contains_key(k) {
                self.set_buffer(k, b.to_dtype(self.dtype)?);
            }
        }
        Ok(n)
    }

    fn all_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        for (k, b) in self.buffers.borrow().iter() {
            out.push((format!("buffer.{k}"), b.clone()));
        }
        out
    }

    /// Saves all tensors (as f32) to a safetensors file with a JSON header
    /// stored under the `header` metadata key.
    pub fn save<H: Serialize>(&self, path: &Path, header: &H) -> Result<()> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (k, t) in self.all_tensors() {
            let t = t.to_dtype(DType::F32)?.flatten_all()?;
            let vals = t.to_vec1::<f32>()?;
            let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
            owned.push((k, t.dims().to_vec(), bytes));
        }
        let shapes: HashMap<String, Vec<usize>> = self
            .all_tensors()
            .into_iter()
            .map(|(k, t)| (k, t.dims().to_vec()))
            .collect();
        let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = owned
            .iter()
            .map(|(k, _, b)| {
                let view = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shapes[k].clone(), b)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                Ok((k.clone(), view))
            })
            .collect::<Result<_>>()?;
        let mut meta = HashMap::new();
        meta.insert("header".to_string(), serde_json::to_string(header)?);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).at(p)?;
        }
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, bytes).at(path)
    }

    /// Loads a checkpoint written by [`ParamStore::save`].
    pub fn load<H: DeserializeOwned>(path: &Path, dtype: DType) -> Result<(ParamStore, H)> {
        let bytes = std::fs::read(path).at(path)?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("header"))
            .ok_or_else(|| Error::Checkpoint(format!("{}: no header", path.display())))?;
        let header: H = serde_json::from_str(header)?;
        let mut store = ParamStore::new(dtype);
        let mut names: Vec<String> = st.names().into_iter().map(|s| s.to_string()).collect();
        names.sort();
        for name in names {
            let view = st.tensor(&name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is not f32")));
            }
            let vals: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(vals, view.shape(), &device())?;
            match name.strip_prefix("buffer.") {
                Some(b) => store.insert_buffer(b, t)?,
                None => store.insert(&name, t)?,
            }
        }
        Ok((store, header))
    }
}

/// Reads only the JSON header of a checkpoint.
pub fn read_header<H: DeserializeOwned>(path: &Path) -> Result<H> {
    let bytes = std::fs::read(path).at(path)?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let header = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("header"))
        .ok_or_else(|| Error::Checkpoint(format!("{}: no header", path.display())))?;
    Ok(serde_json::from_str(header)?)
}

/// Forward-pass mode and the random stream for stochastic layers.
pub struct Ctx {
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: RefCell::new(crate::seed::rng(0, &[])),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Ctx {
            train: true,
            rng: RefCell::new(rng),
        }
    }

    /// Tensor of `shape` whose entries are 0 with probability `p` and
    /// `1/(1-p)` otherwise.
    fn keep_mask(&self, shape: &[usize], p: f64, dtype: DType) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let scale = (1.0 / (1.0 - p)) as f32;
        let mut rng = self.rng.borrow_mut();
        let v: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        Ok(Tensor::from_vec(v, shape, &device())?.to_dtype(dtype)?)
    }
}

/// `x @ w + b` over the last dimension; `w` is `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().expect("non-scalar input");
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, last))?.matmul(w)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(1)?;
    Ok(y.reshape(out)?)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(xn.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let xc = x.broadcast_sub(&m)?;
    let lse = xc.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(xc.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Parametric ReLU with one slope per channel (last dimension).
pub fn prelu(x: &Tensor, slope: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg = x.neg()?.relu()?;
    Ok(pos.broadcast_sub(&neg.broadcast_mul(slope)?)?)
}

pub fn dropout(x: &Tensor, p: f64, ctx: &Ctx) -> Result<Tensor> {
    if !ctx.train || p <= 0.0 {
        return Ok(x.clone());
    }
    let mask = ctx.keep_mask(x.dims(), p, x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Stochastic depth on a residual branch: drops whole samples (dim 0).
pub fn drop_path(x: &Tensor, p: f64, ctx: &Ctx) -> Result<Tensor> {
    if !ctx.train || p <= 0.0 {
        return Ok(x.clone());
    }
    let mut shape = vec![1usize; x.rank()];
    shape[0] = x.dim(0)?;
    let mask = ctx.keep_mask(&shape, p, x.dtype())?;
    Ok(x.broadcast_mul(&mask)?)
}

/// Batch normalisation over dim 0 of a `[N, C]` input. Training updates the
/// running statistics stored as buffers `<name>.running_mean/var`.
pub fn batch_norm(x: &Tensor, store: &ParamStore, name: &str, ctx: &Ctx) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    const MOMENTUM: f64 = 0.1;
    let gamma = store.get(&format!("{name}.weight"))?;
    let beta = store.get(&format!("{name}.bias"))?;
    let rm_key = format!("{name}.running_mean");
    let rv_key = format!("{name}.running_var");
    let n = x.dim(0)?;
    let xn = if ctx.train && n > 1 {
        let mean = x.mean_keepdim(0)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(0)?;
        let unbiased = (var.detach() * (n as f64 / (n as f64 - 1.0)))?;
        let rm = store.buffer(&rm_key)?;
        let rv = store.buffer(&rv_key)?;
        store.set_buffer(&rm_key, ((rm * (1.0 - MOMENTUM))? + (mean.detach().squeeze(0)? * MOMENTUM)?)?);
        store.set_buffer(&rv_key, ((rv * (1.0 - MOMENTUM))? + (unbiased.squeeze(0)? * MOMENTUM)?)?);
        xc.broadcast_div(&(var + EPS)?.sqrt()?)?
    } else {
        let rm = store.buffer(&rm_key)?;
        let rv = store.buffer(&rv_key)?;
        x.broadcast_sub(&rm)?.broadcast_div(&(rv + EPS)?.sqrt()?)?
    };
    Ok(xn.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

pub fn init_batch_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.constant(&format!("{name}.weight"), &[dim], 1.0)?;
    store.constant(&format!("{name}.bias"), &[dim], 0.0)?;
    store.insert_buffer(&format!("{name}.running_mean"), Tensor::zeros(dim, DType::F32, &device())?)?;
    store.insert_buffer(&format!("{name}.running_var"), Tensor::ones(dim, DType::F32, &device())?)?;
    Ok(())
}

/// `[in, out]` weight and zero bias.
pub fn init_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.trunc_normal(&format!("{name}.weight"), &[d_in, d_out], 0.02, rng)?;
    store.constant(&format!("{name}.bias"), &[d_out], 0.0)
}

pub fn apply_linear(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = store.get(&format!("{name}.weight"))?;
    let b = store.get(&format!("{name}.bias"))?;
    linear(x, &w, Some(&b))
}

/// Row-major values of a 2-D tensor as f64.
pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let x = Tensor::new(&[[1.0f64, 2.0, 4.0], [0.0, -1.0, 1.0]], &device()).unwrap();
        let g = Tensor::new(&[1.0f64, 2.0, 0.5], &device()).unwrap();
        let b = Tensor::new(&[0.0f64, 1.0, -1.0], &device()).unwrap();
        let y = to_rows(&layer_norm(&x, &g, &b, 1e-5).unwrap()).unwrap();
        for (row, out) in [[1.0, 2.0, 4.0], [0.0, -1.0, 1.0]].iter().zip(&y) {
            let m: f64 = row.iter().sum::<f64>() / 3.0;
            let v: f64 = row.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 3.0;
            let want: Vec<f64> = row
                .iter()
                .zip([(1.0, 0.0), (2.0, 1.0), (0.5, -1.0)])
                .map(|(r, (g, b))| (r - m) / (v + 1e-5).sqrt() * g + b)
                .collect();
            assert!(close(out, &want, 1e-12));
        }
    }

    #[test]
    fn prelu_and_softmax() {
        let x = Tensor::new(&[[-2.0f64, 3.0]], &device()).unwrap();
        let a = Tensor::new(&[0.25f64, 0.25], &device()).unwrap();
        assert_eq!(to_rows(&prelu(&x, &a).unwrap()).unwrap(), vec![vec![-0.5, 3.0]]);
        let s = to_rows(&softmax_last(&x).unwrap()).unwrap();
        let e = (5.0f64).exp();
        assert!(close(&s[0], &[1.0 / (1.0 + e), e / (1.0 + e)], 1e-12));
        let ls = to_rows(&log_softmax_last(&x).unwrap()).unwrap();
        assert!(close(&ls[0], &[s[0][0].ln(), s[0][1].ln()], 1e-12));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let x = Tensor::ones((4, 8), DType::F32, &device()).unwrap();
        let y = dropout(&x, 0.5, &Ctx::eval()).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
        let a = dropout(&x, 0.5, &Ctx::train(crate::seed::rng(3, &[]))).unwrap();
        let b = dropout(&x, 0.5, &Ctx::train(crate::seed::rng(3, &[]))).unwrap();
        assert_eq!(a.to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
        assert!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new(DType::F32);
        let mut rng = crate::seed::rng(1, &[]);
        init_linear(&mut s, "fc", 3, 2, &mut rng).unwrap();
        init_batch_norm(&mut s, "bn", 2).unwrap();
        let p = dir.path().join("c.safetensors");
        s.save(&p, &serde_json::json!({"stage": "x"})).unwrap();
        let (t, h): (ParamStore, serde_json::Value) = ParamStore::load(&p, DType::F32).unwrap();
        assert_eq!(h["stage"], "x");
        assert_eq!(
            t.get("fc.weight").unwrap().to_vec2::<f32>().unwrap(),
            s.get("fc.weight").unwrap().to_vec2::<f32>().unwrap()
        );
        assert_eq!(t.buffer("bn.running_var").unwrap().to_vec1::<f32>().unwrap(), vec![1.0, 1.0]);
        let again = dir.path().join("d.safetensors");
        t.save(&again, &serde_json::json!({"stage": "x"})).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn batch_norm_train_normalises_and_tracks() {
        let mut s = ParamStore::new(DType::F64);
        init_batch_norm(&mut s, "bn", 2).unwrap();
        let x = Tensor::new(&[[1.0f64, 10.0], [3.0, 30.0]], &device()).unwrap();
        let ctx = Ctx::train(crate::seed::rng(0, &[]));
        let y = to_rows(&batch_norm(&x, &s, "bn", &ctx).unwrap()).unwrap();
        assert!((y[0][0] + y[1][0]).abs() < 1e-9 && y[1][0] > 0.99);
        let rm = s.buffer("bn.running_mean").unwrap().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-9 && (rm[1] - 2.0).abs() < 1e-9);
    }
}

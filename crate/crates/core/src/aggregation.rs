//! Slide-level decision heads: probability voting over patch predictions and
//! gated-attention MIL over frozen patch features.

use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, CheckpointHeader, ModelKind, TrainingStage};
use crate::error::{Error, IoContext, Result};
use crate::features::FeatureBag;
use crate::nn::{self, ParamStore};
use crate::taxonomy::{ClassSet, ClassSetName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilDims {
    /// Width of the patch embedder output.
    pub d_emb: usize,
    /// Hidden width of the attention gates.
    pub attn_dim: usize,
    /// Hidden width of the classifier MLP.
    pub hidden: usize,
}

impl Default for MilDims {
    fn default() -> Self {
        MilDims {
            d_emb: 512,
            attn_dim: 128,
            hidden: 256,
        }
    }
}

/// Gated-attention MIL head. Parameters under `mil.`:
/// `embed` (affine D_in -> D_emb), `attn.V`, `attn.U` (D_in x L, no bias),
/// `attn.w` (L), and the classifier `cls.fc1` (D_emb -> hidden, ReLU) and
/// `cls.fc2` (hidden -> C).
pub struct MilHead {
    pub store: ParamStore,
    pub d_in: usize,
    pub dims: MilDims,
    pub class_set: ClassSet,
    pub stage: TrainingStage,
    /// Encoder that produced the features this head consumes.
    pub source: BackboneSpec,
    pub source_grid: (usize, usize),
}

impl MilHead {
    pub fn new(d_in: usize, dims: MilDims, class_set: ClassSet, source: BackboneSpec, source_grid: (usize, usize), dtype: DType, seed: u64) -> Result<MilHead> {
        if d_in == 0 || dims.d_emb == 0 || dims.attn_dim == 0 || dims.hidden == 0 {
            return Err(Error::Config("MIL dimensions must be positive".into()));
        }
        let mut rng = crate::seed::rng(seed, &[0x3b11]);
        let mut store = ParamStore::new(dtype);
        nn::init_linear(&mut store, "mil.embed", d_in, dims.d_emb, &mut rng)?;
        store.fan_in_uniform("mil.attn.V", &[d_in, dims.attn_dim], d_in, &mut rng)?;
        store.fan_in_uniform("mil.attn.U", &[d_in, dims.attn_dim], d_in, &mut rng)?;
        store.fan_in_uniform("mil.attn.w", &[dims.attn_dim], dims.attn_dim, &mut rng)?;
        nn::init_linear(&mut store, "mil.cls.fc1", dims.d_emb, dims.hidden, &mut rng)?;
        nn::init_linear(&mut store, "mil.cls.fc2", dims.hidden, class_set.len(), &mut rng)?;
        Ok(MilHead {
            store,
            d_in,
            dims,
            class_set,
            stage: TrainingStage::Base,
            source,
            source_grid,
        })
    }

    /// Attention-pooled slide embedding `[D_emb]` and attention `[N]`.
    pub fn gated_attention(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, d) = h.dims2()?;
        if n == 0 {
            return Err(Error::EmptyBag("bag with no rows".into()));
        }
        if d != self.d_in {
            return Err(Error::Shape(format!("bag rows have {d} features, head expects {}", self.d_in)));
        }
        let v = self.store.get("mil.attn.V")?;
        let u = self.store.get("mil.attn.U")?;
        let w = self.store.get("mil.attn.w")?;
        let gate = h.matmul(&v)?.tanh()?.mul(&nn::sigmoid(&h.matmul(&u)?)?)?;
        let scores = gate.matmul(&w.unsqueeze(1)?)?.squeeze(1)?;
        let attn = nn::softmax_last(&scores)?;
        let e = nn::apply_linear(&self.store, "mil.embed", h)?;
        let emb = attn.unsqueeze(0)?.matmul(&e)?.squeeze(0)?;
        Ok((emb, attn))
    }

    pub fn classify(&self, emb: &Tensor) -> Result<Tensor> {
        let z = nn::apply_linear(&self.store, "mil.cls.fc1", emb)?.relu()?;
        nn::apply_linear(&self.store, "mil.cls.fc2", &z)
    }

    /// Class logits `[C]` and attention `[N]`.
    pub fn forward(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let (emb, attn) = self.gated_attention(h)?;
        Ok((self.classify(&emb)?, attn))
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            spec: self.source,
            grid: self.source_grid,
            training_stage: self.stage,
            class_set: self.class_set.to_spec(),
            model: ModelKind::Mil {
                d_in: self.d_in,
                d_emb: self.dims.d_emb,
                attn_dim: self.dims.attn_dim,
                hidden: self.dims.hidden,
            },
            notes: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, &self.header())
    }

    pub fn load(path: &Path, dtype: DType) -> Result<MilHead> {
        let (store, h): (ParamStore, CheckpointHeader) = ParamStore::load(path, dtype)?;
        let ModelKind::Mil { d_in, d_emb, attn_dim, hidden } = h.model else {
            return Err(Error::Stage(format!("{} is not a MIL checkpoint", path.display())));
        };
        Ok(MilHead {
            store,
            d_in,
            dims: MilDims { d_emb, attn_dim, hidden },
            class_set: ClassSet::from_spec(&h.class_set)?,
            stage: h.training_stage,
            source: h.spec,
            source_grid: h.grid,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Voting,
    Mil,
    Thumbnail,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Voting => "voting",
            Method::Mil => "mil",
            Method::Thumbnail => "thumbnail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub method: Method,
    pub class_set: ClassSetName,
    pub probs: Vec<f64>,
    pub attention: Option<Vec<f64>>,
    pub patch_votes: Option<Vec<Vec<f64>>>,
    /// Per-round distributions when the prediction averages sampled rounds.
    pub round_probs: Option<Vec<Vec<f64>>>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// MIL prediction for one bag; probabilities are computed in f64 from the
/// head's logits.
pub fn mil_predict(bag: &FeatureBag, head: &MilHead) -> Result<SlidePrediction> {
    if bag.is_empty() {
        return Err(Error::EmptyBag(bag.slide_id.clone()));
    }
    if bag.dim != head.d_in {
        return Err(Error::Shape(format!(
            "bag {} has {}-dim features, head expects {}",
            bag.slide_id, bag.dim, head.d_in
        )));
    }
    let (logits, attn) = head.forward(&bag.to_tensor(head.store.dtype())?)?;
    let logits: Vec<f64> = logits.to_dtype(DType::F64)?.to_vec1()?;
    let attn: Vec<f64> = attn.to_dtype(DType::F64)?.to_vec1()?;
    Ok(SlidePrediction {
        slide_id: bag.slide_id.clone(),
        method: Method::Mil,
        class_set: head.class_set.name(),
        probs: softmax(&logits),
        attention: Some(attn),
        patch_votes: None,
        round_probs: None,
    })
}

/// MIL over several sampled bags of one slide: the slide distribution is the
/// mean of the per-round distributions, which are kept.
pub fn mil_predict_rounds(bags: &[FeatureBag], head: &MilHead) -> Result<SlidePrediction> {
    let first = bags.first().ok_or_else(|| Error::Argument("no rounds".into()))?;
    let rounds = bags.iter().map(|b| mil_predict(b, head)).collect::<Result<Vec<_>>>()?;
    let probs = column_mean(&rounds.iter().map(|r| r.probs.clone()).collect::<Vec<_>>());
    Ok(SlidePrediction {
        slide_id: first.slide_id.clone(),
        method: Method::Mil,
        class_set: head.class_set.name(),
        probs,
        attention: None,
        patch_votes: None,
        round_probs: Some(rounds.into_iter().map(|r| r.probs).collect()),
    })
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let c = rows[0].len();
    let mut out = vec![0.0; c];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

/// Mean patch probability; with `k_bags`, the mean over rounds of each
/// round's mean.
pub fn vote_predict(
    slide_id: &str,
    patch_probs: &[Vec<f64>],
    k_bags: Option<&[Vec<usize>]>,
    class_set: &ClassSet,
) -> Result<SlidePrediction> {
    if patch_probs.is_empty() {
        return Err(Error::EmptyBag(slide_id.to_string()));
    }
    let (probs, round_probs) = match k_bags {
        None => (column_mean(patch_probs), None),
        Some(bags) => {
            if bags.is_empty() || bags.iter().any(|b| b.is_empty()) {
                return Err(Error::EmptyBag(slide_id.to_string()));
            }
            let per_round: Vec<Vec<f64>> = bags
                .iter()
                .map(|b| column_mean(&b.iter().map(|&i| patch_probs[i].clone()).collect::<Vec<_>>()))
                .collect();
            (column_mean(&per_round), Some(per_round))
        }
    };
    Ok(SlidePrediction {
        slide_id: slide_id.to_string(),
        method: Method::Voting,
        class_set: class_set.name(),
        probs,
        attention: None,
        patch_votes: Some(patch_probs.to_vec()),
        round_probs,
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub slide_id: String,
    pub method: Method,
    pub class_set: ClassSetName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argmax: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_probs: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_path: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub abstain: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl PredictionRecord {
    pub fn from_prediction(p: &SlidePrediction, class_set: &ClassSet) -> PredictionRecord {
        PredictionRecord {
            slide_id: p.slide_id.clone(),
            method: p.method,
            class_set: p.class_set,
            argmax: Some(class_set.classes()[class_set.argmax(&p.probs)].clone()),
            probs: Some(p.probs.clone()),
            round_probs: p.round_probs.clone(),
            attention_path: None,
            abstain: false,
            reason: None,
        }
    }

    /// No tissue, so no prediction.
    pub fn abstain(slide_id: &str, method: Method, class_set: ClassSetName, reason: &str) -> PredictionRecord {
        PredictionRecord {
            slide_id: slide_id.to_string(),
            method,
            class_set,
            probs: None,
            argmax: None,
            round_probs: None,
            attention_path: None,
            abstain: true,
            reason: Some(reason.to_string()),
        }
    }
}

/// Writes records sorted by slide id, one JSON object per line.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).at(p)?;
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let mut out = Vec::new();
    for r in sorted {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(&out).at(path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.at(path)?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Straight-line f64 evaluation of the gated-attention formula, independent
/// of the tensor implementation. Returns (logits, attention).
pub fn reference_forward(head: &MilHead, rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let get = |n: &str| -> Result<Vec<f64>> { Ok(head.store.get(n)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?) };
    let (v, u, w) = (get("mil.attn.V")?, get("mil.attn.U")?, get("mil.attn.w")?);
    let (ew, eb) = (get("mil.embed.weight")?, get("mil.embed.bias")?);
    let (w1, b1) = (get("mil.cls.fc1.weight")?, get("mil.cls.fc1.bias")?);
    let (w2, b2) = (get("mil.cls.fc2.weight")?, get("mil.cls.fc2.bias")?);
    let d = head.d_in;
    let l = head.dims.attn_dim;
    let de = head.dims.d_emb;
    let hd = head.dims.hidden;
    let c = head.class_set.len();
    let mut scores = Vec::with_capacity(rows.len());
    for h in rows {
        let mut s = 0.0;
        for j in 0..l {
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..d {
                a += h[i] * v[i * l + j];
                b += h[i] * u[i * l + j];
            }
            s += w[j] * a.tanh() * (1.0 / (1.0 + (-b).exp()));
        }
        scores.push(s);
    }
    let attn = softmax(&scores);
    let mut emb = vec![0.0; de];
    for (h, a) in rows.iter().zip(&attn) {
        for k in 0..de {
            let mut e = eb[k];
            for i in 0..d {
                e += h[i] * ew[i * de + k];
            }
            emb[k] += a * e;
        }
    }
    let mut z = vec![0.0; hd];
    for (k, zk) in z.iter_mut().enumerate() {
        let mut s = b1[k];
        for (i, e) in emb.iter().enumerate() {
            s += e * w1[i * hd + k];
        }
        *zk = s.max(0.0);
    }
    let mut logits = vec![0.0; c];
    for (k, out) in logits.iter_mut().enumerate() {
        let mut s = b2[k];
        for (i, zi) in z.iter().enumerate() {
            s += zi * w2[i * c + k];
        }
        *out = s;
    }
    Ok((logits, attn))
}

/// Number of patches whose argmax is each class.
pub fn argmax_counts(votes: &[Vec<f64>], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for v in votes {
        counts[crate::taxonomy::argmax(v)] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_dims() -> MilDims {
        MilDims {
            d_emb: 12,
            attn_dim: 6,
            hidden: 10,
        }
    }

    fn head(dtype: DType, seed: u64) -> MilHead {
        let mut h = MilHead::new(8, small_dims(), ClassSet::fine(), BackboneSpec::default(), (16, 16), dtype, seed).unwrap();
        // Give the zero-initialised biases some signal.
        for name in ["mil.embed.bias", "mil.cls.fc1.bias", "mil.cls.fc2.bias"] {
            let t = h.store.get(name).unwrap();
            let n = t.elem_count();
            let v: Vec<f32> = (0..n).map(|i| ((i as f32) * 0.37).sin() * 0.1).collect();
            h.store.assign(name, &Tensor::from_vec(v, n, &device()).unwrap()).unwrap();
        }
        h.stage = TrainingStage::MilHead;
        h
    }

    fn bag(n: usize, d: usize, seed: u64) -> FeatureBag {
        let mut rng = crate::seed::rng(seed, &[]);
        FeatureBag {
            slide_id: "b".into(),
            features: (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            dim: d,
            coords: (0..n as u32).map(|i| (i * 10, 0)).collect(),
            target_mpp: 0.59,
            patch_size_px: 512,
            backbone_stage: "patch_finetuned".into(),
            budget: crate::features::Budget::All,
            blank: false,
        }
    }

    fn rows(b: &FeatureBag) -> Vec<Vec<f64>> {
        (0..b.len()).map(|i| b.row(i).iter().map(|&v| v as f64).collect()).collect()
    }

    #[test]
    fn singleton_and_duplicates() {
        let h = head(DType::F64, 1);
        let b = bag(1, 8, 2);
        let p = mil_predict(&b, &h).unwrap();
        assert_eq!(p.attention.as_deref(), Some(&[1.0][..]));
        let dup = b.subset(&[0, 0, 0], crate::features::Budget::All);
        let q = mil_predict(&dup, &h).unwrap();
        for a in q.attention.as_ref().unwrap() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        for (x, y) in p.probs.iter().zip(&q.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_reference() {
        let h = head(DType::F64, 3);
        for s in 0..10 {
            let b = bag(5, 8, 100 + s);
            let p = mil_predict(&b, &h).unwrap();
            let (logits, attn) = reference_forward(&h, &rows(&b)).unwrap();
            for (x, y) in p.probs.iter().zip(softmax(&logits)) {
                assert!((x - y).abs() < 1e-9);
            }
            for (x, y) in p.attention.unwrap().iter().zip(&attn) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn errors() {
        let h = head(DType::F32, 3);
        assert!(matches!(mil_predict(&bag(0, 8, 1), &h), Err(Error::EmptyBag(_))));
        assert!(matches!(mil_predict(&bag(3, 7, 1), &h), Err(Error::Shape(_))));
        assert!(matches!(vote_predict("x", &[], None, &ClassSet::fine()), Err(Error::EmptyBag(_))));
    }

    #[test]
    fn voting_arithmetic() {
        let cs = ClassSet::fixation_binary();
        let p = vote_predict("s", &[vec![1.0, 0.0], vec![0.0, 1.0]], None, &cs).unwrap();
        assert_eq!(p.probs, vec![0.5, 0.5]);
        let one = vote_predict("s", &[vec![0.3, 0.7]], None, &cs).unwrap();
        assert_eq!(one.probs, vec![0.3, 0.7]);
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        let r = vote_predict("s", &rows, Some(&[vec![0], vec![1, 2]]), &cs).unwrap();
        assert!((r.probs[0] - (1.0 + 0.25) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = head(DType::F32, 5);
        let p = dir.path().join("mil.safetensors");
        h.save(&p).unwrap();
        let l = MilHead::load(&p, DType::F32).unwrap();
        assert_eq!(l.dims, h.dims);
        assert_eq!(l.stage, TrainingStage::MilHead);
        let b = bag(4, 8, 9);
        assert_eq!(mil_predict(&b, &h).unwrap().probs, mil_predict(&b, &l).unwrap().probs);
    }

    #[test]
    fn predictions_file_is_sorted_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cs = ClassSet::fixation_binary();
        let p = vote_predict("b", &[vec![0.2, 0.8]], None, &cs).unwrap();
        let recs = vec![
            PredictionRecord::from_prediction(&p, &cs),
            PredictionRecord::abstain("a", Method::Voting, cs.name(), "no tissue"),
        ];
        let path = dir.path().join("p.jsonl");
        write_predictions(&path, &recs).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back[0].slide_id, "a");
        assert!(back[0].abstain);
        assert_eq!(back[1].argmax.as_deref(), Some("he_fs"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"abstain\":true"));
    }

    /// Central differences on every gated-attention parameter, f64.
    #[test]
    fn attention_parameter_gradients() {
        let h = head(DType::F64, 21);
        let b = bag(6, 8, 22);
        let x = b.to_tensor(DType::F64).unwrap();
        let target = 3usize;
        let loss = |hd: &MilHead| -> Tensor {
            let (logits, _) = hd.forward(&x).unwrap();
            nn::log_softmax_last(&logits).unwrap().get(target).unwrap().neg().unwrap()
        };
        let grads = loss(&h).backward().unwrap();
        let mut rng = crate::seed::rng(23, &[]);
        for name in ["mil.attn.V", "mil.attn.U", "mil.attn.w", "mil.embed.weight", "mil.cls.fc1.weight"] {
            let var = h.store.var(name).unwrap();
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for _ in 0..4 {
                let i = rng.random_range(0..base.len());
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    h.store.assign(name, &Tensor::from_vec(v, var.shape(), &device()).unwrap()).unwrap();
                    let l = loss(&h).to_scalar::<f64>().unwrap();
                    l
                };
                let eps = 1e-3;
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                h.store.assign(name, &Tensor::from_vec(base.clone(), var.shape(), &device()).unwrap()).unwrap();
                let denom = num.abs().max(g[i].abs());
                if denom < 1e-7 {
                    continue;
                }
                assert!((num - g[i]).abs() / denom < 1e-2, "{name}[{i}]: numeric {num} analytic {}", g[i]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn attention_sums_to_one_and_permutes(n in 1usize..12, seed in any::<u64>(), rot in 0usize..12) {
            let h = head(DType::F64, 7);
            let b = bag(n, 8, seed);
            let p = mil_predict(&b, &h).unwrap();
            let a = p.attention.clone().unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(a.iter().all(|v| *v >= 0.0));
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let q = mil_predict(&b.subset(&perm, crate::features::Budget::All), &h).unwrap();
            for (x, y) in p.probs.iter().zip(&q.probs) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            let qa = q.attention.unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((qa[j] - a[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn vote_mean_is_exact_column_mean(n in 1usize..30, seed in any::<u64>()) {
            let mut rng = crate::seed::rng(seed, &[]);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| {
                let a: f64 = rng.random();
                vec![a, 1.0 - a]
            }).collect();
            let p = vote_predict("s", &rows, None, &ClassSet::fixation_binary()).unwrap();
            let s0: f64 = rows.iter().map(|r| r[0]).sum::<f64>() / n as f64;
            prop_assert!((p.probs[0] - s0).abs() < 1e-12);
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

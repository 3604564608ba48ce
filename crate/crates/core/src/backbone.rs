//! Vision-transformer encoder with a CLS token and a 2-D positional table.
//!
//! Two output conventions: `PatchFeatures` returns CLS concatenated with the
//! mean patch token (2 x embed_dim), `Thumbnail` returns CLS only. The
//! positional table can be bilinearly resampled to another token grid so a
//! model trained on small patches accepts large rectangular thumbnails.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::{self, Ctx, ParamStore};
use crate::taxonomy::{ClassSet, ClassSetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropRates {
    pub dropout: f64,
    pub drop_path: f64,
    pub attn_drop: f64,
}

impl DropRates {
    pub const ZERO: DropRates = DropRates {
        dropout: 0.0,
        drop_path: 0.0,
        attn_drop: 0.0,
    };

    pub fn uniform(p: f64) -> Self {
        DropRates {
            dropout: p,
            drop_path: p,
            attn_drop: p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub token_patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub drop_rates: DropRates,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            token_patch_size: 14,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            drop_rates: DropRates::ZERO,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.token_patch_size == 0 || self.embed_dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        for p in [self.drop_rates.dropout, self.drop_rates.drop_path, self.drop_rates.attn_drop] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("drop rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Token grid for an `h x w` input.
    pub fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.token_patch_size;
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must have both sides a positive multiple of {p}"
            )));
        }
        Ok((h / p, w / p))
    }

    pub fn feature_dim(&self, mode: EncodeMode) -> usize {
        match mode {
            EncodeMode::PatchFeatures => 2 * self.embed_dim,
            EncodeMode::Thumbnail => self.embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    PatchFeatures,
    Thumbnail,
}

/// Per-channel pixel normalisation applied after scaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Stacks equally sized images into a `[B, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&RgbImage], norm: &Normalization, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = (first.width as usize, first.height as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width as usize, img.height as usize) != (w, h) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} with {}x{}",
                img.width, img.height, w, h
            )));
        }
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            data.extend(img.data.chunks_exact(3).map(|p| ((p[c] as f64 / 255.0 - m) / s) as f32));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &nn::device())?.to_dtype(dtype)?)
}

/// Horizontal and/or vertical flip of an image.
pub fn flip(img: &RgbImage, horizontal: bool, vertical: bool) -> RgbImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let sx = if horizontal { img.width - 1 - x } else { x };
            let sy = if vertical { img.height - 1 - y } else { y };
            out.put(x, y, img.get(sx, sy));
        }
    }
    out
}

/// Linear-interpolation matrix `[n_out, n_in]` with half-pixel centres and
/// edge clamping.
fn interp_matrix(n_in: usize, n_out: usize) -> Vec<f32> {
    let mut m = vec![0f32; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let f = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = f.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let t = f - lo as f64;
        m[i * n_in + lo] += (1.0 - t) as f32;
        m[i * n_in + hi] += t as f32;
    }
    m
}

/// Resamples a positional table `[1 + r*c, D]` (CLS row first) from grid
/// `from` to grid `to` by bilinear interpolation; the CLS row is copied.
pub fn adapt_positions(table: &Tensor, from: (usize, usize), to: (usize, usize)) -> Result<Tensor> {
    if from.0 == 0 || from.1 == 0 || to.0 == 0 || to.1 == 0 {
        return Err(Error::Shape("positional grids must be non-empty".into()));
    }
    let table = if table.rank() == 3 { table.squeeze(0)? } else { table.clone() };
    let (rows, d) = table.dims2()?;
    if rows != 1 + from.0 * from.1 {
        return Err(Error::Shape(format!(
            "positional table has {rows} rows, expected {} for grid {}x{}",
            1 + from.0 * from.1,
            from.0,
            from.1
        )));
    }
    if from == to {
        return Ok(table);
    }
    let dev = table.device().clone();
    let dtype = table.dtype();
    let cls = table.narrow(0, 0, 1)?;
    let grid = table.narrow(0, 1, from.0 * from.1)?.reshape((from.0, from.1 * d))?;
    let ry = Tensor::from_vec(interp_matrix(from.0, to.0), (to.0, from.0), &dev)?.to_dtype(dtype)?;
    let rx = Tensor::from_vec(interp_matrix(from.1, to.1), (to.1, from.1), &dev)?.to_dtype(dtype)?;
    // Rows first, then columns.
    let g = ry.matmul(&grid)?.reshape((to.0, from.1, d))?;
    let g = g.transpose(0, 1)?.contiguous()?.reshape((from.1, to.0 * d))?;
    let g = rx.matmul(&g)?.reshape((to.1, to.0, d))?.transpose(0, 1)?.contiguous()?;
    let g = g.reshape((to.0 * to.1, d))?;
    Ok(Tensor::cat(&[&cls, &g], 0)?)
}

/// Encoder outputs for a batch.
pub struct TokenOutput {
    /// `[B, D]`
    pub cls: Tensor,
    /// `[B, rows*cols, D]`
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

/// The encoder's architecture plus the token grid its positional table is
/// laid out for. Parameters live in a [`ParamStore`] under `encoder.`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub spec: BackboneSpec,
    pub grid: (usize, usize),
}

const P: &str = "encoder";

impl Encoder {
    pub fn init(store: &mut ParamStore, spec: BackboneSpec, grid: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Encoder> {
        spec.validate()?;
        let d = spec.embed_dim;
        let p = spec.token_patch_size;
        store.fan_in_uniform(&format!("{P}.patch_embed.weight"), &[3 * p * p, d], 3 * p * p, rng)?;
        store.constant(&format!("{P}.patch_embed.bias"), &[d], 0.0)?;
        store.trunc_normal(&format!("{P}.cls_token"), &[1, 1, d], 0.02, rng)?;
        store.trunc_normal(&format!("{P}.pos_embed"), &[1, 1 + grid.0 * grid.1, d], 0.02, rng)?;
        for i in 0..spec.depth {
            let b = format!("{P}.blocks.{i}");
            store.constant(&format!("{b}.norm1.weight"), &[d], 1.0)?;
            store.constant(&format!("{b}.norm1.bias"), &[d], 0.0)?;
            nn::init_linear(store, &format!("{b}.attn.qkv"), d, 3 * d, rng)?;
            nn::init_linear(store, &format!("{b}.attn.proj"), d, d, rng)?;
            store.constant(&format!("{b}.norm2.weight"), &[d], 1.0)?;
            store.constant(&format!("{b}.norm2.bias"), &[d], 0.0)?;
            nn::init_linear(store, &format!("{b}.mlp.fc1"), d, spec.mlp_ratio * d, rng)?;
            nn::init_linear(store, &format!("{b}.mlp.fc2"), spec.mlp_ratio * d, d, rng)?;
        }
        store.constant(&format!("{P}.norm.weight"), &[d], 1.0)?;
        store.constant(&format!("{P}.norm.bias"), &[d], 0.0)?;
        Ok(Encoder { spec, grid })
    }

    pub fn prefix() -> &'static str {
        P
    }

    /// Re-lays the positional table for `to` in place and returns the
    /// adapted encoder description.
    pub fn adapt(&self, store: &mut ParamStore, to: (usize, usize)) -> Result<Encoder> {
        let name = format!("{P}.pos_embed");
        let table = store.get(&name)?;
        let adapted = adapt_positions(&table, self.grid, to)?.unsqueeze(0)?;
        store.insert(&name, adapted)?;
        Ok(Encoder { spec: self.spec, grid: to })
    }

    fn patchify(&self, x: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let (gh, gw) = self.spec.grid_for(h, w)?;
        let p = self.spec.token_patch_size;
        let t = x
            .reshape((b, 3, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, 3 * p * p))?;
        Ok((t, (gh, gw)))
    }

    fn block(&self, store: &ParamStore, i: usize, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let s = &self.spec;
        let b = format!("{P}.blocks.{i}");
        let (bsz, t, d) = x.dims3()?;
        let heads = s.heads;
        let dh = d / heads;
        let h = nn::layer_norm(x, &store.get(&format!("{b}.norm1.weight"))?, &store.get(&format!("{b}.norm1.bias"))?, 1e-6)?;
        let qkv = nn::apply_linear(store, &format!("{b}.attn.qkv"), &h)?
            .reshape((bsz, t, 3, heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let att = nn::softmax_last(&att)?;
        let att = nn::dropout(&att, s.drop_rates.attn_drop, ctx)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((bsz, t, d))?;
        let o = nn::apply_linear(store, &format!("{b}.attn.proj"), &o)?;
        let o = nn::dropout(&o, s.drop_rates.dropout, ctx)?;
        let x = (x + nn::drop_path(&o, s.drop_rates.drop_path, ctx)?)?;
        let h = nn::layer_norm(&x, &store.get(&format!("{b}.norm2.weight"))?, &store.get(&format!("{b}.norm2.bias"))?, 1e-6)?;
        let h = nn::apply_linear(store, &format!("{b}.mlp.fc1"), &h)?.gelu()?;
        let h = nn::dropout(&h, s.drop_rates.dropout, ctx)?;
        let h = nn::apply_linear(store, &format!("{b}.mlp.fc2"), &h)?;
        let h = nn::dropout(&h, s.drop_rates.dropout, ctx)?;
        Ok((x + nn::drop_path(&h, s.drop_rates.drop_path, ctx)?)?)
    }

    /// Token sequence (CLS first) after positional embedding, before any block.
    pub fn embed(&self, store: &ParamStore, x: &Tensor, ctx: &Ctx) -> Result<(Tensor, (usize, usize))> {
        let (patches, grid) = self.patchify(x)?;
        let b = patches.dim(0)?;
        let tok = nn::apply_linear(store, &format!("{P}.patch_embed"), &patches)?;
        let d = self.spec.embed_dim;
        let cls = store.get(&format!("{P}.cls_token"))?.broadcast_as((b, 1, d))?;
        let seq = Tensor::cat(&[&cls, &tok], 1)?;
        let mut pos = store.get(&format!("{P}.pos_embed"))?;
        if grid != self.grid {
            pos = adapt_positions(&pos, self.grid, grid)?.unsqueeze(0)?;
        }
        let seq = seq.broadcast_add(&pos)?;
        Ok((nn::dropout(&seq, self.spec.drop_rates.dropout, ctx)?, grid))
    }

    /// Runs blocks `range` on a token sequence.
    pub fn run_blocks(&self, store: &ParamStore, mut x: Tensor, range: std::ops::Range<usize>, ctx: &Ctx) -> Result<Tensor> {
        for i in range {
            x = self.block(store, i, &x, ctx)?;
        }
        Ok(x)
    }

    /// Final norm and split into CLS and patch tokens.
    pub fn finish(&self, store: &ParamStore, x: &Tensor, grid: (usize, usize)) -> Result<TokenOutput> {
        let x = nn::layer_norm(x, &store.get(&format!("{P}.norm.weight"))?, &store.get(&format!("{P}.norm.bias"))?, 1e-6)?;
        let n = x.dim(1)? - 1;
        Ok(TokenOutput {
            cls: x.narrow(1, 0, 1)?.squeeze(1)?,
            tokens: x.narrow(1, 1, n)?,
            grid,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, ctx: &Ctx) -> Result<TokenOutput> {
        let (seq, grid) = self.embed(store, x, ctx)?;
        let seq = self.run_blocks(store, seq, 0..self.spec.depth, ctx)?;
        self.finish(store, &seq, grid)
    }

    pub fn pool(out: &TokenOutput, mode: EncodeMode) -> Result<Tensor> {
        Ok(match mode {
            EncodeMode::Thumbnail => out.cls.clone(),
            EncodeMode::PatchFeatures => Tensor::cat(&[&out.cls, &out.tokens.mean(1)?], D::Minus1)?,
        })
    }

    pub fn encode(&self, store: &ParamStore, x: &Tensor, mode: EncodeMode, ctx: &Ctx) -> Result<Tensor> {
        Self::pool(&self.forward(store, x, ctx)?, mode)
    }
}

/// Training stage recorded in every checkpoint header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStage {
    Base,
    PatchFinetuned,
    ThumbnailFinetuned,
    MilHead,
    BinaryFixation,
}

impl TrainingStage {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingStage::Base => "base",
            TrainingStage::PatchFinetuned => "patch_finetuned",
            TrainingStage::ThumbnailFinetuned => "thumbnail_finetuned",
            TrainingStage::MilHead => "mil_head",
            TrainingStage::BinaryFixation => "binary_fixation",
        }
    }
}

impl std::fmt::Display for TrainingStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelKind {
    /// Encoder plus linear head on CLS ⊕ mean token.
    Patch { input_px: usize, patch_mpp: f64 },
    /// Encoder plus the two-layer thumbnail head on CLS.
    Thumbnail { resolution: (u32, u32) },
    /// Gated-attention MIL head over frozen features.
    Mil { d_in: usize, d_emb: usize, attn_dim: usize, hidden: usize },
}

/// JSON header stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: BackboneSpec,
    pub grid: (usize, usize),
    pub training_stage: TrainingStage,
    pub class_set: ClassSetSpec,
    pub model: ModelKind,
    /// Free-form provenance (source checkpoint, epochs run, ...).
    #[serde(default)]
    pub notes: serde_json::Value,
}

/// Encoder with a linear classifier on CLS ⊕ mean token; the patch-level
/// model whose encoder also produces MIL features.
pub struct PatchModel {
    pub encoder: Encoder,
    pub store: ParamStore,
    pub class_set: ClassSet,
    pub input_px: usize,
    pub patch_mpp: f64,
    pub stage: TrainingStage,
}

impl PatchModel {
    pub fn new(spec: BackboneSpec, input_px: usize, patch_mpp: f64, class_set: ClassSet, dtype: DType, seed: u64) -> Result<PatchModel> {
        let grid = spec.grid_for(input_px, input_px)?;
        let mut rng = crate::seed::rng(seed, &[0xe4c0de]);
        let mut store = ParamStore::new(dtype);
        let encoder = Encoder::init(&mut store, spec, grid, &mut rng)?;
        nn::init_linear(&mut store, "head", 2 * spec.embed_dim, class_set.len(), &mut rng)?;
        Ok(PatchModel {
            encoder,
            store,
            class_set,
            input_px,
            patch_mpp,
            stage: TrainingStage::Base,
        })
    }

    pub fn features(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.encoder.encode(&self.store, x, EncodeMode::PatchFeatures, ctx)
    }

    pub fn logits(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        nn::apply_linear(&self.store, "head", &self.features(x, ctx)?)
    }

    pub fn logits_from_features(&self, f: &Tensor) -> Result<Tensor> {
        nn::apply_linear(&self.store, "head", f)
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            spec: self.encoder.spec,
            grid: self.encoder.grid,
            training_stage: self.stage,
            class_set: self.class_set.to_spec(),
            model: ModelKind::Patch {
                input_px: self.input_px,
                patch_mpp: self.patch_mpp,
            },
            notes: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, &self.header())
    }

    pub fn load(path: &Path, dtype: DType) -> Result<PatchModel> {
        let (store, h): (ParamStore, CheckpointHeader) = ParamStore::load(path, dtype)?;
        let ModelKind::Patch { input_px, patch_mpp } = h.model else {
            return Err(Error::Stage(format!("{} is not a patch-model checkpoint", path.display())));
        };
        Ok(PatchModel {
            encoder: Encoder { spec: h.spec, grid: h.grid },
            store,
            class_set: ClassSet::from_spec(&h.class_set)?,
            input_px,
            patch_mpp,
            stage: h.training_stage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;
    use proptest::prelude::*;

    fn tiny() -> BackboneSpec {
        BackboneSpec {
            token_patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            drop_rates: DropRates::ZERO,
        }
    }

    fn rand_input(b: usize, h: usize, w: usize, seed: u64, dtype: DType) -> Tensor {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed, &[]);
        let v: Vec<f32> = (0..b * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, 3, h, w), &device()).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn paper_scale_feature_length_and_grid() {
        let spec = BackboneSpec {
            embed_dim: 768,
            ..Default::default()
        };
        assert_eq!(spec.feature_dim(EncodeMode::PatchFeatures), 1536);
        assert_eq!(spec.grid_for(224, 224).unwrap(), (16, 16));
        assert_eq!(spec.grid_for(896, 1792).unwrap(), (64, 128));
        assert!(matches!(spec.grid_for(225, 224), Err(Error::Shape(m)) if m.contains("14")));
    }

    #[test]
    fn adapted_table_sizes() {
        let table = Tensor::zeros((1 + 16 * 16, 4), DType::F32, &device()).unwrap();
        let t = adapt_positions(&table, (16, 16), (64, 128)).unwrap();
        assert_eq!(t.dims(), &[1 + 8192, 4]);
    }

    #[test]
    fn identity_adaptation_is_bitwise() {
        let mut rng = crate::seed::rng(5, &[]);
        let mut s = ParamStore::new(DType::F32);
        s.normal("t", &[1 + 6, 3], 1.0, &mut rng).unwrap();
        let t = s.get("t").unwrap();
        let a = adapt_positions(&t, (2, 3), (2, 3)).unwrap();
        assert_eq!(a.to_vec2::<f32>().unwrap(), t.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn constant_table_stays_constant() {
        let t = Tensor::full(0.75f32, (1 + 4, 3), &device()).unwrap();
        for to in [(1, 1), (3, 7), (8, 2)] {
            let a = adapt_positions(&t, (2, 2), to).unwrap();
            assert!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| (v - 0.75).abs() < 1e-6));
        }
    }

    #[test]
    fn bilinear_matches_scalar_resize() {
        let mut rng = crate::seed::rng(9, &[]);
        let mut s = ParamStore::new(DType::F32);
        s.normal("t", &[1 + 3 * 4, 1], 1.0, &mut rng).unwrap();
        let t = s.get("t").unwrap();
        let a = adapt_positions(&t, (3, 4), (5, 7)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let src: Vec<f32> = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let want = crate::image::bilinear_resize(&src[1..], 4, 3, 7, 5);
        assert_eq!(a[0], src[0]);
        for (x, y) in a[1..].iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut m = PatchModel::new(tiny(), 8, 0.59, ClassSet::fine(), DType::F32, 1).unwrap();
        let names: Vec<String> = m.store.names().cloned().collect();
        for n in names {
            let t = m.store.get(&n).unwrap();
            m.store.assign(&n, &t.zeros_like().unwrap()).unwrap();
        }
        m.store = m.store.deep_clone().unwrap();
        let f = m.features(&rand_input(2, 8, 8, 1, DType::F32), &Ctx::eval()).unwrap();
        assert!(f.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eval_is_deterministic_and_identity_adapt_is_exact() {
        let m = PatchModel::new(tiny(), 8, 0.59, ClassSet::fine(), DType::F32, 2).unwrap();
        let x = rand_input(3, 8, 8, 2, DType::F32);
        let a = m.features(&x, &Ctx::eval()).unwrap().to_vec2::<f32>().unwrap();
        let b = m.features(&x, &Ctx::eval()).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 16);
        let mut store = m.store.deep_clone().unwrap();
        let enc = m.encoder.adapt(&mut store, m.encoder.grid).unwrap();
        let c = enc.encode(&store, &x, EncodeMode::PatchFeatures, &Ctx::eval()).unwrap().to_vec2::<f32>().unwrap();
        for (r, s) in a.iter().zip(&c) {
            for (u, v) in r.iter().zip(s) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn thumbnail_mode_is_cls() {
        let m = PatchModel::new(tiny(), 8, 0.59, ClassSet::fine(), DType::F32, 2).unwrap();
        let x = rand_input(1, 8, 16, 4, DType::F32);
        let out = m.encoder.forward(&m.store, &x, &Ctx::eval()).unwrap();
        assert_eq!(out.grid, (2, 4));
        assert_eq!(out.tokens.dims(), &[1, 8, 8]);
        let c = Encoder::pool(&out, EncodeMode::Thumbnail).unwrap();
        assert_eq!(c.dims(), &[1, 8]);
    }

    #[test]
    fn checkpoint_round_trip_keeps_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = PatchModel::new(tiny(), 8, 0.59, ClassSet::coarse(), DType::F32, 3).unwrap();
        m.stage = TrainingStage::PatchFinetuned;
        let p = dir.path().join("m.safetensors");
        m.save(&p).unwrap();
        let l = PatchModel::load(&p, DType::F32).unwrap();
        assert_eq!(l.stage, TrainingStage::PatchFinetuned);
        assert_eq!(l.class_set, ClassSet::coarse());
        let x = rand_input(2, 8, 8, 7, DType::F32);
        assert_eq!(
            m.logits(&x, &Ctx::eval()).unwrap().to_vec2::<f32>().unwrap(),
            l.logits(&x, &Ctx::eval()).unwrap().to_vec2::<f32>().unwrap()
        );
    }

    /// Central differences on the input of the encoder in f64.
    #[test]
    fn input_gradients_match_finite_differences() {
        let m = PatchModel::new(tiny(), 8, 0.59, ClassSet::fine(), DType::F64, 11).unwrap();
        let x0 = rand_input(1, 8, 8, 12, DType::F64);
        let loss_of = |x: &Tensor| -> f64 {
            let f = m.features(x, &Ctx::eval()).unwrap();
            let w = Tensor::arange(0.0f64, f.dim(1).unwrap() as f64, &device()).unwrap();
            let w = ((w * 0.37).unwrap().sin()).unwrap();
            f.broadcast_mul(&w).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let var = candle_core::Var::from_tensor(&x0).unwrap();
        let f = m.features(var.as_tensor(), &Ctx::eval()).unwrap();
        let w = Tensor::arange(0.0f64, f.dim(1).unwrap() as f64, &device()).unwrap();
        let w = ((w * 0.37).unwrap().sin()).unwrap();
        let loss = f.broadcast_mul(&w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-3;
        let mut rng = crate::seed::rng(13, &[]);
        use rand::Rng;
        for _ in 0..10 {
            let i = rng.random_range(0..base.len());
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let t = |v: Vec<f64>| Tensor::from_vec(v, x0.dims(), &device()).unwrap();
            let num = (loss_of(&t(plus)) - loss_of(&t(minus))) / (2.0 * eps);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-2, "probe {i}: numeric {num} analytic {}", g[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn grid_bookkeeping(gh in 1usize..5, gw in 1usize..5) {
            let m = PatchModel::new(tiny(), 8, 0.59, ClassSet::fine(), DType::F32, 2).unwrap();
            let x = rand_input(1, gh * 4, gw * 4, 3, DType::F32);
            let out = m.encoder.forward(&m.store, &x, &Ctx::eval()).unwrap();
            prop_assert_eq!(out.grid, (gh, gw));
            prop_assert_eq!(out.tokens.dim(1).unwrap(), gh * gw);
        }
    }
}

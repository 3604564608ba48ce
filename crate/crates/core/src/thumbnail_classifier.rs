//! Single-pass slide classifier: the encoder reads a whole padded thumbnail
//! and a two-layer head classifies its CLS token.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::aggregation::{softmax, Method, SlidePrediction};
use crate::backbone::{
    images_to_tensor, BackboneSpec, CheckpointHeader, EncodeMode, Encoder, ModelKind, Normalization, PatchModel,
    TrainingStage,
};
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, ParamStore};
use crate::slide_io::{Resolution, Thumbnail};
use crate::taxonomy::ClassSet;

pub const HIDDEN: [usize; 2] = [512, 64];

/// Encoder laid out for one thumbnail resolution plus the classification
/// head `fc1 -> PReLU -> BN -> dropout -> fc2 -> PReLU -> BN -> dropout -> out`.
pub struct ThumbnailModel {
    pub encoder: Encoder,
    pub store: ParamStore,
    pub class_set: ClassSet,
    pub resolution: Resolution,
    pub stage: TrainingStage,
    pub head_dropout: f64,
}

fn init_head(store: &mut ParamStore, d: usize, classes: usize, seed: u64) -> Result<()> {
    let mut rng = crate::seed::rng(seed, &[0x7a11]);
    nn::init_linear(store, "head.fc1", d, HIDDEN[0], &mut rng)?;
    store.constant("head.act1.slope", &[HIDDEN[0]], 0.25)?;
    nn::init_batch_norm(store, "head.bn1", HIDDEN[0])?;
    nn::init_linear(store, "head.fc2", HIDDEN[0], HIDDEN[1], &mut rng)?;
    store.constant("head.act2.slope", &[HIDDEN[1]], 0.25)?;
    nn::init_batch_norm(store, "head.bn2", HIDDEN[1])?;
    nn::init_linear(store, "head.out", HIDDEN[1], classes, &mut rng)
}

impl ThumbnailModel {
    /// Randomly initialised encoder and head.
    pub fn new(spec: BackboneSpec, resolution: Resolution, class_set: ClassSet, head_dropout: f64, dtype: DType, seed: u64) -> Result<Self> {
        let grid = spec.grid_for(resolution.height as usize, resolution.width as usize)?;
        let mut store = ParamStore::new(dtype);
        let mut rng = crate::seed::rng(seed, &[0xe4c0de]);
        let encoder = Encoder::init(&mut store, spec, grid, &mut rng)?;
        init_head(&mut store, spec.embed_dim, class_set.len(), seed)?;
        Ok(ThumbnailModel {
            encoder,
            store,
            class_set,
            resolution,
            stage: TrainingStage::Base,
            head_dropout,
        })
    }

    /// Copies the encoder weights of `src` (any grid), re-lays its positional
    /// table for `resolution` and attaches a fresh head. `spec` supplies the
    /// drop rates for fine-tuning; its shape must match the source.
    pub fn from_encoder(
        src_encoder: &Encoder,
        src_store: &ParamStore,
        spec: BackboneSpec,
        resolution: Resolution,
        class_set: ClassSet,
        head_dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        let s = src_encoder.spec;
        if (s.token_patch_size, s.embed_dim, s.depth, s.heads, s.mlp_ratio)
            != (spec.token_patch_size, spec.embed_dim, spec.depth, spec.heads, spec.mlp_ratio)
        {
            return Err(Error::Config("thumbnail backbone shape differs from the source encoder".into()));
        }
        let grid = spec.grid_for(resolution.height as usize, resolution.width as usize)?;
        let mut store = ParamStore::new(src_store.dtype());
        let prefix = format!("{}.", Encoder::prefix());
        for name in src_store.names().filter(|n| n.starts_with(&prefix)) {
            store.insert(name, src_store.get(name)?.copy()?)?;
        }
        let encoder = Encoder { spec, grid: src_encoder.grid }.adapt(&mut store, grid)?;
        init_head(&mut store, spec.embed_dim, class_set.len(), seed)?;
        Ok(ThumbnailModel {
            encoder,
            store,
            class_set,
            resolution,
            stage: TrainingStage::Base,
            head_dropout,
        })
    }

    pub fn from_patch_model(patch: &PatchModel, spec: BackboneSpec, resolution: Resolution, class_set: ClassSet, head_dropout: f64, seed: u64) -> Result<Self> {
        Self::from_encoder(&patch.encoder, &patch.store, spec, resolution, class_set, head_dropout, seed)
    }

    pub fn head(&self, cls: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let s = &self.store;
        let mut h = nn::apply_linear(s, "head.fc1", cls)?;
        h = nn::prelu(&h, &s.get("head.act1.slope")?)?;
        h = nn::batch_norm(&h, s, "head.bn1", ctx)?;
        h = nn::dropout(&h, self.head_dropout, ctx)?;
        h = nn::apply_linear(s, "head.fc2", &h)?;
        h = nn::prelu(&h, &s.get("head.act2.slope")?)?;
        h = nn::batch_norm(&h, s, "head.bn2", ctx)?;
        h = nn::dropout(&h, self.head_dropout, ctx)?;
        nn::apply_linear(s, "head.out", &h)
    }

    pub fn logits(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let cls = self.encoder.encode(&self.store, x, EncodeMode::Thumbnail, ctx)?;
        self.head(&cls, ctx)
    }

    pub fn check_input(&self, thumb: &Thumbnail) -> Result<()> {
        if thumb.resolution() != self.resolution {
            return Err(Error::Shape(format!(
                "thumbnail is {}, model is configured for {}",
                thumb.resolution(),
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            spec: self.encoder.spec,
            grid: self.encoder.grid,
            training_stage: self.stage,
            class_set: self.class_set.to_spec(),
            model: ModelKind::Thumbnail {
                resolution: (self.resolution.width, self.resolution.height),
            },
            notes: serde_json::json!({ "head_dropout": self.head_dropout }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, &self.header())
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let (store, h): (ParamStore, CheckpointHeader) = ParamStore::load(path, dtype)?;
        let ModelKind::Thumbnail { resolution } = h.model else {
            return Err(Error::Stage(format!("{} is not a thumbnail checkpoint", path.display())));
        };
        Ok(ThumbnailModel {
            encoder: Encoder { spec: h.spec, grid: h.grid },
            store,
            class_set: ClassSet::from_spec(&h.class_set)?,
            resolution: Resolution::new(resolution.0, resolution.1),
            stage: h.training_stage,
            head_dropout: h.notes.get("head_dropout").and_then(|v| v.as_f64()).unwrap_or(0.0),
        })
    }
}

pub fn thumbnail_predict(slide_id: &str, thumb: &Thumbnail, model: &ThumbnailModel, norm: &Normalization) -> Result<SlidePrediction> {
    model.check_input(thumb)?;
    let x = images_to_tensor(&[&thumb.pixels], norm, model.store.dtype())?;
    let logits: Vec<f64> = model.logits(&x, &Ctx::eval())?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(SlidePrediction {
        slide_id: slide_id.to_string(),
        method: Method::Thumbnail,
        class_set: model.class_set.name(),
        probs: softmax(&logits),
        attention: None,
        patch_votes: None,
        round_probs: None,
    })
}

//! The assembled network: encoder, five decoder stages (deepest first) joined
//! by stage-wise feature extraction, and the full-resolution refinement.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};

use crate::config::ModelConfig;
use crate::decoder::DecoderStage;
use crate::encoder::{BackboneKind, Encoder, LEVEL_STRIDES};
use crate::error::{io, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{rng_from_seed, Builder, ParamGroup, ParamStore};
use crate::refinement::Refinement;
use crate::sfe::{Sfe, StageOutput};
use crate::tensor::{Float, Tensor};

/// Prefix under which backbone parameters are registered.
pub const BACKBONE_PREFIX: &str = "encoder.backbone.";

#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    /// Stage predictions at strides 32, 16, 8, 4, 2.
    pub stages: Vec<StageOutput<T>>,
    pub final_sal: Var<T>,
    pub final_ctr: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// Deepest first.
    pub stages: Vec<DecoderStage>,
    pub sfes: Vec<Sfe>,
    pub refinement: Option<Refinement>,
}

impl Model {
    /// Registers every parameter in `store` with deterministic random initialisation.
    pub fn build<T: Float>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut root = Builder::new(store, rng, ParamGroup::Decoder);
        let encoder = Encoder::new(&mut root.sub("encoder"), &config.backbone, c)?;
        let mut stages = Vec::with_capacity(5);
        let mut sfes = Vec::with_capacity(5);
        for s in 0..5 {
            let stride = LEVEL_STRIDES[4 - s];
            let mut sb = root.sub(&format!("decoder.s{stride}"));
            stages.push(DecoderStage::new(&mut sb.sub("rcsb"), c, config.rcsb(config.g_list[5 - s]))?);
            sfes.push(Sfe::new(&mut sb.sub("sfe"), c, config.toggles.sfe, s < 4));
        }
        let refinement = if config.toggles.refinement {
            Some(Refinement::new(&mut root.sub("refinement"), c, config.rcsb(config.g_list[0]))?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            stages,
            sfes,
            refinement,
        })
    }

    pub fn new<T: Float>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let model = Self::build(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Builds the model and, for the pretrained backbone, loads its weights.
    pub fn initialise<T: Float>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let (model, mut store) = Self::new(config, seed)?;
        if config.backbone.kind == BackboneKind::Resnet50Pretrained {
            let path = config.backbone.weights().ok_or_else(|| {
                Error::Config("resnet50_pretrained backbone needs model.backbone.weights_path".into())
            })?;
            load_backbone_weights(&mut store, path)?;
        }
        Ok((model, store))
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, image: &Var<T>) -> Result<ModelOutput<T>> {
        let feats = self.encoder.forward(g, image)?;
        let mut carried: Option<Var<T>> = None;
        let mut stages = Vec::with_capacity(5);
        for (s, (stage, sfe)) in self.stages.iter().zip(&self.sfes).enumerate() {
            let streams = stage.forward(g, &feats.levels[4 - s], carried.as_ref())?;
            let out = sfe.forward(g, &streams)?;
            carried = out.next_features.clone();
            stages.push(out);
        }
        let last = stages.last().expect("five stages");
        let (final_sal, final_ctr) = match &self.refinement {
            Some(r) => {
                let sal_prob = g.upsample2x(&g.sigmoid(&last.sal_logits))?;
                let ctr_prob = g.upsample2x(&g.sigmoid(&last.ctr_logits))?;
                r.refine(g, image, &sal_prob, &ctr_prob)?
            }
            None => (g.upsample2x(&last.sal_logits)?, g.upsample2x(&last.ctr_logits)?),
        };
        Ok(ModelOutput {
            stages,
            final_sal,
            final_ctr,
        })
    }

    /// Saliency and contour probabilities `[n, 1, h, w]` in evaluation mode.
    pub fn predict<T: Float>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let g = Graph::inference(store);
        let x = g.input(images.clone());
        let out = self.forward(&g, &x)?;
        Ok((
            g.sigmoid(&out.final_sal).value().clone(),
            g.sigmoid(&out.final_ctr).value().clone(),
        ))
    }
}

/// Trainable parameter totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub encoder: usize,
    pub decoder: usize,
    /// Keyed by the first two name components, e.g. `decoder.s32`.
    pub modules: BTreeMap<String, usize>,
}

pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    let (_, store) = Model::new::<f32>(config, 0)?;
    Ok(count_store(&store))
}

pub fn count_store<T: Float>(store: &ParamStore<T>) -> ParamCount {
    let mut encoder = 0;
    let mut decoder = 0;
    for (_, e) in store.trainable() {
        match e.group {
            ParamGroup::Encoder => encoder += e.value.numel(),
            ParamGroup::Decoder => decoder += e.value.numel(),
        }
    }
    ParamCount {
        total: encoder + decoder,
        encoder,
        decoder,
        modules: store.breakdown(2),
    }
}

/// Reads torchvision-named ResNet-50 tensors (`conv1.weight`, `layer3.5.bn2.running_var`, ...)
/// into the backbone. `fc.*` and `num_batches_tracked` are ignored; every
/// backbone parameter and buffer must be present.
pub fn load_backbone_weights<T: Float>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let st = SafeTensors::deserialize(&bytes).map_err(|e| fail(e.to_string()))?;
    let mut seen = 0;
    for (name, view) in st.tensors() {
        if name.starts_with("fc.") || name.ends_with("num_batches_tracked") {
            continue;
        }
        let full = format!("{BACKBONE_PREFIX}{name}");
        let id = store
            .find(&full)
            .ok_or_else(|| fail(format!("unexpected tensor {name}")))?;
        let values = decode_floats::<T>(view.dtype(), view.data()).map_err(fail)?;
        let shape = store.get(id).shape();
        if values.len() != shape.iter().product::<usize>() {
            return Err(fail(format!(
                "{name}: {} values for parameter of shape {shape:?}",
                values.len()
            )));
        }
        store.set(id, Tensor::from_vec(shape, values)?)?;
        seen += 1;
    }
    let expected = store
        .entries()
        .filter(|(_, e)| e.name.starts_with(BACKBONE_PREFIX))
        .count();
    if seen != expected {
        return Err(fail(format!("found {seen} of {expected} backbone tensors")));
    }
    Ok(())
}

pub(crate) fn decode_floats<T: Float>(dtype: Dtype, data: &[u8]) -> std::result::Result<Vec<T>, String> {
    match dtype {
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|b| T::c(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect()),
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|b| T::c(f64::from_le_bytes(b.try_into().unwrap())))
            .collect()),
        other => Err(format!("unsupported dtype {other:?}")),
    }
}

//! Trainable state of the whole pipeline and its on-disk archive.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crr::{ClassMemory, CrrParams, CrrVars, SlotLayout};
use crate::encoder::{default_layers, ConvLayer, ConvVars, EncoderParams, LayerSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::harness::synth::write_json;
use crate::hyper::Hyperparams;
use crate::io;
use crate::pcm::{PcmParams, PcmVars};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

/// Which optional branches take part in the forward pass and loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub pcm_on: bool,
    pub crr_on: bool,
    pub dcl_on: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const FULL: Self = Self { pcm_on: true, crr_on: true, dcl_on: true };
    pub const BASELINE: Self = Self { pcm_on: false, crr_on: false, dcl_on: false };

    /// Full model, each single ablation, and the all-off baseline.
    pub fn variants() -> [(&'static str, Self); 5] {
        [
            ("full", Self::FULL),
            ("pcm_off", Self { pcm_on: false, ..Self::FULL }),
            ("crr_off", Self { crr_on: false, ..Self::FULL }),
            ("dcl_off", Self { dcl_on: false, ..Self::FULL }),
            ("baseline", Self::BASELINE),
        ]
    }
}

/// Static description of a model: everything except tensor values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub hyperparams: Hyperparams,
    pub image_dims: (usize, usize),
    pub flags: AblationFlags,
    pub encoder_layers: Vec<LayerSpec>,
    pub layout: SlotLayout,
    /// Classes the memory may hold; the ones seen in training.
    pub base_classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub shape: ModelShape,
    pub encoder: EncoderParams,
    pub pcm: PcmParams,
    pub crr: CrrParams,
    pub memory: ClassMemory,
    /// Gradient steps taken so far.
    pub iteration: usize,
}

/// Graph handles of every trainable tensor of a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: Vec<ConvVars>,
    pub pcm: PcmVars,
    pub crr: CrrVars,
}

impl ModelVars {
    /// Same order as [`Model::tensors`].
    pub fn all(&self) -> Vec<crate::graph::Var> {
        let mut v: Vec<_> = self.encoder.iter().flat_map(|c| [c.weight, c.bias]).collect();
        v.extend(self.pcm.all());
        v.extend(self.crr.all());
        v
    }
}

/// Stream ids of the seeded generators derived from one training seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const EPISODES: u64 = 1;
    pub const MEMORY: u64 = 2;
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MemoryEntry {
    capacity: usize,
    dim: usize,
    classes: Vec<TensorEntry>,
    rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    iteration: usize,
    shape: ModelShape,
    tensors: Vec<TensorEntry>,
    memory: MemoryEntry,
    /// Position of the episode sampler when the archive was written.
    rng: Option<RngState>,
}

const MODEL_FORMAT: &str = "pmcr-model-1";

impl Model {
    /// Fresh parameters for `shape` from the initialization stream of `seed`.
    pub fn init(shape: ModelShape, pcm_scale: f64, seed: u64) -> Result<Self> {
        let hp = &shape.hyperparams;
        hp.validate()?;
        if hp.kernel_h != hp.kernel_w {
            return Err(Error::Config("refinement kernel must be square".into()));
        }
        let mut rng = Rng::stream(seed, streams::INIT);
        let encoder = EncoderParams::init(&shape.encoder_layers, &mut rng)?;
        if encoder.out_channels() != hp.feature_dim {
            return Err(Error::Config(format!(
                "encoder emits {} channels but feature_dim is {}",
                encoder.out_channels(),
                hp.feature_dim
            )));
        }
        let (hl, wl) = encoder.output_dims(shape.image_dims.0, shape.image_dims.1)?;
        let pcm = PcmParams::random(hp.feature_dim, hp.head_dim, hp.heads, pcm_scale, &mut rng);
        let crr = CrrParams::init(hp, hl * wl, shape.layout, &mut rng);
        let memory = ClassMemory::new(hp.memory_per_class, hp.feature_dim, Rng::stream(seed, streams::MEMORY));
        Ok(Self { shape, encoder, pcm, crr, memory, iteration: 0 })
    }

    /// Shape for `shots`-shot episodes over `classes` dataset classes.
    pub fn shape_for(
        hp: Hyperparams,
        image_dims: (usize, usize),
        flags: AblationFlags,
        shots: usize,
        classes: usize,
        base_classes: Vec<usize>,
        encoder_layers: Option<Vec<LayerSpec>>,
    ) -> ModelShape {
        let layout = SlotLayout {
            shots,
            per_shot: hp.max_superpixels,
            classes,
            per_class: hp.memory_per_class,
            query: hp.query_descriptors,
        };
        let encoder_layers = encoder_layers.unwrap_or_else(|| default_layers(hp.feature_dim));
        ModelShape { hyperparams: hp, image_dims, flags, encoder_layers, layout, base_classes }
    }

    pub fn hp(&self) -> &Hyperparams {
        &self.shape.hyperparams
    }

    pub fn feature_dims(&self) -> Result<(usize, usize)> {
        self.encoder.output_dims(self.shape.image_dims.0, self.shape.image_dims.1)
    }

    /// Every trainable tensor with a stable name: encoder, attention banks,
    /// class-relation tensors.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        let heads = self.pcm.heads();
        for (k, t) in self.pcm.tensors().into_iter().enumerate() {
            let bank = ["support", "query", "joint"][k / (3 * heads)];
            let head = (k / 3) % heads;
            out.push((format!("pcm.{bank}.{head}.{}", ["wq", "wk", "wv"][k % 3]), t));
        }
        for (name, t) in CrrParams::NAMES.iter().zip(self.crr.tensors()) {
            out.push((format!("crr.{name}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.pcm.tensors_mut());
        out.extend(self.crr.tensors_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars { encoder: self.encoder.bind(g), pcm: self.pcm.bind(g), crr: self.crr.bind(g) }
    }

    /// Writes `manifest.json` and one `.pmt` per tensor into `dir`.
    pub fn save(&self, dir: &Path, sampler: Option<RngState>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        for (name, t) in self.tensors() {
            let file = format!("{name}.pmt");
            io::write_tensor(dir.join(&file), t)?;
            tensors.push(TensorEntry { name, file, shape: t.dims().to_vec() });
        }
        let mut classes = Vec::new();
        for c in self.memory.classes() {
            let t = self.memory.entries(c);
            let file = format!("memory.{c}.pmt");
            io::write_tensor(dir.join(&file), &t)?;
            classes.push(TensorEntry { name: c.to_string(), file, shape: t.dims().to_vec() });
        }
        let manifest = ModelManifest {
            format: MODEL_FORMAT.into(),
            iteration: self.iteration,
            shape: self.shape.clone(),
            tensors,
            memory: MemoryEntry {
                capacity: self.memory.capacity(),
                dim: self.memory.dim(),
                classes,
                rng: self.memory.rng_state(),
            },
            rng: sampler,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Reads an archive written by [`Model::save`]; also returns the stored
    /// sampler position.
    pub fn load(dir: &Path) -> Result<(Self, Option<RngState>)> {
        let m: ModelManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if m.format != MODEL_FORMAT {
            return Err(Error::Config(format!("unknown model format {}", m.format)));
        }
        let mut files: BTreeMap<String, Tensor> = BTreeMap::new();
        for e in &m.tensors {
            let t = io::read_tensor(dir.join(&e.file))?;
            if t.dims() != e.shape.as_slice() {
                return Err(Error::dims("Model::load", format!("{}: {:?} vs manifest {:?}", e.name, t.dims(), e.shape)));
            }
            files.insert(e.name.clone(), t);
        }
        let mut model = Self::init(m.shape.clone(), 1.0, 0)?;
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.tensors_mut()) {
            let t = files.remove(name).ok_or_else(|| Error::Config(format!("archive lacks tensor {name}")))?;
            if t.dims() != slot.dims() {
                return Err(Error::dims("Model::load", format!("{name}: {:?} vs {:?}", t.dims(), slot.dims())));
            }
            *slot = t;
        }
        if let Some(extra) = files.keys().next() {
            return Err(Error::Config(format!("archive has unexpected tensor {extra}")));
        }
        let layers: Vec<ConvLayer> = model.encoder.layers.clone();
        model.encoder = EncoderParams::from_layers(layers)?;
        let mut buffers = BTreeMap::new();
        for e in &m.memory.classes {
            let class: usize = e.name.parse().map_err(|_| Error::Config(format!("bad memory class {}", e.name)))?;
            buffers.insert(class, io::read_tensor(dir.join(&e.file))?);
        }
        model.memory = ClassMemory::restore(m.memory.capacity, m.memory.dim, buffers, m.memory.rng)?;
        model.iteration = m.iteration;
        Ok((model, m.rng))
    }

    /// Parameters rounded to the archive precision.
    pub fn quantized(&self) -> Self {
        let mut m = self.clone();
        for t in m.tensors_mut() {
            *t = t.quantize_f32();
        }
        m
    }
}


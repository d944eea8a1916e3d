//! Episodic training with momentum SGD and the ablation driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crr::SuperpixelCentroids;
use crate::encoder::LayerSpec;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::harness::eval::{dice_slice, evaluate_model, mean_dice, miou, write_metrics, MetricsRow};
use crate::harness::model::{streams, AblationFlags, Model};
use crate::harness::pipeline::{forward, losses_of, Losses};
use crate::harness::synth::{write_json, Dataset, Split};
use crate::hyper::Hyperparams;
use crate::io;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Training run description, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hyperparams: Hyperparams,
    /// Gradient steps.
    pub iterations: usize,
    pub seed: u64,
    pub flags: AblationFlags,
    /// Dataset directory; relative paths are resolved against the config file.
    pub data: PathBuf,
    /// Support shots per episode.
    pub shots: usize,
    pub momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Archive the model every this many steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Attention weights start uniform in `±scale/√D_l`.
    pub pcm_init_scale: f64,
    pub encoder_layers: Option<Vec<LayerSpec>>,
    /// Seeds of `pmcr ablate`.
    pub ablation_seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyperparams: Hyperparams::default(),
            iterations: 2000,
            seed: 0,
            flags: AblationFlags::FULL,
            data: PathBuf::from("data"),
            shots: 1,
            momentum: 0.9,
            clip_norm: 5.0,
            checkpoint_every: 1000,
            pcm_init_scale: 0.1,
            encoder_layers: None,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.clip_norm >= 0.0) || !(self.pcm_init_scale >= 0.0) {
            return Err(Error::Config("momentum in [0, 1), clip_norm and pcm_init_scale >= 0".into()));
        }
        Ok(())
    }

    /// Reads a config and resolves `data` against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if cfg.data.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data = dir.join(&cfg.data);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: Model,
    pub rows: Vec<MetricsRow>,
    pub skipped: usize,
}

/// Step-by-step trainer over the base classes of a dataset.
pub struct Trainer {
    cfg: TrainConfig,
    data: Dataset,
    model: Model,
    velocity: Vec<Tensor>,
    sampler: Rng,
    rows: Vec<MetricsRow>,
    timings: Vec<(usize, f64)>,
    skipped: usize,
}

const MAX_CONSECUTIVE_SKIPS: usize = 100;

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.scans(Split::Train).is_empty() {
            return Err(Error::EmptyScan);
        }
        let shape = Model::shape_for(
            cfg.hyperparams.clone(),
            data.image_dims(),
            cfg.flags,
            cfg.shots,
            data.spec.classes.len(),
            data.spec.base.clone(),
            cfg.encoder_layers.clone(),
        );
        let model = Model::init(shape, cfg.pcm_init_scale, cfg.seed)?;
        let velocity = model.tensors().iter().map(|(_, t)| Tensor::zeros(t.dims())).collect();
        let sampler = Rng::stream(cfg.seed, streams::EPISODES);
        Ok(Self { cfg, data, model, velocity, sampler, rows: Vec::new(), timings: Vec::new(), skipped: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Base class, query slice and `shots` support slices at the matching
    /// relative depth in other training scans.
    pub fn sample_episode(&mut self) -> Result<Episode> {
        let train = self.data.scans(Split::Train);
        let base = &self.data.spec.base;
        let class = base[self.sampler.below(base.len())];
        let qi = self.sampler.below(train.len());
        let q = train[qi];
        let z = self.sampler.below(q.depth());
        let others: Vec<usize> = (0..train.len()).filter(|&i| i != qi).collect();
        let picks: Vec<usize> = if others.is_empty() {
            vec![qi; self.cfg.shots]
        } else {
            let k = self.cfg.shots.min(others.len());
            let mut p: Vec<usize> = self.sampler.choose_distinct(others.len(), k).into_iter().map(|i| others[i]).collect();
            while p.len() < self.cfg.shots {
                p.push(p[p.len() % k]);
            }
            p
        };
        let supports: Vec<_> = picks
            .iter()
            .map(|&si| {
                let s = train[si];
                let zs = if q.depth() > 1 { (z * (s.depth() - 1) + (q.depth() - 1) / 2) / (q.depth() - 1) } else { s.depth() / 2 };
                (s, zs)
            })
            .collect();
        self.data.episode(class, (q, z), &supports)
    }

    /// One gradient step on a freshly sampled episode; `None` when the
    /// episode had to be skipped for lack of support foreground.
    pub fn step(&mut self, out: Option<&Path>) -> Result<Option<MetricsRow>> {
        let started = Instant::now();
        let e = self.sample_episode()?;
        let flags = self.cfg.flags;
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g);
        let f = match forward(&mut g, &self.model, &vars, &e, flags, true) {
            Ok(f) => f,
            Err(Error::EmptyForeground) => {
                self.skipped += 1;
                return Ok(None);
            }
            Err(err) => return Err(err),
        };
        let it = self.model.iteration;
        let losses: Losses = losses_of(&g, &f).expect("training episodes carry query masks");
        let loss = f.loss.expect("training episodes carry query masks");
        if !losses.all.is_finite() {
            return Err(self.non_finite(it, &e, losses, out));
        }
        let grads = g.backward(loss);
        let grads: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get(v)).collect();
        let norm = grads.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(self.non_finite(it, &e, losses, out));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        let lr = self.cfg.hyperparams.learning_rate(it);
        let mu = self.cfg.momentum;
        for ((p, v), gr) in self.model.tensors_mut().into_iter().zip(&mut self.velocity).zip(&grads) {
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                *vi = mu * *vi + clip * gi;
                *pi -= lr * *vi;
            }
        }
        if let Some(rep) = &f.crr {
            for c in &rep.centroids {
                self.model.memory.update(&SuperpixelCentroids { centroids: c.clone(), class_id: e.class_id })?;
            }
        }
        let pred = crate::loss_head::ProbabilityMap { p: g.value(f.probs).clone() }.argmax();
        let gt = e.query_mask.as_ref().expect("training episodes carry query masks");
        let row = MetricsRow::new(it, e.class_id, dice_slice(&pred, gt)?, miou(&pred, gt, 2)?, losses, it);
        self.model.iteration += 1;
        self.rows.push(row.clone());
        self.timings.push((it, started.elapsed().as_secs_f64() * 1e3));
        Ok(Some(row))
    }

    fn non_finite(&self, iteration: usize, e: &Episode, losses: Losses, out: Option<&Path>) -> Error {
        let dump = out.and_then(|o| dump_episode(&o.join(format!("nonfinite_{iteration:06}")), e, losses).ok());
        Error::NonFiniteLoss { iteration, dump }
    }

    /// Runs the remaining steps. With `out`, writes `metrics.csv` (timing
    /// column empty), `timing.csv`, `config.json`, periodic checkpoints and
    /// the final archive in `model/`.
    pub fn run(mut self, out: Option<&Path>) -> Result<TrainSummary> {
        if let Some(o) = out {
            fs::create_dir_all(o)?;
            self.cfg.save(&o.join("config.json"))?;
        }
        let mut consecutive = 0;
        while self.model.iteration < self.cfg.iterations {
            match self.step(out)? {
                Some(row) => {
                    consecutive = 0;
                    let it = self.model.iteration;
                    if it % 100 == 0 {
                        log::info!("iteration {it}: loss {:.4}, dice {:.3}", row.loss_all, row.dice);
                    }
                    if let Some(o) = out {
                        if self.cfg.checkpoint_every > 0 && it % self.cfg.checkpoint_every == 0 && it < self.cfg.iterations {
                            self.model.save(&o.join("checkpoints").join(format!("iter_{it:06}")), Some(self.sampler.state()))?;
                        }
                    }
                }
                None => {
                    consecutive += 1;
                    if consecutive >= MAX_CONSECUTIVE_SKIPS {
                        return Err(Error::EmptyForeground);
                    }
                }
            }
        }
        if let Some(o) = out {
            self.save(o)?;
        }
        Ok(TrainSummary { model: self.model, rows: self.rows, skipped: self.skipped })
    }

    /// Writes metrics, timings and the current archive under `out`.
    pub fn save(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        write_metrics(&out.join("metrics.csv"), &self.rows)?;
        let mut w = csv::Writer::from_path(out.join("timing.csv"))?;
        w.write_record(["iteration", "wall_ms"])?;
        for (it, ms) in &self.timings {
            w.write_record([it.to_string(), format!("{ms:.3}")])?;
        }
        w.flush()?;
        self.model.save(&out.join("model"), Some(self.sampler.state()))
    }
}

fn dump_episode(dir: &Path, e: &Episode, losses: Losses) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    io::write_tensor(dir.join("query_image.pmt"), &e.query_image)?;
    if let Some(m) = &e.query_mask {
        io::write_mask(dir.join("query_mask.pmt"), m)?;
    }
    for (k, s) in e.support.iter().enumerate() {
        io::write_tensor(dir.join(format!("support_{k}_image.pmt")), &s.image)?;
        io::write_mask(dir.join(format!("support_{k}_mask.pmt")), &s.mask)?;
    }
    let info = serde_json::json!({
        "class_id": e.class_id,
        "loss_se": losses.se,
        "loss_be": losses.be,
        "loss_dc": losses.dc,
        "loss_all": losses.all,
    });
    write_json(&dir.join("episode.json"), &info)?;
    Ok(dir.to_path_buf())
}

/// Loads the dataset named by `cfg.data`, trains, and writes everything under `out`.
pub fn train(cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    let data = Dataset::load(&cfg.data)?;
    Trainer::new(cfg.clone(), data)?.run(Some(out))
}

/// Novel-class Dice of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub novel_dice: f64,
    pub final_loss: f64,
}

/// Trains every `(name, flags)` variant for each seed and scores novel
/// classes on the test scans.
pub fn ablate(cfg: &TrainConfig, data: &Dataset, seeds: &[u64], variants: &[(&str, AblationFlags)]) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for &(name, flags) in variants {
        for &seed in seeds {
            let c = TrainConfig { flags, seed, ..cfg.clone() };
            let summary = Trainer::new(c, data.clone())?.run(None)?;
            let rows = evaluate_model(&summary.model, data, &data.spec.novel, cfg.hyperparams.chunks)?;
            let tail = summary.rows.len().saturating_sub(100);
            let recent = &summary.rows[tail..];
            let final_loss = recent.iter().map(|r| r.loss_all).sum::<f64>() / recent.len().max(1) as f64;
            log::info!("{name} seed {seed}: novel dice {:.4}", mean_dice(&rows));
            runs.push(AblationRun { variant: name.to_string(), seed, novel_dice: mean_dice(&rows), final_loss });
        }
    }
    Ok(runs)
}

/// Mean novel Dice of `variant` over its seeds.
pub fn variant_mean(runs: &[AblationRun], variant: &str) -> Option<f64> {
    let v: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(|r| r.novel_dice).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

//! Synthetic multi-class "scans": stacks of slices in which every class is a
//! textured shape whose position, size and orientation drift smoothly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::{Episode, Shot};
use crate::error::{Error, Result};
use crate::io;
use crate::mask::Mask;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Ring,
    Blob,
}

/// Appearance and variation ranges of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeFamily,
    /// Mean RGB intensity.
    pub color: [f64; 3],
    /// Per-scan uniform jitter added to each colour channel.
    pub color_jitter: f64,
    /// Range of the shape's area as a fraction of the image area.
    pub scale: [f64; 2],
    /// Aspect, rotation and boundary-wobble strength in `[0, 0.5)`.
    pub deformation: f64,
    /// Centre displacement in pixels from the first to the last slice.
    pub drift: f64,
}

/// Description of a synthetic benchmark. Label `k + 1` in a mask marks class
/// `k`; 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub classes: Vec<ClassSpec>,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub image_size: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Slices per scan.
    pub depth: usize,
    pub train_scans: usize,
    pub test_scans: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        let class = |name: &str, shape, color| ClassSpec {
            name: name.into(),
            shape,
            color,
            color_jitter: 0.08,
            scale: [0.02, 0.05],
            deformation: 0.25,
            drift: 4.0,
        };
        Self {
            classes: vec![
                class("ellipse", ShapeFamily::Ellipse, [0.85, 0.3, 0.3]),
                class("ring", ShapeFamily::Ring, [0.3, 0.8, 0.35]),
                class("blob", ShapeFamily::Blob, [0.35, 0.4, 0.9]),
            ],
            base: vec![0, 1],
            novel: vec![2],
            image_size: 64,
            noise: 0.05,
            depth: 9,
            train_scans: 8,
            test_scans: 4,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let c = self.classes.len();
        if c == 0 || c > 254 {
            return bad(format!("{c} classes; need 1..=254"));
        }
        if self.base.is_empty() {
            return bad("at least one base class is required".into());
        }
        for &k in self.base.iter().chain(&self.novel) {
            if k >= c {
                return bad(format!("class {k} out of range"));
            }
        }
        if let Some(k) = self.base.iter().find(|k| self.novel.contains(k)) {
            return bad(format!("class {k} is both base and novel"));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return bad(format!("image size {} must be a multiple of 4 and at least 8", self.image_size));
        }
        if self.depth == 0 || self.train_scans == 0 || self.test_scans == 0 {
            return bad("depth and scan counts must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative".into());
        }
        for cl in &self.classes {
            let [lo, hi] = cl.scale;
            if !(lo > 0.0 && lo <= hi && hi <= 0.25) {
                return bad(format!("class {}: scale range must satisfy 0 < lo <= hi <= 0.25", cl.name));
            }
            if !(0.0..0.5).contains(&cl.deformation) || !(cl.color_jitter >= 0.0) || !(cl.drift >= 0.0) {
                return bad(format!("class {}: deformation in [0, 0.5), jitter and drift >= 0", cl.name));
            }
            if cl.color.iter().any(|v| !v.is_finite()) {
                return bad(format!("class {}: colour must be finite", cl.name));
            }
        }
        Ok(())
    }

    pub fn label(class: usize) -> u8 {
        class as u8 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub id: String,
    pub split: Split,
    pub images: Vec<Tensor>,
    pub masks: Vec<Mask>,
}

impl Scan {
    pub fn depth(&self) -> usize {
        self.images.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub seed: u64,
    pub scans: Vec<Scan>,
}

#[derive(Serialize, Deserialize)]
struct ScanEntry {
    id: String,
    split: Split,
    images: Vec<String>,
    masks: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    seed: u64,
    spec: SyntheticTaskSpec,
    scans: Vec<ScanEntry>,
}

const DATASET_FORMAT: &str = "pmcr-dataset-1";

/// Shape parameters of one class in one scan, interpolated along depth.
struct Track {
    family: ShapeFamily,
    color: [f64; 3],
    c0: (f64, f64),
    c1: (f64, f64),
    area0: f64,
    area1: f64,
    angle0: f64,
    angle1: f64,
    aspect: f64,
    wobble: [(f64, f64); 3],
}

impl Track {
    fn sample(cl: &ClassSpec, slot: usize, classes: usize, size: f64, rng: &mut Rng) -> Self {
        let anchor = if classes == 1 {
            (size / 2.0, size / 2.0)
        } else {
            let a = 2.0 * PI * slot as f64 / classes as f64 + rng.range(-0.15, 0.15);
            let r = 0.27 * size;
            (size / 2.0 + r * a.cos(), size / 2.0 + r * a.sin())
        };
        let jitter = 0.04 * size;
        let c0 = (anchor.0 + rng.range(-jitter, jitter), anchor.1 + rng.range(-jitter, jitter));
        let dir = rng.range(0.0, 2.0 * PI);
        let c1 = (c0.0 + cl.drift * dir.cos(), c0.1 + cl.drift * dir.sin());
        let color = cl.color.map(|c| c + rng.range(-cl.color_jitter, cl.color_jitter));
        let d = cl.deformation;
        let angle0 = rng.range(0.0, PI);
        Self {
            family: cl.shape,
            color,
            c0,
            c1,
            area0: rng.range(cl.scale[0], cl.scale[1]),
            area1: rng.range(cl.scale[0], cl.scale[1]),
            angle0,
            angle1: angle0 + d * rng.range(-PI / 2.0, PI / 2.0),
            aspect: 1.0 + d * rng.uniform(),
            wobble: [0; 3].map(|_| (d * rng.range(-0.5, 0.5), rng.range(0.0, 2.0 * PI))),
        }
    }

    /// Whether pixel centre `(x, y)` lies inside the shape at depth fraction `t`.
    fn contains(&self, t: f64, x: f64, y: f64, hw: f64) -> bool {
        let lerp = |a: f64, b: f64| a + (b - a) * t;
        let (cx, cy) = (lerp(self.c0.0, self.c1.0), lerp(self.c0.1, self.c1.1));
        let area = lerp(self.area0, self.area1) * hw;
        let th = lerp(self.angle0, self.angle1);
        let (dx, dy) = (x - cx, y - cy);
        let u = dx * th.cos() + dy * th.sin();
        let v = -dx * th.sin() + dy * th.cos();
        let sa = self.aspect.sqrt();
        match self.family {
            ShapeFamily::Ellipse => {
                let r = (area / PI).sqrt();
                (u / (r * sa)).powi(2) + (v * sa / r).powi(2) <= 1.0
            }
            ShapeFamily::Ring => {
                let r = (area / (0.75 * PI)).sqrt();
                let q = (u / (r * sa)).powi(2) + (v * sa / r).powi(2);
                (0.25..=1.0).contains(&q)
            }
            ShapeFamily::Blob => {
                let energy: f64 = self.wobble.iter().map(|(a, _)| a * a / 2.0).sum();
                let r = (area / (PI * (1.0 + energy))).sqrt();
                let phi = v.atan2(u);
                let rad = r * (1.0
                    + self.wobble.iter().enumerate().map(|(k, (a, p))| a * ((k + 2) as f64 * phi + p).cos()).sum::<f64>());
                (u * u + v * v).sqrt() <= rad
            }
        }
    }
}

fn synth_scan(spec: &SyntheticTaskSpec, id: String, split: Split, rng: &mut Rng) -> Scan {
    let n = spec.image_size;
    let size = n as f64;
    let tracks: Vec<Track> = spec
        .classes
        .iter()
        .enumerate()
        .map(|(k, cl)| Track::sample(cl, k, spec.classes.len(), size, rng))
        .collect();
    let tilt = rng.range(-0.1, 0.1);
    let mut images = Vec::with_capacity(spec.depth);
    let mut masks = Vec::with_capacity(spec.depth);
    for z in 0..spec.depth {
        let t = if spec.depth > 1 { z as f64 / (spec.depth - 1) as f64 } else { 0.0 };
        let mut mask = Mask::zeros(n, n);
        let mut img = Tensor::zeros(&[n, n, 3]);
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                let base = 0.12 + tilt * (x / size - 0.5);
                let mut px = [base; 3];
                for (k, tr) in tracks.iter().enumerate() {
                    if tr.contains(t, x, y, size * size) {
                        mask.set(i, j, SyntheticTaskSpec::label(k));
                        px = tr.color;
                    }
                }
                for (c, v) in px.iter().enumerate() {
                    let noisy = if spec.noise > 0.0 { v + spec.noise * rng.normal() } else { *v };
                    img.data_mut()[(i * n + j) * 3 + c] = noisy;
                }
            }
        }
        images.push(img.quantize_f32());
        masks.push(mask);
    }
    Scan { id, split, images, masks }
}

/// Builds the dataset in memory. Equal `(spec, seed)` give equal datasets.
pub fn synthesize(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let mut scans = Vec::with_capacity(spec.train_scans + spec.test_scans);
    for s in 0..spec.train_scans {
        scans.push(synth_scan(spec, format!("train_{s:03}"), Split::Train, &mut rng));
    }
    for s in 0..spec.test_scans {
        scans.push(synth_scan(spec, format!("test_{s:03}"), Split::Test, &mut rng));
    }
    Ok(Dataset { spec: spec.clone(), seed, scans })
}

/// Synthesizes the dataset and writes it under `out`: one directory per
/// scan holding `image_ZZ.pmt` / `mask_ZZ.pmt`, plus `manifest.json`.
pub fn generate_dataset(spec: &SyntheticTaskSpec, seed: u64, out: &Path) -> Result<Dataset> {
    let ds = synthesize(spec, seed)?;
    ds.save(out)?;
    Ok(ds)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| match e.kind() {
        std::io::ErrorKind::StorageFull => Error::DiskFull(p.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| match e.kind() {
        std::io::ErrorKind::StorageFull => Error::DiskFull(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

impl Dataset {
    pub fn save(&self, out: &Path) -> Result<()> {
        create_dir(out)?;
        let mut entries = Vec::new();
        for scan in &self.scans {
            create_dir(&out.join(&scan.id))?;
            let mut images = Vec::new();
            let mut masks = Vec::new();
            for (z, (img, m)) in scan.images.iter().zip(&scan.masks).enumerate() {
                let (fi, fm) = (format!("{}/image_{z:02}.pmt", scan.id), format!("{}/mask_{z:02}.pmt", scan.id));
                io::write_tensor(out.join(&fi), img)?;
                io::write_mask(out.join(&fm), m)?;
                images.push(fi);
                masks.push(fm);
            }
            entries.push(ScanEntry { id: scan.id.clone(), split: scan.split, images, masks });
        }
        let manifest = DatasetManifest { format: DATASET_FORMAT.into(), seed: self.seed, spec: self.spec.clone(), scans: entries };
        write_json(&out.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format != DATASET_FORMAT {
            return Err(Error::InvalidSpec(format!("unknown dataset format {}", m.format)));
        }
        m.spec.validate()?;
        let mut scans = Vec::with_capacity(m.scans.len());
        for e in m.scans {
            if e.images.len() != e.masks.len() || e.images.is_empty() {
                return Err(Error::EmptyScan);
            }
            let images = e.images.iter().map(|f| io::read_tensor(dir.join(f))).collect::<Result<Vec<_>>>()?;
            let masks = e.masks.iter().map(|f| io::read_mask(dir.join(f))).collect::<Result<Vec<_>>>()?;
            scans.push(Scan { id: e.id, split: e.split, images, masks });
        }
        Ok(Self { spec: m.spec, seed: m.seed, scans })
    }

    pub fn scans(&self, split: Split) -> Vec<&Scan> {
        self.scans.iter().filter(|s| s.split == split).collect()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.spec.image_size, self.spec.image_size)
    }

    /// Binary 1-way episode for `class`: supports are `(scan, slice)` pairs.
    pub fn episode(&self, class: usize, query: (&Scan, usize), supports: &[(&Scan, usize)]) -> Result<Episode> {
        let label = SyntheticTaskSpec::label(class);
        let support = supports
            .iter()
            .map(|(s, z)| Shot { image: s.images[*z].clone(), mask: s.masks[*z].binarize(label) })
            .collect();
        Episode::new(support, query.0.images[query.1].clone(), Some(query.0.masks[query.1].binarize(label)), class)
    }
}

/// Paths inside a dataset directory that [`Dataset::load`] reads.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

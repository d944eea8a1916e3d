//! Volumetric evaluation protocol, overlap metrics and metrics files.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::{Episode, Shot};
use crate::error::{Error, Result};
use crate::harness::model::Model;
use crate::harness::pipeline::{run_episode, Losses};
use crate::harness::synth::{Dataset, Scan, Split, SyntheticTaskSpec};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// One line of a metrics file. `wall_ms` is left empty in files that must be
/// reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode_id: usize,
    pub class_id: usize,
    pub dice: f64,
    pub miou: f64,
    pub loss_se: f64,
    pub loss_be: f64,
    pub loss_dc: f64,
    pub loss_all: f64,
    pub iteration: usize,
    pub wall_ms: Option<f64>,
}

impl MetricsRow {
    pub fn new(episode_id: usize, class_id: usize, dice: f64, miou: f64, losses: Losses, iteration: usize) -> Self {
        Self {
            episode_id,
            class_id,
            dice,
            miou,
            loss_se: losses.se,
            loss_be: losses.be,
            loss_dc: losses.dc,
            loss_all: losses.all,
            iteration,
            wall_ms: None,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `P` contiguous chunks of `0..n`; the first `n mod P` chunks get one extra
/// slice.
pub fn chunk_ranges(n: usize, p: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 {
        return Err(Error::EmptyScan);
    }
    if p == 0 {
        return Err(Error::Config("chunk count must be positive".into()));
    }
    let (base, extra) = (n / p, n % p);
    let mut start = 0;
    Ok((0..p)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Middle slice of each support chunk (lower middle for even lengths).
pub fn support_slices(n: usize, p: usize) -> Result<Vec<usize>> {
    if n < p {
        return Err(Error::Config(format!("support scan of {n} slices cannot fill {p} chunks")));
    }
    Ok(chunk_ranges(n, p)?.into_iter().map(|r| r.start + (r.len() - 1) / 2).collect())
}

/// `2|A∩B| / (|A| + |B|)` over the non-zero voxels of two equally sized
/// stacks; 1 when both are empty.
pub fn dice_volume(pred: &[Mask], gt: &[Mask]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dims("dice_volume", format!("{} vs {} slices", pred.len(), gt.len())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (a, b) in pred.iter().zip(gt) {
        if a.dims() != b.dims() {
            return Err(Error::dims("dice_volume", format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        for (&x, &y) in a.data().iter().zip(b.data()) {
            inter += usize::from(x != 0 && y != 0);
            total += usize::from(x != 0) + usize::from(y != 0);
        }
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

pub fn dice_slice(pred: &Mask, gt: &Mask) -> Result<f64> {
    dice_volume(std::slice::from_ref(pred), std::slice::from_ref(gt))
}

/// Mean over the classes present in `gt` of `|pred_c ∩ gt_c| / |pred_c ∪ gt_c|`.
pub fn miou(pred: &Mask, gt: &Mask, classes: usize) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::dims("miou", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let c = c as u8;
        let (mut inter, mut union, mut in_gt) = (0usize, 0usize, false);
        for (&a, &b) in pred.data().iter().zip(gt.data()) {
            inter += usize::from(a == c && b == c);
            union += usize::from(a == c || b == c);
            in_gt |= b == c;
        }
        if in_gt {
            sum += inter as f64 / union as f64;
            present += 1;
        }
    }
    Ok(if present == 0 { 1.0 } else { sum / present as f64 })
}

/// Slices and binary masks of one class in one scan.
#[derive(Clone, Debug)]
pub struct Volume {
    pub images: Vec<Tensor>,
    pub masks: Vec<Mask>,
}

impl Volume {
    pub fn of_class(scan: &Scan, class: usize) -> Self {
        let label = SyntheticTaskSpec::label(class);
        Self { images: scan.images.clone(), masks: scan.masks.iter().map(|m| m.binarize(label)).collect() }
    }

    pub fn depth(&self) -> usize {
        self.images.len()
    }
}

#[derive(Clone, Debug)]
pub struct VolumeEval {
    pub dice: f64,
    pub predictions: Vec<Mask>,
    /// Support slice used for each chunk.
    pub support_slices: Vec<usize>,
    pub chunks: Vec<Range<usize>>,
}

/// Splits the query scan into `chunks` parts, segments every slice of chunk
/// `j` against the middle slice of support chunk `j`, restacks the 2D
/// predictions and scores them with 3D Dice.
pub fn evaluate_volume<F>(query: &Volume, support: &Volume, chunks: usize, class_id: usize, mut predict: F) -> Result<VolumeEval>
where
    F: FnMut(&Episode) -> Result<Mask>,
{
    if query.depth() == 0 || support.depth() == 0 {
        return Err(Error::EmptyScan);
    }
    let ranges = chunk_ranges(query.depth(), chunks)?;
    let sup = support_slices(support.depth(), chunks)?;
    let mut predictions = Vec::with_capacity(query.depth());
    for (r, &s) in ranges.iter().zip(&sup) {
        let shot = Shot { image: support.images[s].clone(), mask: support.masks[s].clone() };
        for z in r.clone() {
            let e = Episode::new(vec![shot.clone()], query.images[z].clone(), Some(query.masks[z].clone()), class_id)?;
            predictions.push(predict(&e)?);
        }
    }
    let dice = dice_volume(&predictions, &query.masks)?;
    Ok(VolumeEval { dice, predictions, support_slices: sup, chunks: ranges })
}

/// Evaluates `classes` on every test scan, each against the next test scan
/// as support. One row per (class, query scan); losses and mIoU are slice
/// means.
pub fn evaluate_model(model: &Model, data: &Dataset, classes: &[usize], chunks: usize) -> Result<Vec<MetricsRow>> {
    let tests = data.scans(Split::Test);
    if tests.is_empty() {
        return Err(Error::EmptyScan);
    }
    let mut rows = Vec::new();
    for &c in classes {
        for (i, q) in tests.iter().enumerate() {
            let s = tests[(i + 1) % tests.len()];
            let (qv, sv) = (Volume::of_class(q, c), Volume::of_class(s, c));
            let mut losses = Vec::new();
            let mut ious = Vec::new();
            let ev = evaluate_volume(&qv, &sv, chunks, c, |e| {
                let gt = e.query_mask.as_ref().expect("evaluation episodes carry masks");
                let pred = match run_episode(e, model, model.shape.flags) {
                    Ok(out) => {
                        losses.extend(out.losses);
                        out.prediction()
                    }
                    Err(Error::EmptyForeground) => {
                        log::warn!("support slice without foreground; predicting background");
                        Mask::zeros(gt.height(), gt.width())
                    }
                    Err(e) => return Err(e),
                };
                ious.push(miou(&pred, gt, 2)?);
                Ok(pred)
            })?;
            let n = losses.len().max(1) as f64;
            let mean = Losses {
                se: losses.iter().map(|l| l.se).sum::<f64>() / n,
                be: losses.iter().map(|l| l.be).sum::<f64>() / n,
                dc: losses.iter().map(|l| l.dc).sum::<f64>() / n,
                all: losses.iter().map(|l| l.all).sum::<f64>() / n,
            };
            let m = ious.iter().sum::<f64>() / ious.len() as f64;
            rows.push(MetricsRow::new(i, c, ev.dice, m, mean, model.iteration));
        }
    }
    Ok(rows)
}

pub fn mean_dice(rows: &[MetricsRow]) -> f64 {
    rows.iter().map(|r| r.dice).sum::<f64>() / rows.len().max(1) as f64
}

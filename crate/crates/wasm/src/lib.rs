//! Browser bindings: synthetic slices, masked SLIC on slice colours and
//! entropic transport plans.

use pmcr_core::crr::{affinity_map, masked_slic};
use pmcr_core::harness::{synthesize, SyntheticTaskSpec};
use pmcr_core::pcm::sinkhorn;
use pmcr_core::Tensor;
use wasm_bindgen::prelude::*;

fn js(e: pmcr_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One slice of a synthetic scan: RGBA pixels and per-pixel labels
/// (0 = background, `k + 1` = class `k`).
#[wasm_bindgen]
pub struct SynthSlice {
    size: usize,
    rgba: Vec<u8>,
    labels: Vec<u8>,
    colors: Vec<f64>,
}

#[wasm_bindgen]
impl SynthSlice {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }
}

/// Slice `z` of the first scan generated by the default task with `seed`.
#[wasm_bindgen]
pub fn synth_slice(seed: u64, size: usize, z: usize) -> Result<SynthSlice, JsError> {
    let spec = SyntheticTaskSpec { image_size: size, train_scans: 1, test_scans: 1, ..SyntheticTaskSpec::default() };
    let data = synthesize(&spec, seed).map_err(js)?;
    let scan = &data.scans[0];
    let z = z.min(scan.images.len() - 1);
    let img = &scan.images[z];
    let rgba = img
        .data()
        .chunks(3)
        .flat_map(|px| {
            let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [c(px[0]), c(px[1]), c(px[2]), 255]
        })
        .collect();
    Ok(SynthSlice { size, rgba, labels: scan.masks[z].data().to_vec(), colors: img.data().to_vec() })
}

/// Superpixels of the pixels labelled `label`, clustered on their colours.
/// Returns one entry per pixel: the superpixel index, or -1 off the region.
#[wasm_bindgen]
pub fn slic_labels(slice: &SynthSlice, label: u8, seeds: usize, iters: usize) -> Result<Vec<i32>, JsError> {
    let fg: Vec<usize> = (0..slice.labels.len()).filter(|&p| slice.labels[p] == label).collect();
    if fg.is_empty() {
        return Err(JsError::new("no pixels carry that label"));
    }
    let n = fg.len();
    let x = Tensor::from_fn(&[3, n], |i| slice.colors[fg[i % n] * 3 + i / n]);
    let c = masked_slic(&x, seeds, iters, label as usize).map_err(js)?;
    let z = affinity_map(&x, &c.centroids).map_err(js)?;
    let f = z.cols();
    let mut out = vec![-1; slice.labels.len()];
    for (k, &p) in fg.iter().enumerate() {
        let row = &z.data()[k * f..(k + 1) * f];
        let best = (0..f).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
        out[p] = best as i32;
    }
    Ok(out)
}

/// Solution of one transport problem.
#[wasm_bindgen]
pub struct Plan {
    t: Vec<f64>,
    iterations: usize,
    violation: f64,
}

#[wasm_bindgen]
impl Plan {
    /// Row-major `S×S` plan.
    pub fn plan(&self) -> Vec<f64> {
        self.t.clone()
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn violation(&self) -> f64 {
        self.violation
    }
}

/// Entropic transport plan for the row-major `S×S` similarity `m` with
/// marginals `u`, `v`. Returns the last iterate when the budget runs out.
#[wasm_bindgen]
pub fn transport_plan(m: Vec<f64>, u: Vec<f64>, v: Vec<f64>, mu: f64, max_iters: usize) -> Result<Plan, JsError> {
    let s = u.len();
    let m = Tensor::new(vec![s, m.len() / s.max(1)], m).map_err(js)?;
    let plan = match sinkhorn(&m, &u, &v, mu, max_iters, 1e-9) {
        Ok(p) => p,
        Err(pmcr_core::Error::NonConvergence { plan, .. }) => *plan,
        Err(e) => return Err(js(e)),
    };
    Ok(Plan { t: plan.t.data().to_vec(), iterations: plan.iterations, violation: plan.violation })
}

//! Class-relation reasoning: masked superpixel centroids, class memory,
//! relation-graph propagation and dynamic kernel refinement.

mod memory;
mod slic;

pub use memory::{memory_update, ClassMemory};
pub use slic::{affinity_map, masked_slic, masked_slic_graph, seed_indices, superpixel_count, SuperpixelCentroids};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hyper::{Hyperparams, KernelSoftmax};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Relation-graph nodes `B^a = [B^s, S_M, B^q]` with their composition.
#[derive(Clone, Debug, PartialEq)]
pub struct Bags {
    pub nodes: Tensor,
    pub n_support: usize,
    pub n_memory: usize,
    pub n_query: usize,
    /// Classes whose centroids were taken from memory, in node order.
    pub memory_classes: Vec<usize>,
}

/// Classes of `all_class_ids` with no centroids in `support`.
pub fn missing_classes(support: &[SuperpixelCentroids], all_class_ids: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = all_class_ids
        .iter()
        .copied()
        .filter(|c| support.iter().all(|s| s.class_id != *c))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// `B^s` from the support centroids plus `ν` memory centroids for every
/// class absent from them, and `B^q = F^q W^q`.
pub fn build_bags(
    support: &[SuperpixelCentroids],
    mem: &ClassMemory,
    all_class_ids: &[usize],
    fq: &Tensor,
    wq: &Tensor,
) -> Result<Bags> {
    if fq.rank() != 3 || wq.rank() != 2 || wq.rows() != fq.dims()[1] * fq.dims()[2] {
        return Err(Error::dims("build_bags", format!("F^q {:?}, W^q {:?}", fq.dims(), wq.dims())));
    }
    let d = fq.dims()[0];
    let mut parts: Vec<Tensor> = Vec::new();
    for s in support {
        if s.centroids.rows() != d {
            return Err(Error::dims("build_bags", "centroid width differs from D_l"));
        }
        parts.push(s.centroids.clone());
    }
    let n_support = parts.iter().map(Tensor::cols).sum();
    let memory_classes = missing_classes(support, all_class_ids);
    for &c in &memory_classes {
        parts.push(mem.pick(c)?);
    }
    let n_memory = memory_classes.len() * mem.capacity();
    let flat = fq.clone().reshape(&[d, wq.rows()])?;
    let bq = flat.matmul(wq)?;
    parts.push(bq);
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Bags { nodes: Tensor::concat_cols(&refs)?, n_support, n_memory, n_query: wq.cols(), memory_classes })
}

pub fn relation_edges_graph(g: &mut Graph, b_a: Var, ws1: Var, ws2: Var) -> Result<Var> {
    let p1 = g.matmul(ws1, b_a)?;
    let p2 = g.matmul(ws2, b_a)?;
    let p1t = g.transpose(p1);
    g.matmul(p1t, p2)
}

/// `E = (W_s^1 B^a)ᵀ (W_s^2 B^a)`.
pub fn relation_edges(b_a: &Tensor, ws1: &Tensor, ws2: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (b, w1, w2) = (g.constant(b_a.clone()), g.constant(ws1.clone()), g.constant(ws2.clone()));
    let e = relation_edges_graph(&mut g, b, w1, w2)?;
    Ok(g.value(e).clone())
}

pub fn graph_propagate_graph(g: &mut Graph, b_a: Var, e: Var, wg: Var) -> Result<Var> {
    let bt = g.transpose(b_a);
    let eb = g.matmul(e, bt)?;
    let x = g.matmul(eb, wg)?;
    let xt = g.transpose(x);
    let gate = g.softmax_rows(xt);
    let gated = g.mul(gate, b_a)?;
    g.add(b_a, gated)
}

/// `B̃^n = B^a + softmax_nodes((E (B^a)ᵀ W_g)ᵀ) ⊙ B^a`, the softmax taken over
/// nodes separately for each channel.
pub fn graph_propagate(b_a: &Tensor, e: &Tensor, wg: &Tensor) -> Result<Tensor> {
    if b_a.rank() != 2 || e.dims() != [b_a.cols(), b_a.cols()] || wg.dims() != [b_a.rows(), b_a.rows()] {
        return Err(Error::dims(
            "graph_propagate",
            format!("B^a {:?}, E {:?}, W_g {:?}", b_a.dims(), e.dims(), wg.dims()),
        ));
    }
    let mut g = Graph::new();
    let (b, ev, w) = (g.constant(b_a.clone()), g.constant(e.clone()), g.constant(wg.clone()));
    let out = graph_propagate_graph(&mut g, b, ev, w)?;
    Ok(g.value(out).clone())
}

/// Kernel attention `D_u×D_l×T` from `B̃^n` and node-indexed spatial weights
/// `W_c^1`, `W_c^2` (`N_a×T`).
pub fn kernel_attention_graph(
    g: &mut Graph,
    b_n: Var,
    wc: Var,
    wc1: Var,
    wc2: Var,
    mode: KernelSoftmax,
) -> Result<Var> {
    let f_n = g.matmul(wc, b_n)?;
    let m1 = g.matmul(f_n, wc1)?;
    let m2 = g.matmul(b_n, wc2)?;
    g.kernel_attention_softmax(m1, m2, mode)
}

/// `A_k` with shape `D_u×D_l×n1×n2`; `n1·n2` is the column count of `W_c^1`.
pub fn kernel_attention(
    b_n: &Tensor,
    wc: &Tensor,
    wc1: &Tensor,
    wc2: &Tensor,
    n: (usize, usize),
    mode: KernelSoftmax,
) -> Result<Tensor> {
    if wc1.rank() != 2 || wc1.dims() != wc2.dims() || wc1.cols() != n.0 * n.1 || b_n.rank() != 2 || wc1.rows() != b_n.cols() {
        return Err(Error::dims(
            "kernel_attention",
            format!("B̃^n {:?}, W_c^1 {:?}, W_c^2 {:?}, kernel {n:?}", b_n.dims(), wc1.dims(), wc2.dims()),
        ));
    }
    let mut g = Graph::new();
    let vars = [b_n, wc, wc1, wc2].map(|t| g.constant(t.clone()));
    let a = kernel_attention_graph(&mut g, vars[0], vars[1], vars[2], vars[3], mode)?;
    let (du, dl) = (wc.rows(), b_n.rows());
    g.value(a).clone().reshape(&[du, dl, n.0, n.1])
}

fn odd_square(dims: &[usize]) -> Result<usize> {
    if dims.len() != 4 {
        return Err(Error::dims("refine_and_encode", format!("kernel must be rank 4, got {dims:?}")));
    }
    if dims[2] != dims[3] {
        return Err(Error::dims("refine_and_encode", format!("non-square kernel {dims:?}")));
    }
    if dims[2] % 2 == 0 {
        return Err(Error::EvenKernel(dims[2]));
    }
    Ok(dims[2])
}

/// Convolves a `D_l×H×W` map with `A_k ⊙ Q_k` (zero padding keeps `H×W`).
pub fn refine_graph(g: &mut Graph, f: Var, q_k: Var, a_k: Var) -> Result<Var> {
    let n = odd_square(g.value(q_k).dims())?;
    let q = g.mul(a_k, q_k)?;
    g.conv2d(f, q, None, 1, (n - 1) / 2)
}

/// `F^q ⊗ (A_k ⊙ Q_k)`, shape `D_u×H_l×W_l`.
pub fn refine_and_encode(fq: &Tensor, q_k: &Tensor, a_k: &Tensor) -> Result<Tensor> {
    odd_square(q_k.dims())?;
    if a_k.dims() != q_k.dims() {
        return Err(Error::dims("refine_and_encode", format!("A_k {:?} vs Q_k {:?}", a_k.dims(), q_k.dims())));
    }
    let mut g = Graph::new();
    let (f, q, a) = (g.constant(fq.clone()), g.constant(q_k.clone()), g.constant(a_k.clone()));
    let out = refine_graph(&mut g, f, q, a)?;
    Ok(g.value(out).clone())
}

/// Row layout of `W_c^1`/`W_c^2`: one row per possible node, grouped as
/// support centroids (`shots × N_s^max`), memory centroids (`classes × ν`)
/// and query descriptors (`N_q`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SlotLayout {
    pub shots: usize,
    pub per_shot: usize,
    pub classes: usize,
    pub per_class: usize,
    pub query: usize,
}

impl SlotLayout {
    pub fn capacity(&self) -> usize {
        self.shots * self.per_shot + self.classes * self.per_class + self.query
    }

    pub fn support(&self, shot: usize, k: usize) -> usize {
        shot * self.per_shot + k
    }

    pub fn memory(&self, class: usize, k: usize) -> usize {
        self.shots * self.per_shot + class * self.per_class + k
    }

    pub fn query_slot(&self, k: usize) -> usize {
        self.shots * self.per_shot + self.classes * self.per_class + k
    }
}

/// Trainable tensors of the class-relation branch.
#[derive(Clone, Debug, PartialEq)]
pub struct CrrParams {
    /// Base kernel `Q_k`, `D_u×D_l×n×n`.
    pub q_k: Tensor,
    /// `W_g`, `D_l×D_l`.
    pub wg: Tensor,
    /// `W^q`, `H_lW_l×N_q`.
    pub wq: Tensor,
    /// `W_c`, `D_u×D_l`.
    pub wc: Tensor,
    /// `W_c^1`, `W_c^2`, `capacity×n²`.
    pub wc1: Tensor,
    pub wc2: Tensor,
    /// `W_s^1`, `W_s^2`, `D_s×D_l`.
    pub ws1: Tensor,
    pub ws2: Tensor,
    pub layout: SlotLayout,
}

/// Graph handles of a [`CrrParams`].
#[derive(Clone, Copy, Debug)]
pub struct CrrVars {
    pub q_k: Var,
    pub wg: Var,
    pub wq: Var,
    pub wc: Var,
    pub wc1: Var,
    pub wc2: Var,
    pub ws1: Var,
    pub ws2: Var,
}

impl CrrVars {
    pub fn all(&self) -> [Var; 8] {
        [self.q_k, self.wg, self.wq, self.wc, self.wc1, self.wc2, self.ws1, self.ws2]
    }
}

impl CrrParams {
    /// `Q_k` starts as an identity centre tap plus small noise; the other
    /// matrices are uniform in `±scale/√fan_in`.
    pub fn init(hp: &Hyperparams, spatial: usize, layout: SlotLayout, rng: &mut Rng) -> Self {
        let (dl, du, ds, n) = (hp.feature_dim, hp.out_channels, hp.relation_dim, hp.kernel_h);
        let t = hp.kernel_h * hp.kernel_w;
        let mut uni = |dims: &[usize], fan_in: usize, scale: f64| {
            let b = scale / (fan_in as f64).sqrt();
            Tensor::from_fn(dims, |_| rng.range(-b, b))
        };
        let mut q_k = uni(&[du, dl, n, hp.kernel_w], dl * t, 0.05);
        let c = (n / 2) * hp.kernel_w + hp.kernel_w / 2;
        for a in 0..du.min(dl) {
            q_k.data_mut()[(a * dl + a) * t + c] += 1.0;
        }
        Self {
            q_k,
            wg: uni(&[dl, dl], dl, 0.01),
            wq: uni(&[spatial, hp.query_descriptors], spatial, 1.0),
            wc: uni(&[du, dl], dl, 1.0),
            wc1: uni(&[layout.capacity(), t], du, 0.1),
            wc2: uni(&[layout.capacity(), t], dl, 0.1),
            ws1: uni(&[ds, dl], dl, 1.0),
            ws2: uni(&[ds, dl], dl, 1.0),
            layout,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> CrrVars {
        let [q_k, wg, wq, wc, wc1, wc2, ws1, ws2] = self.tensors().map(|t| g.param(t.clone()));
        CrrVars { q_k, wg, wq, wc, wc1, wc2, ws1, ws2 }
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.q_k, &self.wg, &self.wq, &self.wc, &self.wc1, &self.wc2, &self.ws1, &self.ws2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.q_k,
            &mut self.wg,
            &mut self.wq,
            &mut self.wc,
            &mut self.wc1,
            &mut self.wc2,
            &mut self.ws1,
            &mut self.ws2,
        ]
    }

    pub const NAMES: [&'static str; 8] = ["q_k", "w_g", "w_q", "w_c", "w_c1", "w_c2", "w_s1", "w_s2"];
}

/// Centroids produced while building the refined kernel, for memory updates.
#[derive(Clone, Debug, Default)]
pub struct CrrReport {
    pub centroids: Vec<Tensor>,
    pub memory_classes: Vec<usize>,
    pub nodes: usize,
}

/// Per-episode inputs of [`refined_kernel_graph`].
pub struct CrrInputs<'a> {
    /// Query features `D_l×H_l×W_l`.
    pub fq: Var,
    /// Foreground features `D_l×N_i` of each shot.
    pub support_fg: &'a [Var],
    /// Foreground pixel count of each shot at image resolution; sets the
    /// superpixel count.
    pub support_pixels: &'a [usize],
    /// `(class, D_l×ν)` memory centroids of the classes absent from the shots.
    pub memory: &'a [(usize, Tensor)],
}

/// Builds the refined kernel `Q̃_k = A_k ⊙ Q_k` for one episode.
pub fn refined_kernel_graph(
    g: &mut Graph,
    inputs: &CrrInputs<'_>,
    vars: &CrrVars,
    layout: &SlotLayout,
    hp: &Hyperparams,
) -> Result<(Var, CrrReport)> {
    let CrrInputs { fq, support_fg, support_pixels, memory } = *inputs;
    if support_fg.len() > layout.shots || support_fg.len() != support_pixels.len() {
        return Err(Error::dims(
            "class_relation",
            format!("{} shots for a layout of {}", support_fg.len(), layout.shots),
        ));
    }
    let fd = g.value(fq).dims().to_vec();
    let (dl, hw) = (fd[0], fd[1] * fd[2]);
    let mut parts = Vec::new();
    let mut slots = Vec::new();
    let mut report = CrrReport::default();
    for (i, (&fg, &pixels)) in support_fg.iter().zip(support_pixels).enumerate() {
        let n_s = superpixel_count(pixels, hp.pixels_per_superpixel, hp.max_superpixels.min(layout.per_shot));
        let c = masked_slic_graph(g, fg, n_s, hp.slic_iters)?;
        report.centroids.push(g.value(c).clone());
        slots.extend((0..g.value(c).cols()).map(|k| layout.support(i, k)));
        parts.push(c);
    }
    for (class, t) in memory {
        if *class >= layout.classes || t.cols() > layout.per_class {
            return Err(Error::dims("class_relation", format!("memory class {class} outside the layout")));
        }
        slots.extend((0..t.cols()).map(|k| layout.memory(*class, k)));
        report.memory_classes.push(*class);
        parts.push(g.constant(t.clone()));
    }
    let flat = g.reshape(fq, &[dl, hw])?;
    let bq = g.matmul(flat, vars.wq)?;
    slots.extend((0..g.value(bq).cols()).map(|k| layout.query_slot(k)));
    parts.push(bq);
    let b_a = g.concat_cols(&parts)?;
    report.nodes = slots.len();

    let e = relation_edges_graph(g, b_a, vars.ws1, vars.ws2)?;
    let b_n = graph_propagate_graph(g, b_a, e, vars.wg)?;
    let t = g.value(vars.wc1).cols();
    let index: Vec<usize> = slots.iter().flat_map(|&s| (0..t).map(move |k| s * t + k)).collect();
    let wc1 = g.gather(vars.wc1, index.clone(), &[slots.len(), t])?;
    let wc2 = g.gather(vars.wc2, index, &[slots.len(), t])?;
    let a = kernel_attention_graph(g, b_n, vars.wc, wc1, wc2, hp.kernel_softmax)?;
    let kdims = g.value(vars.q_k).dims().to_vec();
    let a = g.reshape(a, &kdims)?;
    let q = g.mul(a, vars.q_k)?;
    Ok((q, report))
}

#[cfg(test)]
mod tests;

//! Prototype correlation matching: SVD-initialized prototypes, task
//! information propagation, entropic prototype matching and the
//! prototype-enhancement loss.

mod sinkhorn;

pub use sinkhorn::{
    sinkhorn, sinkhorn_trace, sinkhorn_with, transport_objective, Domain, SinkhornOptions, TransportPlan,
};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hyper::Hyperparams;
use crate::kernels;
use crate::linalg::{multi_head_graph, truncated_svd, truncated_svd_of_product, AttentionVars, AttentionWeights, SvdFactors};
use crate::mask::Mask;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Query,
    Support,
}

/// `S×D_l` prototypes and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub protos: Tensor,
    pub side: Side,
    pub support_index: Option<usize>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.protos.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat indices (into a `D×H×W` tensor) of the foreground columns, in
/// row-major scan order: entry `r*N + n` addresses channel `r` of foreground
/// pixel `n`.
pub fn foreground_index(channels: usize, m: &Mask) -> Vec<usize> {
    let hw = m.height() * m.width();
    let pos: Vec<usize> = m.data().iter().enumerate().filter(|(_, &l)| l != 0).map(|(i, _)| i).collect();
    (0..channels).flat_map(|r| pos.iter().map(move |&p| r * hw + p)).collect()
}

fn check_feature_mask(op: &'static str, f: &Tensor, m: &Mask) -> Result<()> {
    if f.rank() != 3 || (f.dims()[1], f.dims()[2]) != m.dims() {
        return Err(Error::dims(op, format!("features {:?}, mask {:?}", f.dims(), m.dims())));
    }
    Ok(())
}

/// Foreground feature columns `D_l×N_i` of a `D_l×H_l×W_l` map.
pub fn foreground_extract(f: &Tensor, m: &Mask) -> Result<Tensor> {
    check_feature_mask("foreground_extract", f, m)?;
    let idx = foreground_index(f.dims()[0], m);
    if idx.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let n = idx.len() / f.dims()[0];
    Ok(Tensor::from_parts(vec![f.dims()[0], n], idx.iter().map(|&i| f.data()[i]).collect()))
}

/// Graph counterpart of [`foreground_extract`].
pub fn foreground_extract_graph(g: &mut Graph, f: Var, m: &Mask) -> Result<Var> {
    check_feature_mask("foreground_extract", g.value(f), m)?;
    let d = g.value(f).dims()[0];
    let idx = foreground_index(d, m);
    if idx.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let n = idx.len() / d;
    g.gather(f, idx, &[d, n])
}

/// `W_i = Fqᵀ Fs`, shape `H_lW_l×N_i`.
pub fn similarity_matrix(fq: &Tensor, fs: &Tensor) -> Result<Tensor> {
    if fq.rank() != 2 || fs.rank() != 2 || fq.rows() != fs.rows() {
        return Err(Error::dims("similarity_matrix", format!("{:?} vs {:?}", fq.dims(), fs.dims())));
    }
    fq.transpose().matmul(fs)
}

/// Prototype count actually usable for an `H_lW_l×N_i` similarity matrix.
pub fn clamp_prototypes(s: usize, query_pixels: usize, support_pixels: usize) -> usize {
    let max = query_pixels.min(support_pixels);
    if s > max {
        log::debug!("prototype count clamped from {s} to {max}");
    }
    s.min(max)
}

/// Leading singular triplets of `Fqᵀ Fs` after clamping `s`.
pub fn prototype_factors(fq: &Tensor, fs: &Tensor, s: usize) -> Result<SvdFactors> {
    if fq.rank() != 2 || fs.rank() != 2 || fq.rows() != fs.rows() {
        return Err(Error::dims("init_prototypes", format!("{:?} vs {:?}", fq.dims(), fs.dims())));
    }
    let s = clamp_prototypes(s, fq.cols(), fs.cols());
    if s == 0 {
        return Err(Error::EmptyForeground);
    }
    truncated_svd_of_product(&fq.transpose(), fs, s)
}

/// `F^bq = Uᵀ Fqᵀ` and `F^bs = V Fsᵀ` from the rank-`S` SVD of `w = Fqᵀ Fs`.
/// `S` is clamped to `min(H_lW_l, N_i)`.
pub fn init_prototypes(
    w: &Tensor,
    fq: &Tensor,
    fs: &Tensor,
    s: usize,
    support_index: usize,
) -> Result<(PrototypeSet, PrototypeSet)> {
    if w.rank() != 2 || fq.rank() != 2 || fs.rank() != 2 || w.rows() != fq.cols() || w.cols() != fs.cols() {
        return Err(Error::dims(
            "init_prototypes",
            format!("W {:?}, Fq {:?}, Fs {:?}", w.dims(), fq.dims(), fs.dims()),
        ));
    }
    let s = clamp_prototypes(s, w.rows(), w.cols());
    let svd = truncated_svd(w, s)?;
    let bq = svd.u.transpose().matmul(&fq.transpose())?;
    let bs = svd.v.matmul(&fs.transpose())?;
    Ok((
        PrototypeSet { protos: bq, side: Side::Query, support_index: Some(support_index) },
        PrototypeSet { protos: bs, side: Side::Support, support_index: Some(support_index) },
    ))
}

/// Attention banks of the propagation step, one entry per head.
#[derive(Clone, Debug, PartialEq)]
pub struct PcmParams {
    pub support: Vec<AttentionWeights>,
    pub query: Vec<AttentionWeights>,
    pub joint: Vec<AttentionWeights>,
}

/// Graph handles of a [`PcmParams`].
#[derive(Clone, Debug)]
pub struct PcmVars {
    pub support: Vec<AttentionVars>,
    pub query: Vec<AttentionVars>,
    pub joint: Vec<AttentionVars>,
}

impl PcmParams {
    pub fn zeros(dim: usize, head_dim: usize, heads: usize) -> Self {
        let bank = || vec![AttentionWeights::zeros(dim, head_dim); heads];
        Self { support: bank(), query: bank(), joint: bank() }
    }

    /// Entries uniform in `±scale/√D_l`.
    pub fn random(dim: usize, head_dim: usize, heads: usize, scale: f64, rng: &mut Rng) -> Self {
        let b = scale / (dim as f64).sqrt();
        let mut mat = || Tensor::from_fn(&[dim, head_dim], |_| rng.range(-b, b));
        let mut bank = || {
            (0..heads)
                .map(|_| AttentionWeights { wq: mat(), wk: mat(), wv: mat() })
                .collect::<Vec<_>>()
        };
        Self { support: bank(), query: bank(), joint: bank() }
    }

    pub fn heads(&self) -> usize {
        self.support.len()
    }

    pub fn bind(&self, g: &mut Graph) -> PcmVars {
        PcmVars {
            support: self.support.iter().map(|w| w.bind(g)).collect(),
            query: self.query.iter().map(|w| w.bind(g)).collect(),
            joint: self.joint.iter().map(|w| w.bind(g)).collect(),
        }
    }

    fn bind_const(&self, g: &mut Graph) -> PcmVars {
        PcmVars {
            support: self.support.iter().map(|w| w.bind_const(g)).collect(),
            query: self.query.iter().map(|w| w.bind_const(g)).collect(),
            joint: self.joint.iter().map(|w| w.bind_const(g)).collect(),
        }
    }

    /// Every weight matrix in a fixed order: support, query, joint banks,
    /// each head as `W_q, W_k, W_v`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        [&self.support, &self.query, &self.joint]
            .into_iter()
            .flat_map(|bank| bank.iter().flat_map(|w| [&w.wq, &w.wk, &w.wv]))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.support, &mut self.query, &mut self.joint]
            .into_iter()
            .flat_map(|bank| bank.iter_mut().flat_map(|w| [&mut w.wq, &mut w.wk, &mut w.wv]))
            .collect()
    }
}

impl PcmVars {
    pub fn all(&self) -> Vec<Var> {
        [&self.support, &self.query, &self.joint]
            .into_iter()
            .flat_map(|bank| bank.iter().flat_map(|w| [w.wq, w.wk, w.wv]))
            .collect()
    }
}

/// Graph form of task-information propagation. `f_bq`, `f_bs` are `S×D_l`
/// prototypes; `fq` is `D_l×H_lW_l`, `fs` is `D_l×N_i`. Returns the split
/// `(F̃_b^q, F̃_b^s)`.
pub fn propagate_graph(
    g: &mut Graph,
    f_bq: Var,
    f_bs: Var,
    fq: Var,
    fs: Var,
    vars: &PcmVars,
) -> Result<(Var, Var)> {
    let s = g.value(f_bs).rows();
    if g.value(f_bq).rows() != s {
        return Err(Error::dims("propagate_task_info", "support and query prototype counts differ"));
    }
    let fst = g.transpose(fs);
    let fqt = g.transpose(fq);
    let a_s = multi_head_graph(g, f_bs, fst, &vars.support)?;
    let a_q = multi_head_graph(g, f_bq, fqt, &vars.query)?;
    let f_b = g.concat_rows(&[a_s, a_q])?;
    let f_tilde = multi_head_graph(g, f_b, f_b, &vars.joint)?;
    let tilde_s = g.slice_rows(f_tilde, 0, s)?;
    let tilde_q = g.slice_rows(f_tilde, s, s)?;
    Ok((tilde_q, tilde_s))
}

/// Returns `(F̃_b^q, F̃_b^s)`, each `S×D_l`.
pub fn propagate_task_info(
    f_bq: &PrototypeSet,
    f_bs: &PrototypeSet,
    fq: &Tensor,
    fs: &Tensor,
    params: &PcmParams,
) -> Result<(PrototypeSet, PrototypeSet)> {
    let dl = fq.rows();
    let width: usize = params.support.iter().map(AttentionWeights::head_dim).sum();
    if width != dl || fs.rows() != dl || f_bq.protos.cols() != dl || f_bs.protos.cols() != dl {
        return Err(Error::dims(
            "propagate_task_info",
            format!("D_l = {dl}, heads span {width}, Fs {:?}", fs.dims()),
        ));
    }
    let mut g = Graph::new();
    let vars = params.bind_const(&mut g);
    let bq = g.constant(f_bq.protos.clone());
    let bs = g.constant(f_bs.protos.clone());
    let q = g.constant(fq.clone());
    let s = g.constant(fs.clone());
    let (tq, ts) = propagate_graph(&mut g, bq, bs, q, s, &vars)?;
    Ok((
        PrototypeSet { protos: g.value(tq).clone(), side: Side::Query, support_index: f_bq.support_index },
        PrototypeSet { protos: g.value(ts).clone(), side: Side::Support, support_index: f_bs.support_index },
    ))
}

/// Softmax over `Σ_n ⟨proto_s, feature_n⟩` as a `1×S` node.
pub fn marginals_graph(g: &mut Graph, protos: Var, feats: Var) -> Result<Var> {
    let (d, n) = (g.value(feats).rows(), g.value(feats).cols());
    if g.value(protos).cols() != d {
        return Err(Error::dims("marginals_from_similarity", "feature dims differ"));
    }
    let ones = g.constant(Tensor::filled(&[n, 1], 1.0));
    let total = g.matmul(feats, ones)?;
    let scores = g.matmul(protos, total)?;
    let s = g.value(scores).rows();
    let row = g.reshape(scores, &[1, s])?;
    Ok(g.softmax_rows(row))
}

/// Normalized similarity between `S×D_l` prototypes and `D_l×N` features,
/// floored at [`MARGINAL_FLOOR`] and renormalized.
pub fn marginals_from_similarity(protos: &PrototypeSet, feats: &Tensor) -> Result<Vec<f64>> {
    if feats.rank() != 2 || protos.protos.cols() != feats.rows() {
        return Err(Error::dims(
            "marginals_from_similarity",
            format!("prototypes {:?}, features {:?}", protos.protos.dims(), feats.dims()),
        ));
    }
    let total: Vec<f64> = (0..feats.rows()).map(|r| feats.row(r).iter().sum()).collect();
    let mut scores: Vec<f64> = (0..protos.len()).map(|s| kernels::dot(protos.protos.row(s), &total)).collect();
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateScores);
    }
    kernels::softmax_in_place(&mut scores);
    if scores.iter().any(|&p| p < MARGINAL_FLOOR) {
        for p in &mut scores {
            *p = p.max(MARGINAL_FLOOR);
        }
        let total: f64 = scores.iter().sum();
        for p in &mut scores {
            *p /= total;
        }
    }
    Ok(scores)
}

/// Smallest marginal mass; sharply peaked scores would otherwise underflow
/// to zero.
pub const MARGINAL_FLOOR: f64 = 1e-12;

/// `W* = M_b ⊙ T*`.
pub fn prototype_match(m_b: &Tensor, plan: &TransportPlan) -> Result<Tensor> {
    if m_b.dims() != plan.t.dims() {
        return Err(Error::dims("prototype_match", format!("{:?} vs {:?}", m_b.dims(), plan.t.dims())));
    }
    Ok(Tensor::from_parts(
        m_b.dims().to_vec(),
        m_b.data().iter().zip(plan.t.data()).map(|(a, b)| a * b).collect(),
    ))
}

/// `Σ_i ‖W*_i − F_i^bs (F_i^bq)ᵀ‖²_F`.
pub fn prototype_enhancement_loss(w_star: &[Tensor], f_bs: &[Tensor], f_bq: &[Tensor]) -> Result<f64> {
    if w_star.is_empty() || w_star.len() != f_bs.len() || w_star.len() != f_bq.len() {
        return Err(Error::dims("prototype_enhancement_loss", "need K ≥ 1 matched triples"));
    }
    let mut total = 0.0;
    for ((w, bs), bq) in w_star.iter().zip(f_bs).zip(f_bq) {
        let wr = bs.matmul(&bq.transpose())?;
        if wr.dims() != w.dims() {
            return Err(Error::dims("prototype_enhancement_loss", format!("{:?} vs {:?}", w.dims(), wr.dims())));
        }
        total += w.data().iter().zip(wr.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Graph form of one term of the enhancement loss, with `T*` constant.
pub fn enhancement_term_graph(g: &mut Graph, m_b: Var, plan: &Tensor, f_bs: Var, f_bq: Var) -> Result<Var> {
    let t = g.constant(plan.clone());
    let w_star = g.mul(m_b, t)?;
    let bqt = g.transpose(f_bq);
    let w_r = g.matmul(f_bs, bqt)?;
    let diff = g.sub(w_star, w_r)?;
    Ok(g.sum_sq(diff))
}

/// Diagnostics of one [`pcm_loss_graph`] call.
#[derive(Clone, Debug, Default)]
pub struct PcmReport {
    pub plans: Vec<TransportPlan>,
    pub non_converged: usize,
    pub prototypes_used: Vec<usize>,
}

/// Full prototype-correlation branch for one query against `K` supports;
/// returns the enhancement loss node. `fq` is `D_l×H_lW_l`, each entry of
/// `fs` is `D_l×N_i`.
pub fn pcm_loss_graph(
    g: &mut Graph,
    fq: Var,
    fs: &[Var],
    vars: &PcmVars,
    hp: &Hyperparams,
) -> Result<(Var, PcmReport)> {
    let mut report = PcmReport::default();
    let mut terms = Vec::with_capacity(fs.len());
    let fqt = g.transpose(fq);
    for &fsi in fs {
        let svd = prototype_factors(g.value(fq), g.value(fsi), hp.prototypes)?;
        report.prototypes_used.push(svd.rank());
        let ut = g.constant(svd.u.transpose());
        let v = g.constant(svd.v.clone());
        let f_bq = g.matmul(ut, fqt)?;
        let fst = g.transpose(fsi);
        let f_bs = g.matmul(v, fst)?;
        let (tq, ts) = propagate_graph(g, f_bq, f_bs, fq, fsi, vars)?;
        let tqt = g.transpose(tq);
        let m_b = g.matmul(ts, tqt)?;

        let u = marginals_from_similarity(
            &PrototypeSet { protos: g.value(f_bs).clone(), side: Side::Support, support_index: None },
            g.value(fsi),
        )?;
        let v = marginals_from_similarity(
            &PrototypeSet { protos: g.value(f_bq).clone(), side: Side::Query, support_index: None },
            g.value(fq),
        )?;
        let plan = match sinkhorn(g.value(m_b), &u, &v, hp.entropy_weight, hp.sinkhorn_iters, hp.sinkhorn_tol) {
            Ok(p) => p,
            Err(Error::NonConvergence { plan, violation, .. }) => {
                log::debug!("sinkhorn stopped at violation {violation:.3e}");
                report.non_converged += 1;
                *plan
            }
            Err(e) => return Err(e),
        };
        terms.push(enhancement_term_graph(g, m_b, &plan.t, f_bs, f_bq)?);
        report.plans.push(plan);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests;

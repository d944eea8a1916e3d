//! Prototype-based pixel classifier and the segmentation, Dice and total losses.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Per-pixel class probabilities, `H×W×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub p: Tensor,
}

impl ProbabilityMap {
    pub fn classes(&self) -> usize {
        self.p.dims()[2]
    }

    /// Most probable class per pixel; ties go to the lower label.
    pub fn argmax(&self) -> Mask {
        let (h, w, c) = (self.p.dims()[0], self.p.dims()[1], self.p.dims()[2]);
        let d = self.p.data();
        Mask::from_fn(h, w, |i, j| {
            let px = &d[(i * w + j) * c..(i * w + j + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if px[k] > px[best] {
                    best = k;
                }
            }
            best as u8
        })
    }
}

/// One-hot ground truth, `H×W×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotLabels {
    pub g: Tensor,
}

impl OneHotLabels {
    pub fn from_mask(m: &Mask, classes: usize) -> Result<Self> {
        if m.data().iter().any(|&l| l as usize >= classes) {
            return Err(Error::dims("OneHotLabels", format!("label outside 0..{classes}")));
        }
        let (h, w) = m.dims();
        let mut data = vec![0.0; h * w * classes];
        for (p, &l) in m.data().iter().enumerate() {
            data[p * classes + l as usize] = 1.0;
        }
        Ok(Self { g: Tensor::from_parts(vec![h, w, classes], data) })
    }
}

/// Settings of the prototype classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierOptions {
    /// Cosine-similarity multiplier α.
    pub alpha: f64,
    /// Local pooling window L at feature resolution.
    pub window: usize,
    /// Number of classes C, background included.
    pub classes: usize,
}

/// Pooling weights of one support: each row averages the feature-map pixels
/// of one class, either inside one `L×L` window or over the whole map.
struct Pooling {
    weights: Tensor,
    class_of_row: Vec<usize>,
}

fn pooling(mask: &Mask, window: usize, classes: usize) -> Pooling {
    let (h, w) = mask.dims();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut class_of_row = Vec::new();
    let mut push = |pixels: &[usize], class: usize| {
        if pixels.is_empty() {
            return;
        }
        let mut r = vec![0.0; h * w];
        let inv = 1.0 / pixels.len() as f64;
        for &p in pixels {
            r[p] = inv;
        }
        rows.push(r);
        class_of_row.push(class);
    };
    for c in 0..classes {
        push(&mask.positions(c as u8), c);
        for bi in (0..h).step_by(window) {
            for bj in (0..w).step_by(window) {
                let mut px = Vec::new();
                for i in bi..(bi + window).min(h) {
                    for j in bj..(bj + window).min(w) {
                        if mask.at(i, j) as usize == c {
                            px.push(i * w + j);
                        }
                    }
                }
                push(&px, c);
            }
        }
    }
    let n = rows.len();
    Pooling { weights: Tensor::from_parts(vec![n, h * w], rows.concat()), class_of_row }
}

/// Graph form of [`prototype_classifier`]. `query` is `D×H_l×W_l`; each
/// support is a `D×H_l×W_l` feature map with a mask at `H_l×W_l`. Returns an
/// `H×W×C` probability node at `out_dims`.
pub fn classifier_graph(
    g: &mut Graph,
    query: Var,
    supports: &[(Var, &Mask)],
    opts: &ClassifierOptions,
    out_dims: (usize, usize),
) -> Result<Var> {
    if supports.is_empty() {
        return Err(Error::dims("prototype_classifier", "at least one support is required"));
    }
    if !(opts.alpha > 0.0) || opts.window == 0 || opts.classes == 0 {
        return Err(Error::Config("classifier needs α > 0, L ≥ 1 and C ≥ 1".into()));
    }
    let qd = g.value(query).dims().to_vec();
    if qd.len() != 3 {
        return Err(Error::dims("prototype_classifier", format!("query {qd:?}")));
    }
    let (d, hl, wl) = (qd[0], qd[1], qd[2]);
    let mut protos = Vec::new();
    let mut class_of_row = Vec::new();
    for (f, m) in supports {
        if g.value(*f).dims() != qd.as_slice() || m.dims() != (hl, wl) {
            return Err(Error::dims(
                "prototype_classifier",
                format!("support {:?} with mask {:?} against query {qd:?}", g.value(*f).dims(), m.dims()),
            ));
        }
        let pool = pooling(m, opts.window, opts.classes);
        let pw = g.constant(pool.weights);
        let flat = g.reshape(*f, &[d, hl * wl])?;
        let ft = g.transpose(flat);
        protos.push(g.matmul(pw, ft)?);
        class_of_row.extend(pool.class_of_row);
    }
    let present: Vec<usize> = (0..opts.classes).filter(|c| class_of_row.contains(c)).collect();
    let groups: Vec<Vec<usize>> = present
        .iter()
        .map(|&c| (0..class_of_row.len()).filter(|&r| class_of_row[r] == c).collect())
        .collect();

    let protos = if protos.len() == 1 { protos[0] } else { g.concat_rows(&protos)? };
    let pn = g.l2_normalize_rows(protos, 1e-12);
    let qflat = g.reshape(query, &[d, hl * wl])?;
    let qt = g.transpose(qflat);
    let qn = g.l2_normalize_rows(qt, 1e-12);
    let qnt = g.transpose(qn);
    let sims = g.matmul(pn, qnt)?;
    let best = g.group_max_rows(sims, &groups)?;
    let logits = g.scale(best, opts.alpha);
    let lt = g.transpose(logits);
    let soft = g.softmax_rows(lt);

    let k = present.len();
    let zero = g.constant(Tensor::zeros(&[hl * wl, 1]));
    let padded = g.concat_cols(&[soft, zero])?;
    let col: Vec<usize> = (0..opts.classes).map(|c| present.iter().position(|&p| p == c).unwrap_or(k)).collect();
    let src = Mask::upsample_index((hl, wl), out_dims);
    let index: Vec<usize> = src.iter().flat_map(|&s| col.iter().map(move |&c| s * (k + 1) + c)).collect();
    g.gather(padded, index, &[out_dims.0, out_dims.1, opts.classes])
}

/// Masked local and global prototypes per class from the supports, cosine
/// similarity scaled by α, max over each class's prototypes, softmax over
/// classes, nearest upsampling to the mask resolution.
///
/// Support masks may be given at image resolution; they are resampled to the
/// feature grid. Classes absent from every support get probability zero.
pub fn prototype_classifier(
    query: &Tensor,
    support_features: &[Tensor],
    support_masks: &[Mask],
    opts: &ClassifierOptions,
) -> Result<ProbabilityMap> {
    if support_features.len() != support_masks.len() || support_masks.is_empty() {
        return Err(Error::dims("prototype_classifier", "need one mask per support feature map"));
    }
    if query.rank() != 3 {
        return Err(Error::dims("prototype_classifier", format!("query {:?}", query.dims())));
    }
    let (hl, wl) = (query.dims()[1], query.dims()[2]);
    let out_dims = support_masks[0].dims();
    let small: Vec<Mask> = support_masks.iter().map(|m| m.downsample((hl, wl))).collect::<Result<_>>()?;
    let mut g = Graph::new();
    let q = g.constant(query.clone());
    let sv: Vec<Var> = support_features.iter().map(|f| g.constant(f.clone())).collect();
    let pairs: Vec<(Var, &Mask)> = sv.iter().copied().zip(small.iter()).collect();
    let p = classifier_graph(&mut g, q, &pairs, opts, out_dims)?;
    Ok(ProbabilityMap { p: g.value(p).clone() })
}

fn same_dims(op: &'static str, p: &Tensor, g: &Tensor) -> Result<()> {
    if p.dims() != g.dims() {
        return Err(Error::dims(op, format!("{:?} vs {:?}", p.dims(), g.dims())));
    }
    Ok(())
}

pub const PROB_FLOOR: f64 = 1e-12;

pub fn ce_graph(g: &mut Graph, p: Var, labels: &OneHotLabels) -> Result<Var> {
    same_dims("ce_loss", g.value(p), &labels.g)?;
    let n = labels.g.len() as f64;
    let lg = g.ln_clamped(p, PROB_FLOOR);
    let gt = g.constant(labels.g.clone());
    let prod = g.mul(lg, gt)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / n))
}

/// `−(1/(H·W·C)) Σ G log max(P, 1e-12)`.
pub fn ce_loss(p: &ProbabilityMap, labels: &OneHotLabels) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(p.p.clone());
    let l = ce_graph(&mut g, pv, labels)?;
    Ok(g.value(l).data()[0])
}

pub fn dice_graph(g: &mut Graph, p: Var, labels: &OneHotLabels) -> Result<Var> {
    same_dims("dice_loss", g.value(p), &labels.g)?;
    let gsum = labels.g.sum();
    if g.value(p).sum() + gsum == 0.0 {
        return Err(Error::EmptyUnion);
    }
    let gt = g.constant(labels.g.clone());
    let inter = g.mul(p, gt)?;
    let num = g.sum(inter);
    let psum = g.sum(p);
    let den = g.add_scalar(psum, gsum);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -2.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// `1 − 2 Σ P⊙G / (Σ P + Σ G)`.
pub fn dice_loss(p: &ProbabilityMap, labels: &OneHotLabels) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(p.p.clone());
    let l = dice_graph(&mut g, pv, labels)?;
    Ok(g.value(l).data()[0])
}

/// `L_se + λ1 L_be + λ2 L_dc`.
pub fn total_loss(l_se: f64, l_be: f64, l_dc: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    for (name, v) in [("L_se", l_se), ("L_be", l_be), ("L_dc", l_dc)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteComponent(name));
        }
    }
    Ok(l_se + lambda1 * l_be + lambda2 * l_dc)
}

/// Graph form of [`total_loss`]; absent components contribute nothing.
pub fn total_graph(g: &mut Graph, l_se: Var, l_be: Option<Var>, l_dc: Option<Var>, lambda1: f64, lambda2: f64) -> Result<Var> {
    let mut total = l_se;
    if let Some(be) = l_be {
        let t = g.scale(be, lambda1);
        total = g.add(total, t)?;
    }
    if let Some(dc) = l_dc {
        let t = g.scale(dc, lambda2);
        total = g.add(total, t)?;
    }
    Ok(total)
}

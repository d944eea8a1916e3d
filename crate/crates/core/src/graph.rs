//! Reverse-mode differentiation over a fixed set of tensor operations.
//!
//! A [`Graph`] records values in creation order; each non-leaf node keeps a
//! closure mapping its output gradient onto its parents. Nodes that depend
//! on no parameter carry no closure and are skipped during the backward pass.

use crate::error::{Error, Result};
use crate::hyper::KernelSoftmax;
use crate::kernels::{self, gemm, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward = Box<dyn Fn(&[Tensor], &[f64], &mut GradSink<'_>)>;

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut [Vec<f64>],
    requires: &'a [bool],
    lens: &'a [usize],
}

impl GradSink<'_> {
    /// Mutable gradient buffer of `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        if self.grads[v.0].is_empty() {
            self.grads[v.0] = vec![0.0; self.lens[v.0]];
        }
        Some(&mut self.grads[v.0])
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v` (zeros if `v` did not influence it).
    pub fn get(&self, v: Var) -> Tensor {
        let g = &self.grads[v.0];
        if g.is_empty() {
            Tensor::zeros(&self.dims[v.0])
        } else {
            Tensor::from_parts(self.dims[v.0].clone(), g.clone())
        }
    }
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    requires: Vec<bool>,
    backward: Vec<Option<Backward>>,
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dims(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dims(op, format!("expected a matrix, got {:?}", t.dims())));
    }
    Ok((t.dims()[0], t.dims()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.requires.push(true);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.requires.push(false);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    fn push<F>(&mut self, value: Tensor, parents: &[Var], f: F) -> Var
    where
        F: Fn(&[Tensor], &[f64], &mut GradSink<'_>) + 'static,
    {
        let rg = parents.iter().any(|p| self.requires[p.0]);
        self.values.push(value);
        self.requires.push(rg);
        self.backward.push(if rg { Some(Box::new(f)) } else { None });
        Var(self.values.len() - 1)
    }

    /// Accumulates d`loss`/d`v` for every node; `loss` must hold one element.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.values[loss.0].len(), 1, "backward from a non-scalar node");
        let n = self.values.len();
        let lens: Vec<usize> = self.values.iter().map(Tensor::len).collect();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n];
        if self.requires[loss.0] {
            grads[loss.0] = vec![1.0];
        }
        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            if let Some(f) = &self.backward[i] {
                let g = std::mem::take(&mut grads[i]);
                let mut sink = GradSink {
                    grads: &mut grads,
                    requires: &self.requires,
                    lens: &lens,
                };
                f(&self.values, &g, &mut sink);
                grads[i] = g;
            }
        }
        Gradients {
            grads,
            dims: self.values.iter().map(|t| t.dims().to_vec()).collect(),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dims("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], move |vals, g, sink| {
            if let Some(ga) = sink.slot(a) {
                gemm_nt(g, vals[b.0].data(), ga, m, n, k);
            }
            if let Some(gb) = sink.slot(b) {
                gemm_tn(vals[a.0].data(), g, gb, k, m, n);
            }
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        self.push(t.transpose(), &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        })
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(dims)?;
        Ok(self.push(t, &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let dims = self.value(a).dims().to_vec();
        Ok(self.push(Tensor::from_parts(dims, data), &[a, b], move |_, g, sink| {
            for p in [a, b] {
                if let Some(gp) = sink.slot(p) {
                    for (x, y) in gp.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let dims = self.value(a).dims().to_vec();
        Ok(self.push(Tensor::from_parts(dims, data), &[a, b], move |vals, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for ((x, gi), bv) in ga.iter_mut().zip(g).zip(vals[b.0].data()) {
                    *x += gi * bv;
                }
            }
            if let Some(gb) = sink.slot(b) {
                for ((x, gi), av) in gb.iter_mut().zip(g).zip(vals[a.0].data()) {
                    *x += gi * av;
                }
            }
        }))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("div", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x / y).collect();
        let dims = self.value(a).dims().to_vec();
        Ok(self.push(Tensor::from_parts(dims, data), &[a, b], move |vals, g, sink| {
            let (av, bv) = (vals[a.0].data(), vals[b.0].data());
            if let Some(ga) = sink.slot(a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            if let Some(gb) = sink.slot(b) {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        self.push(t, &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += s * y;
                }
            }
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        self.push(t, &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        let cache = out.data().to_vec();
        self.push(out, &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for ((x, gi), s) in ga.iter_mut().zip(g).zip(&cache) {
                    *x += gi * s * (1.0 - s);
                }
            }
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, &[a], move |vals, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for ((x, gi), v) in ga.iter_mut().zip(g).zip(vals[a.0].data()) {
                    *x += if *v > 0.0 { *gi } else { slope * gi };
                }
            }
        })
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor).ln());
        self.push(out, &[a], move |vals, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for ((x, gi), v) in ga.iter_mut().zip(g).zip(vals[a.0].data()) {
                    if *v > floor {
                        *x += gi / v;
                    }
                }
            }
        })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        })
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), &[a], move |vals, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for (x, v) in ga.iter_mut().zip(vals[a.0].data()) {
                    *x += 2.0 * g[0] * v;
                }
            }
        })
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let cache = out.clone();
        self.push(Tensor::from_parts(vec![r, c], out), &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for i in 0..r {
                    let s = &cache[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let d = kernels::dot(s, gi);
                    for j in 0..c {
                        ga[i * c + j] += s[j] * (gi[j] - d);
                    }
                }
            }
        })
    }

    /// Scales each row of a matrix to unit Euclidean norm (`max(‖row‖, eps)`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let norms: Vec<f64> = (0..r).map(|i| kernels::dot(t.row(i), t.row(i)).sqrt().max(eps)).collect();
        let mut out = t.data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            for x in row {
                *x /= norms[i];
            }
        }
        let cache = out.clone();
        self.push(Tensor::from_parts(vec![r, c], out), &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for i in 0..r {
                    let y = &cache[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let n = norms[i];
                    if n <= eps {
                        for j in 0..c {
                            ga[i * c + j] += gi[j] / n;
                        }
                    } else {
                        let d = kernels::dot(y, gi);
                        for j in 0..c {
                            ga[i * c + j] += (gi[j] - y[j] * d) / n;
                        }
                    }
                }
            }
        })
    }

    /// For each group of row indices, the elementwise maximum over those rows.
    pub fn group_max_rows(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = matrix_dims("group_max_rows", t)?;
        let mut out = vec![f64::NEG_INFINITY; groups.len() * c];
        let mut arg = vec![0usize; groups.len() * c];
        for (k, grp) in groups.iter().enumerate() {
            if grp.is_empty() || grp.iter().any(|&i| i >= r) {
                return Err(Error::dims("group_max_rows", format!("invalid group {grp:?}")));
            }
            for &i in grp {
                for j in 0..c {
                    let v = t.at(i, j);
                    if v > out[k * c + j] {
                        out[k * c + j] = v;
                        arg[k * c + j] = i;
                    }
                }
            }
        }
        let nk = groups.len();
        Ok(self.push(Tensor::from_parts(vec![nk, c], out), &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for (idx, &src) in arg.iter().enumerate() {
                    ga[src * c + idx % c] += g[idx];
                }
            }
        }))
    }

    // ---- structural -----------------------------------------------------

    /// `out.flat[i] = a.flat[index[i]]`, shaped as `dims`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, dims: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if index.len() != dims.iter().product::<usize>() {
            return Err(Error::dims("gather", "index count does not match output dims"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dims("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        Ok(self.push(Tensor::from_parts(dims.to_vec(), data), &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for (gi, &i) in g.iter().zip(&index) {
                    ga[i] += gi;
                }
            }
        }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        for t in &tensors {
            matrix_dims("concat_rows", t)?;
        }
        let out = Tensor::concat_rows(&tensors)?;
        let sizes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        let parts = parts.to_vec();
        let parents = parts.clone();
        Ok(self.push(out, &parents, move |_, g, sink| {
            let mut off = 0;
            for (p, &n) in parts.iter().zip(&sizes) {
                if let Some(gp) = sink.slot(*p) {
                    for (x, y) in gp.iter_mut().zip(&g[off..off + n]) {
                        *x += y;
                    }
                }
                off += n;
            }
        }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        for t in &tensors {
            matrix_dims("concat_cols", t)?;
        }
        let out = Tensor::concat_cols(&tensors)?;
        let widths: Vec<usize> = tensors.iter().map(|t| t.cols()).collect();
        let total: usize = widths.iter().sum();
        let rows = out.rows();
        let parts = parts.to_vec();
        let parents = parts.clone();
        Ok(self.push(out, &parents, move |_, g, sink| {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                if let Some(gp) = sink.slot(*p) {
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix_dims("slice_rows", self.value(a))?;
        if start + len > r {
            return Err(Error::dims("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.value(a).slice_rows(start, len);
        Ok(self.push(out, &[a], move |_, g, sink| {
            if let Some(ga) = sink.slot(a) {
                for (x, y) in ga[start * c..(start + len) * c].iter_mut().zip(g) {
                    *x += y;
                }
            }
        }))
    }

    // ---- fused model operations -----------------------------------------

    /// Cross-correlation of a `C×H×W` input with an `O×C×k×k` kernel, zero
    /// padding `pad`, stride `stride`, optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        if x.rank() != 3 || w.rank() != 4 || x.dims()[0] != w.dims()[1] || w.dims()[2] != w.dims()[3] {
            return Err(Error::dims("conv2d", format!("input {:?}, kernel {:?}", x.dims(), w.dims())));
        }
        let (c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (o, k) = (w.dims()[0], w.dims()[2]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::dims("conv2d", "kernel larger than padded input"));
        }
        if let Some(b) = bias {
            if self.value(b).dims() != [o] {
                return Err(Error::dims("conv2d", "bias must have one entry per output channel"));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeometry { c, h, w: wd, o, k, ho, wo, stride, pad };
        let mut out = vec![0.0; o * ho * wo];
        geo.forward(x.data(), w.data(), &mut out);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (oc, plane) in out.chunks_mut(ho * wo).enumerate() {
                for v in plane {
                    *v += bv[oc];
                }
            }
        }
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        Ok(self.push(Tensor::from_parts(vec![o, ho, wo], out), &parents, move |vals, g, sink| {
            if let Some(gx) = sink.slot(input) {
                geo.backward_input(g, vals[kernel.0].data(), gx);
            }
            if let Some(gw) = sink.slot(kernel) {
                geo.backward_kernel(g, vals[input.0].data(), gw);
            }
            if let Some(b) = bias {
                if let Some(gb) = sink.slot(b) {
                    for (oc, plane) in g.chunks(ho * wo).enumerate() {
                        gb[oc] += plane.iter().sum::<f64>();
                    }
                }
            }
        }))
    }

    /// One affinity-weighted centroid update. `x` is `D×N` (pixel features as
    /// columns), `seeds` is a constant `D×F`. Returns `D×F` with column
    /// `f = Σ_p Z[p,f] x_p / Σ_p Z[p,f]`, `Z[p,f] = exp(−‖x_p − s_f‖²)`.
    /// Each column of `Z` is rescaled by `exp(min_p ‖x_p − s_f‖²)` before
    /// normalizing; the ratio is unchanged and the sums cannot underflow.
    pub fn slic_step(&mut self, x: Var, seeds: &Tensor) -> Result<Var> {
        let xt = self.value(x);
        let (d, n) = matrix_dims("slic_step", xt)?;
        let (d2, f) = matrix_dims("slic_step", seeds)?;
        if d != d2 || n == 0 || f == 0 {
            return Err(Error::dims("slic_step", format!("features {d}x{n}, seeds {d2}x{f}")));
        }
        let dist = sq_dist_cols(xt.data(), seeds.data(), d, n, f);
        // weights[p*f + j] = Z[p,j] / G_j
        let mut weights = vec![0.0; n * f];
        for j in 0..f {
            let m = (0..n).map(|p| dist[p * f + j]).fold(f64::INFINITY, f64::min);
            let mut s = 0.0;
            for p in 0..n {
                let z = (-(dist[p * f + j] - m)).exp();
                weights[p * f + j] = z;
                s += z;
            }
            for p in 0..n {
                weights[p * f + j] /= s;
            }
        }
        let mut out = vec![0.0; d * f];
        // out (d×f) = X (d×n) · W (n×f)
        gemm(xt.data(), &weights, &mut out, d, n, f);
        let seeds = seeds.data().to_vec();
        let out_cache = out.clone();
        Ok(self.push(Tensor::from_parts(vec![d, f], out), &[x], move |vals, g, sink| {
            let Some(gx) = sink.slot(x) else { return };
            let xv = vals[x.0].data();
            for j in 0..f {
                for p in 0..n {
                    let w = weights[p * f + j];
                    // dL/dZ' (scaled): w * g_j·(x_p − out_j)
                    let mut gdx = 0.0;
                    for r in 0..d {
                        gdx += g[r * f + j] * (xv[r * n + p] - out_cache[r * f + j]);
                    }
                    let coef = w * gdx;
                    for r in 0..d {
                        gx[r * n + p] += w * g[r * f + j]
                            - 2.0 * coef * (xv[r * n + p] - seeds[r * f + j]);
                    }
                }
            }
        }))
    }

    /// Kernel attention from `m1` (`D_u×T`) and `m2` (`D_l×T`):
    /// `A[a,b,t] = softmax(m1[a,t] + m2[b,t])` along the axis chosen by `mode`.
    /// Output dims `D_u×D_l×T`.
    pub fn kernel_attention_softmax(&mut self, m1: Var, m2: Var, mode: KernelSoftmax) -> Result<Var> {
        let (du, t) = matrix_dims("kernel_attention", self.value(m1))?;
        let (dl, t2) = matrix_dims("kernel_attention", self.value(m2))?;
        if t != t2 {
            return Err(Error::dims("kernel_attention", format!("{t} vs {t2} kernel taps")));
        }
        let (v1, v2) = (self.value(m1).data(), self.value(m2).data());
        let mut out = vec![0.0; du * dl * t];
        let at = move |a: usize, b: usize, k: usize| (a * dl + b) * t + k;
        for k in 0..t {
            match mode {
                KernelSoftmax::InputChannel => {
                    for a in 0..du {
                        let mut row: Vec<f64> = (0..dl).map(|b| v1[a * t + k] + v2[b * t + k]).collect();
                        kernels::softmax_in_place(&mut row);
                        for b in 0..dl {
                            out[at(a, b, k)] = row[b];
                        }
                    }
                }
                KernelSoftmax::ChannelPlane => {
                    let mut plane: Vec<f64> = Vec::with_capacity(du * dl);
                    for a in 0..du {
                        for b in 0..dl {
                            plane.push(v1[a * t + k] + v2[b * t + k]);
                        }
                    }
                    kernels::softmax_in_place(&mut plane);
                    for a in 0..du {
                        for b in 0..dl {
                            out[at(a, b, k)] = plane[a * dl + b];
                        }
                    }
                }
            }
        }
        let cache = out.clone();
        Ok(self.push(Tensor::from_parts(vec![du, dl, t], out), &[m1, m2], move |_, g, sink| {
            // dL/dlogit[a,b,k] = A (g − Σ_group A g) within each softmax group.
            let mut dlogit = vec![0.0; du * dl * t];
            for k in 0..t {
                match mode {
                    KernelSoftmax::InputChannel => {
                        for a in 0..du {
                            let s: f64 = (0..dl).map(|b| cache[at(a, b, k)] * g[at(a, b, k)]).sum();
                            for b in 0..dl {
                                let i = at(a, b, k);
                                dlogit[i] = cache[i] * (g[i] - s);
                            }
                        }
                    }
                    KernelSoftmax::ChannelPlane => {
                        let mut s = 0.0;
                        for a in 0..du {
                            for b in 0..dl {
                                s += cache[at(a, b, k)] * g[at(a, b, k)];
                            }
                        }
                        for a in 0..du {
                            for b in 0..dl {
                                let i = at(a, b, k);
                                dlogit[i] = cache[i] * (g[i] - s);
                            }
                        }
                    }
                }
            }
            if let Some(g1) = sink.slot(m1) {
                for a in 0..du {
                    for b in 0..dl {
                        for k in 0..t {
                            g1[a * t + k] += dlogit[at(a, b, k)];
                        }
                    }
                }
            }
            if let Some(g2) = sink.slot(m2) {
                for a in 0..du {
                    for b in 0..dl {
                        for k in 0..t {
                            g2[b * t + k] += dlogit[at(a, b, k)];
                        }
                    }
                }
            }
        }))
    }
}

/// `dist[p*f + j] = ‖x[:,p] − s[:,j]‖²` for column-major-by-row storage `d×n`, `d×f`.
pub(crate) fn sq_dist_cols(x: &[f64], s: &[f64], d: usize, n: usize, f: usize) -> Vec<f64> {
    let mut dist = vec![0.0; n * f];
    for r in 0..d {
        let xr = &x[r * n..(r + 1) * n];
        let sr = &s[r * f..(r + 1) * f];
        for p in 0..n {
            for j in 0..f {
                let diff = xr[p] - sr[j];
                dist[p * f + j] += diff * diff;
            }
        }
    }
    dist
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies in `0..w`.
    fn ox_range(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    fn oy_range(&self, ky: usize) -> std::ops::Range<usize> {
        let lo = if ky >= self.pad { 0 } else { (self.pad - ky).div_ceil(self.stride) };
        let hi = if self.h + self.pad > ky {
            ((self.h + self.pad - ky - 1) / self.stride + 1).min(self.ho)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Unfolds `x` into a `(c·k·k) × (ho·wo)` patch matrix, zero outside the input.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let Self { c, h, w: wd, k, ho, wo, stride, pad, .. } = *self;
        let n = ho * wo;
        let mut cols = vec![0.0; c * k * k * n];
        for ic in 0..c {
            let xin = &x[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let oys = self.oy_range(ky);
                for kx in 0..k {
                    let oxs = self.ox_range(kx);
                    let row = &mut cols[((ic * k + ky) * k + kx) * n..][..n];
                    for oy in oys.clone() {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xin[iy * wd..(iy + 1) * wd];
                        for ox in oxs.clone() {
                            row[oy * wo + ox] = xrow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let Self { c, h, w: wd, k, ho, wo, stride, pad, .. } = *self;
        let n = ho * wo;
        for ic in 0..c {
            let gin = &mut gx[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let oys = self.oy_range(ky);
                for kx in 0..k {
                    let oxs = self.ox_range(kx);
                    let row = &cols[((ic * k + ky) * k + kx) * n..][..n];
                    for oy in oys.clone() {
                        let iy = oy * stride + ky - pad;
                        for ox in oxs.clone() {
                            gin[iy * wd + ox * stride + kx - pad] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let cols = self.im2col(x);
        gemm(w, &cols, out, self.o, self.patch_len(), self.ho * self.wo);
    }

    fn backward_input(&self, g: &[f64], w: &[f64], gx: &mut [f64]) {
        let n = self.ho * self.wo;
        let mut cols = vec![0.0; self.patch_len() * n];
        gemm_tn(w, g, &mut cols, self.patch_len(), self.o, n);
        self.col2im(&cols, gx);
    }

    fn backward_kernel(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let cols = self.im2col(x);
        gemm_nt(g, &cols, gw, self.o, self.ho * self.wo, self.patch_len());
    }
}

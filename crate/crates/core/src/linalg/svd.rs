//! Exact truncated SVD: Householder QR followed by one-sided Jacobi on the
//! square triangular factor.
//!
//! Sign convention: the first entry of each left singular vector whose
//! magnitude exceeds `1e-12` is nonnegative; the matching right singular
//! vector is flipped with it.

use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::tensor::Tensor;

/// `W ≈ U · diag(sigma) · V` with `U` `M×S` and `V` `S×N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Tensor {
        let (m, s) = (self.u.rows(), self.u.cols());
        let us = Tensor::from_fn(&[m, s], |i| self.u.data()[i] * self.sigma[i % s]);
        us.matmul(&self.v).expect("factor shapes agree")
    }

    fn truncate(mut self, s: usize) -> Self {
        let (m, k) = (self.u.rows(), self.u.cols());
        let n = self.v.cols();
        if s < k {
            let u = Tensor::from_fn(&[m, s], |i| self.u.at(i / s, i % s));
            self.u = u;
            self.v = self.v.slice_rows(0, s);
            self.sigma.truncate(s);
        }
        debug_assert_eq!(self.v.cols(), n);
        self
    }
}

fn check_input(w: &Tensor, s: usize) -> Result<(usize, usize)> {
    if w.rank() != 2 {
        return Err(Error::dims("truncated_svd", format!("expected a matrix, got {:?}", w.dims())));
    }
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let (m, n) = (w.rows(), w.cols());
    let max = m.min(n);
    if s == 0 || s > max {
        return Err(Error::RankTooLarge { requested: s, max });
    }
    Ok((m, n))
}

/// Leading `s` singular triplets of `w`.
pub fn truncated_svd(w: &Tensor, s: usize) -> Result<SvdFactors> {
    check_input(w, s)?;
    Ok(thin_svd(w).truncate(s))
}

/// Leading `s` singular triplets of `a · b` without forming the product when
/// the inner dimension is the smallest one.
pub fn truncated_svd_of_product(a: &Tensor, b: &Tensor, s: usize) -> Result<SvdFactors> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::dims(
            "truncated_svd_of_product",
            format!("{:?} · {:?}", a.dims(), b.dims()),
        ));
    }
    let (m, r, n) = (a.rows(), a.cols(), b.cols());
    if r >= m.min(n) || s > r {
        return truncated_svd(&a.matmul(b)?, s);
    }
    check_input(a, 1)?;
    check_input(b, 1)?;
    if s == 0 || s > m.min(n) {
        return Err(Error::RankTooLarge { requested: s, max: m.min(n) });
    }
    // a = Qa Ra, bᵀ = Qb Rb  =>  a b = Qa (Ra Rbᵀ) Qbᵀ
    let (qa, ra) = householder_qr(a);
    let (qb, rb) = householder_qr(&b.transpose());
    let core = ra.matmul(&rb.transpose())?;
    let small = thin_svd(&core);
    let u = qa.matmul(&small.u)?;
    let v = small.v.matmul(&qb.transpose())?;
    let mut f = SvdFactors {
        u,
        sigma: small.sigma,
        v,
    };
    fix_signs(&mut f);
    Ok(f.truncate(s))
}

/// Full thin SVD with `k = min(m, n)` triplets, sorted descending.
fn thin_svd(w: &Tensor) -> SvdFactors {
    let (m, n) = (w.rows(), w.cols());
    if m < n {
        let t = thin_svd(&w.transpose());
        let mut f = SvdFactors {
            u: t.v.transpose(),
            sigma: t.sigma,
            v: t.u.transpose(),
        };
        fix_signs(&mut f);
        return f;
    }
    let (q, r) = householder_qr(w);
    let (ur, sigma, vr) = jacobi_square(&r);
    let u = q.matmul(&ur).expect("qr shapes");
    let mut f = SvdFactors { u, sigma, v: vr };
    fix_signs(&mut f);
    f
}

/// Thin Householder QR of an `m×n` matrix with `m ≥ n`: `Q` is `m×n`, `R` is `n×n`.
pub(crate) fn householder_qr(a: &Tensor) -> (Tensor, Tensor) {
    let (m, n) = (a.rows(), a.cols());
    assert!(m >= n, "householder_qr needs a tall matrix");
    let mut r = a.data().to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (j..m).map(|i| r[i * n + j]).collect();
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vn = dot(&v, &v).sqrt();
        if vn == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        for x in v.iter_mut() {
            *x /= vn;
        }
        for col in j..n {
            let s: f64 = (j..m).map(|i| v[i - j] * r[i * n + col]).sum();
            for i in j..m {
                r[i * n + col] -= 2.0 * s * v[i - j];
            }
        }
        reflectors.push(v);
    }
    let rt = Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if i <= j { r[i * n + j] } else { 0.0 }
    });
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I_m.
    let mut q = vec![0.0; m * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for j in (0..n).rev() {
        let v = &reflectors[j];
        if v.is_empty() {
            continue;
        }
        for col in 0..n {
            let s: f64 = (j..m).map(|i| v[i - j] * q[i * n + col]).sum();
            for i in j..m {
                q[i * n + col] -= 2.0 * s * v[i - j];
            }
        }
    }
    (Tensor::from_parts(vec![m, n], q), rt)
}

/// One-sided (Hestenes) Jacobi on a square matrix. Returns `(U, sigma, V)`
/// with `V` stored as rows, sorted by descending `sigma`.
fn jacobi_square(r: &Tensor) -> (Tensor, Vec<f64>, Tensor) {
    let n = r.rows();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| r.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let smax = order.first().map_or(0.0, |&i| sigma[i]);
    let tiny = smax * 1e-13;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut vrows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sorted = Vec::with_capacity(n);
    for &j in &order {
        if sigma[j] > tiny && sigma[j] > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            sigma[j] = 0.0;
            ucols.push(Vec::new());
        }
        vrows.push(vcols[j].clone());
        sorted.push(sigma[j]);
    }
    complete_orthonormal(&mut ucols, n);
    let u = Tensor::from_fn(&[n, n], |idx| ucols[idx % n][idx / n]);
    let v = Tensor::from_fn(&[n, n], |idx| vrows[idx / n][idx % n]);
    (u, sorted, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills empty entries of `cols` with unit vectors orthogonal to all others.
fn complete_orthonormal(cols: &mut [Vec<f64>], dim: usize) {
    let mut basis = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        loop {
            assert!(basis < dim, "ran out of basis vectors while completing U");
            let mut v = vec![0.0; dim];
            v[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let d = dot(&v, other);
                    for (x, o) in v.iter_mut().zip(other) {
                        *x -= d * o;
                    }
                }
            }
            let nrm = dot(&v, &v).sqrt();
            if nrm > 1e-6 {
                cols[j] = v.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

fn fix_signs(f: &mut SvdFactors) {
    let (m, k) = (f.u.rows(), f.u.cols());
    let n = f.v.cols();
    for j in 0..k {
        let first = (0..m).map(|i| f.u.at(i, j)).find(|x| x.abs() > 1e-12);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..m {
                f.u.data_mut()[i * k + j] *= -1.0;
            }
            for c in 0..n {
                f.v.data_mut()[j * n + c] *= -1.0;
            }
        }
    }
}

use crate::error::{Error, Result};
use crate::kernels::log_sum_exp;
use crate::tensor::Tensor;

/// Entropic transport plan with its marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub t: Tensor,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Sweeps performed.
    pub iterations: usize,
    /// Max-abs marginal violation of the returned plan.
    pub violation: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.t.rows()).map(|i| self.t.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let (r, c) = (self.t.rows(), self.t.cols());
        (0..c).map(|j| (0..r).map(|i| self.t.at(i, j)).sum()).collect()
    }
}

/// Arithmetic used for the scaling iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Domain {
    /// Plain scalings unless `μ ≤ 0.01` or the Gibbs kernel leaves the normal range.
    #[default]
    Auto,
    Plain,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornOptions {
    pub mu: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub domain: Domain,
}

impl SinkhornOptions {
    pub fn new(mu: f64, max_iters: usize, tol: f64) -> Self {
        Self { mu, max_iters, tol, domain: Domain::Auto }
    }
}

/// Solves `min ⟨T, 1 − M_b⟩ − μ H(T)` subject to `T1 = u`, `Tᵀ1 = v`.
///
/// Returns [`Error::NonConvergence`] carrying the last plan when the row
/// violation is still above `tol` after `max_iters` sweeps.
pub fn sinkhorn(m_b: &Tensor, u: &[f64], v: &[f64], mu: f64, max_iters: usize, tol: f64) -> Result<TransportPlan> {
    sinkhorn_with(m_b, u, v, &SinkhornOptions::new(mu, max_iters, tol))
}

pub fn sinkhorn_with(m_b: &Tensor, u: &[f64], v: &[f64], opts: &SinkhornOptions) -> Result<TransportPlan> {
    solve(m_b, u, v, opts, None)
}

/// Like [`sinkhorn_with`] but also returns the violation after every sweep.
pub fn sinkhorn_trace(
    m_b: &Tensor,
    u: &[f64],
    v: &[f64],
    opts: &SinkhornOptions,
) -> Result<(TransportPlan, Vec<f64>)> {
    let mut trace = Vec::new();
    let plan = solve(m_b, u, v, opts, Some(&mut trace))?;
    Ok((plan, trace))
}

/// `⟨T, 1 − M_b⟩ + μ Σ T log T`, the quantity Sinkhorn minimizes.
pub fn transport_objective(t: &Tensor, m_b: &Tensor, mu: f64) -> f64 {
    t.data()
        .iter()
        .zip(m_b.data())
        .map(|(&x, &m)| x * (1.0 - m) + if x > 0.0 { mu * x * x.ln() } else { 0.0 })
        .sum()
}

fn check_marginal(name: &str, w: &[f64]) -> Result<()> {
    if let Some(x) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::DegenerateMarginal(format!("{name} has non-positive entry {x}")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::DegenerateMarginal(format!("{name} sums to {s}")));
    }
    Ok(())
}

fn solve(
    m_b: &Tensor,
    u: &[f64],
    v: &[f64],
    opts: &SinkhornOptions,
    trace: Option<&mut Vec<f64>>,
) -> Result<TransportPlan> {
    let n = u.len();
    if m_b.rank() != 2 || m_b.rows() != n || m_b.cols() != n || v.len() != n {
        return Err(Error::dims(
            "sinkhorn",
            format!("M_b {:?}, |u| = {n}, |v| = {}", m_b.dims(), v.len()),
        ));
    }
    if m_b.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    if !(opts.mu.is_finite() && opts.mu > 0.0) {
        return Err(Error::Config(format!("entropy weight must be positive, got {}", opts.mu)));
    }
    check_marginal("u", u)?;
    check_marginal("v", v)?;

    let mu = opts.mu;
    let logits: Vec<f64> = m_b.data().iter().map(|m| -(1.0 - m) / mu).collect();
    let kernel_ok = logits.iter().all(|&l| {
        let k = l.exp();
        k.is_normal() && k < 1e300
    });
    let plain = match opts.domain {
        Domain::Plain => true,
        Domain::Log => false,
        Domain::Auto => mu > 0.01 && kernel_ok,
    };
    let (t, iterations, violation) = if plain {
        let mut local = Vec::new();
        match plain_sweeps(&logits, u, v, opts, &mut local) {
            Some(r) => {
                if let Some(tr) = trace {
                    *tr = local;
                }
                r
            }
            None if opts.domain == Domain::Auto => log_sweeps(&logits, u, v, opts, trace),
            None => return Err(Error::NonFiniteInput),
        }
    } else {
        log_sweeps(&logits, u, v, opts, trace)
    };
    let plan = TransportPlan {
        t: Tensor::from_parts(vec![n, n], t),
        u: u.to_vec(),
        v: v.to_vec(),
        iterations,
        violation,
    };
    if violation > opts.tol {
        return Err(Error::NonConvergence { violation, iterations, plan: Box::new(plan) });
    }
    Ok(plan)
}

/// Decides when a sweep is preceded by a Newton step on the dual potentials.
/// Plain sweeps run until two consecutive contraction ratios agree on a slow
/// rate; from then on each sweep starts with a Newton step, kept only if it
/// at least halves the violation. A rejected step is rolled back and the next
/// attempt waits twice as long, up to a cap.
struct Acceleration {
    prev: f64,
    ratio: f64,
    active: bool,
    wait: usize,
    backoff: usize,
}

impl Acceleration {
    const SLOW_RATE: f64 = 0.3;
    const RATIO_AGREEMENT: f64 = 0.05;
    const REQUIRED_GAIN: f64 = 0.5;
    const MAX_BACKOFF: usize = 16;

    fn new() -> Self {
        Self { prev: f64::INFINITY, ratio: f64::NAN, active: false, wait: 0, backoff: 1 }
    }

    fn attempt(&mut self) -> bool {
        if !self.active {
            return false;
        }
        if self.wait > 0 {
            self.wait -= 1;
            return false;
        }
        true
    }

    /// Records a finished sweep; returns whether it is kept.
    fn settle(&mut self, newton: bool, violation: f64) -> bool {
        if newton && !(violation <= Self::REQUIRED_GAIN * self.prev) {
            self.wait = self.backoff;
            self.backoff = (self.backoff * 2).min(Self::MAX_BACKOFF);
            return false;
        }
        if newton {
            self.backoff = 1;
        }
        if !newton && !self.active && self.prev.is_finite() && self.prev > 0.0 {
            let rho = violation / self.prev;
            if rho > Self::SLOW_RATE && (rho - self.ratio).abs() <= Self::RATIO_AGREEMENT {
                self.active = true;
            }
            self.ratio = rho;
        }
        self.prev = violation;
        true
    }
}

/// Newton direction `(δf, δg)` for the dual potentials of `log T = f + L + g`,
/// with `δg` fixed to zero in the last column to remove the shift symmetry.
fn newton_direction(t: &[f64], u: &[f64], v: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = u.len();
    if n < 2 {
        return None;
    }
    let m = 2 * n - 1;
    let mut h = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for i in 0..n {
        let r: f64 = t[i * n..(i + 1) * n].iter().sum();
        h[i * m + i] = r;
        rhs[i] = u[i] - r;
        for j in 0..n - 1 {
            h[i * m + n + j] = t[i * n + j];
            h[(n + j) * m + i] = t[i * n + j];
        }
    }
    for j in 0..n - 1 {
        let c: f64 = (0..n).map(|i| t[i * n + j]).sum();
        h[(n + j) * m + n + j] = c;
        rhs[n + j] = v[j] - c;
    }
    let x = solve_linear(h, rhs, m)?;
    let mut dg = x[n..].to_vec();
    dg.push(0.0);
    Some((x[..n].to_vec(), dg))
}

/// Gaussian elimination with partial pivoting on a row-major `m×m` system.
fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>, m: usize) -> Option<Vec<f64>> {
    for col in 0..m {
        let piv = (col..m).max_by(|&x, &y| a[x * m + col].abs().total_cmp(&a[y * m + col].abs()))?;
        if !(a[piv * m + col].abs() > 1e-300) {
            return None;
        }
        if piv != col {
            for k in 0..m {
                a.swap(piv * m + k, col * m + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..m {
            let f = a[r * m + col] / a[col * m + col];
            if f != 0.0 {
                for k in col..m {
                    a[r * m + k] -= f * a[col * m + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|k| a[r * m + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * m + r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn row_violation(t: &[f64], u: &[f64]) -> f64 {
    let n = u.len();
    (0..n)
        .map(|i| (t[i * n..(i + 1) * n].iter().sum::<f64>() - u[i]).abs())
        .fold(0.0, f64::max)
}

/// Returns `None` if a scaling leaves the finite positive range.
fn plain_sweeps(
    logits: &[f64],
    u: &[f64],
    v: &[f64],
    opts: &SinkhornOptions,
    trace: &mut Vec<f64>,
) -> Option<(Vec<f64>, usize, f64)> {
    let n = u.len();
    let k: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; n];
    let mut t = vec![0.0; n * n];
    let mut violation = f64::INFINITY;
    let mut it = 0;
    let mut accel = Acceleration::new();
    while it < opts.max_iters {
        it += 1;
        let newton = accel.attempt();
        let saved = newton.then(|| (a.clone(), b.clone(), t.clone()));
        if newton {
            if let Some((df, dg)) = newton_direction(&t, u, v) {
                a.iter_mut().zip(&df).for_each(|(x, d)| *x *= d.exp());
                b.iter_mut().zip(&dg).for_each(|(x, d)| *x *= d.exp());
            }
        }
        for i in 0..n {
            let kb: f64 = (0..n).map(|j| k[i * n + j] * b[j]).sum();
            a[i] = u[i] / kb;
        }
        for j in 0..n {
            let ka: f64 = (0..n).map(|i| k[i * n + j] * a[i]).sum();
            b[j] = v[j] / ka;
        }
        let finite = a.iter().chain(&b).all(|x| x.is_finite() && *x > 0.0);
        if finite {
            for i in 0..n {
                for j in 0..n {
                    t[i * n + j] = a[i] * k[i * n + j] * b[j];
                }
            }
        }
        let candidate = if finite { row_violation(&t, u) } else { f64::INFINITY };
        if !accel.settle(newton, candidate) {
            if let Some(prev) = saved {
                (a, b, t) = prev;
            }
            trace.push(violation);
            continue;
        }
        if !finite {
            return None;
        }
        violation = candidate;
        trace.push(violation);
        if violation <= opts.tol {
            break;
        }
    }
    if opts.max_iters == 0 {
        t.iter_mut().zip(&k).for_each(|(x, &y)| *x = y);
        violation = row_violation(&t, u);
    }
    Some((t, it, violation))
}

fn log_sweeps(
    logits: &[f64],
    u: &[f64],
    v: &[f64],
    opts: &SinkhornOptions,
    mut trace: Option<&mut Vec<f64>>,
) -> (Vec<f64>, usize, f64) {
    let n = u.len();
    let lu: Vec<f64> = u.iter().map(|x| x.ln()).collect();
    let lv: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    // log T_ij = f_i + logits_ij + g_j
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut t = vec![0.0; n * n];
    let mut violation = f64::INFINITY;
    let mut it = 0;
    if let Some(tr) = trace.as_deref_mut() {
        tr.clear();
    }
    let mut accel = Acceleration::new();
    while it < opts.max_iters {
        it += 1;
        let newton = accel.attempt();
        let saved = newton.then(|| (f.clone(), g.clone(), t.clone()));
        if newton {
            if let Some((df, dg)) = newton_direction(&t, u, v) {
                f.iter_mut().zip(&df).for_each(|(x, d)| *x += d);
                g.iter_mut().zip(&dg).for_each(|(x, d)| *x += d);
            }
        }
        for i in 0..n {
            f[i] = lu[i] - log_sum_exp((0..n).map(|j| logits[i * n + j] + g[j]));
        }
        for j in 0..n {
            g[j] = lv[j] - log_sum_exp((0..n).map(|i| logits[i * n + j] + f[i]));
        }
        for i in 0..n {
            for j in 0..n {
                t[i * n + j] = (f[i] + logits[i * n + j] + g[j]).exp();
            }
        }
        let candidate = row_violation(&t, u);
        if !accel.settle(newton, candidate) {
            if let Some(prev) = saved {
                (f, g, t) = prev;
            }
        } else {
            violation = candidate;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(violation);
        }
        if violation <= opts.tol {
            break;
        }
    }
    if opts.max_iters == 0 {
        t.iter_mut().zip(logits).for_each(|(x, &l)| *x = l.exp());
        violation = row_violation(&t, u);
    }
    (t, it, violation)
}

use crate::error::{Error, Result};
use crate::graph::{sq_dist_cols, Graph, Var};
use crate::tensor::Tensor;

/// Superpixel centroids `D_l×N_s` of one support image.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelCentroids {
    pub centroids: Tensor,
    pub class_id: usize,
}

impl SuperpixelCentroids {
    pub fn count(&self) -> usize {
        self.centroids.cols()
    }
}

/// `max(1, min(⌊N_i / G⌋, N_s^max))`.
pub fn superpixel_count(n_i: usize, g: usize, max: usize) -> usize {
    (n_i / g.max(1)).min(max).max(1)
}

/// Evenly spaced positions in a scan of `n` items: the centre of each of
/// `k` equal segments.
pub fn seed_indices(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|f| ((2 * f + 1) * n) / (2 * k)).collect()
}

/// `Z[p, f] = exp(−‖x_p − s_f‖²)`, shape `N×F`.
pub fn affinity_map(x: &Tensor, seeds: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || seeds.rank() != 2 || x.rows() != seeds.rows() {
        return Err(Error::dims("affinity_map", format!("{:?} vs {:?}", x.dims(), seeds.dims())));
    }
    let (n, f) = (x.cols(), seeds.cols());
    let dist = sq_dist_cols(x.data(), seeds.data(), x.rows(), n, f);
    Ok(Tensor::from_parts(vec![n, f], dist.into_iter().map(|d| (-d).exp()).collect()))
}

fn check(x: &Tensor, n_s: usize) -> Result<usize> {
    if x.rank() != 2 || x.cols() == 0 {
        return Err(Error::dims("masked_slic", format!("expected D×N features, got {:?}", x.dims())));
    }
    if n_s == 0 {
        return Err(Error::dims("masked_slic", "at least one seed is required"));
    }
    if n_s > x.cols() {
        log::debug!("superpixel count reduced from {n_s} to {}", x.cols());
    }
    Ok(n_s.min(x.cols()))
}

fn initial_seeds(x: &Tensor, n_s: usize) -> Tensor {
    let (d, n) = (x.rows(), x.cols());
    let idx = seed_indices(n, n_s);
    Tensor::from_fn(&[d, n_s], |i| x.at(i / n_s, idx[i % n_s]))
}

/// Masked SLIC on foreground features `D_l×N_i`: seeds at evenly spaced
/// foreground positions, then `iters` affinity-weighted centroid updates.
pub fn masked_slic(fs_fg: &Tensor, n_s: usize, iters: usize, class_id: usize) -> Result<SuperpixelCentroids> {
    let mut g = Graph::new();
    let x = g.constant(fs_fg.clone());
    let out = masked_slic_graph(&mut g, x, n_s, iters)?;
    Ok(SuperpixelCentroids { centroids: g.value(out).clone(), class_id })
}

/// Graph form of [`masked_slic`]. Only the final update carries gradients;
/// earlier iterations produce constant seeds.
pub fn masked_slic_graph(g: &mut Graph, x: Var, n_s: usize, iters: usize) -> Result<Var> {
    let xv = g.value(x).clone();
    let n_s = check(&xv, n_s)?;
    if iters == 0 {
        let (d, n) = (xv.rows(), xv.cols());
        let idx = seed_indices(n, n_s);
        let index = (0..d * n_s).map(|i| (i / n_s) * n + idx[i % n_s]).collect();
        return g.gather(x, index, &[d, n_s]);
    }
    let mut seeds = initial_seeds(&xv, n_s);
    let mut scratch = Graph::new();
    let xc = scratch.constant(xv);
    for _ in 1..iters {
        let s = scratch.slic_step(xc, &seeds)?;
        seeds = scratch.value(s).clone();
    }
    g.slic_step(x, &seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{grad_check, random_projection};
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Plain loops over the affinity and centroid formulas, no rescaling.
    fn verbatim(x: &Tensor, n_s: usize, iters: usize) -> Tensor {
        let (d, n) = (x.rows(), x.cols());
        let mut s: Vec<Vec<f64>> = seed_indices(n, n_s).iter().map(|&p| (0..d).map(|r| x.at(r, p)).collect()).collect();
        for _ in 0..iters {
            let mut next = vec![vec![0.0; d]; n_s];
            for f in 0..n_s {
                let mut g = 0.0;
                for p in 0..n {
                    let phi: f64 = (0..d).map(|r| (x.at(r, p) - s[f][r]).powi(2)).sum();
                    let z = (-phi).exp();
                    g += z;
                    for r in 0..d {
                        next[f][r] += z * x.at(r, p);
                    }
                }
                for r in 0..d {
                    next[f][r] /= g;
                }
            }
            s = next;
        }
        Tensor::from_fn(&[d, n_s], |i| s[i % n_s][i / n_s])
    }

    #[test]
    fn count_rule() {
        assert_eq!(superpixel_count(800, 80, 10), 10);
        assert_eq!(superpixel_count(79, 80, 10), 1);
        assert_eq!(superpixel_count(400, 80, 10), 5);
        assert_eq!(superpixel_count(5000, 80, 10), 10);
    }

    #[test]
    fn single_pixel_fixed_point() {
        let x = Tensor::matrix(3, 1, vec![0.2, -1.0, 4.0]).unwrap();
        for iters in [0, 1, 5] {
            assert_eq!(masked_slic(&x, 1, iters, 0).unwrap().centroids, x);
        }
    }

    #[test]
    fn constant_features() {
        let x = Tensor::from_fn(&[2, 6], |i| if i < 6 { 0.5 } else { -2.0 });
        let c = masked_slic(&x, 3, 5, 1).unwrap();
        assert_eq!(c.count(), 3);
        for f in 0..3 {
            assert!((c.centroids.at(0, f) - 0.5).abs() < 1e-15);
            assert!((c.centroids.at(1, f) + 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn six_points_two_seeds_match_verbatim_loop() {
        let x = Tensor::matrix(2, 6, vec![0.0, 0.1, 0.3, 1.0, 1.2, 0.9, 0.0, 0.2, -0.1, 1.1, 0.8, 1.0]).unwrap();
        let c = masked_slic(&x, 2, 5, 0).unwrap();
        assert!(c.centroids.max_abs_diff(&verbatim(&x, 2, 5)) < 1e-10);
    }

    #[test]
    fn too_many_seeds_are_reduced() {
        let x = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(masked_slic(&x, 5, 2, 0).unwrap().count(), 2);
    }

    #[test]
    fn final_iteration_gradient_with_detached_seeds() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let x = Tensor::from_fn(&[3, 8], |_| rng.range(-0.7, 0.7));
            let seeds = masked_slic(&x, 3, 4, 0).unwrap().centroids;
            let rep = grad_check(&[("x", x)], 1e-5, |g, v| {
                let c = g.slic_step(v[0], &seeds)?;
                random_projection(g, c, seed)
            })
            .unwrap();
            assert!(rep.max_rel_error <= 1e-3, "{rep:?}");
        }
    }

    proptest! {
        #[test]
        fn small_instances_match_verbatim(seed in any::<u64>(), n in 1usize..=10, k in 1usize..=3, d in 1usize..=4) {
            let mut rng = Rng::new(seed);
            let x = Tensor::from_fn(&[d, n], |_| rng.range(-1.5, 1.5));
            let k = k.min(n);
            let c = masked_slic(&x, k, 5, 0).unwrap();
            prop_assert!(c.centroids.max_abs_diff(&verbatim(&x, k, 5)) < 1e-10);
        }

        #[test]
        fn affinities_in_unit_interval(seed in any::<u64>(), n in 1usize..=10) {
            let mut rng = Rng::new(seed);
            let x = Tensor::from_fn(&[2, n], |_| rng.range(-1.0, 1.0));
            let seeds = initial_seeds(&x, 1.max(n / 2));
            let z = affinity_map(&x, &seeds).unwrap();
            let idx = seed_indices(n, seeds.cols());
            for p in 0..n {
                for f in 0..seeds.cols() {
                    let v = z.at(p, f);
                    prop_assert!(v > 0.0 && v <= 1.0);
                    if idx[f] == p {
                        prop_assert_eq!(v, 1.0);
                    }
                }
            }
        }

        #[test]
        fn centroids_are_convex_combinations(seed in any::<u64>(), n in 1usize..=10) {
            let mut rng = Rng::new(seed);
            let x = Tensor::from_fn(&[3, n], |_| rng.range(-1.0, 1.0));
            let k = 2.min(n);
            let prev = masked_slic(&x, k, 4, 0).unwrap().centroids;
            let last = masked_slic(&x, k, 5, 0).unwrap().centroids;
            let z = affinity_map(&x, &prev).unwrap();
            for f in 0..k {
                let total: f64 = (0..n).map(|p| z.at(p, f)).sum();
                let w: Vec<f64> = (0..n).map(|p| z.at(p, f) / total).collect();
                prop_assert!(w.iter().all(|&v| v >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for r in 0..3 {
                    let rebuilt: f64 = (0..n).map(|p| w[p] * x.at(r, p)).sum();
                    prop_assert!((rebuilt - last.at(r, f)).abs() < 1e-10);
                }
            }
        }
    }
}

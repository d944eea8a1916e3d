use super::*;
use crate::linalg::{grad_check, random_projection};
use crate::rng::Rng;
use proptest::prelude::*;

fn rand_t(rng: &mut Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.range(-1.0, 1.0))
}

fn cents(rng: &mut Rng, d: usize, n: usize, class_id: usize) -> SuperpixelCentroids {
    SuperpixelCentroids { centroids: rand_t(rng, &[d, n]), class_id }
}

#[test]
fn bags_without_missing_classes() {
    let mut rng = Rng::new(1);
    let support = vec![cents(&mut rng, 3, 4, 0)];
    let mem = ClassMemory::new(5, 3, Rng::new(0));
    let b = build_bags(&support, &mem, &[0], &rand_t(&mut rng, &[3, 2, 2]), &rand_t(&mut rng, &[4, 6])).unwrap();
    assert_eq!((b.n_support, b.n_memory, b.n_query), (4, 0, 6));
    assert_eq!(b.nodes.dims(), &[3, 10]);
}

#[test]
fn bags_repair_one_missing_class() {
    let mut rng = Rng::new(2);
    let support = vec![cents(&mut rng, 3, 2, 0), cents(&mut rng, 3, 2, 0)];
    let mut mem = ClassMemory::new(5, 3, Rng::new(0));
    mem.update(&cents(&mut rng, 3, 7, 1)).unwrap();
    let b = build_bags(&support, &mem, &[0, 1], &rand_t(&mut rng, &[3, 2, 2]), &rand_t(&mut rng, &[4, 3])).unwrap();
    assert_eq!(b.nodes.cols(), 4 + 5 + 3);
    assert_eq!(b.memory_classes, vec![1]);
    let missing = build_bags(&support, &mem, &[0, 1, 2], &rand_t(&mut rng, &[3, 2, 2]), &rand_t(&mut rng, &[4, 3]));
    assert!(matches!(missing, Err(Error::MissingMemoryClass(2))));
}

#[test]
fn query_bag_by_hand() {
    // F^q: 1 channel, 1×2 pixels [2, 3]; W^q = [[1, 0], [1, -1]]
    let fq = Tensor::new(vec![1, 1, 2], vec![2.0, 3.0]).unwrap();
    let wq = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, -1.0]).unwrap();
    let mem = ClassMemory::new(1, 1, Rng::new(0));
    let b = build_bags(&[], &mem, &[], &fq, &wq).unwrap();
    assert_eq!(b.nodes.data(), &[5.0, -3.0]);
}

#[test]
fn edges_examples() {
    let b = Tensor::identity(3);
    assert!(relation_edges(&b, &Tensor::identity(3), &Tensor::identity(3)).unwrap().max_abs_diff(&Tensor::identity(3)) < 1e-15);
    let mut rng = Rng::new(3);
    let b = rand_t(&mut rng, &[3, 5]);
    assert!(relation_edges(&b, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap().data().iter().all(|&x| x == 0.0));
    let (w1, w2) = (rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[4, 3]));
    let e = relation_edges(&b, &w1, &w2).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let mut want = 0.0;
            for s in 0..4 {
                let p: f64 = (0..3).map(|r| w1.at(s, r) * b.at(r, i)).sum();
                let q: f64 = (0..3).map(|r| w2.at(s, r) * b.at(r, j)).sum();
                want += p * q;
            }
            assert!((e.at(i, j) - want).abs() < 1e-12);
        }
    }
}

/// Straight loops: logits X[n, c] = Σ_m E[n, m] Σ_r B[r, m] W_g[r, c], gate
/// softmax over n for each c.
fn propagate_oracle(b: &Tensor, e: &Tensor, wg: &Tensor) -> Tensor {
    let (d, n) = (b.rows(), b.cols());
    let mut x = vec![vec![0.0; d]; n];
    for (i, xi) in x.iter_mut().enumerate() {
        for (c, xic) in xi.iter_mut().enumerate() {
            for m in 0..n {
                for r in 0..d {
                    *xic += e.at(i, m) * b.at(r, m) * wg.at(r, c);
                }
            }
        }
    }
    Tensor::from_fn(&[d, n], |idx| {
        let (c, i) = (idx / n, idx % n);
        let mx = (0..n).map(|k| x[k][c]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|k| (x[k][c] - mx).exp()).sum();
        let gate = (x[i][c] - mx).exp() / z;
        b.at(c, i) + gate * b.at(c, i)
    })
}

#[test]
fn propagate_examples() {
    let mut rng = Rng::new(4);
    let b = rand_t(&mut rng, &[3, 4]);
    let e = rand_t(&mut rng, &[4, 4]);
    let out = graph_propagate(&b, &e, &Tensor::zeros(&[3, 3])).unwrap();
    assert!(out.max_abs_diff(&b.scale(1.25)) < 1e-15);
    let b1 = rand_t(&mut rng, &[3, 1]);
    let out = graph_propagate(&b1, &rand_t(&mut rng, &[1, 1]), &rand_t(&mut rng, &[3, 3])).unwrap();
    assert!(out.max_abs_diff(&b1.scale(2.0)) < 1e-15);
    let wg = rand_t(&mut rng, &[3, 3]);
    let out = graph_propagate(&b, &e, &wg).unwrap();
    assert!(out.max_abs_diff(&propagate_oracle(&b, &e, &wg)) < 1e-12);
    assert!(graph_propagate(&b, &Tensor::zeros(&[3, 3]), &wg).is_err());
}

#[test]
fn kernel_attention_examples() {
    let mut rng = Rng::new(5);
    let b = rand_t(&mut rng, &[3, 4]);
    let wc = rand_t(&mut rng, &[2, 3]);
    let zero = Tensor::zeros(&[4, 9]);
    let a = kernel_attention(&b, &wc, &zero, &zero, (3, 3), KernelSoftmax::InputChannel).unwrap();
    assert_eq!(a.dims(), &[2, 3, 3, 3]);
    assert!(a.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    let a = kernel_attention(&b, &wc, &zero, &zero, (3, 3), KernelSoftmax::ChannelPlane).unwrap();
    assert!(a.data().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));

    let b1 = rand_t(&mut rng, &[1, 4]);
    let (w1, w2) = (rand_t(&mut rng, &[4, 9]), rand_t(&mut rng, &[4, 9]));
    let a = kernel_attention(&b1, &rand_t(&mut rng, &[2, 1]), &w1, &w2, (3, 3), KernelSoftmax::InputChannel).unwrap();
    assert!(a.data().iter().all(|&x| (x - 1.0).abs() < 1e-15));
}

#[test]
fn kernel_attention_tiny_by_hand() {
    // D_u = 2, D_l = 3, n = 1, N_a = 2.
    let b = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let wc = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
    let w1 = Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap();
    let w2 = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
    // F^n = W_c B = [[1, 0], [1, 2]]; M1 = F^n w1 = [0.5, -1.5]; M2 = B w2 = [1, 2, 3]
    let m1: [f64; 2] = [0.5, -1.5];
    let m2: [f64; 3] = [1.0, 2.0, 3.0];
    let a = kernel_attention(&b, &wc, &w1, &w2, (1, 1), KernelSoftmax::InputChannel).unwrap();
    for (ai, &x) in m1.iter().enumerate() {
        let z: f64 = m2.iter().map(|y| (x + y).exp()).sum();
        for (bi, &y) in m2.iter().enumerate() {
            assert!((a.get(&[ai, bi, 0, 0]) - (x + y).exp() / z).abs() < 1e-15);
        }
    }
    let a = kernel_attention(&b, &wc, &w1, &w2, (1, 1), KernelSoftmax::ChannelPlane).unwrap();
    let z: f64 = m1.iter().flat_map(|x| m2.iter().map(move |y| (x + y).exp())).sum();
    for (ai, &x) in m1.iter().enumerate() {
        for (bi, &y) in m2.iter().enumerate() {
            assert!((a.get(&[ai, bi, 0, 0]) - (x + y).exp() / z).abs() < 1e-15);
        }
    }
}

fn conv_oracle(x: &Tensor, k: &Tensor) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (o, n) = (k.dims()[0], k.dims()[2]);
    let p = (n / 2) as isize;
    Tensor::from_fn(&[o, h, w], |idx| {
        let (oc, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
        let mut s = 0.0;
        for ic in 0..c {
            for di in 0..n {
                for dj in 0..n {
                    let (ii, jj) = (i as isize + di as isize - p, j as isize + dj as isize - p);
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        s += k.get(&[oc, ic, di, dj]) * x.get(&[ic, ii as usize, jj as usize]);
                    }
                }
            }
        }
        s
    })
}

#[test]
fn refine_examples() {
    let mut rng = Rng::new(6);
    let f = rand_t(&mut rng, &[3, 4, 4]);
    let id = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    assert!(refine_and_encode(&f, &id, &Tensor::filled(&[3, 3, 1, 1], 1.0)).unwrap().max_abs_diff(&f) < 1e-15);
    let q = rand_t(&mut rng, &[2, 3, 3, 3]);
    assert!(refine_and_encode(&f, &q, &Tensor::zeros(&[2, 3, 3, 3])).unwrap().data().iter().all(|&x| x == 0.0));
    let f1 = rand_t(&mut rng, &[1, 4, 4]);
    let k = rand_t(&mut rng, &[1, 1, 3, 3]);
    let a = rand_t(&mut rng, &[1, 1, 3, 3]);
    let prod = Tensor::from_fn(&[1, 1, 3, 3], |i| k.data()[i] * a.data()[i]);
    assert!(refine_and_encode(&f1, &k, &a).unwrap().max_abs_diff(&conv_oracle(&f1, &prod)) < 1e-12);
    assert!(matches!(
        refine_and_encode(&f1, &Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1, 1, 2, 2])),
        Err(Error::EvenKernel(2))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_normalizes_along_decided_axes(seed in any::<u64>(), du in 1usize..4, dl in 1usize..4, na in 1usize..5) {
        let mut rng = Rng::new(seed);
        let b = rand_t(&mut rng, &[dl, na]);
        let wc = rand_t(&mut rng, &[du, dl]);
        let (w1, w2) = (rand_t(&mut rng, &[na, 9]), rand_t(&mut rng, &[na, 9]));
        let a = kernel_attention(&b, &wc, &w1, &w2, (3, 3), KernelSoftmax::InputChannel).unwrap();
        for ai in 0..du {
            for t in 0..9 {
                let s: f64 = (0..dl).map(|bi| a.data()[(ai * dl + bi) * 9 + t]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let a = kernel_attention(&b, &wc, &w1, &w2, (3, 3), KernelSoftmax::ChannelPlane).unwrap();
        for t in 0..9 {
            let s: f64 = (0..du * dl).map(|p| a.data()[p * 9 + t]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn propagate_gate_sums_and_zero_weight_scaling(seed in any::<u64>(), d in 1usize..4, n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let b = rand_t(&mut rng, &[d, n]);
        let e = rand_t(&mut rng, &[n, n]);
        let wg = rand_t(&mut rng, &[d, d]);
        let out = graph_propagate(&b, &e, &wg).unwrap();
        // recover the gate where B is nonzero and check it sums to one per channel
        for c in 0..d {
            let s: f64 = (0..n).map(|i| (out.at(c, i) - b.at(c, i)) / b.at(c, i)).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        let z = graph_propagate(&b, &e, &Tensor::zeros(&[d, d])).unwrap();
        prop_assert!(z.max_abs_diff(&b.scale(1.0 + 1.0 / n as f64)) < 1e-14);
        for c in 0..d {
            let am = |t: &Tensor| (0..n).max_by(|&i, &j| t.at(c, i).total_cmp(&t.at(c, j))).unwrap();
            prop_assert_eq!(am(&z), am(&b));
        }
    }

    #[test]
    fn refine_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let (x, y) = (rand_t(&mut rng, &[2, 5, 5]), rand_t(&mut rng, &[2, 5, 5]));
        let (q, a) = (rand_t(&mut rng, &[3, 2, 3, 3]), rand_t(&mut rng, &[3, 2, 3, 3]));
        let mix = Tensor::from_fn(&[2, 5, 5], |i| alpha * x.data()[i] + y.data()[i]);
        let lhs = refine_and_encode(&mix, &q, &a).unwrap();
        let fx = refine_and_encode(&x, &q, &a).unwrap();
        let fy = refine_and_encode(&y, &q, &a).unwrap();
        let rhs = Tensor::from_fn(lhs.dims(), |i| alpha * fx.data()[i] + fy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }
}

#[test]
fn relation_and_kernel_gradients() {
    for seed in 0..5 {
        let mut rng = Rng::new(200 + seed);
        for mode in [KernelSoftmax::InputChannel, KernelSoftmax::ChannelPlane] {
            let inputs = [
                ("b", rand_t(&mut rng, &[3, 4])),
                ("ws1", rand_t(&mut rng, &[2, 3])),
                ("ws2", rand_t(&mut rng, &[2, 3])),
                ("wg", rand_t(&mut rng, &[3, 3])),
                ("wc", rand_t(&mut rng, &[2, 3])),
                ("wc1", rand_t(&mut rng, &[4, 9])),
                ("wc2", rand_t(&mut rng, &[4, 9])),
                ("qk", rand_t(&mut rng, &[2, 3, 3, 3])),
                ("f", rand_t(&mut rng, &[3, 4, 4])),
            ];
            let rep = grad_check(&inputs, 1e-5, |g, v| {
                let e = relation_edges_graph(g, v[0], v[1], v[2])?;
                let bn = graph_propagate_graph(g, v[0], e, v[3])?;
                let a = kernel_attention_graph(g, bn, v[4], v[5], v[6], mode)?;
                let a = g.reshape(a, &[2, 3, 3, 3])?;
                let out = refine_graph(g, v[8], v[7], a)?;
                random_projection(g, out, seed)
            })
            .unwrap();
            assert!(rep.max_rel_error <= 1e-3, "{mode:?} {rep:?}");
        }
    }
}

fn small_hp() -> Hyperparams {
    Hyperparams {
        feature_dim: 3,
        head_dim: 3,
        out_channels: 3,
        relation_dim: 4,
        query_descriptors: 2,
        pixels_per_superpixel: 2,
        max_superpixels: 3,
        memory_per_class: 2,
        ..Hyperparams::default()
    }
}

#[test]
fn refined_kernel_end_to_end() {
    let hp = small_hp();
    let layout = SlotLayout { shots: 2, per_shot: 3, classes: 3, per_class: 2, query: 2 };
    let mut rng = Rng::new(7);
    let params = CrrParams::init(&hp, 16, layout, &mut rng);
    assert_eq!(params.wc1.dims(), &[6 + 6 + 2, 9]);
    let fq = rand_t(&mut rng, &[3, 4, 4]);
    let fg = rand_t(&mut rng, &[3, 5]);
    let mem = vec![(1usize, rand_t(&mut rng, &[3, 2]))];

    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let q = g.constant(fq.clone());
    let s = g.param(fg.clone());
    let inputs = CrrInputs { fq: q, support_fg: &[s], support_pixels: &[6], memory: &mem };
    let (kernel, report) = refined_kernel_graph(&mut g, &inputs, &vars, &layout, &hp).unwrap();
    assert_eq!(g.value(kernel).dims(), &[3, 3, 3, 3]);
    assert_eq!(report.centroids[0].cols(), 3);
    assert_eq!(report.nodes, 3 + 2 + 2);

    // value-level composition with the slot rows picked by hand
    let cents = masked_slic(&fg, 3, hp.slic_iters, 0).unwrap();
    let bq = fq.clone().reshape(&[3, 16]).unwrap().matmul(&params.wq).unwrap();
    let b_a = Tensor::concat_cols(&[&cents.centroids, &mem[0].1, &bq]).unwrap();
    let e = relation_edges(&b_a, &params.ws1, &params.ws2).unwrap();
    let b_n = graph_propagate(&b_a, &e, &params.wg).unwrap();
    let rows = [0, 1, 2, 6 + 2, 6 + 3, 12, 13];
    let pick = |w: &Tensor| Tensor::from_fn(&[7, 9], |i| w.at(rows[i / 9], i % 9));
    let a = kernel_attention(&b_n, &params.wc, &pick(&params.wc1), &pick(&params.wc2), (3, 3), hp.kernel_softmax).unwrap();
    let want = Tensor::from_fn(&[3, 3, 3, 3], |i| a.data()[i] * params.q_k.data()[i]);
    assert!(g.value(kernel).max_abs_diff(&want) < 1e-12);

    let loss = {
        let out = g.conv2d(q, kernel, None, 1, 1).unwrap();
        g.sum_sq(out)
    };
    let grads = g.backward(loss);
    for (name, v) in CrrParams::NAMES.iter().zip(vars.all()) {
        assert!(grads.get(v).frobenius() > 0.0, "{name} received no gradient");
    }
    assert!(grads.get(s).frobenius() > 0.0);
}

#[test]
fn too_many_shots_for_layout() {
    let hp = small_hp();
    let layout = SlotLayout { shots: 1, per_shot: 3, classes: 1, per_class: 2, query: 2 };
    let mut rng = Rng::new(8);
    let params = CrrParams::init(&hp, 16, layout, &mut rng);
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let q = g.constant(rand_t(&mut rng, &[3, 4, 4]));
    let s = g.constant(rand_t(&mut rng, &[3, 5]));
    let inputs = CrrInputs { fq: q, support_fg: &[s, s], support_pixels: &[5, 5], memory: &[] };
    assert!(refined_kernel_graph(&mut g, &inputs, &vars, &layout, &hp).is_err());
}

use super::*;
use crate::linalg::{grad_check, random_projection, sigmoid_attention};
use nalgebra::DMatrix;

fn rand_t(rng: &mut Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.range(-1.0, 1.0))
}

/// Full SVD from nalgebra, sign-fixed and truncated to `s`.
fn oracle_svd(w: &Tensor, s: usize) -> (Tensor, Vec<f64>, Tensor) {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let order = &order[..s];
    let mut ut = Tensor::zeros(&[w.rows(), s]);
    let mut vv = Tensor::zeros(&[s, w.cols()]);
    for (k, &o) in order.iter().enumerate() {
        let first = (0..w.rows()).find(|&i| u[(i, o)].abs() > 1e-12).unwrap();
        let sign = if u[(first, o)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..w.rows() {
            ut.data_mut()[i * s + k] = sign * u[(i, o)];
        }
        for j in 0..w.cols() {
            vv.data_mut()[k * w.cols() + j] = sign * vt[(o, j)];
        }
    }
    (ut, order.iter().map(|&o| svd.singular_values[o]).collect(), vv)
}

#[test]
fn foreground_full_mask_and_singleton() {
    let mut rng = Rng::new(1);
    let f = rand_t(&mut rng, &[3, 2, 2]);
    let full = foreground_extract(&f, &Mask::from_fn(2, 2, |_, _| 1)).unwrap();
    assert_eq!(full.dims(), &[3, 4]);
    assert_eq!(full.data(), f.data());
    let one = foreground_extract(&f, &Mask::from_fn(2, 2, |i, j| u8::from(i == 0 && j == 0))).unwrap();
    assert_eq!(one.data(), &[f.get(&[0, 0, 0]), f.get(&[1, 0, 0]), f.get(&[2, 0, 0])]);
}

#[test]
fn foreground_checker_by_hand() {
    // channel 0: [[1,2],[3,4]], channel 1: [[5,6],[7,8]]; foreground at (0,0) and (1,1)
    let f = Tensor::new(vec![2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
    let m = Mask::from_fn(2, 2, |i, j| u8::from(i == j));
    let fg = foreground_extract(&f, &m).unwrap();
    assert_eq!(fg.dims(), &[2, 2]);
    assert_eq!(fg.data(), &[1.0, 4.0, 5.0, 8.0]);
    assert!(matches!(foreground_extract(&f, &Mask::zeros(2, 2)), Err(Error::EmptyForeground)));
}

#[test]
fn similarity_examples() {
    let id = Tensor::identity(3);
    assert_eq!(similarity_matrix(&id, &id).unwrap(), id);
    let mut rng = Rng::new(2);
    let fs = rand_t(&mut rng, &[4, 3]);
    assert!(similarity_matrix(&Tensor::zeros(&[4, 6]), &fs).unwrap().data().iter().all(|&x| x == 0.0));
    let fq = rand_t(&mut rng, &[4, 6]);
    let w = similarity_matrix(&fq, &fs).unwrap();
    for p in 0..6 {
        for n in 0..3 {
            let want: f64 = (0..4).map(|r| fq.at(r, p) * fs.at(r, n)).sum();
            assert!((w.at(p, n) - want).abs() < 1e-14);
        }
    }
    assert!(similarity_matrix(&fq, &Tensor::zeros(&[3, 3])).is_err());
}

#[test]
fn init_rank_one_matches_oracle() {
    // Fq columns all multiples of a, Fs columns multiples of b: W is rank one.
    let a = [1.0, 2.0, -1.0];
    let b = [0.5, 0.0, 1.0];
    let qs = [1.0, -2.0, 0.5, 3.0];
    let ss = [2.0, 1.0, -1.0];
    let fq = Tensor::from_fn(&[3, 4], |i| a[i / 4] * qs[i % 4]);
    let fs = Tensor::from_fn(&[3, 3], |i| b[i / 3] * ss[i % 3]);
    let w = similarity_matrix(&fq, &fs).unwrap();
    let (bq, bs) = init_prototypes(&w, &fq, &fs, 1, 0).unwrap();
    let (u, _, v) = oracle_svd(&w, 1);
    let want_q = u.transpose().matmul(&fq.transpose()).unwrap();
    let want_s = v.matmul(&fs.transpose()).unwrap();
    assert!(bq.protos.max_abs_diff(&want_q) < 1e-10);
    assert!(bs.protos.max_abs_diff(&want_s) < 1e-10);
    assert_eq!(bq.side, Side::Query);
    assert_eq!(bs.support_index, Some(0));
}

#[test]
fn init_identity_is_signed_permutation() {
    let mut rng = Rng::new(3);
    let fq = rand_t(&mut rng, &[2, 3]);
    let fs = rand_t(&mut rng, &[2, 3]);
    let (bq, _) = init_prototypes(&Tensor::identity(3), &fq, &fs, 3, 0).unwrap();
    let fqt = fq.transpose();
    for r in 0..3 {
        let hit = (0..3).any(|k| {
            [1.0, -1.0].iter().any(|s| fqt.row(k).iter().zip(bq.protos.row(r)).all(|(a, b)| (s * a - b).abs() < 1e-12))
        });
        assert!(hit, "row {r} is not a signed row of Fqᵀ");
    }
}

#[test]
fn init_random_matches_composition() {
    let mut rng = Rng::new(4);
    for s in [1, 2, 4] {
        let fq = rand_t(&mut rng, &[5, 9]);
        let fs = rand_t(&mut rng, &[5, 6]);
        let w = similarity_matrix(&fq, &fs).unwrap();
        let (bq, bs) = init_prototypes(&w, &fq, &fs, s, 0).unwrap();
        let (u, _, v) = oracle_svd(&w, s);
        assert!(bq.protos.max_abs_diff(&u.transpose().matmul(&fq.transpose()).unwrap()) < 1e-8);
        assert!(bs.protos.max_abs_diff(&v.matmul(&fs.transpose()).unwrap()) < 1e-8);
        // the product route used during training agrees
        let f = prototype_factors(&fq, &fs, s).unwrap();
        assert!(f.u.max_abs_diff(&u) < 1e-8);
    }
}

#[test]
fn init_clamps_prototype_count() {
    let mut rng = Rng::new(5);
    let fq = rand_t(&mut rng, &[4, 6]);
    let fs = rand_t(&mut rng, &[4, 2]);
    let w = similarity_matrix(&fq, &fs).unwrap();
    let (bq, bs) = init_prototypes(&w, &fq, &fs, 16, 0).unwrap();
    assert_eq!(bq.len(), 2);
    assert_eq!(bs.len(), 2);
}

#[test]
fn init_equivariant_under_channel_relabeling() {
    let mut rng = Rng::new(6);
    let fq = rand_t(&mut rng, &[4, 7]);
    let fs = rand_t(&mut rng, &[4, 5]);
    let perm = [2, 0, 3, 1];
    let pq = Tensor::from_fn(&[4, 7], |i| fq.at(perm[i / 7], i % 7));
    let ps = Tensor::from_fn(&[4, 5], |i| fs.at(perm[i / 5], i % 5));
    let w = similarity_matrix(&fq, &fs).unwrap();
    assert!(similarity_matrix(&pq, &ps).unwrap().max_abs_diff(&w) < 1e-12);
    let (a, _) = init_prototypes(&w, &fq, &fs, 3, 0).unwrap();
    let (b, _) = init_prototypes(&w, &pq, &ps, 3, 0).unwrap();
    for r in 0..3 {
        for (c, &p) in perm.iter().enumerate() {
            assert!((b.protos.at(r, c) - a.protos.at(r, p)).abs() < 1e-10);
        }
    }
}

fn set(t: Tensor, side: Side) -> PrototypeSet {
    PrototypeSet { protos: t, side, support_index: Some(0) }
}

#[test]
fn propagate_zero_banks() {
    let mut rng = Rng::new(7);
    let bq = set(rand_t(&mut rng, &[3, 4]), Side::Query);
    let bs = set(rand_t(&mut rng, &[3, 4]), Side::Support);
    let (q, s) = propagate_task_info(&bq, &bs, &rand_t(&mut rng, &[4, 8]), &rand_t(&mut rng, &[4, 5]), &PcmParams::zeros(4, 4, 1)).unwrap();
    assert!(q.protos.data().iter().chain(s.protos.data()).all(|&x| x == 0.0));
}

#[test]
fn propagate_scalar_hand_evaluation() {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let w = |q: f64, k: f64, v: f64| AttentionWeights {
        wq: Tensor::filled(&[1, 1], q),
        wk: Tensor::filled(&[1, 1], k),
        wv: Tensor::filled(&[1, 1], v),
    };
    let params = PcmParams { support: vec![w(1.0, 0.5, 2.0)], query: vec![w(-1.0, 1.0, 1.0)], joint: vec![w(0.5, 0.5, 1.5)] };
    let (pbq, pbs, fq, fs) = (0.7, -0.4, [1.0, 2.0], [0.5]);
    let a_s: f64 = fs.iter().map(|&x| sig(pbs * 1.0 * x * 0.5) * x * 2.0).sum();
    let a_q: f64 = fq.iter().map(|&x| sig(pbq * -1.0 * x * 1.0) * x * 1.0).sum();
    let fb = [a_s, a_q];
    let out: Vec<f64> = fb.iter().map(|&r| fb.iter().map(|&c| sig(r * 0.5 * c * 0.5) * c * 1.5).sum()).collect();
    let (q, s) = propagate_task_info(
        &set(Tensor::filled(&[1, 1], pbq), Side::Query),
        &set(Tensor::filled(&[1, 1], pbs), Side::Support),
        &Tensor::matrix(1, 2, fq.to_vec()).unwrap(),
        &Tensor::matrix(1, 1, fs.to_vec()).unwrap(),
        &params,
    )
    .unwrap();
    assert!((s.protos.data()[0] - out[0]).abs() < 1e-14);
    assert!((q.protos.data()[0] - out[1]).abs() < 1e-14);
}

#[test]
fn propagate_random_matches_composition() {
    let mut rng = Rng::new(8);
    let params = PcmParams::random(6, 3, 2, 1.0, &mut rng);
    let bq = set(rand_t(&mut rng, &[4, 6]), Side::Query);
    let bs = set(rand_t(&mut rng, &[4, 6]), Side::Support);
    let fq = rand_t(&mut rng, &[6, 10]);
    let fs = rand_t(&mut rng, &[6, 5]);
    let heads = |x: &Tensor, y: &Tensor, bank: &[AttentionWeights]| {
        let hs: Vec<Tensor> = bank.iter().map(|w| sigmoid_attention(x, y, w).unwrap()).collect();
        crate::linalg::multi_head_concat(&hs).unwrap()
    };
    let a_s = heads(&bs.protos, &fs.transpose(), &params.support);
    let a_q = heads(&bq.protos, &fq.transpose(), &params.query);
    let fb = Tensor::concat_rows(&[&a_s, &a_q]).unwrap();
    let ft = heads(&fb, &fb, &params.joint);
    let (q, s) = propagate_task_info(&bq, &bs, &fq, &fs, &params).unwrap();
    assert!(s.protos.max_abs_diff(&ft.slice_rows(0, 4)) < 1e-12);
    assert!(q.protos.max_abs_diff(&ft.slice_rows(4, 4)) < 1e-12);
}

#[test]
fn propagate_rejects_bad_head_width() {
    let p = PcmParams::zeros(4, 3, 1);
    let bq = set(Tensor::zeros(&[2, 4]), Side::Query);
    assert!(propagate_task_info(&bq, &bq, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[4, 3]), &p).is_err());
}

#[test]
fn marginal_examples() {
    let feats = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let one = set(Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap(), Side::Support);
    assert_eq!(marginals_from_similarity(&one, &feats).unwrap(), vec![1.0]);
    let two = set(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), Side::Support);
    let m = marginals_from_similarity(&two, &feats).unwrap();
    assert!((m[0] - 0.5).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);
    // raw scores 1, 2, 3 against a single feature column [1]
    let three = set(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap(), Side::Support);
    let m = marginals_from_similarity(&three, &Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    for (k, x) in m.iter().enumerate() {
        assert!((x - ((k + 1) as f64).exp() / z).abs() < 1e-15);
    }
    // scores 0 and 1000: the loser underflows and is lifted to the floor
    let peaked = set(Tensor::matrix(2, 1, vec![0.0, 1000.0]).unwrap(), Side::Support);
    let m = marginals_from_similarity(&peaked, &Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
    assert!((m[0] - MARGINAL_FLOOR / (1.0 + MARGINAL_FLOOR)).abs() < 1e-27);
    assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn match_examples() {
    let plan = |t: Tensor| TransportPlan { u: vec![], v: vec![], iterations: 0, violation: 0.0, t };
    let m = Tensor::filled(&[1, 1], 0.3);
    assert_eq!(prototype_match(&m, &plan(Tensor::filled(&[1, 1], 1.0))).unwrap(), m);
    let mut rng = Rng::new(9);
    let t = rand_t(&mut rng, &[3, 3]);
    assert_eq!(prototype_match(&Tensor::filled(&[3, 3], 1.0), &plan(t.clone())).unwrap(), t);
    let m = rand_t(&mut rng, &[3, 3]);
    let w = prototype_match(&m, &plan(t.clone())).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(w.at(i, j), m.at(i, j) * t.at(i, j));
        }
    }
    assert!(prototype_match(&m, &plan(Tensor::zeros(&[2, 2]))).is_err());
}

#[test]
fn enhancement_loss_examples() {
    let mut rng = Rng::new(10);
    let bs = rand_t(&mut rng, &[2, 3]);
    let bq = rand_t(&mut rng, &[2, 3]);
    let wr = bs.matmul(&bq.transpose()).unwrap();
    assert_eq!(prototype_enhancement_loss(&[wr.clone()], &[bs.clone()], &[bq.clone()]).unwrap(), 0.0);
    let off = wr.map(|x| x + 1.0);
    let k2 = prototype_enhancement_loss(&[off.clone(), off], &[bs.clone(), bs.clone()], &[bq.clone(), bq.clone()]).unwrap();
    assert!((k2 - 8.0).abs() < 1e-12);

    let ws: Vec<Tensor> = (0..2).map(|_| rand_t(&mut rng, &[2, 2])).collect();
    let bss: Vec<Tensor> = (0..2).map(|_| rand_t(&mut rng, &[2, 3])).collect();
    let bqs: Vec<Tensor> = (0..2).map(|_| rand_t(&mut rng, &[2, 3])).collect();
    let mut want = 0.0;
    for k in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                let r: f64 = (0..3).map(|d| bss[k].at(i, d) * bqs[k].at(j, d)).sum();
                want += (ws[k].at(i, j) - r).powi(2);
            }
        }
    }
    let got = prototype_enhancement_loss(&ws, &bss, &bqs).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!(got >= 0.0);
}

#[test]
fn gradients_of_propagation_and_matching() {
    for seed in 0..5 {
        let mut rng = Rng::new(100 + seed);
        let params = PcmParams::random(4, 2, 2, 1.0, &mut rng);
        let bq = rand_t(&mut rng, &[3, 4]);
        let bs = rand_t(&mut rng, &[3, 4]);
        let fq = rand_t(&mut rng, &[4, 6]);
        let fs = rand_t(&mut rng, &[4, 5]);
        let t = rand_t(&mut rng, &[3, 3]).map(f64::abs);
        let mut inputs: Vec<(String, Tensor)> = vec![
            ("bq".into(), bq),
            ("bs".into(), bs),
            ("fq".into(), fq),
            ("fs".into(), fs),
        ];
        for (k, w) in params.tensors().into_iter().enumerate() {
            inputs.push((format!("w{k}"), w.clone()));
        }
        let named: Vec<(&str, Tensor)> = inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        let rep = grad_check(&named, 1e-4, |g, v| {
            let mut p = PcmParams::zeros(4, 2, 2);
            for (slot, var) in p.tensors_mut().into_iter().zip(&v[4..]) {
                *slot = g.value(*var).clone();
            }
            let mut it = v[4..].iter().copied();
            let mut bank = |n: usize| {
                (0..n)
                    .map(|_| AttentionVars { wq: it.next().unwrap(), wk: it.next().unwrap(), wv: it.next().unwrap() })
                    .collect::<Vec<_>>()
            };
            let vars = PcmVars { support: bank(2), query: bank(2), joint: bank(2) };
            let (tq, ts) = propagate_graph(g, v[0], v[1], v[2], v[3], &vars)?;
            let tqt = g.transpose(tq);
            let m_b = g.matmul(ts, tqt)?;
            let loss = enhancement_term_graph(g, m_b, &t, v[1], v[0])?;
            let marg = marginals_graph(g, v[1], v[3])?;
            let mp = random_projection(g, marg, 3)?;
            g.add(loss, mp)
        })
        .unwrap();
        assert!(rep.max_rel_error <= 1e-3, "{rep:?}");
    }
}

#[test]
fn pcm_branch_matches_value_composition() {
    let mut rng = Rng::new(11);
    let params = PcmParams::random(3, 3, 1, 0.5, &mut rng);
    let fq = rand_t(&mut rng, &[3, 6]);
    let fs: Vec<Tensor> = (0..2).map(|_| rand_t(&mut rng, &[3, 4])).collect();
    let hp = Hyperparams { prototypes: 2, ..Hyperparams::default() };

    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let q = g.param(fq.clone());
    let s: Vec<Var> = fs.iter().map(|t| g.param(t.clone())).collect();
    let (loss, report) = pcm_loss_graph(&mut g, q, &s, &vars, &hp).unwrap();
    assert_eq!(report.prototypes_used, vec![2, 2]);

    let mut w_star = Vec::new();
    let mut bss = Vec::new();
    let mut bqs = Vec::new();
    for (i, fsi) in fs.iter().enumerate() {
        let w = similarity_matrix(&fq, fsi).unwrap();
        let (bq, bs) = init_prototypes(&w, &fq, fsi, 2, i).unwrap();
        let (tq, ts) = propagate_task_info(&bq, &bs, &fq, fsi, &params).unwrap();
        let m_b = ts.protos.matmul(&tq.protos.transpose()).unwrap();
        let u = marginals_from_similarity(&bs, fsi).unwrap();
        let v = marginals_from_similarity(&bq, &fq).unwrap();
        let plan = sinkhorn(&m_b, &u, &v, 0.1, 500, 1e-6).unwrap();
        assert!(plan.t.max_abs_diff(&report.plans[i].t) < 1e-12);
        w_star.push(prototype_match(&m_b, &plan).unwrap());
        bss.push(bs.protos);
        bqs.push(bq.protos);
    }
    let want = prototype_enhancement_loss(&w_star, &bss, &bqs).unwrap();
    assert!((g.value(loss).data()[0] - want).abs() < 1e-9 * want.max(1.0));

    let grads = g.backward(loss);
    assert!(grads.get(q).frobenius() > 0.0);
    assert!(vars.all().iter().any(|&v| grads.get(v).frobenius() > 0.0));
}

//! Structural invariants: connectivity normalization, the Chebyshev
//! recurrence, gradient reversal, splits and the polygon area metric.

mod common;

use common::*;
use depnet_core::datapipe::tenfold_split;
use depnet_core::metrics::{basic_metrics, pam, roc_auc, ConfusionCounts};
use depnet_core::model::{forward_train, init_params, mask_tensor, BatchInput};
use depnet_core::session::Session;
use depnet_core::sps::{attention_connectivity, cheb_basis, cheb_gcn, fuse_adjacency, lambda_mask, scaled_laplacian};
use depnet_core::tes::{gt_kernels, gt_metapaths};
use depnet_engine::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn row_sums(t: &Tensor<f64>) -> Vec<f64> {
    let v = *t.shape().last().unwrap();
    t.data().chunks(v).map(|r| r.iter().sum()).collect()
}

/// One randomized instance of every connectivity construction.
fn connectivity_instance(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, v, fe, h) = (rng.random_range(1..3), rng.random_range(1..7), rng.random_range(1..6), rng.random_range(1..4));
    let (t, c, gl) = (rng.random_range(2..4), rng.random_range(1..3), rng.random_range(1..4));
    let lambda = rng.random_range(0.01..=1.0);
    let mut params = ParamStore::new();
    params.insert("sps.att.phi", rand_t(&mut rng, &[h, fe, fe], -2.0, 2.0));
    params.insert("sps.att.a", rand_t(&mut rng, &[fe, 1], -2.0, 2.0));
    params.insert("tes.gtn.w1_1", rand_t(&mut rng, &[c, t], -2.0, 2.0));
    params.insert("tes.gtn.w1_2", rand_t(&mut rng, &[c, t], -2.0, 2.0));
    for l in 2..=gl {
        params.insert(format!("tes.gtn.w{l}"), rand_t(&mut rng, &[c, t], -2.0, 2.0));
    }
    let a_db = Tensor::from_fn([v, v], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    let a_lambda = lambda_mask(&a_db, lambda).unwrap();
    for &x in a_lambda.data() {
        assert!(x == 1.0 - lambda || x == 1.0 + lambda, "mask entry {x}");
    }

    let mut tape = Tape::new(&params);
    let mut s = Session::train(&mut tape, None);
    let f = s.constant(rand_t(&mut rng, &[n * t, v, fe], -3.0, 3.0)).unwrap();
    let a_f = attention_connectivity(&mut s, f).unwrap();
    let m = s.constant(a_lambda).unwrap();
    let (a_fc, a) = fuse_adjacency(&mut s, a_f, Some(m)).unwrap();
    for (what, sums) in [("per-head", row_sums(s.value(a_f))), ("A_FC", row_sums(s.value(a_fc)))] {
        for r in sums {
            assert!((r - 1.0).abs() <= 1e-6, "{what} row sums to {r} (seed {seed})");
        }
    }
    let a = s.reshape(a, &[n, t, v, v]).unwrap();
    let kernels = gt_kernels(&mut s, gl).unwrap();
    let mp = gt_metapaths(&mut s, a, &kernels).unwrap();
    for r in row_sums(s.value(mp)) {
        assert!(r.abs() <= 1e-6 || (r - 1.0).abs() <= 1e-6, "meta-path row sums to {r} (seed {seed})");
    }
}

#[test]
fn connectivity_rows_are_stochastic() {
    for seed in 0..1000 {
        connectivity_instance(seed);
    }
}

/// Monomial coefficients of the Chebyshev polynomials T_0 … T_4.
const CHEB: [[f64; 5]; 5] = [
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0, 0.0],
    [-1.0, 0.0, 2.0, 0.0, 0.0],
    [0.0, -3.0, 0.0, 4.0, 0.0],
    [1.0, 0.0, -8.0, 0.0, 8.0],
];

fn expanded(lbar: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let v = lbar.shape()[0];
    let mut power = Tensor::eye(v);
    let mut acc = Tensor::zeros([v, v]);
    for (j, &c) in CHEB[k].iter().enumerate() {
        if j > 0 {
            power = lbar.matmul2d(&power).unwrap();
        }
        acc = acc.zip_map(&power, |a, p| a + c * p);
    }
    acc
}

#[test]
fn chebyshev_recurrence_matches_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let k = trial % 5;
        let a = rand_t(&mut rng, &[4, 4], 0.0, 1.0);
        let lbar = scaled_laplacian(&a);
        let basis = cheb_basis(&lbar, k).unwrap();
        for (j, p) in basis.iter().enumerate() {
            assert!(p.max_abs_diff(&expanded(&lbar, j)) <= 1e-8);
        }
        // The graph-level recurrence inside the convolution agrees too.
        let (fe, fs) = (3, 2);
        let f = rand_t(&mut rng, &[1, 4, fe], -1.0, 1.0);
        let theta = rand_t(&mut rng, &[k + 1, fe, fs], -1.0, 1.0);
        let mut params = ParamStore::new();
        params.insert("sps.cheb.theta", theta.clone());
        let mut tape = Tape::new(&params);
        let mut s = Session::train(&mut tape, None);
        let fv = s.constant(f.clone()).unwrap();
        let av = s.constant(a.clone().reshape([1, 4, 4]).unwrap()).unwrap();
        let out = cheb_gcn(&mut s, fv, av).unwrap();
        let got = s.value(out).clone().reshape([4, fs]).unwrap();
        let f2 = f.reshape([4, fe]).unwrap();
        let mut want = Tensor::zeros([4, fs]);
        for j in 0..=k {
            let th = theta.slice_axis(0, j, 1).unwrap().reshape([fe, fs]).unwrap();
            let term = expanded(&lbar, j).matmul2d(&f2).unwrap().matmul2d(&th).unwrap();
            want = want.zip_map(&term, |a, b| a + b);
        }
        assert!(got.max_abs_diff(&want) <= 1e-8, "order {k}");
    }
}

#[test]
fn gradient_reversal_contract() {
    let cfg = mini_config("");
    let params = init_params::<f64>(&cfg, 4).unwrap().0;
    let recs = mini_recordings(2, 4);
    let samples = windowed(&recs, &cfg);
    let input = BatchInput::<f64>::stack(&[&samples[0], &samples[1]]).unwrap();
    let mask = mask_tensor::<f64>(&cfg, &ring(4)).unwrap();

    let grads = |grl: Option<f64>, which: usize| {
        let mut tape = Tape::new(&params);
        let mut s = Session::train(&mut tape, None);
        let out = forward_train(&mut s, &cfg, mask.as_ref(), &input, &[1], grl).unwrap();
        drop(s);
        let loss = [out.total, out.loss_c, out.loss_d][which];
        let g = tape.backward(loss).unwrap();
        tape.param_gradients(&g)
    };
    let total = grads(Some(1.0), 0);
    let gc = grads(None, 1);
    let gd = grads(None, 2);
    let zero = |name: &str| Tensor::zeros(params.get(name).unwrap().shape().to_vec());
    for name in params.names() {
        let t = total.get(name).cloned().unwrap_or_else(|| zero(name));
        let c = gc.get(name).cloned().unwrap_or_else(|| zero(name));
        let d = gd.get(name).cloned().unwrap_or_else(|| zero(name));
        let want = if name.starts_with("cfe.") || name.starts_with("sps.") {
            c.zip_map(&d, |c, d| c - d)
        } else {
            c.zip_map(&d, |c, d| c + d)
        };
        assert!(t.max_abs_diff(&want) <= 1e-6, "{name}: {}", t.max_abs_diff(&want));
    }
}

#[test]
fn remainder_structure_of_splits() {
    for (n, big) in [(52usize, 2usize), (53, 3)] {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let plan = tenfold_split(&ids, 9).unwrap();
        let mut sizes: Vec<usize> = plan.groups.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes.iter().filter(|&&s| s == 6).count(), big);
        assert_eq!(sizes.iter().filter(|&&s| s == 5).count(), 10 - big);
        let mut all: Vec<String> = plan.groups.concat();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want);
    }
}

#[test]
fn pam_anchor_values() {
    assert!((pam(1.0, 1.0, 1.0, 1.0, 1.0, 1.0) - 1.0).abs() <= 1e-4);
    assert!((pam(0.5, 0.5, 0.5, 0.5, 0.5, 0.5) - 0.25).abs() <= 1e-4);
    assert_eq!(pam(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), 0.0);
}

fn unit6() -> impl Strategy<Value = [f64; 6]> {
    prop::array::uniform6(0.0..=1.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn pam_is_monotone(x in unit6(), i in 0usize..6, bump in 0.0..=1.0f64) {
        let mut y = x;
        y[i] = (y[i] + bump).min(1.0);
        let p = |v: [f64; 6]| pam(v[0], v[1], v[2], v[3], v[4], v[5]);
        prop_assert!(p(y) >= p(x) - 1e-15);
    }

    #[test]
    fn pam_uniform_scaling(x in 0.0..=1.0f64) {
        let one = pam(1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        prop_assert!((pam(x, x, x, x, x, x) - x * x * one).abs() <= 1e-12);
    }

    #[test]
    fn metrics_ignore_order(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40), seed in any::<u64>()) {
        use depnet_core::datapipe::Label;
        use rand::seq::SliceRandom;
        let lab = |b: bool| if b { Label::Depressed } else { Label::Control };
        let v: Vec<(Label, Label)> = pairs.iter().map(|&(p, t)| (lab(p), lab(t))).collect();
        let mut w = v.clone();
        w.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = ConfusionCounts::from_pairs(v.iter().map(|(p, t)| (p, t)));
        let b = ConfusionCounts::from_pairs(w.iter().map(|(p, t)| (p, t)));
        prop_assert_eq!(a.total(), v.len());
        prop_assert_eq!(basic_metrics(&a), basic_metrics(&b));
    }

    #[test]
    fn auc_matches_pairwise_count(scores in prop::collection::vec(0u8..5, 2..12), pos in prop::collection::vec(any::<bool>(), 2..12)) {
        let n = scores.len().min(pos.len());
        let (s, p): (Vec<f64>, Vec<bool>) = (scores[..n].iter().map(|&x| x as f64).collect(), pos[..n].to_vec());
        let auc = roc_auc(&s, &p);
        let (np, nn) = (p.iter().filter(|&&b| b).count(), p.iter().filter(|&&b| !b).count());
        if np == 0 || nn == 0 {
            prop_assert!(auc.is_none());
        } else {
            let mut wins = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if p[i] && !p[j] {
                        wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            prop_assert!((auc.unwrap() - wins / (np * nn) as f64).abs() < 1e-12);
        }
    }
}

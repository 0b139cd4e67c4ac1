//! Composite graphs against central finite differences at 64-bit:
//! CFE only, CFE + SpS, and the full training objective.

mod common;

use common::*;
use depnet_core::cfe::{assemble_common, dwcs_forward, tis_forward};
use depnet_core::model::{forward_train, init_params, mask_tensor, trunk, BatchInput};
use depnet_core::session::Session;
use depnet_core::ModelConfig;
use depnet_engine::{check_gradients, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn weighted_sum(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(tape.shape(y).to_vec(), |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(w).unwrap();
    let p = tape.mul(y, w).unwrap();
    tape.sum_all(p).unwrap()
}

fn setup(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, BatchInput<f64>) {
    let recs = mini_recordings(2, seed);
    let samples = windowed(&recs, cfg);
    let input = BatchInput::stack(&[&samples[0]]).unwrap();
    (init_params::<f64>(cfg, seed).unwrap().0, input)
}

fn opts() -> GradCheckOptions {
    GradCheckOptions { max_entries: Some(24), ..GradCheckOptions::default() }
}

#[test]
fn cfe_composite() {
    let cfg = mini_config("");
    let (mut params, input) = setup(&cfg, 1);
    let report = check_gradients(&mut params, opts(), |tape| {
        let mut s = Session::train(tape, None);
        let x = s.constant(input.windows.clone()).unwrap();
        let x = s.reshape(x, &[3, 4, 256])?;
        let depth = dwcs_forward(&mut s, x, &cfg.hyper.dwcs()).unwrap();
        let w = s.shape(depth)[2];
        let depth = s.reshape(depth, &[1, 3, 4, w])?;
        let iv = s.constant(input.intervals.clone()).unwrap();
        let fs = s.constant(input.first_start.clone()).unwrap();
        let le = s.constant(input.last_end.clone()).unwrap();
        let tis = tis_forward(&mut s, iv, fs, le).unwrap();
        let f = assemble_common(&mut s, depth, Some(&tis)).unwrap();
        assert_eq!(s.shape(f), &[1, 3, 4, 28]);
        Ok(weighted_sum(s.tape(), f, 7))
    })
    .unwrap();
    let cfe_groups = report.groups.iter().filter(|g| g.name.starts_with("cfe.") && g.checked > 0).count();
    assert!(cfe_groups > 0);
    assert!(report.passed(), "{report}");
}

#[test]
fn cfe_sps_composite() {
    let cfg = mini_config("");
    let (mut params, input) = setup(&cfg, 2);
    let mask = mask_tensor::<f64>(&cfg, &ring(4)).unwrap();
    let report = check_gradients(&mut params, opts(), |tape| {
        let mut s = Session::train(tape, None);
        let tr = trunk(&mut s, &cfg, mask.as_ref(), &input).unwrap();
        let a = weighted_sum(s.tape(), tr.f_sps, 3);
        let b = weighted_sum(s.tape(), tr.a, 4);
        s.add(a, b)
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn full_model_composite() {
    for extra in ["", r#","domain_feature":"common""#] {
        let cfg = mini_config(extra);
        let (mut params, input) = setup(&cfg, 3);
        let mask = mask_tensor::<f64>(&cfg, &ring(4)).unwrap();
        let report = check_gradients(&mut params, opts(), |tape| {
            let mut s = Session::train(tape, None);
            Ok(forward_train(&mut s, &cfg, mask.as_ref(), &input, &[1], None).unwrap().total)
        })
        .unwrap();
        assert!(report.groups.iter().any(|g| g.name.starts_with("tes.gtn")));
        assert!(report.passed(), "{extra}\n{report}");
    }
}

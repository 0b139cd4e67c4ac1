#![allow(dead_code)]

use depnet_core::datapipe::{synth_recordings, Recording, SynthSpec, WindowedSample};
use depnet_core::{ModelConfig, TrainConfig};

/// Two small pipelines that fit 256-sample windows: fl = (3, 3).
pub const MINI_PIPELINES: &str = r#"[
  [{"kernel":16,"stride":4,"padding":"valid","pool":2},{"kernel":4,"stride":2,"padding":"valid","pool":2},
   {"kernel":3,"stride":1,"padding":"same"},{"kernel":3,"stride":1,"padding":"same","pool":2}],
  [{"kernel":8,"stride":2,"padding":"valid","pool":2},{"kernel":4,"stride":2,"padding":"valid","pool":4},
   {"kernel":3,"stride":1,"padding":"same"},{"kernel":3,"stride":1,"padding":"same","pool":2}]
]"#;

/// Tiny network for T=3, V=4, len=256: kd=2, ts=4 → FE = 2·6 + 16 = 28.
/// `extra` holds further `"key": value` pairs (leading comma allowed) that
/// override the base settings.
pub fn mini_hyper(extra: &str) -> TrainConfig {
    let base = format!(
        r#"{{"windows":3,"kd":2,"ts":4,"cheb_order":3,"fs":4,"fl":4,"fg":4,"gt_channels":2,"gt_layers":2,
            "heads":2,"classifier_hidden":4,"domain_hidden":4,"dropout":0.0,"dwcs_pipelines":{MINI_PIPELINES}}}"#
    );
    let mut v: serde_json::Value = serde_json::from_str(&base).unwrap();
    let over: serde_json::Value = serde_json::from_str(&format!("{{{}}}", extra.trim_start_matches(','))).unwrap();
    for (k, x) in over.as_object().unwrap() {
        v[k] = x.clone();
    }
    serde_json::from_value(v).unwrap()
}

pub fn mini_config(extra: &str) -> ModelConfig {
    ModelConfig::new(mini_hyper(extra), 4, 256).unwrap()
}

pub fn mini_recordings(n: usize, seed: u64) -> Vec<Recording> {
    let spec = SynthSpec {
        n_subjects: n,
        channels: 4,
        sample_rate_hz: 128.0,
        duration_s: 6.0,
        class_separation: 1.0,
        seed,
    };
    synth_recordings(&spec).unwrap()
}

pub fn windowed(recs: &[Recording], cfg: &ModelConfig) -> Vec<WindowedSample> {
    recs.iter().map(|r| WindowedSample::from_recording(r, cfg.hyper.windows, cfg.hyper.ts).unwrap()).collect()
}

/// Ring adjacency on `v` nodes.
pub fn ring(v: usize) -> depnet_engine::Tensor<f64> {
    depnet_engine::Tensor::from_fn([v, v], |k| {
        let (i, j) = (k / v, k % v);
        let d = i.abs_diff(j);
        if d == 1 || d == v - 1 { 1.0 } else { 0.0 }
    })
}

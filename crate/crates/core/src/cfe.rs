//! Common feature extractor: multi-scale depth-wise convolution (DwCS) and
//! the time-interval sector (TiS), assembled into `f_common`.

use depnet_engine::{conv1d_output_len, Conv1dSpec, Padding, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::{Init, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingKind {
    Valid,
    Same,
}

impl From<PaddingKind> for Padding {
    fn from(p: PaddingKind) -> Self {
        match p {
            PaddingKind::Valid => Padding::Valid,
            PaddingKind::Same => Padding::Same,
        }
    }
}

/// One convolution stage. With `pool`, the convolution is followed by
/// batch norm, ReLU and max pooling of that window; without, by nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: PaddingKind,
    #[serde(default)]
    pub pool: Option<usize>,
}

impl StageSpec {
    pub const fn new(kernel: usize, stride: usize, padding: PaddingKind, pool: Option<usize>) -> Self {
        Self { kernel, stride, padding, pool }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DwcsConfig {
    /// Output features per EEG channel per pipeline position.
    pub kd: usize,
    pub pipelines: Vec<Vec<StageSpec>>,
}

impl DwcsConfig {
    /// Three scales (kernels 64, 32, 16 first), each conv → pool 2 →
    /// conv → pool 4 → conv → conv → pool 4.
    pub fn standard(kd: usize) -> Self {
        use PaddingKind::{Same, Valid};
        let tail = |k2: usize| {
            [
                StageSpec::new(k2, 2, Valid, Some(4)),
                StageSpec::new(4, 1, Same, None),
                StageSpec::new(8, 1, Same, Some(4)),
            ]
        };
        let pipeline = |k1: usize, s1: usize, k2: usize| {
            let mut p = vec![StageSpec::new(k1, s1, Valid, Some(2))];
            p.extend(tail(k2));
            p
        };
        Self { kd, pipelines: vec![pipeline(64, 8, 16), pipeline(32, 4, 8), pipeline(16, 2, 4)] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kd == 0 || self.pipelines.is_empty() || self.pipelines.iter().any(Vec::is_empty) {
            return Err(Error::Config("depth-wise convolution needs kd > 0 and nonempty pipelines".into()));
        }
        for (i, p) in self.pipelines.iter().enumerate() {
            for (j, s) in p.iter().enumerate() {
                if s.kernel == 0 || s.stride == 0 || s.pool == Some(0) {
                    return Err(Error::Config(format!(
                        "pipeline {i} stage {j}: kernel, stride and pool must be positive"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FeatureDims {
    /// Output length of each pipeline.
    pub fl: Vec<usize>,
    /// `kd · Σ fl`
    pub depth: usize,
    /// Time-interval embedding width, `4·ts` (0 when the TiS is removed).
    pub interval: usize,
    /// `depth + interval`
    pub fe: usize,
}

/// Pipeline lengths and the common feature width for windows of `len`.
pub fn feature_dims(len: usize, cfg: &DwcsConfig, ts: usize, with_tis: bool) -> Result<FeatureDims> {
    cfg.validate()?;
    let mut fl = Vec::with_capacity(cfg.pipelines.len());
    for (i, pipeline) in cfg.pipelines.iter().enumerate() {
        let mut l = len;
        for (j, s) in pipeline.iter().enumerate() {
            let collapse = |detail: String| {
                Error::Config(format!(
                    "window length {len} too short: pipeline {i} stage {j} {detail}"
                ))
            };
            l = conv1d_output_len(l, s.kernel, s.stride, s.padding.into())
                .map_err(|e| collapse(e.to_string()))?
                .0;
            if let Some(p) = s.pool {
                l /= p;
                if l == 0 {
                    return Err(collapse(format!("pooling by {p} leaves nothing")));
                }
            }
        }
        fl.push(l);
    }
    let depth = cfg.kd * fl.iter().sum::<usize>();
    let interval = if with_tis { 4 * ts } else { 0 };
    Ok(FeatureDims { fl, depth, interval, fe: depth + interval })
}

fn stage_name(i: usize, j: usize) -> String {
    format!("cfe.dwcs.p{i}.s{j}")
}

pub fn init_dwcs<F: Real>(init: &mut Init<'_, F>, cfg: &DwcsConfig, channels: usize) {
    let kd = cfg.kd;
    for (i, pipeline) in cfg.pipelines.iter().enumerate() {
        for (j, s) in pipeline.iter().enumerate() {
            let name = stage_name(i, j);
            let c_in_g = if j == 0 { 1 } else { kd };
            init.glorot(&format!("{name}.w"), &[channels * kd, c_in_g, s.kernel], c_in_g * s.kernel, kd * s.kernel);
            // A bias ahead of batch norm would be cancelled by its mean.
            if s.pool.is_some() {
                init.batch_norm(&format!("{name}.bn"), channels * kd);
            } else {
                init.constant(&format!("{name}.b"), &[channels * kd], 0.0);
            }
        }
    }
}

/// `x: [N, V, len]` → `f_depth: [N, V, kd·Σfl]`. Every convolution is
/// grouped by EEG channel, so channel `v` of the output depends only on
/// channel `v` of the input.
pub fn dwcs_forward<F: Real>(s: &mut Session<'_, '_, F>, x: Var, cfg: &DwcsConfig) -> Result<Var> {
    let &[n, v, _] = s.shape(x) else {
        return Err(Error::Invariant(format!("dwcs input must be [N, V, len], got {:?}", s.shape(x))));
    };
    let mut outs = Vec::with_capacity(cfg.pipelines.len());
    for (i, pipeline) in cfg.pipelines.iter().enumerate() {
        let mut h = x;
        for (j, st) in pipeline.iter().enumerate() {
            let name = stage_name(i, j);
            let w = s.param(&format!("{name}.w"))?;
            let b = if st.pool.is_some() { None } else { Some(s.param(&format!("{name}.b"))?) };
            h = s.conv1d(h, w, b, Conv1dSpec::new(st.stride, st.padding.into(), v))?;
            if let Some(p) = st.pool {
                h = s.batch_norm(h, &format!("{name}.bn"))?;
                h = s.relu(h)?;
                h = s.maxpool1d(h, p)?;
            }
        }
        let fl = s.shape(h)[2];
        // [N, V·kd, fl] keeps each channel's kd maps adjacent.
        outs.push(s.reshape(h, &[n, v, cfg.kd * fl])?);
    }
    Ok(s.concat(&outs, 2)?)
}

pub fn init_tis<F: Real>(init: &mut Init<'_, F>, ts: usize) {
    let half = (ts / 2).max(1);
    init.dense("cfe.tis.start", ts, 2 * ts);
    init.dense("cfe.tis.end", ts, 2 * ts);
    init.dense("cfe.tis.proj", 2 * ts, ts);
    init.dense("cfe.tis.expand1", ts, 2 * ts);
    init.dense("cfe.tis.expand2", 2 * ts, ts);
    init.dense("cfe.tis.contract1", ts, half);
    init.dense("cfe.tis.contract2", half, ts);
}

pub struct TisOutput {
    /// `[B, 1, V, 2ts]`
    pub f_start: Var,
    /// `[B, 1, V, 2ts]`
    pub f_end: Var,
    /// `[B, T-1, V, 2ts]`
    pub f_interval: Var,
}

/// Embeds the unpaired first/last slices (two separate dense layers) and
/// every time interval (shared projection plus two-way autoencoder).
pub fn tis_forward<F: Real>(
    s: &mut Session<'_, '_, F>,
    intervals: Var,
    first_start: Var,
    last_end: Var,
) -> Result<TisOutput> {
    let bs = s.shape(first_start).to_vec();
    let lift = |s: &mut Session<'_, '_, F>, x: Var, name: &str| -> Result<Var> {
        let y = s.dense(x, name)?;
        let w = s.shape(y)[2];
        Ok(s.reshape(y, &[bs[0], 1, bs[1], w])?)
    };
    let f_start = lift(s, first_start, "cfe.tis.start")?;
    let f_end = lift(s, last_end, "cfe.tis.end")?;

    let p = s.dense(intervals, "cfe.tis.proj")?;
    let e = s.dense(p, "cfe.tis.expand1")?;
    let e = s.relu(e)?;
    let e = s.dense(e, "cfe.tis.expand2")?;
    let c = s.dense(p, "cfe.tis.contract1")?;
    let c = s.relu(c)?;
    let c = s.dense(c, "cfe.tis.contract2")?;
    let f_interval = s.concat(&[e, c], 3)?;
    Ok(TisOutput { f_start, f_end, f_interval })
}

/// Window `t` gets `[f_depth_t, left_t, right_t]` where `left` is
/// `f_start` then the intervals and `right` is the intervals then `f_end`;
/// interval `t` therefore appears in windows `t` and `t + 1`.
pub fn assemble_common<F: Real>(s: &mut Session<'_, '_, F>, f_depth: Var, tis: Option<&TisOutput>) -> Result<Var> {
    let Some(tis) = tis else { return Ok(f_depth) };
    if s.shape(f_depth)[1] < 2 {
        return Err(Error::Config("the time-interval sector needs at least 2 windows".into()));
    }
    let left = s.concat(&[tis.f_start, tis.f_interval], 1)?;
    let right = s.concat(&[tis.f_interval, tis.f_end], 1)?;
    Ok(s.concat(&[f_depth, left, right], 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use depnet_engine::{ParamStore, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn published_dimension_anchors() {
        let d = feature_dims(12500, &DwcsConfig::standard(3), 125, true).unwrap();
        assert_eq!(d.fl, vec![23, 48, 97]);
        assert_eq!(d.fe, 1004);
        let d = feature_dims(3750, &DwcsConfig::standard(3), 75, true).unwrap();
        assert_eq!(d.fl, vec![6, 14, 29]);
        assert_eq!(d.fe, 447);
        assert_eq!(feature_dims(12500, &DwcsConfig::standard(3), 125, false).unwrap().fe, 504);
    }

    #[test]
    fn too_short_window_is_rejected() {
        assert!(feature_dims(791, &DwcsConfig::standard(3), 10, true).is_err());
        assert!(feature_dims(792, &DwcsConfig::standard(3), 10, true).is_ok());
        assert!(feature_dims(40, &DwcsConfig::standard(3), 10, true).is_err());
    }

    #[test]
    fn identity_stage_reproduces_pooled_signal() {
        let cfg = DwcsConfig {
            kd: 1,
            pipelines: vec![vec![
                StageSpec::new(1, 1, PaddingKind::Valid, Some(2)),
                StageSpec::new(1, 1, PaddingKind::Same, None),
            ]],
        };
        let mut params = ParamStore::<f64>::new();
        let mut buffers = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_dwcs(&mut Init { params: &mut params, buffers: &mut buffers, rng: &mut rng }, &cfg, 2);
        for j in 0..2 {
            *params.get_mut(&format!("cfe.dwcs.p0.s{j}.w")).unwrap() = Tensor::ones([2, 1, 1]);
        }
        let raw = Tensor::new([1, 2, 6], vec![1., 4., 2., 3., 6., 5., 2., 1., 0.5, 9., 3., 3.]).unwrap();
        let mut tape = Tape::new(&params);
        let mut s = Session::infer(&mut tape, &buffers);
        let x = s.constant(raw).unwrap();
        let y = dwcs_forward(&mut s, x, &cfg).unwrap();
        let scale = (1.0f64 + 1e-5).sqrt();
        let expected = [4., 3., 6., 2., 9., 3.];
        for (a, e) in s.value(y).data().iter().zip(expected) {
            assert!((a - e / scale).abs() < 1e-12);
        }
    }
}

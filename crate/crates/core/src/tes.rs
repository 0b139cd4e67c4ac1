//! Temporal sector: layer-normalized two-layer LSTM over the windows, a
//! graph transformer over the per-window adjacencies, and the classifier.

use depnet_engine::nn::{lstm_cell, LstmWeights};
use depnet_engine::{Real, Tensor, Var};

use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::session::{Init, Session};

pub const GTN_SLOPE: f64 = 0.01;
pub const DEGREE_EPS: f64 = 1e-8;

fn lstm_weights<F: Real>(s: &mut Session<'_, '_, F>, prefix: &str) -> Result<LstmWeights> {
    Ok(LstmWeights {
        w_ih: s.param(&format!("{prefix}.w_ih"))?,
        w_hh: s.param(&format!("{prefix}.w_hh"))?,
        bias: s.param(&format!("{prefix}.bias"))?,
    })
}

/// `f_sps: [S, T, V, FS]` → `relu(h_T): [S, V, FL]`. Each node's window
/// sequence runs through LSTM → layer norm → LSTM.
pub fn layernorm_lstm<F: Real>(s: &mut Session<'_, '_, F>, f_sps: Var) -> Result<Var> {
    let &[n, t, v, fs] = s.shape(f_sps) else {
        return Err(Error::Invariant(format!("f_SpS must be [S, T, V, FS], got {:?}", s.shape(f_sps))));
    };
    let w1 = lstm_weights(s, "tes.lstm1")?;
    let w2 = lstm_weights(s, "tes.lstm2")?;
    let fl = s.shape(w1.w_hh)[0];
    let rows = n * v;
    let seq = s.permute(f_sps, &[1, 0, 2, 3])?;
    let zero = s.constant(Tensor::zeros([rows, fl]))?;
    let (mut h1, mut c1, mut h2, mut c2) = (zero, zero, zero, zero);
    for step in 0..t {
        let x = s.slice(seq, 0, step, 1)?;
        let x = s.reshape(x, &[rows, fs])?;
        (h1, c1) = lstm_cell(&mut **s.tape(), x, h1, c1, &w1)?;
        let y = s.layer_norm(h1, "tes.ln")?;
        (h2, c2) = lstm_cell(&mut **s.tape(), y, h2, c2, &w2)?;
    }
    let h = s.relu(h2)?;
    Ok(s.reshape(h, &[n, v, fl])?)
}

fn kernel_names(gt_layers: usize) -> Vec<String> {
    let mut names = vec!["tes.gtn.w1_1".to_string(), "tes.gtn.w1_2".to_string()];
    names.extend((2..=gt_layers).map(|l| format!("tes.gtn.w{l}")));
    names
}

/// Softmax-over-T kernels, in the order (1,1), (1,2), 2, …, GL; each `[C, T]`.
pub fn gt_kernels<F: Real>(s: &mut Session<'_, '_, F>, gt_layers: usize) -> Result<Vec<Var>> {
    kernel_names(gt_layers)
        .iter()
        .map(|name| {
            let w = s.param(name)?;
            Ok(s.softmax(w)?)
        })
        .collect()
}

/// Divides each row by its sum; rows summing below `DEGREE_EPS` are
/// divided by `DEGREE_EPS` instead, so nonzero rows sum to exactly 1.
fn row_normalize<F: Real>(s: &mut Session<'_, '_, F>, m: Var) -> Result<Var> {
    let deg = s.sum_axes(m, &[3], true)?;
    let eps = F::lit(DEGREE_EPS);
    let guard = s.value(deg).map(|d| if d < eps { eps } else { F::zero() });
    let guard = s.constant(guard)?;
    let deg = s.add(deg, guard)?;
    Ok(s.div(m, deg)?)
}

/// `a: [S, T, V, V]` → `Mp_GL: [S, C, V, V]`. `Q = Σ_t softmax(W)[c, t]·A_t`,
/// `Mp_1 = Q_{1,1} Q_{1,2}`, `Mp_l = Q_l Mp_{l−1}`, each row-normalized.
pub fn gt_metapaths<F: Real>(s: &mut Session<'_, '_, F>, a: Var, kernels: &[Var]) -> Result<Var> {
    let &[n, t, v, _] = s.shape(a) else {
        return Err(Error::Invariant(format!("adjacency set must be [S, T, V, V], got {:?}", s.shape(a))));
    };
    let flat = s.reshape(a, &[n, t, v * v])?;
    let mut q = Vec::with_capacity(kernels.len());
    for &k in kernels {
        let c = s.shape(k)[0];
        let qk = s.matmul(k, flat)?;
        q.push(s.reshape(qk, &[n, c, v, v])?);
    }
    let mp = s.matmul(q[0], q[1])?;
    let mut mp = row_normalize(s, mp)?;
    for &ql in &q[2..] {
        let next = s.matmul(ql, mp)?;
        mp = row_normalize(s, next)?;
    }
    Ok(mp)
}

/// `relu(Σ_c LeakyReLU(D̄^{−½} M̄p_c D̄^{−½} f_GT_c W))` with `M̄p = Mp + I` and
/// `f_GT = Σ_k α_k · (kernel_k applied over T to f_SpS)`.
pub fn gtn_features<F: Real>(s: &mut Session<'_, '_, F>, f_sps: Var, mp: Var, kernels: &[Var]) -> Result<Var> {
    let &[n, t, v, fs] = s.shape(f_sps) else {
        return Err(Error::Invariant(format!("f_SpS must be [S, T, V, FS], got {:?}", s.shape(f_sps))));
    };
    let alpha = s.param("tes.gtn.alpha")?;
    let flat = s.reshape(f_sps, &[n, t, v * fs])?;
    let mut f_gt: Option<Var> = None;
    for (i, &k) in kernels.iter().enumerate() {
        let c = s.shape(k)[0];
        let m = s.matmul(k, flat)?;
        let m = s.reshape(m, &[n, c, v, fs])?;
        let ai = s.slice(alpha, 0, i, 1)?;
        let term = s.mul(m, ai)?;
        f_gt = Some(match f_gt {
            Some(acc) => s.add(acc, term)?,
            None => term,
        });
    }
    let f_gt = f_gt.ok_or_else(|| Error::Invariant("no graph transformer kernels".into()))?;
    let c = s.shape(mp)[1];
    let eye = s.constant(Tensor::eye(v))?;
    let mbar = s.add(mp, eye)?;
    let deg = s.sum_axes(mbar, &[3], true)?;
    let deg = s.add_scalar(deg, F::lit(DEGREE_EPS))?;
    let dinv = s.powf(deg, F::lit(-0.5))?;
    let dinv_t = s.reshape(dinv, &[n, c, 1, v])?;
    let norm = s.mul(mbar, dinv)?;
    let norm = s.mul(norm, dinv_t)?;
    let h = s.matmul(norm, f_gt)?;
    let w = s.param("tes.gtn.proj.w")?;
    let h = s.matmul(h, w)?;
    let h = s.leaky_relu(h, F::lit(GTN_SLOPE))?;
    let h = s.sum_axes(h, &[1], false)?;
    Ok(s.relu(h)?)
}

/// `f: [S, V, FT]` → class probabilities `[S, 2]` (control, depressed).
pub fn classify<F: Real>(s: &mut Session<'_, '_, F>, f: Var, dropout: f64) -> Result<Var> {
    let &[n, v, ft] = s.shape(f) else {
        return Err(Error::Invariant(format!("classifier input must be [S, V, FT], got {:?}", s.shape(f))));
    };
    let x = s.reshape(f, &[n, v * ft])?;
    let h = s.dense(x, "tes.cls.hidden")?;
    let h = s.relu(h)?;
    let h = s.dropout(h, dropout)?;
    let logits = s.dense(h, "tes.cls.out")?;
    Ok(s.softmax(logits)?)
}

pub fn init_tes<F: Real>(init: &mut Init<'_, F>, cfg: &ModelConfig) {
    let h = &cfg.hyper;
    if cfg.uses(Ablation::Tes) {
        if cfg.uses(Ablation::Lstm) {
            init.lstm("tes.lstm1", h.fs, h.fl);
            init.layer_norm("tes.ln", h.fl);
            init.lstm("tes.lstm2", h.fl, h.fl);
        }
        if cfg.uses(Ablation::Gtn) {
            for name in kernel_names(h.gt_layers) {
                init.glorot(&name, &[h.gt_channels, h.windows], h.windows, h.gt_channels);
            }
            init.constant("tes.gtn.alpha", &[h.gt_layers + 1], 1.0 / (h.gt_layers + 1) as f64);
            init.glorot("tes.gtn.proj.w", &[h.fs, h.fg], h.fs, h.fg);
        }
    }
    init.dense("tes.cls.hidden", cfg.channels * cfg.ft(), h.classifier_hidden);
    init.dense("tes.cls.out", h.classifier_hidden, 2);
}

pub struct TesOutput {
    /// `[S, V, FT]`
    pub f_tes: Var,
    /// `[S, 2]`
    pub probs: Var,
}

/// `f_sps: [S, T, V, FS]`, `a: [S, T, V, V]`.
pub fn tes_forward<F: Real>(s: &mut Session<'_, '_, F>, cfg: &ModelConfig, f_sps: Var, a: Var) -> Result<TesOutput> {
    let f_tes = if !cfg.uses(Ablation::Tes) {
        s.mean_axes(f_sps, &[1], false)?
    } else {
        let mut parts = Vec::with_capacity(2);
        if cfg.uses(Ablation::Lstm) {
            parts.push(layernorm_lstm(s, f_sps)?);
        }
        if cfg.uses(Ablation::Gtn) {
            let kernels = gt_kernels(s, cfg.hyper.gt_layers)?;
            let mp = gt_metapaths(s, a, &kernels)?;
            parts.push(gtn_features(s, f_sps, mp, &kernels)?);
        }
        if parts.len() == 1 { parts[0] } else { s.concat(&parts, 2)? }
    };
    let probs = classify(s, f_tes, cfg.hyper.dropout)?;
    Ok(TesOutput { f_tes, probs })
}

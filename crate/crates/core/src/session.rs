//! One forward pass: the tape, train/inference mode, frozen normalization
//! statistics, and collected batch statistics.

use std::ops::{Deref, DerefMut};

use depnet_engine::nn::{self, BatchStats, Normalization, DEFAULT_NORM_EPS};
use depnet_engine::{ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub struct Session<'a, 'p, F: Real> {
    tape: &'a mut Tape<'p, F>,
    pub mode: Mode,
    buffers: Option<&'a ParamStore<F>>,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Batch statistics seen by each training-mode batch norm, by layer name.
    pub batch_stats: Vec<(String, BatchStats<F>)>,
}

impl<'a, 'p, F: Real> Session<'a, 'p, F> {
    /// Training mode. Dropout is applied only when an RNG is supplied, which
    /// keeps gradient checks deterministic.
    pub fn train(tape: &'a mut Tape<'p, F>, dropout_rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self { tape, mode: Mode::Train, buffers: None, dropout_rng, batch_stats: Vec::new() }
    }

    /// Inference mode: batch norm uses the running statistics in `buffers`.
    pub fn infer(tape: &'a mut Tape<'p, F>, buffers: &'a ParamStore<F>) -> Self {
        Self { tape, mode: Mode::Infer, buffers: Some(buffers), dropout_rng: None, batch_stats: Vec::new() }
    }

    pub fn tape(&mut self) -> &mut Tape<'p, F> {
        self.tape
    }

    /// `x · W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn dense(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.tape.param(&format!("{prefix}.w"))?;
        let b = self.tape.param(&format!("{prefix}.b"))?;
        Ok(nn::dense(&mut **self.tape, x, w, Some(b))?)
    }

    pub fn dense_no_bias(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.tape.param(&format!("{prefix}.w"))?;
        Ok(nn::dense(&mut **self.tape, x, w, None)?)
    }

    /// Per-channel (axis 1) batch normalization named `prefix`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let scale = self.tape.param(&format!("{prefix}.scale"))?;
        let shift = self.tape.param(&format!("{prefix}.shift"))?;
        let eps = F::lit(DEFAULT_NORM_EPS);
        match self.mode {
            Mode::Train => {
                let out = nn::normalize(&mut **self.tape, x, Normalization::BatchTrain, scale, shift, eps)?;
                if let Some(stats) = out.batch_stats {
                    self.batch_stats.push((prefix.to_string(), stats));
                }
                Ok(out.y)
            }
            Mode::Infer => {
                let buffers = self.buffers.ok_or_else(|| Error::Invariant("inference without buffers".into()))?;
                let get = |suffix: &str| {
                    let key = format!("{prefix}.{suffix}");
                    buffers.get(&key).ok_or_else(|| Error::Invariant(format!("missing buffer {key}")))
                };
                let (mean, var) = (get("running_mean")?, get("running_var")?);
                let kind = Normalization::BatchInference { mean, var };
                Ok(nn::normalize(&mut **self.tape, x, kind, scale, shift, eps)?.y)
            }
        }
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let scale = self.tape.param(&format!("{prefix}.scale"))?;
        let shift = self.tape.param(&format!("{prefix}.shift"))?;
        Ok(nn::normalize(&mut **self.tape, x, Normalization::Layer, scale, shift, F::lit(DEFAULT_NORM_EPS))?.y)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match (self.mode, self.dropout_rng.as_deref_mut()) {
            (Mode::Train, Some(rng)) if rate > 0.0 => Ok(nn::dropout(&mut **self.tape, x, rate, rng)?),
            _ => Ok(x),
        }
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        Ok(self.tape.constant(t)?)
    }
}

impl<'p, F: Real> Deref for Session<'_, 'p, F> {
    type Target = Tape<'p, F>;

    fn deref(&self) -> &Self::Target {
        self.tape
    }
}

impl<F: Real> DerefMut for Session<'_, '_, F> {
    fn deref_mut(&mut self) -> &mut Self::Target {
        self.tape
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Folds training-mode batch statistics into the running buffers:
/// `running = (1 - m)·running + m·batch`, with the unbiased variance.
pub fn update_running_stats<F: Real>(buffers: &mut ParamStore<F>, stats: &[(String, BatchStats<F>)]) -> Result<()> {
    let m = F::lit(BN_MOMENTUM);
    let one = F::one();
    for (prefix, s) in stats {
        let n = F::from_usize_lossy(s.count);
        let unbias = if s.count > 1 { n / (n - one) } else { one };
        for (suffix, batch, factor) in [("running_mean", &s.mean, one), ("running_var", &s.var, unbias)] {
            let key = format!("{prefix}.{suffix}");
            let run = buffers.get_mut(&key).ok_or_else(|| Error::Invariant(format!("missing buffer {key}")))?;
            for (r, &b) in run.data_mut().iter_mut().zip(batch.data()) {
                *r = (one - m) * *r + m * b * factor;
            }
        }
    }
    Ok(())
}

/// Seeded parameter factory.
pub struct Init<'s, F> {
    pub params: &'s mut ParamStore<F>,
    pub buffers: &'s mut ParamStore<F>,
    pub rng: &'s mut ChaCha8Rng,
}

impl<F: Real> Init<'_, F> {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| F::lit(rng.random_range(-bound..bound)));
        self.params.insert(name, t);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.params.insert(name, Tensor::full(shape.to_vec(), F::lit(value)));
    }

    /// `{prefix}.w` `[fan_in, fan_out]` and a zero `{prefix}.b`.
    pub fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.glorot(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in, fan_out);
        self.constant(&format!("{prefix}.b"), &[fan_out], 0.0);
    }

    pub fn dense_no_bias(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.glorot(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in, fan_out);
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.constant(&format!("{prefix}.scale"), &[width], 1.0);
        self.constant(&format!("{prefix}.shift"), &[width], 0.0);
    }

    /// Affine parameters plus running mean 0 / variance 1.
    pub fn batch_norm(&mut self, prefix: &str, channels: usize) {
        self.layer_norm(prefix, channels);
        self.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros([channels]));
        self.buffers.insert(format!("{prefix}.running_var"), Tensor::ones([channels]));
    }

    /// LSTM weights with gate order (input, forget, cell, output); the
    /// forget-gate bias starts at 1.
    pub fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) {
        self.glorot(&format!("{prefix}.w_ih"), &[input, 4 * hidden], input, 4 * hidden);
        self.glorot(&format!("{prefix}.w_hh"), &[hidden, 4 * hidden], hidden, 4 * hidden);
        let bias = Tensor::from_fn([4 * hidden], |i| if (hidden..2 * hidden).contains(&i) { F::one() } else { F::zero() });
        self.params.insert(format!("{prefix}.bias"), bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_use_momentum_and_unbiased_variance() {
        let mut buffers = ParamStore::<f64>::new();
        buffers.insert("bn.running_mean", Tensor::zeros([1]));
        buffers.insert("bn.running_var", Tensor::ones([1]));
        let stats = BatchStats { mean: Tensor::full([1], 2.0), var: Tensor::full([1], 3.0), count: 4 };
        update_running_stats(&mut buffers, &[("bn".into(), stats)]).unwrap();
        assert!((buffers.get("bn.running_mean").unwrap().item() - 0.2).abs() < 1e-12);
        assert!((buffers.get("bn.running_var").unwrap().item() - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }
}

//! Layers composed from graph primitives: affine maps, activations,
//! normalization, the LSTM cell and dropout.

use rand::Rng;

use crate::error::{EngineError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// `x · W + b` over the last axis of `x`.
pub fn dense<F: Real>(g: &mut Graph<F>, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let (xs, ws) = (g.shape(x), g.shape(weight));
    if ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(EngineError::Shape {
            op: "dense",
            detail: format!("x {xs:?} vs weight {ws:?}"),
        });
    }
    let y = if xs.len() == 1 {
        let n = xs[0];
        let x2 = g.reshape(x, &[1, n])?;
        let y = g.matmul(x2, weight)?;
        let out = g.shape(y)[1];
        g.reshape(y, &[out])?
    } else {
        g.matmul(x, weight)?
    };
    match bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    SoftmaxLastDim,
    Exp,
}

pub fn activate<F: Real>(g: &mut Graph<F>, x: Var, kind: Activation) -> Result<Var> {
    match kind {
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu(slope) => g.leaky_relu(x, F::lit(slope)),
        Activation::SoftmaxLastDim => g.softmax(x),
        Activation::Exp => g.exp(x),
    }
}

/// Which statistics a normalization layer uses.
#[derive(Clone, Copy, Debug)]
pub enum Normalization<'a, F> {
    /// Per sample over the last axis.
    Layer,
    /// Per channel (axis 1) over every other axis, from the current batch.
    BatchTrain,
    /// Per channel from frozen running statistics; a pure affine map.
    BatchInference { mean: &'a Tensor<F>, var: &'a Tensor<F> },
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Tensor<F>,
    /// Biased (population) variance.
    pub var: Tensor<F>,
    /// Number of values each channel statistic was computed from.
    pub count: usize,
}

pub struct NormOutput<F> {
    pub y: Var,
    pub batch_stats: Option<BatchStats<F>>,
}

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Normalizes `x` to zero mean and unit variance along the axis selected by
/// `kind`, then applies `scale` and `shift` (both `[C]`, where `C` is the
/// normalized feature or channel extent).
pub fn normalize<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    kind: Normalization<'_, F>,
    scale: Var,
    shift: Var,
    eps: F,
) -> Result<NormOutput<F>> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    match kind {
        Normalization::Layer => {
            let last = rank.checked_sub(1).ok_or(EngineError::Shape {
                op: "layer_norm",
                detail: "rank 0 input".into(),
            })?;
            let mean = g.mean_axes(x, &[last], true)?;
            let centered = g.sub(x, mean)?;
            let sq = g.mul(centered, centered)?;
            let var = g.mean_axes(sq, &[last], true)?;
            let ve = g.add_scalar(var, eps)?;
            let inv = g.powf(ve, F::lit(-0.5))?;
            let xhat = g.mul(centered, inv)?;
            let y = g.mul(xhat, scale)?;
            let y = g.add(y, shift)?;
            Ok(NormOutput { y, batch_stats: None })
        }
        Normalization::BatchTrain | Normalization::BatchInference { .. } => {
            if rank < 2 {
                return Err(EngineError::Shape {
                    op: "batch_norm",
                    detail: format!("need [N, C, ...], got {shape:?}"),
                });
            }
            let c = shape[1];
            let mut bshape = vec![1; rank];
            bshape[1] = c;
            let scale_b = g.reshape(scale, &bshape)?;
            let shift_b = g.reshape(shift, &bshape)?;
            let axes: Vec<usize> = (0..rank).filter(|&a| a != 1).collect();
            let (xhat, stats) = match kind {
                Normalization::BatchTrain => {
                    let count = shape.iter().product::<usize>() / c;
                    let mean = g.mean_axes(x, &axes, true)?;
                    let centered = g.sub(x, mean)?;
                    let sq = g.mul(centered, centered)?;
                    let var = g.mean_axes(sq, &axes, true)?;
                    let stats = BatchStats {
                        mean: g.value(mean).clone().reshape([c])?,
                        var: g.value(var).clone().reshape([c])?,
                        count,
                    };
                    let ve = g.add_scalar(var, eps)?;
                    let inv = g.powf(ve, F::lit(-0.5))?;
                    (g.mul(centered, inv)?, Some(stats))
                }
                Normalization::BatchInference { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(EngineError::Shape {
                            op: "batch_norm",
                            detail: format!("running stats for {} channels, input has {c}", mean.len()),
                        });
                    }
                    let m = g.constant(mean.clone().reshape(bshape.clone())?)?;
                    let inv = var.map(|v| F::one() / (v + eps).sqrt()).reshape(bshape.clone())?;
                    let inv = g.constant(inv)?;
                    let centered = g.sub(x, m)?;
                    (g.mul(centered, inv)?, None)
                }
                Normalization::Layer => unreachable!(),
            };
            let y = g.mul(xhat, scale_b)?;
            let y = g.add(y, shift_b)?;
            Ok(NormOutput { y, batch_stats: stats })
        }
    }
}

/// Weights of one LSTM layer with gate order (input, forget, cell, output).
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[F_in, 4·H]`
    pub w_ih: Var,
    /// `[H, 4·H]`
    pub w_hh: Var,
    /// `[4·H]`
    pub bias: Var,
}

/// One LSTM step for a batch: `x: [N, F_in]`, `h, c: [N, H]`.
pub fn lstm_cell<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    h: Var,
    c: Var,
    w: &LstmWeights,
) -> Result<(Var, Var)> {
    let hidden = g.shape(w.w_hh)[0];
    if g.shape(w.w_hh) != [hidden, 4 * hidden]
        || g.shape(w.bias) != [4 * hidden]
        || g.shape(w.w_ih).len() != 2
        || g.shape(w.w_ih)[1] != 4 * hidden
        || g.shape(h).last() != Some(&hidden)
        || g.shape(c) != g.shape(h)
    {
        return Err(EngineError::Shape {
            op: "lstm_cell",
            detail: format!(
                "w_ih {:?}, w_hh {:?}, bias {:?}, h {:?}, c {:?}",
                g.shape(w.w_ih),
                g.shape(w.w_hh),
                g.shape(w.bias),
                g.shape(h),
                g.shape(c)
            ),
        });
    }
    let xi = dense(g, x, w.w_ih, Some(w.bias))?;
    let hh = dense(g, h, w.w_hh, None)?;
    let gates = g.add(xi, hh)?;
    let axis = g.shape(gates).len() - 1;
    let i = g.slice(gates, axis, 0, hidden)?;
    let f = g.slice(gates, axis, hidden, hidden)?;
    let cc = g.slice(gates, axis, 2 * hidden, hidden)?;
    let o = g.slice(gates, axis, 3 * hidden, hidden)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let cc = g.tanh(cc)?;
    let o = g.sigmoid(o)?;
    let fc = g.mul(f, c)?;
    let ic = g.mul(i, cc)?;
    let c_next = g.add(fc, ic)?;
    let tc = g.tanh(c_next)?;
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Inverted dropout: zeroes each element with probability `rate` and
/// scales survivors by `1 / (1 - rate)`.
pub fn dropout<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    x: Var,
    rate: f64,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(EngineError::InvalidArgument {
            op: "dropout",
            detail: format!("rate {rate} outside [0, 1)"),
        });
    }
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = F::lit(1.0 / (1.0 - rate));
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(shape, |_| if rng.random::<f64>() < rate { F::zero() } else { keep });
    let m = g.constant(mask)?;
    g.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_hand_product() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0])).unwrap();
        let b = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let y = dense(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 5.0]);
        let bad = g.constant(t(&[3, 1], &[1.0; 3])).unwrap();
        assert!(dense(&mut g, x, bad, None).is_err());
    }

    #[test]
    fn dense_identity() {
        let mut g = Graph::new();
        let xv = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let x = g.constant(xv.clone()).unwrap();
        let w = g.constant(Tensor::eye(3)).unwrap();
        let b = g.constant(Tensor::zeros([3])).unwrap();
        let y = dense(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, 4], 3.0)).unwrap();
        let s = g.constant(Tensor::ones([4])).unwrap();
        let b = g.constant(Tensor::zeros([4])).unwrap();
        let out = normalize(&mut g, x, Normalization::Layer, s, b, 1e-5).unwrap();
        assert!(g.value(out.y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 3.0])).unwrap();
        let s = g.constant(Tensor::ones([2])).unwrap();
        let b = g.constant(Tensor::zeros([2])).unwrap();
        let out = normalize(&mut g, x, Normalization::Layer, s, b, 1e-12).unwrap();
        let y = g.value(out.y).data();
        assert_abs_diff_eq!(y[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn batch_norm_inference_is_affine() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = g.constant(t(&[2], &[2.0, 1.0])).unwrap();
        let b = g.constant(t(&[2], &[0.0, 1.0])).unwrap();
        let mean = t(&[2], &[1.0, 2.0]);
        let var = t(&[2], &[4.0, 1.0]);
        let out = normalize(
            &mut g,
            x,
            Normalization::BatchInference { mean: &mean, var: &var },
            s,
            b,
            0.0,
        )
        .unwrap();
        assert!(out.batch_stats.is_none());
        assert_eq!(g.value(out.y).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn batch_norm_train_reports_stats() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 2], &[1.0, 3.0, 5.0, 7.0])).unwrap();
        let s = g.constant(Tensor::ones([1])).unwrap();
        let b = g.constant(Tensor::zeros([1])).unwrap();
        let out = normalize(&mut g, x, Normalization::BatchTrain, s, b, 1e-5).unwrap();
        let st = out.batch_stats.unwrap();
        assert_eq!(st.mean.data(), &[4.0]);
        assert_eq!(st.var.data(), &[5.0]);
        assert_eq!(st.count, 4);
        let mean: f64 = g.value(out.y).data().iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lstm_zero_weights_give_zero_state() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1.0, -1.0, 2.0])).unwrap();
        let h = g.constant(Tensor::zeros([1, 2])).unwrap();
        let c = g.constant(Tensor::zeros([1, 2])).unwrap();
        let w = LstmWeights {
            w_ih: g.constant(Tensor::zeros([3, 8])).unwrap(),
            w_hh: g.constant(Tensor::zeros([2, 8])).unwrap(),
            bias: g.constant(Tensor::zeros([8])).unwrap(),
        };
        let (h1, c1) = lstm_cell(&mut g, x, h, c, &w).unwrap();
        assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let mut rng = rand::rng();
        let y = dropout(&mut g, x, 0.0, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(dropout(&mut g, x, 1.0, &mut rng).is_err());
    }
}

//! Domain adversarial learner: gradient reversal, the per-window domain
//! classifier, and the class / domain losses.

use depnet_engine::{Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::session::{Init, Session};

pub const LOG_FLOOR: f64 = 1e-12;

/// Source-domain rows carry domain label 0, target rows 1.
pub const SOURCE_DOMAIN: usize = 0;
pub const TARGET_DOMAIN: usize = 1;

pub fn init_domain_head<F: Real>(init: &mut Init<'_, F>, in_width: usize, hidden: usize) {
    init.dense("dal.hidden", in_width, hidden);
    init.batch_norm("dal.bn", hidden);
    init.dense("dal.out", hidden, 2);
}

/// `f_dom: [B, T, V, F]` → per-window domain probabilities `[B, T, 2]`.
/// With `grl` set, a gradient reversal of that coefficient sits at the
/// head's input; `None` omits it.
pub fn domain_classify<F: Real>(s: &mut Session<'_, '_, F>, f_dom: Var, grl: Option<f64>) -> Result<Var> {
    let &[b, t, v, f] = s.shape(f_dom) else {
        return Err(Error::Invariant(format!("domain feature must be [B, T, V, F], got {:?}", s.shape(f_dom))));
    };
    let x = match grl {
        Some(c) => s.grl(f_dom, F::lit(c))?,
        None => f_dom,
    };
    let x = s.reshape(x, &[b * t, v * f])?;
    let h = s.dense(x, "dal.hidden")?;
    let h = s.relu(h)?;
    let h = s.batch_norm(h, "dal.bn")?;
    let logits = s.dense(h, "dal.out")?;
    let p = s.softmax(logits)?;
    Ok(s.reshape(p, &[b, t, 2])?)
}

/// Mean negative log-likelihood of the true class over the last axis;
/// `probs: [..., G]`, `labels` one per row.
fn nll<F: Real>(s: &mut Session<'_, '_, F>, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = s.shape(probs).to_vec();
    let g = *shape.last().ok_or_else(|| Error::Invariant("rank-0 probabilities".into()))?;
    let rows = shape.iter().product::<usize>() / g;
    if rows == 0 || labels.len() != rows {
        return Err(Error::Invariant(format!("{} labels for {rows} probability rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= g) {
        return Err(Error::Invariant(format!("label {bad} out of range for {g} classes")));
    }
    let onehot = Tensor::from_fn(shape, |i| if labels[i / g] == i % g { F::one() } else { F::zero() });
    let y = s.constant(onehot)?;
    let logp = s.ln_clamped(probs, F::lit(LOG_FLOOR))?;
    let picked = s.mul(logp, y)?;
    let total = s.sum_all(picked)?;
    Ok(s.scale(total, F::lit(-1.0 / rows as f64))?)
}

/// `−(1/S) Σ_i log ŷ_{i, y_i}` over source subjects; `probs: [S, 2]`.
pub fn class_loss<F: Real>(s: &mut Session<'_, '_, F>, probs: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Invariant("class loss over an empty source batch".into()));
    }
    nll(s, probs, labels)
}

/// `−(1/(L·T)) Σ_{i,t} log 𝒟̂_{i,t,d_i}`; `probs: [L, T, 2]`, one domain
/// label per subject.
pub fn domain_loss<F: Real>(s: &mut Session<'_, '_, F>, probs: Var, domains: &[usize]) -> Result<Var> {
    let t = s.shape(probs).get(1).copied().unwrap_or(0);
    let per_window: Vec<usize> = domains.iter().flat_map(|&d| std::iter::repeat_n(d, t)).collect();
    nll(s, probs, &per_window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use depnet_engine::{ParamStore, Tape};

    fn loss_of(probs: Tensor<f64>, labels: &[usize], domain: bool) -> f64 {
        let params = ParamStore::new();
        let mut tape = Tape::new(&params);
        let mut s = Session::train(&mut tape, None);
        let p = s.constant(probs).unwrap();
        let l = if domain { domain_loss(&mut s, p, labels) } else { class_loss(&mut s, p, labels) }.unwrap();
        s.value(l).item()
    }

    #[test]
    fn class_loss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(loss_of(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap(), &[0], false), 0.0);
        assert!((loss_of(Tensor::full([3, 2], 0.5), &[0, 1, 1], false) - ln2).abs() < 1e-12);
        assert!((loss_of(Tensor::new([1, 2], vec![0.9, 0.1]).unwrap(), &[0], false) - 0.10536051565782628).abs() < 1e-12);
        let params = ParamStore::<f64>::new();
        let mut tape = Tape::new(&params);
        let mut s = Session::train(&mut tape, None);
        let p = s.constant(Tensor::full([1, 2], 0.5)).unwrap();
        assert!(class_loss(&mut s, p, &[]).is_err());
    }

    #[test]
    fn domain_loss_values() {
        let ln2 = std::f64::consts::LN_2;
        // L=2, T=2: subject 0 perfect in both windows, subject 1 uniform.
        let p = Tensor::new([2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!((loss_of(p, &[0, 1], true) - ln2 / 2.0).abs() < 1e-12);
        assert!((loss_of(Tensor::full([2, 3, 2], 0.5), &[0, 1], true) - ln2).abs() < 1e-12);
    }
}

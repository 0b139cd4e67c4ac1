//! Spatial sector: attention-derived functional connectivity, λ-mask
//! fusion with the distance adjacency, and Chebyshev graph convolution.

use depnet_engine::{Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::session::{Init, Session};

/// Softens a binary adjacency: `1 ↦ 1 + λ`, `0 ↦ 1 − λ`.
pub fn lambda_mask(a_db: &Tensor<f64>, lambda: f64) -> Result<Tensor<f64>> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("lambda must be in (0, 1], got {lambda}")));
    }
    if let Some(x) = a_db.data().iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(Error::Data(format!("lambda mask needs a binary adjacency, found {x}")));
    }
    Ok(a_db.map(|x| if x == 1.0 { 1.0 + lambda } else { 1.0 - lambda }))
}

pub fn init_attention<F: Real>(init: &mut Init<'_, F>, heads: usize, fe: usize) {
    init.glorot("sps.att.phi", &[heads, fe, fe], fe, fe);
    init.glorot("sps.att.a", &[fe, 1], fe, 1);
}

pub const ATTENTION_SLOPE: f64 = 0.2;

/// Per-head connectivity for `f: [N, V, FE]`:
/// `softmax_j(LeakyReLU(|Φ_h f_i − Φ_h f_j| · a))`, returned as `[N, H, V, V]`.
/// `Φ_h` carries no bias (it would cancel in the difference).
pub fn attention_connectivity<F: Real>(s: &mut Session<'_, '_, F>, f: Var) -> Result<Var> {
    let phi = s.param("sps.att.phi")?;
    let a = s.param("sps.att.a")?;
    let (heads, fe) = (s.shape(phi)[0], s.shape(phi)[1]);
    let &[n, v, _] = s.shape(f) else {
        return Err(Error::Invariant(format!("attention input must be [N, V, FE], got {:?}", s.shape(f))));
    };
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let ph = s.slice(phi, 0, h, 1)?;
        let ph = s.reshape(ph, &[fe, fe])?;
        let p = s.matmul(f, ph)?;
        let logits = s.pairwise_l1(p, a)?;
        let logits = s.leaky_relu(logits, F::lit(ATTENTION_SLOPE))?;
        let att = s.softmax(logits)?;
        maps.push(s.reshape(att, &[n, 1, v, v])?);
    }
    Ok(s.concat(&maps, 1)?)
}

/// Head mean `A_FC: [N, V, V]` and fused `A = A_λ ⊙ A_FC` (just `A_FC`
/// when no mask is given).
pub fn fuse_adjacency<F: Real>(s: &mut Session<'_, '_, F>, a_f: Var, a_lambda: Option<Var>) -> Result<(Var, Var)> {
    let a_fc = s.mean_axes(a_f, &[1], false)?;
    let a = match a_lambda {
        Some(m) => s.mul(a_fc, m)?,
        None => a_fc,
    };
    Ok((a_fc, a))
}

pub fn init_cheb<F: Real>(init: &mut Init<'_, F>, order: usize, fe: usize, fs: usize) {
    init.glorot("sps.cheb.theta", &[order + 1, fe, fs], fe, fs);
}

/// `Σ_k P_k(L̄) f θ_k` with `L̄ = D − A − I` (row-sum degrees) and the
/// Chebyshev recurrence `P_k = 2 L̄ P_{k−1} − P_{k−2}` applied to `f`.
/// `f: [N, V, FE]`, `a: [N, V, V]` → `[N, V, FS]`.
pub fn cheb_gcn<F: Real>(s: &mut Session<'_, '_, F>, f: Var, a: Var) -> Result<Var> {
    let theta = s.param("sps.cheb.theta")?;
    let (k1, fe, fs) = {
        let t = s.shape(theta);
        (t[0], t[1], t[2])
    };
    let deg = s.sum_axes(a, &[2], true)?;
    let lbar = |s: &mut Session<'_, '_, F>, z: Var| -> Result<Var> {
        let dz = s.mul(deg, z)?;
        let az = s.matmul(a, z)?;
        let l = s.sub(dz, az)?;
        Ok(s.sub(l, z)?)
    };
    let project = |s: &mut Session<'_, '_, F>, z: Var, k: usize| -> Result<Var> {
        let th = s.slice(theta, 0, k, 1)?;
        let th = s.reshape(th, &[fe, fs])?;
        Ok(s.matmul(z, th)?)
    };
    let mut out = project(s, f, 0)?;
    let (mut prev, mut cur) = (f, f);
    for k in 1..k1 {
        let next = if k == 1 {
            lbar(s, f)?
        } else {
            let l = lbar(s, cur)?;
            let l2 = s.scale(l, F::lit(2.0))?;
            s.sub(l2, prev)?
        };
        let term = project(s, next, k)?;
        out = s.add(out, term)?;
        prev = cur;
        cur = next;
    }
    Ok(out)
}

/// Matrix-level Chebyshev basis `[P_0(L̄), …, P_K(L̄)]`.
pub fn cheb_basis(lbar: &Tensor<f64>, order: usize) -> Result<Vec<Tensor<f64>>> {
    let v = lbar.shape()[0];
    let mut basis = vec![Tensor::eye(v)];
    if order >= 1 {
        basis.push(lbar.clone());
    }
    for k in 2..=order {
        let two_lp = lbar.matmul2d(&basis[k - 1])?.map(|x| 2.0 * x);
        basis.push(two_lp.zip_map(&basis[k - 2], |a, b| a - b));
    }
    Ok(basis)
}

/// Scaled Laplacian `L̄ = D − A − I` of a single `[V, V]` matrix.
pub fn scaled_laplacian(a: &Tensor<f64>) -> Tensor<f64> {
    let v = a.shape()[0];
    Tensor::from_fn([v, v], |idx| {
        let (i, j) = (idx / v, idx % v);
        let deg: f64 = (0..v).map(|c| a.at(&[i, c])).sum();
        let d = if i == j { deg - 1.0 } else { 0.0 };
        d - a.at(&[i, j])
    })
}

pub struct SpsOutput {
    /// `[B, T, V, V]`
    pub a_fc: Var,
    /// `[B, T, V, V]`
    pub a: Var,
    /// `[B, T, V, FS]`
    pub f_sps: Var,
}

/// `f_common: [B, T, V, FE]`; windows are processed as one batch of `B·T`.
pub fn sps_forward<F: Real>(s: &mut Session<'_, '_, F>, f_common: Var, a_lambda: Option<Var>) -> Result<SpsOutput> {
    let &[b, t, v, fe] = s.shape(f_common) else {
        return Err(Error::Invariant(format!("f_common must be [B, T, V, FE], got {:?}", s.shape(f_common))));
    };
    let f = s.reshape(f_common, &[b * t, v, fe])?;
    let a_f = attention_connectivity(s, f)?;
    let (a_fc, a) = fuse_adjacency(s, a_f, a_lambda)?;
    let out = cheb_gcn(s, f, a)?;
    let fs = s.shape(out)[2];
    Ok(SpsOutput {
        a_fc: s.reshape(a_fc, &[b, t, v, v])?,
        a: s.reshape(a, &[b, t, v, v])?,
        f_sps: s.reshape(out, &[b, t, v, fs])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use depnet_engine::{ParamStore, Tape};

    #[test]
    fn mask_values() {
        let a = Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = lambda_mask(&a, 0.5).unwrap();
        assert_eq!(m.data(), &[0.5, 1.5, 1.5, 0.5]);
        // Applying twice is rejected: the mask is no longer binary.
        assert!(lambda_mask(&m, 0.5).is_err());
        assert!(lambda_mask(&a, 0.0).is_err());
    }

    fn cheb_store(k: usize, fe: usize, fs: usize, seed: u64) -> ParamStore<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.insert("sps.cheb.theta", Tensor::from_fn([k + 1, fe, fs], |_| rng.random_range(-1.0..1.0)));
        p
    }

    #[test]
    fn zero_adjacency_first_order() {
        // A = 0 ⇒ L̄ = −I ⇒ out = fθ0 − fθ1
        let params = cheb_store(1, 3, 2, 1);
        let f = Tensor::from_fn([1, 2, 3], |i| i as f64 * 0.3 - 0.5);
        let mut tape = Tape::new(&params);
        let mut s = Session::train(&mut tape, None);
        let fv = s.constant(f.clone()).unwrap();
        let av = s.constant(Tensor::zeros([1, 2, 2])).unwrap();
        let out = cheb_gcn(&mut s, fv, av).unwrap();
        let theta = params.get("sps.cheb.theta").unwrap();
        let t0 = theta.slice_axis(0, 0, 1).unwrap().reshape([3, 2]).unwrap();
        let t1 = theta.slice_axis(0, 1, 1).unwrap().reshape([3, 2]).unwrap();
        let f2 = f.reshape([2, 3]).unwrap();
        let expected = f2.matmul2d(&t0).unwrap().zip_map(&f2.matmul2d(&t1).unwrap(), |a, b| a - b);
        assert!(s.value(out).clone().reshape([2, 2]).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn order_zero_is_pure_projection() {
        let params = cheb_store(0, 2, 2, 2);
        let mut tape = Tape::new(&params);
        let mut s = Session::train(&mut tape, None);
        let fv = s.constant(Tensor::from_fn([1, 3, 2], |i| i as f64)).unwrap();
        let a1 = s.constant(Tensor::full([1, 3, 3], 0.3)).unwrap();
        let a2 = s.constant(Tensor::full([1, 3, 3], 0.9)).unwrap();
        let o1 = cheb_gcn(&mut s, fv, a1).unwrap();
        let o2 = cheb_gcn(&mut s, fv, a2).unwrap();
        assert_eq!(s.value(o1), s.value(o2));
    }

    #[test]
    fn identical_nodes_attend_uniformly() {
        let mut params = ParamStore::<f64>::new();
        params.insert("sps.att.phi", Tensor::from_fn([2, 3, 3], |i| (i as f64).sin()));
        params.insert("sps.att.a", Tensor::from_fn([3, 1], |i| i as f64 + 1.0));
        let mut tape = Tape::new(&params);
        let mut s = Session::train(&mut tape, None);
        let f = s.constant(Tensor::from_fn([1, 4, 3], |i| (i % 3) as f64)).unwrap();
        let att = attention_connectivity(&mut s, f).unwrap();
        assert!(s.value(att).data().iter().all(|&x| (x - 0.25).abs() < 1e-12));
        let single = s.constant(Tensor::from_fn([2, 1, 3], |i| i as f64)).unwrap();
        let att1 = attention_connectivity(&mut s, single).unwrap();
        assert!(s.value(att1).data().iter().all(|&x| x == 1.0));
    }
}

//! The full network: parameters, batch assembly and the forward passes
//! used for training and inference.

use depnet_engine::{ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cfe::{assemble_common, dwcs_forward, init_dwcs, init_tis, tis_forward};
use crate::config::{Ablation, DomainFeature, ModelConfig};
use crate::dal::{class_loss, domain_classify, domain_loss, init_domain_head, SOURCE_DOMAIN, TARGET_DOMAIN};
use crate::datapipe::{validate_adjacency, WindowedSample};
use crate::error::{Error, Result};
use crate::session::{Init, Session};
use crate::sps::{init_attention, init_cheb, lambda_mask, sps_forward};
use crate::tes::{init_tes, tes_forward};

/// A stacked batch of windowed subjects.
#[derive(Clone, Debug)]
pub struct BatchInput<F> {
    /// `[B, T, V, len]`
    pub windows: Tensor<F>,
    /// `[B, T-1, V, 2ts]`
    pub intervals: Tensor<F>,
    /// `[B, V, ts]`
    pub first_start: Tensor<F>,
    /// `[B, V, ts]`
    pub last_end: Tensor<F>,
}

impl<F: Real> BatchInput<F> {
    pub fn stack(samples: &[&WindowedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invariant("empty batch".into()));
        }
        let gather = |f: fn(&WindowedSample) -> &Tensor<f32>| -> Result<Tensor<F>> {
            let parts: Vec<&Tensor<f32>> = samples.iter().map(|s| f(s)).collect();
            Ok(Tensor::stack(&parts)
                .map_err(|e| Error::Data(format!("subjects have inconsistent shapes: {e}")))?
                .cast())
        };
        Ok(Self {
            windows: gather(|s| &s.windows)?,
            intervals: gather(|s| &s.intervals)?,
            first_start: gather(|s| &s.first_start)?,
            last_end: gather(|s| &s.last_end)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.windows.shape()[0]
    }
}

/// Intermediate features of one forward pass.
pub struct Trunk {
    /// `[B, T, V, FE]`
    pub f_common: Var,
    /// `[B, T, V, V]`
    pub a_fc: Var,
    /// `[B, T, V, V]`
    pub a: Var,
    /// `[B, T, V, FS]`
    pub f_sps: Var,
}

pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<F>, ParamStore<F>)> {
    let dims = cfg.dims()?;
    let h = &cfg.hyper;
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { params: &mut params, buffers: &mut buffers, rng: &mut rng };
    init_dwcs(&mut init, &h.dwcs(), cfg.channels);
    if cfg.uses(Ablation::Tis) {
        init_tis(&mut init, h.ts);
    }
    init_attention(&mut init, h.heads, dims.fe);
    init_cheb(&mut init, h.cheb_order, dims.fe, h.fs);
    init_tes(&mut init, cfg);
    init_domain_head(&mut init, cfg.channels * cfg.domain_width(), h.domain_hidden);
    Ok((params, buffers))
}

/// The λ-mask as a graph constant, or `None` when it is ablated.
pub fn mask_tensor<F: Real>(cfg: &ModelConfig, a_db: &Tensor<f64>) -> Result<Option<Tensor<F>>> {
    if !cfg.uses(Ablation::LambdaMask) {
        return Ok(None);
    }
    Ok(Some(lambda_mask(a_db, cfg.hyper.lambda)?.cast()))
}

/// CFE then SpS over every subject of the batch.
pub fn trunk<F: Real>(
    s: &mut Session<'_, '_, F>,
    cfg: &ModelConfig,
    mask: Option<&Tensor<F>>,
    input: &BatchInput<F>,
) -> Result<Trunk> {
    let &[b, t, v, len] = input.windows.shape() else {
        return Err(Error::Invariant(format!("windows must be [B, T, V, len], got {:?}", input.windows.shape())));
    };
    if v != cfg.channels || len != cfg.window_len || t != cfg.hyper.windows {
        return Err(Error::Data(format!(
            "input has T={t}, V={v}, len={len}; model expects T={}, V={}, len={}",
            cfg.hyper.windows, cfg.channels, cfg.window_len
        )));
    }
    let x = s.constant(input.windows.clone())?;
    let x = s.reshape(x, &[b * t, v, len])?;
    let depth = dwcs_forward(s, x, &cfg.hyper.dwcs())?;
    let width = s.shape(depth)[2];
    let depth = s.reshape(depth, &[b, t, v, width])?;
    let tis = if cfg.uses(Ablation::Tis) {
        let iv = s.constant(input.intervals.clone())?;
        let fs = s.constant(input.first_start.clone())?;
        let le = s.constant(input.last_end.clone())?;
        Some(tis_forward(s, iv, fs, le)?)
    } else {
        None
    };
    let f_common = assemble_common(s, depth, tis.as_ref())?;
    let mask = match mask {
        Some(m) => Some(s.constant(m.clone())?),
        None => None,
    };
    let out = sps_forward(s, f_common, mask)?;
    Ok(Trunk { f_common, a_fc: out.a_fc, a: out.a, f_sps: out.f_sps })
}

pub struct TrainForward {
    pub loss_c: Var,
    pub loss_d: Var,
    pub total: Var,
    /// `[S, 2]`
    pub class_probs: Var,
}

/// Training objective for a batch whose first `labels.len()` rows are
/// source subjects and the rest target subjects. `grl` is the reversal
/// coefficient; `None` leaves the domain gradient un-reversed (the plain
/// sum `loss_c + loss_d`), which is what finite differences see.
pub fn forward_train<F: Real>(
    s: &mut Session<'_, '_, F>,
    cfg: &ModelConfig,
    mask: Option<&Tensor<F>>,
    input: &BatchInput<F>,
    labels: &[usize],
    grl: Option<f64>,
) -> Result<TrainForward> {
    let n_src = labels.len();
    let b = input.batch();
    if n_src == 0 || n_src > b {
        return Err(Error::Invariant(format!("{n_src} source labels for a batch of {b}")));
    }
    let tr = trunk(s, cfg, mask, input)?;
    let f_src = s.slice(tr.f_sps, 0, 0, n_src)?;
    let a_src = s.slice(tr.a, 0, 0, n_src)?;
    let tes = tes_forward(s, cfg, f_src, a_src)?;
    let loss_c = class_loss(s, tes.probs, labels)?;

    let f_dom = match cfg.hyper.domain_feature {
        DomainFeature::Spatial => tr.f_sps,
        DomainFeature::Common => tr.f_common,
    };
    let dom = domain_classify(s, f_dom, grl)?;
    let domains: Vec<usize> = (0..b).map(|i| if i < n_src { SOURCE_DOMAIN } else { TARGET_DOMAIN }).collect();
    let loss_d = domain_loss(s, dom, &domains)?;
    let total = s.add(loss_c, loss_d)?;
    Ok(TrainForward { loss_c, loss_d, total, class_probs: tes.probs })
}

pub struct Inference {
    pub trunk: Trunk,
    /// `[B, V, FT]`
    pub f_tes: Var,
    /// `[B, 2]`
    pub probs: Var,
}

/// Classification path only; the domain head is not evaluated.
pub fn forward_infer<F: Real>(
    s: &mut Session<'_, '_, F>,
    cfg: &ModelConfig,
    mask: Option<&Tensor<F>>,
    input: &BatchInput<F>,
) -> Result<Inference> {
    let tr = trunk(s, cfg, mask, input)?;
    let tes = tes_forward(s, cfg, tr.f_sps, tr.a)?;
    Ok(Inference { trunk: tr, f_tes: tes.f_tes, probs: tes.probs })
}

/// Parameters, running statistics and the fixed electrode adjacency.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub buffers: ParamStore<F>,
    /// Binary distance adjacency `[V, V]`.
    pub adjacency: Tensor<f64>,
}

/// Per-subject class probabilities and the derived label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// (control, depressed)
    pub probs: [f64; 2],
}

impl Prediction {
    /// Class index; an exact tie goes to control (0).
    pub fn class(&self) -> usize {
        usize::from(self.probs[1] > self.probs[0])
    }
}

/// Tensors exported for inspection, one subject.
pub struct Features<F> {
    /// `[T, V, FS]`
    pub f_sps: Tensor<F>,
    /// `[V, FT]`
    pub f_tes: Tensor<F>,
    /// `[T, V, V]`
    pub a_fc: Tensor<F>,
    /// `[T, V, V]`
    pub a: Tensor<F>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, adjacency: Tensor<f64>, seed: u64) -> Result<Self> {
        validate_adjacency(&adjacency)?;
        if adjacency.shape()[0] != config.channels {
            return Err(Error::Data(format!(
                "adjacency is {0}x{0} but the data has {1} channels",
                adjacency.shape()[0],
                config.channels
            )));
        }
        let (params, buffers) = init_params(&config, seed)?;
        Ok(Self { config, params, buffers, adjacency })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            adjacency: self.adjacency.clone(),
        }
    }

    pub fn mask(&self) -> Result<Option<Tensor<F>>> {
        mask_tensor(&self.config, &self.adjacency)
    }

    /// Inference-mode predictions, one per sample. Rows do not interact, so
    /// the result for a subject does not depend on its batch companions.
    pub fn predict(&self, samples: &[&WindowedSample]) -> Result<Vec<Prediction>> {
        let input = BatchInput::<F>::stack(samples)?;
        let mask = self.mask()?;
        let mut tape = Tape::frozen(&self.params);
        let mut s = Session::infer(&mut tape, &self.buffers);
        let out = forward_infer(&mut s, &self.config, mask.as_ref(), &input)?;
        let p = s.value(out.probs);
        Ok((0..samples.len())
            .map(|i| Prediction { probs: [p.at(&[i, 0]).to_f64().unwrap(), p.at(&[i, 1]).to_f64().unwrap()] })
            .collect())
    }

    pub fn features(&self, sample: &WindowedSample) -> Result<Features<F>> {
        let input = BatchInput::<F>::stack(&[sample])?;
        let mask = self.mask()?;
        let mut tape = Tape::frozen(&self.params);
        let mut s = Session::infer(&mut tape, &self.buffers);
        let out = forward_infer(&mut s, &self.config, mask.as_ref(), &input)?;
        let drop_batch = |t: &Tensor<F>| t.clone().reshape(t.shape()[1..].to_vec()).expect("leading extent is 1");
        Ok(Features {
            f_sps: drop_batch(s.value(out.trunk.f_sps)),
            f_tes: drop_batch(s.value(out.f_tes)),
            a_fc: drop_batch(s.value(out.trunk.a_fc)),
            a: drop_batch(s.value(out.trunk.a)),
        })
    }
}

//! Hyperparameters. [`TrainConfig`] is the user-facing JSON schema; every
//! absent key takes its published default.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cfe::{feature_dims, DwcsConfig, FeatureDims, StageSpec};
use crate::error::{Error, Result};

/// Which feature the gradient reversal layer and domain head attach to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainFeature {
    /// After the spatial sector (`f_SpS`).
    #[default]
    Spatial,
    /// After the common feature extractor (`f_common`).
    Common,
}

impl std::str::FromStr for DomainFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Self::Spatial),
            "common" => Ok(Self::Common),
            o => Err(Error::Config(format!("domain feature must be spatial or common, got {o:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Tis,
    LambdaMask,
    Tes,
    Lstm,
    Gtn,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tis => "tis",
            Self::LambdaMask => "lambda_mask",
            Self::Tes => "tes",
            Self::Lstm => "lstm",
            Self::Gtn => "gtn",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tis" => Ok(Self::Tis),
            "lambda_mask" => Ok(Self::LambdaMask),
            "tes" => Ok(Self::Tes),
            "lstm" => Ok(Self::Lstm),
            "gtn" => Ok(Self::Gtn),
            o => Err(Error::Config(format!(
                "unknown ablation {o:?} (expected tis, lambda_mask, tes, lstm or gtn)"
            ))),
        }
    }
}

/// A validated set of removed components.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ablations(BTreeSet<Ablation>);

impl Ablations {
    pub fn new(items: impl IntoIterator<Item = Ablation>) -> Result<Self> {
        let set: BTreeSet<Ablation> = items.into_iter().collect();
        if set.contains(&Ablation::Tes) {
            for sub in [Ablation::Lstm, Ablation::Gtn] {
                if set.contains(&sub) {
                    return Err(Error::Config(format!(
                        "contradictory ablations: tes already removes {}",
                        if sub == Ablation::Lstm { "lstm" } else { "gtn" }
                    )));
                }
            }
        }
        if set.contains(&Ablation::Lstm) && set.contains(&Ablation::Gtn) {
            return Err(Error::Config(
                "contradictory ablations: removing both lstm and gtn leaves no temporal feature; use tes".into(),
            ));
        }
        Ok(Self(set))
    }

    pub fn parse_list(s: &str) -> Result<Self> {
        Self::new(s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?)
    }

    pub fn contains(&self, a: Ablation) -> bool {
        self.0.contains(&a)
    }

    pub fn iter(&self) -> impl Iterator<Item = Ablation> + '_ {
        self.0.iter().copied()
    }
}

fn d_batch() -> usize { 2 }
fn d_lr() -> f64 { 1e-4 }
fn d_epochs() -> usize { 50 }
fn d_windows() -> usize { 20 }
fn d_kd() -> usize { 3 }
fn d_ts() -> usize { 125 }
fn d_k() -> usize { 3 }
fn d_fs() -> usize { 128 }
fn d_fl() -> usize { 64 }
fn d_c() -> usize { 5 }
fn d_gl() -> usize { 2 }
fn d_fg() -> usize { 64 }
fn d_lambda() -> f64 { 0.5 }
fn d_heads() -> usize { 4 }
fn d_grl() -> f64 { 1.0 }
fn d_dropout() -> f64 { 0.5 }
fn d_cls() -> usize { 64 }
fn d_dom() -> usize { 128 }

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// T
    #[serde(default = "d_windows")]
    pub windows: usize,
    #[serde(default = "d_kd")]
    pub kd: usize,
    #[serde(default = "d_ts")]
    pub ts: usize,
    /// K
    #[serde(default = "d_k")]
    pub cheb_order: usize,
    #[serde(default = "d_fs")]
    pub fs: usize,
    #[serde(default = "d_fl")]
    pub fl: usize,
    /// C
    #[serde(default = "d_c")]
    pub gt_channels: usize,
    /// GL
    #[serde(default = "d_gl")]
    pub gt_layers: usize,
    #[serde(default = "d_fg")]
    pub fg: usize,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub domain_feature: DomainFeature,
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    #[serde(default = "d_grl")]
    pub grl_coefficient: f64,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_cls")]
    pub classifier_hidden: usize,
    #[serde(default = "d_dom")]
    pub domain_hidden: usize,
    /// Overrides the default multi-scale convolution stages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwcs_pipelines: Option<Vec<Vec<StageSpec>>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("windows", self.windows),
            ("kd", self.kd),
            ("ts", self.ts),
            ("fs", self.fs),
            ("fl", self.fl),
            ("gt_channels", self.gt_channels),
            ("gt_layers", self.gt_layers),
            ("fg", self.fg),
            ("heads", self.heads),
            ("classifier_hidden", self.classifier_hidden),
            ("domain_hidden", self.domain_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even (half source, half target subjects), got {}",
                self.batch_size
            )));
        }
        if self.windows < 2 {
            return Err(Error::Config(format!("windows must be at least 2, got {}", self.windows)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must be in (0, 1], got {}", self.lambda)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.grl_coefficient >= 0.0 && self.grl_coefficient.is_finite()) {
            return Err(Error::Config(format!("grl_coefficient must be >= 0, got {}", self.grl_coefficient)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        self.ablation_set()?;
        self.dwcs().validate()?;
        Ok(())
    }

    pub fn ablation_set(&self) -> Result<Ablations> {
        Ablations::new(self.ablations.iter().copied())
    }

    pub fn dwcs(&self) -> DwcsConfig {
        match &self.dwcs_pipelines {
            Some(p) => DwcsConfig { kd: self.kd, pipelines: p.clone() },
            None => DwcsConfig::standard(self.kd),
        }
    }

    pub fn sources_per_step(&self) -> usize {
        self.batch_size / 2
    }
}

/// Everything needed to build and run the network: hyperparameters plus
/// the data-dependent extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hyper: TrainConfig,
    /// V
    pub channels: usize,
    /// len
    pub window_len: usize,
}

impl ModelConfig {
    pub fn new(hyper: TrainConfig, channels: usize, window_len: usize) -> Result<Self> {
        hyper.validate()?;
        if channels == 0 {
            return Err(Error::Config("need at least one channel".into()));
        }
        let cfg = Self { hyper, channels, window_len };
        cfg.dims()?;
        if cfg.uses(Ablation::Tis) && 2 * cfg.hyper.ts > window_len {
            return Err(Error::Config(format!(
                "ts={} is too large for windows of {window_len} samples",
                cfg.hyper.ts
            )));
        }
        Ok(cfg)
    }

    pub fn ablations(&self) -> Ablations {
        self.hyper.ablation_set().expect("validated on construction")
    }

    pub fn uses(&self, a: Ablation) -> bool {
        !self.ablations().contains(a)
    }

    pub fn dims(&self) -> Result<FeatureDims> {
        feature_dims(self.window_len, &self.hyper.dwcs(), self.hyper.ts, self.uses(Ablation::Tis))
    }

    pub fn fe(&self) -> usize {
        self.dims().expect("validated on construction").fe
    }

    /// Per-node width of the temporal feature fed to the classifier.
    pub fn ft(&self) -> usize {
        let h = &self.hyper;
        if !self.uses(Ablation::Tes) {
            return h.fs;
        }
        let mut w = 0;
        if self.uses(Ablation::Lstm) {
            w += h.fl;
        }
        if self.uses(Ablation::Gtn) {
            w += h.fg;
        }
        w
    }

    /// Last extent of the domain head's input.
    pub fn domain_width(&self) -> usize {
        match self.hyper.domain_feature {
            DomainFeature::Spatial => self.hyper.fs,
            DomainFeature::Common => self.fe(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.epochs, 50);
        assert_eq!(c.windows, 20);
        assert_eq!((c.kd, c.cheb_order, c.fs, c.fl, c.gt_channels, c.gt_layers, c.fg), (3, 3, 128, 64, 5, 2, 64));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_out_of_range() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"momentum": 0.9}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"lambda": -0.1}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_combinations() {
        assert!(Ablations::parse_list("tes,lstm").is_err());
        assert!(Ablations::parse_list("tes,gtn").is_err());
        assert!(Ablations::parse_list("lstm,gtn").is_err());
        let a = Ablations::parse_list("tis,lambda_mask,gtn").unwrap();
        assert!(a.contains(Ablation::Gtn) && !a.contains(Ablation::Tes));
        assert!(Ablations::parse_list("bogus").is_err());
    }

    #[test]
    fn widths_follow_ablations() {
        let mut h = TrainConfig::default();
        let c = ModelConfig::new(h.clone(), 4, 12500).unwrap();
        assert_eq!((c.fe(), c.ft(), c.domain_width()), (1004, 128, 128));
        h.ablations = vec![Ablation::Tis, Ablation::Lstm];
        h.domain_feature = DomainFeature::Common;
        let c = ModelConfig::new(h, 4, 12500).unwrap();
        assert_eq!((c.fe(), c.ft(), c.domain_width()), (504, 64, 504));
    }
}

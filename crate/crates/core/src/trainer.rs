//! Adversarial SGD training, trial-wise prediction and ten-fold
//! cross-subject evaluation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use depnet_engine::{Tape, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::datapipe::{tenfold_split, FoldPlan, Label, Recording, WindowedSample, N_FOLDS};
use crate::error::{Error, Result};
use crate::metrics::MetricBlock;
use crate::model::{forward_train, BatchInput, Model, Prediction};
use crate::seed::derive_seed;
use crate::session::{update_running_stats, Session};

/// A windowed subject whose label the training loop may read.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub id: String,
    pub label: Label,
    pub sample: WindowedSample,
}

/// Windowed subjects sharing one channel count and window length, plus the
/// electrode adjacency.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub subjects: Vec<LabeledSample>,
    pub adjacency: Tensor<f64>,
}

impl Dataset {
    pub fn prepare(recordings: &[Recording], adjacency: Tensor<f64>, cfg: &TrainConfig) -> Result<Self> {
        let first = recordings.first().ok_or_else(|| Error::Data("dataset has no subjects".into()))?;
        let (v, n) = (first.channels(), first.n_samples());
        let subjects = recordings
            .iter()
            .map(|r| {
                if r.channels() != v || r.n_samples() / cfg.windows != n / cfg.windows {
                    return Err(Error::Data(format!(
                        "subject {} has {} channels x {} samples; expected {v} channels and the same window length as {}",
                        r.subject_id,
                        r.channels(),
                        r.n_samples(),
                        first.subject_id
                    )));
                }
                Ok(LabeledSample {
                    id: r.subject_id.clone(),
                    label: r.label,
                    sample: WindowedSample::from_recording(r, cfg.windows, cfg.ts)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { subjects, adjacency })
    }

    pub fn channels(&self) -> usize {
        self.subjects[0].sample.channels()
    }

    pub fn window_len(&self) -> usize {
        self.subjects[0].sample.window_len()
    }

    pub fn model_config(&self, hyper: &TrainConfig) -> Result<ModelConfig> {
        ModelConfig::new(hyper.clone(), self.channels(), self.window_len())
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<&LabeledSample>> {
        ids.iter()
            .map(|id| {
                self.subjects
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Data(format!("unknown subject {id:?}")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_d: f64,
    /// Training-mode accuracy over the epoch's source predictions.
    pub train_acc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss_c,loss_d,train_acc\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss_c, r.loss_d, r.train_acc));
    }
    out
}

/// A model under training plus its progress. Everything random in epoch
/// `e` is drawn from a generator seeded by `(seed, fold, e)`, so training
/// can stop after any epoch and resume bit-identically.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub fold: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: ModelConfig, adjacency: Tensor<f64>, fold: usize) -> Result<Self> {
        let seed = derive_seed(config.hyper.seed, &[fold as u64, u64::MAX]);
        Ok(Self { model: Model::new(config, adjacency, seed)?, fold, epoch: 0, history: Vec::new() })
    }

    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// One pass over the source subjects (shuffled), each step pairing
    /// `batch_size / 2` sources with as many cycled target subjects.
    /// Target samples carry no label by construction.
    pub fn run_epoch(&mut self, source: &[&LabeledSample], target: &[&WindowedSample]) -> Result<EpochRecord> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data("training needs at least one source and one target subject".into()));
        }
        let hyper = self.config().hyper.clone();
        let epoch = self.epoch + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, &[self.fold as u64, epoch as u64]));
        let mut src_order: Vec<usize> = (0..source.len()).collect();
        src_order.shuffle(&mut rng);
        let mut tgt_order: Vec<usize> = (0..target.len()).collect();
        tgt_order.shuffle(&mut rng);

        let mask = self.model.mask()?;
        let per_step = hyper.sources_per_step();
        let lr = hyper.learning_rate as f32;
        let (mut sum_c, mut sum_d, mut correct, mut steps) = (0.0, 0.0, 0usize, 0usize);
        for (step, chunk) in src_order.chunks(per_step).enumerate() {
            let mut samples: Vec<&WindowedSample> = chunk.iter().map(|&i| &source[i].sample).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| source[i].label.index()).collect();
            for j in 0..chunk.len() {
                samples.push(target[tgt_order[(step * per_step + j) % target.len()]]);
            }
            let input = BatchInput::<f32>::stack(&samples)?;

            let mut tape = Tape::new(&self.model.params);
            let mut session = Session::train(&mut tape, Some(&mut rng));
            let out = forward_train(&mut session, &self.model.config, mask.as_ref(), &input, &labels, Some(hyper.grl_coefficient))?;
            let stats = std::mem::take(&mut session.batch_stats);
            drop(session);
            let (lc, ld) = (tape.value(out.loss_c).item() as f64, tape.value(out.loss_d).item() as f64);
            if !lc.is_finite() || !ld.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch} step {step}: loss_c={lc}, loss_d={ld}")));
            }
            let probs = tape.value(out.class_probs).clone();
            let grads = tape.backward(out.total).map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            let grads = tape.param_gradients(&grads);
            drop(tape);
            self.model.params.sgd_step(&grads, lr)?;
            update_running_stats(&mut self.model.buffers, &stats)?;

            for (row, &y) in labels.iter().enumerate() {
                let pred = Prediction { probs: [probs.at(&[row, 0]) as f64, probs.at(&[row, 1]) as f64] };
                correct += usize::from(pred.class() == y);
            }
            sum_c += lc;
            sum_d += ld;
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            loss_c: sum_c / steps as f64,
            loss_d: sum_d / steps as f64,
            train_acc: correct as f64 / source.len() as f64,
        };
        debug!(
            "fold {} epoch {}: loss_c {:.4} loss_d {:.4} train_acc {:.3}",
            self.fold, record.epoch, record.loss_c, record.loss_d, record.train_acc
        );
        self.epoch = epoch;
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `epochs` epochs are complete.
    pub fn train_until(&mut self, source: &[&LabeledSample], target: &[&WindowedSample], epochs: usize) -> Result<()> {
        while self.epoch < epochs {
            self.run_epoch(source, target)?;
        }
        Ok(())
    }
}

/// Trains a fresh model for `config.hyper.epochs` epochs. Only the target
/// subjects' windowed samples are passed in, never their labels.
pub fn train_fold(
    config: ModelConfig,
    adjacency: Tensor<f64>,
    fold: usize,
    source: &[&LabeledSample],
    target: &[&WindowedSample],
) -> Result<Trainer> {
    let mut trainer = Trainer::new(config, adjacency, fold)?;
    let epochs = trainer.config().hyper.epochs;
    trainer.train_until(source, target, epochs)?;
    Ok(trainer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub id: String,
    pub truth: Label,
    pub predicted: Label,
    /// (control, depressed)
    pub probs: [f64; 2],
}

/// Trial-wise prediction: one label for a subject's whole recording.
pub fn predict_subject(model: &Model<f32>, rec: &Recording) -> Result<Prediction> {
    let h = &model.config.hyper;
    let sample = WindowedSample::from_recording(rec, h.windows, h.ts)?;
    Ok(model.predict(&[&sample])?[0])
}

pub fn predict_labeled(model: &Model<f32>, subjects: &[&LabeledSample]) -> Result<Vec<SubjectResult>> {
    subjects
        .iter()
        .map(|s| {
            let p = model.predict(&[&s.sample])?[0];
            Ok(SubjectResult { id: s.id.clone(), truth: s.label, predicted: Label::from_index(p.class()), probs: p.probs })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub predictions: Vec<SubjectResult>,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    /// Fold order, then test-group order; one entry per subject.
    pub pooled: Vec<SubjectResult>,
    pub metrics: MetricBlock,
}

pub fn metrics_of(results: &[SubjectResult]) -> Result<MetricBlock> {
    let pred: Vec<Label> = results.iter().map(|r| r.predicted).collect();
    let truth: Vec<Label> = results.iter().map(|r| r.truth).collect();
    let scores: Vec<f64> = results.iter().map(|r| r.probs[1]).collect();
    MetricBlock::compute(&pred, &truth, &scores).ok_or_else(|| Error::Invariant("no predictions to score".into()))
}

/// Trains on nine groups and predicts the held-out one. Returns the
/// trained state alongside the report.
pub fn run_fold(hyper: &TrainConfig, data: &Dataset, plan: &FoldPlan, fold: usize) -> Result<(FoldReport, Trainer)> {
    let wrap = |e: Error| Error::Fold { fold, source: Box::new(e) };
    let (train_ids, test_ids) = plan.fold(fold);
    let source = data.select(&train_ids).map_err(wrap)?;
    let test = data.select(&test_ids).map_err(wrap)?;
    let target: Vec<&WindowedSample> = test.iter().map(|s| &s.sample).collect();
    let config = data.model_config(hyper).map_err(wrap)?;
    let trainer = train_fold(config, data.adjacency.clone(), fold, &source, &target).map_err(wrap)?;
    let predictions = predict_labeled(&trainer.model, &test).map_err(wrap)?;
    info!(
        "fold {fold}: {}/{} test subjects correct",
        predictions.iter().filter(|p| p.predicted == p.truth).count(),
        predictions.len()
    );
    let report = FoldReport { fold, test_ids, predictions, history: trainer.history.clone() };
    Ok((report, trainer))
}

/// Ten-fold cross-subject evaluation; folds run on up to `parallel`
/// threads and are collected in fold order, so the result does not depend
/// on scheduling.
pub fn run_cv(hyper: &TrainConfig, data: &Dataset, parallel: usize) -> Result<CvReport> {
    hyper.validate()?;
    let plan = tenfold_split(&data.ids(), hyper.seed)?;
    let slots: Vec<Mutex<Option<Result<FoldReport>>>> = (0..N_FOLDS).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        if k >= N_FOLDS {
            break;
        }
        let r = run_fold(hyper, data, &plan, k).map(|(report, _)| report);
        *slots[k].lock().expect("fold slot") = Some(r);
    };
    let threads = parallel.clamp(1, N_FOLDS);
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(&work);
            }
        });
    }
    let folds = slots
        .into_iter()
        .map(|s| s.into_inner().expect("fold slot").expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<SubjectResult> = folds.iter().flat_map(|f| f.predictions.iter().cloned()).collect();
    let metrics = metrics_of(&pooled)?;
    Ok(CvReport { folds, pooled, metrics })
}

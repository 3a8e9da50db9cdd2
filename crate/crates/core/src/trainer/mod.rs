//! Alternating optimization of the caption branch and the image branch,
//! evaluation, inference in both modes, and checkpoints.

mod adam;
mod checkpoint;
mod experiments;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use experiments::{run_caption_ablation, run_ratio_sweep, train_and_evaluate, AblationReport, SweepRow};

use crate::diffcore::{Array, Feed, LeafKind};
use crate::error::{Error, Result};
use crate::model::{image_branch, text_branch, Batch, Branch, BranchGraph, Model, ModelConfig};
use crate::objectives::{LossConfig, MetricsAccumulator, MetricsReport};
use crate::params::ParamGroup;
use crate::scalar::Scalar;
use crate::scenegen::{scene_seed, Dataset, Sample};
use crate::textprior::{text_head, LatentDistribution};

const NOISE_STREAM: u64 = 0x6e6f_6973_6521;
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Fraction of steps spent on the caption branch.
    pub p: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    /// Replace every caption by the empty caption.
    pub drop_captions: bool,
    /// Samples per forward pass when evaluating.
    pub eval_batch: usize,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p: 0.01,
            batch_size: 16,
            epochs: 30,
            lr_start: 3e-3,
            lr_end: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            drop_captions: false,
            eval_batch: 50,
            train_path: None,
            val_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("p = {} outside [0, 1]", self.p)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval batch must be positive"));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// `Text` iff `floor((step + 1)·p) > floor(step·p)`.
pub fn schedule_select(step: u64, p: f64) -> Branch {
    if ((step + 1) as f64 * p).floor() > (step as f64 * p).floor() {
        Branch::Text
    } else {
        Branch::Image
    }
}

/// Cosine interpolation from `start` at step 0 to `end` at `total`.
pub fn cosine_lr(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    let frac = step.min(total) as f64 / total as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepOutcome {
    pub branch: Branch,
    pub loss: f64,
    pub lr: f64,
    /// L2 norm of the loss gradient per group, including frozen ones.
    pub grad_norms: BTreeMap<ParamGroup, f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub text_steps: u64,
    pub image_steps: u64,
    pub skipped_steps: u64,
    pub val: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    /// Successful optimizer steps so far.
    pub step: u64,
    /// Length of the cosine schedule.
    pub total_steps: u64,
    nonzero_features: u64,
    graphs: HashMap<(Branch, bool, usize), BranchGraph>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), vocab_size, config.seed)?;
        let optimizer = Adam::new(config.adam.clone(), &config.model.param_specs());
        Ok(Trainer {
            config,
            model,
            optimizer,
            step: 0,
            total_steps: 0,
            nonzero_features: 0,
            graphs: HashMap::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let specs = ckpt.config.model.param_specs();
        let model = Model::from_parts(ckpt.config.model.clone(), ckpt.vocab_size, ckpt.params.cast())?;
        ckpt.first.check_against(&specs)?;
        ckpt.second.check_against(&specs)?;
        let optimizer = Adam {
            config: ckpt.config.adam.clone(),
            first: ckpt.first.cast(),
            second: ckpt.second.cast(),
            steps: ckpt.group_steps.clone(),
        };
        Ok(Trainer {
            config: ckpt.config.clone(),
            model,
            optimizer,
            step: ckpt.step,
            total_steps: ckpt.total_steps,
            nonzero_features: 0,
            graphs: HashMap::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab_size: self.model.embedder.vocab_size(),
            step: self.step,
            total_steps: self.total_steps,
            group_steps: self.optimizer.steps.clone(),
            params: self.model.params.cast(),
            first: self.optimizer.first.cast(),
            second: self.optimizer.second.cast(),
        }
    }

    /// Text features that reached the model with at least one nonzero entry.
    pub fn nonzero_feature_count(&self) -> u64 {
        self.nonzero_features
    }

    pub fn learning_rate(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.config.lr_start, self.config.lr_end)
    }

    fn features(&mut self, captions: &[&[u16]]) -> Result<Vec<Vec<T>>> {
        captions
            .iter()
            .map(|c| {
                let ids: &[u16] = if self.config.drop_captions { &[] } else { c };
                let f = self.model.text_feature(ids)?;
                if f.iter().any(|v| *v != T::zero()) {
                    self.nonzero_features += 1;
                }
                Ok(f)
            })
            .collect()
    }

    fn graph(&mut self, branch: Branch, with_loss: bool, n: usize) -> Result<&BranchGraph> {
        let key = (branch, with_loss, n);
        if !self.graphs.contains_key(&key) {
            let loss = with_loss.then_some(&self.config.loss);
            let g = match branch {
                Branch::Text => text_branch(&self.config.model, loss, n)?,
                Branch::Image => image_branch(&self.config.model, loss, n)?,
            };
            self.graphs.insert(key, g);
        }
        Ok(&self.graphs[&key])
    }

    /// Standard-normal noise `[n, d]` for the caption branch at `step`.
    fn step_noise(&self, n: usize) -> Result<Array<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(self.config.seed ^ NOISE_STREAM, self.step));
        let d = self.config.model.latent_dim;
        let data = (0..n * d)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Array::new(vec![n, d], data)
    }

    /// One step on the branch chosen by the schedule.
    pub fn train_step(&mut self, samples: &[&Sample]) -> Result<StepOutcome> {
        match schedule_select(self.step, self.config.p) {
            Branch::Text => self.train_step_text(samples),
            Branch::Image => self.train_step_image(samples),
        }
    }

    /// Caption branch: updates the text head and decoder only.
    pub fn train_step_text(&mut self, samples: &[&Sample]) -> Result<StepOutcome> {
        self.step_on(Branch::Text, samples)
    }

    /// Image branch: updates the sampler and decoder only.
    pub fn train_step_image(&mut self, samples: &[&Sample]) -> Result<StepOutcome> {
        self.step_on(Branch::Image, samples)
    }

    fn step_on(&mut self, branch: Branch, samples: &[&Sample]) -> Result<StepOutcome> {
        let n = samples.len();
        let captions: Vec<&[u16]> = samples.iter().map(|s| s.caption.as_slice()).collect();
        let features = self.features(&captions)?;
        let batch = Batch::assemble(samples, &features, &self.config.model)?;
        let mut feed = Feed::new();
        batch.feed_into(&mut feed);
        if branch == Branch::Text {
            feed.insert("eps".into(), self.step_noise(n)?);
        }
        self.model.params.feed_into(&mut feed);
        let lr = self.learning_rate();

        let bg = self.graph(branch, true, n)?;
        let loss_node = bg.loss.expect("training graph has a loss");
        let ev = bg.graph.evaluate(&feed)?;
        let loss = ev.value(loss_node).item().to_f64_lossy();
        let grads = ev.backward_where(loss_node, |_, kind| kind == LeafKind::Param)?;
        drop(ev);

        let mut grad_norms = BTreeMap::new();
        for group in ParamGroup::ALL {
            let sq: f64 = grads
                .iter()
                .filter(|(name, _)| ParamGroup::of(name) == Some(group))
                .map(|(_, g)| g.sum_sq())
                .sum();
            if !sq.is_finite() {
                return Err(Error::numeric(format!("{group:?} gradient")));
            }
            grad_norms.insert(group, sq.sqrt());
        }
        let active = match branch {
            Branch::Text => [ParamGroup::Text, ParamGroup::Decoder],
            Branch::Image => [ParamGroup::Sampler, ParamGroup::Decoder],
        };
        let saved = (self.model.params.clone(), self.optimizer.clone());
        self.optimizer.update(&mut self.model.params, &grads, lr, &active)?;
        let bad = self
            .model
            .params
            .iter()
            .find(|(_, a)| !a.all_finite())
            .map(|(n, _)| n.to_string());
        if let Some(name) = bad {
            (self.model.params, self.optimizer) = saved;
            return Err(Error::numeric(format!("update of {name}")));
        }
        self.step += 1;
        Ok(StepOutcome {
            branch,
            loss,
            lr,
            grad_norms,
        })
    }

    /// Image-mode depth for several images, each `C·H·W`.
    pub fn predict(&mut self, images: &[&[f32]], captions: &[&[u16]]) -> Result<Vec<Array<T>>> {
        let n = images.len();
        if n == 0 || captions.len() != n {
            return Err(Error::contract(
                "infer_image",
                format!("{n} images, {} captions", captions.len()),
            ));
        }
        let cfg = self.config.model.clone();
        let features = self.features(captions)?;
        let mut feature = Vec::with_capacity(n * cfg.text_dim);
        let mut image = Vec::with_capacity(n * cfg.in_channels * cfg.pixels());
        for (f, im) in features.iter().zip(images) {
            if im.len() != cfg.in_channels * cfg.pixels() {
                return Err(Error::contract("infer_image", format!("image of {} values", im.len())));
            }
            feature.extend_from_slice(f);
            image.extend(im.iter().map(|&v| T::lit(v as f64)));
        }
        let mut feed = Feed::new();
        feed.insert("feature".into(), Array::new(vec![n, cfg.text_dim], feature)?);
        feed.insert(
            "image".into(),
            Array::new(vec![n, cfg.in_channels, cfg.height, cfg.width], image)?,
        );
        self.model.params.feed_into(&mut feed);
        let bg = self.graph(Branch::Image, false, n)?;
        let depth = bg.graph.evaluate(&feed)?.take(bg.depth);
        split_maps(depth, n, &cfg)
    }

    pub fn infer_image(&mut self, image: &[f32], caption: &[u16]) -> Result<Array<T>> {
        Ok(self.predict(&[image], &[caption])?.remove(0))
    }

    /// Generative mode with explicit noise `[n, d]`.
    pub fn infer_text_with_noise(&mut self, caption: &[u16], eps: Array<T>) -> Result<Vec<Array<T>>> {
        let cfg = self.config.model.clone();
        let s = eps.shape().to_vec();
        if s.len() != 2 || s[1] != cfg.latent_dim || s[0] == 0 {
            return Err(Error::contract("infer_text", format!("noise shape {s:?}")));
        }
        let n = s[0];
        let f = self.features(&[caption])?.remove(0);
        let feature = Array::new(
            vec![n, cfg.text_dim],
            f.iter().copied().cycle().take(n * cfg.text_dim).collect(),
        )?;
        let mut feed = Feed::new();
        feed.insert("feature".into(), feature);
        feed.insert("eps".into(), eps);
        self.model.params.feed_into(&mut feed);
        let bg = self.graph(Branch::Text, false, n)?;
        let depth = bg.graph.evaluate(&feed)?.take(bg.depth);
        split_maps(depth, n, &cfg)
    }

    /// `n` depth maps decoded from standard-normal draws, zero skips.
    pub fn infer_text(&mut self, caption: &[u16], n: usize, seed: u64) -> Result<Vec<Array<T>>> {
        if n == 0 {
            return Err(Error::contract("infer_text", "need at least one sample"));
        }
        let d = self.config.model.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = (0..n * d)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        self.infer_text_with_noise(caption, Array::new(vec![n, d], eps)?)
    }

    /// Caption posterior for `caption`.
    pub fn latent(&mut self, caption: &[u16]) -> Result<LatentDistribution<T>> {
        let f = self.features(&[caption])?.remove(0);
        text_head(&f, &self.model.params, &self.config.model.text())
    }

    /// Checks that a dataset matches the model and vocabulary.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let h = &ds.header;
        let m = &self.config.model;
        if (h.channels, h.height, h.width) != (m.in_channels, m.height, m.width) {
            return Err(Error::config(format!(
                "dataset is {}x{}x{} but the model expects {}x{}x{}",
                h.channels, h.height, h.width, m.in_channels, m.height, m.width
            )));
        }
        if h.vocabulary.len() != self.model.embedder.vocab_size() {
            return Err(Error::config(format!(
                "dataset vocabulary has {} tokens, model has {}",
                h.vocabulary.len(),
                self.model.embedder.vocab_size()
            )));
        }
        Ok(())
    }

    /// Image-mode metrics pooled over every valid pixel of `ds`.
    pub fn evaluate(&mut self, ds: &Dataset) -> Result<MetricsReport> {
        self.check_dataset(ds)?;
        let mut acc = MetricsAccumulator::new();
        for chunk in ds.samples.chunks(self.config.eval_batch) {
            let images: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
            let captions: Vec<&[u16]> = chunk.iter().map(|s| s.caption.as_slice()).collect();
            for (pred, s) in self.predict(&images, &captions)?.iter().zip(chunk) {
                let pred: Vec<f64> = pred.data().iter().map(|v| v.to_f64_lossy()).collect();
                let target: Vec<f64> = s.depth.iter().map(|&v| v as f64).collect();
                acc.add(&pred, &target, &s.mask)?;
            }
        }
        acc.report()
    }

    /// Trains for `config.epochs` epochs from the current state, validating
    /// after each epoch, and returns the checkpoint with the lowest
    /// validation AbsRel.
    pub fn fit(&mut self, train: &Dataset, val: &Dataset, mut log: impl FnMut(&EpochLog)) -> Result<FitReport> {
        self.check_dataset(train)?;
        self.check_dataset(val)?;
        if train.header.vocabulary != val.header.vocabulary {
            return Err(Error::config("train and validation vocabularies differ"));
        }
        let b = self.config.batch_size;
        let per_epoch = train.len() / b;
        if per_epoch == 0 || val.is_empty() {
            return Err(Error::config(format!(
                "need at least {b} training samples and one validation sample"
            )));
        }
        self.total_steps = (per_epoch * self.config.epochs) as u64;
        let mut logs = Vec::new();
        let mut best: Option<(f64, usize, Checkpoint)> = None;
        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(self.config.seed ^ SHUFFLE_STREAM, epoch as u64));
            order.shuffle(&mut rng);
            let (mut loss_sum, mut text, mut image, mut skipped) = (0.0, 0u64, 0u64, 0u64);
            for idx in order.chunks_exact(b) {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
                match self.train_step(&batch) {
                    Ok(out) => {
                        loss_sum += out.loss;
                        match out.branch {
                            Branch::Text => text += 1,
                            Branch::Image => image += 1,
                        }
                    }
                    Err(e) if e.is_numeric() => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            let metrics = self.evaluate(val)?;
            let entry = EpochLog {
                epoch: epoch + 1,
                step: self.step,
                lr: self.learning_rate(),
                train_loss: loss_sum / (text + image).max(1) as f64,
                text_steps: text,
                image_steps: image,
                skipped_steps: skipped,
                val: metrics,
            };
            log(&entry);
            if best.as_ref().is_none_or(|(v, _, _)| entry.val.abs_rel < *v) {
                best = Some((entry.val.abs_rel, epoch + 1, self.to_checkpoint()));
            }
            logs.push(entry);
        }
        let (_, best_epoch, best) = best.ok_or_else(|| Error::config("zero epochs requested"))?;
        Ok(FitReport { best, best_epoch, logs })
    }
}

fn split_maps<T: Scalar>(depth: Array<T>, n: usize, cfg: &ModelConfig) -> Result<Vec<Array<T>>> {
    let px = cfg.pixels();
    (0..n)
        .map(|i| Array::new(vec![cfg.height, cfg.width], depth.data()[i * px..(i + 1) * px].to_vec()))
        .collect()
}

/// `f32` trainer, the precision used for training runs.
pub type Trainer32 = Trainer<f32>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert!((0..500).all(|s| schedule_select(s, 0.0) == Branch::Image));
        assert!((0..500).all(|s| schedule_select(s, 1.0) == Branch::Text));
        assert_eq!(
            (0..1000).filter(|&s| schedule_select(s, 0.01) == Branch::Text).count(),
            10
        );
    }

    #[test]
    fn schedule_windows_are_balanced() {
        for &p in &[0.01, 0.1, 0.37, 0.5, 0.9] {
            let text: Vec<u64> = (0..2000)
                .map(|s| (schedule_select(s, p) == Branch::Text) as u64)
                .collect();
            for start in (0..1500).step_by(37) {
                for len in [1usize, 7, 100, 499] {
                    let k: u64 = text[start..start + len].iter().sum();
                    assert!(
                        (k as f64 - len as f64 * p).abs() <= 1.0,
                        "p={p} start={start} len={len}"
                    );
                }
            }
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 3e-3, 1e-3), 3e-3);
        assert!((cosine_lr(100, 100, 3e-3, 1e-3) - 1e-3).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 3e-3, 1e-3) - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                p: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_start: 1e-4,
                lr_end: 1e-3,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let unknown = serde_json::from_str::<TrainConfig>(r#"{"p": 0.5, "bogus": 1}"#);
        assert!(unknown.is_err());
    }
}

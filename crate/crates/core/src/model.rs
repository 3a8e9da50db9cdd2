//! Full network: caption head, conditional sampler and decoder wired into the
//! two training branches and the two inference modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthdec::{combine_latent_graph, decode_graph, tile_latent_graph, DecoderConfig, SkipInput, DEPTH_MIN};
use crate::diffcore::{check_gradients, Array, Feed, GradReport, Graph, NodeId};
use crate::error::{Error, Result};
use crate::imagecond::{encode_image_graph, SamplerConfig};
use crate::objectives::{batch_stats_graph, kl_graph, si_loss_graph, LossConfig, TargetNodes};
use crate::params::{ParamSet, ParamSpec};
use crate::scalar::Scalar;
use crate::scenegen::Sample;
use crate::textprior::{text_head_graph, FrozenEmbedder, TextHeadConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub text_dim: usize,
    pub text_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    /// Seed of the frozen caption embedding table.
    pub embed_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            in_channels: 1,
            text_dim: 32,
            text_hidden: vec![64, 32],
            latent_dim: 16,
            encoder_channels: vec![8, 16, 32],
            decoder_channels: vec![32, 16, 8],
            embed_seed: 17,
        }
    }
}

impl ModelConfig {
    /// Small dimensions used by the gradient-check suite.
    pub fn toy() -> Self {
        ModelConfig {
            height: 8,
            width: 8,
            in_channels: 1,
            text_dim: 6,
            text_hidden: vec![5],
            latent_dim: 3,
            encoder_channels: vec![3, 4],
            decoder_channels: vec![4, 3],
            embed_seed: 17,
        }
    }

    pub fn text(&self) -> TextHeadConfig {
        TextHeadConfig {
            text_dim: self.text_dim,
            hidden: self.text_hidden.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            in_channels: self.in_channels,
            height: self.height,
            width: self.width,
            channels: self.encoder_channels.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        let s = self.sampler();
        DecoderConfig {
            latent_dim: self.latent_dim,
            channels: self.decoder_channels.clone(),
            skip_shapes: s.skip_shapes(),
            grid: s.grid(),
            depth_min: DEPTH_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 || self.text_hidden.contains(&0) {
            return Err(Error::config("text widths must be positive"));
        }
        self.sampler().validate()?;
        self.decoder().validate()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.text().param_specs();
        specs.extend(self.sampler().param_specs());
        specs.extend(self.decoder().param_specs());
        specs
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Parameters plus the frozen caption embedder.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub embedder: FrozenEmbedder,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::init(&config.param_specs(), seed)?;
        let embedder = FrozenEmbedder::new(vocab_size, config.text_dim, config.embed_seed);
        Ok(Model {
            config,
            embedder,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, vocab_size: usize, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config.param_specs())?;
        let embedder = FrozenEmbedder::new(vocab_size, config.text_dim, config.embed_seed);
        Ok(Model {
            config,
            embedder,
            params,
        })
    }

    pub fn text_feature(&self, caption: &[u16]) -> Result<Vec<T>> {
        self.embedder.embed(caption)
    }
}

/// Dense graph inputs for `n` samples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub feature: Array<T>,
    pub image: Array<T>,
    pub log_target: Array<T>,
    pub mask: Array<T>,
    pub inv_count: Array<T>,
}

impl<T: Scalar> Batch<T> {
    /// Stacks samples; `features[i]` is the text feature of `samples[i]`.
    pub fn assemble(samples: &[&Sample], features: &[Vec<T>], cfg: &ModelConfig) -> Result<Self> {
        let n = samples.len();
        if n == 0 || features.len() != n {
            return Err(Error::contract(
                "batch",
                format!("{n} samples, {} features", features.len()),
            ));
        }
        let px = cfg.pixels();
        let mut feature = Vec::with_capacity(n * cfg.text_dim);
        let mut image = Vec::with_capacity(n * cfg.in_channels * px);
        let mut log_target = Vec::with_capacity(n * px);
        let mut mask = Vec::with_capacity(n * px);
        let mut inv_count = Vec::with_capacity(n);
        for (i, (s, f)) in samples.iter().zip(features).enumerate() {
            if f.len() != cfg.text_dim
                || s.image.len() != cfg.in_channels * px
                || s.depth.len() != px
                || s.mask.len() != px
            {
                return Err(Error::contract(
                    "batch",
                    format!("sample {i} does not match the model shape"),
                ));
            }
            feature.extend_from_slice(f);
            image.extend(s.image.iter().map(|&v| T::lit(v as f64)));
            let mut valid = 0usize;
            for (&d, &m) in s.depth.iter().zip(&s.mask) {
                if m {
                    if !(d > 0.0) {
                        return Err(Error::contract(
                            "batch",
                            format!("sample {i}: non-positive depth under mask"),
                        ));
                    }
                    valid += 1;
                    log_target.push(T::lit((d as f64).ln()));
                    mask.push(T::one());
                } else {
                    log_target.push(T::zero());
                    mask.push(T::zero());
                }
            }
            if valid == 0 {
                return Err(Error::contract("batch", format!("sample {i} has an empty mask")));
            }
            inv_count.push(T::lit(1.0 / valid as f64));
        }
        let map = vec![n, 1, cfg.height, cfg.width];
        Ok(Batch {
            feature: Array::new(vec![n, cfg.text_dim], feature)?,
            image: Array::new(vec![n, cfg.in_channels, cfg.height, cfg.width], image)?,
            log_target: Array::new(map.clone(), log_target)?,
            mask: Array::new(map, mask)?,
            inv_count: Array::new(vec![n], inv_count)?,
        })
    }

    pub fn len(&self) -> usize {
        self.feature.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feed_into(&self, feed: &mut Feed<T>) {
        feed.insert("feature".into(), self.feature.clone());
        feed.insert("image".into(), self.image.clone());
        feed.insert("log_target".into(), self.log_target.clone());
        feed.insert("mask".into(), self.mask.clone());
        feed.insert("inv_count".into(), self.inv_count.clone());
    }
}

/// Which branch a graph was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Text,
    Image,
}

/// A built graph with its interesting nodes.
#[derive(Debug)]
pub struct BranchGraph {
    pub graph: Graph,
    pub branch: Branch,
    pub batch: usize,
    pub depth: NodeId,
    pub loss: Option<NodeId>,
    pub mu: NodeId,
    pub sigma: NodeId,
    /// `eps_tilde` for the image branch.
    pub eps_grid: Option<NodeId>,
}

fn targets(g: &mut Graph, cfg: &ModelConfig, n: usize) -> Result<TargetNodes> {
    let map = [n, 1, cfg.height, cfg.width];
    Ok(TargetNodes {
        log_target: g.input("log_target", &map)?,
        mask: g.input("mask", &map)?,
        inv_count: g.input("inv_count", &[n])?,
    })
}

/// Caption branch: `eps` `[n, d]` is fed as an input; skips are zero.
pub fn text_branch(cfg: &ModelConfig, loss: Option<&LossConfig>, n: usize) -> Result<BranchGraph> {
    cfg.validate()?;
    let mut g = Graph::new();
    let feature = g.input("feature", &[n, cfg.text_dim])?;
    let eps = g.input("eps", &[n, cfg.latent_dim])?;
    let lat = text_head_graph(&mut g, feature, &cfg.text())?;
    let scaled = g.mul(eps, lat.sigma)?;
    let z = g.add(lat.mu, scaled)?;
    let dcfg = cfg.decoder();
    let grid = tile_latent_graph(&mut g, z, dcfg.grid.0, dcfg.grid.1)?;
    let depth = decode_graph(&mut g, grid, &SkipInput::Zero, &dcfg)?;
    let loss = match loss {
        Some(lc) => {
            let t = targets(&mut g, cfg, n)?;
            let si = si_loss_graph(&mut g, depth, t, lc.gamma)?;
            let kl = kl_graph(&mut g, lat.mu, lat.sigma)?;
            let kl = g.scale(kl, lc.alpha);
            let total = g.add(si, kl)?;
            g.set_label(total, "loss");
            Some(total)
        }
        None => None,
    };
    Ok(BranchGraph {
        graph: g,
        branch: Branch::Text,
        batch: n,
        depth,
        loss,
        mu: lat.mu,
        sigma: lat.sigma,
        eps_grid: None,
    })
}

/// Image branch: the sampler picks one latent per patch; real skips.
///
/// The caption posterior is detached both at the sampler input and in the
/// latent combination, so the text head gets no gradient from this branch.
pub fn image_branch(cfg: &ModelConfig, loss: Option<&LossConfig>, n: usize) -> Result<BranchGraph> {
    cfg.validate()?;
    let mut g = Graph::new();
    let feature = g.input("feature", &[n, cfg.text_dim])?;
    let image = g.input("image", &[n, cfg.in_channels, cfg.height, cfg.width])?;
    let lat = text_head_graph(&mut g, feature, &cfg.text())?;
    let enc = encode_image_graph(&mut g, image, lat.mu, lat.sigma, &cfg.sampler())?;
    let mu = g.detach(lat.mu);
    let sigma = g.detach(lat.sigma);
    let z = combine_latent_graph(&mut g, mu, sigma, enc.eps)?;
    let depth = decode_graph(&mut g, z, &SkipInput::Features(enc.skips.clone()), &cfg.decoder())?;
    let loss = match loss {
        Some(lc) => {
            let t = targets(&mut g, cfg, n)?;
            let si = si_loss_graph(&mut g, depth, t, lc.gamma)?;
            let (m, s) = batch_stats_graph(&mut g, enc.eps, lc.sigma_floor)?;
            let kl = kl_graph(&mut g, m, s)?;
            let kl = g.scale(kl, lc.beta);
            let total = g.add(si, kl)?;
            g.set_label(total, "loss");
            Some(total)
        }
        None => None,
    };
    Ok(BranchGraph {
        graph: g,
        branch: Branch::Image,
        batch: n,
        depth,
        loss,
        mu: lat.mu,
        sigma: lat.sigma,
        eps_grid: Some(enc.eps),
    })
}

/// A well-conditioned evaluation point for finite differences.
///
/// Central differences at step 1e-6 carry absolute noise near 1e-10, so any
/// gradient element much below 1e-5 cannot be checked to a 1e-5 relative
/// bound. Random signs everywhere produce such elements by cancellation.
/// Here weights are positive with magnitude about `1/fan_in` (every relu is
/// active and away from its kink), inputs are positive, and targets sit at a
/// near-uniform ratio above the current prediction so per-pixel loss
/// gradients share a sign.
fn check_point(bg: &BranchGraph, cfg: &ModelConfig, seed: u64) -> Result<Feed<f64>> {
    let n = bg.batch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arrays = std::collections::BTreeMap::new();
    for spec in cfg.param_specs() {
        let a = match spec.fan_in {
            Some(fan) => Array::from_fn(&spec.shape, |_| rng.random_range(0.5..1.5) / fan as f64),
            None => Array::from_fn(&spec.shape, |_| rng.random_range(0.0..0.2)),
        };
        arrays.insert(spec.name.clone(), a);
    }
    let params = ParamSet::from_arrays(arrays)?;
    let px = cfg.pixels();
    let samples: Vec<Sample> = (0..n)
        .map(|_| {
            let mut mask: Vec<bool> = (0..px).map(|_| rng.random_bool(0.8)).collect();
            mask[0] = true;
            Sample {
                image: (0..cfg.in_channels * px).map(|_| rng.random_range(0.1..1.0)).collect(),
                caption: Vec::new(),
                depth: vec![1.0; px],
                mask,
            }
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let features: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..cfg.text_dim).map(|_| rng.random_range(0.1..1.0)).collect())
        .collect();
    let batch = Batch::assemble(&refs, &features, cfg)?;
    let mut feed = Feed::new();
    batch.feed_into(&mut feed);
    if bg.branch == Branch::Text {
        let eps = Array::from_fn(&[n, cfg.latent_dim], |_| rng.random_range(0.2..1.0));
        feed.insert("eps".into(), eps);
    }
    params.feed_into(&mut feed);
    let depth = bg.graph.evaluate(&feed)?.take(bg.depth);
    let log_target = depth
        .data()
        .iter()
        .zip(feed["mask"].data())
        .map(|(&d, &m)| m * (d.ln() + 1.5 + rng.random_range(-0.05..0.05)))
        .collect();
    let log_target = Array::new(depth.shape().to_vec(), log_target)?;
    feed.insert("log_target".into(), log_target);
    Ok(feed)
}

/// Central-difference check of both full training objectives at toy size.
pub fn gradient_check_suite(seed: u64, step: f64) -> Result<Vec<(Branch, GradReport)>> {
    let cfg = ModelConfig::toy();
    let loss = LossConfig::default();
    let n = 2;
    let mut out = Vec::new();
    for (branch, bg) in [
        (Branch::Text, text_branch(&cfg, Some(&loss), n)?),
        (Branch::Image, image_branch(&cfg, Some(&loss), n)?),
    ] {
        let point = check_point(&bg, &cfg, seed.wrapping_mul(2).wrapping_add(branch as u64))?;
        let report = check_gradients(&bg.graph, &point, bg.loss.expect("loss node"), step)?;
        out.push((branch, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn default_specs_are_consistent() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let m = Model::<f32>::init(cfg, 20, 1).unwrap();
        for g in ParamGroup::ALL {
            assert!(m.params.group(g).count() > 0);
        }
    }

    #[test]
    fn image_loss_never_reaches_text_head() {
        let cfg = ModelConfig::toy();
        let bg = image_branch(&cfg, Some(&LossConfig::default()), 2).unwrap();
        let point = check_point(&bg, &cfg, 4).unwrap();
        let ev = bg.graph.evaluate(&point).unwrap();
        let grads = ev.backward(bg.loss.unwrap()).unwrap();
        for (name, g) in grads.iter().filter(|(n, _)| ParamGroup::of(n).is_some()) {
            let zero = g.data().iter().all(|&v| v == 0.0);
            assert_eq!(zero, name.starts_with("text."), "{name}");
        }
    }

    #[test]
    fn gradient_suite_passes() {
        for (branch, report) in gradient_check_suite(0, 1e-6).unwrap() {
            assert!(report.pass, "{branch:?}: {:#?}", report);
        }
    }
}

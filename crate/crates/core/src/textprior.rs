//! Caption side of the model: tokenization, the frozen text embedder, the
//! head that turns a caption feature into a diagonal Gaussian over the scene
//! latent, and reparameterized sampling from it.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Feed, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamSpec};
use crate::scalar::Scalar;

pub const PAD_ID: u16 = 0;
pub const UNKNOWN_ID: u16 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Bounds applied to the predicted log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u16>,
}

impl Vocabulary {
    /// Builds a vocabulary whose ids follow `words`, after the two specials.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNKNOWN_TOKEN.to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its full id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNKNOWN_TOKEN {
            return Err(Error::Vocabulary("ids 0 and 1 must be <pad> and <unk>".into()));
        }
        if tokens.len() > u16::MAX as usize {
            return Err(Error::Vocabulary(format!(
                "{} tokens exceed the u16 id space",
                tokens.len()
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!(
                    "token {t:?} is empty or contains whitespace"
                )));
            }
            if ids.insert(t.clone(), i as u16).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u16> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u16) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Lowercased whitespace tokenization; unseen words map to the unknown id.
    pub fn tokenize(&self, text: &str) -> Vec<u16> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNKNOWN_ID))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u16]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNKNOWN_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Fixed random token embedding with mean pooling. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEmbedder {
    seed: u64,
    dim: usize,
    vocab_size: usize,
    table: Vec<f64>,
}

impl FrozenEmbedder {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab_size * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        FrozenEmbedder {
            seed,
            dim,
            vocab_size,
            table,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, id: u16) -> &[f64] {
        let i = id as usize;
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    /// Mean of the token rows; the empty caption embeds to zeros.
    pub fn embed<T: Scalar>(&self, ids: &[u16]) -> Result<Vec<T>> {
        let mut acc = vec![0.0f64; self.dim];
        for &id in ids {
            if id as usize >= self.vocab_size {
                return Err(Error::contract(
                    "embed_text",
                    format!("token id {id} outside vocabulary of {}", self.vocab_size),
                ));
            }
            for (a, &r) in acc.iter_mut().zip(self.row(id)) {
                *a += r;
            }
        }
        let n = ids.len().max(1) as f64;
        Ok(acc.into_iter().map(|a| T::lit(a / n)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextHeadConfig {
    pub text_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for TextHeadConfig {
    fn default() -> Self {
        TextHeadConfig {
            text_dim: 32,
            hidden: vec![64, 32],
            latent_dim: 16,
        }
    }
}

impl TextHeadConfig {
    /// Affine layers `text.fc{i}`; the last emits `2·latent_dim` values.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut widths = vec![self.text_dim];
        widths.extend(&self.hidden);
        widths.push(2 * self.latent_dim);
        widths
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| {
                [
                    ParamSpec::weight(format!("text.fc{i}.w"), vec![w[1], w[0]], w[0]),
                    ParamSpec::bias(format!("text.fc{i}.b"), w[1]),
                ]
            })
            .collect()
    }
}

/// Graph nodes of a predicted latent distribution, each `[n, d]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentNodes {
    pub mu: NodeId,
    pub log_sigma_raw: NodeId,
    pub sigma: NodeId,
}

/// Appends the caption head to `g`; `feature` is `[n, text_dim]`.
pub fn text_head_graph(g: &mut Graph, feature: NodeId, cfg: &TextHeadConfig) -> Result<LatentNodes> {
    let layers = cfg.hidden.len() + 1;
    let mut h = feature;
    for i in 0..layers {
        let w = g.param(&format!("text.fc{i}.w"), &cfg.param_specs()[2 * i].shape)?;
        let b = g.param(&format!("text.fc{i}.b"), &cfg.param_specs()[2 * i + 1].shape)?;
        h = g.affine(h, w, b)?;
        if i + 1 < layers {
            h = g.relu(h);
        }
    }
    let d = cfg.latent_dim;
    let mu = g.narrow(h, 0, d)?;
    let log_sigma_raw = g.narrow(h, d, d)?;
    let clamped = g.clamp(log_sigma_raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    let sigma = g.exp(clamped);
    g.set_label(mu, "mu_hat");
    g.set_label(sigma, "sigma_hat");
    Ok(LatentNodes {
        mu,
        log_sigma_raw,
        sigma,
    })
}

/// Posterior parameters predicted from one caption.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatentDistribution<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    /// Head output before clamping.
    pub log_sigma_raw: Vec<T>,
}

impl<T: Scalar> LatentDistribution<T> {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Builds a distribution from a raw log-sigma, applying the clamp.
    pub fn from_raw(mu: Vec<T>, log_sigma_raw: Vec<T>) -> Self {
        let (lo, hi) = (T::lit(LOG_SIGMA_MIN), T::lit(LOG_SIGMA_MAX));
        let sigma = log_sigma_raw.iter().map(|&l| l.max(lo).min(hi).exp()).collect();
        LatentDistribution {
            mu,
            sigma,
            log_sigma_raw,
        }
    }
}

/// Runs the caption head on a single text feature.
pub fn text_head<T: Scalar>(
    feature: &[T],
    params: &ParamSet<T>,
    cfg: &TextHeadConfig,
) -> Result<LatentDistribution<T>> {
    if feature.len() != cfg.text_dim {
        return Err(Error::contract(
            "text_head",
            format!("feature width {} != {}", feature.len(), cfg.text_dim),
        ));
    }
    let mut g = Graph::new();
    let f = g.input("feature", &[1, cfg.text_dim])?;
    let nodes = text_head_graph(&mut g, f, cfg)?;
    let mut feed = Feed::new();
    feed.insert("feature".into(), Array::new(vec![1, cfg.text_dim], feature.to_vec())?);
    params.feed_into(&mut feed);
    let ev = g.evaluate(&feed)?;
    Ok(LatentDistribution {
        mu: ev.value(nodes.mu).data().to_vec(),
        sigma: ev.value(nodes.sigma).data().to_vec(),
        log_sigma_raw: ev.value(nodes.log_sigma_raw).data().to_vec(),
    })
}

/// `mu + eps · sigma`, elementwise.
pub fn reparameterize<T: Scalar>(dist: &LatentDistribution<T>, eps: &[T]) -> Result<Vec<T>> {
    if eps.len() != dist.dim() {
        return Err(Error::contract(
            "reparameterize",
            format!("noise width {} != latent width {}", eps.len(), dist.dim()),
        ));
    }
    Ok(dist
        .mu
        .iter()
        .zip(&dist.sigma)
        .zip(eps)
        .map(|((&m, &s), &e)| m + e * s)
        .collect())
}

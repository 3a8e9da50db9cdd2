//! Image-conditional sampler: a strided convolutional encoder that reads the
//! image together with the (detached) caption posterior and predicts one
//! latent noise vector per image patch.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Feed, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamSpec};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the stride-2 stages, shallow to deep.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            in_channels: 1,
            height: 32,
            width: 32,
            channels: vec![8, 16, 32],
            latent_dim: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let factor = 1usize << self.channels.len();
        if self.channels.is_empty() || self.channels.contains(&0) || self.latent_dim == 0 || self.in_channels == 0 {
            return Err(Error::config("sampler needs at least one stage and non-zero widths"));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(factor)
            || !self.width.is_multiple_of(factor)
        {
            return Err(Error::config(format!(
                "image {}x{} is not divisible by {factor} for a {}-stage encoder",
                self.height,
                self.width,
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial size `(h, w)` of the epsilon grid.
    pub fn grid(&self) -> (usize, usize) {
        let f = 1usize << self.channels.len();
        (self.height / f, self.width / f)
    }

    /// `[channels, h, w]` of every skip feature map, shallow to deep.
    pub fn skip_shapes(&self) -> Vec<[usize; 3]> {
        self.channels
            .iter()
            .enumerate()
            .map(|(i, &c)| [c, self.height >> (i + 1), self.width >> (i + 1)])
            .collect()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            specs.push(ParamSpec::weight(
                format!("sampler.conv{i}.w"),
                vec![cout, cin, 3, 3],
                cin * 9,
            ));
            specs.push(ParamSpec::bias(format!("sampler.conv{i}.b"), cout));
            cin = cout;
        }
        let head_in = cin + 2 * self.latent_dim;
        specs.push(ParamSpec::weight(
            "sampler.head.w",
            vec![self.latent_dim, head_in, 1, 1],
            head_in,
        ));
        specs.push(ParamSpec::bias("sampler.head.b", self.latent_dim));
        specs
    }
}

/// Epsilon grid node `[n, d, h, w]` and skip nodes, shallow to deep.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub eps: NodeId,
    pub skips: Vec<NodeId>,
}

/// Appends the sampler to `g`. `mu` and `sigma` (`[n, d]`) are detached here,
/// so nothing upstream of them receives gradient through this path.
pub fn encode_image_graph(
    g: &mut Graph,
    image: NodeId,
    mu: NodeId,
    sigma: NodeId,
    cfg: &SamplerConfig,
) -> Result<EncoderNodes> {
    cfg.validate()?;
    let specs = cfg.param_specs();
    let mut h = image;
    let mut skips = Vec::with_capacity(cfg.channels.len());
    for i in 0..cfg.channels.len() {
        let w = g.param(&specs[2 * i].name, &specs[2 * i].shape)?;
        let b = g.param(&specs[2 * i + 1].name, &specs[2 * i + 1].shape)?;
        let conv = g.conv2d(h, w, b, 2)?;
        h = g.relu(conv);
        skips.push(h);
    }
    let (gh, gw) = cfg.grid();
    let mu_in = g.detach(mu);
    let sigma_in = g.detach(sigma);
    let mu_grid = g.tile(mu_in, gh, gw)?;
    let sigma_grid = g.tile(sigma_in, gh, gw)?;
    let joined = g.concat(&[h, mu_grid, sigma_grid])?;
    let n = specs.len();
    let w = g.param(&specs[n - 2].name, &specs[n - 2].shape)?;
    let b = g.param(&specs[n - 1].name, &specs[n - 1].shape)?;
    let eps = g.conv2d(joined, w, b, 1)?;
    g.set_label(eps, "eps_tilde");
    Ok(EncoderNodes { eps, skips })
}

/// `ε̃` for one image, `[d, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonGrid<T>(pub Array<T>);

/// Encoder feature maps for one image, shallow to deep, each `[c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipFeatures<T>(pub Vec<Array<T>>);

/// Runs the sampler on a single `C×H×W` image.
pub fn encode_image<T: Scalar>(
    image: &[T],
    mu: &[T],
    sigma: &[T],
    params: &ParamSet<T>,
    cfg: &SamplerConfig,
) -> Result<(EpsilonGrid<T>, SkipFeatures<T>)> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    if mu.len() != d || sigma.len() != d {
        return Err(Error::contract("encode_image", "latent width mismatch"));
    }
    let mut g = Graph::new();
    let x = g.input("image", &[1, cfg.in_channels, cfg.height, cfg.width])?;
    let m = g.input("mu", &[1, d])?;
    let s = g.input("sigma", &[1, d])?;
    let nodes = encode_image_graph(&mut g, x, m, s, cfg)?;
    let mut feed = Feed::new();
    feed.insert(
        "image".into(),
        Array::new(vec![1, cfg.in_channels, cfg.height, cfg.width], image.to_vec())?,
    );
    feed.insert("mu".into(), Array::new(vec![1, d], mu.to_vec())?);
    feed.insert("sigma".into(), Array::new(vec![1, d], sigma.to_vec())?);
    params.feed_into(&mut feed);
    let ev = g.evaluate(&feed)?;
    let strip = |a: &Array<T>| Array::new(a.shape()[1..].to_vec(), a.data().to_vec());
    let eps = strip(ev.value(nodes.eps))?;
    let skips = nodes
        .skips
        .iter()
        .map(|&id| strip(ev.value(id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((EpsilonGrid(eps), SkipFeatures(skips)))
}

/// Half-open input row range that can influence grid row `cell` after
/// `stages` stride-2 3×3 convolutions followed by a 1×1 head.
pub fn receptive_rows(cell: usize, stages: usize, extent: usize) -> (usize, usize) {
    // Stride-2 SAME padding on an even extent pads one row at the bottom only,
    // so output row r reads input rows 2r..=2r+2.
    let (mut lo, mut hi) = (cell, cell);
    for _ in 0..stages {
        lo *= 2;
        hi = 2 * hi + 2;
    }
    (lo, (hi + 1).min(extent))
}

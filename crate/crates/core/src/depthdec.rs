//! Depth decoder: latent grid plus encoder skips to a positive depth map.
//!
//! Stage `i` concatenates the matching skip onto the running features,
//! upsamples ×2 (nearest), then applies a 3×3 convolution and relu. A 1×1
//! head produces `u`, and depth is `d_min + softplus(u)`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Feed, Graph, NodeId};
use crate::error::{Error, Result};
use crate::imagecond::SkipFeatures;
use crate::params::{ParamSet, ParamSpec};
use crate::scalar::Scalar;

/// Smallest depth the decoder can emit, in meters.
pub const DEPTH_MIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    /// Output channels per stage, coarse to fine.
    pub channels: Vec<usize>,
    /// Skip shapes `[c, h, w]`, shallow to deep, as produced by the sampler.
    pub skip_shapes: Vec<[usize; 3]>,
    /// Latent grid size.
    pub grid: (usize, usize),
    pub depth_min: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.skip_shapes.len() {
            return Err(Error::config(format!(
                "{} decoder stages but {} skip connections",
                self.channels.len(),
                self.skip_shapes.len()
            )));
        }
        let (mut h, mut w) = self.grid;
        for (i, s) in self.skip_shapes.iter().rev().enumerate() {
            if s[1] != h || s[2] != w {
                return Err(Error::config(format!(
                    "decoder stage {i} runs at {h}x{w} but its skip is {}x{}",
                    s[1], s[2]
                )));
            }
            h *= 2;
            w *= 2;
        }
        if !(self.depth_min > 0.0) || self.latent_dim == 0 || self.channels.contains(&0) {
            return Err(Error::config("decoder widths and depth floor must be positive"));
        }
        Ok(())
    }

    /// Output map size.
    pub fn output_size(&self) -> (usize, usize) {
        let f = 1usize << self.channels.len();
        (self.grid.0 * f, self.grid.1 * f)
    }

    /// Skip shape consumed by decoder stage `i` (deepest first).
    fn stage_skip(&self, i: usize) -> [usize; 3] {
        self.skip_shapes[self.skip_shapes.len() - 1 - i]
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut cin = self.latent_dim;
        for (i, &cout) in self.channels.iter().enumerate() {
            let fan = cin + self.stage_skip(i)[0];
            specs.push(ParamSpec::weight(
                format!("decoder.conv{i}.w"),
                vec![cout, fan, 3, 3],
                fan * 9,
            ));
            specs.push(ParamSpec::bias(format!("decoder.conv{i}.b"), cout));
            cin = cout;
        }
        specs.push(ParamSpec::weight("decoder.head.w", vec![1, cin, 1, 1], cin));
        specs.push(ParamSpec::bias("decoder.head.b", 1));
        specs
    }
}

/// Skip connections fed to the decoder.
#[derive(Clone, Debug)]
pub enum SkipInput {
    /// Zero-filled maps of the expected shapes (text branch).
    Zero,
    /// Encoder nodes, shallow to deep.
    Features(Vec<NodeId>),
}

/// `[n, d] -> [n, d, h, w]`.
pub fn tile_latent_graph(g: &mut Graph, z: NodeId, h: usize, w: usize) -> Result<NodeId> {
    g.tile(z, h, w)
}

/// `mu + eps · sigma` with `mu`, `sigma` `[n, d]` broadcast over the `[n, d, h, w]` grid.
pub fn combine_latent_graph(g: &mut Graph, mu: NodeId, sigma: NodeId, eps: NodeId) -> Result<NodeId> {
    let s = g.shape(eps).to_vec();
    if s.len() != 4 || g.shape(mu) != [s[0], s[1]] || g.shape(sigma) != [s[0], s[1]] {
        return Err(Error::contract(
            "combine_latent",
            format!("mu {:?}, sigma {:?}, eps {:?}", g.shape(mu), g.shape(sigma), s),
        ));
    }
    let mu_grid = g.tile(mu, s[2], s[3])?;
    let sigma_grid = g.tile(sigma, s[2], s[3])?;
    let scaled = g.mul(eps, sigma_grid)?;
    g.add(mu_grid, scaled)
}

/// Appends the decoder to `g`; returns the depth node `[n, 1, H, W]`.
pub fn decode_graph(g: &mut Graph, z: NodeId, skips: &SkipInput, cfg: &DecoderConfig) -> Result<NodeId> {
    cfg.validate()?;
    let zs = g.shape(z).to_vec();
    if zs.len() != 4 || zs[1] != cfg.latent_dim || (zs[2], zs[3]) != cfg.grid {
        return Err(Error::contract(
            "decode",
            format!(
                "latent grid {zs:?} does not match d={} grid {:?}",
                cfg.latent_dim, cfg.grid
            ),
        ));
    }
    let n = zs[0];
    if let SkipInput::Features(nodes) = skips {
        if nodes.len() != cfg.skip_shapes.len() {
            return Err(Error::contract(
                "decode",
                format!("expected {} skips, got {}", cfg.skip_shapes.len(), nodes.len()),
            ));
        }
        for (node, s) in nodes.iter().zip(&cfg.skip_shapes) {
            if g.shape(*node) != [n, s[0], s[1], s[2]] {
                return Err(Error::contract(
                    "decode",
                    format!(
                        "skip {:?} does not match expected {:?}",
                        g.shape(*node),
                        [n, s[0], s[1], s[2]]
                    ),
                ));
            }
        }
    }
    let specs = cfg.param_specs();
    let mut h = z;
    for i in 0..cfg.channels.len() {
        let s = cfg.stage_skip(i);
        let skip = match skips {
            SkipInput::Zero => g.zeros(&[n, s[0], s[1], s[2]]),
            SkipInput::Features(nodes) => nodes[nodes.len() - 1 - i],
        };
        let joined = g.concat(&[h, skip])?;
        let up = g.upsample2(joined)?;
        let w = g.param(&specs[2 * i].name, &specs[2 * i].shape)?;
        let b = g.param(&specs[2 * i + 1].name, &specs[2 * i + 1].shape)?;
        let conv = g.conv2d(up, w, b, 1)?;
        h = g.relu(conv);
    }
    let k = specs.len();
    let w = g.param(&specs[k - 2].name, &specs[k - 2].shape)?;
    let b = g.param(&specs[k - 1].name, &specs[k - 1].shape)?;
    let u = g.conv2d(h, w, b, 1)?;
    let sp = g.softplus(u);
    let depth = g.add_const(sp, cfg.depth_min);
    g.set_label(depth, "depth");
    Ok(depth)
}

/// Every cell of the `[d, h, w]` grid equals `z`.
pub fn tile_latent<T: Scalar>(z: &[T], h: usize, w: usize) -> Result<Array<T>> {
    if z.is_empty() || h == 0 || w == 0 {
        return Err(Error::contract("tile_latent", "empty latent or grid"));
    }
    let mut out = Vec::with_capacity(z.len() * h * w);
    for &v in z {
        out.extend(std::iter::repeat_n(v, h * w));
    }
    Array::new(vec![z.len(), h, w], out)
}

/// Per cell `mu + eps[:, i, j] · sigma`.
pub fn combine_latent<T: Scalar>(mu: &[T], sigma: &[T], eps: &Array<T>) -> Result<Array<T>> {
    let s = eps.shape();
    if s.len() != 3 || s[0] != mu.len() || sigma.len() != mu.len() {
        return Err(Error::contract(
            "combine_latent",
            format!("mu {}, sigma {}, eps {:?}", mu.len(), sigma.len(), s),
        ));
    }
    let cells = s[1] * s[2];
    let data = eps
        .data()
        .chunks(cells)
        .zip(mu.iter().zip(sigma))
        .flat_map(|(plane, (&m, &sd))| plane.iter().map(move |&e| m + e * sd))
        .collect();
    Array::new(s.to_vec(), data)
}

/// Decodes one `[d, h, w]` latent grid; `None` skips means zero-filled.
pub fn decode<T: Scalar>(
    z: &Array<T>,
    skips: Option<&SkipFeatures<T>>,
    params: &ParamSet<T>,
    cfg: &DecoderConfig,
) -> Result<Array<T>> {
    let mut g = Graph::new();
    let mut shape = vec![1];
    shape.extend_from_slice(z.shape());
    let zn = g.input("z", &shape)?;
    let mut feed = Feed::new();
    feed.insert("z".into(), z.clone().reshaped(shape)?);
    let input = match skips {
        None => SkipInput::Zero,
        Some(SkipFeatures(maps)) => {
            let mut nodes = Vec::new();
            for (i, m) in maps.iter().enumerate() {
                let mut s = vec![1];
                s.extend_from_slice(m.shape());
                let name = format!("skip{i}");
                nodes.push(g.input(&name, &s)?);
                feed.insert(name, m.clone().reshaped(s)?);
            }
            SkipInput::Features(nodes)
        }
    };
    let depth = decode_graph(&mut g, zn, &input, cfg)?;
    params.feed_into(&mut feed);
    let ev = g.evaluate(&feed)?;
    let (h, w) = cfg.output_size();
    ev.take(depth).reshaped(vec![h, w])
}

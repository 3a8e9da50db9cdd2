//! Procedural scale-ambiguous scenes.
//!
//! Each scene is a fronto-parallel wall with one to three upright rectangles
//! in front of it, seen through a pinhole camera. A global scale factor of 1
//! or 2 multiplies every length and depth, which leaves the rendered image
//! unchanged: only the caption ("small" or "large" room) reveals it.

mod dataset;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use dataset::Reader;
pub use dataset::{read_dataset, write_dataset, Dataset, DatasetHeader, Sample, DATASET_MAGIC, DATASET_VERSION};

use crate::error::{Error, Result};
use crate::textprior::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    /// Physical height in meters at scale 1.
    pub height: f64,
    pub width: f64,
    /// Gray level in (0, 1], unique per class.
    pub albedo: f64,
    /// Placement depth range in meters at scale 1.
    pub depth_range: [f64; 2],
}

impl ObjectClass {
    fn new(name: &str, height: f64, width: f64, albedo: f64, depth_range: [f64; 2]) -> Self {
        ObjectClass {
            name: name.to_string(),
            height,
            width,
            albedo,
            depth_range,
        }
    }
}

/// The six default furniture classes.
///
/// Placement ranges keep the larger projected side of every object at or
/// below 30 px with the default camera, so objects fit inside the frame.
pub fn default_catalog() -> Vec<ObjectClass> {
    vec![
        ObjectClass::new("chair", 1.0, 0.5, 0.30, [2.2, 4.5]),
        ObjectClass::new("bed", 0.6, 2.0, 0.42, [4.3, 5.75]),
        ObjectClass::new("table", 0.75, 1.5, 0.54, [3.2, 5.5]),
        ObjectClass::new("door", 2.0, 0.9, 0.66, [4.3, 5.75]),
        ObjectClass::new("lamp", 1.5, 0.3, 0.78, [3.2, 5.5]),
        ObjectClass::new("shelf", 1.8, 0.8, 0.90, [3.85, 5.75]),
    ]
}

pub fn validate_catalog(catalog: &[ObjectClass]) -> Result<()> {
    if catalog.is_empty() {
        return Err(Error::config("object catalog is empty"));
    }
    for (i, c) in catalog.iter().enumerate() {
        let ok = c.height > 0.0
            && c.width > 0.0
            && c.albedo > 0.0
            && c.albedo <= 1.0
            && c.depth_range[0] > 0.0
            && c.depth_range[0] < c.depth_range[1];
        if !ok {
            return Err(Error::config(format!("object class {:?} has invalid geometry", c.name)));
        }
        for other in &catalog[..i] {
            if other.name == c.name || other.albedo == c.albedo {
                return Err(Error::config(format!(
                    "classes {:?} and {:?} share a name or albedo",
                    other.name, c.name
                )));
            }
        }
    }
    Ok(())
}

/// Words every caption template draws on, in vocabulary id order after the specials.
pub const TEMPLATE_WORDS: [&str; 6] = ["a", "small", "large", "room", "with", "and"];

/// Template words followed by class names in catalog order.
pub fn catalog_vocabulary(catalog: &[ObjectClass]) -> Result<Vocabulary> {
    let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
    words.extend(catalog.iter().map(|c| c.name.as_str()));
    Vocabulary::new(&words)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Wall depth range in meters at scale 1.
    pub wall_depth: [f64; 2],
    /// Wall gray level at the near and far end of `wall_depth`.
    pub wall_shade: [f64; 2],
    pub min_objects: usize,
    pub max_objects: usize,
    /// Minimum gap between an object and the wall, meters at scale 1.
    pub wall_gap: f64,
    /// Object centers move over this fraction of the range that keeps the
    /// whole box inside the frame.
    pub center_spread: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 32,
            width: 32,
            channels: 1,
            focal: 64.0,
            wall_depth: [3.0, 6.0],
            wall_shade: [0.05, 0.20],
            min_objects: 1,
            max_objects: 3,
            wall_gap: 0.25,
            center_spread: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.height > 0
            && self.width > 0
            && self.channels > 0
            && self.height <= u16::MAX as usize
            && self.width <= u16::MAX as usize
            && self.channels <= u16::MAX as usize
            && self.focal > 0.0
            && self.wall_depth[0] > 0.0
            && self.wall_depth[0] <= self.wall_depth[1]
            && self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.wall_gap >= 0.0
            && (0.0..=1.0).contains(&self.center_spread)
            && self.wall_shade.iter().all(|s| (0.0..=1.0).contains(s));
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid generator configuration {self:?}")))
        }
    }

    /// Wall gray level encoding the unscaled wall depth.
    pub fn wall_albedo(&self, wall_depth: f64) -> f64 {
        let [near, far] = self.wall_depth;
        let t = if far > near {
            (wall_depth - near) / (far - near)
        } else {
            0.0
        };
        self.wall_shade[0] + t.clamp(0.0, 1.0) * (self.wall_shade[1] - self.wall_shade[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub class: usize,
    /// Horizontal and vertical center offset from the optical axis, meters at scale 1.
    pub offset: [f64; 2],
    /// Depth in meters at scale 1.
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Global scale factor, 1 or 2.
    pub scale: u8,
    /// Wall depth in meters at scale 1.
    pub wall_depth: f64,
    pub objects: Vec<PlacedObject>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn with_scale(&self, scale: u8) -> Self {
        SceneSpec { scale, ..self.clone() }
    }
}

/// Separate stream for the scale factor so the layout never depends on it.
const SCALE_STREAM: u64 = 0x5CA1_E5EE_D000_0001;

pub fn sample_scene(seed: u64, catalog: &[ObjectClass], cfg: &GeneratorConfig) -> Result<SceneSpec> {
    validate_catalog(catalog)?;
    cfg.validate()?;
    let scale = if ChaCha8Rng::seed_from_u64(seed ^ SCALE_STREAM).random_bool(0.5) {
        2
    } else {
        1
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = cfg.wall_depth;
    let wall_depth = if hi > lo { rng.random_range(lo..hi) } else { lo };

    let mut feasible: Vec<usize> = (0..catalog.len())
        .filter(|&i| catalog[i].depth_range[0] < wall_depth - cfg.wall_gap)
        .collect();
    if feasible.is_empty() {
        return Err(Error::config(format!(
            "no object class fits in front of a wall at {wall_depth:.3} m"
        )));
    }
    feasible.shuffle(&mut rng);
    let wanted = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut chosen: Vec<usize> = feasible.into_iter().take(wanted).collect();
    chosen.sort_unstable();

    let objects = chosen
        .into_iter()
        .map(|class| {
            let [z_lo, z_hi] = catalog[class].depth_range;
            let depth = rng.random_range(z_lo..z_hi.min(wall_depth - cfg.wall_gap));
            let c = &catalog[class];
            let margin = |size: f64, extent: usize| {
                let free = extent as i64 / 2 - half_extent(size, depth, cfg.focal);
                (free.max(0) as f64 * cfg.center_spread).floor()
            };
            let (mx, my) = (margin(c.width, cfg.width), margin(c.height, cfg.height));
            let px = if mx > 0.0 {
                rng.random_range(-mx..=mx).round()
            } else {
                0.0
            };
            let py = if my > 0.0 {
                rng.random_range(-my..=my).round()
            } else {
                0.0
            };
            PlacedObject {
                class,
                offset: [px * depth / cfg.focal, py * depth / cfg.focal],
                depth,
            }
        })
        .collect();
    Ok(SceneSpec {
        scale,
        wall_depth,
        objects,
        seed,
    })
}

/// Rendered grayscale image (`channels × H × W`) and metric depth (`H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub image: Vec<f32>,
    pub depth: Vec<f32>,
}

/// Half-extent in pixels of a length `size` at distance `depth`.
///
/// Scaling both by two scales numerator and denominator by exact powers of
/// two, so the result is bit-identical across scale factors.
fn half_extent(size: f64, depth: f64, focal: f64) -> i64 {
    (size * focal / (2.0 * depth)).round() as i64
}

pub fn render(scene: &SceneSpec, catalog: &[ObjectClass], cfg: &GeneratorConfig) -> Result<Rendering> {
    cfg.validate()?;
    if scene.scale != 1 && scene.scale != 2 {
        return Err(Error::contract(
            "render",
            format!("scale factor {} not in {{1, 2}}", scene.scale),
        ));
    }
    let k = scene.scale as f64;
    let wall = k * scene.wall_depth;
    if !(wall > 0.0) {
        return Err(Error::contract("render", "wall depth must be positive"));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut shade = vec![cfg.wall_albedo(scene.wall_depth) as f32; h * w];
    let mut depth = vec![wall as f32; h * w];

    let mut order: Vec<&PlacedObject> = scene.objects.iter().collect();
    // Far to near; the nearest surface is painted last and wins.
    order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for obj in order {
        let class = catalog
            .get(obj.class)
            .ok_or_else(|| Error::contract("render", format!("unknown object class {}", obj.class)))?;
        let z = k * obj.depth;
        if !(z > 0.0) {
            return Err(Error::contract("render", format!("object depth {z} is not positive")));
        }
        let cx = (w as f64 / 2.0 + k * obj.offset[0] * cfg.focal / z).round() as i64;
        let cy = (h as f64 / 2.0 + k * obj.offset[1] * cfg.focal / z).round() as i64;
        let hh = half_extent(k * class.height, z, cfg.focal);
        let hw = half_extent(k * class.width, z, cfg.focal);
        let rows = (cy - hh).max(0)..(cy + hh).min(h as i64);
        let cols = (cx - hw).max(0)..(cx + hw).min(w as i64);
        for r in rows {
            for c in cols.clone() {
                let i = r as usize * w + c as usize;
                shade[i] = class.albedo as f32;
                depth[i] = z as f32;
            }
        }
    }
    let mut image = Vec::with_capacity(cfg.channels * h * w);
    for _ in 0..cfg.channels {
        image.extend_from_slice(&shade);
    }
    Ok(Rendering { image, depth })
}

/// "a small|large room with a X and a Y ...", objects in catalog order.
pub fn caption_text(scene: &SceneSpec, catalog: &[ObjectClass]) -> Result<String> {
    let mut classes: Vec<usize> = scene.objects.iter().map(|o| o.class).collect();
    classes.sort_unstable();
    let size = if scene.scale == 1 { "small" } else { "large" };
    let mut words = vec!["a", size, "room"];
    for (i, &c) in classes.iter().enumerate() {
        let name = catalog
            .get(c)
            .ok_or_else(|| Error::Vocabulary(format!("object class {c} not in catalog")))?;
        words.push(if i == 0 { "with" } else { "and" });
        words.push("a");
        words.push(&name.name);
    }
    Ok(words.join(" "))
}

pub fn caption(scene: &SceneSpec, catalog: &[ObjectClass], vocab: &Vocabulary) -> Result<Vec<u16>> {
    let text = caption_text(scene, catalog)?;
    text.split(' ')
        .map(|w| {
            vocab
                .id(w)
                .ok_or_else(|| Error::Vocabulary(format!("caption word {w:?} missing from vocabulary")))
        })
        .collect()
}

/// Per-sample scene seed derived from a dataset seed.
pub fn scene_seed(dataset_seed: u64, index: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_sample(
    seed: u64,
    catalog: &[ObjectClass],
    cfg: &GeneratorConfig,
    vocab: &Vocabulary,
) -> Result<(SceneSpec, Sample)> {
    let scene = sample_scene(seed, catalog, cfg)?;
    let Rendering { image, depth } = render(&scene, catalog, cfg)?;
    let caption = caption(&scene, catalog, vocab)?;
    let mask = vec![true; depth.len()];
    Ok((
        scene,
        Sample {
            image,
            caption,
            depth,
            mask,
        },
    ))
}

/// `count` samples, a pure function of `(seed, catalog, cfg)`.
pub fn generate_dataset(seed: u64, count: usize, catalog: &[ObjectClass], cfg: &GeneratorConfig) -> Result<Dataset> {
    let vocab = catalog_vocabulary(catalog)?;
    let samples = (0..count as u64)
        .map(|i| generate_sample(scene_seed(seed, i), catalog, cfg, &vocab).map(|(_, s)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            channels: cfg.channels,
            height: cfg.height,
            width: cfg.width,
            vocabulary: vocab,
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig::default()
    }

    #[test]
    fn sampling_is_deterministic() {
        let cat = default_catalog();
        assert_eq!(
            sample_scene(0, &cat, &cfg()).unwrap(),
            sample_scene(0, &cat, &cfg()).unwrap()
        );
    }

    #[test]
    fn empty_catalog_is_config_error() {
        assert!(matches!(sample_scene(0, &[], &cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn single_object_config() {
        let cat = default_catalog();
        let c = GeneratorConfig {
            max_objects: 1,
            ..cfg()
        };
        for seed in 0..200 {
            assert_eq!(sample_scene(seed, &cat, &c).unwrap().objects.len(), 1);
        }
    }

    #[test]
    fn scale_frequency_is_balanced() {
        let cat = default_catalog();
        let large = (0..10_000u64)
            .filter(|&i| sample_scene(scene_seed(1, i), &cat, &cfg()).unwrap().scale == 2)
            .count();
        let freq = large as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&freq), "{freq}");
    }

    #[test]
    fn projected_height_follows_pinhole() {
        // 0.5 m at 2 m with f = 64 px spans 16 px.
        assert_eq!(2 * half_extent(0.5, 2.0, 64.0), 16);
        let cat = vec![ObjectClass::new("post", 0.5, 0.25, 0.5, [1.0, 2.5])];
        let scene = SceneSpec {
            scale: 1,
            wall_depth: 4.0,
            objects: vec![PlacedObject {
                class: 0,
                offset: [0.0, 0.0],
                depth: 2.0,
            }],
            seed: 0,
        };
        let r = render(&scene, &cat, &cfg()).unwrap();
        let rows = (0..32).filter(|&y| r.depth[y * 32 + 16] == 2.0).count();
        assert_eq!(rows, 16);
    }

    #[test]
    fn empty_scene_is_uniform_wall() {
        let scene = SceneSpec {
            scale: 2,
            wall_depth: 4.5,
            objects: vec![],
            seed: 0,
        };
        let r = render(&scene, &default_catalog(), &cfg()).unwrap();
        let shade = cfg().wall_albedo(4.5) as f32;
        assert!(r.image.iter().all(|&v| v == shade));
        assert!(r.depth.iter().all(|&d| d == 9.0));
    }

    #[test]
    fn nearest_object_wins() {
        let cat = default_catalog();
        let scene = SceneSpec {
            scale: 1,
            wall_depth: 5.0,
            objects: vec![
                PlacedObject {
                    class: 2,
                    offset: [0.0, 0.0],
                    depth: 1.5,
                },
                PlacedObject {
                    class: 0,
                    offset: [0.0, 0.0],
                    depth: 3.0,
                },
            ],
            seed: 0,
        };
        let r = render(&scene, &cat, &cfg()).unwrap();
        let center = 16 * 32 + 16;
        assert_eq!(r.depth[center], 1.5);
        assert_eq!(r.image[center], 0.54);
        assert_eq!(cat[2].name, "table");
    }

    #[test]
    fn non_positive_depth_is_rejected() {
        let scene = SceneSpec {
            scale: 1,
            wall_depth: 4.0,
            objects: vec![PlacedObject {
                class: 0,
                offset: [0.0, 0.0],
                depth: 0.0,
            }],
            seed: 0,
        };
        assert!(render(&scene, &default_catalog(), &cfg()).is_err());
    }

    #[test]
    fn caption_templates() {
        let cat = default_catalog();
        let v = catalog_vocabulary(&cat).unwrap();
        let chair = SceneSpec {
            scale: 1,
            wall_depth: 4.0,
            objects: vec![PlacedObject {
                class: 0,
                offset: [0.0, 0.0],
                depth: 2.5,
            }],
            seed: 0,
        };
        assert_eq!(
            v.detokenize(&caption(&chair, &cat, &v).unwrap()),
            "a small room with a chair"
        );
        let bed_table = SceneSpec {
            scale: 2,
            wall_depth: 4.0,
            objects: vec![
                PlacedObject {
                    class: 2,
                    offset: [0.0, 0.0],
                    depth: 2.0,
                },
                PlacedObject {
                    class: 1,
                    offset: [0.1, 0.0],
                    depth: 2.2,
                },
            ],
            seed: 0,
        };
        let ids = caption(&bed_table, &cat, &v).unwrap();
        assert_eq!(v.detokenize(&ids), "a large room with a bed and a table");
        assert_eq!(ids, caption(&bed_table, &cat, &v).unwrap());
    }

    #[test]
    fn caption_with_unknown_class_fails() {
        let cat = default_catalog();
        let v = catalog_vocabulary(&cat).unwrap();
        let scene = SceneSpec {
            scale: 1,
            wall_depth: 4.0,
            objects: vec![PlacedObject {
                class: 17,
                offset: [0.0, 0.0],
                depth: 2.0,
            }],
            seed: 0,
        };
        assert!(matches!(caption(&scene, &cat, &v), Err(Error::Vocabulary(_))));
    }
}

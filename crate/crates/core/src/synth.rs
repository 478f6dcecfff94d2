//! Synthetic datasets, label corruption and input preprocessing.
//!
//! Randomness comes from ChaCha8 ([`SeededRng`]), a counter-based generator
//! whose output stream is fixed by its seed on every platform. Generators
//! that produce many samples derive one seed per sample with
//! [`derive_seed`], so shards can be produced independently.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ClassMap, ImageGrid, RegionMap, Shape, SoftmaxField};

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

/// Softmax of uniform logits in `[-3, 3]`.
pub fn random_softmax_field(rng: &mut impl Rng, height: usize, width: usize, channels: usize) -> SoftmaxField {
    let mut values = Vec::with_capacity(height * width * channels);
    let mut logits = vec![0.0; channels];
    for _ in 0..height * width {
        logits.iter_mut().for_each(|l| *l = rng.random_range(-3.0..3.0));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        values.extend(exps.iter().map(|e| e / sum));
    }
    SoftmaxField::new(Shape::new(height, width, channels), values).expect("softmax is on the simplex")
}

/// A random partition with exactly `regions` nonempty regions.
pub fn random_region_map(rng: &mut impl Rng, height: usize, width: usize, regions: usize) -> RegionMap {
    let pixels = height * width;
    assert!(regions >= 1 && regions <= pixels, "need 1 <= regions <= pixels");
    let mut order: Vec<usize> = (0..pixels).collect();
    order.shuffle(rng);
    let mut ids = vec![0u32; pixels];
    for (k, &p) in order.iter().enumerate() {
        ids[p] = if k < regions {
            k as u32
        } else {
            rng.random_range(0..regions as u32)
        };
    }
    RegionMap::new(height, width, ids).expect("every id seeded")
}

/// A labelled point of the two-Gaussian imbalance toy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPoint {
    pub x: [f64; 2],
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub train: Vec<ToyPoint>,
    pub test: Vec<ToyPoint>,
}

pub const TOY_CENTERS: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

fn toy_set(rng: &mut SeededRng, n1: usize, n2: usize, var: f64) -> Vec<ToyPoint> {
    let noise = normal(var.sqrt());
    let mut points = Vec::with_capacity(n1 + n2);
    for (class_id, count) in [(0u32, n1), (1, n2)] {
        let c = TOY_CENTERS[class_id as usize];
        for _ in 0..count {
            points.push(ToyPoint {
                x: [c[0] + noise.sample(rng), c[1] + noise.sample(rng)],
                class_id,
            });
        }
    }
    points
}

/// Independent train and test sets of `n1` points around `(1, 0)` (class 0)
/// and `n2` around `(0, 1)` (class 1). `var` is the per-coordinate variance.
pub fn gen_toy_gaussians(n1: usize, n2: usize, var: f64, seed: u64) -> Result<ToyDataset> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidArgument(
            "both toy classes need at least one point".into(),
        ));
    }
    if !(var >= 0.0 && var.is_finite()) {
        return Err(Error::InvalidArgument(format!("variance {var}")));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let train = toy_set(&mut rng, n1, n2, var);
    let test = toy_set(&mut rng, n1, n2, var);
    Ok(ToyDataset { train, test })
}

/// Lays points out as a `1 × P` two-channel image whose regions are the
/// classes, so the image losses apply unchanged.
pub fn toy_as_grid(points: &[ToyPoint]) -> Result<(ImageGrid, RegionMap, ClassMap)> {
    let p = points.len();
    let values = points.iter().flat_map(|pt| pt.x).collect();
    let image = ImageGrid::new(Shape::new(1, p, 2), values)?;
    let classes: Vec<u32> = points.iter().map(|pt| pt.class_id).collect();
    let regions = RegionMap::new(1, p, classes.clone())?;
    let labels = ClassMap::new(1, p, classes)?;
    Ok((image, regions, labels))
}

/// One generated image with its partition and region classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: ImageGrid,
    pub regions: RegionMap,
    /// Class of every region, indexed by region id.
    pub class_labels: Vec<u32>,
    /// Set when the class labels are inverted relative to generation.
    pub low_fidelity: bool,
    pub seed: u64,
}

impl SynthSample {
    pub fn class_map(&self) -> Result<ClassMap> {
        ClassMap::from_regions(&self.regions, &self.class_labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Background plus one or two shapes: 2 or 3.
    pub regions_per_image: usize,
    pub noise_std: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            count: 20,
            height: 64,
            width: 64,
            regions_per_image: 2,
            noise_std: 0.1,
        }
    }
}

/// Shapes smaller than this are rejected and redrawn.
pub const MIN_REGION_PIXELS: usize = 16;
const COLOR_CHANNELS: usize = 3;
const MIN_COLOR_DISTANCE: f64 = 0.2;

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidArgument(format!(
                "shape images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(2..=3).contains(&self.regions_per_image) {
            return Err(Error::InvalidArgument(format!(
                "regions_per_image must be 2 or 3, got {}",
                self.regions_per_image
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std {}", self.noise_std)));
        }
        Ok(())
    }
}

fn paint_shape(rng: &mut SeededRng, ids: &mut [u32], h: usize, w: usize, id: u32) {
    let (hf, wf) = (h as f64, w as f64);
    let cy = rng.random_range(0.2 * hf..0.8 * hf);
    let cx = rng.random_range(0.2 * wf..0.8 * wf);
    let ry = rng.random_range(hf / 8.0..hf / 4.0);
    let rx = rng.random_range(wf / 8.0..wf / 4.0);
    let ellipse = rng.random_bool(0.5);
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let inside = if ellipse {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            if inside {
                ids[y * w + x] = id;
            }
        }
    }
}

fn draw_color(rng: &mut SeededRng, range: std::ops::Range<f64>, others: &[[f64; 3]]) -> [f64; 3] {
    loop {
        let c = [
            rng.random_range(range.clone()),
            rng.random_range(range.clone()),
            rng.random_range(range.clone()),
        ];
        let far = others.iter().all(|o| {
            let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= MIN_COLOR_DISTANCE
        });
        if far {
            return c;
        }
    }
}

fn gen_shape_sample(cfg: &ShapesConfig, seed: u64) -> SynthSample {
    let mut rng = rng_from_seed(seed);
    let (h, w) = (cfg.height, cfg.width);
    let ids = loop {
        let mut ids = vec![0u32; h * w];
        for id in 1..cfg.regions_per_image as u32 {
            paint_shape(&mut rng, &mut ids, h, w, id);
        }
        let mut sizes = vec![0usize; cfg.regions_per_image];
        for &id in &ids {
            sizes[id as usize] += 1;
        }
        if sizes.iter().all(|&s| s >= MIN_REGION_PIXELS) {
            break ids;
        }
    };

    // Background colors are dark and foreground colors bright, so appearance
    // alone tells figure from ground.
    let mut colors = vec![draw_color(&mut rng, 0.0..0.35, &[])];
    for _ in 1..cfg.regions_per_image {
        let c = draw_color(&mut rng, 0.65..1.0, &colors[1..]);
        colors.push(c);
    }

    let noise = normal(cfg.noise_std);
    let mut values = Vec::with_capacity(h * w * COLOR_CHANNELS);
    for &id in &ids {
        for c in colors[id as usize] {
            values.push(c + noise.sample(&mut rng));
        }
    }
    let mut class_labels = vec![1u32; cfg.regions_per_image];
    class_labels[0] = 0;
    SynthSample {
        image: ImageGrid::new(Shape::new(h, w, COLOR_CHANNELS), values).expect("finite"),
        regions: RegionMap::new(h, w, ids).expect("all regions nonempty"),
        class_labels,
        low_fidelity: false,
        seed,
    }
}

/// Images of one or two random ellipses/rectangles on a background. The
/// background is class 0 and every shape class 1. Sample `i` depends only on
/// `derive_seed(seed, i)`.
pub fn gen_shapes(cfg: &ShapesConfig, seed: u64) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    Ok((0..cfg.count)
        .map(|i| gen_shape_sample(cfg, derive_seed(seed, i as u64)))
        .collect())
}

/// Inverts the binary class labels of exactly `round(fraction * len)`
/// uniformly chosen samples. Region maps are untouched.
pub fn flip_labels(samples: &[SynthSample], fraction: f64, seed: u64) -> Result<Vec<SynthSample>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "flip fraction must lie in [0, 1], got {fraction}"
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.class_labels.iter().any(|&l| l > 1)) {
        return Err(Error::InvalidLabels(format!(
            "sample {} has non-binary class labels",
            s.seed
        )));
    }
    let count = (fraction * samples.len() as f64).round() as usize;
    let mut rng = rng_from_seed(seed);
    let mut out = samples.to_vec();
    for i in index::sample(&mut rng, samples.len(), count) {
        let s = &mut out[i];
        s.class_labels.iter_mut().for_each(|l| *l = 1 - *l);
        s.low_fidelity = !s.low_fidelity;
    }
    Ok(out)
}

/// Per-image standardization to zero mean and unit variance over all
/// values, followed by division by 255.
pub fn standardize(image: &ImageGrid) -> Result<ImageGrid> {
    let v = image.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::InvalidArgument(
            "cannot standardize a zero-variance image".into(),
        ));
    }
    let std = var.sqrt();
    let values = v.iter().map(|x| (x - mean) / std / 255.0).collect();
    ImageGrid::new(image.shape(), values)
}

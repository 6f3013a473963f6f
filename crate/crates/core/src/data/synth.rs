//! Seeded source/target generators.
//!
//! Every sample draws from its own RNG derived from `(corpus seed, domain,
//! sample index)`, so samples are independent of generation order.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::tensor::Tensor;

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
// color jitter and noise use a separate stream from the layout
const COLOR_STREAM_OFFSET: u64 = 100;

/// Image channels produced by the segmentation generator.
pub const IMAGE_CHANNELS: usize = 3;

/// splitmix64 finalizer over the combined inputs.
pub(crate) fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Features go through `f32` at generation so UDS1 files round-trip exactly.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source: Dataset,
    /// Training labels abstained; true labels held out for evaluation.
    pub target: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationDomainSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub means: Vec<[f64; 2]>,
    /// Isotropic source variance.
    pub cov_scale: f64,
    #[serde(default)]
    pub target_shift: [f64; 2],
    /// Extra variance for the target domain.
    #[serde(default)]
    pub target_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Per-class Gaussian parameters of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub means: Vec<[f64; 2]>,
    pub variance: f64,
}

impl ClassificationDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.means.len() != self.num_classes {
            return Err(Error::config(format!(
                "means: {} centers for {} classes",
                self.means.len(),
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be at least 1"));
        }
        if !(self.cov_scale > 0.0) {
            return Err(Error::config("cov_scale must be positive"));
        }
        if !(self.target_noise >= 0.0) {
            return Err(Error::config("target_noise must be nonnegative"));
        }
        Ok(())
    }

    pub fn source_params(&self) -> GaussianParams {
        GaussianParams {
            means: self.means.clone(),
            variance: self.cov_scale,
        }
    }

    pub fn target_params(&self) -> GaussianParams {
        GaussianParams {
            means: self
                .means
                .iter()
                .map(|m| [m[0] + self.target_shift[0], m[1] + self.target_shift[1]])
                .collect(),
            variance: self.cov_scale + self.target_noise,
        }
    }

    fn sample_domain(&self, params: &GaussianParams, stream: u64) -> Result<Dataset> {
        let total = self.num_classes * self.samples_per_class;
        let normal = Normal::new(0.0, params.variance.sqrt())
            .map_err(|e| Error::Generation(e.to_string()))?;
        let mut data = Vec::with_capacity(total * 2);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let class = i / self.samples_per_class;
            let mut rng = rng_for(self.seed, stream, i as u64);
            let [mx, my] = params.means[class];
            data.push(quantize(mx + normal.sample(&mut rng)));
            data.push(quantize(my + normal.sample(&mut rng)));
            labels.push(class);
        }
        Dataset::new(
            DatasetKind::Classification,
            self.num_classes,
            Tensor::new(vec![total, 2, 1, 1], data)?,
            LabelMap::from_classes(&labels),
        )
    }
}

/// 2D Gaussian blobs; the target moves every mean by `target_shift` and
/// inflates the variance by `target_noise`.
pub fn gen_classification_pair(spec: &ClassificationDomainSpec) -> Result<DomainPair> {
    spec.validate()?;
    let source = spec.sample_domain(&spec.source_params(), SOURCE_STREAM)?;
    let target = spec
        .sample_domain(&spec.target_params(), TARGET_STREAM)?
        .hold_out_labels();
    Ok(DomainPair { source, target })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceShift {
    #[serde(default)]
    pub brightness_delta: f64,
    /// Multiplicative gain per channel; all ones means no change.
    #[serde(default = "unit_gain")]
    pub channel_gain: [f64; IMAGE_CHANNELS],
    #[serde(default)]
    pub noise_sigma: f64,
}

fn unit_gain() -> [f64; IMAGE_CHANNELS] {
    [1.0; IMAGE_CHANNELS]
}

impl AppearanceShift {
    pub fn identity() -> Self {
        Self {
            brightness_delta: 0.0,
            channel_gain: unit_gain(),
            noise_sigma: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self == &Self::identity()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationDomainSpec {
    /// `[H, W]`, each in 3..=64.
    pub image_size: [usize; 2],
    pub num_classes: usize,
    /// Relative odds of each class being chosen for a painted shape.
    pub class_frequency_weights: Vec<f64>,
    pub shapes_per_image: usize,
    #[serde(default = "AppearanceShift::identity")]
    pub appearance_shift: AppearanceShift,
    pub num_images: usize,
    #[serde(default)]
    pub seed: u64,
    /// Per-pixel color jitter applied in both domains.
    #[serde(default)]
    pub texture_sigma: f64,
    /// Base RGB color per class; defaults to a fixed palette.
    #[serde(default)]
    pub palette: Option<Vec<[f64; IMAGE_CHANNELS]>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
    },
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub class: usize,
    pub kind: ShapeKind,
}

impl ShapeKind {
    fn covers(&self, x: usize, y: usize) -> bool {
        match *self {
            ShapeKind::Rect { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            ShapeKind::Disc { cx, cy, r } => {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

/// Label layout of one image, shapes in painting order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub shapes: Vec<Shape>,
}

const BASE_PALETTE: [[f64; 3]; 8] = [
    [0.35, 0.35, 0.35],
    [0.75, 0.30, 0.25],
    [0.25, 0.65, 0.35],
    [0.30, 0.35, 0.75],
    [0.75, 0.70, 0.25],
    [0.65, 0.30, 0.70],
    [0.25, 0.70, 0.70],
    [0.85, 0.85, 0.85],
];

impl SegmentationDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if !(3..=64).contains(&h) || !(3..=64).contains(&w) {
            return Err(Error::config(format!("image_size {h}x{w} outside 3..=64")));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.class_frequency_weights.len() != self.num_classes {
            return Err(Error::config(format!(
                "class_frequency_weights: {} weights for {} classes",
                self.class_frequency_weights.len(),
                self.num_classes
            )));
        }
        if self
            .class_frequency_weights
            .iter()
            .any(|w| !(*w > 0.0 && w.is_finite()))
        {
            return Err(Error::config("class_frequency_weights must be positive"));
        }
        if let Some(p) = &self.palette {
            if p.len() != self.num_classes {
                return Err(Error::config("palette needs one color per class"));
            }
        }
        if !(self.texture_sigma >= 0.0 && self.appearance_shift.noise_sigma >= 0.0) {
            return Err(Error::config("noise levels must be nonnegative"));
        }
        Ok(())
    }

    pub fn color(&self, class: usize) -> [f64; 3] {
        if let Some(p) = &self.palette {
            return p[class];
        }
        if class < BASE_PALETTE.len() {
            return BASE_PALETTE[class];
        }
        let t = class as f64 * 0.618_033_988_75;
        let f = |k: f64| 0.2 + 0.6 * (t + k).fract();
        [f(0.0), f(0.33), f(0.67)]
    }
}

/// Draws the shape layout for one image. Pixels start as class 0 and each
/// shape overwrites the pixels it covers.
pub fn render_scene(spec: &SegmentationDomainSpec, rng: &mut impl Rng) -> Result<Scene> {
    let [h, w] = spec.image_size;
    if spec.shapes_per_image > h * w {
        return Err(Error::Generation(format!(
            "{} shapes do not fit in a {h}x{w} image",
            spec.shapes_per_image
        )));
    }
    let classes = WeightedIndex::new(&spec.class_frequency_weights)
        .map_err(|e| Error::Generation(e.to_string()))?;
    let mut labels = vec![0; h * w];
    let mut shapes = Vec::with_capacity(spec.shapes_per_image);
    for _ in 0..spec.shapes_per_image {
        let class = classes.sample(rng);
        let kind = if rng.random_bool(0.5) {
            let sw = rng.random_range(2..=(w / 3).max(2)).min(w);
            let sh = rng.random_range(2..=(h / 3).max(2)).min(h);
            ShapeKind::Rect {
                x0: rng.random_range(0..=w - sw),
                y0: rng.random_range(0..=h - sh),
                w: sw,
                h: sh,
            }
        } else {
            let rmax = (h.min(w) as f64 / 6.0).max(1.5);
            ShapeKind::Disc {
                cx: rng.random_range(0.0..w as f64),
                cy: rng.random_range(0.0..h as f64),
                r: rng.random_range(1.0..=rmax),
            }
        };
        for y in 0..h {
            for x in 0..w {
                if kind.covers(x, y) {
                    labels[y * w + x] = class;
                }
            }
        }
        shapes.push(Shape { class, kind });
    }
    Ok(Scene {
        height: h,
        width: w,
        labels,
        shapes,
    })
}

/// Channel-major pixel values for a scene: class color plus texture jitter,
/// then `gain * v + brightness + noise` when a shift is given.
pub fn paint_scene(
    spec: &SegmentationDomainSpec,
    scene: &Scene,
    shift: Option<&AppearanceShift>,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let hw = scene.height * scene.width;
    let mut out = vec![0.0; IMAGE_CHANNELS * hw];
    let texture =
        Normal::new(0.0, spec.texture_sigma).map_err(|e| Error::Generation(e.to_string()))?;
    let noise = Normal::new(0.0, shift.map_or(0.0, |s| s.noise_sigma))
        .map_err(|e| Error::Generation(e.to_string()))?;
    for (p, &class) in scene.labels.iter().enumerate() {
        let color = spec.color(class);
        for ch in 0..IMAGE_CHANNELS {
            let mut v = color[ch];
            if spec.texture_sigma > 0.0 {
                v += texture.sample(rng);
            }
            if let Some(s) = shift {
                v = s.channel_gain[ch] * v + s.brightness_delta;
                if s.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
            }
            out[ch * hw + p] = quantize(v);
        }
    }
    Ok(out)
}

impl SegmentationDomainSpec {
    fn sample_domain(&self, stream: u64, shift: Option<&AppearanceShift>) -> Result<Dataset> {
        let [h, w] = self.image_size;
        let images: Vec<(Vec<f64>, Vec<usize>)> = (0..self.num_images)
            .into_par_iter()
            .map(|i| {
                let mut layout = rng_for(self.seed, stream, i as u64);
                let scene = render_scene(self, &mut layout)?;
                let mut colors = rng_for(self.seed, stream + COLOR_STREAM_OFFSET, i as u64);
                let pixels = paint_scene(self, &scene, shift, &mut colors)?;
                Ok((pixels, scene.labels))
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(self.num_images * IMAGE_CHANNELS * h * w);
        let mut labels = Vec::with_capacity(self.num_images * h * w);
        for (pixels, l) in images {
            data.extend(pixels);
            labels.extend(l);
        }
        Dataset::new(
            DatasetKind::Segmentation,
            self.num_classes,
            Tensor::new(vec![self.num_images, IMAGE_CHANNELS, h, w], data)?,
            LabelMap::from_classes(&labels),
        )
    }
}

/// Shapes-on-background scenes; target images get the appearance shift and
/// pixel noise, and their labels are held out.
pub fn gen_segmentation_pair(spec: &SegmentationDomainSpec) -> Result<DomainPair> {
    spec.validate()?;
    let source = spec.sample_domain(SOURCE_STREAM, None)?;
    let target = spec
        .sample_domain(TARGET_STREAM, Some(&spec.appearance_shift))?
        .hold_out_labels();
    Ok(DomainPair { source, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn blobs() -> ClassificationDomainSpec {
        ClassificationDomainSpec {
            num_classes: 3,
            samples_per_class: 20,
            means: vec![[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]],
            cov_scale: 0.5,
            target_shift: [1.0, 0.5],
            target_noise: 0.2,
            seed: 11,
        }
    }

    fn scenes() -> SegmentationDomainSpec {
        SegmentationDomainSpec {
            image_size: [24, 24],
            num_classes: 3,
            class_frequency_weights: vec![8.0, 1.0, 1.0],
            shapes_per_image: 8,
            appearance_shift: AppearanceShift {
                brightness_delta: 0.1,
                channel_gain: [1.1, 0.9, 1.0],
                noise_sigma: 0.05,
            },
            num_images: 100,
            seed: 5,
            texture_sigma: 0.0,
            palette: None,
        }
    }

    #[test]
    fn classification_identity_shift() {
        let mut s = blobs();
        s.target_shift = [0.0, 0.0];
        s.target_noise = 0.0;
        assert_eq!(s.source_params(), s.target_params());
    }

    #[test]
    fn classification_counts_and_determinism() {
        let a = gen_classification_pair(&blobs()).unwrap();
        let b = gen_classification_pair(&blobs()).unwrap();
        assert_eq!(a, b);
        let mut counts = [0; 3];
        for l in a.source.labels().labels() {
            counts[l.unwrap()] += 1;
        }
        assert_eq!(counts, [20; 3]);
        assert_eq!(a.target.labels().assigned(), 0);
        assert_eq!(a.target.eval_labels().assigned(), 60);
        let mut other = blobs();
        other.seed = 12;
        assert_ne!(gen_classification_pair(&other).unwrap().source, a.source);
    }

    #[test]
    fn classification_target_moves() {
        let mut s = blobs();
        s.samples_per_class = 400;
        s.target_shift = [2.0, -1.0];
        let pair = gen_classification_pair(&s).unwrap();
        let mean_x = |d: &Dataset| {
            let f = d.features().data();
            f.chunks(2).map(|p| p[0]).sum::<f64>() / d.num_samples() as f64
        };
        let shift = mean_x(&pair.target) - mean_x(&pair.source);
        assert!((shift - 2.0).abs() < 0.15, "{shift}");
    }

    #[test]
    fn segmentation_determinism_and_shape() {
        let a = gen_segmentation_pair(&scenes()).unwrap();
        assert_eq!(a, gen_segmentation_pair(&scenes()).unwrap());
        assert_eq!(a.source.features().shape(), &[100, 3, 24, 24]);
        assert_eq!(a.target.labels().assigned(), 0);
    }

    #[test]
    fn zero_shift_is_identity_paint() {
        let spec = scenes();
        let scene = render_scene(&spec, &mut rng_for(1, 2, 3)).unwrap();
        let plain = paint_scene(&spec, &scene, None, &mut rng_for(0, 0, 0)).unwrap();
        let shifted = paint_scene(
            &spec,
            &scene,
            Some(&AppearanceShift::identity()),
            &mut rng_for(0, 0, 0),
        )
        .unwrap();
        assert_eq!(plain, shifted);
    }

    #[test]
    fn imbalance_shows_in_pixel_shares() {
        let pair = gen_segmentation_pair(&scenes()).unwrap();
        let mut counts = [0usize; 3];
        for l in pair.source.labels().labels() {
            counts[l.unwrap()] += 1;
        }
        assert!(counts[1] < counts[0] && counts[2] < counts[0], "{counts:?}");
    }

    #[test]
    fn shape_classes_follow_weights() {
        let spec = scenes();
        let mut rng = rng_for(99, 0, 0);
        let mut observed = [0.0f64; 3];
        let mut drawn = 0;
        while drawn < 1000 {
            for s in render_scene(&spec, &mut rng).unwrap().shapes {
                if drawn < 1000 {
                    observed[s.class] += 1.0;
                    drawn += 1;
                }
            }
        }
        let total: f64 = spec.class_frequency_weights.iter().sum();
        let stat: f64 = observed
            .iter()
            .zip(&spec.class_frequency_weights)
            .map(|(o, w)| {
                let e = 1000.0 * w / total;
                (o - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square {stat}, p = {p}");
    }

    #[test]
    fn area_budget_enforced() {
        let mut spec = scenes();
        spec.image_size = [3, 3];
        spec.shapes_per_image = 10;
        assert!(matches!(
            gen_segmentation_pair(&spec),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = blobs();
        s.cov_scale = 0.0;
        assert!(matches!(gen_classification_pair(&s), Err(Error::Config(_))));
        let mut s = scenes();
        s.class_frequency_weights[1] = 0.0;
        assert!(matches!(gen_segmentation_pair(&s), Err(Error::Config(_))));
    }
}

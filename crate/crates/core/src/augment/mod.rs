//! Seeded augmentation of a single (template, label) pair.
//!
//! A seed fixes every random choice: [`sample_params`] draws all parameters
//! in a fixed order, and the only further draws are the per-voxel noise
//! values, taken from the same stream right after the parameters.

pub mod geometry;
pub mod photometric;
pub mod texture;

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::volume::{normalize_max_one, LabelVolume, Volume};

pub use geometry::{spatial_map, warp, SpatialMap};
pub use photometric::{apply_lighting, crop_sphere, reduce};
pub use texture::{blend, perlin3, perlin_background, stamp_background, PermutationTable};

/// Retries after the first attempt when a sample comes out all zero.
pub const MAX_RETRIES: usize = 8;

/// Perspective divisors at the corners must stay above this.
pub const MIN_PERSPECTIVE_DIVISOR: f64 = 0.05;

/// Image width used by the width-relative formulas: the largest dimension.
pub(crate) fn width(dims: [usize; 3]) -> f64 {
    dims.into_iter().max().unwrap_or(1) as f64
}

/// Sampling ranges; `[low, high]` pairs are drawn uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRanges {
    pub subsample_probability: f64,
    pub noise_probability: f64,
    pub noise: [f64; 2],
    pub crop_probability: f64,
    pub crop_radius_frac: [f64; 2],
    pub crop_fill: [f64; 2],
    pub lighting_probability: f64,
    pub ambient: [f64; 2],
    pub diffuse_strength: f64,
    pub lens_k: [f64; 2],
    /// Multiplied by 1/dim per axis.
    pub perspective: [f64; 2],
    /// Magnitude in radians; the sign is drawn separately.
    pub rotation: [f64; 2],
    /// Fraction of the axis size; the sign is drawn separately.
    pub translation_frac: [f64; 2],
    pub scale: [f64; 2],
    pub aspect: [f64; 2],
    pub texture_probability: f64,
    pub stamp_count: usize,
    pub stamp_scale: [f64; 2],
    /// Stamp shifts are drawn from +-this fraction of the width.
    pub stamp_translation_frac: f64,
    /// Lattice cells across the width.
    pub perlin_cells: f64,
    pub perlin_levels: u32,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            subsample_probability: 0.5,
            noise_probability: 0.5,
            noise: [0.0, 0.2],
            crop_probability: 0.5,
            crop_radius_frac: [0.1, 0.2],
            crop_fill: [0.0, 2.0],
            lighting_probability: 0.5,
            ambient: [0.0, 2.0],
            diffuse_strength: 0.2,
            lens_k: [0.0, 0.1],
            perspective: [-0.5, 0.5],
            rotation: [0.0, 0.2],
            translation_frac: [0.0, 0.2],
            scale: [0.8, 1.25],
            aspect: [1.0, 1.25],
            texture_probability: 0.5,
            stamp_count: 5,
            stamp_scale: [0.8, 1.25],
            stamp_translation_frac: 0.5,
            perlin_cells: 8.0,
            perlin_levels: 4,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("noise", self.noise),
            ("crop_radius_frac", self.crop_radius_frac),
            ("crop_fill", self.crop_fill),
            ("ambient", self.ambient),
            ("lens_k", self.lens_k),
            ("perspective", self.perspective),
            ("rotation", self.rotation),
            ("translation_frac", self.translation_frac),
            ("scale", self.scale),
            ("aspect", self.aspect),
            ("stamp_scale", self.stamp_scale),
        ];
        for (name, [lo, hi]) in ranges {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "range {name} = [{lo}, {hi}] must be finite with low <= high"
                )));
            }
        }
        let probs = [
            ("subsample_probability", self.subsample_probability),
            ("noise_probability", self.noise_probability),
            ("crop_probability", self.crop_probability),
            ("lighting_probability", self.lighting_probability),
            ("texture_probability", self.texture_probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        let scalars = [
            ("diffuse_strength", self.diffuse_strength),
            ("stamp_translation_frac", self.stamp_translation_frac),
            ("perlin_cells", self.perlin_cells),
        ];
        for (name, v) in scalars {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.perlin_levels == 0 {
            return Err(Error::InvalidConfig("perlin_levels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which augmentation stages are active, plus their ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enable_reduction: bool,
    pub enable_cropping: bool,
    pub enable_lighting: bool,
    pub enable_rigid: bool,
    pub enable_camera: bool,
    pub enable_textures: bool,
    pub ranges: AugmentRanges,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl AugmentConfig {
    pub fn all_off() -> Self {
        AugmentConfig {
            enable_reduction: false,
            enable_cropping: false,
            enable_lighting: false,
            enable_rigid: false,
            enable_camera: false,
            enable_textures: false,
            ranges: AugmentRanges::default(),
        }
    }

    /// Everything except cropping.
    pub fn standard() -> Self {
        AugmentConfig {
            enable_reduction: true,
            enable_lighting: true,
            enable_rigid: true,
            enable_camera: true,
            enable_textures: true,
            ..Self::all_off()
        }
    }

    /// Everything, including cropping (incomplete-foreground training).
    pub fn tumor() -> Self {
        AugmentConfig {
            enable_cropping: true,
            ..Self::standard()
        }
    }

    pub fn rigid_only() -> Self {
        AugmentConfig {
            enable_rigid: true,
            ..Self::all_off()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "tumor" => Ok(Self::tumor()),
            other => Err(Error::InvalidConfig(format!(
                "unknown augmentation mode {other:?} (expected \"standard\" or \"tumor\")"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ranges.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    fn from_index(i: u64) -> Self {
        [Axis::X, Axis::Y, Axis::Z][i as usize]
    }
}

/// One stamped copy: rotation (Euler angles), shift in voxels, scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StampParams {
    pub angles: [f64; 3],
    pub translation: [f64; 3],
    pub scale: f64,
}

impl StampParams {
    pub fn identity() -> Self {
        StampParams {
            angles: [0.0; 3],
            translation: [0.0; 3],
            scale: 1.0,
        }
    }
}

/// Every sampled quantity of one augmented sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub subsample_axes: [bool; 3],
    pub noise_on: bool,
    pub crop_on: bool,
    pub crop_center: [f64; 3],
    pub crop_radius_frac: f64,
    pub crop_fill: f64,
    pub ambient_on: bool,
    pub ambient: f64,
    pub diffuse_on: bool,
    pub diffuse_dir: [f64; 3],
    pub specular_on: bool,
    pub specular_center: [f64; 3],
    pub lens_m: f64,
    pub perspective_p: [f64; 3],
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub scale: f64,
    pub aspect: f64,
    pub aspect_axis: Axis,
    pub stamp_on: bool,
    pub stamp_params: Vec<StampParams>,
    pub perlin_on: bool,
    pub perlin_seed: u64,
    pub perlin_freq: f64,
    pub perlin_levels: u32,
}

impl AugmentParams {
    /// Every stage off and the identity geometry.
    pub fn identity() -> Self {
        AugmentParams {
            subsample_axes: [false; 3],
            noise_on: false,
            crop_on: false,
            crop_center: [0.0; 3],
            crop_radius_frac: 0.0,
            crop_fill: 0.0,
            ambient_on: false,
            ambient: 0.0,
            diffuse_on: false,
            diffuse_dir: [1.0, 0.0, 0.0],
            specular_on: false,
            specular_center: [0.0; 3],
            lens_m: 0.0,
            perspective_p: [0.0; 3],
            rotation: [0.0; 3],
            translation: [0.0; 3],
            scale: 1.0,
            aspect: 1.0,
            aspect_axis: Axis::X,
            stamp_on: false,
            stamp_params: Vec::new(),
            perlin_on: false,
            perlin_seed: 0,
            perlin_freq: 0.0,
            perlin_levels: 1,
        }
    }

    pub fn has_identity_geometry(&self) -> bool {
        self.lens_m == 0.0
            && self.perspective_p == [0.0; 3]
            && self.rotation == [0.0; 3]
            && self.translation == [0.0; 3]
            && self.scale == 1.0
            && self.aspect == 1.0
    }

    /// Human-readable record (pretty JSON).
    pub fn to_record(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_record(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("augmentation record: {e}")))
    }
}

fn draw(rng: &mut Rng, r: [f64; 2]) -> f64 {
    rng.uniform(r[0], r[1])
}

fn draw_point(rng: &mut Rng, dims: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| rng.uniform(0.0, (dims[a] - 1) as f64))
}

/// Draws one parameter set. Order: reduction, crop, lighting, lens,
/// perspective, rotation, translation, scale, aspect, textures. Within an
/// enabled stage every value is drawn even when its 50% gate comes up off,
/// so the stream position never depends on gate outcomes. Disabled stages
/// draw nothing.
pub fn sample_params(rng: &mut Rng, config: &AugmentConfig, dims: [usize; 3]) -> AugmentParams {
    let r = &config.ranges;
    let w = width(dims);
    let mut p = AugmentParams::identity();

    if config.enable_reduction {
        for a in 0..3 {
            p.subsample_axes[a] = rng.chance(r.subsample_probability);
        }
        p.noise_on = rng.chance(r.noise_probability);
    }
    if config.enable_cropping {
        p.crop_on = rng.chance(r.crop_probability);
        p.crop_center = draw_point(rng, dims);
        p.crop_radius_frac = draw(rng, r.crop_radius_frac);
        p.crop_fill = draw(rng, r.crop_fill);
    }
    if config.enable_lighting {
        p.ambient_on = rng.chance(r.lighting_probability);
        p.ambient = draw(rng, r.ambient);
        p.diffuse_on = rng.chance(r.lighting_probability);
        p.diffuse_dir = rng.unit_vector();
        p.specular_on = rng.chance(r.lighting_probability);
        p.specular_center = draw_point(rng, dims);
    }
    if config.enable_camera {
        p.lens_m = w / 2.0 * draw(rng, r.lens_k);
        let mut accepted = false;
        for _ in 0..64 {
            let q = [0, 1, 2].map(|a| draw(rng, r.perspective) / dims[a] as f64);
            if geometry::min_corner_divisor(dims, q) > MIN_PERSPECTIVE_DIVISOR {
                p.perspective_p = q;
                accepted = true;
                break;
            }
        }
        if !accepted {
            p.perspective_p = [0.0; 3];
        }
    }
    if config.enable_rigid {
        for a in 0..3 {
            p.rotation[a] = draw(rng, r.rotation) * rng.sign();
        }
        for a in 0..3 {
            p.translation[a] = draw(rng, r.translation_frac) * dims[a] as f64 * rng.sign();
        }
    }
    if config.enable_camera {
        p.scale = draw(rng, r.scale);
        p.aspect = draw(rng, r.aspect);
        p.aspect_axis = Axis::from_index(rng.below(3));
    }
    if config.enable_textures {
        p.stamp_on = rng.chance(r.texture_probability);
        let shift = r.stamp_translation_frac * w;
        p.stamp_params = (0..r.stamp_count)
            .map(|_| StampParams {
                angles: [0, 1, 2].map(|_| rng.uniform(0.0, TAU)),
                translation: [0, 1, 2].map(|_| rng.uniform(-shift, shift)),
                scale: draw(rng, r.stamp_scale),
            })
            .collect();
        p.perlin_on = rng.chance(r.texture_probability);
        p.perlin_seed = rng.next();
        p.perlin_freq = r.perlin_cells / w;
        p.perlin_levels = r.perlin_levels;
    }
    p
}

/// One finished sample and the parameters that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub image: Volume,
    pub label: LabelVolume,
    pub params: AugmentParams,
    /// Seed of the attempt that succeeded.
    pub seed: u64,
}

fn check_pair(template: &Volume, label: &LabelVolume) -> Result<()> {
    if template.dims() != label.dims() {
        return Err(Error::ShapeMismatch(format!(
            "template {:?} vs label {:?}",
            template.dims(),
            label.dims()
        )));
    }
    Ok(())
}

/// The pipeline for a fixed parameter set; `rng` supplies the noise values.
/// Returns the image before the final normalization.
pub fn apply_params(
    template: &Volume,
    label: &LabelVolume,
    params: &AugmentParams,
    ranges: &AugmentRanges,
    rng: &mut Rng,
) -> (Volume, LabelVolume) {
    let mut v = reduce(template, params, ranges.noise, rng);
    let mut l = label.clone();
    if params.crop_on {
        (v, l) = crop_sphere(&v, &l, params);
    }
    v = apply_lighting(&v, params, ranges.diffuse_strength);
    if !params.has_identity_geometry() {
        (v, l) = warp(&v, &l, params);
    }
    if params.stamp_on {
        v = stamp_background(&v, &l, params);
    }
    if params.perlin_on {
        v = perlin_background(&v, &l, params);
    }
    (v, l)
}

/// Augments once; on an all-zero result retries with seed+1, up to
/// [`MAX_RETRIES`] times.
pub fn augment_sample(
    template: &Volume,
    label: &LabelVolume,
    config: &AugmentConfig,
    seed: u64,
) -> Result<AugmentedSample> {
    check_pair(template, label)?;
    for attempt in 0..=MAX_RETRIES {
        let s = seed.wrapping_add(attempt as u64);
        let mut rng = Rng::new(s);
        let params = sample_params(&mut rng, config, template.dims());
        let (v, l) = apply_params(template, label, &params, &config.ranges, &mut rng);
        match normalize_max_one(&v) {
            Ok(image) => {
                return Ok(AugmentedSample {
                    image,
                    label: l,
                    params,
                    seed: s,
                })
            }
            Err(Error::DegenerateVolume(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::AugmentFailed {
        seed,
        attempts: MAX_RETRIES + 1,
    })
}

pub fn augment_once(
    template: &Volume,
    label: &LabelVolume,
    config: &AugmentConfig,
    seed: u64,
) -> Result<(Volume, LabelVolume)> {
    let s = augment_sample(template, label, config, seed)?;
    Ok((s.image, s.label))
}

/// Samples `first .. first + count` of the stream driven by `master_seed`,
/// computed in parallel on the current rayon pool and returned in index order.
pub fn generate(
    template: &Volume,
    label: &LabelVolume,
    config: &AugmentConfig,
    master_seed: u64,
    first: u64,
    count: usize,
) -> Result<Vec<AugmentedSample>> {
    (first..first + count as u64)
        .into_par_iter()
        .map(|i| augment_sample(template, label, config, derive_seed(master_seed, i)))
        .collect()
}

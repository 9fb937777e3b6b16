//! Synthetic "brain" phantoms: nested ellipsoids with five tissue classes.
//!
//! Labels: 1 white matter, 2 gray matter, 3 cerebellum, 4 basal ganglia,
//! 5 outer CSF, 0 background. Shapes are defined in coordinates normalized to
//! the half-extent of each axis, so any grid size samples the same anatomy.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::geometry::{center, mat_vec, rotation_matrix};
use crate::error::{Error, Result};
use crate::rng::{splitmix64, Rng};
use crate::volume::{normalize_max_one, LabelVolume, Volume};

const PERTURB_SALT: u64 = 0x5eed_0f_e7a1_5ab1;

/// Smallest supported extent per axis.
pub const MIN_PHANTOM_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Mean intensity of labels 1..=5.
    pub intensities: [f64; 5],
    pub noise_sigma: f64,
    /// Per-axis stretch of every shape.
    pub shape_scale: [f64; 3],
    /// Intensity of the shell of non-brain tissue (label 0) around the
    /// brain; zero leaves the background empty.
    pub scalp: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32; 3],
            spacing: [1.0; 3],
            intensities: [0.9, 0.6, 0.7, 0.5, 0.3],
            noise_sigma: 0.02,
            shape_scale: [1.0; 3],
            scalp: 1.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// A second "species": different proportions and contrasts.
    pub fn variant_b() -> Self {
        PhantomSpec {
            intensities: [0.8, 0.55, 0.65, 0.45, 0.25],
            shape_scale: [0.9, 1.04, 0.94],
            scalp: 1.0,
            seed: 1,
            ..Default::default()
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    const fn new(center: [f64; 3], radii: [f64; 3]) -> Self {
        Ellipsoid { center, radii }
    }

    fn contains(&self, q: [f64; 3], stretch: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((q[a] - self.center[a] * stretch[a]) / (self.radii[a] * stretch[a])).powi(2))
            .sum::<f64>()
            < 1.0
    }
}

const CSF: Ellipsoid = Ellipsoid::new([0.0, 0.0, 0.0], [0.82, 0.88, 0.76]);
const GRAY: Ellipsoid = Ellipsoid::new([0.0, 0.0, 0.0], [0.66, 0.72, 0.60]);
const WHITE: Ellipsoid = Ellipsoid::new([0.0, 0.04, 0.06], [0.44, 0.50, 0.36]);
const CEREBELLUM: Ellipsoid = Ellipsoid::new([0.0, -0.5, -0.32], [0.5, 0.3, 0.28]);
const BASAL_LEFT: Ellipsoid = Ellipsoid::new([-0.24, 0.12, 0.06], [0.2, 0.26, 0.22]);
const BASAL_RIGHT: Ellipsoid = Ellipsoid::new([0.24, 0.12, 0.06], [0.2, 0.26, 0.22]);
/// Non-brain tissue (label 0) around the brain.
const SCALP_INNER: Ellipsoid = Ellipsoid::new([0.0, 0.0, 0.0], [0.90, 0.95, 0.84]);
const SCALP_OUTER: Ellipsoid = Ellipsoid::new([0.0, 0.0, 0.0], [0.98, 1.02, 0.93]);

/// Class at a normalized coordinate.
fn label_at(q: [f64; 3], s: [f64; 3]) -> u8 {
    if !CSF.contains(q, s) {
        return 0;
    }
    if !GRAY.contains(q, s) {
        return 5;
    }
    if CEREBELLUM.contains(q, s) {
        return 3;
    }
    if BASAL_LEFT.contains(q, s) || BASAL_RIGHT.contains(q, s) {
        return 4;
    }
    if WHITE.contains(q, s) {
        return 1;
    }
    2
}

/// A mild geometric and photometric change that turns the template into a
/// held-out "subject".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub rotation: [f64; 3],
    /// Voxels.
    pub translation: [f64; 3],
    pub scale: [f64; 3],
    /// Linear gain across the volume: `1 + <bias, (x - c)/half_extent>`.
    pub bias: [f64; 3],
    pub gamma: f64,
    /// Gain on the scalp intensity.
    pub scalp: f64,
    /// Noise seed; `None` reuses the phantom's own seed.
    pub noise_seed: Option<u64>,
}

impl Perturbation {
    pub fn identity() -> Self {
        Perturbation {
            rotation: [0.0; 3],
            translation: [0.0; 3],
            scale: [1.0; 3],
            bias: [0.0; 3],
            gamma: 1.0,
            scalp: 1.0,
            noise_seed: None,
        }
    }

    /// Drawn from a stream separate from every augmentation seed.
    pub fn sample(seed: u64) -> Self {
        let mut rng = Rng::new(splitmix64(seed ^ PERTURB_SALT));
        Perturbation {
            rotation: [0, 1, 2].map(|_| rng.uniform(-0.08, 0.08)),
            translation: [0, 1, 2].map(|_| rng.uniform(-1.5, 1.5)),
            scale: [0, 1, 2].map(|_| rng.uniform(0.95, 1.05)),
            bias: [0, 1, 2].map(|_| rng.uniform(-0.15, 0.15)),
            gamma: (rng.uniform(0.8f64.ln(), 1.25f64.ln())).exp(),
            scalp: rng.uniform(0.85, 1.15),
            noise_seed: Some(rng.next()),
        }
    }
}

fn check_spec(spec: &PhantomSpec) -> Result<()> {
    if spec.dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
        return Err(Error::InvalidConfig(format!(
            "phantom dims {:?} too small; every axis needs at least {MIN_PHANTOM_DIM} voxels",
            spec.dims
        )));
    }
    if spec.spacing.iter().any(|&s| !(s > 0.0)) || spec.shape_scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidConfig(
            "phantom spacing and shape scale must be positive".into(),
        ));
    }
    if spec.intensities.iter().any(|&v| !(v > 0.0)) || !(spec.noise_sigma >= 0.0) || !(spec.scalp >= 0.0) {
        return Err(Error::InvalidConfig(
            "phantom intensities must be positive, noise_sigma and scalp >= 0".into(),
        ));
    }
    Ok(())
}

/// The phantom seen through `perturbation`; the identity gives the template.
pub fn make_perturbed(spec: &PhantomSpec, perturbation: &Perturbation) -> Result<(Volume, LabelVolume)> {
    check_spec(spec)?;
    let dims = spec.dims;
    let c = center(dims);
    let half = dims.map(|n| n as f64 / 2.0);
    let r = rotation_matrix(perturbation.rotation);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
    let mut rng = Rng::new(perturbation.noise_seed.unwrap_or(spec.seed));

    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let u = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let scaled = [0, 1, 2].map(|a| u[a] * perturbation.scale[a]);
                let src = mat_vec(&r, scaled);
                let q = [0, 1, 2].map(|a| (src[a] + perturbation.translation[a]) / half[a]);
                let label = label_at(q, spec.shape_scale);
                let scalp = spec.scalp * perturbation.scalp;
                let mean = match label {
                    0 if scalp > 0.0
                        && SCALP_OUTER.contains(q, spec.shape_scale)
                        && !SCALP_INNER.contains(q, spec.shape_scale) =>
                    {
                        scalp
                    }
                    0 => 0.0,
                    k => spec.intensities[k as usize - 1],
                };
                let value = if mean == 0.0 {
                    0.0
                } else {
                    let mut v = mean + noise.sample(&mut rng);
                    let gain = 1.0 + (0..3).map(|a| perturbation.bias[a] * u[a] / half[a]).sum::<f64>();
                    v *= gain;
                    v.max(0.0)
                };
                labels.push(label);
                data.push(value as f32);
            }
        }
    }
    let mut image = normalize_max_one(&Volume::new(dims, spec.spacing, data)?)?;
    if perturbation.gamma != 1.0 {
        let g = perturbation.gamma as f32;
        let data = image.data().iter().map(|v| v.powf(g)).collect();
        image = normalize_max_one(&image.with_data(data))?;
    }
    Ok((image, LabelVolume::new(dims, labels)?))
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    make_perturbed(spec, &Perturbation::identity())
}

pub fn make_evaluation_subject(spec: &PhantomSpec, perturb_seed: u64) -> Result<(Volume, LabelVolume)> {
    make_perturbed(spec, &Perturbation::sample(perturb_seed))
}

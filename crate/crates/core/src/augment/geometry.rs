//! Backward coordinate mapping (lens, perspective, rigid + scaling) and warping.

use rayon::prelude::*;

use super::{width, AugmentParams};
use crate::interp::{Boundary, Interpolation};
use crate::volume::{LabelVolume, Volume};

pub type Mat3 = [[f64; 3]; 3];

/// `Rz * Ry * Rx` for angles `(rx, ry, rz)`.
pub fn rotation_matrix(angles: [f64; 3]) -> Mat3 {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

pub fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

pub fn center(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|n| (n as f64 - 1.0) / 2.0)
}

/// Pincushion displacement `m * ((c - u)/W) * |(c - u)/W|^2`.
pub fn lens_displacement(u: [f64; 3], c: [f64; 3], m: f64, w: f64) -> [f64; 3] {
    let r = [0, 1, 2].map(|a| (c[a] - u[a]) / w);
    let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    r.map(|x| m * x * r2)
}

/// Divisor `<p, u - c> + 1` of the perspective transform.
pub fn perspective_divisor(u: [f64; 3], c: [f64; 3], p: [f64; 3]) -> f64 {
    p[0] * (u[0] - c[0]) + p[1] * (u[1] - c[1]) + p[2] * (u[2] - c[2]) + 1.0
}

pub fn perspective(u: [f64; 3], c: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    let div = perspective_divisor(u, c, p);
    [0, 1, 2].map(|a| c[a] + (u[a] - c[a]) / div)
}

/// Smallest perspective divisor over the eight corners of the volume.
pub fn min_corner_divisor(dims: [usize; 3], p: [f64; 3]) -> f64 {
    let c = center(dims);
    let mut lo = f64::INFINITY;
    for corner in 0..8 {
        let u = [0, 1, 2].map(|a| {
            if corner >> a & 1 == 1 {
                (dims[a] - 1) as f64
            } else {
                0.0
            }
        });
        lo = lo.min(perspective_divisor(u, c, p));
    }
    lo
}

/// Precomputed linear part `R * S` and the constants of the map.
#[derive(Clone, Copy, Debug)]
pub struct SpatialMap {
    linear: Mat3,
    center: [f64; 3],
    translation: [f64; 3],
    lens_m: f64,
    perspective: [f64; 3],
    width: f64,
}

impl SpatialMap {
    pub fn new(params: &AugmentParams, dims: [usize; 3]) -> Self {
        let r = rotation_matrix(params.rotation);
        let mut s = [params.scale; 3];
        s[params.aspect_axis.index()] *= params.aspect;
        let mut linear = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                linear[i][j] = r[i][j] * s[j];
            }
        }
        SpatialMap {
            linear,
            center: center(dims),
            translation: params.translation,
            lens_m: params.lens_m,
            perspective: params.perspective_p,
            width: width(dims),
        }
    }

    /// Source coordinate for destination coordinate `u`.
    pub fn apply(&self, u: [f64; 3]) -> [f64; 3] {
        let c = self.center;
        let d = lens_displacement(u, c, self.lens_m, self.width);
        let distorted = [u[0] + d[0], u[1] + d[1], u[2] + d[2]];
        let q = perspective(distorted, c, self.perspective);
        let rel = mat_vec(&self.linear, [q[0] - c[0], q[1] - c[1], q[2] - c[2]]);
        [0, 1, 2].map(|a| rel[a] + c[a] + self.translation[a])
    }
}

/// Maps a destination coordinate back to the source volume.
pub fn spatial_map(u: [f64; 3], params: &AugmentParams, dims: [usize; 3]) -> [f64; 3] {
    SpatialMap::new(params, dims).apply(u)
}

/// Backward warp: cubic spline for the image, nearest for the label.
/// Cubic overshoot below zero is clipped.
pub fn warp(v: &Volume, l: &LabelVolume, params: &AugmentParams) -> (Volume, LabelVolume) {
    let dims = v.dims();
    let map = SpatialMap::new(params, dims);
    let plane = dims[0] * dims[1];
    let img = v.grid();
    let lab = l.grid();
    let mut data = vec![0f32; v.len()];
    let mut labels = vec![0u8; v.len()];
    data.par_chunks_mut(plane)
        .zip(labels.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(z, (dz, lz))| {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let src = map.apply([x as f64, y as f64, z as f64]);
                    let i = y * dims[0] + x;
                    dz[i] = img.sample(src, Interpolation::CubicSpline, Boundary::Zero).max(0.0) as f32;
                    lz[i] = lab.nearest(src).unwrap_or(0);
                }
            }
        });
    (
        v.with_data(data),
        LabelVolume::new(dims, labels).expect("dims unchanged"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AugmentParams, Axis};
    use crate::rng::Rng;

    #[test]
    fn identity_map() {
        let p = AugmentParams::identity();
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let u = [
                rng.uniform(-5.0, 40.0),
                rng.uniform(-5.0, 40.0),
                rng.uniform(-5.0, 40.0),
            ];
            let v = spatial_map(u, &p, [32, 24, 16]);
            for a in 0..3 {
                assert!((u[a] - v[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn center_is_fixed_by_distortion() {
        let mut p = AugmentParams::identity();
        p.lens_m = 1.3;
        p.perspective_p = [0.01, -0.02, 0.015];
        p.rotation = [0.1, -0.2, 0.15];
        p.translation = [1.5, -2.0, 3.0];
        p.scale = 1.1;
        p.aspect = 1.2;
        p.aspect_axis = Axis::Y;
        let dims = [32, 32, 20];
        let c = center(dims);
        let v = spatial_map(c, &p, dims);
        for a in 0..3 {
            assert!((v[a] - (c[a] + p.translation[a])).abs() < 1e-12);
        }
    }

    #[test]
    fn lens_hand_computed() {
        // W = 32, k = 0.1 -> m = 1.6; u = (20, 10, 15.5), c = 15.5 each
        let mut p = AugmentParams::identity();
        p.lens_m = 16.0 * 0.1;
        let v = spatial_map([20.0, 10.0, 15.5], &p, [32, 32, 32]);
        let (dx, dy) = (-4.5 / 32.0, 5.5 / 32.0);
        let r2 = dx * dx + dy * dy;
        let expect = [20.0 + 1.6 * dx * r2, 10.0 + 1.6 * dy * r2, 15.5];
        for a in 0..3 {
            assert!((v[a] - expect[a]).abs() < 1e-6, "{v:?} vs {expect:?}");
        }
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let r = rotation_matrix([0.3, -1.1, 2.0]);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let rz = rotation_matrix([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let v = mat_vec(&rz, [1.0, 0.0, 0.0]);
        assert!((v[1] - 1.0).abs() < 1e-12 && v[0].abs() < 1e-12);
    }

    #[test]
    fn integer_translation_moves_voxel_back() {
        let dims = [12, 10, 8];
        let mut data = vec![0f32; 960];
        let mut labels = vec![0u8; 960];
        let hot = (4 * 10 + 5) * 12 + 7;
        data[hot] = 1.0;
        labels[hot] = 3;
        let v = Volume::new(dims, [1.0; 3], data).unwrap();
        let l = LabelVolume::new(dims, labels).unwrap();
        let mut p = AugmentParams::identity();
        p.translation = [3.0, 0.0, 0.0];
        let (wv, wl) = warp(&v, &l, &p);
        for z in 0..8 {
            for y in 0..10 {
                for x in 0..12 {
                    let expect = if (x, y, z) == (4, 5, 4) { 1.0 } else { 0.0 };
                    assert!((wv.get(x, y, z) - expect).abs() < 1e-6);
                    assert_eq!(wl.get(x, y, z), if expect == 1.0 { 3 } else { 0 });
                }
            }
        }
    }

    #[test]
    fn identity_warp() {
        let mut rng = Rng::new(2);
        let v = Volume::new([6, 7, 8], [1.0; 3], (0..336).map(|_| rng.unit() as f32).collect()).unwrap();
        let l = LabelVolume::new([6, 7, 8], (0..336).map(|_| rng.below(6) as u8).collect()).unwrap();
        let (wv, wl) = warp(&v, &l, &AugmentParams::identity());
        for (a, b) in wv.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(wl, l);
    }
}

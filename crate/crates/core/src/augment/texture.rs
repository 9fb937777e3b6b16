//! Background textures: stamped copies of the background and banded Perlin noise.

use rayon::prelude::*;

use super::geometry::{center, mat_vec, rotation_matrix};
use super::AugmentParams;
use crate::interp::{Boundary, Interpolation};
use crate::rng::Rng;
use crate::volume::{LabelVolume, Volume};

/// `s + b * f(s)` with `f(s) = 0.1` when `1 - s < 0.1`, else `1 - s`.
#[inline]
pub fn blend(s: f32, b: f32) -> f32 {
    let f = if 1.0 - s < 0.1 { 0.1 } else { 1.0 - s };
    s + b * f
}

/// Permutation of 0..256, stored twice so lookups never wrap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationTable {
    p: Vec<usize>,
}

impl PermutationTable {
    pub fn identity() -> Self {
        Self::from_permutation(&(0..256).collect::<Vec<_>>())
    }

    pub fn seeded(seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..256).collect();
        Rng::new(seed).shuffle(&mut perm);
        Self::from_permutation(&perm)
    }

    pub fn from_permutation(perm: &[usize]) -> Self {
        assert_eq!(perm.len(), 256);
        let mut p = perm.to_vec();
        p.extend_from_slice(perm);
        PermutationTable { p }
    }
}

const GRADIENTS: [[f64; 3]; 16] = [
    [1.0, 1.0, 0.0],
    [-1.0, 1.0, 0.0],
    [1.0, -1.0, 0.0],
    [-1.0, -1.0, 0.0],
    [1.0, 0.0, 1.0],
    [-1.0, 0.0, 1.0],
    [1.0, 0.0, -1.0],
    [-1.0, 0.0, -1.0],
    [0.0, 1.0, 1.0],
    [0.0, -1.0, 1.0],
    [0.0, 1.0, -1.0],
    [0.0, -1.0, -1.0],
    [1.0, 1.0, 0.0],
    [0.0, -1.0, 1.0],
    [-1.0, 1.0, 0.0],
    [0.0, -1.0, -1.0],
];

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(t: f64, a: f64, b: f64) -> f64 {
    a + t * (b - a)
}

#[inline]
fn grad(hash: usize, x: f64, y: f64, z: f64) -> f64 {
    let g = GRADIENTS[hash & 15];
    g[0] * x + g[1] * y + g[2] * z
}

/// Improved gradient noise; the result is clipped to [-1, 1].
pub fn perlin3(x: f64, y: f64, z: f64, table: &PermutationTable) -> f64 {
    let p = &table.p;
    let (fx, fy, fz) = (x.floor(), y.floor(), z.floor());
    let xi = (fx as i64 & 255) as usize;
    let yi = (fy as i64 & 255) as usize;
    let zi = (fz as i64 & 255) as usize;
    let (x, y, z) = (x - fx, y - fy, z - fz);
    let (u, v, w) = (fade(x), fade(y), fade(z));
    let a = p[xi] + yi;
    let aa = p[a] + zi;
    let ab = p[a + 1] + zi;
    let b = p[xi + 1] + yi;
    let ba = p[b] + zi;
    let bb = p[b + 1] + zi;
    let near = lerp(
        v,
        lerp(u, grad(p[aa], x, y, z), grad(p[ba], x - 1.0, y, z)),
        lerp(u, grad(p[ab], x, y - 1.0, z), grad(p[bb], x - 1.0, y - 1.0, z)),
    );
    let far = lerp(
        v,
        lerp(u, grad(p[aa + 1], x, y, z - 1.0), grad(p[ba + 1], x - 1.0, y, z - 1.0)),
        lerp(
            u,
            grad(p[ab + 1], x, y - 1.0, z - 1.0),
            grad(p[bb + 1], x - 1.0, y - 1.0, z - 1.0),
        ),
    );
    lerp(w, near, far).clamp(-1.0, 1.0)
}

/// Noise quantized into `levels` bands on [0, 1).
pub fn banded(noise: f64, levels: u32) -> f64 {
    let l = levels.max(1) as f64;
    (l * (noise + 1.0) / 2.0).floor().clamp(0.0, l - 1.0) / l
}

/// Draws five rotated, scaled and shifted copies of the background onto the
/// background. The source is the background as it was before stamping.
pub fn stamp_background(v: &Volume, l: &LabelVolume, params: &AugmentParams) -> Volume {
    let dims = v.dims();
    let labels = l.labels();
    if labels.iter().all(|&x| x != 0) {
        return v.clone();
    }
    let source: Vec<f32> = v
        .data()
        .iter()
        .zip(labels)
        .map(|(&x, &lab)| if lab == 0 { x } else { 0.0 })
        .collect();
    let grid = crate::interp::Grid::new(&source, dims);
    let c = center(dims);
    let plane = dims[0] * dims[1];
    let mut data = v.data().to_vec();
    for stamp in &params.stamp_params {
        let r = rotation_matrix(stamp.angles);
        data.par_chunks_mut(plane).enumerate().for_each(|(z, dz)| {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = y * dims[0] + x;
                    if labels[z * plane + i] != 0 {
                        continue;
                    }
                    let rel = mat_vec(&r, [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]]);
                    let src = [0, 1, 2].map(|a| rel[a] * stamp.scale + c[a] + stamp.translation[a]);
                    let b = grid.sample(src, Interpolation::Linear, Boundary::Zero) as f32;
                    dz[i] = blend(dz[i], b);
                }
            }
        });
    }
    v.with_data(data)
}

/// Blends a banded Perlin texture into the background.
pub fn perlin_background(v: &Volume, l: &LabelVolume, params: &AugmentParams) -> Volume {
    let dims = v.dims();
    let table = PermutationTable::seeded(params.perlin_seed);
    let f = params.perlin_freq;
    let labels = l.labels();
    let plane = dims[0] * dims[1];
    let mut data = v.data().to_vec();
    data.par_chunks_mut(plane).enumerate().for_each(|(z, dz)| {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = y * dims[0] + x;
                if labels[z * plane + i] != 0 {
                    continue;
                }
                let t = banded(
                    perlin3(x as f64 * f, y as f64 * f, z as f64 * f, &table),
                    params.perlin_levels,
                );
                dz[i] = blend(dz[i], t as f32);
            }
        }
    });
    v.with_data(data)
}

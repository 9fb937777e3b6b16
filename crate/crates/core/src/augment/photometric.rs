//! Image reduction, spherical cropping and lighting.

use super::{width, AugmentParams};
use crate::interp::{Boundary, Interpolation};
use crate::rng::Rng;
use crate::volume::{resample_grid, LabelVolume, Volume};

/// Averages neighbouring voxel pairs along `axis` (an odd trailing voxel is kept).
fn halve(data: &[f32], dims: [usize; 3], axis: usize) -> (Vec<f32>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis].div_ceil(2);
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let mut src = [x, y, z];
                src[axis] *= 2;
                let i = (src[2] * dims[1] + src[1]) * dims[0] + src[0];
                let v = if src[axis] + 1 < n {
                    0.5 * (data[i] + data[i + stride])
                } else {
                    data[i]
                };
                out.push(v);
            }
        }
    }
    (out, out_dims)
}

/// Subsampling along the flagged axes, then optional uniform noise drawn from `rng`.
pub fn reduce(v: &Volume, params: &AugmentParams, noise: [f64; 2], rng: &mut Rng) -> Volume {
    let dims = v.dims();
    let mut data = v.data().to_vec();
    for axis in 0..3 {
        if !params.subsample_axes[axis] || dims[axis] < 2 {
            continue;
        }
        let (half, half_dims) = halve(&data, dims, axis);
        let mut scale = [1.0; 3];
        scale[axis] = 0.5;
        data = resample_grid(&half, half_dims, dims, scale, Interpolation::Linear, Boundary::Clamp);
    }
    if params.noise_on {
        for x in &mut data {
            *x += rng.uniform(noise[0], noise[1]) as f32;
        }
    }
    v.with_data(data)
}

/// Fills a ball with `crop_fill` in the image and background in the label.
pub fn crop_sphere(v: &Volume, l: &LabelVolume, params: &AugmentParams) -> (Volume, LabelVolume) {
    let dims = v.dims();
    let radius = params.crop_radius_frac * width(dims);
    let c = params.crop_center;
    let mut data = v.data().to_vec();
    let mut labels = l.labels().to_vec();
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                if d2.sqrt() < radius {
                    data[i] = params.crop_fill as f32;
                    labels[i] = 0;
                }
                i += 1;
            }
        }
    }
    (
        v.with_data(data),
        LabelVolume::new(dims, labels).expect("dims unchanged"),
    )
}

/// Ambient offset, directional (diffuse) gain and distance (specular) gain,
/// each gated by its flag; negative results are clipped to zero.
pub fn apply_lighting(v: &Volume, params: &AugmentParams, diffuse_strength: f64) -> Volume {
    if !(params.ambient_on || params.diffuse_on || params.specular_on) {
        return v.clone();
    }
    let dims = v.dims();
    let w = width(dims);
    let c = super::geometry::center(dims);
    let dir = params.diffuse_dir;
    let s = params.specular_center;
    let mut data = v.data().to_vec();
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let mut val = data[i] as f64;
                if params.ambient_on {
                    val += params.ambient;
                }
                if params.diffuse_on {
                    let dot = (0..3).map(|a| dir[a] * (p[a] - c[a]) / w).sum::<f64>();
                    val *= 1.0 + diffuse_strength * dot;
                }
                if params.specular_on {
                    let dist = (0..3).map(|a| (p[a] - s[a]).powi(2)).sum::<f64>().sqrt();
                    val *= dist / w;
                }
                data[i] = val.max(0.0) as f32;
                i += 1;
            }
        }
    }
    v.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let mut d = Vec::new();
        for _z in 0..dims[2] {
            for _y in 0..dims[1] {
                for x in 0..dims[0] {
                    d.push(x as f32 / dims[0] as f32);
                }
            }
        }
        Volume::new(dims, [1.0; 3], d).unwrap()
    }

    #[test]
    fn reduce_identity_and_constants() {
        let v = ramp([8, 8, 8]);
        let mut rng = Rng::new(0);
        let p = AugmentParams::identity();
        assert_eq!(reduce(&v, &p, [0.0, 0.2], &mut rng), v);

        let c = Volume::filled([8, 6, 10], [1.0; 3], 0.5).unwrap();
        let mut p = AugmentParams::identity();
        p.subsample_axes = [true, true, true];
        let r = reduce(&c, &p, [0.0, 0.2], &mut rng);
        assert!(r.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn reduce_matches_decimate_then_interpolate() {
        let dims = [8, 8, 8];
        let v = ramp(dims);
        let mut p = AugmentParams::identity();
        p.subsample_axes = [true, false, false];
        let r = reduce(&v, &p, [0.0, 0.2], &mut Rng::new(0));
        // pair means sit at original x = 2j + 0.5
        let half: Vec<f64> = (0..4).map(|j| (2 * j) as f64 / 8.0 + 0.5 / 8.0).collect();
        for x in 0..8 {
            let t = ((x as f64 - 0.5) / 2.0).clamp(0.0, 3.0);
            let j = (t.floor() as usize).min(2);
            let f = t - j as f64;
            let expect = half[j] * (1.0 - f) + half[j + 1] * f;
            for z in 0..8 {
                for y in 0..8 {
                    assert!((r.get(x, y, z) as f64 - expect).abs() < 1e-5, "x={x}");
                }
            }
        }
    }

    #[test]
    fn noise_is_bounded() {
        let v = Volume::filled([8, 8, 8], [1.0; 3], 0.25).unwrap();
        let mut p = AugmentParams::identity();
        p.noise_on = true;
        let r = reduce(&v, &p, [0.0, 0.2], &mut Rng::new(3));
        assert!(r.data().iter().all(|&x| (0.25..=0.45).contains(&x)));
        assert!(r.data().iter().any(|&x| x != 0.25));
    }

    #[test]
    fn crop_matches_distance_oracle() {
        let dims = [100, 100, 100];
        let v = Volume::filled(dims, [1.0; 3], 0.5).unwrap();
        let l = LabelVolume::new(dims, vec![2; 1_000_000]).unwrap();
        let mut p = AugmentParams::identity();
        p.crop_on = true;
        p.crop_center = [49.5, 49.5, 49.5];
        p.crop_radius_frac = 0.15;
        p.crop_fill = 1.7;
        let (cv, cl) = crop_sphere(&v, &l, &p);
        let mut changed = 0;
        for z in 0..100 {
            for y in 0..100 {
                for x in 0..100 {
                    let d = ((x as f64 - 49.5).powi(2) + (y as f64 - 49.5).powi(2) + (z as f64 - 49.5).powi(2)).sqrt();
                    let inside = d < 15.0;
                    changed += inside as usize;
                    assert_eq!(cv.get(x, y, z), if inside { 1.7 } else { 0.5 });
                    assert_eq!(cl.get(x, y, z), if inside { 0 } else { 2 });
                }
            }
        }
        assert!(changed > 10_000);

        p.crop_radius_frac = 0.0;
        let (cv, cl) = crop_sphere(&v, &l, &p);
        assert_eq!((cv, cl), (v, l));
    }

    #[test]
    fn lighting_cases() {
        let v = Volume::filled([9, 9, 9], [1.0; 3], 0.2).unwrap();
        let p = AugmentParams::identity();
        assert_eq!(apply_lighting(&v, &p, 0.2), v);

        let mut p = AugmentParams::identity();
        p.ambient_on = true;
        p.ambient = 0.5;
        let a = apply_lighting(&v, &p, 0.2);
        assert!(a.data().iter().all(|&x| (x - 0.7).abs() < 1e-6));

        let mut p = AugmentParams::identity();
        p.diffuse_on = true;
        p.diffuse_dir = [1.0, 0.0, 0.0];
        let v = Volume::filled([17, 5, 5], [1.0; 3], 0.5).unwrap();
        let d = apply_lighting(&v, &p, 0.2);
        // W = 17, center x = 8
        for x in 0..17 {
            let expect = 0.5 * (1.0 + 0.2 * (x as f64 - 8.0) / 17.0);
            assert!((d.get(x, 2, 2) as f64 - expect).abs() < 1e-6);
        }
        assert!((d.get(8, 0, 0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn specular_darkens_at_its_center() {
        let v = Volume::filled([8, 8, 8], [1.0; 3], 1.0).unwrap();
        let mut p = AugmentParams::identity();
        p.specular_on = true;
        p.specular_center = [2.0, 3.0, 4.0];
        let s = apply_lighting(&v, &p, 0.2);
        assert_eq!(s.get(2, 3, 4), 0.0);
        assert!((s.get(7, 3, 4) - 5.0 / 8.0).abs() < 1e-6);
    }
}

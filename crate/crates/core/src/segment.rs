//! Whole-volume inference: normalize, bring the image onto the training grid,
//! pad to a size the network accepts, forward in eval mode, map the output
//! back onto the input grid and post-process there.

use crate::error::Result;
use crate::interp::{Boundary, Interpolation};
use crate::io::TemplateGrid;
use crate::postprocess::{finalize, SegmentationResult};
use crate::tensor::Tensor;
use crate::unet::UNetModel;
use crate::volume::{normalize_max_one, resample, resample_grid, Volume};

/// Zero-pads the high end of every axis up to a multiple of `divisor`.
pub fn pad_to_divisible(v: &Volume, divisor: usize) -> Volume {
    let dims = v.dims();
    let padded = dims.map(|n| n.div_ceil(divisor) * divisor);
    if padded == dims {
        return v.clone();
    }
    let mut data = vec![0.0f32; padded.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let src = (z * dims[1] + y) * dims[0];
            let dst = (z * padded[1] + y) * padded[0];
            data[dst..dst + dims[0]].copy_from_slice(&v.data()[src..src + dims[0]]);
        }
    }
    Volume::new(padded, v.spacing(), data).expect("padded dims are valid")
}

/// Keeps the low corner of every channel.
fn crop_tensor(t: &Tensor<f32>, dims: [usize; 3]) -> Tensor<f32> {
    if t.dims == dims {
        return t.clone();
    }
    let mut out = Tensor::zeros(t.channels, dims);
    for c in 0..t.channels {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let src = t.index(c, 0, y, z);
                let dst = out.index(c, 0, y, z);
                out.data[dst..dst + dims[0]].copy_from_slice(&t.data[src..src + dims[0]]);
            }
        }
    }
    out
}

/// Network output for `image` on the image's own grid, with the normalized
/// image. When `grid` is given and differs from the image grid the network
/// sees a cubic-spline resampling onto it and its output is resampled back.
pub fn predict(model: &UNetModel, grid: Option<TemplateGrid>, image: &Volume) -> Result<(Volume, Tensor<f32>)> {
    let input = normalize_max_one(image)?;
    let resampled = grid.filter(|g| g.dims != input.dims() || g.spacing != input.spacing());
    let work = match resampled {
        Some(g) => {
            let r = resample(&input, g.dims, g.spacing, Interpolation::CubicSpline)?;
            let clipped = r.data().iter().map(|&x| x.max(0.0)).collect();
            normalize_max_one(&r.with_data(clipped))?
        }
        None => input.clone(),
    };
    let padded = pad_to_divisible(&work, model.config().divisor());
    let output = crop_tensor(&model.forward_eval(&padded.to_tensor())?, work.dims());
    if resampled.is_none() {
        return Ok((input, output));
    }
    let dims = input.dims();
    let scale = [0, 1, 2].map(|a| input.spacing()[a] as f64 / work.spacing()[a] as f64);
    let mut back = Tensor::zeros(output.channels, dims);
    for c in 0..output.channels {
        let ch = resample_grid(
            output.channel(c),
            work.dims(),
            dims,
            scale,
            Interpolation::CubicSpline,
            Boundary::Zero,
        );
        back.channel_mut(c).copy_from_slice(&ch);
    }
    Ok((input, back))
}

/// Segments `image` on its own grid: [`predict`] then [`finalize`].
pub fn segment(model: &UNetModel, grid: Option<TemplateGrid>, image: &Volume) -> Result<SegmentationResult> {
    let (input, output) = predict(model, grid, image)?;
    finalize(&input, &output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;

    fn model() -> UNetModel {
        let mut m = UNetModel::new(
            UNetConfig {
                levels: 2,
                base_features: 2,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        // a constant positive head bias guarantees a non-empty mask
        m.param_mut("head.bias").unwrap().value.fill(0.3);
        m
    }

    fn blob(dims: [usize; 3], spacing: [f32; 3]) -> Volume {
        let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let mut d = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let r2 = ((x as f64 - c[0]) / dims[0] as f64).powi(2)
                        + ((y as f64 - c[1]) / dims[1] as f64).powi(2)
                        + ((z as f64 - c[2]) / dims[2] as f64).powi(2);
                    d.push(if r2 < 0.12 { 2.0 - r2 as f32 } else { 0.0 });
                }
            }
        }
        Volume::new(dims, spacing, d).unwrap()
    }

    fn check_invariants(input: &Volume, r: &SegmentationResult) {
        let norm = normalize_max_one(input).unwrap();
        let n = input.len();
        assert_eq!(r.label.dims(), input.dims());
        for i in 0..n {
            let m = r.brain_mask.voxels()[i];
            assert_eq!(r.skull_stripped.data()[i], if m { norm.data()[i] } else { 0.0 });
            if !m {
                assert_eq!(r.label.labels()[i], 0);
                for c in 0..r.prob_maps.channels {
                    assert_eq!(r.prob_maps.data[c * n + i], 0.0);
                }
            }
        }
        assert!(r.prob_maps.data.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn same_grid_matches_direct_finalize() {
        let m = model();
        let v = blob([8, 8, 8], [1.0; 3]);
        let r = segment(
            &m,
            Some(TemplateGrid {
                dims: [8; 3],
                spacing: [1.0; 3],
            }),
            &v,
        )
        .unwrap();
        let norm = normalize_max_one(&v).unwrap();
        let direct = finalize(&norm, &m.forward_eval(&norm.to_tensor()).unwrap()).unwrap();
        assert_eq!(r, direct);
        check_invariants(&v, &r);
    }

    #[test]
    fn indivisible_input_is_padded_and_cropped() {
        let m = model();
        let v = blob([7, 9, 6], [1.0; 3]);
        let r = segment(&m, None, &v).unwrap();
        check_invariants(&v, &r);
    }

    #[test]
    fn other_grid_is_mapped_back() {
        let m = model();
        let v = blob([12, 10, 14], [1.5, 1.5, 1.0]);
        let r = segment(
            &m,
            Some(TemplateGrid {
                dims: [8; 3],
                spacing: [2.0; 3],
            }),
            &v,
        )
        .unwrap();
        check_invariants(&v, &r);
        assert!(r.brain_mask.count() > 0);
    }

    #[test]
    fn padding_keeps_data_in_the_low_corner() {
        let v = blob([3, 5, 2], [1.0; 3]);
        let p = pad_to_divisible(&v, 4);
        assert_eq!(p.dims(), [4, 8, 4]);
        for z in 0..2 {
            for y in 0..5 {
                for x in 0..3 {
                    assert_eq!(p.get(x, y, z), v.get(x, y, z));
                }
            }
        }
        assert_eq!(p.get(3, 0, 0), 0.0);
        assert_eq!(pad_to_divisible(&p, 4), p);
    }

    #[test]
    fn zero_image_is_degenerate() {
        let v = Volume::filled([8, 8, 8], [1.0; 3], 0.0).unwrap();
        assert!(segment(&model(), None, &v).is_err());
    }
}

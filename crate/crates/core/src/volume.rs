//! Intensity and label volumes, max-scaling, resampling and split errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{Boundary, Grid, Interpolation};
use crate::tensor::Tensor;

/// Default number of tissue classes (labels 1..=5, 0 is background).
pub const DEFAULT_CLASSES: usize = 5;

/// A scalar intensity field, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

fn check_geometry(dims: [usize; 3], spacing: [f32; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidVolume(format!("dims {dims:?} must be >= 1")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidVolume(format!("spacing {spacing:?} must be positive")));
    }
    let n = dims[0] * dims[1] * dims[2];
    if len != n {
        return Err(Error::InvalidVolume(format!(
            "data length {len} != {} x {} x {}",
            dims[0], dims[1], dims[2]
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn grid(&self) -> Grid<'_, f32> {
        Grid::new(&self.data, self.dims)
    }

    /// Copy with the same geometry and new data.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    /// Single-channel tensor view of the intensities.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(1, self.dims, self.data.clone())
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Integer class labels, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        check_geometry(dims, [1.0; 3], labels.len())?;
        Ok(LabelVolume { dims, labels })
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, vec![0; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn grid(&self) -> Grid<'_, u8> {
        Grid::new(&self.labels, self.dims)
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Fails if any label exceeds `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize > classes) {
            Some(&value) => Err(Error::LabelOutOfRange { value, classes }),
            None => Ok(()),
        }
    }

    /// Sorted distinct label values.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// One-hot target: label `c` sets channel `c - 1`, background is all zero.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor<f32>> {
        self.validate(classes)?;
        let mut t = Tensor::zeros(classes, self.dims);
        let n = self.labels.len();
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                t.data[(l as usize - 1) * n + i] = 1.0;
            }
        }
        Ok(t)
    }

    /// Nearest-neighbour resampling onto a new grid.
    pub fn resample_nearest(&self, target_dims: [usize; 3], scale: [f64; 3]) -> Result<Self> {
        if target_dims == self.dims && scale == [1.0; 3] {
            return Ok(self.clone());
        }
        let grid = self.grid();
        let map = GridMap::new(self.dims, target_dims, scale);
        let mut out = Vec::with_capacity(target_dims.iter().product());
        for z in 0..target_dims[2] {
            for y in 0..target_dims[1] {
                for x in 0..target_dims[0] {
                    out.push(grid.nearest(map.source([x, y, z])).unwrap_or(0));
                }
            }
        }
        LabelVolume::new(target_dims, out)
    }
}

/// Center-aligned index mapping between two grids covering the same extent.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GridMap {
    src_center: [f64; 3],
    dst_center: [f64; 3],
    scale: [f64; 3],
}

impl GridMap {
    /// `scale[a]` is destination spacing over source spacing.
    pub(crate) fn new(src: [usize; 3], dst: [usize; 3], scale: [f64; 3]) -> Self {
        GridMap {
            src_center: src.map(|n| (n as f64 - 1.0) / 2.0),
            dst_center: dst.map(|n| (n as f64 - 1.0) / 2.0),
            scale,
        }
    }

    pub(crate) fn source(&self, idx: [usize; 3]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = (idx[a] as f64 - self.dst_center[a]) * self.scale[a] + self.src_center[a];
        }
        p
    }
}

/// Scales a volume so its maximum is exactly one.
pub fn normalize_max_one(v: &Volume) -> Result<Volume> {
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateVolume("non-finite intensity"));
    }
    let max = v.max();
    if !(max > 0.0) {
        return Err(Error::DegenerateVolume("no positive intensity"));
    }
    if max == 1.0 {
        return Ok(v.clone());
    }
    let data = v.data.iter().map(|&x| x / max).collect();
    Ok(v.with_data(data))
}

/// Resamples onto `target_dims` x `target_spacing`, centers aligned.
/// Reads outside the source grid return 0.
pub fn resample(
    v: &Volume,
    target_dims: [usize; 3],
    target_spacing: [f32; 3],
    method: Interpolation,
) -> Result<Volume> {
    check_geometry(target_dims, target_spacing, target_dims.iter().product())?;
    if target_dims == v.dims && target_spacing == v.spacing {
        return Ok(v.clone());
    }
    let scale = [0, 1, 2].map(|a| target_spacing[a] as f64 / v.spacing[a] as f64);
    let data = resample_grid(&v.data, v.dims, target_dims, scale, method, Boundary::Zero);
    Volume::new(target_dims, target_spacing, data)
}

pub(crate) fn resample_grid(
    data: &[f32],
    src_dims: [usize; 3],
    dst_dims: [usize; 3],
    scale: [f64; 3],
    method: Interpolation,
    boundary: Boundary,
) -> Vec<f32> {
    let grid = Grid::new(data, src_dims);
    let map = GridMap::new(src_dims, dst_dims, scale);
    let mut out = Vec::with_capacity(dst_dims.iter().product());
    for z in 0..dst_dims[2] {
        for y in 0..dst_dims[1] {
            for x in 0..dst_dims[0] {
                out.push(grid.sample(map.source([x, y, z]), method, boundary) as f32);
            }
        }
    }
    out
}

/// Squared error split into foreground (label != 0) and background voxels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSplit {
    /// `None` when the partition has no foreground voxel.
    pub foreground_mse: Option<f64>,
    /// `None` when the partition has no background voxel.
    pub background_mse: Option<f64>,
    pub total_mse: f64,
    pub foreground_voxels: usize,
    pub background_voxels: usize,
}

impl ErrorSplit {
    /// Voxel-count-weighted recombination of the two parts.
    pub fn recombined_total(&self) -> f64 {
        let n = (self.foreground_voxels + self.background_voxels) as f64;
        (self.foreground_mse.unwrap_or(0.0) * self.foreground_voxels as f64
            + self.background_mse.unwrap_or(0.0) * self.background_voxels as f64)
            / n
    }
}

/// Per-voxel squared error (mean over channels) against the one-hot of
/// `target`, averaged separately over the foreground and background of
/// `partition`.
pub fn mse_split(output: &Tensor<f32>, target: &LabelVolume, partition: &LabelVolume) -> Result<ErrorSplit> {
    let k = output.channels;
    if output.dims != target.dims || target.dims != partition.dims {
        return Err(Error::ShapeMismatch(format!(
            "output {:?}, target {:?}, partition {:?}",
            output.dims, target.dims, partition.dims
        )));
    }
    target.validate(k)?;
    let n = output.voxels();
    let (mut fg_sum, mut bg_sum) = (0.0f64, 0.0f64);
    let (mut fg_n, mut bg_n) = (0usize, 0usize);
    for i in 0..n {
        let label = target.labels[i] as usize;
        let mut e = 0.0f64;
        for c in 0..k {
            let t = if label == c + 1 { 1.0 } else { 0.0 };
            let d = output.data[c * n + i] as f64 - t;
            e += d * d;
        }
        e /= k as f64;
        if partition.labels[i] != 0 {
            fg_sum += e;
            fg_n += 1;
        } else {
            bg_sum += e;
            bg_n += 1;
        }
    }
    Ok(ErrorSplit {
        foreground_mse: (fg_n > 0).then(|| fg_sum / fg_n as f64),
        background_mse: (bg_n > 0).then(|| bg_sum / bg_n as f64),
        total_mse: (fg_sum + bg_sum) / n as f64,
        foreground_voxels: fg_n,
        background_voxels: bg_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = Rng::new(seed);
        let n = dims.iter().product();
        Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.uniform(0.01, 3.0) as f32).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn normalize_simple_values() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(normalize_max_one(&v).unwrap().data(), &[0.0, 0.5, 1.0]);
        let unit = Volume::new([3, 1, 1], [1.0; 3], vec![0.25, 1.0, 0.5]).unwrap();
        assert_eq!(normalize_max_one(&unit).unwrap(), unit);
    }

    #[test]
    fn normalize_degenerate() {
        let zero = Volume::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        assert!(matches!(normalize_max_one(&zero), Err(Error::DegenerateVolume(_))));
        let nan = Volume::new([2, 1, 1], [1.0; 3], vec![f32::NAN, 1.0]).unwrap();
        assert!(normalize_max_one(&nan).is_err());
    }

    #[test]
    fn normalize_random_matches_division() {
        let v = random_volume([8, 8, 8], 3);
        let out = normalize_max_one(&v).unwrap();
        assert_eq!(out.max(), 1.0);
        let m = v.max() as f64;
        for (a, b) in v.data().iter().zip(out.data()) {
            assert!((*a as f64 / m - *b as f64).abs() < 1e-6);
        }
        // ratios preserved
        let (a, b) = (
            out.data()[5] as f64 / out.data()[77] as f64,
            v.data()[5] as f64 / v.data()[77] as f64,
        );
        assert!((a / b - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(seed in any::<u64>()) {
            let v = random_volume([4, 3, 5], seed);
            let once = normalize_max_one(&v).unwrap();
            let twice = normalize_max_one(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn mse_split_is_permutation_invariant(seed in any::<u64>()) {
            let dims = [3, 3, 2];
            let n = 18;
            let mut rng = Rng::new(seed);
            let out: Vec<f32> = (0..2 * n).map(|_| rng.uniform(-1.0, 2.0) as f32).collect();
            let lab: Vec<u8> = (0..n).map(|_| rng.below(3) as u8).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let out_p: Vec<f32> = (0..2).flat_map(|c| perm.iter().map(move |&i| (c, i))).map(|(c, i)| out[c * n + i]).collect();
            let lab_p: Vec<u8> = perm.iter().map(|&i| lab[i]).collect();
            let l = LabelVolume::new(dims, lab).unwrap();
            let lp = LabelVolume::new(dims, lab_p).unwrap();
            let a = mse_split(&Tensor::from_vec(2, dims, out), &l, &l).unwrap();
            let b = mse_split(&Tensor::from_vec(2, dims, out_p), &lp, &lp).unwrap();
            prop_assert!((a.total_mse - b.total_mse).abs() < 1e-12);
            prop_assert_eq!(a.foreground_voxels, b.foreground_voxels);
        }
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let v = random_volume([5, 6, 7], 9);
        for m in [
            Interpolation::Nearest,
            Interpolation::Linear,
            Interpolation::CubicSpline,
        ] {
            assert_eq!(resample(&v, v.dims(), v.spacing(), m).unwrap(), v);
        }
        // the general path is exact at grid points too
        let data = resample_grid(
            v.data(),
            v.dims(),
            v.dims(),
            [1.0; 3],
            Interpolation::CubicSpline,
            Boundary::Zero,
        );
        assert_eq!(data, v.data());
    }

    #[test]
    fn resample_reproduces_constants_in_interior() {
        let v = Volume::filled([6, 6, 6], [1.0; 3], 0.7).unwrap();
        for m in [
            Interpolation::Nearest,
            Interpolation::Linear,
            Interpolation::CubicSpline,
        ] {
            let out = resample(&v, [9, 11, 5], [0.7, 0.5, 1.3], m).unwrap();
            let [w, h, d] = out.dims();
            for z in 2..d - 2 {
                for y in 2..h - 2 {
                    for x in 2..w - 2 {
                        assert!((out.get(x, y, z) - 0.7).abs() < 1e-6, "{m:?} at {x},{y},{z}");
                    }
                }
            }
        }
    }

    #[test]
    fn nearest_exact_at_source_points() {
        let v = random_volume([4, 4, 4], 5);
        // half spacing: every other destination voxel lands between source points,
        // doubling the spacing lands exactly on source points
        let out = resample(&v, [2, 2, 2], [2.0; 3], Interpolation::Nearest).unwrap();
        // destination i maps to 2i + 0.5, rounding up
        assert_eq!(out.get(0, 0, 0), v.get(1, 1, 1));
        assert_eq!(out.get(1, 1, 1), v.get(3, 3, 3));
    }

    /// Independent trilinear oracle: explicit 8-corner formula.
    fn trilinear_oracle(v: &Volume, p: [f64; 3]) -> f64 {
        let [w, h, d] = v.dims();
        if (0..3).any(|a| p[a] < -0.5 || p[a] >= v.dims()[a] as f64 - 0.5) {
            return 0.0;
        }
        let read = |x: i64, y: i64, z: i64| -> f64 {
            if x < 0 || y < 0 || z < 0 || x >= w as i64 || y >= h as i64 || z >= d as i64 {
                0.0
            } else {
                v.get(x as usize, y as usize, z as usize) as f64
            }
        };
        let (x0, y0, z0) = (p[0].floor(), p[1].floor(), p[2].floor());
        let (fx, fy, fz) = (p[0] - x0, p[1] - y0, p[2] - z0);
        let (x0, y0, z0) = (x0 as i64, y0 as i64, z0 as i64);
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    acc += wx * wy * wz * read(x0 + dx, y0 + dy, z0 + dz);
                }
            }
        }
        acc
    }

    #[test]
    fn linear_upsample_matches_trilinear_oracle() {
        let data: Vec<f32> = (0..64)
            .map(|i| {
                let (x, y, z) = (i % 4, (i / 4) % 4, i / 16);
                (x as f32) + 2.0 * y as f32 - 0.5 * z as f32 + 3.0
            })
            .collect();
        let v = Volume::new([4, 4, 4], [2.0; 3], data).unwrap();
        let out = resample(&v, [8, 8, 8], [1.0; 3], Interpolation::Linear).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let p = [x, y, z].map(|i| (i as f64 - 3.5) * 0.5 + 1.5);
                    let want = trilinear_oracle(&v, p);
                    assert!((out.get(x, y, z) as f64 - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn mse_split_perfect_and_zero_output() {
        let dims = [2, 2, 2];
        let labels = LabelVolume::new(dims, vec![0, 1, 2, 3, 0, 5, 4, 0]).unwrap();
        let hot = labels.one_hot(5).unwrap();
        let s = mse_split(&hot, &labels, &labels).unwrap();
        assert_eq!(
            (s.foreground_mse, s.background_mse, s.total_mse),
            (Some(0.0), Some(0.0), 0.0)
        );

        let zero = Tensor::zeros(5, dims);
        let s = mse_split(&zero, &labels, &labels).unwrap();
        assert_eq!(s.foreground_mse, Some(1.0 / 5.0));
        assert_eq!(s.background_mse, Some(0.0));
    }

    #[test]
    fn mse_split_absent_parts() {
        let dims = [2, 1, 1];
        let bg = LabelVolume::new(dims, vec![0, 0]).unwrap();
        let s = mse_split(&Tensor::zeros(2, dims), &bg, &bg).unwrap();
        assert_eq!(s.foreground_mse, None);
        assert_eq!(s.background_mse, Some(0.0));
    }

    #[test]
    fn mse_split_matches_double_loop_oracle() {
        let dims = [6, 6, 6];
        let k = 5;
        let mut rng = Rng::new(11);
        let n = 216;
        let out: Vec<f32> = (0..k * n).map(|_| rng.uniform(-0.5, 1.5) as f32).collect();
        let lab: Vec<u8> = (0..n).map(|_| rng.below(6) as u8).collect();
        let l = LabelVolume::new(dims, lab.clone()).unwrap();
        let s = mse_split(&Tensor::from_vec(k, dims, out.clone()), &l, &l).unwrap();

        let (mut fs, mut fc, mut bs, mut bc) = (0.0, 0.0, 0.0, 0.0);
        for v in 0..n {
            let mut e = 0.0;
            for c in 0..k {
                let t = if lab[v] as usize == c + 1 { 1.0 } else { 0.0 };
                e += (out[c * n + v] as f64 - t).powi(2);
            }
            if lab[v] == 0 {
                bs += e / k as f64;
                bc += 1.0;
            } else {
                fs += e / k as f64;
                fc += 1.0;
            }
        }
        assert!((s.foreground_mse.unwrap() - fs / fc).abs() < 1e-7);
        assert!((s.background_mse.unwrap() - bs / bc).abs() < 1e-7);
        assert!((s.total_mse - (fs + bs) / n as f64).abs() < 1e-7);
        assert!((s.recombined_total() - s.total_mse).abs() <= 1e-6 * s.total_mse);
    }

    #[test]
    fn one_hot_rejects_large_labels() {
        let l = LabelVolume::new([1, 1, 1], vec![6]).unwrap();
        assert!(matches!(l.one_hot(5), Err(Error::LabelOutOfRange { value: 6, .. })));
    }
}

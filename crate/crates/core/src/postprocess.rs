//! Network output to brain mask, skull-stripped image, labels and probability maps.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

/// Binary volume, x fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrainMask {
    dims: [usize; 3],
    voxels: Vec<bool>,
}

impl BrainMask {
    pub fn new(dims: [usize; 3], voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        Ok(BrainMask { dims, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[(z * self.dims[1] + y) * self.dims[0] + x]
    }

    pub fn to_labels(&self) -> LabelVolume {
        LabelVolume::new(self.dims, self.voxels.iter().map(|&v| v as u8).collect()).expect("dims checked")
    }
}

/// Sum of the clamped channels at every voxel.
fn clamped_sum(output: &Tensor<f32>) -> Vec<f32> {
    let n = output.voxels();
    let mut sum = vec![0.0f32; n];
    for c in 0..output.channels {
        for (s, &v) in sum.iter_mut().zip(output.channel(c)) {
            *s += v.clamp(0.0, 1.0);
        }
    }
    sum
}

/// 6-neighbours of voxel `i`.
fn neighbours(i: usize, dims: [usize; 3]) -> impl Iterator<Item = usize> {
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let x = i % nx;
    let y = (i / nx) % ny;
    let z = i / (nx * ny);
    let plane = nx * ny;
    [
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (z > 0).then(|| i - plane),
        (z + 1 < nz).then(|| i + plane),
    ]
    .into_iter()
    .flatten()
}

/// Keeps the largest 6-connected component of `set`. Equal sizes go to the
/// component whose first voxel (in storage order) comes first.
pub fn largest_component(set: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let n = set.len();
    let mut component = vec![u32::MAX; n];
    let mut best: Option<(u32, usize)> = None;
    let mut queue = VecDeque::new();
    let mut next_id = 0u32;
    for seed in 0..n {
        if !set[seed] || component[seed] != u32::MAX {
            continue;
        }
        let id = next_id;
        next_id += 1;
        component[seed] = id;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours(i, dims) {
                if set[j] && component[j] == u32::MAX {
                    component[j] = id;
                    queue.push_back(j);
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    match best {
        Some((id, _)) => component.iter().map(|&c| c == id).collect(),
        None => vec![false; n],
    }
}

/// Clamp, sum over channels, threshold at 0.5, keep the largest component.
pub fn build_mask(output: &Tensor<f32>) -> Result<BrainMask> {
    if output.channels == 0 {
        return Err(Error::ShapeMismatch("network output has no channels".into()));
    }
    let thresholded: Vec<bool> = clamped_sum(output).iter().map(|&s| s >= 0.5).collect();
    if !thresholded.iter().any(|&v| v) {
        return Err(Error::NoBrainFound);
    }
    BrainMask::new(output.dims, largest_component(&thresholded, output.dims))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub brain_mask: BrainMask,
    pub skull_stripped: Volume,
    pub label: LabelVolume,
    /// Clamped to [0, 1] and zeroed outside the mask.
    pub prob_maps: Tensor<f32>,
}

pub fn finalize(input: &Volume, output: &Tensor<f32>) -> Result<SegmentationResult> {
    if input.dims() != output.dims {
        return Err(Error::ShapeMismatch(format!(
            "input dims {:?} vs output dims {:?}",
            input.dims(),
            output.dims
        )));
    }
    let mask = build_mask(output)?;
    let n = output.voxels();
    let k = output.channels;
    let mut prob_maps = Tensor::zeros(k, output.dims);
    let mut labels = vec![0u8; n];
    for i in 0..n {
        if !mask.voxels[i] {
            continue;
        }
        let mut best = 0;
        for c in 0..k {
            let v = output.data[c * n + i].clamp(0.0, 1.0);
            prob_maps.data[c * n + i] = v;
            if v > prob_maps.data[best * n + i] {
                best = c;
            }
        }
        labels[i] = best as u8 + 1;
    }
    let stripped = input
        .data()
        .iter()
        .zip(&mask.voxels)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Ok(SegmentationResult {
        skull_stripped: input.with_data(stripped),
        label: LabelVolume::new(output.dims, labels)?,
        prob_maps,
        brain_mask: mask,
    })
}

/// Dice overlap of two sets; two empty sets score 1.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    }
}

/// Dice of `label == class` between two label volumes.
pub fn class_dice(a: &LabelVolume, b: &LabelVolume, class: u8) -> f64 {
    let sa: Vec<bool> = a.labels().iter().map(|&l| l == class).collect();
    let sb: Vec<bool> = b.labels().iter().map(|&l| l == class).collect();
    dice(&sa, &sb)
}

/// Dice of the foreground (`label != 0`) sets.
pub fn foreground_dice(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let sa: Vec<bool> = a.labels().iter().map(|&l| l != 0).collect();
    let sb: Vec<bool> = b.labels().iter().map(|&l| l != 0).collect();
    dice(&sa, &sb)
}

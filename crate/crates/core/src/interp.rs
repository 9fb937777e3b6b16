//! Point sampling of voxel grids: nearest, trilinear and Catmull-Rom cubic.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Linear,
    CubicSpline,
}

/// What a read outside the grid returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Points outside the voxel cells read 0, and so do kernel taps off the grid.
    Zero,
    /// Coordinates and taps are clamped to the grid.
    Clamp,
}

/// Catmull-Rom (cardinal spline, tension 0.5) weights for fractional offset `t`.
#[inline]
pub fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Per-axis taps: indices (possibly off-grid) and weights.
#[derive(Clone, Copy)]
struct Taps {
    idx: [isize; 4],
    w: [f64; 4],
    len: usize,
}

impl Taps {
    fn new(x: f64, method: Interpolation) -> Taps {
        match method {
            Interpolation::Nearest => Taps {
                idx: [(x + 0.5).floor() as isize, 0, 0, 0],
                w: [1.0, 0.0, 0.0, 0.0],
                len: 1,
            },
            Interpolation::Linear => {
                let f = x.floor();
                let t = x - f;
                let i = f as isize;
                Taps {
                    idx: [i, i + 1, 0, 0],
                    w: [1.0 - t, t, 0.0, 0.0],
                    len: 2,
                }
            }
            Interpolation::CubicSpline => {
                let f = x.floor();
                let i = f as isize;
                Taps {
                    idx: [i - 1, i, i + 1, i + 2],
                    w: catmull_rom_weights(x - f),
                    len: 4,
                }
            }
        }
    }
}

/// Read-only view of a scalar grid with x fastest.
#[derive(Clone, Copy)]
pub struct Grid<'a, T> {
    pub data: &'a [T],
    pub dims: [usize; 3],
}

impl<'a, T: Copy + Into<f64>> Grid<'a, T> {
    pub fn new(data: &'a [T], dims: [usize; 3]) -> Self {
        debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Grid { data, dims }
    }

    #[inline]
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= -0.5 && p[a] < self.dims[a] as f64 - 0.5)
    }

    /// Samples the grid at a fractional voxel coordinate.
    pub fn sample(&self, p: [f64; 3], method: Interpolation, boundary: Boundary) -> f64 {
        let mut p = p;
        match boundary {
            Boundary::Zero => {
                if !self.contains(p) {
                    return 0.0;
                }
            }
            Boundary::Clamp => {
                for a in 0..3 {
                    p[a] = p[a].clamp(0.0, (self.dims[a] - 1) as f64);
                }
            }
        }
        let tx = Taps::new(p[0], method);
        let ty = Taps::new(p[1], method);
        let tz = Taps::new(p[2], method);
        let [w, h, d] = self.dims;
        let fetch = |i: isize, n: usize| -> Option<usize> {
            match boundary {
                Boundary::Zero => (i >= 0 && (i as usize) < n).then_some(i as usize),
                Boundary::Clamp => Some(i.clamp(0, n as isize - 1) as usize),
            }
        };
        let mut acc = 0.0;
        for k in 0..tz.len {
            let Some(z) = fetch(tz.idx[k], d) else { continue };
            let mut plane = 0.0;
            for j in 0..ty.len {
                let Some(y) = fetch(ty.idx[j], h) else { continue };
                let row = (z * h + y) * w;
                let mut line = 0.0;
                for i in 0..tx.len {
                    let Some(x) = fetch(tx.idx[i], w) else { continue };
                    line += tx.w[i] * self.data[row + x].into();
                }
                plane += ty.w[j] * line;
            }
            acc += tz.w[k] * plane;
        }
        acc
    }

    /// Nearest-neighbour read with the zero-outside rule; returns `None` off-grid.
    pub fn nearest(&self, p: [f64; 3]) -> Option<T> {
        if !self.contains(p) {
            return None;
        }
        let ix = (p[0] + 0.5).floor() as usize;
        let iy = (p[1] + 0.5).floor() as usize;
        let iz = (p[2] + 0.5).floor() as usize;
        Some(self.data[(iz * self.dims[1] + iy) * self.dims[0] + ix])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catmull_rom_partition_of_unity() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let s: f64 = catmull_rom_weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(catmull_rom_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn exact_at_grid_points() {
        let data: Vec<f32> = (0..27).map(|i| i as f32 * 0.5).collect();
        let g = Grid::new(&data, [3, 3, 3]);
        for m in [
            Interpolation::Nearest,
            Interpolation::Linear,
            Interpolation::CubicSpline,
        ] {
            for z in 0..3 {
                for y in 0..3 {
                    for x in 0..3 {
                        let v = g.sample([x as f64, y as f64, z as f64], m, Boundary::Clamp);
                        assert_eq!(v, data[z * 9 + y * 3 + x] as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_boundary_outside() {
        let data = vec![1.0f32; 8];
        let g = Grid::new(&data, [2, 2, 2]);
        assert_eq!(g.sample([-0.6, 0.0, 0.0], Interpolation::Linear, Boundary::Zero), 0.0);
        assert_eq!(g.sample([1.0, 1.6, 0.0], Interpolation::Nearest, Boundary::Zero), 0.0);
        assert_eq!(g.sample([0.5, 0.5, 0.5], Interpolation::Linear, Boundary::Zero), 1.0);
        assert_eq!(g.sample([-3.0, 0.0, 0.0], Interpolation::Linear, Boundary::Clamp), 1.0);
    }

    #[test]
    fn cubic_reproduces_linear_ramp() {
        let data: Vec<f32> = (0..6 * 6 * 6).map(|i| (i % 6) as f32).collect();
        let g = Grid::new(&data, [6, 6, 6]);
        let v = g.sample([2.3, 2.0, 2.0], Interpolation::CubicSpline, Boundary::Zero);
        assert!((v - 2.3).abs() < 1e-12);
    }
}

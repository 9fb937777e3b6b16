//! PNG output: augmentation contact sheets and log-scale error curves.

use image::{Rgb, RgbImage};
use vpa_core::train::EpochLog;
use vpa_core::{LabelVolume, Volume};

/// Label colours, indexed by label value; labels past the end wrap.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 230, 230],
    [128, 128, 128],
    [220, 120, 40],
    [60, 160, 70],
    [70, 110, 220],
    [200, 60, 160],
    [230, 210, 60],
];

/// Pairs per montage row.
pub const MONTAGE_COLUMNS: usize = 8;
/// Pixels per voxel in the montage.
pub const MONTAGE_ZOOM: u32 = 2;
const GAP: u32 = 2;

pub fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn label_colour(l: u8) -> [u8; 3] {
    PALETTE[l as usize % PALETTE.len()]
}

/// Central axial slice of every pair, image on the left and label on the
/// right, laid out row-major. Anterior (high y) is at the top.
pub fn montage(pairs: &[(&Volume, &LabelVolume)]) -> Option<RgbImage> {
    let (first, _) = pairs.first()?;
    let [nx, ny, _] = first.dims();
    let (tw, th) = (nx as u32 * MONTAGE_ZOOM, ny as u32 * MONTAGE_ZOOM);
    let cols = pairs.len().min(MONTAGE_COLUMNS) as u32;
    let rows = pairs.len().div_ceil(MONTAGE_COLUMNS) as u32;
    let cell_w = 2 * tw + GAP;
    let mut img = RgbImage::from_pixel(cols * (cell_w + GAP) + GAP, rows * (th + GAP) + GAP, Rgb([40, 40, 40]));
    for (i, (v, l)) in pairs.iter().enumerate() {
        let [vx, vy, vz] = v.dims();
        let z = vz / 2;
        let ox = GAP + (i as u32 % cols) * (cell_w + GAP);
        let oy = GAP + (i as u32 / cols) * (th + GAP);
        for y in 0..vy.min(ny) {
            for x in 0..vx.min(nx) {
                let g = gray(v.get(x, y, z));
                let c = label_colour(l.get(x, y, z));
                let py = oy + (ny - 1 - y) as u32 * MONTAGE_ZOOM;
                let px = ox + x as u32 * MONTAGE_ZOOM;
                for dy in 0..MONTAGE_ZOOM {
                    for dx in 0..MONTAGE_ZOOM {
                        img.put_pixel(px + dx, py + dy, Rgb([g, g, g]));
                        img.put_pixel(px + tw + GAP + dx, py + dy, Rgb(c));
                    }
                }
            }
        }
    }
    Some(img)
}

/// Curve colours: training, template fg, template bg, evaluation fg, evaluation bg.
pub const CURVE_COLOURS: [[u8; 3]; 5] = [
    [150, 150, 150],
    [240, 140, 30],
    [140, 80, 30],
    [50, 120, 230],
    [20, 40, 120],
];

const PANEL_W: u32 = 320;
const PANEL_H: u32 = 220;
const MARGIN: u32 = 16;
const PANEL_COLUMNS: usize = 4;

fn series(logs: &[EpochLog]) -> [Vec<(f64, Option<f64>)>; 5] {
    let pick = |f: &dyn Fn(&EpochLog) -> Option<f64>| logs.iter().map(|l| (l.epoch as f64, f(l))).collect();
    [
        pick(&|l| Some(l.train_mse)),
        pick(&|l| l.template_error.foreground_mse),
        pick(&|l| l.template_error.background_mse),
        pick(&|l| l.evaluation_error.and_then(|e| e.foreground_mse)),
        pick(&|l| l.evaluation_error.and_then(|e| e.background_mse)),
    ]
}

/// Decade range covering every positive value, at least one decade wide.
fn log_range(all: &[[Vec<(f64, Option<f64>)>; 5]]) -> (f64, f64) {
    let logs: Vec<f64> = all
        .iter()
        .flat_map(|s| s.iter().flatten())
        .filter_map(|&(_, v)| v.filter(|&v| v > 0.0 && v.is_finite()).map(f64::log10))
        .collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (-3.0, 0.0);
    }
    let (lo, hi) = (lo.floor(), hi.ceil());
    (lo, if hi > lo { hi } else { lo + 1.0 })
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// One panel per run, MSE against epoch on a shared log10 axis with a grid
/// line per decade. Missing or non-positive values break the curve.
pub fn error_curves(runs: &[&[EpochLog]]) -> RgbImage {
    let all: Vec<_> = runs.iter().map(|l| series(l)).collect();
    let (lo, hi) = log_range(&all);
    let cols = runs.len().clamp(1, PANEL_COLUMNS) as u32;
    let rows = runs.len().div_ceil(PANEL_COLUMNS).max(1) as u32;
    let mut img = RgbImage::from_pixel(cols * PANEL_W, rows * PANEL_H, Rgb([255, 255, 255]));
    for (i, (logs, curves)) in runs.iter().zip(&all).enumerate() {
        let ox = (i as u32 % cols) * PANEL_W + MARGIN;
        let oy = (i as u32 / cols) * PANEL_H + MARGIN;
        let (w, h) = ((PANEL_W - 2 * MARGIN) as f64, (PANEL_H - 2 * MARGIN) as f64);
        let last = logs.iter().map(|l| l.epoch).max().unwrap_or(1).max(2) as f64;
        let first = logs.iter().map(|l| l.epoch).min().unwrap_or(1) as f64;
        let px = |e: f64| ox as i64 + ((e - first) / (last - first).max(1.0) * w).round() as i64;
        let py = |v: f64| oy as i64 + ((hi - v.log10()) / (hi - lo) * h).round() as i64;
        for d in lo as i64..=hi as i64 {
            let y = py(10f64.powi(d as i32));
            line(
                &mut img,
                (ox as i64, y),
                (ox as i64 + w as i64, y),
                Rgb([225, 225, 225]),
            );
        }
        let (x0, y0, x1, y1) = (ox as i64, oy as i64, ox as i64 + w as i64, oy as i64 + h as i64);
        line(&mut img, (x0, y0), (x0, y1), Rgb([0, 0, 0]));
        line(&mut img, (x0, y1), (x1, y1), Rgb([0, 0, 0]));
        for (curve, colour) in curves.iter().zip(CURVE_COLOURS) {
            let mut prev: Option<(i64, i64)> = None;
            for &(e, v) in curve {
                let p = v.filter(|&v| v > 0.0 && v.is_finite()).map(|v| (px(e), py(v)));
                if let (Some(a), Some(b)) = (prev, p) {
                    line(&mut img, a, b, Rgb(colour));
                } else if let Some(b) = p {
                    line(&mut img, b, b, Rgb(colour));
                }
                prev = p;
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use vpa_core::ErrorSplit;

    fn split(fg: f64, bg: f64) -> ErrorSplit {
        ErrorSplit {
            foreground_mse: Some(fg),
            background_mse: Some(bg),
            total_mse: (fg + bg) / 2.0,
            foreground_voxels: 1,
            background_voxels: 1,
        }
    }

    fn log(epoch: usize, v: f64) -> EpochLog {
        EpochLog {
            round: 1,
            epoch,
            train_mse: v,
            template_error: split(v, v / 10.0),
            evaluation_error: None,
            seconds: 0.0,
        }
    }

    #[test]
    fn gray_map_is_fixed() {
        assert_eq!(gray(-1.0), 0);
        assert_eq!(gray(0.0), 0);
        assert_eq!(gray(0.5), 128);
        assert_eq!(gray(1.0), 255);
        assert_eq!(gray(7.0), 255);
        assert_eq!(label_colour(0), [0, 0, 0]);
        assert_eq!(label_colour(8), label_colour(0));
    }

    #[test]
    fn montage_layout() {
        let v = Volume::new([4, 3, 2], [1.0; 3], (0..24).map(|i| i as f32 / 23.0).collect()).unwrap();
        let l = LabelVolume::new([4, 3, 2], (0..24).map(|i| (i % 6) as u8).collect()).unwrap();
        assert!(montage(&[]).is_none());
        let pairs = vec![(&v, &l); 9];
        let img = montage(&pairs).unwrap();
        let cell = 2 * 4 * MONTAGE_ZOOM + GAP;
        assert_eq!(img.width(), 8 * (cell + GAP) + GAP);
        assert_eq!(img.height(), 2 * (3 * MONTAGE_ZOOM + GAP) + GAP);
        // voxel (1, 2, 1): top row because y is flipped
        let want = gray(v.get(1, 2, 1));
        assert_eq!(img.get_pixel(GAP + MONTAGE_ZOOM, GAP).0, [want; 3]);
        let lab = label_colour(l.get(1, 2, 1));
        assert_eq!(img.get_pixel(GAP + 4 * MONTAGE_ZOOM + GAP + MONTAGE_ZOOM, GAP).0, lab);
    }

    #[test]
    fn decade_range() {
        let runs = [series(&[log(1, 0.3), log(2, 0.002)])];
        assert_eq!(log_range(&runs), (-4.0, 0.0));
        assert_eq!(log_range(&[series(&[])]), (-3.0, 0.0));
        let exact = [series(&[EpochLog {
            template_error: split(0.1, 0.1),
            ..log(1, 0.1)
        }])];
        assert_eq!(log_range(&exact), (-1.0, 0.0));
    }

    #[test]
    fn curves_draw_something_per_panel() {
        let a: Vec<_> = (1..=20).map(|e| log(e, 0.5 / e as f64)).collect();
        let runs: Vec<&[EpochLog]> = vec![&a; 5];
        let img = error_curves(&runs);
        assert_eq!((img.width(), img.height()), (4 * PANEL_W, 2 * PANEL_H));
        let has = |c: [u8; 3], x0: u32, y0: u32| {
            (x0..x0 + PANEL_W).any(|x| (y0..y0 + PANEL_H).any(|y| img.get_pixel(x, y).0 == c))
        };
        for p in 0..5u32 {
            let (x0, y0) = ((p % 4) * PANEL_W, (p / 4) * PANEL_H);
            assert!(has(CURVE_COLOURS[1], x0, y0));
            assert!(has(CURVE_COLOURS[2], x0, y0));
            assert!(!has(CURVE_COLOURS[3], x0, y0));
        }
    }
}

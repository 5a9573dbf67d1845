//! Fixed image statistics fed to the trainable layers.
//!
//! Layout of the statistics vector (length [`STATS_DIM`]):
//!
//! | range  | content                                              |
//! |--------|------------------------------------------------------|
//! | 0..3   | per-channel mean (grayscale replicated to 3)         |
//! | 3..6   | per-channel variance, ×10                            |
//! | 6..14  | luminance gradient-magnitude histogram (fractions)   |
//! | 14..30 | 4×4 grid of local luminance means                    |
//! | 30     | mean gradient magnitude, ×10                         |
//! | 31     | mean absolute Laplacian, ×10                         |

use crate::image::ImageTensor;

pub const STATS_DIM: usize = 32;
pub const GRID: usize = 4;

/// Upper edges of all but the last gradient bin; the first bin is the
/// "flat" bin.
pub const GRADIENT_EDGES: [f64; 7] = [0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32];

pub const CHANNEL_RANGE: std::ops::Range<usize> = 0..6;
pub const GRADIENT_RANGE: std::ops::Range<usize> = 6..14;
pub const GRID_RANGE: std::ops::Range<usize> = 14..30;

pub fn image_statistics(img: &ImageTensor) -> Vec<f64> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(STATS_DIM);

    let mut means = [0.0; 3];
    let mut vars = [0.0; 3];
    for ch in 0..c {
        let m = img.data().iter().skip(ch).step_by(c).sum::<f64>() / n;
        let v = img
            .data()
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|x| (x - m) * (x - m))
            .sum::<f64>()
            / n;
        means[ch] = m;
        vars[ch] = v;
    }
    if c == 1 {
        means = [means[0]; 3];
        vars = [vars[0]; 3];
    }
    out.extend_from_slice(&means);
    out.extend(vars.iter().map(|v| 10.0 * v));

    let lum = img.luminance();
    let at = |y: usize, x: usize| lum[y * w + x];

    let mut hist = [0.0; GRADIENT_EDGES.len() + 1];
    let mut grad_total = 0.0;
    let mut lap_total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let dx = if x + 1 < w {
                at(y, x + 1) - at(y, x)
            } else {
                0.0
            };
            let dy = if y + 1 < h {
                at(y + 1, x) - at(y, x)
            } else {
                0.0
            };
            let g = (dx * dx + dy * dy).sqrt();
            grad_total += g;
            let bin = GRADIENT_EDGES
                .iter()
                .position(|&e| g < e)
                .unwrap_or(GRADIENT_EDGES.len());
            hist[bin] += 1.0;

            let l = at(y, x.saturating_sub(1))
                + at(y, (x + 1).min(w - 1))
                + at(y.saturating_sub(1), x)
                + at((y + 1).min(h - 1), x)
                - 4.0 * at(y, x);
            lap_total += l.abs();
        }
    }
    out.extend(hist.iter().map(|v| v / n));

    for gy in 0..GRID {
        let (y0, y1) = (
            gy * h / GRID,
            ((gy + 1) * h / GRID).max(gy * h / GRID + 1).min(h),
        );
        for gx in 0..GRID {
            let (x0, x1) = (
                gx * w / GRID,
                ((gx + 1) * w / GRID).max(gx * w / GRID + 1).min(w),
            );
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += at(y, x);
                }
            }
            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out.push(10.0 * grad_total / n);
    out.push(10.0 * lap_total / n);
    debug_assert_eq!(out.len(), STATS_DIM);
    out
}

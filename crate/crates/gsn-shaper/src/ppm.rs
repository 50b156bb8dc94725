//! Binary PPM (P6, 8-bit) scatter plots of 2D point clouds. The format is
//! header `P6\n<w> <h>\n255\n` followed by row-major RGB bytes — chosen so
//! image outputs are dependency-free and byte-exact.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{GsnError, Result};

pub const GRID_SIZE: usize = 512;

const BACKGROUND: [u8; 3] = [255, 255, 255];
/// Dataset points: light gray; generated points: dark red. Overlap keeps
/// the most recently plotted layer.
const DATA_COLOR: [u8; 3] = [176, 176, 176];
const GEN_COLOR: [u8; 3] = [178, 24, 43];

/// A square RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    size: usize,
    pixels: Vec<u8>,
}

impl Raster {
    pub fn new(size: usize) -> Self {
        let mut pixels = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            pixels.extend_from_slice(&BACKGROUND);
        }
        Raster { size, pixels }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn put(&mut self, row: usize, col: usize, color: [u8; 3]) {
        let at = (row * self.size + col) * 3;
        self.pixels[at..at + 3].copy_from_slice(&color);
    }

    /// Header + raw RGB payload.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm_bytes())
            .map_err(|e| GsnError::io(path.display().to_string(), e))
    }
}

/// The square window [lo, hi]² that contains every point of both clouds,
/// padded by 5% so boundary points do not sit on the raster edge.
fn window(clouds: &[&Tensor]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in clouds {
        for &v in t.data() {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if lo > hi {
        return (-1.0, 1.0);
    }
    let pad = 0.05 * (hi - lo).max(1e-9);
    (lo - pad, hi + pad)
}

fn check_points(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 || t.cols() != 2 {
        return Err(GsnError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 2],
        });
    }
    Ok(())
}

/// Scatter-plot `points` over `background` (dataset) on a GRID_SIZE² raster
/// with a shared window; each point paints a 2×2 block. Non-finite points
/// are skipped rather than rejected — a diverged sampler still renders.
pub fn scatter(background: Option<&Tensor>, points: &Tensor) -> Result<Raster> {
    check_points("scatter", points)?;
    if let Some(bg) = background {
        check_points("scatter", bg)?;
    }
    let clouds: Vec<&Tensor> = background.iter().copied().chain([points]).collect();
    let (lo, hi) = window(&clouds);
    let mut raster = Raster::new(GRID_SIZE);
    let mut paint = |cloud: &Tensor, color: [u8; 3]| {
        for i in 0..cloud.rows() {
            let p = cloud.row_slice(i);
            if !p[0].is_finite() || !p[1].is_finite() {
                continue;
            }
            let to_px = |v: f64| (((v - lo) / (hi - lo)) * (GRID_SIZE - 1) as f64).round() as usize;
            let col = to_px(p[0]).min(GRID_SIZE - 2);
            // image rows grow downward; data y grows upward
            let row = (GRID_SIZE - 1 - to_px(p[1])).min(GRID_SIZE - 2);
            for dr in 0..2 {
                for dc in 0..2 {
                    raster.put(row + dr, col + dc, color);
                }
            }
        }
    };
    if let Some(bg) = background {
        paint(bg, DATA_COLOR);
    }
    paint(points, GEN_COLOR);
    Ok(raster)
}

//! Bone-mask post-processing, sliding-window patch extraction and
//! reconstruction of patch predictions into risk maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor4;
use crate::volume::Slice2D;

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_DILATION_PX: usize = 2;
pub const DEFAULT_PATCH_SIZE: usize = 64;
pub const DEFAULT_STRIDE: usize = 2;

/// Offsets `(dx, dy)` with `dx² + dy² <= r²`, row-major.
pub fn disk_offsets(radius: f64) -> Vec<(i64, i64)> {
    let r = radius.max(0.0).floor() as i64;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= r2 {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Dilates the foreground (`>= 0.5`) of a binary slice by a Euclidean disk.
pub fn dilate_disk(mask: &Slice2D, radius: f64) -> Slice2D {
    let offsets = disk_offsets(radius);
    let (w, h) = (mask.w as i64, mask.h as i64);
    let mut out = Slice2D::zeros(mask.w, mask.h);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as usize, y as usize) < 0.5 {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (xx, yy) = (x + dx, y + dy);
                if xx >= 0 && yy >= 0 && xx < w && yy < h {
                    out.set(xx as usize, yy as usize, 1.0);
                }
            }
        }
    }
    out
}

/// Foreground is `prob >= threshold`, then dilated by `radius_px`.
pub fn binarize_and_dilate(prob: &Slice2D, threshold: f32, radius_px: usize) -> Slice2D {
    let bin = Slice2D {
        w: prob.w,
        h: prob.h,
        data: prob.data.iter().map(|&p| if p >= threshold { 1.0 } else { 0.0 }).collect(),
    };
    if radius_px == 0 {
        bin
    } else {
        dilate_disk(&bin, radius_px as f64)
    }
}

/// Elementwise `img * mask`.
pub fn mask_crop(img: &Slice2D, mask: &Slice2D) -> Result<Slice2D> {
    if (img.w, img.h) != (mask.w, mask.h) {
        return Err(Error::Shape(format!(
            "image {}x{} and mask {}x{} differ",
            img.w, img.h, mask.w, mask.h
        )));
    }
    Slice2D::new(img.w, img.h, img.data.iter().zip(&mask.data).map(|(a, m)| a * m).collect())
}

/// Reflect-101 index into `0..n` (border pixel not repeated).
#[inline]
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Patch centers on a strided lattice inside a mask.
///
/// The window of a center `(cx, cy)` spans `cx - patch_size/2 ..` for
/// `patch_size` pixels in each axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    pub centers: Vec<(usize, usize)>,
}

impl PatchGrid {
    /// Lattice points `(i * stride, j * stride)` whose mask value is foreground.
    pub fn new(mask: &Slice2D, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::Parameter(format!(
                "patch_size and stride must be >= 1, got {patch_size} and {stride}"
            )));
        }
        let mut centers = Vec::new();
        for y in (0..mask.h).step_by(stride) {
            for x in (0..mask.w).step_by(stride) {
                if mask.get(x, y) >= 0.5 {
                    centers.push((x, y));
                }
            }
        }
        Ok(Self {
            patch_size,
            stride,
            width: mask.w,
            height: mask.h,
            centers,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Top-left corner (may be negative) of window `i`.
    pub fn origin(&self, i: usize) -> (i64, i64) {
        let (cx, cy) = self.centers[i];
        let half = (self.patch_size / 2) as i64;
        (cx as i64 - half, cy as i64 - half)
    }

    /// Copies window `i` of `img` (reflect-padded) into `out`.
    pub fn read_window(&self, img: &Slice2D, i: usize, out: &mut [f32]) {
        let ps = self.patch_size;
        let (ox, oy) = self.origin(i);
        let xs: Vec<usize> = (0..ps as i64).map(|dx| reflect_index(ox + dx, img.w)).collect();
        for dy in 0..ps {
            let row = reflect_index(oy + dy as i64, img.h) * img.w;
            let dst = &mut out[dy * ps..(dy + 1) * ps];
            for (d, &x) in dst.iter_mut().zip(&xs) {
                *d = img.data[row + x];
            }
        }
    }

    /// Windows `range` stacked into a `(n, 1, ps, ps)` batch.
    pub fn read_batch(&self, img: &Slice2D, range: std::ops::Range<usize>) -> Tensor4<f32> {
        let ps2 = self.patch_size * self.patch_size;
        let mut data = vec![0.0; range.len() * ps2];
        for (k, i) in range.clone().enumerate() {
            self.read_window(img, i, &mut data[k * ps2..(k + 1) * ps2]);
        }
        Tensor4::from_vec([range.len(), 1, self.patch_size, self.patch_size], data).expect("sized above")
    }
}

/// Windows of `img` around every lattice point inside `mask`.
pub fn extract_patches(
    img: &Slice2D,
    mask: &Slice2D,
    patch_size: usize,
    stride: usize,
) -> Result<(PatchGrid, Vec<Tensor4<f32>>)> {
    if (img.w, img.h) != (mask.w, mask.h) {
        return Err(Error::Shape(format!(
            "image {}x{} and mask {}x{} differ",
            img.w, img.h, mask.w, mask.h
        )));
    }
    let grid = PatchGrid::new(mask, patch_size, stride)?;
    let patches = (0..grid.len()).map(|i| grid.read_batch(img, i..i + 1)).collect();
    Ok((grid, patches))
}

/// How overlapping patch predictions are combined per pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Mean,
    Max,
    /// Each patch contributes only its center pixel.
    Center,
}

/// Per-pixel risk plus the number of patches that covered each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSlice {
    pub risk: Slice2D,
    pub coverage: Vec<u32>,
}

/// Incremental form of [`reconstruct_risk_map`].
#[derive(Debug, Clone)]
pub struct RiskAccumulator {
    fusion: Fusion,
    w: usize,
    h: usize,
    acc: Vec<f64>,
    coverage: Vec<u32>,
}

impl RiskAccumulator {
    pub fn new(w: usize, h: usize, fusion: Fusion) -> Self {
        Self {
            fusion,
            w,
            h,
            acc: vec![0.0; w * h],
            coverage: vec![0; w * h],
        }
    }

    /// Adds the prediction for window `i` of `grid`.
    pub fn add(&mut self, grid: &PatchGrid, i: usize, pred: &[f32]) {
        let ps = grid.patch_size;
        if self.fusion == Fusion::Center {
            let (cx, cy) = grid.centers[i];
            let j = cy * self.w + cx;
            self.acc[j] += pred[(ps / 2) * ps + ps / 2] as f64;
            self.coverage[j] += 1;
            return;
        }
        let (ox, oy) = grid.origin(i);
        let x0 = ox.max(0) as usize;
        let x1 = ((ox + ps as i64) as usize).min(self.w);
        let y0 = oy.max(0) as usize;
        let y1 = ((oy + ps as i64) as usize).min(self.h);
        for y in y0..y1 {
            let py = (y as i64 - oy) as usize;
            for x in x0..x1 {
                let v = pred[py * ps + (x as i64 - ox) as usize] as f64;
                let j = y * self.w + x;
                if self.fusion == Fusion::Max {
                    if self.coverage[j] == 0 || v > self.acc[j] {
                        self.acc[j] = v;
                    }
                } else {
                    self.acc[j] += v;
                }
                self.coverage[j] += 1;
            }
        }
    }

    pub fn finish(self) -> RiskSlice {
        let data = self
            .acc
            .iter()
            .zip(&self.coverage)
            .map(|(&a, &c)| match (c, self.fusion) {
                (0, _) => 0.0,
                (_, Fusion::Max) => a.clamp(0.0, 1.0) as f32,
                (c, _) => (a / c as f64).clamp(0.0, 1.0) as f32,
            })
            .collect();
        RiskSlice {
            risk: Slice2D {
                w: self.w,
                h: self.h,
                data,
            },
            coverage: self.coverage,
        }
    }
}

/// Fuses per-patch predictions (each `patch_size²`, row-major) into a risk map.
pub fn reconstruct_risk_map<P: AsRef<[f32]>>(grid: &PatchGrid, preds: &[P], fusion: Fusion) -> Result<RiskSlice> {
    if preds.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} patch centers",
            preds.len(),
            grid.len()
        )));
    }
    let ps2 = grid.patch_size * grid.patch_size;
    let mut acc = RiskAccumulator::new(grid.width, grid.height, fusion);
    for (i, p) in preds.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != ps2 {
            return Err(Error::Shape(format!(
                "prediction {i} has {} values, expected {ps2}",
                p.len()
            )));
        }
        acc.add(grid, i, p);
    }
    Ok(acc.finish())
}

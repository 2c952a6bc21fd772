//! Bias-field correction and affine alignment of follow-up scans.
//!
//! Coordinates are millimetres with voxel `(i, j, k)` of a volume at
//! `(i * sx, j * sy, k * sz)`. A transform `T` used by [`resample`] pulls
//! values: the output voxel at world point `p` takes the source value at
//! `T(p)`. [`register_affine`] therefore returns the transform that brings
//! the moving image into the fixed image's grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::LongitudinalCase;
use crate::volume::{Geometry, MaskVolume, Volume};

/// 3x4 affine map in millimetres: `y = L x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// Row-major `[L | t]`.
    pub m: [[f64; 4]; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    pub fn new(m: [[f64; 4]; 3]) -> Result<Self> {
        let t = Self { m };
        if !m.iter().flatten().all(|v| v.is_finite()) || t.det().abs() <= 1e-9 {
            return Err(Error::Parameter(format!("affine linear part is singular: {m:?}")));
        }
        Ok(t)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        for i in 0..3 {
            a.m[i][3] = t[i];
        }
        a
    }

    /// Rotation by Euler angles (degrees, applied x then y then z) about
    /// `center`, followed by translation `t`.
    pub fn rigid(rotation_deg: [f64; 3], t: [f64; 3], center: [f64; 3]) -> Self {
        let [ax, ay, az] = rotation_deg.map(f64::to_radians);
        let rx = [[1.0, 0.0, 0.0], [0.0, ax.cos(), -ax.sin()], [0.0, ax.sin(), ax.cos()]];
        let ry = [[ay.cos(), 0.0, ay.sin()], [0.0, 1.0, 0.0], [-ay.sin(), 0.0, ay.cos()]];
        let rz = [[az.cos(), -az.sin(), 0.0], [az.sin(), az.cos(), 0.0], [0.0, 0.0, 1.0]];
        let r = mat_mul(&rz, &mat_mul(&ry, &rx));
        Self::from_centered(r, center, t)
    }

    /// `y = L (x - c) + c + t`.
    pub fn from_centered(l: [[f64; 3]; 3], c: [f64; 3], t: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            let mut off = c[i] + t[i];
            for j in 0..3 {
                m[i][j] = l[i][j];
                off -= l[i][j] * c[j];
            }
            m[i][3] = off;
        }
        Self { m }
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        let mut l = [[0.0; 3]; 3];
        for i in 0..3 {
            l[i].copy_from_slice(&self.m[i][..3]);
        }
        l
    }

    pub fn det(&self) -> f64 {
        let a = self.linear();
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() <= 1e-9 {
            return Err(Error::Parameter("affine transform is not invertible".into()));
        }
        let a = self.linear();
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / d;
            }
        }
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&inv[i]);
            m[i][3] = -(0..3).map(|j| inv[i][j] * self.m[j][3]).sum::<f64>();
        }
        Ok(Self { m })
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..4 {
                let mut v = if j == 3 { self.m[i][3] } else { 0.0 };
                for k in 0..3 {
                    v += self.m[i][k] * other.m[k][j];
                }
                m[i][j] = v;
            }
        }
        Self { m }
    }

    /// The twelve numbers, row-major.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[4 * i..4 * i + 4].copy_from_slice(&self.m[i]);
        }
        out
    }

    pub fn from_row_major(v: [f64; 12]) -> Result<Self> {
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i].copy_from_slice(&v[4 * i..4 * i + 4]);
        }
        Self::new(m)
    }

    /// Largest displacement difference from `other` over the corners of `g`.
    pub fn max_corner_distance(&self, other: &Self, g: Geometry) -> f64 {
        let mut worst = 0.0f64;
        for corner in 0..8 {
            let p: [f64; 3] = std::array::from_fn(|a| {
                if corner >> a & 1 == 1 {
                    (g.dims[a] - 1) as f64 * g.spacing[a] as f64
                } else {
                    0.0
                }
            });
            let (u, v) = (self.apply(p), other.apply(p));
            let d = (0..3).map(|a| (u[a] - v[a]).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(d);
        }
        worst
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// World-space center of a grid.
pub fn grid_center(g: Geometry) -> [f64; 3] {
    std::array::from_fn(|a| (g.dims[a] - 1) as f64 * g.spacing[a] as f64 / 2.0)
}

/// Image samples on a grid with an origin, used internally for pyramids.
#[derive(Debug, Clone)]
struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
}

impl Grid {
    fn from_volume(v: &Volume) -> Self {
        Self {
            dims: v.dims(),
            spacing: v.spacing().map(f64::from),
            origin: [0.0; 3],
            data: v.data().to_vec(),
        }
    }

    /// Averages 2x along every axis that keeps at least four voxels.
    fn downsample(&self) -> Self {
        let f: [usize; 3] = std::array::from_fn(|a| if self.dims[a] / 2 >= 4 { 2 } else { 1 });
        let dims: [usize; 3] = std::array::from_fn(|a| self.dims[a] / f[a]);
        let [nx, ny, _] = self.dims;
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut s = 0.0f32;
                    for dz in 0..f[2] {
                        for dy in 0..f[1] {
                            for dx in 0..f[0] {
                                let (xx, yy, zz) = (x * f[0] + dx, y * f[1] + dy, z * f[2] + dz);
                                s += self.data[xx + nx * (yy + ny * zz)];
                            }
                        }
                    }
                    data.push(s / (f[0] * f[1] * f[2]) as f32);
                }
            }
        }
        Self {
            dims,
            spacing: std::array::from_fn(|a| self.spacing[a] * f[a] as f64),
            origin: std::array::from_fn(|a| self.origin[a] + 0.5 * self.spacing[a] * (f[a] - 1) as f64),
            data,
        }
    }

    #[inline]
    fn world(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Trilinear value and world-space gradient at world point `p`;
    /// `None` outside the sampled field.
    #[inline]
    fn sample_grad(&self, p: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let mut i0 = [0usize; 3];
        let mut fr = [0.0f64; 3];
        let mut step = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin[a]) / self.spacing[a];
            let n = self.dims[a];
            if !(u >= -1e-9 && u <= (n - 1) as f64 + 1e-9) {
                return None;
            }
            let u = u.clamp(0.0, (n - 1) as f64);
            let fl = (u.floor() as usize).min(n.saturating_sub(2));
            i0[a] = fl;
            fr[a] = u - fl as f64;
            step[a] = if n > 1 { 1 } else { 0 };
        }
        let [nx, ny, _] = self.dims;
        let idx = |x: usize, y: usize, z: usize| self.data[x + nx * (y + ny * z)] as f64;
        let (x0, y0, z0) = (i0[0], i0[1], i0[2]);
        let (x1, y1, z1) = (x0 + step[0], y0 + step[1], z0 + step[2]);
        let c000 = idx(x0, y0, z0);
        let c100 = idx(x1, y0, z0);
        let c010 = idx(x0, y1, z0);
        let c110 = idx(x1, y1, z0);
        let c001 = idx(x0, y0, z1);
        let c101 = idx(x1, y0, z1);
        let c011 = idx(x0, y1, z1);
        let c111 = idx(x1, y1, z1);
        let [fx, fy, fz] = fr;
        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        let v = c0 + (c1 - c0) * fz;
        let dx = ((c100 - c000) * (1.0 - fy) + (c110 - c010) * fy) * (1.0 - fz)
            + ((c101 - c001) * (1.0 - fy) + (c111 - c011) * fy) * fz;
        let dy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
        let dz = c1 - c0;
        let g = [
            if step[0] == 1 { dx / self.spacing[0] } else { 0.0 },
            if step[1] == 1 { dy / self.spacing[1] } else { 0.0 },
            if step[2] == 1 { dz / self.spacing[2] } else { 0.0 },
        ];
        Some((v, g))
    }
}

/// Interpolation used by [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Resamples `v` onto `target`: output voxel `p` takes `v` at `t(p)`.
/// Points outside the source field are 0.
pub fn resample(v: &Volume, t: &AffineTransform, target: Geometry, interp: Interpolation) -> Volume {
    let src = Grid::from_volume(v);
    let [nx, ny, nz] = target.dims;
    let sp = target.spacing.map(f64::from);
    let mut data = Vec::with_capacity(target.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = t.apply([x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]]);
                let val = match interp {
                    Interpolation::Trilinear => src.sample_grad(q).map_or(0.0, |(v, _)| v as f32),
                    Interpolation::Nearest => {
                        let mut idx = [0usize; 3];
                        let mut inside = true;
                        for a in 0..3 {
                            let u = (q[a] / src.spacing[a]).round();
                            if u < 0.0 || u >= src.dims[a] as f64 {
                                inside = false;
                                break;
                            }
                            idx[a] = u as usize;
                        }
                        if inside {
                            v.get(idx[0], idx[1], idx[2])
                        } else {
                            0.0
                        }
                    }
                };
                data.push(val);
            }
        }
    }
    Volume::from_vec(target, data).expect("interpolated values are finite")
}

/// Trilinear resampling of an intensity volume.
pub fn resample_volume(v: &Volume, t: &AffineTransform, target: Geometry) -> Volume {
    resample(v, t, target, Interpolation::Trilinear)
}

/// Nearest-neighbour resampling; a binary mask stays binary.
pub fn resample_mask(m: &MaskVolume, t: &AffineTransform, target: Geometry) -> MaskVolume {
    MaskVolume::new(resample(m.volume(), t, target, Interpolation::Nearest)).expect("values drawn from a mask")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationParams {
    /// Pyramid levels; each coarser level halves the resolution.
    pub levels: usize,
    pub max_iterations: usize,
    /// Stop once the relative objective change of an accepted step is below this.
    pub tolerance: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            levels: 3,
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub transform: AffineTransform,
    /// Full-resolution mean squared difference at the identity.
    pub identity_objective: f64,
    /// Full-resolution mean squared difference at `transform`.
    pub final_objective: f64,
    /// Accepted objective values per level, coarsest first.
    pub trace: Vec<Vec<f64>>,
}

/// Twelve-parameter state: translation (mm) and `R * (L - I)`, where `R` is
/// a characteristic radius so that a unit step moves points about 1 mm.
struct AffineParams {
    center: [f64; 3],
    radius: f64,
}

impl AffineParams {
    fn transform(&self, p: &[f64; 12]) -> AffineTransform {
        let mut l = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                l[i][j] = if i == j { 1.0 } else { 0.0 } + p[3 + 3 * i + j] / self.radius;
            }
        }
        AffineTransform::from_centered(l, self.center, [p[0], p[1], p[2]])
    }

    /// Mean squared difference over the samples that land inside the moving
    /// grid, its gradient and the Gauss-Newton matrix `2 J^T J / n`. Infinite
    /// when fewer than a quarter of the fixed voxels overlap.
    fn evaluate(&self, fixed: &Grid, moving: &Grid, p: &[f64; 12], with_grad: bool) -> (f64, [f64; 12], [[f64; 12]; 12]) {
        let t = self.transform(p);
        let [nx, ny, nz] = fixed.dims;
        let mut n = 0usize;
        let mut sse = 0.0;
        let mut grad = [0.0; 12];
        let mut jtj = [[0.0; 12]; 12];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let w = fixed.world(x, y, z);
                    let f = fixed.data[x + nx * (y + ny * z)] as f64;
                    let q = t.apply(w);
                    match moving.sample_grad(q) {
                        Some((m, g)) => {
                            let r = m - f;
                            sse += r * r;
                            n += 1;
                            if with_grad {
                                let d = [w[0] - self.center[0], w[1] - self.center[1], w[2] - self.center[2]];
                                let mut jac = [0.0; 12];
                                for i in 0..3 {
                                    jac[i] = g[i];
                                    for j in 0..3 {
                                        jac[3 + 3 * i + j] = g[i] * d[j] / self.radius;
                                    }
                                }
                                for a in 0..12 {
                                    grad[a] += r * jac[a];
                                    for b in a..12 {
                                        jtj[a][b] += jac[a] * jac[b];
                                    }
                                }
                            }
                        }
                        None => {}
                    }
                }
            }
        }
        if n < fixed.data.len() / 4 {
            return (f64::INFINITY, grad, jtj);
        }
        let n = n as f64;
        for a in 0..12 {
            grad[a] *= 2.0 / n;
            for b in a..12 {
                jtj[a][b] *= 2.0 / n;
                jtj[b][a] = jtj[a][b];
            }
        }
        (sse / n, grad, jtj)
    }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve12(mut a: [[f64; 12]; 12], mut b: [f64; 12]) -> Option<[f64; 12]> {
    for col in 0..12 {
        let piv = (col..12).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 || !a[piv][col].is_finite() {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..12 {
            let f = a[row][col] / a[col][col];
            for k in col..12 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 12];
    for row in (0..12).rev() {
        let s: f64 = (row + 1..12).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Affine registration minimizing the mean squared intensity difference,
/// coarse to fine, by Levenberg-Marquardt iterations on the Gauss-Newton
/// system. Each accepted step lowers the objective.
pub fn register_affine(fixed: &Volume, moving: &Volume, params: RegistrationParams) -> Result<Registration> {
    if params.levels == 0 {
        return Err(Error::Parameter("registration needs at least one level".into()));
    }
    let mut fixed_pyr = vec![Grid::from_volume(fixed)];
    let mut moving_pyr = vec![Grid::from_volume(moving)];
    for _ in 1..params.levels {
        fixed_pyr.push(fixed_pyr.last().expect("non-empty").downsample());
        moving_pyr.push(moving_pyr.last().expect("non-empty").downsample());
    }
    let g = fixed.geometry();
    let center = grid_center(g);
    let radius = (0..3)
        .map(|a| (g.dims[a] as f64 * g.spacing[a] as f64 / 2.0).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(1.0);
    let model = AffineParams { center, radius };
    let identity = [0.0; 12];
    let identity_objective = model.evaluate(&fixed_pyr[0], &moving_pyr[0], &identity, false).0;
    let mut p = identity;
    let mut trace = Vec::with_capacity(params.levels);
    for level in (0..params.levels).rev() {
        let (f, m) = (&fixed_pyr[level], &moving_pyr[level]);
        let (mut obj, mut grad, mut jtj) = model.evaluate(f, m, &p, true);
        let mut level_trace = vec![obj];
        let mut lambda = 1e-3;
        for iteration in 0..params.max_iterations {
            let mut accepted = None;
            while lambda < 1e10 {
                let mut a = jtj;
                for k in 0..12 {
                    a[k][k] += lambda * jtj[k][k].max(1e-12);
                }
                let Some(step) = solve12(a, grad.map(|g| -g)) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial: [f64; 12] = std::array::from_fn(|k| p[k] + step[k]);
                let (t_obj, _, _) = model.evaluate(f, m, &trial, false);
                // an infinite value marks too little overlap and is simply rejected
                if t_obj.is_nan() {
                    return Err(Error::Divergence {
                        level,
                        iteration,
                        last_stable: model.transform(&p).to_row_major(),
                    });
                }
                if t_obj < obj {
                    accepted = Some((trial, t_obj));
                    lambda = (lambda / 10.0).max(1e-9);
                    break;
                }
                lambda *= 10.0;
            }
            let Some((trial, t_obj)) = accepted else { break };
            let rel = (obj - t_obj) / obj.abs().max(f64::MIN_POSITIVE);
            p = trial;
            obj = t_obj;
            level_trace.push(obj);
            if rel < params.tolerance {
                break;
            }
            (_, grad, jtj) = model.evaluate(f, m, &p, true);
        }
        trace.push(level_trace);
    }
    let final_objective = model.evaluate(&fixed_pyr[0], &moving_pyr[0], &p, false).0;
    // Coarse-level gains may not carry over to full resolution.
    let (transform, final_objective) = if final_objective <= identity_objective {
        (model.transform(&p), final_objective)
    } else {
        (AffineTransform::identity(), identity_objective)
    };
    Ok(Registration {
        transform,
        identity_objective,
        final_objective,
        trace,
    })
}

/// Homomorphic bias-field correction. The log-intensity of nonzero voxels
/// is smoothed with a Gaussian of the given FWHM (normalized convolution
/// over the nonzero support); the volume is divided by the exponential of
/// that field and rescaled so the mean over nonzero voxels is unchanged.
/// Zero voxels are background and stay zero.
pub fn bias_correct(v: &Volume, fwhm_mm: f64) -> Result<Volume> {
    if !(fwhm_mm.is_finite() && fwhm_mm > 0.0) {
        return Err(Error::Parameter(format!("fwhm must be positive, got {fwhm_mm}")));
    }
    if v.data().iter().any(|&x| x < 0.0) {
        return Err(Error::Precondition("bias correction needs non-negative intensities".into()));
    }
    let support: Vec<bool> = v.data().iter().map(|&x| x > 0.0).collect();
    let count = support.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(Error::Degenerate("bias correction of an all-zero volume".into()));
    }
    let mean_before = v.data().iter().map(|&x| x as f64).sum::<f64>() / count as f64;
    let logs: Vec<f64> = v.data().iter().map(|&x| if x > 0.0 { (x as f64).ln() } else { 0.0 }).collect();
    let weights: Vec<f64> = support.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let sigma_mm = fwhm_mm / (8.0 * std::f64::consts::LN_2).sqrt();
    let sigma: [f64; 3] = std::array::from_fn(|a| sigma_mm / v.spacing()[a] as f64);
    let num = gaussian_smooth(&logs, v.dims(), sigma);
    let den = gaussian_smooth(&weights, v.dims(), sigma);
    let mut corrected: Vec<f64> = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if support[i] { x as f64 / (num[i] / den[i]).exp() } else { 0.0 })
        .collect();
    let mean_after = corrected.iter().sum::<f64>() / count as f64;
    let scale = mean_before / mean_after;
    corrected.iter_mut().for_each(|x| *x *= scale);
    Volume::from_vec(v.geometry(), corrected.into_iter().map(|x| x as f32).collect())
}

/// Separable Gaussian filter with zero boundary, kernel truncated at 3 sigma.
fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma: [f64; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for a in 0..3 {
        if sigma[a] <= 0.0 || dims[a] == 1 {
            continue;
        }
        let r = (3.0 * sigma[a]).ceil() as isize;
        let kernel: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma[a] * sigma[a])).exp()).collect();
        let ksum: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
        let mut next = vec![0.0; cur.len()];
        let n = dims[a] as isize;
        let s = strides[a];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / s) % dims[a]) as isize;
            let base = i - pos as usize * s;
            let mut acc = 0.0;
            for (ki, k) in (-r..=r).enumerate() {
                let q = pos + k;
                if q >= 0 && q < n {
                    acc += kernel[ki] * cur[base + q as usize * s];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Aligns the follow-up scan and its annotations to the baseline grid.
/// The transform is recorded in the case provenance.
pub fn align_pair(case: &LongitudinalCase, params: RegistrationParams) -> Result<(LongitudinalCase, Registration)> {
    let g = case.i_t.geometry();
    if case.i_t1.geometry() != g || case.a_t1.geometry() != g {
        return Err(Error::Geometry(format!(
            "case {}: follow-up geometry does not match baseline",
            case.patient_id
        )));
    }
    let reg = register_affine(&case.i_t, &case.i_t1, params)?;
    let mut out = case.clone();
    out.i_t1 = resample_volume(&case.i_t1, &reg.transform, g);
    out.a_t1 = resample_mask(&case.a_t1, &reg.transform, g);
    out.provenance.alignment = Some(reg.transform.to_row_major());
    Ok((out, reg))
}

/// Steps applied to a case before training or inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Bias-field smoothing width; `None` skips bias correction.
    pub bias_fwhm_mm: Option<f64>,
    pub normalize: bool,
    /// `None` skips registration.
    pub registration: Option<RegistrationParams>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            bias_fwhm_mm: Some(80.0),
            normalize: true,
            registration: Some(RegistrationParams::default()),
        }
    }
}

/// Bias correction, percentile normalization and follow-up alignment, in
/// that order.
pub fn preprocess_case(case: &LongitudinalCase, config: &PreprocessConfig) -> Result<(LongitudinalCase, Option<Registration>)> {
    case.check_geometry()?;
    let mut out = case.clone();
    if let Some(fwhm) = config.bias_fwhm_mm {
        out.i_t = bias_correct(&out.i_t, fwhm)?;
        out.i_t1 = bias_correct(&out.i_t1, fwhm)?;
        out.provenance.bias_corrected = true;
    }
    if config.normalize {
        out.i_t = out.i_t.normalize_intensity();
        out.i_t1 = out.i_t1.normalize_intensity();
        out.provenance.normalized = true;
    }
    match config.registration {
        Some(params) => {
            let (aligned, reg) = align_pair(&out, params)?;
            Ok((aligned, Some(reg)))
        }
        None => Ok((out, None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_volume(shift: [f64; 3]) -> Volume {
        let g = Geometry::new([32, 28, 20], [1.0, 1.0, 1.0]).unwrap();
        Volume::from_fn(g, |x, y, z| {
            let p = [x as f64 - shift[0], y as f64 - shift[1], z as f64 - shift[2]];
            let a = (-((p[0] - 14.0).powi(2) + (p[1] - 12.0).powi(2)) / 30.0 - (p[2] - 9.0).powi(2) / 20.0).exp();
            let b = (-((p[0] - 20.0).powi(2) + (p[1] - 17.0).powi(2) + (p[2] - 11.0).powi(2)) / 8.0).exp();
            (a + 0.6 * b) as f32
        })
        .unwrap()
    }

    #[test]
    fn inverse_and_compose() {
        let t = AffineTransform::rigid([3.0, -2.0, 4.0], [1.0, 2.0, -3.0], [5.0, 5.0, 5.0]);
        let id = t.compose(&t.inverse().unwrap());
        let g = Geometry::new([10, 10, 10], [1.0; 3]).unwrap();
        assert!(id.max_corner_distance(&AffineTransform::identity(), g) < 1e-9);
        let rm = t.to_row_major();
        assert_eq!(AffineTransform::from_row_major(rm).unwrap(), t);
        assert!(AffineTransform::new([[0.0; 4]; 3]).is_err());
    }

    #[test]
    fn identity_resample_is_exact() {
        let v = blob_volume([0.0; 3]);
        let r = resample_volume(&v, &AffineTransform::identity(), v.geometry());
        for (a, b) in v.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_translation_moves_delta() {
        let g = Geometry::new([9, 8, 7], [1.0, 2.0, 3.0]).unwrap();
        let delta = Volume::from_fn(g, |x, y, z| if (x, y, z) == (4, 4, 3) { 1.0 } else { 0.0 }).unwrap();
        // pull transform: output p samples source at p - (2, 1, 1) voxels
        let t = AffineTransform::translation([-2.0, -2.0, -3.0]);
        for interp in [Interpolation::Trilinear, Interpolation::Nearest] {
            let r = resample(&delta, &t, g, interp);
            assert_eq!(r.get(6, 5, 4), 1.0);
            assert_eq!(r.data().iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn mask_resampling_stays_binary() {
        let g = Geometry::new([12, 12, 6], [1.0; 3]).unwrap();
        let m = MaskVolume::from_predicate(g, |x, y, _| (x as i32 - 6).pow(2) + (y as i32 - 5).pow(2) < 10);
        let t = AffineTransform::rigid([0.0, 0.0, 17.0], [0.3, -0.7, 0.2], grid_center(g));
        assert!(resample_mask(&m, &t, g).is_binary());
    }

    #[test]
    fn registration_of_identical_images() {
        let v = blob_volume([0.0; 3]);
        let r = register_affine(&v, &v, RegistrationParams::default()).unwrap();
        assert!(r.transform.max_corner_distance(&AffineTransform::identity(), v.geometry()) < 1e-3);
        assert!(r.final_objective <= r.identity_objective);
        assert!(r.identity_objective.abs() < 1e-12);
    }

    #[test]
    fn registration_recovers_translation() {
        let fixed = blob_volume([0.0; 3]);
        let moving = blob_volume([3.0, -2.0, 1.0]);
        let r = register_affine(&fixed, &moving, RegistrationParams::default()).unwrap();
        // pulling moving into fixed space samples at p + shift
        let p = r.transform.apply(grid_center(fixed.geometry()));
        let c = grid_center(fixed.geometry());
        let rec = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        for (got, want) in rec.iter().zip([3.0, -2.0, 1.0]) {
            assert!((got - want).abs() < 0.5, "recovered {rec:?}");
        }
        assert!(r.final_objective < r.identity_objective);
        for level in &r.trace {
            assert!(level.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn bias_correct_constant_and_background() {
        let g = Geometry::new([10, 10, 6], [2.0; 3]).unwrap();
        let v = Volume::from_fn(g, |x, _, _| if x < 2 { 0.0 } else { 3.0 }).unwrap();
        let c = bias_correct(&v, 40.0).unwrap();
        for (a, b) in v.data().iter().zip(c.data()) {
            if *a == 0.0 {
                assert_eq!(*b, 0.0);
            } else {
                assert!(((a - b) / a).abs() < 1e-5);
            }
        }
        assert!(matches!(bias_correct(&Volume::zeros(g), 40.0), Err(Error::Degenerate(_))));
    }
}

//! Deterministic synthetic longitudinal cohorts.
//!
//! Each case is a body ellipse of soft tissue containing bright tubular
//! bones along z. Lesions are dark spheres inside bone:
//!
//! - *emerging*: full contrast at `t + 1`, annotated only in `A_t1`; at `t`
//!   the same sphere is darkened by `precursor_contrast` of the full
//!   lesion contrast and left unannotated.
//! - *stable*: full contrast and annotated at both time points.
//! - *resolved*: a fraction of the stable lesions that disappear at `t + 1`.
//!
//! Anomalies are bright or dark bone spots present at both time points
//! and never annotated; they stand in for bone irregularities that do not
//! progress. They are an operationalization, not a clinical model.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::dilate_disk;
use crate::preprocess::{self, AffineTransform};
use crate::seed;
use crate::volume::{Geometry, MaskVolume, Slice2D, Volume};

pub const SOFT_TISSUE: f32 = 0.35;
pub const BONE: f32 = 0.8;
pub const LESION: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Thorax,
    Legs,
}

impl BodyPart {
    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Thorax => "thorax",
            BodyPart::Legs => "legs",
        }
    }
}

/// Per-slice body-part labels: thorax for `z < boundary`, legs above.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPartSplit {
    pub boundary: usize,
    pub labels: Vec<BodyPart>,
}

impl BodyPartSplit {
    pub fn from_boundary(nz: usize, boundary: usize) -> Self {
        let boundary = boundary.min(nz);
        let labels = (0..nz)
            .map(|z| if z < boundary { BodyPart::Thorax } else { BodyPart::Legs })
            .collect();
        Self { boundary, labels }
    }

    /// Boundary at `round(fraction * nz)`.
    pub fn from_fraction(nz: usize, fraction: f64) -> Self {
        Self::from_boundary(nz, (fraction.clamp(0.0, 1.0) * nz as f64).round() as usize)
    }

    pub fn label(&self, z: usize) -> BodyPart {
        self.labels[z]
    }
}

/// Known misalignment baked into the follow-up scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Misalignment {
    pub translation_vox: [f64; 3],
    pub rotation_deg: [f64; 3],
}

impl Misalignment {
    /// Pull transform that maps the aligned follow-up onto its misaligned grid.
    pub fn transform(&self, g: Geometry) -> AffineTransform {
        let t: [f64; 3] = std::array::from_fn(|a| self.translation_vox[a] * g.spacing[a] as f64);
        AffineTransform::rigid(self.rotation_deg, t, preprocess::grid_center(g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub n_bones: usize,
    pub n_emerging_lesions: usize,
    pub n_stable_lesions: usize,
    pub n_anomalies: usize,
    /// Fraction of the full lesion contrast already visible at `t` for
    /// emerging lesions.
    pub precursor_contrast: f64,
    /// Contrast of anomalies relative to the full lesion contrast.
    pub anomaly_contrast: f64,
    pub noise_sigma: f64,
    /// In-plane lesion radius in voxels.
    pub lesion_radius: f64,
    /// Fraction of stable lesions that are gone at `t + 1`.
    pub resolved_fraction: f64,
    /// In-plane margin (voxels) by which lesions may extend past bone.
    pub lesion_growth_margin: usize,
    /// Fraction of slices (from z = 0) labelled thorax.
    pub thorax_fraction: f64,
    /// Peak relative amplitude of a smooth multiplicative bias field; 0 disables.
    pub bias_strength: f64,
    pub misalignment: Option<Misalignment>,
}

impl PhantomParams {
    /// 96 x 96 x 16 volumes at 2 x 2 x 4 mm for desk-scale experiments.
    pub fn desk_scale() -> Self {
        Self {
            seed: 0,
            dims: [96, 96, 16],
            spacing: [2.0, 2.0, 4.0],
            n_bones: 4,
            n_emerging_lesions: 3,
            n_stable_lesions: 2,
            n_anomalies: 2,
            precursor_contrast: 0.4,
            anomaly_contrast: 0.4,
            noise_sigma: 0.03,
            lesion_radius: 3.0,
            resolved_fraction: 0.0,
            lesion_growth_margin: 0,
            thorax_fraction: 0.5,
            bias_strength: 0.0,
            misalignment: None,
        }
    }

    /// 384 x 384 x 30 volumes matching the full-resolution network inputs.
    pub fn paper_scale() -> Self {
        Self {
            dims: [384, 384, 30],
            spacing: [1.0, 1.0, 5.0],
            lesion_radius: 12.0,
            ..Self::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.dims, self.spacing)?;
        let unit = [
            ("precursor_contrast", self.precursor_contrast),
            ("anomaly_contrast", self.anomaly_contrast),
            ("resolved_fraction", self.resolved_fraction),
            ("thorax_fraction", self.thorax_fraction),
            ("bias_strength", self.bias_strength),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.lesion_radius.is_finite() && self.lesion_radius >= 1.0) {
            return Err(Error::Config(format!("lesion_radius must be >= 1, got {}", self.lesion_radius)));
        }
        let [nx, ny, nz] = self.dims;
        if nx.min(ny) < 24 || nz < 4 {
            return Err(Error::Config(format!("phantom dims {:?} too small (need >= 24 x 24 x 4)", self.dims)));
        }
        if self.n_bones == 0 && self.n_emerging_lesions + self.n_stable_lesions + self.n_anomalies > 0 {
            return Err(Error::Config("lesions and anomalies need at least one bone".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            dims: self.dims,
            spacing: self.spacing,
        }
    }

    fn bone_radius(&self) -> f64 {
        (0.07 * self.dims[0].min(self.dims[1]) as f64).max(3.0)
    }
}

/// Alignment and other processing applied to a case after generation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseProvenance {
    /// Twelve numbers, row-major, of the transform used to align `t + 1`.
    pub alignment: Option<[f64; 12]>,
    pub bias_corrected: bool,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalCase {
    pub patient_id: String,
    pub i_t: Volume,
    pub i_t1: Volume,
    /// Binary bone mask at `t`.
    pub b_t: MaskVolume,
    /// Binary lesion annotations at `t`.
    pub a_t: MaskVolume,
    /// Binary lesion annotations at `t + 1`.
    pub a_t1: MaskVolume,
    pub body_parts: BodyPartSplit,
    pub provenance: CaseProvenance,
}

impl LongitudinalCase {
    pub fn geometry(&self) -> Geometry {
        self.i_t.geometry()
    }

    pub fn check_geometry(&self) -> Result<()> {
        let g = self.geometry();
        let all = [
            ("i_t1", self.i_t1.geometry()),
            ("b_t", self.b_t.geometry()),
            ("a_t", self.a_t.geometry()),
            ("a_t1", self.a_t1.geometry()),
        ];
        for (name, other) in all {
            if other != g {
                return Err(Error::Geometry(format!(
                    "case {}: {name} {:?} does not match i_t {:?}",
                    self.patient_id, other, g
                )));
            }
        }
        if self.body_parts.labels.len() != g.dims[2] {
            return Err(Error::Geometry(format!(
                "case {}: {} body-part labels for {} slices",
                self.patient_id,
                self.body_parts.labels.len(),
                g.dims[2]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Bone {
    center: [f64; 2],
    drift: [f64; 2],
    radius: f64,
    wobble_phase: f64,
    wobble_freq: f64,
    z0: f64,
    z1: f64,
}

impl Bone {
    /// Cross-section (center, radius) at slice z, if the bone is present.
    fn section(&self, z: f64, nz: usize) -> Option<([f64; 2], f64)> {
        if z < self.z0 || z > self.z1 {
            return None;
        }
        let rel = (z - (nz as f64 - 1.0) / 2.0) / nz as f64;
        let c = [self.center[0] + self.drift[0] * rel, self.center[1] + self.drift[1] * rel];
        let mut r = self.radius * (1.0 + 0.12 * (self.wobble_freq * z / nz as f64 * std::f64::consts::TAU + self.wobble_phase).sin());
        // rounded caps over the last two slices
        let cap = 2.0;
        let d = (z - self.z0).min(self.z1 - z);
        if d < cap {
            r *= (1.0 - ((cap - d) / (cap + 1.0)).powi(2)).sqrt();
        }
        Some((c, r))
    }

    fn contains(&self, x: f64, y: f64, z: f64, nz: usize) -> bool {
        self.section(z, nz)
            .is_some_and(|(c, r)| (x - c[0]).powi(2) + (y - c[1]).powi(2) <= r * r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SpotKind {
    Emerging,
    Stable { resolves: bool },
    Anomaly { bright: bool },
}

#[derive(Debug, Clone)]
struct Spot {
    kind: SpotKind,
    center: [f64; 3],
    /// In-plane radius in voxels; the z radius follows from the spacing.
    radius: f64,
}

impl Spot {
    fn radius_z(&self, spacing: [f32; 3]) -> f64 {
        (self.radius * spacing[0] as f64 / spacing[2] as f64).max(0.5)
    }

    fn contains(&self, x: f64, y: f64, z: f64, spacing: [f32; 3]) -> bool {
        let rz = self.radius_z(spacing);
        let d = ((x - self.center[0]) / self.radius).powi(2)
            + ((y - self.center[1]) / self.radius).powi(2)
            + ((z - self.center[2]) / rz).powi(2);
        d <= 1.0
    }
}

const MAX_TRIES: usize = 2000;
const BODY_TAPER: f64 = 0.1;

fn place_bones(p: &PhantomParams, rng: &mut ChaCha8Rng, body: ([f64; 2], [f64; 2])) -> Result<Vec<Bone>> {
    let [nx, ny, nz] = p.dims;
    let rb = p.bone_radius();
    let (bc, semi) = body;
    let mut bones: Vec<Bone> = Vec::with_capacity(p.n_bones);
    let mut tries = 0;
    while bones.len() < p.n_bones {
        tries += 1;
        if tries > MAX_TRIES {
            return Err(Error::Generation(format!(
                "could not place {} bones of radius {rb:.1} in {nx}x{ny} after {MAX_TRIES} tries",
                p.n_bones
            )));
        }
        let radius = rb * rng.random_range(0.85..1.15);
        let drift = [rng.random_range(-0.1..0.1) * nx as f64, rng.random_range(-0.1..0.1) * ny as f64];
        let reach = radius * 1.15 + drift[0].abs().max(drift[1].abs()) / 2.0 + 2.0;
        let cx = rng.random_range(bc[0] - semi[0]..bc[0] + semi[0]);
        let cy = rng.random_range(bc[1] - semi[1]..bc[1] + semi[1]);
        // the whole tube must stay inside the body ellipse
        let inside = ((cx - bc[0]) / (semi[0] - reach)).powi(2) + ((cy - bc[1]) / (semi[1] - reach)).powi(2) <= 1.0;
        if !inside {
            continue;
        }
        let clear = bones.iter().all(|b| {
            let d = ((b.center[0] - cx).powi(2) + (b.center[1] - cy).powi(2)).sqrt();
            d >= b.radius * 1.15 + radius * 1.15 + (b.drift[0].abs().max(b.drift[1].abs()) + drift[0].abs().max(drift[1].abs())) / 2.0 + 3.0
        });
        if !clear {
            continue;
        }
        let i = bones.len();
        let zmax = (nz - 1) as f64;
        // alternate bones favour the thorax end or the legs end
        let (z0, z1) = if i % 2 == 0 {
            (rng.random_range(0.0..0.1) * zmax, rng.random_range(0.8..1.0) * zmax)
        } else {
            (rng.random_range(0.0..0.2) * zmax, zmax - rng.random_range(0.0..0.1) * zmax)
        };
        bones.push(Bone {
            center: [cx, cy],
            drift,
            radius,
            wobble_phase: rng.random_range(0.0..std::f64::consts::TAU),
            wobble_freq: rng.random_range(1.0..2.0),
            z0,
            z1,
        });
    }
    Ok(bones)
}

fn place_spots(
    p: &PhantomParams,
    rng: &mut ChaCha8Rng,
    bones: &[Bone],
    bone_mask: &MaskVolume,
    split: &BodyPartSplit,
    kinds: &[SpotKind],
) -> Result<Vec<Spot>> {
    let g = p.geometry();
    let nz = g.dims[2];
    let mut spots: Vec<Spot> = Vec::with_capacity(kinds.len());
    for (i, &kind) in kinds.iter().enumerate() {
        let radius = match kind {
            SpotKind::Anomaly { .. } => p.lesion_radius * rng.random_range(0.6..0.9),
            _ => p.lesion_radius * rng.random_range(0.85..1.15),
        };
        // spread lesions over both body parts
        let (zlo, zhi) = match (i % 2, split.boundary) {
            (_, 0) => (0, nz),
            (_, b) if b >= nz => (0, nz),
            (0, b) => (0, b),
            (_, b) => (b, nz),
        };
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let bone = &bones[rng.random_range(0..bones.len())];
            let z = rng.random_range(zlo..zhi) as f64;
            let Some((bc, br)) = bone.section(z, nz) else {
                continue;
            };
            let reach = (br - 0.7 * radius).max(0.0);
            let (a, r) = (rng.random_range(0.0..std::f64::consts::TAU), reach * rng.random::<f64>().sqrt());
            let c = [bc[0] + r * a.cos(), bc[1] + r * a.sin(), z];
            let cand = Spot { kind, center: c, radius };
            // the core of the sphere must be bone, so the clipped sphere
            // keeps most of its volume
            let core = Spot {
                radius: radius * 0.7,
                ..cand.clone()
            };
            if !sphere_voxels(&core, g).all(|(x, y, z)| bone_mask.get(x, y, z) >= 0.5) {
                continue;
            }
            let rz = cand.radius_z(p.spacing);
            let clear = spots.iter().all(|s| {
                let srz = s.radius_z(p.spacing);
                let dxy = ((s.center[0] - c[0]).powi(2) + (s.center[1] - c[1]).powi(2)).sqrt();
                let dz = (s.center[2] - c[2]).abs();
                dxy > s.radius + radius + 2.0 || dz > srz + rz + 1.0
            });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        spots.push(placed.ok_or_else(|| {
            Error::Generation(format!("could not place spot {i} ({kind:?}) inside bone after {MAX_TRIES} tries"))
        })?);
    }
    Ok(spots)
}

/// Voxel indices inside a spot's ellipsoid (bounding-box scan).
fn sphere_voxels(s: &Spot, g: Geometry) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let rz = s.radius_z(g.spacing);
    let lo = |c: f64, r: f64| (c - r).floor().max(0.0) as usize;
    let hi = |c: f64, r: f64, n: usize| ((c + r).ceil() as usize).min(n - 1);
    let (x0, x1) = (lo(s.center[0], s.radius), hi(s.center[0], s.radius, g.dims[0]));
    let (y0, y1) = (lo(s.center[1], s.radius), hi(s.center[1], s.radius, g.dims[1]));
    let (z0, z1) = (lo(s.center[2], rz), hi(s.center[2], rz, g.dims[2]));
    (z0..=z1)
        .flat_map(move |z| (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| (x, y, z))))
        .filter(move |&(x, y, z)| s.contains(x as f64, y as f64, z as f64, g.spacing))
}

/// Generates one case. Deterministic in `p`.
pub fn generate_case(p: &PhantomParams, patient_id: &str) -> Result<LongitudinalCase> {
    p.validate()?;
    let g = p.geometry();
    let [nx, ny, nz] = g.dims;
    let mut rng = seed::substream_rng(p.seed, "anatomy", 0);
    let body_c = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0];
    let body_semi = [0.44 * nx as f64, 0.40 * ny as f64];
    // the outline widens linearly from the legs end to the thorax end
    let taper = |z: f64| 1.0 + BODY_TAPER * (1.0 - z / (nz - 1) as f64);
    let in_body = |x: f64, y: f64, z: f64| {
        let t = taper(z);
        ((x - body_c[0]) / (t * body_semi[0])).powi(2) + ((y - body_c[1]) / (t * body_semi[1])).powi(2) <= 1.0
    };
    let bones = place_bones(p, &mut rng, (body_c, body_semi))?;
    let b_t = MaskVolume::from_predicate(g, |x, y, z| {
        bones.iter().any(|b| b.contains(x as f64, y as f64, z as f64, nz))
    });
    let split = BodyPartSplit::from_fraction(nz, p.thorax_fraction);

    let n_resolved = (p.resolved_fraction * p.n_stable_lesions as f64).round() as usize;
    let mut kinds = Vec::new();
    kinds.extend(std::iter::repeat_n(SpotKind::Emerging, p.n_emerging_lesions));
    kinds.extend((0..p.n_stable_lesions).map(|i| SpotKind::Stable { resolves: i < n_resolved }));
    kinds.extend((0..p.n_anomalies).map(|i| SpotKind::Anomaly { bright: i % 2 == 1 }));
    let spots = place_spots(p, &mut rng, &bones, &b_t, &split, &kinds)?;

    // lesions are clipped to bone dilated by the growth margin
    let allowed = if p.lesion_growth_margin == 0 {
        b_t.clone()
    } else {
        let slices: Vec<Slice2D> = (0..nz)
            .map(|z| dilate_disk(&b_t.axial_slice(z).expect("in range"), p.lesion_growth_margin as f64))
            .collect();
        MaskVolume::new(Volume::from_slices(&slices, g.spacing)?)?
    };

    let contrast = (LESION - BONE) as f64;
    let in_bone = |x: f64, y: f64, z: f64| bones.iter().any(|b| b.contains(x, y, z, nz));
    let lesion_ok = |x: f64, y: f64, z: f64| {
        if p.lesion_growth_margin == 0 {
            return in_bone(x, y, z);
        }
        let near = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
        allowed.get(near(x, nx), near(y, ny), near(z, nz)) >= 0.5
    };
    // intensity and annotation of the anatomy at a point given in voxel units
    let render = |q: [f64; 3], follow_up: bool| -> (f32, bool) {
        let [x, y, z] = q;
        let bone = in_bone(x, y, z);
        let base = if bone {
            BONE
        } else if in_body(x, y, z) {
            SOFT_TISSUE
        } else {
            0.0
        };
        let Some(s) = spots.iter().find(|s| s.contains(x, y, z, g.spacing)) else {
            return (base, false);
        };
        match s.kind {
            SpotKind::Emerging if lesion_ok(x, y, z) => {
                if follow_up {
                    (LESION, true)
                } else if bone {
                    (BONE + (p.precursor_contrast * contrast) as f32, false)
                } else {
                    (base, false)
                }
            }
            SpotKind::Stable { resolves } if lesion_ok(x, y, z) => {
                if follow_up && resolves {
                    (base, false)
                } else {
                    (LESION, true)
                }
            }
            SpotKind::Anomaly { bright } if bone => {
                let sign = if bright { -1.0 } else { 1.0 };
                (BONE + (sign * p.anomaly_contrast * contrast) as f32, false)
            }
            _ => (base, false),
        }
    };
    // a misaligned follow-up sees the same anatomy through a moved field of view
    let follow_up_frame = p.misalignment.map(|m| m.transform(g));
    let sp = g.spacing.map(f64::from);
    let mut i_t = Volume::zeros(g);
    let mut i_t1 = Volume::zeros(g);
    let mut a_t = vec![0.0f32; g.len()];
    let mut a_t1 = vec![0.0f32; g.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.index(x, y, z);
                let v = [x as f64, y as f64, z as f64];
                let (value, annotated) = render(v, false);
                i_t.data_mut()[i] = value;
                a_t[i] = f32::from(u8::from(annotated));
                let q = match follow_up_frame {
                    Some(t) => {
                        let w = t.apply([v[0] * sp[0], v[1] * sp[1], v[2] * sp[2]]);
                        [w[0] / sp[0], w[1] / sp[1], w[2] / sp[2]]
                    }
                    None => v,
                };
                let (value, annotated) = render(q, true);
                i_t1.data_mut()[i] = value;
                a_t1[i] = f32::from(u8::from(annotated));
            }
        }
    }

    let bias: Option<Vec<f32>> = (p.bias_strength > 0.0).then(|| {
        let mut brng = seed::substream_rng(p.seed, "bias", 0);
        let phase: [f64; 3] = std::array::from_fn(|_| brng.random_range(0.0..std::f64::consts::TAU));
        let mut field = Vec::with_capacity(g.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let u = [x as f64 / nx as f64, y as f64 / ny as f64, z as f64 / nz as f64];
                    let s = 0.5 * (std::f64::consts::PI * u[0] + phase[0]).sin()
                        + 0.35 * (std::f64::consts::PI * u[1] + phase[1]).sin()
                        + 0.15 * (std::f64::consts::PI * u[2] + phase[2]).sin();
                    field.push((p.bias_strength * s).exp() as f32);
                }
            }
        }
        field
    });
    for (t, vol) in [&mut i_t, &mut i_t1].into_iter().enumerate() {
        let mut nrng = seed::substream_rng(p.seed, "noise", t as u64);
        let normal = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        for (i, v) in vol.data_mut().iter_mut().enumerate() {
            if *v == 0.0 {
                continue;
            }
            let noise = if p.noise_sigma > 0.0 { normal.sample(&mut nrng) as f32 } else { 0.0 };
            let b = bias.as_ref().map_or(1.0, |f| f[i]);
            *v = ((*v + noise) * b).max(0.01);
        }
    }

    Ok(LongitudinalCase {
        patient_id: patient_id.to_string(),
        i_t,
        i_t1,
        b_t,
        a_t: MaskVolume::new(Volume::from_vec(g, a_t)?)?,
        a_t1: MaskVolume::new(Volume::from_vec(g, a_t1)?)?,
        body_parts: split,
        provenance: CaseProvenance::default(),
    })
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:03}")
}

/// Seed used for patient `index` of a cohort.
pub fn patient_seed(cohort_seed: u64, index: usize) -> u64 {
    seed::substream(cohort_seed, "phantom", index as u64)
}

/// `n_patients` cases with per-patient seeds derived from `seed`.
pub fn generate_cohort(seed: u64, n_patients: usize, template: &PhantomParams) -> Result<Vec<LongitudinalCase>> {
    if n_patients == 0 {
        return Err(Error::Precondition("cohort needs at least one patient".into()));
    }
    (0..n_patients)
        .map(|i| {
            let p = PhantomParams {
                seed: patient_seed(seed, i),
                ..template.clone()
            };
            generate_case(&p, &patient_id(i))
                .map_err(|e| Error::Generation(format!("patient {i}: {e}")))
        })
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub patient_id: String,
    pub seed: Option<u64>,
    pub i_t: String,
    pub i_t1: String,
    pub b_t: String,
    pub a_t: String,
    pub a_t1: String,
    pub body_part_boundary: usize,
    #[serde(default)]
    pub provenance: CaseProvenance,
}

/// Index of a cohort directory; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub format_version: u32,
    pub cohort_seed: Option<u64>,
    pub params: Option<PhantomParams>,
    pub cases: Vec<CaseEntry>,
}

/// Writes every case as NIfTI under `dir/<patient_id>/` plus `manifest.json`.
pub fn write_cohort(
    dir: impl AsRef<Path>,
    cases: &[LongitudinalCase],
    cohort_seed: Option<u64>,
    params: Option<&PhantomParams>,
) -> Result<CohortManifest> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let sub = dir.join(&c.patient_id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let rel = |name: &str| format!("{}/{name}.nii", c.patient_id);
        c.i_t.save_nifti(dir.join(rel("i_t")))?;
        c.i_t1.save_nifti(dir.join(rel("i_t1")))?;
        c.b_t.save_nifti(dir.join(rel("b_t")))?;
        c.a_t.save_nifti(dir.join(rel("a_t")))?;
        c.a_t1.save_nifti(dir.join(rel("a_t1")))?;
        entries.push(CaseEntry {
            patient_id: c.patient_id.clone(),
            seed: cohort_seed.map(|s| patient_seed(s, i)),
            i_t: rel("i_t"),
            i_t1: rel("i_t1"),
            b_t: rel("b_t"),
            a_t: rel("a_t"),
            a_t1: rel("a_t1"),
            body_part_boundary: c.body_parts.boundary,
            provenance: c.provenance.clone(),
        });
    }
    let manifest = CohortManifest {
        format_version: 1,
        cohort_seed,
        params: params.cloned(),
        cases: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CohortManifest> {
    let path: PathBuf = dir.as_ref().join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads a cohort written by [`write_cohort`].
pub fn load_cohort(dir: impl AsRef<Path>) -> Result<Vec<LongitudinalCase>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest
        .cases
        .iter()
        .map(|e| {
            let i_t = Volume::load_nifti(dir.join(&e.i_t))?;
            let nz = i_t.dims()[2];
            let case = LongitudinalCase {
                patient_id: e.patient_id.clone(),
                i_t1: Volume::load_nifti(dir.join(&e.i_t1))?,
                b_t: MaskVolume::load_nifti(dir.join(&e.b_t))?,
                a_t: MaskVolume::load_nifti(dir.join(&e.a_t))?,
                a_t1: MaskVolume::load_nifti(dir.join(&e.a_t1))?,
                body_parts: BodyPartSplit::from_boundary(nz, e.body_part_boundary),
                provenance: e.provenance.clone(),
                i_t,
            };
            case.check_geometry()?;
            Ok(case)
        })
        .collect()
}

/// Number of 26-connected foreground components of a binary mask.
pub fn connected_components(mask: &MaskVolume) -> usize {
    label_components(mask).1
}

/// Component label per voxel (0 = background) and the component count.
pub fn label_components(mask: &MaskVolume) -> (Vec<u32>, usize) {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims;
    let mut labels = vec![0u32; g.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..g.len() {
        if !mask.is_set(start) || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                            continue;
                        }
                        let j = g.index(xx as usize, yy as usize, zz as usize);
                        if mask.is_set(j) && labels[j] == 0 {
                            labels[j] = count;
                            stack.push(j);
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

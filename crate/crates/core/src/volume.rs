//! Volumetric images, axial slices and single-file NIfTI-1 I/O.
//!
//! Only the subset needed for interchange is supported: little-endian,
//! three-dimensional, `int16` or `float32` voxels, no header extensions.
//! Writers always emit `float32` at `vox_offset = 352`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid shape and voxel size shared by a set of co-registered volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f32; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Parameter(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }
}

/// 3D scalar image, x-fastest layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn from_vec(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        let geometry = Geometry::new(geometry.dims, geometry.spacing)?;
        if data.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite voxel at index {i}")));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            data: vec![0.0; geometry.len()],
            geometry,
        }
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_vec(geometry, data)
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable voxel access. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Copy of the axial plane at `z = k`.
    pub fn axial_slice(&self, k: usize) -> Result<Slice2D> {
        let [nx, ny, nz] = self.geometry.dims;
        if k >= nz {
            return Err(Error::Bounds { index: k, len: nz });
        }
        let n = nx * ny;
        Ok(Slice2D {
            w: nx,
            h: ny,
            data: self.data[k * n..(k + 1) * n].to_vec(),
        })
    }

    pub fn axial_slices(&self) -> Vec<Slice2D> {
        (0..self.geometry.dims[2])
            .map(|k| self.axial_slice(k).expect("index in range"))
            .collect()
    }

    /// Stacks equally-sized axial slices back into a volume.
    pub fn from_slices(slices: &[Slice2D], spacing: [f32; 3]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero slices".into()))?;
        let geometry = Geometry::new([first.w, first.h, slices.len()], spacing)?;
        let mut data = Vec::with_capacity(geometry.len());
        for s in slices {
            if (s.w, s.h) != (first.w, first.h) {
                return Err(Error::Shape(format!(
                    "slice {}x{} does not match {}x{}",
                    s.w, s.h, first.w, first.h
                )));
            }
            data.extend_from_slice(&s.data);
        }
        Self::from_vec(geometry, data)
    }

    /// Percentile normalization: the 1st and 99th percentiles map to 0 and 1,
    /// then values are clamped to `[0, 1]`. A volume whose two anchors
    /// coincide (e.g. constant) normalizes to all zeros.
    pub fn normalize_intensity(&self) -> Volume {
        let (lo, hi) = percentile_anchors(&self.data, 1, 99);
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data
                .iter()
                .map(|&v| (((v as f64 - lo) / range) as f32).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            geometry: self.geometry,
            data,
        }
    }

    pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume> {
        read_nifti(path.as_ref())
    }

    pub fn save_nifti(&self, path: impl AsRef<Path>) -> Result<()> {
        write_nifti(self, path.as_ref())
    }
}

/// Values at sorted ranks `len * lo_pct / 100` and `len * hi_pct / 100`.
pub fn percentile_anchors(values: &[f32], lo_pct: usize, hi_pct: usize) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let rank = |p: usize| (n * p / 100).min(n - 1);
    (sorted[rank(lo_pct)] as f64, sorted[rank(hi_pct)] as f64)
}

/// Volume whose voxels are probabilities or binary labels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume(Volume);

impl MaskVolume {
    pub fn new(volume: Volume) -> Result<Self> {
        if let Some(v) = volume.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self(volume))
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self(Volume::zeros(geometry))
    }

    /// Binary mask from a voxel predicate.
    pub fn from_predicate(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let v = Volume::from_fn(geometry, |x, y, z| if f(x, y, z) { 1.0 } else { 0.0 })
            .expect("binary values are finite");
        Self(v)
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn geometry(&self) -> Geometry {
        self.0.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.0.get(x, y, z)
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.0.data[i] >= 0.5
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_binary(&self) -> bool {
        self.0.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn axial_slice(&self, k: usize) -> Result<Slice2D> {
        self.0.axial_slice(k)
    }

    pub fn load_nifti(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_nifti(path.as_ref())?)
    }

    pub fn save_nifti(&self, path: impl AsRef<Path>) -> Result<()> {
        write_nifti(&self.0, path.as_ref())
    }
}

/// 2D image, row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl Slice2D {
    pub fn new(w: usize, h: usize, data: Vec<f32>) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::Shape(format!("slice dims must be >= 1, got {w}x{h}")));
        }
        if data.len() != w * h {
            return Err(Error::Shape(format!(
                "slice data length {} does not match {w}x{h}",
                data.len()
            )));
        }
        Ok(Self { w, h, data })
    }

    pub fn zeros(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    pub fn filled(w: usize, h: usize, v: f32) -> Self {
        Self {
            w,
            h,
            data: vec![v; w * h],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }

    /// Zero-pads (centered) to `size x size`. Fails if the slice is larger.
    /// Returns the padded slice and the (x, y) offset of the original.
    pub fn pad_centered(&self, size: usize) -> Result<(Slice2D, (usize, usize))> {
        if self.w > size || self.h > size {
            return Err(Error::Geometry(format!(
                "slice {}x{} exceeds network input {size}x{size}",
                self.w, self.h
            )));
        }
        let ox = (size - self.w) / 2;
        let oy = (size - self.h) / 2;
        let mut out = Slice2D::zeros(size, size);
        for y in 0..self.h {
            let dst = (y + oy) * size + ox;
            out.data[dst..dst + self.w].copy_from_slice(&self.data[y * self.w..(y + 1) * self.w]);
        }
        Ok((out, (ox, oy)))
    }

    /// Inverse of [`Slice2D::pad_centered`].
    pub fn crop(&self, offset: (usize, usize), w: usize, h: usize) -> Slice2D {
        let mut out = Slice2D::zeros(w, h);
        for y in 0..h {
            let src = (y + offset.1) * self.w + offset.0;
            out.data[y * w..(y + 1) * w].copy_from_slice(&self.data[src..src + w]);
        }
        out
    }
}

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const REGULAR: usize = 38;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

fn rd_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn rd_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn rd_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, what.to_string()),
    )
}

fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_SIZE {
        return Err(truncated(path, "file shorter than NIfTI-1 header"));
    }
    let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(Error::Format(format!("bad NIfTI-1 magic {magic:?}"))),
    };
    let sizeof_hdr = rd_i32(&bytes, offsets::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format(format!(
            "sizeof_hdr {sizeof_hdr} (only little-endian NIfTI-1 is supported)"
        )));
    }
    let ndim = rd_i16(&bytes, offsets::DIM);
    if ndim != 3 {
        return Err(Error::Unsupported(format!("dim[0] = {ndim}, expected 3")));
    }
    let mut dims = [0usize; 3];
    let mut spacing = [0f32; 3];
    for a in 0..3 {
        let d = rd_i16(&bytes, offsets::DIM + 2 * (a + 1));
        if d < 1 {
            return Err(Error::Format(format!("dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
        spacing[a] = rd_f32(&bytes, offsets::PIXDIM + 4 * (a + 1));
    }
    let geometry = Geometry::new(dims, spacing).map_err(|e| Error::Format(e.to_string()))?;
    let datatype = rd_i16(&bytes, offsets::DATATYPE);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
    };
    let vox_offset = rd_f32(&bytes, offsets::VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= 0.0) {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let mut slope = rd_f32(&bytes, offsets::SCL_SLOPE);
    let inter = rd_f32(&bytes, offsets::SCL_INTER);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };

    let image_bytes;
    let (src, start) = if single_file {
        if vox_offset < HEADER_SIZE {
            return Err(Error::Format(format!("vox_offset {vox_offset} inside header")));
        }
        (&bytes, vox_offset)
    } else {
        let img = path.with_extension("img");
        image_bytes = fs::read(&img).map_err(|e| Error::io(&img, e))?;
        (&image_bytes, vox_offset)
    };
    let need = geometry.len() * width;
    if src.len() < start + need {
        return Err(truncated(path, "data section shorter than dims require"));
    }
    let raw = &src[start..start + need];
    let scale = slope != 1.0 || inter != 0.0;
    let data: Vec<f32> = match datatype {
        DT_INT16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 * slope + inter)
            .collect(),
        _ => raw
            .chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if scale {
                    v * slope + inter
                } else {
                    v
                }
            })
            .collect(),
    };
    Volume::from_vec(geometry, data)
}

/// Serializes a float32 single-file NIfTI-1 image.
pub fn encode_nifti(v: &Volume) -> Vec<u8> {
    let g = v.geometry;
    let mut b = vec![0u8; VOX_OFFSET + 4 * g.len()];
    let put_i16 = |b: &mut [u8], off: usize, x: i16| b[off..off + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |b: &mut [u8], off: usize, x: f32| b[off..off + 4].copy_from_slice(&x.to_le_bytes());
    b[offsets::SIZEOF_HDR..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    b[offsets::REGULAR] = b'r';
    put_i16(&mut b, offsets::DIM, 3);
    for a in 0..3 {
        put_i16(&mut b, offsets::DIM + 2 * (a + 1), g.dims[a] as i16);
    }
    for a in 4..8 {
        put_i16(&mut b, offsets::DIM + 2 * a, 1);
    }
    put_i16(&mut b, offsets::DATATYPE, DT_FLOAT32);
    put_i16(&mut b, offsets::BITPIX, 32);
    put_f32(&mut b, offsets::PIXDIM, 1.0);
    for a in 0..3 {
        put_f32(&mut b, offsets::PIXDIM + 4 * (a + 1), g.spacing[a]);
    }
    put_f32(&mut b, offsets::VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut b, offsets::SCL_SLOPE, 1.0);
    put_f32(&mut b, offsets::SCL_INTER, 0.0);
    b[offsets::XYZT_UNITS] = 2; // mm
    let descrip = b"marrowcast";
    b[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut b, offsets::SFORM_CODE, 1);
    for a in 0..3 {
        put_f32(&mut b, offsets::SROW_X + 16 * a + 4 * a, g.spacing[a]);
    }
    b[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    for (chunk, x) in b[VOX_OFFSET..].chunks_exact_mut(4).zip(&v.data) {
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    b
}

fn write_nifti(v: &Volume, path: &Path) -> Result<()> {
    if g_too_large(v.geometry) {
        return Err(Error::Unsupported(format!(
            "dims {:?} exceed the NIfTI-1 int16 limit",
            v.geometry.dims
        )));
    }
    fs::write(path, encode_nifti(v)).map_err(|e| Error::io(path, e))
}

fn g_too_large(g: Geometry) -> bool {
    g.dims.iter().any(|&d| d > i16::MAX as usize)
}

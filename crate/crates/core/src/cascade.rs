//! Dataset construction, training and two-stage inference.
//!
//! Bone segmentation runs per axial slice; lesion prediction runs on
//! patches inside the thresholded, dilated bone mask and is fused back
//! into a risk volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor4;
use crate::patches::{self, Fusion, PatchGrid, RiskAccumulator};
use crate::phantom::LongitudinalCase;
use crate::seed;
use crate::unet::{LossKind, UNetConfig, UNetModel};
use crate::volume::{MaskVolume, Slice2D, Volume};

/// Where lesion training patches take their bone mask from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoneSource {
    #[default]
    GroundTruth,
    Bonenet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub threshold: f32,
    pub dilation_px: usize,
    pub patch_size: usize,
    /// Lattice stride at inference.
    pub stride: usize,
    /// Lattice stride when building the lesion training set.
    pub train_stride: usize,
    pub fusion: Fusion,
    pub bone_source: BoneSource,
    /// Patches per forward pass at inference.
    pub inference_batch: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            threshold: patches::DEFAULT_THRESHOLD,
            dilation_px: patches::DEFAULT_DILATION_PX,
            patch_size: patches::DEFAULT_PATCH_SIZE,
            stride: patches::DEFAULT_STRIDE,
            train_stride: patches::DEFAULT_STRIDE,
            fusion: Fusion::Mean,
            bone_source: BoneSource::GroundTruth,
            inference_batch: 64,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        for (name, v) in [
            ("patch_size", self.patch_size),
            ("stride", self.stride),
            ("train_stride", self.train_stride),
            ("inference_batch", self.inference_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Bone probability for one axial slice.
pub trait BonePredictor {
    /// Returns a map with the dims of `img`, values in `[0, 1]`.
    fn predict_slice(&self, z: usize, img: &Slice2D) -> Result<Slice2D>;
}

/// Where a batch of patches came from.
#[derive(Debug, Clone, Copy)]
pub struct PatchContext<'a> {
    pub z: usize,
    pub grid: &'a PatchGrid,
    /// Index in `grid` of the first patch of the batch.
    pub first: usize,
}

/// Lesion risk for a batch of patches.
pub trait LesionPredictor {
    /// `batch` is `(n, 1, ps, ps)`; returns `n * ps * ps` values in `[0, 1]`.
    fn predict_patches(&self, ctx: PatchContext<'_>, batch: &Tensor4<f32>) -> Result<Vec<f32>>;

    /// Patch size the predictor requires, if fixed.
    fn input_size(&self) -> Option<usize> {
        None
    }
}

impl BonePredictor for UNetModel {
    fn predict_slice(&self, _z: usize, img: &Slice2D) -> Result<Slice2D> {
        let size = self.config().input_size;
        let (padded, offset) = img.pad_centered(size)?;
        let x = Tensor4::from_vec([1, 1, size, size], padded.data)?;
        let y = Slice2D::new(size, size, self.forward(&x)?.into_data())?;
        Ok(y.crop(offset, img.w, img.h))
    }
}

impl LesionPredictor for UNetModel {
    fn predict_patches(&self, _ctx: PatchContext<'_>, batch: &Tensor4<f32>) -> Result<Vec<f32>> {
        Ok(self.forward(batch)?.into_data())
    }

    fn input_size(&self) -> Option<usize> {
        Some(self.config().input_size)
    }
}

/// Returns slices of a reference mask as bone probabilities.
pub struct OracleBone<'a>(pub &'a MaskVolume);

impl BonePredictor for OracleBone<'_> {
    fn predict_slice(&self, z: usize, img: &Slice2D) -> Result<Slice2D> {
        let s = self.0.axial_slice(z)?;
        if (s.w, s.h) != (img.w, img.h) {
            return Err(Error::Shape(format!(
                "oracle mask slice is {}x{}, image slice is {}x{}",
                s.w, s.h, img.w, img.h
            )));
        }
        Ok(s)
    }
}

/// Returns windows of a reference mask (e.g. `A_t1`) as predictions.
pub struct OracleLesion<'a>(pub &'a MaskVolume);

impl LesionPredictor for OracleLesion<'_> {
    fn predict_patches(&self, ctx: PatchContext<'_>, batch: &Tensor4<f32>) -> Result<Vec<f32>> {
        let slice = self.0.axial_slice(ctx.z)?;
        Ok(ctx.grid.read_batch(&slice, ctx.first..ctx.first + batch.n()).into_data())
    }
}

/// Predicts the same risk everywhere.
pub struct ConstantRisk(pub f32);

impl LesionPredictor for ConstantRisk {
    fn predict_patches(&self, _ctx: PatchContext<'_>, batch: &Tensor4<f32>) -> Result<Vec<f32>> {
        Ok(vec![self.0; batch.len()])
    }
}

/// Where a training pair came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub patient_id: String,
    pub z: usize,
    /// Patch center for lesion samples.
    pub center: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct BoneDataset {
    pub input_size: usize,
    /// `(I_t slice, B_t slice)`, both zero-padded to `input_size`.
    pub pairs: Vec<(Tensor4<f32>, Tensor4<f32>)>,
    pub origins: Vec<SampleOrigin>,
}

#[derive(Debug, Clone)]
pub struct LesionDataset {
    pub patch_size: usize,
    /// `(masked I_t window, A_t1 window)`.
    pub pairs: Vec<(Tensor4<f32>, Tensor4<f32>)>,
    pub origins: Vec<SampleOrigin>,
    pub positive_pixels: usize,
    pub negative_pixels: usize,
}

impl LesionDataset {
    /// `N_neg / N_pos` clamped to `[1, 100]`; 1 when there are no positives.
    pub fn class_weight(&self) -> f64 {
        if self.positive_pixels == 0 {
            return 1.0;
        }
        (self.negative_pixels as f64 / self.positive_pixels as f64).clamp(1.0, 100.0)
    }
}

fn slice_tensor(s: &Slice2D) -> Tensor4<f32> {
    Tensor4::from_vec([1, 1, s.h, s.w], s.data.clone()).expect("slice dims")
}

/// Every axial slice of every `I_t` paired with its `B_t` slice.
pub fn build_bone_dataset(cases: &[LongitudinalCase], input_size: usize) -> Result<BoneDataset> {
    if cases.is_empty() {
        return Err(Error::Precondition("bone dataset needs at least one case".into()));
    }
    let mut pairs = Vec::new();
    let mut origins = Vec::new();
    for case in cases {
        case.check_geometry()?;
        for z in 0..case.geometry().dims[2] {
            let (img, off_i) = case.i_t.axial_slice(z)?.pad_centered(input_size)?;
            let (mask, off_m) = case.b_t.axial_slice(z)?.pad_centered(input_size)?;
            debug_assert_eq!(off_i, off_m);
            pairs.push((slice_tensor(&img), slice_tensor(&mask)));
            origins.push(SampleOrigin {
                patient_id: case.patient_id.clone(),
                z,
                center: None,
            });
        }
    }
    Ok(BoneDataset {
        input_size,
        pairs,
        origins,
    })
}

/// Thresholded, dilated bone region of one slice.
pub fn bone_region(prob: &Slice2D, config: &CascadeConfig) -> Slice2D {
    patches::binarize_and_dilate(prob, config.threshold, config.dilation_px)
}

/// Patches inside the bone region of every slice of every case, with
/// targets from the aligned `A_t1` at the same windows.
pub fn build_lesion_dataset(
    cases: &[LongitudinalCase],
    config: &CascadeConfig,
    bonenet: Option<&dyn BonePredictor>,
) -> Result<LesionDataset> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::Precondition("lesion dataset needs at least one case".into()));
    }
    let predictor = match (config.bone_source, bonenet) {
        (BoneSource::GroundTruth, _) => None,
        (BoneSource::Bonenet, Some(p)) => Some(p),
        (BoneSource::Bonenet, None) => {
            return Err(Error::Precondition("bone_source bonenet needs a trained bone predictor".into()))
        }
    };
    let ps = config.patch_size;
    let mut ds = LesionDataset {
        patch_size: ps,
        pairs: Vec::new(),
        origins: Vec::new(),
        positive_pixels: 0,
        negative_pixels: 0,
    };
    for case in cases {
        case.check_geometry()?;
        for z in 0..case.geometry().dims[2] {
            let img = case.i_t.axial_slice(z)?;
            let prob = match predictor {
                Some(p) => p.predict_slice(z, &img)?,
                None => case.b_t.axial_slice(z)?,
            };
            let region = bone_region(&prob, config);
            let cropped = patches::mask_crop(&img, &region)?;
            let target = case.a_t1.axial_slice(z)?;
            let grid = PatchGrid::new(&region, ps, config.train_stride)?;
            for i in 0..grid.len() {
                let x = grid.read_batch(&cropped, i..i + 1);
                let y = grid.read_batch(&target, i..i + 1);
                let pos = y.data().iter().filter(|&&v| v >= 0.5).count();
                ds.positive_pixels += pos;
                ds.negative_pixels += ps * ps - pos;
                ds.pairs.push((x, y));
                ds.origins.push(SampleOrigin {
                    patient_id: case.patient_id.clone(),
                    z,
                    center: Some(grid.centers[i]),
                });
            }
        }
    }
    Ok(ds)
}

/// Loss per epoch of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub w_pos: Option<f64>,
    pub samples: usize,
}

/// Seed for the shuffle of `epoch` of net `net` (0 bone, 1 lesion).
pub fn shuffle_seed(seed: u64, net: u64, epoch: usize) -> u64 {
    seed::substream(seed, "shuffle", (net << 32) | epoch as u64)
}

fn train(
    config: &UNetConfig,
    pairs: &[(Tensor4<f32>, Tensor4<f32>)],
    init_seed: u64,
    seed: u64,
    net: u64,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<(UNetModel, Vec<f64>)> {
    let mut model = UNetModel::build(config.clone(), init_seed)?;
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let loss = model.train_epoch(pairs, shuffle_seed(seed, net, epoch))?;
        on_epoch(epoch, loss);
        losses.push(loss);
    }
    Ok((model, losses))
}

/// Trains a bone net on every slice of `cases`.
pub fn train_bonenet(
    cases: &[LongitudinalCase],
    config: &UNetConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<(UNetModel, TrainLog)> {
    let ds = build_bone_dataset(cases, config.input_size)?;
    let (model, losses) = train(config, &ds.pairs, seed::substream(seed, "init-bone", config.seed), seed, 0, on_epoch)?;
    Ok((
        model,
        TrainLog {
            epoch_losses: losses,
            w_pos: None,
            samples: ds.pairs.len(),
        },
    ))
}

/// Trains a lesion net on bone-region patches of `cases`. A weighted loss
/// without an explicit `w_pos` uses the dataset's class weight.
pub fn train_lesionnet(
    cases: &[LongitudinalCase],
    cascade: &CascadeConfig,
    config: &UNetConfig,
    bonenet: Option<&dyn BonePredictor>,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<(UNetModel, TrainLog)> {
    if config.input_size != cascade.patch_size {
        return Err(Error::Config(format!(
            "lesion net input_size {} differs from patch_size {}",
            config.input_size, cascade.patch_size
        )));
    }
    let ds = build_lesion_dataset(cases, cascade, bonenet)?;
    let mut config = config.clone();
    if config.loss == LossKind::WeightedBce && config.w_pos.is_none() {
        config.w_pos = Some(ds.class_weight());
    }
    let (model, losses) = train(&config, &ds.pairs, seed::substream(seed, "init-lesion", config.seed), seed, 1, on_epoch)?;
    Ok((
        model,
        TrainLog {
            epoch_losses: losses,
            w_pos: config.w_pos,
            samples: ds.pairs.len(),
        },
    ))
}

/// Bone and lesion predictors plus the post-processing between them.
pub struct CascadePipeline<B, L> {
    pub bone: B,
    pub lesion: L,
    pub config: CascadeConfig,
}

impl<B: BonePredictor, L: LesionPredictor> CascadePipeline<B, L> {
    pub fn new(bone: B, lesion: L, config: CascadeConfig) -> Result<Self> {
        config.validate()?;
        if let Some(n) = lesion.input_size() {
            if n != config.patch_size {
                return Err(Error::Config(format!(
                    "lesion net input_size {n} differs from patch_size {}",
                    config.patch_size
                )));
            }
        }
        Ok(Self { bone, lesion, config })
    }
}

/// Per-voxel risk and patch coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskVolume {
    pub risk: Volume,
    pub coverage: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadePrediction {
    /// Bone probability per voxel.
    pub bone_prob: MaskVolume,
    /// Thresholded, dilated bone region that patches were drawn from.
    pub bone_region: MaskVolume,
    pub risk: RiskVolume,
}

/// Bone net on every slice, then lesion net on patches inside the bone
/// region, fused into a risk volume with the dims of `i_t`. Risk is zero
/// outside the bone region.
pub fn predict_risk_volume<B: BonePredictor, L: LesionPredictor>(
    pipeline: &CascadePipeline<B, L>,
    i_t: &Volume,
) -> Result<CascadePrediction> {
    let cfg = &pipeline.config;
    let g = i_t.geometry();
    let [nx, ny, nz] = g.dims;
    let mut bone_slices = Vec::with_capacity(nz);
    let mut region_slices = Vec::with_capacity(nz);
    let mut risk_slices = Vec::with_capacity(nz);
    let mut coverage = Vec::with_capacity(g.len());
    for z in 0..nz {
        let img = i_t.axial_slice(z)?;
        let prob = pipeline.bone.predict_slice(z, &img)?;
        if (prob.w, prob.h) != (nx, ny) {
            return Err(Error::Shape(format!("bone map is {}x{}, slice is {nx}x{ny}", prob.w, prob.h)));
        }
        let region = bone_region(&prob, cfg);
        let cropped = patches::mask_crop(&img, &region)?;
        let grid = PatchGrid::new(&region, cfg.patch_size, cfg.stride)?;
        let mut acc = RiskAccumulator::new(nx, ny, cfg.fusion);
        let ps2 = cfg.patch_size * cfg.patch_size;
        let mut first = 0;
        while first < grid.len() {
            let end = (first + cfg.inference_batch).min(grid.len());
            let batch = grid.read_batch(&cropped, first..end);
            let preds = pipeline.lesion.predict_patches(PatchContext { z, grid: &grid, first }, &batch)?;
            if preds.len() != (end - first) * ps2 {
                return Err(Error::Shape(format!(
                    "lesion predictor returned {} values for {} patches of {ps2}",
                    preds.len(),
                    end - first
                )));
            }
            for (k, i) in (first..end).enumerate() {
                acc.add(&grid, i, &preds[k * ps2..(k + 1) * ps2]);
            }
            first = end;
        }
        let mut slice = acc.finish();
        // windows reach past the region; risk outside it is not kept
        for (r, m) in slice.risk.data.iter_mut().zip(&region.data) {
            *r *= m;
        }
        coverage.extend_from_slice(&slice.coverage);
        bone_slices.push(Slice2D {
            w: prob.w,
            h: prob.h,
            data: prob.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        });
        region_slices.push(region);
        risk_slices.push(slice.risk);
    }
    Ok(CascadePrediction {
        bone_prob: MaskVolume::new(Volume::from_slices(&bone_slices, g.spacing)?)?,
        bone_region: MaskVolume::new(Volume::from_slices(&region_slices, g.spacing)?)?,
        risk: RiskVolume {
            risk: Volume::from_slices(&risk_slices, g.spacing)?,
            coverage,
        },
    })
}

//! ROC analysis, per-case evaluation, leave-one-out cross-validation and
//! report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::{self, BonePredictor, CascadeConfig, CascadePipeline, CascadePrediction, LesionPredictor};
use crate::error::{Error, Result};
use crate::phantom::{BodyPart, LongitudinalCase};
use crate::seed;
use crate::volume::{MaskVolume, Volume};

/// Area under the ROC curve: the fraction of (positive, negative) pairs in
/// which the positive scores higher, ties counting one half.
pub fn roc_auc<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let groups = tie_groups(scores, labels)?;
    let (p, n) = groups.iter().fold((0u64, 0u64), |(p, n), g| (p + g.0, n + g.1));
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!("roc_auc needs both classes, got {p} positives and {n} negatives")));
    }
    // twice the number of winning pairs, so ties stay integral
    let mut twice: u128 = 0;
    let mut neg_below: u64 = 0;
    for &(gp, gn) in groups.iter().rev() {
        twice += gp as u128 * (2 * neg_below as u128 + gn as u128);
        neg_below += gn;
    }
    Ok(twice as f64 / (2.0 * p as f64 * n as f64))
}

/// (positives, negatives) per distinct score, highest score first.
fn tie_groups<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<Vec<(u64, u64)>> {
    let mut idx: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
    for (&s, &l) in scores.iter().zip(labels) {
        let s: f64 = s.into();
        if s.is_nan() {
            return Err(Error::NonFinite("NaN score in ROC input".into()));
        }
        idx.push((s, l));
    }
    idx.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = None;
    for (s, l) in idx {
        if last != Some(s) {
            groups.push((0, 0));
            last = Some(s);
        }
        let g = groups.last_mut().expect("pushed");
        if l {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    Ok(groups)
}

/// ROC points `(fpr, tpr)` from (0, 0) to (1, 1), one per distinct score,
/// thinned to at most `max_points` (keeping both ends).
pub fn roc_curve<S: Copy + Into<f64>>(scores: &[S], labels: &[bool], max_points: usize) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let groups = tie_groups(scores, labels)?;
    let (p, n) = groups.iter().fold((0u64, 0u64), |(p, n), g| (p + g.0, n + g.1));
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!("ROC needs both classes, got {p} positives and {n} negatives")));
    }
    let mut pts = Vec::with_capacity(groups.len() + 1);
    pts.push((0.0, 0.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    for (gp, gn) in groups {
        tp += gp;
        fp += gn;
        pts.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let max_points = max_points.max(2);
    if pts.len() <= max_points {
        return Ok(pts);
    }
    let last = pts.len() - 1;
    Ok((0..max_points).map(|k| pts[k * last / (max_points - 1)]).collect())
}

pub const ROC_MAX_POINTS: usize = 1000;

/// `A_t1 AND NOT A_t`.
pub fn emerging_lesion_targets(case: &LongitudinalCase) -> Result<MaskVolume> {
    let g = case.a_t1.geometry();
    if case.a_t.geometry() != g {
        return Err(Error::Geometry(format!(
            "case {}: A_t {:?} and A_t1 {:?} differ",
            case.patient_id,
            case.a_t.geometry(),
            g
        )));
    }
    Ok(MaskVolume::from_predicate(g, |x, y, z| {
        case.a_t1.get(x, y, z) >= 0.5 && case.a_t.get(x, y, z) < 0.5
    }))
}

/// A metric value, or `"undefined"` when it could not be computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Value(f64),
    Undefined(Undefined),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Undefined {
    Undefined,
}

impl Metric {
    pub const UNDEFINED: Metric = Metric::Undefined(Undefined::Undefined);

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined(_) => None,
        }
    }

    fn from_auc(r: Result<f64>) -> Result<Metric> {
        match r {
            Ok(v) => Ok(Metric::Value(v)),
            Err(Error::UndefinedMetric(_)) => Ok(Metric::UNDEFINED),
            Err(e) => Err(e),
        }
    }
}

pub const REGION_BONE: &str = "bone";
pub const LESION_REGIONS: [&str; 3] = ["lesion_thorax", "lesion_legs", "lesion_all"];

fn lesion_region_name(part: Option<BodyPart>) -> &'static str {
    match part {
        Some(BodyPart::Thorax) => "lesion_thorax",
        Some(BodyPart::Legs) => "lesion_legs",
        None => "lesion_all",
    }
}

/// Scores and labels behind one region's metric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionScores {
    pub scores: Vec<f32>,
    pub labels: Vec<bool>,
}

impl RegionScores {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEval {
    pub auc: Metric,
    /// AUC of a constant risk over the same voxels.
    pub baseline_auc: Metric,
    pub positives: usize,
    pub negatives: usize,
}

/// Metrics of one test case, keyed by region name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEval {
    pub patient_id: String,
    pub regions: BTreeMap<String, RegionEval>,
    #[serde(skip)]
    pub scores: BTreeMap<String, RegionScores>,
}

fn region_eval(s: &RegionScores) -> Result<RegionEval> {
    let positives = s.positives();
    let constant = vec![0.5f32; s.labels.len()];
    Ok(RegionEval {
        auc: Metric::from_auc(roc_auc(&s.scores, &s.labels))?,
        baseline_auc: Metric::from_auc(roc_auc(&constant, &s.labels))?,
        positives,
        negatives: s.labels.len() - positives,
    })
}

/// Voxels counted by the lesion metrics: the ground-truth bone mask,
/// thresholded and dilated slice by slice like the inference bone map.
pub fn lesion_eval_region(case: &LongitudinalCase, config: &CascadeConfig) -> Result<MaskVolume> {
    let slices: Vec<_> = (0..case.geometry().dims[2])
        .map(|z| Ok(cascade::bone_region(&case.b_t.axial_slice(z)?, config)))
        .collect::<Result<_>>()?;
    MaskVolume::new(Volume::from_slices(&slices, case.geometry().spacing)?)
}

/// Bone AUC over every voxel; lesion AUC of risk against emerging lesions
/// inside the dilated ground-truth bone, per body part and overall.
pub fn evaluate_prediction(case: &LongitudinalCase, pred: &CascadePrediction, config: &CascadeConfig) -> Result<CaseEval> {
    case.check_geometry()?;
    let g = case.geometry();
    if pred.risk.risk.geometry() != g || pred.bone_prob.geometry() != g {
        return Err(Error::Geometry(format!("prediction for {} does not match case geometry", case.patient_id)));
    }
    let mut scores: BTreeMap<String, RegionScores> = BTreeMap::new();
    scores.insert(
        REGION_BONE.into(),
        RegionScores {
            scores: pred.bone_prob.data().to_vec(),
            labels: (0..g.len()).map(|i| case.b_t.is_set(i)).collect(),
        },
    );
    let targets = emerging_lesion_targets(case)?;
    let region = lesion_eval_region(case, config)?;
    let per_slice = g.slice_len();
    for part in [Some(BodyPart::Thorax), Some(BodyPart::Legs), None] {
        let mut s = RegionScores::default();
        for z in 0..g.dims[2] {
            if part.is_some_and(|p| case.body_parts.label(z) != p) {
                continue;
            }
            for i in z * per_slice..(z + 1) * per_slice {
                if region.is_set(i) {
                    s.scores.push(pred.risk.risk.data()[i]);
                    s.labels.push(targets.is_set(i));
                }
            }
        }
        scores.insert(lesion_region_name(part).into(), s);
    }
    let regions = scores
        .iter()
        .map(|(k, s)| Ok((k.clone(), region_eval(s)?)))
        .collect::<Result<_>>()?;
    Ok(CaseEval {
        patient_id: case.patient_id.clone(),
        regions,
        scores,
    })
}

/// Runs the pipeline on `case.i_t` and evaluates the result.
pub fn evaluate_case<B: BonePredictor, L: LesionPredictor>(
    pipeline: &CascadePipeline<B, L>,
    case: &LongitudinalCase,
) -> Result<(CascadePrediction, CaseEval)> {
    let pred = cascade::predict_risk_volume(pipeline, &case.i_t)?;
    let eval = evaluate_prediction(case, &pred, &pipeline.config)?;
    Ok((pred, eval))
}

/// One leave-one-out fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub index: usize,
    pub test_patient: String,
    pub train_patients: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub kind: String,
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: FoldSpec,
    pub status: FoldStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<FoldFailure>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<CaseEval>,
    /// Risk-map file written for this fold, relative to the report.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub risk_map: Option<String>,
    /// Extra per-fold facts (losses, class weight, checkpoint hashes).
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

/// Mean of the defined per-fold values of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetric {
    pub mean: Metric,
    pub defined: usize,
    pub undefined: usize,
}

impl MeanMetric {
    pub fn of(values: impl IntoIterator<Item = Metric>) -> Self {
        let (mut sum, mut defined, mut undefined) = (0.0, 0, 0);
        for v in values {
            match v.value() {
                Some(x) => {
                    sum += x;
                    defined += 1;
                }
                None => undefined += 1,
            }
        }
        Self {
            mean: if defined > 0 { Metric::Value(sum / defined as f64) } else { Metric::UNDEFINED },
            defined,
            undefined,
        }
    }
}

pub const SUMMARY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub format_version: u32,
    pub folds: Vec<FoldResult>,
    pub failed_folds: usize,
    /// Per region: mean AUC over folds.
    pub mean_auc: BTreeMap<String, MeanMetric>,
    /// Per region: mean constant-risk AUC over folds.
    pub mean_baseline_auc: BTreeMap<String, MeanMetric>,
    /// Per region: ROC of the scores of all folds pooled.
    #[serde(skip)]
    pub pooled_roc: BTreeMap<String, Option<Vec<(f64, f64)>>>,
    /// How the metrics were computed.
    pub notes: Vec<String>,
    pub config: serde_json::Value,
}

pub fn all_regions() -> Vec<&'static str> {
    std::iter::once(REGION_BONE).chain(LESION_REGIONS).collect()
}

impl EvalResult {
    /// Summary statistics and pooled ROC curves from per-fold results.
    pub fn aggregate(folds: Vec<FoldResult>, config: serde_json::Value) -> Result<Self> {
        let mut folds = folds;
        folds.sort_by_key(|f| f.fold.index);
        let mut mean_auc = BTreeMap::new();
        let mut mean_baseline_auc = BTreeMap::new();
        let mut pooled_roc = BTreeMap::new();
        for region in all_regions() {
            let evals: Vec<&RegionEval> = folds
                .iter()
                .filter_map(|f| f.eval.as_ref())
                .filter_map(|e| e.regions.get(region))
                .collect();
            mean_auc.insert(region.to_string(), MeanMetric::of(evals.iter().map(|e| e.auc)));
            mean_baseline_auc.insert(region.to_string(), MeanMetric::of(evals.iter().map(|e| e.baseline_auc)));
            let mut pooled = RegionScores::default();
            for e in folds.iter().filter_map(|f| f.eval.as_ref()) {
                if let Some(s) = e.scores.get(region) {
                    pooled.scores.extend_from_slice(&s.scores);
                    pooled.labels.extend_from_slice(&s.labels);
                }
            }
            let curve = match roc_curve(&pooled.scores, &pooled.labels, ROC_MAX_POINTS) {
                Ok(c) => Some(c),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            pooled_roc.insert(region.to_string(), curve);
        }
        Ok(Self {
            format_version: SUMMARY_FORMAT_VERSION,
            failed_folds: folds.iter().filter(|f| f.status == FoldStatus::Failed).count(),
            folds,
            mean_auc,
            mean_baseline_auc,
            pooled_roc,
            notes: vec![
                "AUCs are voxelwise".into(),
                "bone AUC: bone probability against B_t over all voxels".into(),
                "lesion AUC: risk against A_t1 AND NOT A_t over voxels inside the thresholded, dilated ground-truth bone mask".into(),
                "undefined metrics (a class absent) are excluded from means and counted".into(),
            ],
            config,
        })
    }
}

/// Leave-one-out cross-validation. Each fold trains on every other case and
/// evaluates on the held-out one. A failing fold is recorded and the run
/// continues.
pub fn loocv<M>(
    cohort: &[LongitudinalCase],
    seed: u64,
    config: serde_json::Value,
    mut train_fn: impl FnMut(&FoldSpec, &[LongitudinalCase]) -> Result<M>,
    mut eval_fn: impl FnMut(&FoldSpec, &M, &LongitudinalCase) -> Result<FoldOutput>,
) -> Result<EvalResult> {
    let specs = fold_specs(cohort, seed)?;
    let mut results = Vec::with_capacity(specs.len());
    for spec in specs {
        let train: Vec<LongitudinalCase> = cohort.iter().filter(|c| c.patient_id != spec.test_patient).cloned().collect();
        let test = &cohort[spec.index];
        let outcome = train_fn(&spec, &train).and_then(|m| eval_fn(&spec, &m, test));
        results.push(fold_result(spec, outcome));
    }
    EvalResult::aggregate(results, config)
}

/// What an evaluation callback returns for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutput {
    pub eval: CaseEval,
    pub risk_map: Option<String>,
    pub details: BTreeMap<String, serde_json::Value>,
}

pub fn fold_result(spec: FoldSpec, outcome: Result<FoldOutput>) -> FoldResult {
    match outcome {
        Ok(out) => FoldResult {
            fold: spec,
            status: FoldStatus::Ok,
            failure: None,
            eval: Some(out.eval),
            risk_map: out.risk_map,
            details: out.details,
        },
        Err(e) => FoldResult {
            fold: spec,
            status: FoldStatus::Failed,
            failure: Some(FoldFailure {
                kind: e.kind().to_string(),
                class: e.class().name().to_string(),
                message: e.to_string(),
            }),
            eval: None,
            risk_map: None,
            details: BTreeMap::new(),
        },
    }
}

/// Fold definitions: fold `i` holds out case `i`, seed from the `folds`
/// substream of `seed`.
pub fn fold_specs(cohort: &[LongitudinalCase], seed: u64) -> Result<Vec<FoldSpec>> {
    if cohort.len() < 2 {
        return Err(Error::Precondition(format!(
            "leave-one-out needs at least 2 patients, got {}",
            cohort.len()
        )));
    }
    let mut ids: Vec<&str> = cohort.iter().map(|c| c.patient_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Precondition("patient ids in a cohort must be unique".into()));
    }
    Ok(cohort
        .iter()
        .enumerate()
        .map(|(i, c)| FoldSpec {
            index: i,
            test_patient: c.patient_id.clone(),
            train_patients: cohort.iter().filter(|o| o.patient_id != c.patient_id).map(|o| o.patient_id.clone()).collect(),
            seed: seed::substream(seed, "folds", i as u64),
        })
        .collect())
}

pub const SUMMARY_NAME: &str = "summary.json";

/// Writes `summary.json` plus `roc_<region>.csv` and `roc_<region>.svg`
/// for every region. Returns the paths written.
pub fn emit_report(result: &EvalResult, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    write(SUMMARY_NAME.into(), serde_json::to_string_pretty(result)? + "\n")?;
    for region in all_regions() {
        let curve = result.pooled_roc.get(region).cloned().flatten();
        write(format!("roc_{region}.csv"), roc_csv(curve.as_deref()))?;
        write(format!("roc_{region}.svg"), roc_svg(region, curve.as_deref()))?;
    }
    Ok(written)
}

/// Header `fpr,tpr`, then one row per point; header only when undefined.
pub fn roc_csv(curve: Option<&[(f64, f64)]>) -> String {
    let mut s = String::from("fpr,tpr\n");
    for &(f, t) in curve.unwrap_or(&[]) {
        let _ = writeln!(s, "{f},{t}");
    }
    s
}

pub fn roc_svg(title: &str, curve: Option<&[(f64, f64)]>) -> String {
    const SIZE: f64 = 320.0;
    const PAD: f64 = 40.0;
    let px = |f: f64| PAD + f * SIZE;
    let py = |t: f64| PAD + (1.0 - t) * SIZE;
    let total = SIZE + 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#);
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{title}</text>"#, total / 2.0, PAD / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">FPR</text>"#, total / 2.0, total - 8.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">TPR</text>"#, total / 2.0, total / 2.0);
    match curve {
        Some(c) => {
            let pts: Vec<String> = c.iter().map(|&(f, t)| format!("{:.2},{:.2}", px(f), py(t))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
        }
        None => {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">undefined</text>"#, total / 2.0, total / 2.0);
        }
    }
    s.push_str("</svg>\n");
    s
}

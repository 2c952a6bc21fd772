//! One function per subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use marrowcast_core::cascade::{self, BonePredictor, BoneSource, CascadePipeline};
use marrowcast_core::eval::{self, EvalResult, FoldOutput, FoldSpec, FoldStatus, SUMMARY_NAME};
use marrowcast_core::phantom::{self, LongitudinalCase, PhantomParams, MANIFEST_NAME};
use marrowcast_core::preprocess::{bias_correct, preprocess_case};
use marrowcast_core::{Error, Result, UNetModel, Volume};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::provenance::Provenance;
use crate::report::{self, REPORT_NAME};
use crate::{CliError, CliResult, Context, RunConfig};

fn pool(ctx: Context) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.jobs)
        .build()
        .map_err(|e| Error::Precondition(format!("thread pool: {e}")))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn progress(ctx: Context, label: String) -> impl FnMut(usize, f64) {
    move |epoch, loss| {
        if ctx.verbose {
            eprintln!("{label} epoch {epoch} loss {loss:.6}");
        }
    }
}

/// Phantom cohort of `cohort_size` patients, seeded from `config.seed`.
pub fn generate(config: &RunConfig, ctx: Context) -> Result<Vec<LongitudinalCase>> {
    if config.cohort_size == 0 {
        return Err(Error::Precondition("cohort needs at least one patient".into()));
    }
    pool(ctx)?.install(|| {
        (0..config.cohort_size)
            .into_par_iter()
            .map(|i| {
                let p = PhantomParams {
                    seed: phantom::patient_seed(config.seed, i),
                    ..config.phantom.clone()
                };
                phantom::generate_case(&p, &phantom::patient_id(i))
                    .map_err(|e| Error::Generation(format!("patient {i}: {e}")))
            })
            .collect()
    })
}

fn is_preprocessed(case: &LongitudinalCase) -> bool {
    let p = &case.provenance;
    p.bias_corrected || p.normalized || p.alignment.is_some()
}

/// Preprocesses every case not already marked as preprocessed.
pub fn ensure_preprocessed(cases: Vec<LongitudinalCase>, config: &RunConfig, ctx: Context) -> Result<Vec<LongitudinalCase>> {
    pool(ctx)?.install(|| {
        cases
            .into_par_iter()
            .map(|c| {
                if is_preprocessed(&c) {
                    Ok(c)
                } else {
                    preprocess_case(&c, &config.preprocess).map(|(p, _)| p)
                }
            })
            .collect()
    })
}

fn patient_seeds(config: &RunConfig) -> Value {
    (0..config.cohort_size).map(|i| phantom::patient_seed(config.seed, i)).collect::<Vec<_>>().into()
}

pub fn phantom_gen(config: &RunConfig, out: &Path, ctx: Context) -> CliResult<()> {
    let cases = generate(config, ctx)?;
    create_dir(out)?;
    phantom::write_cohort(out, &cases, Some(config.seed), Some(&config.phantom))?;
    let mut prov = Provenance::new("phantom-gen", config);
    prov.seeds.insert("patients".into(), patient_seeds(config));
    prov.write(out)?;
    println!("wrote {} cases to {}", cases.len(), out.display());
    Ok(())
}

pub fn preprocess(config: &RunConfig, data: &Path, out: &Path, ctx: Context) -> CliResult<()> {
    let manifest = phantom::read_manifest(data)?;
    let cases = phantom::load_cohort(data)?;
    let processed: Vec<_> = pool(ctx)?.install(|| {
        cases
            .par_iter()
            .map(|c| preprocess_case(c, &config.preprocess))
            .collect::<Result<Vec<_>>>()
    })?;
    create_dir(out)?;
    let registrations: Vec<Value> = processed
        .iter()
        .map(|(c, reg)| {
            json!({
                "patient_id": c.patient_id,
                "registration": reg.as_ref().map(|r| json!({
                    "transform": r.transform.to_row_major(),
                    "identity_objective": r.identity_objective,
                    "final_objective": r.final_objective,
                })),
            })
        })
        .collect();
    let cases: Vec<_> = processed.into_iter().map(|(c, _)| c).collect();
    phantom::write_cohort(out, &cases, manifest.cohort_seed, manifest.params.as_ref())?;
    write_json(&out.join("registration.json"), &Value::Array(registrations))?;
    let mut prov = Provenance::new("preprocess", config);
    prov.input_file("data_manifest", &data.join(MANIFEST_NAME))?;
    prov.write(out)?;
    println!("preprocessed {} cases into {}", cases.len(), out.display());
    Ok(())
}

fn load_for_training(config: &RunConfig, data: &Path, ctx: Context) -> Result<Vec<LongitudinalCase>> {
    ensure_preprocessed(phantom::load_cohort(data)?, config, ctx)
}

pub fn train_bone(config: &RunConfig, data: &Path, out: &Path, ctx: Context) -> CliResult<()> {
    let cases = load_for_training(config, data, ctx)?;
    let (model, log) = cascade::train_bonenet(&cases, &config.bonenet, config.seed, &mut progress(ctx, "bonenet".into()))?;
    create_dir(out)?;
    let sha = model.save_checkpoint(out.join("bonenet"))?;
    write_json(&out.join("bonenet_log.json"), &serde_json::to_value(&log).map_err(Error::from)?)?;
    let mut prov = Provenance::new("train-bone", config);
    prov.input_file("data_manifest", &data.join(MANIFEST_NAME))?;
    prov.checkpoints.insert("bonenet".into(), sha);
    prov.write(out)?;
    println!(
        "bonenet: {} samples, final loss {:.6}",
        log.samples,
        log.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn train_lesion(config: &RunConfig, data: &Path, out: &Path, bonenet: Option<&Path>, ctx: Context) -> CliResult<()> {
    let bone = match (config.cascade.bone_source, bonenet) {
        (BoneSource::Bonenet, None) => {
            return Err(CliError::Usage("cascade.bone_source is `bonenet`; pass --bonenet".into()));
        }
        (BoneSource::Bonenet, Some(p)) => Some(UNetModel::load_checkpoint(p)?),
        (BoneSource::GroundTruth, _) => None,
    };
    let cases = load_for_training(config, data, ctx)?;
    let (model, log) = cascade::train_lesionnet(
        &cases,
        &config.cascade,
        &config.lesionnet,
        bone.as_ref().map(|b| b as &dyn BonePredictor),
        config.seed,
        &mut progress(ctx, "lesionnet".into()),
    )?;
    create_dir(out)?;
    let sha = model.save_checkpoint(out.join("lesionnet"))?;
    write_json(&out.join("lesionnet_log.json"), &serde_json::to_value(&log).map_err(Error::from)?)?;
    let mut prov = Provenance::new("train-lesion", config);
    prov.input_file("data_manifest", &data.join(MANIFEST_NAME))?;
    if let Some(p) = bonenet {
        let (json_path, bin_path) = marrowcast_core::unet::checkpoint_paths(p);
        prov.input_file("bonenet_manifest", &json_path)?;
        prov.input_file("bonenet_blob", &bin_path)?;
    }
    prov.checkpoints.insert("lesionnet".into(), sha);
    prov.write(out)?;
    println!(
        "lesionnet: {} samples, w_pos {}, final loss {:.6}",
        log.samples,
        log.w_pos.map_or_else(|| "none".into(), |w| format!("{w:.3}")),
        log.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub struct PredictRequest<'a> {
    pub input: &'a Path,
    pub bonenet: &'a Path,
    pub lesionnet: &'a Path,
    pub out: &'a Path,
    pub bone_out: Option<&'a Path>,
    /// Bias correction and normalization as configured.
    pub preprocess: bool,
    /// Take the patch size from the lesion net instead of the config.
    pub patch_size_from_net: bool,
}

pub fn predict(config: &RunConfig, req: &PredictRequest<'_>, _ctx: Context) -> CliResult<()> {
    let mut volume = Volume::load_nifti(req.input)?;
    if req.preprocess {
        if let Some(fwhm) = config.preprocess.bias_fwhm_mm {
            volume = bias_correct(&volume, fwhm)?;
        }
        if config.preprocess.normalize {
            volume = volume.normalize_intensity();
        }
    }
    let bone = UNetModel::load_checkpoint(req.bonenet)?;
    let lesion = UNetModel::load_checkpoint(req.lesionnet)?;
    let mut cascade_cfg = config.cascade.clone();
    if req.patch_size_from_net {
        cascade_cfg.patch_size = lesion.config().input_size;
    }
    let pipeline = CascadePipeline::new(bone, lesion, cascade_cfg)?;
    let pred = cascade::predict_risk_volume(&pipeline, &volume)?;
    let dir = req.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    pred.risk.risk.save_nifti(req.out)?;
    if let Some(p) = req.bone_out {
        pred.bone_prob.save_nifti(p)?;
    }
    let mut prov = Provenance::new("predict", config);
    prov.input_file("volume", req.input)?;
    for (role, path) in [("bonenet", req.bonenet), ("lesionnet", req.lesionnet)] {
        let (json_path, bin_path) = marrowcast_core::unet::checkpoint_paths(path);
        prov.input_file(&format!("{role}_manifest"), &json_path)?;
        prov.input_file(&format!("{role}_blob"), &bin_path)?;
    }
    prov.write(dir)?;
    let [nx, ny, nz] = volume.dims();
    println!(
        "risk map {nx}x{ny}x{nz}: {} voxels in bone region, wrote {}",
        pred.bone_region.count(),
        req.out.display()
    );
    Ok(())
}

/// Trains both nets on `train`, evaluates on `test` and writes the fold's
/// checkpoints and risk map under `out`.
fn run_fold(
    config: &RunConfig,
    spec: &FoldSpec,
    train: &[LongitudinalCase],
    test: &LongitudinalCase,
    out: &Path,
    ctx: Context,
) -> Result<FoldOutput> {
    let label = format!("fold {:02}", spec.index);
    let (bone, bone_log) =
        cascade::train_bonenet(train, &config.bonenet, spec.seed, &mut progress(ctx, format!("{label} bonenet")))?;
    let bone_source = match config.cascade.bone_source {
        BoneSource::Bonenet => Some(&bone as &dyn BonePredictor),
        BoneSource::GroundTruth => None,
    };
    let (lesion, lesion_log) = cascade::train_lesionnet(
        train,
        &config.cascade,
        &config.lesionnet,
        bone_source,
        spec.seed,
        &mut progress(ctx, format!("{label} lesionnet")),
    )?;
    let fold_dir = out.join("folds").join(format!("fold_{:02}", spec.index));
    create_dir(&fold_dir)?;
    let bone_sha = bone.save_checkpoint(fold_dir.join("bonenet"))?;
    let lesion_sha = lesion.save_checkpoint(fold_dir.join("lesionnet"))?;

    let pipeline = CascadePipeline::new(bone, lesion, config.cascade.clone())?;
    let (pred, case_eval) = eval::evaluate_case(&pipeline, test)?;
    let risk_map = if config.eval.risk_maps {
        let rel = format!("risk_maps/{}.nii", test.patient_id);
        create_dir(&out.join("risk_maps"))?;
        pred.risk.risk.save_nifti(out.join(&rel))?;
        Some(rel)
    } else {
        None
    };
    if ctx.verbose {
        let bone_auc = case_eval.regions.get(eval::REGION_BONE).and_then(|r| r.auc.value());
        let lesion_auc = case_eval.regions.get("lesion_all").and_then(|r| r.auc.value());
        eprintln!("{label} {}: bone AUC {bone_auc:?}, lesion AUC {lesion_auc:?}", test.patient_id);
    }
    let mut details = BTreeMap::new();
    details.insert("bonenet_epoch_losses".into(), json!(bone_log.epoch_losses));
    details.insert("bonenet_samples".into(), json!(bone_log.samples));
    details.insert("lesionnet_epoch_losses".into(), json!(lesion_log.epoch_losses));
    details.insert("lesionnet_samples".into(), json!(lesion_log.samples));
    details.insert("lesionnet_w_pos".into(), json!(lesion_log.w_pos));
    details.insert("bonenet_sha256".into(), json!(bone_sha));
    details.insert("lesionnet_sha256".into(), json!(lesion_sha));
    Ok(FoldOutput {
        eval: case_eval,
        risk_map,
        details,
    })
}

/// Leave-one-out evaluation with folds run in parallel on `ctx.jobs`
/// threads. Results do not depend on the thread count.
pub fn evaluate_cohort(config: &RunConfig, cohort: &[LongitudinalCase], out: &Path, ctx: Context) -> Result<EvalResult> {
    let mut specs = eval::fold_specs(cohort, config.seed)?;
    if let Some(n) = config.eval.folds {
        specs.truncate(n);
    }
    create_dir(out)?;
    let inner = Context { jobs: 1, ..ctx };
    let results = pool(ctx)?.install(|| {
        specs
            .into_par_iter()
            .map(|spec| {
                let train: Vec<LongitudinalCase> =
                    cohort.iter().filter(|c| c.patient_id != spec.test_patient).cloned().collect();
                let outcome = run_fold(config, &spec, &train, &cohort[spec.index], out, inner);
                eval::fold_result(spec, outcome)
            })
            .collect::<Vec<_>>()
    });
    EvalResult::aggregate(results, config.echo())
}

pub fn evaluate(config: &RunConfig, data: Option<&Path>, out: &Path, ctx: Context) -> CliResult<()> {
    let cohort = match data {
        Some(d) => phantom::load_cohort(d)?,
        None => generate(config, ctx)?,
    };
    let cohort = ensure_preprocessed(cohort, config, ctx)?;
    let result = evaluate_cohort(config, &cohort, out, ctx)?;
    eval::emit_report(&result, out)?;
    let md = report::render_markdown(&result);
    let md_path = out.join(REPORT_NAME);
    fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;

    let mut prov = Provenance::new("evaluate", config);
    match data {
        Some(d) => prov.input_file("data_manifest", &d.join(MANIFEST_NAME))?,
        None => {
            prov.seeds.insert("patients".into(), patient_seeds(config));
        }
    }
    prov.seeds.insert(
        "folds".into(),
        result.folds.iter().map(|f| f.fold.seed).collect::<Vec<_>>().into(),
    );
    for f in &result.folds {
        for net in ["bonenet", "lesionnet"] {
            if let Some(Value::String(sha)) = f.details.get(&format!("{net}_sha256")) {
                prov.checkpoints.insert(format!("folds/fold_{:02}/{net}", f.fold.index), sha.clone());
            }
        }
    }
    prov.write(out)?;

    for region in eval::all_regions() {
        let m = &result.mean_auc[region];
        let b = &result.mean_baseline_auc[region];
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"));
        println!(
            "{region}: mean_auc={} baseline={} defined={} undefined={}",
            fmt(m.mean.value()),
            fmt(b.mean.value()),
            m.defined,
            m.undefined
        );
    }
    println!("report written to {}", out.display());

    if let Some(f) = result.folds.iter().find(|f| f.status == FoldStatus::Failed) {
        let failure = f.failure.clone().unwrap_or_else(|| eval::FoldFailure {
            kind: "unknown".into(),
            class: "data".into(),
            message: String::new(),
        });
        return Err(CliError::FoldsFailed {
            failed: result.failed_folds,
            total: result.folds.len(),
            kind: failure.kind,
            class: failure.class,
            message: format!("fold {} ({}): {}", f.fold.index, f.fold.test_patient, failure.message),
        });
    }
    Ok(())
}

/// Re-renders the ROC plots and `report.md` of an evaluation directory
/// from its `summary.json` and ROC CSVs.
pub fn report(input: &Path, out: Option<&Path>) -> CliResult<()> {
    let summary_path = input.join(SUMMARY_NAME);
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let result: EvalResult =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", summary_path.display())))?;
    if result.format_version != eval::SUMMARY_FORMAT_VERSION {
        return Err(Error::Unsupported(format!("summary format_version {}", result.format_version)).into());
    }
    for region in eval::all_regions() {
        let csv_path = input.join(format!("roc_{region}.csv"));
        let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let curve = report::parse_roc_csv(&csv)?;
        let svg_path = input.join(format!("roc_{region}.svg"));
        fs::write(&svg_path, eval::roc_svg(region, curve.as_deref())).map_err(|e| Error::io(&svg_path, e))?;
    }
    let md = report::render_markdown(&result);
    let md_path = out.map_or_else(|| input.join(REPORT_NAME), Path::to_path_buf);
    fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    print!("{md}");
    Ok(())
}

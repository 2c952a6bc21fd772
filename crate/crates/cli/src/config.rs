//! Run configuration: one JSON document selecting a profile, with any
//! field overridable from the document or the command line.

use std::fs;
use std::path::{Path, PathBuf};

use marrowcast_core::cascade::CascadeConfig;
use marrowcast_core::phantom::PhantomParams;
use marrowcast_core::preprocess::PreprocessConfig;
use marrowcast_core::seed;
use marrowcast_core::unet::UNetConfig;
use marrowcast_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 384 x 384 slices and 64 x 64 patches.
    PaperScale,
    /// 96 x 96 slices and 32 x 32 patches.
    DeskScale,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::PaperScale => "paper_scale",
            Profile::DeskScale => "desk_scale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Run only the first `folds` leave-one-out folds; `None` runs all.
    pub folds: Option<usize>,
    /// Write each held-out case's risk map as NIfTI next to the report.
    pub risk_maps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Root of every random stream.
    pub seed: u64,
    /// Forces `--jobs 1`.
    pub reference_mode: bool,
    pub output_dir: PathBuf,
    /// Patients generated by `phantom-gen` or by `evaluate` without `--data`.
    pub cohort_size: usize,
    /// Per-patient phantom seeds come from `seed`; `phantom.seed` is unused
    /// for cohorts.
    pub phantom: PhantomParams,
    pub preprocess: PreprocessConfig,
    pub bonenet: UNetConfig,
    pub lesionnet: UNetConfig,
    pub cascade: CascadeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::PaperScale => Self {
                profile,
                seed: 0,
                reference_mode: false,
                output_dir: PathBuf::from("out"),
                cohort_size: 12,
                phantom: PhantomParams::paper_scale(),
                preprocess: PreprocessConfig::default(),
                bonenet: UNetConfig::bonenet_default(),
                lesionnet: UNetConfig::lesionnet_default(),
                cascade: CascadeConfig::default(),
                eval: EvalConfig {
                    folds: None,
                    risk_maps: true,
                },
            },
            Profile::DeskScale => Self {
                profile,
                phantom: PhantomParams::desk_scale(),
                bonenet: UNetConfig {
                    input_size: 96,
                    depth: 3,
                    base_channels: 4,
                    lr: 2e-3,
                    batch_size: 2,
                    epochs: 10,
                    ..UNetConfig::bonenet_default()
                },
                lesionnet: UNetConfig {
                    input_size: 32,
                    depth: 2,
                    base_channels: 4,
                    lr: 1e-3,
                    epochs: 4,
                    ..UNetConfig::lesionnet_default()
                },
                cascade: CascadeConfig {
                    patch_size: 32,
                    train_stride: 4,
                    ..CascadeConfig::default()
                },
                ..Self::for_profile(Profile::PaperScale)
            },
        }
    }

    /// Parses a document, layering it and then `overrides` (dotted path,
    /// value) over the defaults of its `profile`, and validates the result.
    pub fn from_value(doc: Value, overrides: &[(String, Value)]) -> Result<Self> {
        let Value::Object(mut doc) = doc else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        for (path, v) in overrides.iter().filter(|(p, _)| p == "profile") {
            doc.insert(path.clone(), v.clone());
        }
        let profile: Profile = match doc.get("profile") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => return Err(Error::Config("missing field `profile` (paper_scale or desk_scale)".into())),
        };
        let mut merged = serde_json::to_value(Self::for_profile(profile))?;
        merge(&mut merged, Value::Object(doc));
        for (path, v) in overrides {
            set_path(&mut merged, path, v.clone())?;
        }
        let config: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(doc, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |what: &str, e: Error| Error::Config(format!("{what}: {e}"));
        self.phantom.validate().map_err(|e| ctx("phantom", e))?;
        self.bonenet.validate().map_err(|e| ctx("bonenet", e))?;
        self.lesionnet.validate().map_err(|e| ctx("lesionnet", e))?;
        self.cascade.validate().map_err(|e| ctx("cascade", e))?;
        if self.lesionnet.input_size != self.cascade.patch_size {
            return Err(Error::Config(format!(
                "lesionnet.input_size {} must equal cascade.patch_size {}",
                self.lesionnet.input_size, self.cascade.patch_size
            )));
        }
        let [nx, ny, _] = self.phantom.dims;
        if self.bonenet.input_size < nx.max(ny) {
            return Err(Error::Config(format!(
                "bonenet.input_size {} is smaller than the {nx}x{ny} phantom slices",
                self.bonenet.input_size
            )));
        }
        if self.cohort_size == 0 {
            return Err(Error::Config("cohort_size must be >= 1".into()));
        }
        if self.eval.folds == Some(0) {
            return Err(Error::Config("eval.folds must be >= 1 when set".into()));
        }
        Ok(())
    }

    /// The configuration as recorded in reports: everything that shapes the
    /// results, without where they are written.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        v
    }

    /// SHA-256 of the compact JSON of [`RunConfig::echo`].
    pub fn hash(&self) -> String {
        seed::sha256_hex(serde_json::to_string(&self.echo()).expect("config serializes").as_bytes())
    }
}

/// Recursively overlays `top` on `base`; objects merge, anything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(m) = cur else {
            return Err(Error::Config(format!("`{path}`: `{}` is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            m.insert((*part).to_string(), v);
            return Ok(());
        }
        cur = m.entry(*part).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Parses `key.path=value`; the value is read as JSON, or as a string when
/// it is not valid JSON.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))?;
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key `{k}` is malformed")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

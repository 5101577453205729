//! Checkpoint directories: `manifest.json` plus one JSON file per operator.
//! The manifest is written last, so a directory without one holds no model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, PidonModel, SubPidon, Subdomain, SurrogateProblem, Variable};
use super::train::TrainState;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";

/// Unfinished part of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointProgress {
    pub pending: Vec<(f64, f64)>,
    pub splits_used: usize,
    /// Spans of the bisected parents, stored as `parent_*` files.
    pub parents: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    problem: SurrogateProblem,
    material_hash: String,
    architecture: Architecture,
    spans: Vec<(f64, f64)>,
    files: Vec<[String; 3]>,
    /// Longest objective time (s) over the bounds.
    t_max: f64,
    config: serde_json::Value,
    warnings: Vec<String>,
    progress: Option<CheckpointProgress>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn operator_files(prefix: &str, k: usize) -> [String; 3] {
    Variable::ALL.map(|v| format!("{prefix}_{k:03}_{}.json", v.tag()))
}

fn write_subdomain(dir: &Path, names: &[String; 3], sub: &Subdomain) -> Result<()> {
    for (name, op) in names.iter().zip(&sub.operators) {
        write_json(&dir.join(name), op)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_checkpoint(
    dir: &Path,
    problem: &SurrogateProblem,
    architecture: &Architecture,
    subdomains: &[Subdomain],
    config: &serde_json::Value,
    warnings: &[String],
    parents: &[Subdomain],
    progress: Option<CheckpointProgress>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(subdomains.len());
    for (k, sub) in subdomains.iter().enumerate() {
        let names = operator_files("sub", k);
        write_subdomain(dir, &names, sub)?;
        files.push(names);
    }
    for (k, sub) in parents.iter().enumerate() {
        write_subdomain(dir, &operator_files("parent", k), sub)?;
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        problem: problem.clone(),
        material_hash: problem.card.content_hash(),
        architecture: architecture.clone(),
        spans: subdomains.iter().map(|s| s.span).collect(),
        files,
        t_max: problem.t_max(),
        config: config.clone(),
        warnings: warnings.to_vec(),
        progress,
    };
    let tmp = dir.join("manifest.json.tmp");
    write_json(&tmp, &manifest)?;
    let target = dir.join(MANIFEST);
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))
}

pub fn save_model(model: &PidonModel, dir: &Path) -> Result<()> {
    model.validate()?;
    write_checkpoint(
        dir,
        &model.problem,
        &model.architecture,
        &model.subdomains,
        &model.config,
        &model.warnings,
        &[],
        None,
    )
}

/// Saves an unfinished run so that it can be resumed.
pub fn save_progress(
    dir: &Path,
    problem: &SurrogateProblem,
    architecture: &Architecture,
    config: &serde_json::Value,
    state: &TrainState,
) -> Result<()> {
    write_checkpoint(
        dir,
        problem,
        architecture,
        &state.accepted,
        config,
        &state.warnings,
        &state.parents,
        Some(CheckpointProgress {
            pending: state.pending.clone(),
            splits_used: state.splits_used,
            parents: state.parents.iter().map(|p| p.span).collect(),
        }),
    )
}

/// Contents of a checkpoint, complete or not.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub problem: SurrogateProblem,
    pub architecture: Architecture,
    pub config: serde_json::Value,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<PidonModel> {
        if !self.state.is_complete() {
            return Err(Error::Schema(format!(
                "checkpoint is incomplete ({} spans pending); resume training first",
                self.state.pending.len()
            )));
        }
        let model = PidonModel {
            problem: self.problem,
            architecture: self.architecture,
            subdomains: self.state.accepted,
            config: self.config,
            warnings: self.state.warnings,
        };
        model.validate()?;
        Ok(model)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = read_text(&dir.join(MANIFEST))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("manifest is not valid JSON: {e}")))?;
    let version = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Schema("manifest lacks a schema_version".into()))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion {
            found: version.min(u32::MAX as u64) as u32,
            expected: SCHEMA_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::Schema(format!("malformed manifest: {e}")))?;
    if manifest.material_hash != manifest.problem.card.content_hash() {
        return Err(Error::Schema("material card does not match its recorded hash".into()));
    }
    if manifest.spans.len() != manifest.files.len() {
        return Err(Error::Schema("manifest lists a different number of spans and files".into()));
    }
    let mut accepted = Vec::with_capacity(manifest.spans.len());
    for (span, names) in manifest.spans.iter().zip(&manifest.files) {
        accepted.push(read_subdomain(dir, *span, names)?);
    }
    let (pending, splits_used, parents) = match manifest.progress {
        Some(p) => {
            let mut parents = Vec::with_capacity(p.parents.len());
            for (k, span) in p.parents.iter().enumerate() {
                parents.push(read_subdomain(dir, *span, &operator_files("parent", k))?);
            }
            (p.pending, p.splits_used, parents)
        }
        None => (Vec::new(), 0, Vec::new()),
    };
    Ok(Checkpoint {
        problem: manifest.problem,
        architecture: manifest.architecture,
        config: manifest.config,
        state: TrainState {
            accepted,
            pending,
            splits_used,
            warnings: manifest.warnings,
            parents,
        },
    })
}

fn read_subdomain(dir: &Path, span: (f64, f64), names: &[String; 3]) -> Result<Subdomain> {
    let mut ops = Vec::with_capacity(3);
    for (v, name) in Variable::ALL.iter().zip(names) {
        if name.contains('/') || name.contains('\\') || name.starts_with('.') {
            return Err(Error::Schema(format!("refusing operator file name {name:?}")));
        }
        let path = dir.join(name);
        let op: SubPidon = serde_json::from_str(&read_text(&path)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if op.variable != *v || op.span != span {
            return Err(Error::Schema(format!(
                "{name} holds {:?} on {:?}, manifest expects {:?} on {span:?}",
                op.variable, op.span, v
            )));
        }
        op.validate()?;
        ops.push(op);
    }
    let operators: [SubPidon; 3] = ops.try_into().expect("three operators");
    Ok(Subdomain { span, operators })
}

/// Loads a complete model; unfinished checkpoints are refused.
pub fn load_model(dir: &Path) -> Result<PidonModel> {
    load_checkpoint(dir)?.into_model()
}

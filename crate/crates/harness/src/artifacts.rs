//! Run directories, CSV logs, checkpoints and their JSON sidecars.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use drd_core::models::{build_model, ModelSpec, SegModel};
use drd_nn::{checkpoint, ParamStore};
use serde::{Deserialize, Serialize};

use crate::evaluate::EvalReport;
use crate::train::{Aborted, LossRow, RunRecord, TrainOutcome};

pub const MODEL_FILE: &str = "model.safetensors";
pub const SIDECAR_FILE: &str = "model.json";
pub const RECORD_FILE: &str = "record.json";
pub const LOSS_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_GOOD_FILE: &str = "last_good.safetensors";

/// Metadata stored next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: ModelSpec,
    pub seed: u64,
    pub git_hash: Option<String>,
    pub metrics: Option<EvalReport>,
}

pub fn git_hash() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Creates `root/<timestamp>-<name>`, adding a numeric suffix on collision.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-{name}"));
    let mut dir = base.clone();
    let mut i = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{i}", base.display()));
        i += 1;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(LossRow::HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["step", "miou", "mean_f1", "oa"])?;
    for s in &record.snapshots {
        w.write_record([s.step.to_string(), format!("{:.6}", s.miou), format!("{:.6}", s.mean_f1), format!("{:.6}", s.oa)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, sidecar: &Sidecar, path: &Path) -> Result<()> {
    checkpoint::save(store, path).with_context(|| format!("saving {}", path.display()))?;
    let side = path.with_extension("json");
    std::fs::write(&side, serde_json::to_string_pretty(sidecar)?).with_context(|| format!("writing {}", side.display()))?;
    Ok(())
}

/// Rebuilds a model from a checkpoint and its sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(SegModel, Sidecar)> {
    let side = path.with_extension("json");
    let text = std::fs::read_to_string(&side).with_context(|| format!("reading sidecar {}", side.display()))?;
    let sidecar: Sidecar = serde_json::from_str(&text).with_context(|| format!("parsing {}", side.display()))?;
    let mut spec = sidecar.spec.clone();
    spec.pretrained_path = Some(path.to_path_buf());
    let model = build_model(&spec, sidecar.seed).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, sidecar))
}

/// Writes every artifact of a finished run into `dir`.
pub fn save_outcome(out: &TrainOutcome, seed: u64, dir: &Path) -> Result<()> {
    let sidecar = Sidecar {
        spec: out.model.spec().clone(),
        seed,
        git_hash: git_hash(),
        metrics: Some(out.record.final_metrics.clone()),
    };
    save_checkpoint(out.model.store(), &sidecar, &dir.join(MODEL_FILE))?;
    if let Some(p) = &out.projection {
        checkpoint::save(p.store(), &dir.join("projection.safetensors"))?;
    }
    if let Some(d) = &out.discriminator {
        checkpoint::save(d.store(), &dir.join("discriminator.safetensors"))?;
    }
    write_loss_csv(&out.record.losses, &dir.join(LOSS_FILE))?;
    write_metrics_csv(&out.record, &dir.join(METRICS_FILE))?;
    std::fs::write(dir.join("config.toml"), out.record.config.to_toml()?)?;
    std::fs::write(dir.join(RECORD_FILE), serde_json::to_string_pretty(&out.record)?)?;
    Ok(())
}

/// Checkpoint of the parameters before the failing step, loadable like any
/// other model checkpoint.
pub fn save_last_good(aborted: &Aborted, spec: &ModelSpec, seed: u64, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(LAST_GOOD_FILE);
    let sidecar = Sidecar {
        spec: spec.clone(),
        seed,
        git_hash: git_hash(),
        metrics: None,
    };
    save_checkpoint(&aborted.last_good, &sidecar, &path)?;
    Ok(path)
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Every `record.json` directly under `root` or one level below it.
pub fn find_records(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if root.join(RECORD_FILE).is_file() {
        out.push(root.join(RECORD_FILE));
    }
    if root.is_dir() {
        for e in std::fs::read_dir(root)? {
            let p = e?.path().join(RECORD_FILE);
            if p.is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

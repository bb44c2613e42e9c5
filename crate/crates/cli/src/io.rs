//! On-disk formats: schema-tagged CSVs, run directories and JSON checkpoints.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splagger_core::probes::ProbeRow;
use splagger_core::trainer::{Agent, CurvePoint, TrainConfig};
use splagger_core::Scalar;

use crate::CliError;

pub const SCHEMA: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const RUN_DIR_VAR: &str = "SPLAG_RUN_DIR";

pub const CURVE_COLUMNS: [&str; 11] = [
    "frames",
    "seed",
    "eval_return_mean",
    "ci_low",
    "ci_high",
    "loss_total",
    "loss_policy",
    "loss_value",
    "loss_entropy",
    "loss_kl",
    "grad_norm",
];

pub const PROBE_COLUMNS: [&str; 4] = ["t", "model", "seed", "value"];

fn schema_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>, CliError> {
    let mut file = File::create(path)?;
    writeln!(file, "# schema={SCHEMA}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    Ok(w)
}

pub fn write_curves(path: &Path, points: &[CurvePoint]) -> Result<(), CliError> {
    let mut w = schema_writer(path, &CURVE_COLUMNS)?;
    for p in points {
        let l = &p.loss;
        w.write_record(&[
            p.frames.to_string(),
            p.seed.to_string(),
            p.eval_return_mean.to_string(),
            p.ci_low.to_string(),
            p.ci_high.to_string(),
            l.total.to_string(),
            l.policy.to_string(),
            l.value.to_string(),
            l.entropy.to_string(),
            l.kl.to_string(),
            l.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_probe(path: &Path, rows: &[ProbeRow]) -> Result<(), CliError> {
    let mut w = schema_writer(path, &PROBE_COLUMNS)?;
    for r in rows {
        w.write_record(&[r.t.to_string(), r.model.clone(), r.seed.to_string(), r.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Header and records of a schema-tagged CSV.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let expected = format!("# schema={SCHEMA}");
    if first.trim_end() != expected {
        return Err(CliError::Format(format!("{}: expected `{expected}` on the first line", path.display())));
    }
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect::<Result<_, csv::Error>>()?;
    Ok((header, rows))
}

/// Root for run directories: `$SPLAG_RUN_DIR`, else `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(RUN_DIR_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn timestamp() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%S").to_string()
}

/// Creates `<root>/<env>_<model>_<seed>_<timestamp>`, adding a suffix if it exists.
pub fn create_run_dir(root: &Path, cfg: &TrainConfig, seed: u64) -> Result<PathBuf, CliError> {
    let base = format!("{}_{}_{}_{}", cfg.env.kind, cfg.model_label(), seed, timestamp());
    unique_dir(root, &base)
}

pub fn unique_dir(root: &Path, base: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(root)?;
    let mut dir = root.join(base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}.{n}"));
        n += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

pub fn write_config(path: &Path, cfg: &TrainConfig) -> Result<(), CliError> {
    fs::write(path, cfg.resolved().to_toml()?)?;
    Ok(())
}

pub fn read_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    Ok(TrainConfig::from_toml(&text)?)
}

/// Trained parameters with everything needed to rebuild the agent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub scalar: String,
    pub seed: u64,
    pub frames: u64,
    pub config: TrainConfig,
    pub agent: Agent<T>,
}

impl<T: Scalar + Serialize + for<'de> Deserialize<'de>> Checkpoint<T> {
    pub fn new(cfg: &TrainConfig, seed: u64, frames: u64, agent: &Agent<T>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            scalar: std::any::type_name::<T>().to_string(),
            seed,
            frames,
            config: cfg.resolved(),
            agent: agent.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let file = File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = File::open(path)?;
        let ck: Checkpoint<T> = serde_json::from_reader(BufReader::new(file))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CliError::Format(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        let want = std::any::type_name::<T>();
        if ck.scalar != want {
            return Err(CliError::Format(format!("{}: stored as {}, read as {want}", path.display(), ck.scalar)));
        }
        Ok(ck)
    }
}

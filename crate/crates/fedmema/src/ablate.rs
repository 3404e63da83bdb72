//! Ablation ladders and parameter sweeps built on top of single runs.
//!
//! The ladder compares the component stack row by row:
//!   (a) `fed_decoder_only`  — FedAvg of decoders, personal encoders
//!   (b) `fed_encoder_only`  — FedAvg of encoders, personal decoders
//!   (c) `no_lacca`          — modality encoders + fusion server, no calibration
//!   (d) `mono_anchor`       — calibration against one anchor per class
//!   (e) `full`              — multi-anchor calibration
//! plus `local_only` as the no-federation floor. The row metric is the mean
//! over clients of final test mDSC; the server column tracks the server-side
//! model on the same test pool.

use serde::{Deserialize, Serialize};

use crate::config::{AblationMode, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fed::{self, Summary};

/// Ladder rows in presentation order.
pub const LADDER: [(&str, AblationMode); 6] = [
    ("a", AblationMode::FedDecoderOnly),
    ("b", AblationMode::FedEncoderOnly),
    ("c", AblationMode::NoLacca),
    ("d", AblationMode::MonoAnchor),
    ("e", AblationMode::Full),
    ("local", AblationMode::LocalOnly),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mode: String,
    pub client_mdsc_per_seed: Vec<f64>,
    pub client_mdsc_mean: f64,
    pub server_mdsc_per_seed: Vec<f64>,
    pub server_mdsc_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .unwrap_or_else(|| panic!("no ladder row labelled `{label}`"))
    }

    /// Plain-text table for terminal output.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<6} {:<18} {:>12} {:>12}  per-seed client mDSC\n", "row", "mode", "client mDSC", "server mDSC"));
        for r in &self.rows {
            let seeds = r
                .client_mdsc_per_seed
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!(
                "({:<4}) {:<18} {:>12.4} {:>12.4}  [{seeds}]\n",
                r.label, r.mode, r.client_mdsc_mean, r.server_mdsc_mean
            ));
        }
        out
    }
}

/// Seeds used by an ablation: `data.seed, data.seed+1, ...`.
pub fn ablation_seeds(base: &ExperimentConfig, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| base.data.seed + k).collect()
}

/// Derive the config for one ladder cell. Calibration switches are reset to
/// the protocol defaults first so every row is an ablation of the same full
/// system regardless of what the base config had toggled.
fn cell_config(base: &ExperimentConfig, mode: AblationMode, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.lacca.enabled = true;
    cfg.lacca.multi_anchor = true;
    cfg.ablation.mode = mode;
    cfg.data.seed = seed;
    cfg.run.out_dir = base
        .run_dir()
        .join("ablate")
        .to_str()
        .ok_or_else(|| Error::config("out_dir is not valid UTF-8"))?
        .to_string();
    cfg.experiment.name = format!("{}-s{}", mode.as_str(), seed);
    cfg.normalized()
}

/// Run every ladder row over `seeds`, writing each cell under
/// `<run_dir>/ablate/<mode>-s<seed>/` and the report to
/// `<run_dir>/ablation.json`.
pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(LADDER.len());
    for (label, mode) in LADDER {
        let mut client_per_seed = Vec::with_capacity(seeds.len());
        let mut server_per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = cell_config(base, mode, seed)?;
            log::info!("ablation cell: mode={} seed={seed}", mode.as_str());
            let art = fed::execute(&cfg)?;
            client_per_seed.push(art.summary.mean_client_mdsc);
            server_per_seed.push(art.summary.server_mdsc);
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            label: label.into(),
            mode: mode.as_str().into(),
            client_mdsc_mean: client_per_seed.iter().sum::<f64>() / n,
            server_mdsc_mean: server_per_seed.iter().sum::<f64>() / n,
            client_mdsc_per_seed: client_per_seed,
            server_mdsc_per_seed: server_per_seed,
        });
    }
    let report = AblationReport { seeds: seeds.to_vec(), rows };
    let dir = base.run_dir();
    std::fs::create_dir_all(&dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(dir.join("ablation.json"), json + "\n")?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>12} {:>12}\n", self.param, "client mDSC", "server mDSC"));
        for p in &self.points {
            out.push_str(&format!(
                "{:<24} {:>12.4} {:>12.4}\n",
                p.value, p.summary.mean_client_mdsc, p.summary.server_mdsc
            ));
        }
        out
    }
}

fn fs_safe(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '-' })
        .collect()
}

/// Re-run the base experiment once per value of `param` (a dotted config
/// key). Cells land under `<run_dir>/sweep/<param>-<value>/`; the report is
/// written to `<run_dir>/sweep.json`.
pub fn run_sweep(base: &ExperimentConfig, param: &str, values: &[String]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone().with_override(&format!("{param}={v}"))?;
        cfg.run.out_dir = base
            .run_dir()
            .join("sweep")
            .to_str()
            .ok_or_else(|| Error::config("out_dir is not valid UTF-8"))?
            .to_string();
        cfg.experiment.name = format!("{}-{}", fs_safe(&param.replace('.', "-")), fs_safe(v));
        let cfg = cfg.normalized()?;
        log::info!("sweep cell: {param}={v}");
        let art = fed::execute(&cfg)?;
        points.push(SweepPoint { value: v.clone(), summary: art.summary });
    }
    let report = SweepReport { param: param.into(), points };
    let dir = base.run_dir();
    std::fs::create_dir_all(&dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(dir.join("sweep.json"), json + "\n")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(dir: &std::path::Path) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
[experiment]
name = "mini"
[data]
samples_per_site = 4
image_size = 16
seed = 5
[federation]
rounds = 1
[optim]
batch_size = 2
[run]
out_dir = "{}"
"#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn ablation_produces_six_rows_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base(dir.path());
        let report = run_ablation(&cfg, &[5]).unwrap();
        assert_eq!(report.rows.len(), 6);
        let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, vec!["a", "b", "c", "d", "e", "local"]);
        for r in &report.rows {
            assert_eq!(r.client_mdsc_per_seed.len(), 1);
            assert!(r.client_mdsc_mean.is_finite());
        }
        assert!(cfg.run_dir().join("ablation.json").is_file());
        assert!(cfg.run_dir().join("ablate").join("full-s5").join("summary.json").is_file());
        assert!(!report.table().is_empty());
    }

    #[test]
    fn sweep_runs_each_value() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base(dir.path());
        let report = run_sweep(&cfg, "anchors.n_k", &["1".into(), "2".into()]).unwrap();
        assert_eq!(report.points.len(), 2);
        assert!(cfg.run_dir().join("sweep.json").is_file());
        assert!(cfg.run_dir().join("sweep").join("anchors-n_k-1").join("summary.json").is_file());
    }
}

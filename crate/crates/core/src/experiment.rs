//! Experiment configuration, the generate → corrupt → train → evaluate
//! pipeline and the component ablation grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{LayerShape, SetEncoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::synth::{Condition, CorruptionDescriptor, Dataset, DatasetManifest, GeneratorConfig};
use crate::trainer::{run_training, Mode, RunOutput, RunSinks, TrainerConfig};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub generator: GeneratorConfig,
    /// Identities `0..train_ids` train; the rest are test identities.
    pub train_ids: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train_ids: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// NM groups per identity enrolled in the gallery.
    pub nm_gallery_groups: usize,
    pub exclude_same_view: bool,
    /// Snapshot cadence for memorization curves (0 disables).
    pub cadence: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            nm_gallery_groups: 4,
            exclude_same_view: true,
            cadence: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub output_dir: PathBuf,
    pub data: DataSection,
    /// Applied to the training split.
    pub corruption: Option<CorruptionDescriptor>,
    pub trainer: TrainerConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            corruption: None,
            trainer: TrainerConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::format(
                "config",
                format!("unsupported format version {}", cfg.format_version),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the TOML encoding. The output directory is left out so
    /// that the same experiment hashes identically wherever it is written.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        Ok(Sha256::digest(canonical.to_toml()?.as_bytes()).into())
    }

    pub fn hash_hex(&self) -> Result<String> {
        Ok(self.hash()?.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Uses `seed` for data generation, corruption and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.generator.seed = seed;
        if let Some(c) = self.corruption.as_mut() {
            c.seed = seed;
        }
        self.trainer.seed = seed;
        self
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut m = DatasetManifest::new(self.data.generator.clone(), self.data.train_ids);
        m.corruptions.extend(self.corruption);
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        if self.data.train_ids == 0 || self.data.train_ids >= self.data.generator.n_ids {
            return Err(Error::invalid("train_ids must leave at least one test identity"));
        }
        self.trainer.validate()
    }
}

pub fn encoder_for(train: &Dataset, trainer: &TrainerConfig) -> Result<SetEncoder> {
    let d_in = train
        .samples
        .first()
        .ok_or_else(|| Error::invalid("empty training set"))?
        .frames[0]
        .len();
    SetEncoder::new(LayerShape {
        d_in,
        hidden: trainer.hidden,
        d_emb: trainer.d_emb,
        classes: train.n_ids,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub run: RunOutput,
    pub report: EvalReport,
    pub encoder: SetEncoder,
    pub train: Dataset,
    pub test: Dataset,
}

/// Generates and corrupts the data, trains, and evaluates F on the test
/// identities.
pub fn run_experiment(cfg: &ExperimentConfig, sinks: Option<RunSinks>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (train, test) = cfg.manifest().materialize()?;
    let encoder = encoder_for(&train, &cfg.trainer)?;
    let sinks = match sinks {
        Some(s) => s,
        None => RunSinks {
            trace: None,
            metrics: None,
            config_hash: cfg.hash()?,
        },
    };
    let run = run_training(&encoder, &train, &cfg.trainer, sinks)?;
    let report = evaluate(
        &encoder,
        &run.theta_f,
        &test,
        cfg.eval.nm_gallery_groups,
        cfg.eval.exclude_same_view,
    )?;
    Ok(ExperimentOutcome {
        run,
        report,
        encoder,
        train,
        test,
    })
}

/// One row of the component grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub label: &'static str,
    pub mode: Mode,
    pub cyclic: bool,
    pub and_enabled: bool,
}

/// The eight rows: supervised (#1–#3), self-supervised (#4–#5) and the
/// combined losses (#6–#8).
pub const ABLATION_ROWS: [AblationRow; 8] = [
    AblationRow { index: 1, label: "supervised", mode: Mode::Supervised, cyclic: false, and_enabled: false },
    AblationRow { index: 2, label: "supervised+cyclic", mode: Mode::Supervised, cyclic: true, and_enabled: false },
    AblationRow { index: 3, label: "supervised+cyclic+AND", mode: Mode::Supervised, cyclic: true, and_enabled: true },
    AblationRow { index: 4, label: "selfsup", mode: Mode::Selfsup, cyclic: false, and_enabled: false },
    AblationRow { index: 5, label: "selfsup+cyclic", mode: Mode::Selfsup, cyclic: true, and_enabled: false },
    AblationRow { index: 6, label: "full-cyclic", mode: Mode::Cntn, cyclic: false, and_enabled: false },
    AblationRow { index: 7, label: "full-AND", mode: Mode::Cntn, cyclic: true, and_enabled: false },
    AblationRow { index: 8, label: "full", mode: Mode::Cntn, cyclic: true, and_enabled: true },
];

impl AblationRow {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.trainer.mode = self.mode;
        cfg.trainer.cyclic = self.cyclic;
        cfg.trainer.and_enabled = self.and_enabled;
        cfg
    }
}

/// Configurations of every (row, seed) cell, row-major.
pub fn ablation_cells(base: &ExperimentConfig, seeds: &[u64]) -> Vec<(AblationRow, u64, ExperimentConfig)> {
    ABLATION_ROWS
        .iter()
        .flat_map(|row| seeds.iter().map(move |&s| (*row, s, row.apply(base).with_seed(s))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationLine {
    pub index: usize,
    pub label: String,
    pub nm: MeanStd,
    pub bg: MeanStd,
    pub cl: MeanStd,
    /// Per-seed CL means, in seed order.
    pub cl_per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub lines: Vec<AblationLine>,
}

impl AblationTable {
    /// Assembles the table from per-cell reports in [`ablation_cells`]
    /// order.
    pub fn from_reports(seeds: &[u64], reports: &[EvalReport]) -> Result<Self> {
        if reports.len() != ABLATION_ROWS.len() * seeds.len() {
            return Err(Error::invalid("one report per (row, seed) cell is required"));
        }
        let cond = |r: &EvalReport, c| r.condition_mean(c).unwrap_or(f64::NAN);
        let lines = ABLATION_ROWS
            .iter()
            .zip(reports.chunks(seeds.len().max(1)))
            .map(|(row, chunk)| {
                let col = |c: Condition| chunk.iter().map(|r| cond(r, c)).collect::<Vec<_>>();
                AblationLine {
                    index: row.index,
                    label: row.label.to_string(),
                    nm: MeanStd::of(&col(Condition::NM)),
                    bg: MeanStd::of(&col(Condition::BG)),
                    cl: MeanStd::of(&col(Condition::CL)),
                    cl_per_seed: col(Condition::CL),
                }
            })
            .collect();
        Ok(Self {
            seeds: seeds.to_vec(),
            lines,
        })
    }

    pub fn line(&self, index: usize) -> Option<&AblationLine> {
        self.lines.iter().find(|l| l.index == index)
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = String::from("row,label,nm_mean,nm_std,bg_mean,bg_std,cl_mean,cl_std\n");
        for l in &self.lines {
            out.push_str(&format!(
                "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
                l.index, l.label, l.nm.mean, l.nm.std, l.bg.mean, l.bg.std, l.cl.mean, l.cl.std
            ));
        }
        out.push_str(&format!("# config_hash={config_hash}\n"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::CorruptionKind;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn customized_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default().with_seed(7);
        cfg.corruption = Some(CorruptionDescriptor {
            kind: CorruptionKind::Split,
            amount: 0.6,
            seed: 7,
        });
        cfg.trainer.optimizer.lr = 0.0123456789;
        cfg.trainer.mode = Mode::CoteachBaseline;
        cfg.data.generator.jitter = 0.1 + 0.2;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
        let partial = ExperimentConfig::from_toml("[trainer]\niterations = 10\n").unwrap();
        assert_eq!(partial.trainer.iterations, 10);
        assert_eq!(partial.trainer.p, 8);
    }

    #[test]
    fn grid_has_eight_rows_per_seed() {
        let cells = ablation_cells(&ExperimentConfig::default(), &[1, 2, 3]);
        assert_eq!(cells.len(), 24);
        assert_eq!(cells[0].2.trainer.mode, Mode::Supervised);
        assert!(cells[23].2.trainer.cyclic && cells[23].2.trainer.and_enabled);
        assert_eq!(cells[4].2.trainer.seed, 2);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}

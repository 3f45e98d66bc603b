//! Experiment harness: JSON experiment configs, named presets, multi-seed
//! execution, and deterministic JSON/CSV result output.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bn_adapt::{BNAdaptConfig, BnVariant};
use crate::engine::{AdaptConfig, AdaptRunner, Method, SequenceReport, SlidingBuffer};
use crate::error::{GttaError, Result};
use crate::model::{pretrain_autoencoder, train_source, Classifier, EncoderDecoderState};
use crate::toy_data::{build_schedule, generate_dataset, CorruptionKind, ScheduleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Protocol {
    /// whole test batches arrive at once
    Batch,
    /// samples arrive one at a time through a sliding buffer
    SlidingWindow { buffer: usize },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub side: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 4,
            train_size: 512,
            test_size: 256,
            side: 16,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub autoencoder_iters: usize,
    pub autoencoder_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            lr: 1e-3,
            autoencoder_iters: 200,
            autoencoder_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    pub kinds: Vec<CorruptionKind>,
    pub batches_per_domain: usize,
}

/// One method entry in an experiment: a label for result rows plus the
/// full adaptation configuration used for that run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MethodRun {
    pub label: String,
    pub adapt: AdaptConfig,
}

impl MethodRun {
    pub fn plain(method: Method, base: &AdaptConfig) -> MethodRun {
        MethodRun {
            label: method.name(),
            adapt: AdaptConfig { method, ..*base },
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodRun>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(GttaError::Config("at least one seed required".into()));
        }
        if self.methods.is_empty() {
            return Err(GttaError::Config("at least one method required".into()));
        }
        if self.schedule.kinds.is_empty() {
            return Err(GttaError::Config("schedule needs corruption kinds".into()));
        }
        let mut labels: Vec<&str> = self.methods.iter().map(|m| m.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.methods.len() {
            return Err(GttaError::Config("method labels must be unique".into()));
        }
        for m in &self.methods {
            m.adapt.validate()?;
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

pub const PRESET_NAMES: [&str; 6] = [
    "continual-toy",
    "gradual-toy",
    "single-sample-toy",
    "ablation-mixup",
    "ablation-updates",
    "ablation-source-fraction",
];

fn bench_adapt() -> AdaptConfig {
    // adaptation lr tuned for the toy model; the conservative default of
    // 1e-5 barely moves this small network within 100 batches
    AdaptConfig {
        lr: 1e-3,
        batch_size_test: 32,
        batch_size_source: 32,
        ..Default::default()
    }
}

fn standard_methods(base: &AdaptConfig) -> Vec<MethodRun> {
    vec![
        MethodRun::plain(Method::Source, base),
        MethodRun::plain(
            Method::Bn {
                config: BNAdaptConfig::new(BnVariant::Bn0_1),
            },
            base,
        ),
        MethodRun::plain(
            Method::Bn {
                config: BNAdaptConfig::new(BnVariant::Bn1),
            },
            base,
        ),
        MethodRun::plain(
            Method::Bn {
                config: BNAdaptConfig::new(BnVariant::BnEma),
            },
            base,
        ),
        MethodRun::plain(Method::GttaMix, base),
    ]
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = bench_adapt();
    let continual = ScheduleConfig {
        mode: ScheduleMode::Continual,
        kinds: CorruptionKind::ALL.to_vec(),
        batches_per_domain: 20,
    };
    let cfg = match name {
        "continual-toy" => ExperimentConfig {
            name: name.into(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            schedule: continual,
            protocol: Protocol::Batch,
            seeds: vec![0, 1, 2],
            methods: standard_methods(&base),
        },
        "gradual-toy" => ExperimentConfig {
            name: name.into(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig {
                mode: ScheduleMode::Gradual,
                kinds: CorruptionKind::ALL.to_vec(),
                batches_per_domain: 10,
            },
            protocol: Protocol::Batch,
            seeds: vec![0, 1, 2],
            methods: standard_methods(&base),
        },
        "single-sample-toy" => ExperimentConfig {
            name: name.into(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig {
                batches_per_domain: 4,
                ..continual
            },
            protocol: Protocol::SlidingWindow { buffer: 32 },
            seeds: vec![0, 1, 2],
            methods: vec![MethodRun::plain(Method::GttaMix, &base)],
        },
        "ablation-mixup" => ExperimentConfig {
            name: name.into(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            schedule: continual,
            protocol: Protocol::Batch,
            seeds: vec![0, 1, 2],
            methods: [0.0, 1.0 / 3.0, 0.5]
                .iter()
                .map(|&lam| MethodRun {
                    label: format!("gtta_mix_lam{lam:.2}"),
                    adapt: AdaptConfig {
                        method: Method::GttaMix,
                        mixup: crate::mixup_domain::MixupConfig::new(lam).unwrap(),
                        ..base
                    },
                })
                .collect(),
        },
        "ablation-updates" => ExperimentConfig {
            name: name.into(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            schedule: continual,
            protocol: Protocol::Batch,
            seeds: vec![0, 1, 2],
            methods: [1usize, 4]
                .iter()
                .flat_map(|&u| {
                    [Method::GttaMix, Method::SelfTrainingOnly]
                        .into_iter()
                        .map(move |m| (m, u))
                })
                .map(|(m, u)| MethodRun {
                    label: format!("{}_u{u}", m.name()),
                    adapt: AdaptConfig {
                        method: m,
                        updates_per_batch: u,
                        ..base
                    },
                })
                .collect(),
        },
        "ablation-source-fraction" => ExperimentConfig {
            name: name.into(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            schedule: continual,
            protocol: Protocol::Batch,
            seeds: vec![0, 1, 2],
            methods: [1.0, 0.5, 0.1]
                .iter()
                .map(|&f| MethodRun {
                    label: format!("gtta_mix_sf{f:.1}"),
                    adapt: AdaptConfig {
                        method: Method::GttaMix,
                        source_fraction: f,
                        ..base
                    },
                })
                .collect(),
        },
        other => {
            return Err(GttaError::Config(format!(
                "unknown preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Result table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub kind: String,
    pub severity: u8,
    pub seed: u64,
    pub error: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Mean error over all rows of a method (seeds and domains pooled).
    pub fn mean_error(&self, method: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.error)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean error of a method restricted to severity-5 rows.
    pub fn severity5_mean(&self, method: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.severity == 5)
            .map(|r| r.error)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,kind,severity,seed,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.method, r.kind, r.severity, r.seed, r.error
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ResultTable> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "method,kind,severity,seed,error" {
                    return Err(GttaError::Config("unexpected CSV header".into()));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(GttaError::Config(format!("bad CSV row: {line}")));
            }
            rows.push(ResultRow {
                method: parts[0].into(),
                kind: parts[1].into(),
                severity: parts[2]
                    .parse()
                    .map_err(|_| GttaError::Config("bad severity".into()))?,
                seed: parts[3]
                    .parse()
                    .map_err(|_| GttaError::Config("bad seed".into()))?,
                error: parts[4]
                    .parse()
                    .map_err(|_| GttaError::Config("bad error".into()))?,
            });
        }
        Ok(ResultTable { rows })
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize)]
struct RunRecord<'a> {
    experiment: &'a str,
    method: &'a str,
    seed: u64,
    adapt: &'a AdaptConfig,
    report: &'a SequenceReport,
}

/// Per-seed shared assets: the trained source model and (when needed) the
/// pre-trained style network, so every method starts from the same weights.
struct SeedAssets {
    source: crate::toy_data::LabeledImageSet,
    test_pool: crate::toy_data::LabeledImageSet,
    model: Classifier,
    style: Option<EncoderDecoderState>,
}

fn prepare_seed(config: &ExperimentConfig, seed: u64, need_style: bool) -> Result<SeedAssets> {
    let d = &config.dataset;
    let source = generate_dataset(seed, d.classes, d.train_size, d.side)?;
    let test_pool = generate_dataset(seed ^ 0x_7e57_0000, d.classes, d.test_size, d.side)?;
    let model = train_source(&source, config.train.epochs, config.train.lr, seed)?;
    let style = if need_style {
        Some(pretrain_autoencoder(
            &source,
            config.train.autoencoder_iters,
            config.train.autoencoder_lr,
            seed,
        )?)
    } else {
        None
    };
    Ok(SeedAssets {
        source,
        test_pool,
        model,
        style,
    })
}

/// Runs every (method, seed) combination and returns per-domain rows.
/// When `out_dir` is set, one JSON report per run plus a flat `results.csv`
/// are written there; output is byte-identical across reruns.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ResultTable> {
    config.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let need_style = config
        .methods
        .iter()
        .any(|m| m.adapt.method == Method::GttaSt);
    let schedule = build_schedule(
        config.schedule.mode,
        &config.schedule.kinds,
        config.schedule.batches_per_domain,
    )?;
    let mut table = ResultTable::default();
    for &seed in &config.seeds {
        let assets = prepare_seed(config, seed, need_style)?;
        for method in &config.methods {
            let mut runner = AdaptRunner::new(
                assets.model.clone(),
                &assets.source,
                assets.style.clone(),
                method.adapt,
                seed,
            )?;
            let report = match config.protocol {
                Protocol::Batch => runner.run_sequence(&schedule, &assets.test_pool, seed)?,
                Protocol::SlidingWindow { buffer } => {
                    let mut buf = SlidingBuffer::new(buffer)?;
                    runner.sliding_window_adapt(&schedule, &assets.test_pool, &mut buf, seed)?
                }
            };
            for dom in &report.domains {
                table.rows.push(ResultRow {
                    method: method.label.clone(),
                    kind: dom.kind.clone(),
                    severity: dom.severity,
                    seed,
                    error: dom.error_rate,
                });
            }
            if let Some(dir) = out_dir {
                let record = RunRecord {
                    experiment: &config.name,
                    method: &method.label,
                    seed,
                    adapt: &method.adapt,
                    report: &report,
                };
                let path = dir.join(format!("{}_{}_seed{}.json", config.name, method.label, seed));
                std::fs::write(path, serde_json::to_string_pretty(&record)?)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("results.csv"), table.to_csv())?;
    }
    Ok(table)
}

/// Aggregates a results directory ("report" CLI subcommand): reads
/// `results.csv` and returns a per-method summary in label order.
pub fn summarize_dir(dir: &Path) -> Result<String> {
    let csv = std::fs::read_to_string(dir.join("results.csv"))?;
    let table = ResultTable::from_csv(&csv)?;
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>10} {:>10}\n",
        "method", "mean err%", "sev5 err%"
    ));
    for m in table.methods() {
        let mean = table.mean_error(&m).unwrap_or(f64::NAN);
        let s5 = table
            .severity5_mean(&m)
            .map(|v| format!("{v:10.2}"))
            .unwrap_or_else(|| format!("{:>10}", "-"));
        out.push_str(&format!("{m:<28} {mean:10.2} {s5}\n"));
    }
    Ok(out)
}

/// Mean per-seed error of a method: seed -> mean over its domain rows.
pub fn per_seed_means(table: &ResultTable, method: &str) -> BTreeMap<u64, f64> {
    let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| r.method == method) {
        let e = sums.entry(r.seed).or_insert((0.0, 0));
        e.0 += r.error;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(s, (sum, n))| (s, sum / n as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> ExperimentConfig {
        let base = AdaptConfig {
            lr: 1e-3,
            batch_size_test: 8,
            batch_size_source: 8,
            ..Default::default()
        };
        ExperimentConfig {
            name: "tiny".into(),
            dataset: DatasetConfig {
                classes: 4,
                train_size: 48,
                test_size: 32,
                side: 16,
            },
            train: TrainConfig {
                epochs: 2,
                lr: 1e-3,
                autoencoder_iters: 10,
                autoencoder_lr: 1e-3,
            },
            schedule: ScheduleConfig {
                mode: ScheduleMode::Continual,
                kinds: vec![CorruptionKind::GaussianNoise, CorruptionKind::Contrast],
                batches_per_domain: 2,
            },
            protocol: Protocol::Batch,
            seeds: vec![0],
            methods: vec![
                MethodRun::plain(Method::Source, &base),
                MethodRun::plain(Method::GttaMix, &base),
            ],
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = preset("continual-toy").unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        let again = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn all_presets_validate() {
        for name in PRESET_NAMES {
            preset(name).unwrap();
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn duplicate_labels_rejected() {
        let mut cfg = tiny_config();
        cfg.methods[1].label = cfg.methods[0].label.clone();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_writes_expected_files_and_rows() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config();
        let table = run_experiment(&cfg, Some(dir.path())).unwrap();
        // 2 methods x 1 seed x 2 domains
        assert_eq!(table.rows.len(), 4);
        assert!(dir.path().join("results.csv").exists());
        assert!(dir.path().join("tiny_source_seed0.json").exists());
        assert!(dir.path().join("tiny_gtta_mix_seed0.json").exists());
        let summary = summarize_dir(dir.path()).unwrap();
        assert!(summary.contains("gtta_mix"));
    }

    #[test]
    fn csv_round_trip_and_aggregates() {
        let table = ResultTable {
            rows: vec![
                ResultRow {
                    method: "a".into(),
                    kind: "gaussian_noise".into(),
                    severity: 5,
                    seed: 0,
                    error: 40.0,
                },
                ResultRow {
                    method: "a".into(),
                    kind: "contrast".into(),
                    severity: 3,
                    seed: 0,
                    error: 20.0,
                },
            ],
        };
        let csv = table.to_csv();
        let back = ResultTable::from_csv(&csv).unwrap();
        assert_eq!(back.rows, table.rows);
        assert_eq!(back.mean_error("a"), Some(30.0));
        assert_eq!(back.severity5_mean("a"), Some(40.0));
        assert_eq!(back.mean_error("b"), None);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let cfg = tiny_config();
        run_experiment(&cfg, Some(d1.path())).unwrap();
        run_experiment(&cfg, Some(d2.path())).unwrap();
        let a = std::fs::read(d1.path().join("results.csv")).unwrap();
        let b = std::fs::read(d2.path().join("results.csv")).unwrap();
        assert_eq!(a, b);
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use ttt4rec_core::checkpoint;
use ttt4rec_core::data::{
    build_sequences, default_max_seq_len, parse_log, split_leave_one_out, Dataset, LogFormat, Split,
};
use ttt4rec_core::eval::{evaluate, MetricsReport, ModelScorer};
use ttt4rec_core::training::{self, write_metrics_csv, MetricsRow, RunRecorder, TrainConfig};

use crate::config::{GridAxes, Overrides, RunConfig};

const DEFAULT_RUN_DIR: &str = "runs/train";
const DEFAULT_GRID_DIR: &str = "runs/grid";
const REPORT_FILE: &str = "report.json";

/// Written last into a run directory; its presence marks the run complete.
#[derive(Debug, Serialize, Deserialize)]
pub struct FinalReport {
    pub epochs: usize,
    pub train_loss: f64,
    pub metrics: MetricsReport,
}

pub fn ingest(
    format: LogFormat,
    input: &Path,
    out: &Path,
    min_interactions: usize,
    max_seq_len: Option<usize>,
) -> anyhow::Result<()> {
    let log = parse_log(format, input)?;
    if !log.malformed.is_empty() {
        eprintln!("skipped {} malformed lines", log.malformed.len());
    }
    let n = max_seq_len.unwrap_or_else(|| default_max_seq_len(format));
    let dataset = build_sequences(&log, min_interactions, n)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    dataset.write_cache(out)?;
    println!("{}", dataset.summary());
    Ok(())
}

fn load_split(path: &Path) -> anyhow::Result<(Dataset, Split)> {
    let dataset =
        Dataset::read_cache(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let split = split_leave_one_out(&dataset)?;
    Ok((dataset, split))
}

fn load_config(path: &Path, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    // Absolute, so the resolved copy stays valid wherever it is read from.
    cfg.data.dataset = fs::canonicalize(&cfg.data.dataset)
        .with_context(|| format!("dataset {}", cfg.data.dataset.display()))?;
    Ok(cfg)
}

/// Trains one configuration into `dir` and returns the final metrics.
fn run_training(
    mut cfg: RunConfig,
    dataset: &Dataset,
    split: &Split,
    dir: &Path,
) -> anyhow::Result<FinalReport> {
    let model = cfg.resolve(dataset)?;
    cfg.out = Some(dir.to_path_buf());
    cfg.grid = None;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let mut recorder = RunRecorder::create(dir, cfg.train.record_wall_time)?;
    let outcome = training::train(&cfg.train, &model, split, Some(&mut recorder))?;
    checkpoint::save(dir.join("model.ckpt"), &model, &outcome.params)?;

    let last = outcome.stats.last().context("no epochs ran")?;
    let metrics = match last.metrics {
        Some(m) => m,
        None => {
            let scorer = ModelScorer {
                params: &outcome.params,
                ttt: &model.ttt,
                max_seq_len: model.max_seq_len,
            };
            evaluate(
                &scorer,
                &split.test,
                split.vocab_size,
                cfg.train.seed,
                cfg.train.execution,
            )?
        }
    };
    let report = FinalReport {
        epochs: outcome.stats.len(),
        train_loss: last.train_loss,
        metrics,
    };
    fs::write(
        dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

fn print_metrics(m: &MetricsReport) {
    println!(
        "NDCG@5={:.4} NDCG@10={:.4} HR@5={:.4} HR@10={:.4} users={}",
        m.ndcg5, m.ndcg10, m.hr5, m.hr10, m.count
    );
}

pub fn train(config: &Path, overrides: &Overrides) -> anyhow::Result<()> {
    let cfg = load_config(config, overrides)?;
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR));
    let (dataset, split) = load_split(&cfg.data.dataset)?;
    let report = run_training(cfg, &dataset, &split, &dir)?;
    print_metrics(&report.metrics);
    println!("run directory: {}", dir.display());
    Ok(())
}

pub fn eval(
    checkpoint_path: &Path,
    dataset: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = config.as_deref().map(RunConfig::load).transpose()?;
    let dataset_path = match (dataset, &cfg) {
        (Some(p), _) => p,
        (None, Some(c)) => c.data.dataset.clone(),
        (None, None) => bail!("eval needs --dataset or --config"),
    };
    let seed = seed
        .or(cfg.as_ref().map(|c| c.train.seed))
        .unwrap_or(TrainConfig::default().seed);
    let execution = cfg.as_ref().map(|c| c.train.execution).unwrap_or_default();

    let (model, params) = checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let (_, split) = load_split(&dataset_path)?;
    if model.vocab_size != split.vocab_size {
        bail!(ttt4rec_core::Error::VocabMismatch {
            checkpoint: model.vocab_size,
            dataset: split.vocab_size,
        });
    }
    let scorer = ModelScorer {
        params: &params,
        ttt: &model.ttt,
        max_seq_len: model.max_seq_len,
    };
    let report = evaluate(&scorer, &split.test, split.vocab_size, seed, execution)?;
    print_metrics(&report);

    let dir = out.unwrap_or_else(|| {
        checkpoint_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write_metrics_csv(dir.join("eval.csv"), &[MetricsRow::from_report(&report)])?;
    Ok(())
}

struct GridRow {
    initializer_range: f64,
    mini_batch_size: usize,
    status: &'static str,
    ndcg5: Option<f64>,
    ndcg10: Option<f64>,
    hr5: Option<f64>,
    hr10: Option<f64>,
}

pub fn cell_dir_name(sigma: f64, b: usize) -> String {
    format!("sigma-{sigma}_b-{b}")
}

pub fn grid(config: &Path, overrides: &Overrides) -> anyhow::Result<()> {
    let base = load_config(config, overrides)?;
    let axes = base.grid.clone().unwrap_or_else(GridAxes::default);
    let cells = axes.cells()?;
    let root = base
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_GRID_DIR));
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let (dataset, split) = load_split(&base.data.dataset)?;

    let mut rows = Vec::with_capacity(cells.len());
    let mut failed = 0;
    for (sigma, b) in cells {
        let dir = root.join(cell_dir_name(sigma, b));
        let report_path = dir.join(REPORT_FILE);
        let result = if report_path.exists() {
            eprintln!("cell sigma={sigma} b={b}: complete, skipping");
            fs::read_to_string(&report_path)
                .map_err(anyhow::Error::from)
                .and_then(|t| Ok(serde_json::from_str::<FinalReport>(&t)?))
        } else {
            eprintln!("cell sigma={sigma} b={b}: training");
            let mut cfg = base.clone();
            cfg.model.ttt.initializer_range = sigma;
            cfg.model.ttt.mini_batch_size = b;
            run_training(cfg, &dataset, &split, &dir)
        };
        let row = match result {
            Ok(r) => GridRow {
                initializer_range: sigma,
                mini_batch_size: b,
                status: "ok",
                ndcg5: Some(r.metrics.ndcg5),
                ndcg10: Some(r.metrics.ndcg10),
                hr5: Some(r.metrics.hr5),
                hr10: Some(r.metrics.hr10),
            },
            Err(e) => {
                failed += 1;
                eprintln!("cell sigma={sigma} b={b} failed: {e:#}");
                if fs::create_dir_all(&dir).is_ok() {
                    let _ = fs::write(dir.join("error.txt"), format!("{e:#}\n"));
                }
                GridRow {
                    initializer_range: sigma,
                    mini_batch_size: b,
                    status: "failed",
                    ndcg5: None,
                    ndcg10: None,
                    hr5: None,
                    hr10: None,
                }
            }
        };
        rows.push(row);
    }

    let csv_path = root.join("grid.csv");
    let mut text = String::from("initializer_range,mini_batch_size,status,ndcg5,ndcg10,hr5,hr10\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.initializer_range,
            r.mini_batch_size,
            r.status,
            opt(r.ndcg5),
            opt(r.ndcg10),
            opt(r.hr5),
            opt(r.hr10)
        ));
    }
    fs::write(&csv_path, text).with_context(|| format!("writing {}", csv_path.display()))?;
    println!("grid results: {}", csv_path.display());
    if failed > 0 {
        bail!("{failed} of {} grid cells failed", rows.len());
    }
    Ok(())
}

//! Outer-loop training: Adam over all model parameters, backpropagating
//! through the unrolled TTT inner loop, with per-epoch evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Trace;
use crate::checkpoint;
use crate::data::{
    pad_sequence, sample_negatives, Split, TrainSequence, TrainTargets, TRAIN_NEGATIVES,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, ModelScorer};
use crate::exec::Execution;
use crate::model::{
    group_instances, init_params, record_group_loss_sum, Instance, ModelConfig, ModelParams,
    SequenceTargets, Target, PARAM_NAMES,
};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::ttt::TttConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Outer (Adam) learning rate.
    pub lr: f64,
    pub epochs: usize,
    /// Instances (positives plus negatives) per optimizer step. Sequences are
    /// never split across batches, so a batch can overshoot by one sequence.
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every_epoch: bool,
    pub adam: AdamConfig,
    /// Clip the global gradient norm to this value.
    pub max_grad_norm: Option<f64>,
    pub precision: Precision,
    pub targets: TrainTargets,
    pub execution: Execution,
    /// Fill the `seconds` column of the metrics CSV. Off by default so that
    /// reruns produce identical files.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 10,
            batch_size: 256,
            seed: 42,
            eval_every_epoch: true,
            adam: AdamConfig::default(),
            max_grad_norm: None,
            precision: Precision::F64,
            targets: TrainTargets::Last,
            execution: Execution::Parallel,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(n) = self.max_grad_norm {
            if n.is_nan() || n <= 0.0 {
                return Err(Error::Config(format!(
                    "max_grad_norm must be positive, got {n}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub seconds: f64,
    pub metrics: Option<MetricsReport>,
}

/// Mean loss and mean gradient over a batch, in [`PARAM_NAMES`] order.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: f64,
    pub count: usize,
    pub grads: Vec<Tensor>,
}

struct GroupGrads {
    loss_sum: f64,
    count: usize,
    ids: Vec<u32>,
    embedding_rows: Tensor,
    dense: Vec<Tensor>,
}

fn group_grads<F: Real>(
    params: &ModelParams,
    group: &SequenceTargets,
    ttt: &TttConfig,
) -> Result<GroupGrads> {
    let mut ids: Vec<u32> = group
        .sequence
        .iter()
        .copied()
        .chain(group.targets.iter().map(|t| t.candidate))
        .filter(|&id| id != 0)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if let Some(&bad) = ids.last().filter(|&&id| id as usize > params.vocab_size()) {
        return Err(Error::ItemOutOfRange {
            id: bad,
            vocab_size: params.vocab_size(),
        });
    }
    let mut trace = Trace::<F>::new();
    let m = params.record_rows(&mut trace, ids.clone(), true);
    let loss = record_group_loss_sum(&mut trace, &m, group, ttt)?;
    let grads = trace.backward(loss)?;
    let dense = [
        m.ttt.theta_k,
        m.ttt.theta_v,
        m.ttt.theta_q,
        m.ttt.w0,
        m.ttt.norm_gain,
        m.w1,
        m.b1,
        m.w2,
        m.b2,
    ]
    .iter()
    .map(|&id| grads.wrt(&trace, id).cast::<f64>())
    .collect();
    Ok(GroupGrads {
        loss_sum: trace.value(loss).item().as_f64(),
        count: group.targets.len(),
        ids,
        embedding_rows: grads.wrt(&trace, m.embedding).cast(),
        dense,
    })
}

/// Loss and gradients for a batch of sequence groups.
///
/// Groups are independent and run on `exec`; their contributions are summed
/// in group order, so the result does not depend on scheduling.
pub fn loss_and_grads(
    params: &ModelParams,
    groups: &[SequenceTargets],
    ttt: &TttConfig,
    precision: Precision,
    exec: Execution,
) -> Result<BatchGradients> {
    let parts = exec.map(groups, |g| match precision {
        Precision::F32 => group_grads::<f32>(params, g, ttt),
        Precision::F64 => group_grads::<f64>(params, g, ttt),
    });
    let mut grads: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut loss_sum = 0.0;
    let mut count = 0;
    for part in parts {
        let part = part?;
        loss_sum += part.loss_sum;
        count += part.count;
        for (r, &id) in part.ids.iter().enumerate() {
            for (d, &x) in grads[0]
                .row_mut(id as usize)
                .iter_mut()
                .zip(part.embedding_rows.row(r))
            {
                *d += x;
            }
        }
        for (acc, g) in grads[1..].iter_mut().zip(&part.dense) {
            acc.add_assign(g);
        }
    }
    if count == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let inv = 1.0 / count as f64;
    for g in &mut grads {
        g.scale_in_place(inv);
    }
    grads[0].row_mut(0).fill(0.0);
    Ok(BatchGradients {
        loss: loss_sum * inv,
        count,
        grads,
    })
}

/// Mean binary cross-entropy of a list of instances, with gradients.
pub fn batch_loss(
    params: &ModelParams,
    instances: &[Instance],
    ttt: &TttConfig,
    precision: Precision,
    exec: Execution,
) -> Result<BatchGradients> {
    if instances.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    loss_and_grads(params, &group_instances(instances), ttt, precision, exec)
}

/// The training group of one sequence for one epoch: the positive(s) chosen by
/// `mode`, each followed by freshly sampled negatives.
pub fn build_train_group(
    seq: &TrainSequence,
    mode: TrainTargets,
    max_seq_len: usize,
    vocab_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Option<SequenceTargets>> {
    let n = seq.items.len();
    if n < 2 {
        return Ok(None);
    }
    let ws = seq.window_start(max_seq_len);
    let history = &seq.items[ws..n - 1];
    let sequence = pad_sequence(history, max_seq_len);
    let pad = max_seq_len - history.len();
    let first = match mode {
        TrainTargets::Last => n - 1,
        TrainTargets::All => ws + 1,
    };
    let mut targets = Vec::with_capacity((n - first) * (1 + TRAIN_NEGATIVES));
    for t in first..n {
        let position = pad + (t - ws) - 1;
        targets.push(Target {
            position,
            candidate: seq.items[t],
            label: 1.0,
        });
        let mut r = rng::stream(&[
            rng::TAG_TRAIN_NEG,
            seed,
            epoch as u64,
            seq.user as u64,
            t as u64,
        ]);
        for neg in sample_negatives(&seq.seen, TRAIN_NEGATIVES, vocab_size, &mut r)? {
            targets.push(Target {
                position,
                candidate: neg,
                label: 0.0,
            });
        }
    }
    Ok(Some(SequenceTargets { sequence, targets }))
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.scale_in_place(s);
        }
    }
}

/// One pass over the training sequences in a seeded order.
pub fn train_epoch(
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    split: &Split,
    model: &ModelConfig,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if split.train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let start = Instant::now();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    order.shuffle(&mut rng::stream(&[
        rng::TAG_SHUFFLE,
        config.seed,
        epoch as u64,
    ]));

    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut batch: Vec<SequenceTargets> = Vec::new();
    let mut batch_instances = 0usize;
    let mut batch_index = 0usize;

    let mut flush = |batch: &mut Vec<SequenceTargets>, params: &mut ModelParams| -> Result<()> {
        let mut bg = loss_and_grads(
            params,
            batch,
            &model.ttt,
            config.precision,
            config.execution,
        )?;
        batch.clear();
        if !bg.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: batch_index,
                loss: bg.loss,
            });
        }
        loss_sum += bg.loss * bg.count as f64;
        count += bg.count;
        if let Some(max) = config.max_grad_norm {
            clip_global_norm(&mut bg.grads, max);
        }
        adam_step(
            &mut params.tensors_mut(),
            &PARAM_NAMES,
            &bg.grads,
            optimizer,
            config.lr,
            &config.adam,
        )?;
        batch_index += 1;
        Ok(())
    };

    for &i in &order {
        let group = build_train_group(
            &split.train[i],
            config.targets,
            model.max_seq_len,
            split.vocab_size,
            config.seed,
            epoch,
        )?;
        let Some(group) = group else { continue };
        batch_instances += group.targets.len();
        batch.push(group);
        if batch_instances >= config.batch_size {
            flush(&mut batch, params)?;
            batch_instances = 0;
        }
    }
    if !batch.is_empty() {
        flush(&mut batch, params)?;
    }
    if count == 0 {
        return Err(Error::Input(
            "no training targets: every training sequence has a single item".into(),
        ));
    }
    Ok(EpochStats {
        epoch,
        train_loss: loss_sum / count as f64,
        seconds: start.elapsed().as_secs_f64(),
        metrics: None,
    })
}

/// One row of the metrics CSV. Training rows fill every column; evaluation-only
/// rows leave `epoch` and `train_loss` empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: Option<usize>,
    pub train_loss: Option<f64>,
    pub ndcg5: Option<f64>,
    pub ndcg10: Option<f64>,
    pub hr5: Option<f64>,
    pub hr10: Option<f64>,
    pub seconds: Option<f64>,
}

impl MetricsRow {
    pub fn from_report(report: &MetricsReport) -> Self {
        MetricsRow {
            ndcg5: Some(report.ndcg5),
            ndcg10: Some(report.ndcg10),
            hr5: Some(report.hr5),
            hr10: Some(report.hr10),
            ..MetricsRow::default()
        }
    }

    pub fn from_epoch(stats: &EpochStats, with_time: bool) -> Self {
        let base = stats
            .metrics
            .as_ref()
            .map(Self::from_report)
            .unwrap_or_default();
        MetricsRow {
            epoch: Some(stats.epoch),
            train_loss: Some(stats.train_loss),
            seconds: with_time.then_some(stats.seconds),
            ..base
        }
    }
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes per-epoch artifacts into a run directory: `metrics.csv`,
/// `metrics.jsonl` and `checkpoints/epoch-NNN.ckpt`.
pub struct RunRecorder {
    dir: PathBuf,
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    with_time: bool,
}

impl RunRecorder {
    pub fn create(dir: impl AsRef<Path>, with_time: bool) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let csv_path = dir.join("metrics.csv");
        let csv_file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let jsonl_path = dir.join("metrics.jsonl");
        let jsonl = File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?;
        Ok(RunRecorder {
            dir,
            csv: csv::Writer::from_writer(csv_file),
            jsonl: BufWriter::new(jsonl),
            with_time,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir
            .join("checkpoints")
            .join(format!("epoch-{epoch:03}.ckpt"))
    }

    pub fn record(
        &mut self,
        stats: &EpochStats,
        model: &ModelConfig,
        params: &ModelParams,
    ) -> Result<()> {
        self.csv
            .serialize(MetricsRow::from_epoch(stats, self.with_time))?;
        self.csv
            .flush()
            .map_err(|e| Error::io(self.dir.join("metrics.csv"), e))?;
        let jsonl_path = self.dir.join("metrics.jsonl");
        serde_json::to_writer(&mut self.jsonl, stats)?;
        writeln!(self.jsonl).map_err(|e| Error::io(&jsonl_path, e))?;
        self.jsonl.flush().map_err(|e| Error::io(&jsonl_path, e))?;
        checkpoint::save(self.checkpoint_path(stats.epoch), model, params)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub stats: Vec<EpochStats>,
}

/// Trains from a fresh initialization drawn from `config.seed`.
pub fn train(
    config: &TrainConfig,
    model: &ModelConfig,
    split: &Split,
    recorder: Option<&mut RunRecorder>,
) -> Result<TrainOutcome> {
    model.validate()?;
    let params = init_params(model, config.seed)?;
    train_from(params, config, model, split, recorder)
}

pub fn train_from(
    mut params: ModelParams,
    config: &TrainConfig,
    model: &ModelConfig,
    split: &Split,
    mut recorder: Option<&mut RunRecorder>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if model.vocab_size != split.vocab_size {
        return Err(Error::VocabMismatch {
            checkpoint: model.vocab_size,
            dataset: split.vocab_size,
        });
    }
    let mut optimizer = OptimizerState::new(params.tensors());
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut s = train_epoch(&mut params, &mut optimizer, split, model, config, epoch)?;
        if config.eval_every_epoch {
            let scorer = ModelScorer {
                params: &params,
                ttt: &model.ttt,
                max_seq_len: model.max_seq_len,
            };
            s.metrics = Some(evaluate(
                &scorer,
                &split.test,
                split.vocab_size,
                config.seed,
                config.execution,
            )?);
        }
        if let Some(rec) = recorder.as_deref_mut() {
            rec.record(&s, model, &params)?;
        }
        stats.push(s);
    }
    Ok(TrainOutcome { params, stats })
}

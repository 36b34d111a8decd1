//! The recommender: shared item embeddings, a TTT-Linear sequence encoder with
//! last-valid-click pooling and RMSNorm, a two-layer MLP target tower, and a
//! dot-product score.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Trace};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::ttt::{self, TttConfig, TttNodes, TttParams};

/// Epsilon inside the RMSNorm square root.
pub const RMS_EPS: f64 = 1e-6;

/// Standard deviation for embeddings and MLP weights.
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of real items; ids run `1..=vocab_size`, 0 is padding.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub ttt: TttConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            embed_dim: 64,
            mlp_hidden: 128,
            max_seq_len: 50,
            ttt: TttConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.ttt.validate()
    }
}

/// One scored example: a candidate item shown after a click sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub user: u32,
    pub candidate: u32,
    /// Fixed-length item sequence, left-padded with 0.
    pub sequence: Vec<u32>,
    /// 1.0 for the observed next item, 0.0 for a sampled negative.
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `(vocab_size + 1) × K`; row 0 is the padding row and stays zero.
    pub embedding: Tensor,
    pub ttt: TttParams,
    /// `K × H`
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    /// `H × K`
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// Names of the parameter tensors, in [`ModelParams::tensors`] order.
pub const PARAM_NAMES: [&str; 10] = [
    "embedding",
    "ttt.theta_k",
    "ttt.theta_v",
    "ttt.theta_q",
    "ttt.w0",
    "ttt.norm_gain",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
];

fn normal_tensor(shape: &[usize], std: f64, keys: &[u64]) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std-dev");
    let mut r = rng::stream(keys);
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| normal.sample(&mut r)).collect(),
    )
}

/// Draws all parameters deterministically from `seed`.
///
/// TTT parameters use `initializer_range`; embeddings and MLP weights use
/// [`DEFAULT_INIT_STD`]; biases start at zero and the norm gain at one.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let (v, k, h) = (config.vocab_size, config.embed_dim, config.mlp_hidden);
    let mut embedding = normal_tensor(&[v + 1, k], DEFAULT_INIT_STD, &[rng::TAG_INIT, seed, 1]);
    embedding.row_mut(0).fill(0.0);
    Ok(ModelParams {
        embedding,
        ttt: TttParams::init(k, config.ttt.initializer_range, seed),
        mlp_w1: normal_tensor(&[k, h], DEFAULT_INIT_STD, &[rng::TAG_INIT, seed, 2]),
        mlp_b1: Tensor::zeros(&[h]),
        mlp_w2: normal_tensor(&[h, k], DEFAULT_INIT_STD, &[rng::TAG_INIT, seed, 3]),
        mlp_b2: Tensor::zeros(&[k]),
    })
}

impl ModelParams {
    pub fn vocab_size(&self) -> usize {
        self.embedding.rows() - 1
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_w1.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.embedding,
            &self.ttt.theta_k,
            &self.ttt.theta_v,
            &self.ttt.theta_q,
            &self.ttt.w0,
            &self.ttt.norm_gain,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.embedding,
            &mut self.ttt.theta_k,
            &mut self.ttt.theta_v,
            &mut self.ttt.theta_q,
            &mut self.ttt.w0,
            &mut self.ttt.norm_gain,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    /// Rebuilds parameters from tensors in [`PARAM_NAMES`] order, checking shapes.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let [embedding, theta_k, theta_v, theta_q, w0, norm_gain, mlp_w1, mlp_b1, mlp_w2, mlp_b2]: [Tensor; 10] =
            tensors
                .try_into()
                .map_err(|v: Vec<Tensor>| Error::Input(format!("expected 10 tensors, got {}", v.len())))?;
        let params = ModelParams {
            embedding,
            ttt: TttParams {
                theta_k,
                theta_v,
                theta_q,
                w0,
                norm_gain,
            },
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding.rank() != 2 || self.embedding.rows() < 2 {
            return Err(Error::Input(format!(
                "embedding table has shape {:?}",
                self.embedding.shape()
            )));
        }
        let k = self.embed_dim();
        let h = self.mlp_w1.shape().get(1).copied().unwrap_or(0);
        let expect = [vec![k, h], vec![h], vec![h, k], vec![k]];
        for ((name, t), want) in ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"]
            .iter()
            .zip([&self.mlp_w1, &self.mlp_b1, &self.mlp_w2, &self.mlp_b2])
            .zip(expect)
        {
            if t.shape() != want.as_slice() {
                return Err(Error::Input(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        self.ttt.validate()?;
        if self.ttt.dim() != k {
            return Err(Error::Input(format!(
                "ttt dim {} differs from embedding dim {k}",
                self.ttt.dim()
            )));
        }
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            t.ensure_finite(name)?;
        }
        Ok(())
    }

    fn check_item(&self, id: u32) -> Result<()> {
        if id as usize > self.vocab_size() {
            Err(Error::ItemOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })
        } else {
            Ok(())
        }
    }

    /// Records every parameter, including the full embedding table.
    pub fn record<F: Real>(&self, trace: &mut Trace<F>, as_leaves: bool) -> ModelNodes {
        let table = put(trace, &self.embedding, as_leaves);
        self.record_with_table(trace, table, RowIndex::Full, as_leaves)
    }

    /// Records only the embedding rows for `ids` (sorted, unique, nonzero).
    pub fn record_rows<F: Real>(
        &self,
        trace: &mut Trace<F>,
        ids: Vec<u32>,
        as_leaves: bool,
    ) -> ModelNodes {
        let k = self.embed_dim();
        let mut data = Vec::with_capacity(ids.len() * k);
        for &id in &ids {
            data.extend(self.embedding.row(id as usize).iter().map(|&v| F::lit(v)));
        }
        let rows = Tensor::from_parts(vec![ids.len(), k], data);
        let table = if as_leaves {
            trace.leaf(rows)
        } else {
            trace.constant(rows)
        };
        self.record_with_table(trace, table, RowIndex::Subset(ids), as_leaves)
    }

    fn record_with_table<F: Real>(
        &self,
        trace: &mut Trace<F>,
        table: NodeId,
        rows: RowIndex,
        as_leaves: bool,
    ) -> ModelNodes {
        let ttt = self.ttt.record(trace, as_leaves);
        ModelNodes {
            embedding: table,
            rows,
            ttt,
            w1: put(trace, &self.mlp_w1, as_leaves),
            b1: put(trace, &self.mlp_b1, as_leaves),
            w2: put(trace, &self.mlp_w2, as_leaves),
            b2: put(trace, &self.mlp_b2, as_leaves),
        }
    }
}

fn put<F: Real>(trace: &mut Trace<F>, t: &Tensor, as_leaf: bool) -> NodeId {
    if as_leaf {
        trace.leaf(t.cast())
    } else {
        trace.constant(t.cast())
    }
}

/// How item ids map onto rows of the recorded embedding node.
#[derive(Clone, Debug)]
pub enum RowIndex {
    Full,
    /// Sorted ids; row `i` holds item `ids[i]`.
    Subset(Vec<u32>),
}

impl RowIndex {
    fn row(&self, id: u32) -> Result<usize> {
        match self {
            RowIndex::Full => Ok(id as usize),
            RowIndex::Subset(ids) => ids
                .binary_search(&id)
                .map_err(|_| Error::Input(format!("item {id} was not recorded on the trace"))),
        }
    }
}

/// Trace handles for all model parameters.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub embedding: NodeId,
    pub rows: RowIndex,
    pub ttt: TttNodes,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// A click sequence with any number of scored candidates attached to its
/// prefixes. The sequence forward pass is shared by all of them.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTargets {
    /// Item ids, 0 for padding.
    pub sequence: Vec<u32>,
    pub targets: Vec<Target>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    /// Index into the sequence of the last history item visible to this target.
    pub position: usize,
    pub candidate: u32,
    pub label: f64,
}

/// `F_t = W2ᵀ·gelu(W1ᵀ e + b1) + b2` for each row of `emb (C×K)`.
fn record_target_tower<F: Real>(
    trace: &mut Trace<F>,
    m: &ModelNodes,
    emb: NodeId,
) -> Result<NodeId> {
    let h = trace.matmul(emb, m.w1)?;
    let h = trace.add_row_bias(h, m.b1)?;
    let h = trace.gelu(h)?;
    let out = trace.matmul(h, m.w2)?;
    trace.add_row_bias(out, m.b2)
}

/// Pooled, normalized sequence features at each requested position.
///
/// Returns `(features (P×K), row of features per requested position)`.
fn record_sequence_features<F: Real>(
    trace: &mut Trace<F>,
    m: &ModelNodes,
    sequence: &[u32],
    positions: &[usize],
    config: &TttConfig,
) -> Result<(NodeId, Vec<usize>)> {
    let valid: Vec<usize> = (0..sequence.len()).filter(|&t| sequence[t] != 0).collect();
    if valid.is_empty() {
        return Err(Error::Input("sequence has no valid clicks".into()));
    }
    let rows = valid
        .iter()
        .map(|&t| m.rows.row(sequence[t]))
        .collect::<Result<Vec<_>>>()?;
    let tokens = trace.gather_rows(m.embedding, &rows)?;
    let zs = ttt::record_forward(trace, &m.ttt, tokens, &vec![true; valid.len()], config)?;

    // Last valid click at or before each position.
    let mut pooled: Vec<usize> = Vec::new();
    let mut which = Vec::with_capacity(positions.len());
    for &p in positions {
        let j = valid.partition_point(|&t| t <= p);
        if j == 0 {
            return Err(Error::Input(format!(
                "no valid click at or before position {p}"
            )));
        }
        let idx = match pooled.iter().position(|&q| q == j - 1) {
            Some(i) => i,
            None => {
                pooled.push(j - 1);
                pooled.len() - 1
            }
        };
        which.push(idx);
    }
    let picked: Vec<NodeId> = pooled.iter().map(|&j| zs[j]).collect();
    let stacked = trace.stack(&picked)?;
    let features = trace.rms_norm(stacked, m.ttt.norm_gain, F::lit(RMS_EPS))?;
    Ok((features, which))
}

/// Logits `R = F_s · F_t` for every target of a group, in target order.
pub fn record_group_logits<F: Real>(
    trace: &mut Trace<F>,
    m: &ModelNodes,
    group: &SequenceTargets,
    config: &TttConfig,
) -> Result<NodeId> {
    if group.targets.is_empty() {
        return Err(Error::Input("group has no targets".into()));
    }
    let positions: Vec<usize> = group.targets.iter().map(|t| t.position).collect();
    let (features, which) =
        record_sequence_features(trace, m, &group.sequence, &positions, config)?;
    let cand_rows = group
        .targets
        .iter()
        .map(|t| {
            if t.candidate == 0 {
                Err(Error::Input("candidate 0 is the padding item".into()))
            } else {
                m.rows.row(t.candidate)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let cand = trace.gather_rows(m.embedding, &cand_rows)?;
    let ft = record_target_tower(trace, m, cand)?;
    let fs = trace.gather_rows(features, &which)?;
    let prod = trace.mul(fs, ft)?;
    let k = trace.value(prod).cols();
    let ones = trace.constant(Tensor::filled(&[k], F::one()));
    trace.matmul(prod, ones)
}

/// Summed binary cross-entropy of a group's logits against its labels.
pub fn record_group_loss_sum<F: Real>(
    trace: &mut Trace<F>,
    m: &ModelNodes,
    group: &SequenceTargets,
    config: &TttConfig,
) -> Result<NodeId> {
    let labels = group
        .targets
        .iter()
        .map(|t| {
            if t.label == 0.0 || t.label == 1.0 {
                Ok(F::lit(t.label))
            } else {
                Err(Error::Input(format!("label {} is not 0 or 1", t.label)))
            }
        })
        .collect::<Result<Vec<F>>>()?;
    let logits = record_group_logits(trace, m, group, config)?;
    trace.bce_with_logits_sum(logits, &labels)
}

/// Mean BCE over all targets of all groups, recorded on a single trace.
pub fn record_batch_loss<F: Real>(
    trace: &mut Trace<F>,
    m: &ModelNodes,
    groups: &[SequenceTargets],
    config: &TttConfig,
) -> Result<NodeId> {
    let count: usize = groups.iter().map(|g| g.targets.len()).sum();
    if count == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for g in groups {
        let s = record_group_loss_sum(trace, m, g, config)?;
        total = Some(match total {
            Some(t) => trace.add(t, s)?,
            None => s,
        });
    }
    trace.scale(total.unwrap(), F::lit(1.0 / count as f64))
}

/// Groups instances that share a user and sequence, keeping first-seen order.
pub fn group_instances(instances: &[Instance]) -> Vec<SequenceTargets> {
    let mut keys: Vec<(u32, &[u32])> = Vec::new();
    let mut groups: Vec<SequenceTargets> = Vec::new();
    for inst in instances {
        let key = (inst.user, inst.sequence.as_slice());
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                groups.push(SequenceTargets {
                    sequence: inst.sequence.clone(),
                    targets: Vec::new(),
                });
                groups.len() - 1
            }
        };
        groups[idx].targets.push(Target {
            position: inst.sequence.len().saturating_sub(1),
            candidate: inst.candidate,
            label: inst.label,
        });
    }
    groups
}

/// Looks up the embedding rows of a sequence.
///
/// Returns a `T×K` matrix (padding rows are zero) and the validity mask.
pub fn embed_sequence(params: &ModelParams, sequence: &[u32]) -> Result<(Tensor, Vec<bool>)> {
    if sequence.is_empty() {
        return Err(Error::Input("empty sequence".into()));
    }
    let k = params.embed_dim();
    let mut data = Vec::with_capacity(sequence.len() * k);
    for &id in sequence {
        params.check_item(id)?;
        if id == 0 {
            data.extend(std::iter::repeat_n(0.0, k));
        } else {
            data.extend_from_slice(params.embedding.row(id as usize));
        }
    }
    let mask = sequence.iter().map(|&id| id != 0).collect();
    Ok((Tensor::from_parts(vec![sequence.len(), k], data), mask))
}

/// `F_s`: TTT outputs at the last valid position, RMS-normalized with the layer gain.
pub fn extract_sequence_features(
    params: &ModelParams,
    embedded: &Tensor,
    valid_mask: &[bool],
    config: &TttConfig,
) -> Result<Tensor> {
    let mut trace = Trace::new();
    let p = params.ttt.record(&mut trace, false);
    let tokens = trace.constant(embedded.clone());
    let zs = ttt::record_forward(&mut trace, &p, tokens, valid_mask, config)?;
    let last = valid_mask
        .iter()
        .rposition(|&v| v)
        .ok_or_else(|| Error::Input("sequence has no valid clicks".into()))?;
    let f = trace.rms_norm(zs[last], p.norm_gain, RMS_EPS)?;
    Ok(trace.value(f).clone())
}

/// `F_t` for one candidate item.
pub fn target_tower(params: &ModelParams, candidate: u32) -> Result<Tensor> {
    if candidate == 0 {
        return Err(Error::Input("candidate 0 is the padding item".into()));
    }
    params.check_item(candidate)?;
    let mut trace = Trace::new();
    let m = params.record(&mut trace, false);
    let e = trace.gather_rows(m.embedding, &[candidate as usize])?;
    let ft = record_target_tower(&mut trace, &m, e)?;
    let v = trace.value(ft).clone();
    v.reshaped(vec![params.embed_dim()])
}

/// `R = F_s · F_t`.
pub fn score(fs: &Tensor, ft: &Tensor) -> Result<f64> {
    if fs.shape() != ft.shape() {
        return Err(Error::Shape {
            op: "score",
            lhs: fs.shape().to_vec(),
            rhs: ft.shape().to_vec(),
        });
    }
    Ok(fs.data().iter().zip(ft.data()).map(|(a, b)| a * b).sum())
}

/// Click probability `sigmoid(R)`, stable for large `|R|`.
pub fn predict_proba(r: f64) -> f64 {
    if r >= 0.0 {
        1.0 / (1.0 + (-r).exp())
    } else {
        let e = r.exp();
        e / (1.0 + e)
    }
}

/// Scores every candidate against one history in a single pass.
pub fn score_candidates(
    params: &ModelParams,
    history: &[u32],
    candidates: &[u32],
    config: &TttConfig,
) -> Result<Vec<f64>> {
    for &id in history.iter().chain(candidates) {
        params.check_item(id)?;
    }
    let mut ids: Vec<u32> = history
        .iter()
        .chain(candidates)
        .copied()
        .filter(|&id| id != 0)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let mut trace = Trace::<f64>::new();
    let m = params.record_rows(&mut trace, ids, false);
    let last = history.len().saturating_sub(1);
    let group = SequenceTargets {
        sequence: history.to_vec(),
        targets: candidates
            .iter()
            .map(|&c| Target {
                position: last,
                candidate: c,
                label: 0.0,
            })
            .collect(),
    };
    let logits = record_group_logits(&mut trace, &m, &group, config)?;
    Ok(trace.value(logits).data().to_vec())
}

//! TTT-Linear sequence layer.
//!
//! The hidden state is the weight matrix `W` of a linear model. For every
//! token the layer takes one gradient step on the reconstruction loss
//! `ℓ(W; x) = ‖W θ_K x − θ_V x‖²` and then reads out `z = W θ_Q x` with the
//! freshly updated weights.
//!
//! Everything is recorded on a [`Trace`], including the inner gradient
//! `2 (W x_K − x_V) x_Kᵀ`, so outer training differentiates through the
//! unrolled inner loop (second-order terms included).

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Trace};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TttConfig {
    /// Inner-loop learning rate η.
    pub inner_lr: f64,
    /// Tokens per inner gradient-descent batch; 1 is plain online GD.
    pub mini_batch_size: usize,
    /// Standard deviation for initializing the layer's parameters.
    pub initializer_range: f64,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            inner_lr: 1.0,
            mini_batch_size: 1,
            initializer_range: 0.02,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config(format!(
                "inner_lr must be positive, got {}",
                self.inner_lr
            )));
        }
        if self.mini_batch_size == 0 {
            return Err(Error::Config("mini_batch_size must be at least 1".into()));
        }
        if !(self.initializer_range > 0.0 && self.initializer_range.is_finite()) {
            return Err(Error::Config(format!(
                "initializer_range must be positive, got {}",
                self.initializer_range
            )));
        }
        Ok(())
    }
}

/// Learnable (outer-loop) parameters of the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TttParams {
    /// Training view projection.
    pub theta_k: Tensor,
    /// Label view projection.
    pub theta_v: Tensor,
    /// Test view projection.
    pub theta_q: Tensor,
    /// Initial hidden state.
    pub w0: Tensor,
    /// Gain of the RMSNorm applied to the pooled output.
    pub norm_gain: Tensor,
}

impl TttParams {
    /// θ_K = θ_V = θ_Q = W0 = I, unit gain.
    pub fn identity(dim: usize) -> Self {
        TttParams {
            theta_k: Tensor::identity(dim),
            theta_v: Tensor::identity(dim),
            theta_q: Tensor::identity(dim),
            w0: Tensor::identity(dim),
            norm_gain: Tensor::filled(&[dim], 1.0),
        }
    }

    /// All matrices drawn from `normal(0, initializer_range)`; gain set to one.
    pub fn init(dim: usize, initializer_range: f64, seed: u64) -> Self {
        let normal = Normal::new(0.0, initializer_range).expect("valid std-dev");
        let draw = |tag: u64| {
            let mut r = rng::stream(&[rng::TAG_INIT, seed, 100 + tag]);
            let data = (0..dim * dim).map(|_| normal.sample(&mut r)).collect();
            Tensor::from_parts(vec![dim, dim], data)
        };
        TttParams {
            theta_k: draw(0),
            theta_v: draw(1),
            theta_q: draw(2),
            w0: draw(3),
            norm_gain: Tensor::filled(&[dim], 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, m) in [
            ("theta_k", &self.theta_k),
            ("theta_v", &self.theta_v),
            ("theta_q", &self.theta_q),
            ("w0", &self.w0),
        ] {
            if m.shape() != [d, d] {
                return Err(Error::Shape {
                    op: "ttt params",
                    lhs: vec![d, d],
                    rhs: m.shape().to_vec(),
                });
            }
            m.ensure_finite(name)?;
        }
        if self.norm_gain.shape() != [d] {
            return Err(Error::Shape {
                op: "ttt params",
                lhs: vec![d],
                rhs: self.norm_gain.shape().to_vec(),
            });
        }
        self.norm_gain.ensure_finite("norm_gain")
    }

    /// Records the parameters on `trace`, as leaves or as constants.
    pub fn record<F: Real>(&self, trace: &mut Trace<F>, as_leaves: bool) -> TttNodes {
        let mut put = |t: &Tensor| {
            if as_leaves {
                trace.leaf(t.cast())
            } else {
                trace.constant(t.cast())
            }
        };
        TttNodes {
            theta_k: put(&self.theta_k),
            theta_v: put(&self.theta_v),
            theta_q: put(&self.theta_q),
            w0: put(&self.w0),
            norm_gain: put(&self.norm_gain),
        }
    }
}

/// Trace handles of [`TttParams`].
#[derive(Clone, Copy, Debug)]
pub struct TttNodes {
    pub theta_k: NodeId,
    pub theta_v: NodeId,
    pub theta_q: NodeId,
    pub w0: NodeId,
    pub norm_gain: NodeId,
}

/// Training, label and test views of a set of tokens (one row per token).
#[derive(Clone, Copy, Debug)]
pub struct Views {
    pub key: NodeId,
    pub value: NodeId,
    pub query: NodeId,
}

/// Projects every row of `tokens (n×K)` through θ_K, θ_V and θ_Q.
pub fn project<F: Real>(trace: &mut Trace<F>, p: &TttNodes, tokens: NodeId) -> Result<Views> {
    let mut view = |theta: NodeId| -> Result<NodeId> {
        let t = trace.transpose(theta)?;
        trace.matmul(tokens, t)
    };
    Ok(Views {
        key: view(p.theta_k)?,
        value: view(p.theta_v)?,
        query: view(p.theta_q)?,
    })
}

/// `ℓ(W; x) = ‖W x_K − x_V‖²` from pre-projected views.
pub fn record_inner_loss<F: Real>(
    trace: &mut Trace<F>,
    w: NodeId,
    x_k: NodeId,
    x_v: NodeId,
) -> Result<NodeId> {
    let pred = trace.matmul(w, x_k)?;
    let r = trace.sub(pred, x_v)?;
    trace.squared_norm(r)
}

/// `∇_W ℓ = 2 (W x_K − x_V) x_Kᵀ`, recorded as ordinary primitives.
pub fn record_inner_grad<F: Real>(
    trace: &mut Trace<F>,
    w: NodeId,
    x_k: NodeId,
    x_v: NodeId,
) -> Result<NodeId> {
    let pred = trace.matmul(w, x_k)?;
    let r = trace.sub(pred, x_v)?;
    let g = trace.outer(r, x_k)?;
    trace.scale(g, F::lit(2.0))
}

/// `W − η ∇_W ℓ(W; x)`.
pub fn record_inner_step<F: Real>(
    trace: &mut Trace<F>,
    w: NodeId,
    x_k: NodeId,
    x_v: NodeId,
    eta: f64,
) -> Result<NodeId> {
    let g = record_inner_grad(trace, w, x_k, x_v)?;
    let step = trace.scale(g, F::lit(eta))?;
    trace.sub(w, step)
}

/// `z = W x_Q`.
pub fn record_output<F: Real>(trace: &mut Trace<F>, w: NodeId, x_q: NodeId) -> Result<NodeId> {
    trace.matmul(w, x_q)
}

struct Prepared {
    views: Views,
    /// Sequence positions of the valid tokens; row j of each view is `valid[j]`.
    valid: Vec<usize>,
}

fn prepare<F: Real>(
    trace: &mut Trace<F>,
    p: &TttNodes,
    tokens: NodeId,
    valid_mask: &[bool],
) -> Result<Prepared> {
    let shape = trace.value(tokens).shape().to_vec();
    if shape.len() != 2 || shape[0] != valid_mask.len() {
        return Err(Error::Shape {
            op: "ttt forward",
            lhs: shape,
            rhs: vec![valid_mask.len()],
        });
    }
    let valid: Vec<usize> = (0..valid_mask.len()).filter(|&t| valid_mask[t]).collect();
    if valid.is_empty() {
        return Err(Error::Input("sequence has no valid tokens".into()));
    }
    // Padding never reaches the inner loop, so it costs nothing.
    let rows = if valid.len() == valid_mask.len() {
        tokens
    } else {
        trace.gather_rows(tokens, &valid)?
    };
    let views = project(trace, p, rows)?;
    Ok(Prepared { views, valid })
}

/// Spreads per-valid-token outputs back over all positions: padding repeats
/// the previous output, leading padding emits zeros.
fn scatter_outputs<F: Real>(
    trace: &mut Trace<F>,
    len: usize,
    valid: &[usize],
    zs: Vec<NodeId>,
    dim: usize,
) -> Vec<NodeId> {
    let mut out = Vec::with_capacity(len);
    let mut next = valid.iter().zip(zs).peekable();
    let mut last: Option<NodeId> = None;
    for t in 0..len {
        if let Some((_, z)) = next.next_if(|(&pos, _)| pos == t) {
            last = Some(z);
        }
        let z = match last {
            Some(z) => z,
            None => {
                let zero = trace.constant(Tensor::zeros(&[dim]));
                last = Some(zero);
                zero
            }
        };
        out.push(z);
    }
    out
}

/// Online schedule: for every valid token, `W_t = W_{t-1} − η∇ℓ(W_{t-1}; x_t)`
/// then `z_t = W_t θ_Q x_t`. Masked tokens keep `W` and repeat the previous output.
///
/// `tokens` is a `T×K` matrix node. Returns one output node per position.
pub fn record_forward_online<F: Real>(
    trace: &mut Trace<F>,
    p: &TttNodes,
    tokens: NodeId,
    valid_mask: &[bool],
    eta: f64,
) -> Result<Vec<NodeId>> {
    let prep = prepare(trace, p, tokens, valid_mask)?;
    let dim = trace.value(p.w0).rows();
    let mut w = p.w0;
    let mut zs = Vec::with_capacity(prep.valid.len());
    for j in 0..prep.valid.len() {
        let x_k = trace.row(prep.views.key, j)?;
        let x_v = trace.row(prep.views.value, j)?;
        let x_q = trace.row(prep.views.query, j)?;
        w = record_inner_step(trace, w, x_k, x_v, eta)?;
        zs.push(record_output(trace, w, x_q)?);
    }
    Ok(scatter_outputs(
        trace,
        valid_mask.len(),
        &prep.valid,
        zs,
        dim,
    ))
}

/// Mini-batch schedule: valid tokens are grouped into consecutive batches of
/// `batch` tokens. Inside a batch every gradient is taken at the batch-entry
/// weights `W_e`, and token `s` reads out with
/// `W_s = W_e − η Σ_{r ≤ s in batch} ∇ℓ(W_e; x_r)`.
pub fn record_forward_minibatch<F: Real>(
    trace: &mut Trace<F>,
    p: &TttNodes,
    tokens: NodeId,
    valid_mask: &[bool],
    eta: f64,
    batch: usize,
) -> Result<Vec<NodeId>> {
    if batch == 0 {
        return Err(Error::Config("mini_batch_size must be at least 1".into()));
    }
    let prep = prepare(trace, p, tokens, valid_mask)?;
    let dim = trace.value(p.w0).rows();
    let n = prep.valid.len();
    let mut w_entry = p.w0;
    let mut zs = Vec::with_capacity(n);
    for start in (0..n).step_by(batch) {
        let end = (start + batch).min(n);
        let mut acc: Option<NodeId> = None;
        let mut w_s = w_entry;
        for j in start..end {
            let x_k = trace.row(prep.views.key, j)?;
            let x_v = trace.row(prep.views.value, j)?;
            let x_q = trace.row(prep.views.query, j)?;
            let g = record_inner_grad(trace, w_entry, x_k, x_v)?;
            let total = match acc {
                Some(a) => trace.add(a, g)?,
                None => g,
            };
            acc = Some(total);
            let step = trace.scale(total, F::lit(eta))?;
            w_s = trace.sub(w_entry, step)?;
            zs.push(record_output(trace, w_s, x_q)?);
        }
        w_entry = w_s;
    }
    Ok(scatter_outputs(
        trace,
        valid_mask.len(),
        &prep.valid,
        zs,
        dim,
    ))
}

/// Picks the schedule for `mini_batch_size`: 1 is the online loop.
pub fn record_forward<F: Real>(
    trace: &mut Trace<F>,
    p: &TttNodes,
    tokens: NodeId,
    valid_mask: &[bool],
    config: &TttConfig,
) -> Result<Vec<NodeId>> {
    if config.mini_batch_size == 1 {
        record_forward_online(trace, p, tokens, valid_mask, config.inner_lr)
    } else {
        record_forward_minibatch(
            trace,
            p,
            tokens,
            valid_mask,
            config.inner_lr,
            config.mini_batch_size,
        )
    }
}

// Plain (non-differentiable) entry points, evaluated in 64-bit.

fn single_views(
    trace: &mut Trace<f64>,
    params: &TttParams,
    x: &Tensor,
) -> Result<(NodeId, NodeId, NodeId)> {
    x.ensure_finite("token")?;
    let d = params.dim();
    if x.shape() != [d] {
        return Err(Error::Shape {
            op: "ttt token",
            lhs: vec![d],
            rhs: x.shape().to_vec(),
        });
    }
    let p = params.record(trace, false);
    let xn = trace.constant(x.clone());
    let x_k = trace.matmul(p.theta_k, xn)?;
    let x_v = trace.matmul(p.theta_v, xn)?;
    let x_q = trace.matmul(p.theta_q, xn)?;
    Ok((x_k, x_v, x_q))
}

/// `ℓ(W; x) = ‖W (θ_K x) − θ_V x‖²`.
pub fn inner_loss(w: &Tensor, x: &Tensor, params: &TttParams) -> Result<f64> {
    w.ensure_finite("W")?;
    let mut trace = Trace::new();
    let (x_k, x_v, _) = single_views(&mut trace, params, x)?;
    let wn = trace.constant(w.clone());
    let l = record_inner_loss(&mut trace, wn, x_k, x_v)?;
    Ok(trace.value(l).item())
}

/// One inner gradient-descent step. Fails if the result is not finite,
/// which signals that η is too large.
pub fn inner_step(w: &Tensor, x: &Tensor, params: &TttParams, eta: f64) -> Result<Tensor> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::Config(format!(
            "inner learning rate must be positive, got {eta}"
        )));
    }
    w.ensure_finite("W")?;
    let mut trace = Trace::new();
    let (x_k, x_v, _) = single_views(&mut trace, params, x)?;
    let wn = trace.constant(w.clone());
    let next = record_inner_step(&mut trace, wn, x_k, x_v, eta)?;
    let out = trace.value(next).clone();
    out.ensure_finite("inner step (learning rate too large?)")?;
    Ok(out)
}

/// `z = W (θ_Q x)`.
pub fn output_token(w: &Tensor, x: &Tensor, params: &TttParams) -> Result<Tensor> {
    w.ensure_finite("W")?;
    let mut trace = Trace::new();
    let (_, _, x_q) = single_views(&mut trace, params, x)?;
    let wn = trace.constant(w.clone());
    let z = record_output(&mut trace, wn, x_q)?;
    let out = trace.value(z).clone();
    out.ensure_finite("output")?;
    Ok(out)
}

fn run_plain(
    params: &TttParams,
    tokens: &[Tensor],
    valid_mask: &[bool],
    record: impl FnOnce(&mut Trace<f64>, &TttNodes, NodeId) -> Result<Vec<NodeId>>,
) -> Result<Vec<Tensor>> {
    if tokens.is_empty() {
        return Err(Error::Input("empty sequence".into()));
    }
    if tokens.len() != valid_mask.len() {
        return Err(Error::Input(format!(
            "{} tokens but {} mask entries",
            tokens.len(),
            valid_mask.len()
        )));
    }
    let mut trace = Trace::new();
    let p = params.record(&mut trace, false);
    let rows: Vec<NodeId> = tokens.iter().map(|t| trace.constant(t.clone())).collect();
    let m = trace.stack(&rows)?;
    let zs = record(&mut trace, &p, m)?;
    zs.into_iter()
        .map(|z| {
            let v = trace.value(z).clone();
            v.ensure_finite("ttt output")?;
            Ok(v)
        })
        .collect()
}

/// Online forward pass over a token sequence.
pub fn forward_sequence(
    params: &TttParams,
    tokens: &[Tensor],
    valid_mask: &[bool],
    eta: f64,
) -> Result<Vec<Tensor>> {
    run_plain(params, tokens, valid_mask, |t, p, m| {
        record_forward_online(t, p, m, valid_mask, eta)
    })
}

/// Mini-batch forward pass over a token sequence.
pub fn forward_sequence_minibatch(
    params: &TttParams,
    tokens: &[Tensor],
    valid_mask: &[bool],
    eta: f64,
    batch: usize,
) -> Result<Vec<Tensor>> {
    run_plain(params, tokens, valid_mask, |t, p, m| {
        record_forward_minibatch(t, p, m, valid_mask, eta, batch)
    })
}

/// Streaming form of the online schedule: the hidden state after `step` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TttState {
    pub w: Tensor,
    pub step: usize,
}

impl TttState {
    pub fn new(params: &TttParams) -> Self {
        TttState {
            w: params.w0.clone(),
            step: 0,
        }
    }

    /// Consumes one token: updates `W` and returns its output.
    pub fn advance(&mut self, params: &TttParams, x: &Tensor, eta: f64) -> Result<Tensor> {
        self.w = inner_step(&self.w, x, params, eta)?;
        self.step += 1;
        output_token(&self.w, x, params)
    }
}

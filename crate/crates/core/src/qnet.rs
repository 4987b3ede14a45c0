//! Multi-head action-value network.
//!
//! A dense rectifier encoder over the flattened `H x S x S` frame stack feeds
//! one linear head per agent. Forward and backward passes are written out by
//! hand so gradients can be checked against finite differences.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{NUM_ACTIONS, NUM_AGENTS};
use crate::rng::SplitMix64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QNetConfig {
    pub history: usize,
    pub input_size: usize,
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub actions: usize,
}

impl Default for QNetConfig {
    fn default() -> Self {
        Self {
            history: 10,
            input_size: 32,
            hidden: vec![512, 256],
            heads: NUM_AGENTS,
            actions: NUM_ACTIONS,
        }
    }
}

impl QNetConfig {
    pub fn input_dim(&self) -> usize {
        self.history * self.input_size * self.input_size
    }

    fn validate(&self) -> Result<()> {
        if self.history == 0 || self.input_size == 0 || self.heads == 0 || self.actions == 0 {
            return Err(Error::param("qnet", "all sizes must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::param("hidden", "need at least one non-empty hidden layer"));
        }
        Ok(())
    }
}

/// Offsets of one dense layer's weight (`rows x cols`, row-major) and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DenseSlot {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    encoder: Vec<DenseSlot>,
    heads: Vec<DenseSlot>,
    len: usize,
}

impl Layout {
    /// Fails on arithmetic overflow so untrusted configs cannot wrap.
    fn new(cfg: &QNetConfig) -> Result<Self> {
        let overflow = || Error::Shape("parameter count overflows".into());
        let mut len = 0usize;
        let mut slot = |rows: usize, cols: usize| -> Result<DenseSlot> {
            let w = len;
            let b = w.checked_add(rows.checked_mul(cols).ok_or_else(overflow)?).ok_or_else(overflow)?;
            len = b.checked_add(rows).ok_or_else(overflow)?;
            Ok(DenseSlot { w, b, rows, cols })
        };
        let input = cfg
            .history
            .checked_mul(cfg.input_size)
            .and_then(|n| n.checked_mul(cfg.input_size))
            .ok_or_else(overflow)?;
        let mut encoder = Vec::new();
        let mut fan_in = input;
        for &h in &cfg.hidden {
            encoder.push(slot(h, fan_in)?);
            fan_in = h;
        }
        let heads = (0..cfg.heads)
            .map(|_| slot(cfg.actions, fan_in))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { encoder, heads, len })
    }

    /// Tensor shapes in declaration order: per layer weight then bias.
    fn tensor_shapes(&self) -> Vec<(usize, Vec<usize>)> {
        self.encoder
            .iter()
            .chain(&self.heads)
            .flat_map(|s| [(s.w, vec![s.rows, s.cols]), (s.b, vec![s.rows])])
            .collect()
    }
}

/// Network parameters (or a gradient of the same shape) as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QParams {
    cfg: QNetConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl QParams {
    pub fn zeros(cfg: QNetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg)?;
        Ok(Self {
            data: vec![0.0; layout.len],
            layout,
            cfg,
        })
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))` per weight; zero biases.
    pub fn init(cfg: QNetConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = SplitMix64::new(seed);
        let slots: Vec<DenseSlot> = p.layout.encoder.iter().chain(&p.layout.heads).copied().collect();
        for s in slots {
            let bound = (6.0 / (s.rows + s.cols) as f64).sqrt();
            for w in &mut p.data[s.w..s.w + s.rows * s.cols] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &QNetConfig {
        &self.cfg
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    /// Named tensors in declaration order as `(name, shape, values)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let names = (0..self.layout.encoder.len())
            .map(|i| format!("encoder.{i}"))
            .chain((0..self.layout.heads.len()).map(|k| format!("head.{k}")));
        let mut out = Vec::new();
        for (name, s) in names.zip(self.layout.encoder.iter().chain(&self.layout.heads)) {
            out.push((format!("{name}.weight"), vec![s.rows, s.cols], &self.data[s.w..s.b]));
            out.push((format!("{name}.bias"), vec![s.rows], &self.data[s.b..s.b + s.rows]));
        }
        out
    }

    fn same_shape(&self, other: &QParams) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.cfg, other.cfg)));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Action values for a batch: `q[b][head][action]` stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct QOutput {
    pub batch: usize,
    pub heads: usize,
    pub actions: usize,
    pub data: Vec<f64>,
}

impl QOutput {
    #[inline]
    pub fn get(&self, b: usize, head: usize, action: usize) -> f64 {
        self.data[(b * self.heads + head) * self.actions + action]
    }

    pub fn head(&self, b: usize, head: usize) -> &[f64] {
        let start = (b * self.heads + head) * self.actions;
        &self.data[start..start + self.actions]
    }

    /// Greedy action of one head; ties go to the lowest index.
    pub fn argmax(&self, b: usize, head: usize) -> usize {
        argmax(self.head(b, head))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `c[m x n] = a[m x k] * b[k x n]` with explicit strides (overwrites `c`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`,
    // whose lengths are checked by the callers' shape logic.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[B x rows] = x[B x cols] W^T + b`.
fn dense_forward(p: &QParams, s: DenseSlot, x: &[f64], batch: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * s.rows];
    gemm(batch, s.cols, s.rows, x, s.cols as isize, 1, &p.data[s.w..], 1, s.cols as isize, &mut out);
    let bias = &p.data[s.b..s.b + s.rows];
    for row in out.chunks_exact_mut(s.rows) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

/// Activations kept for the backward pass.
struct Trace {
    /// Input followed by the post-rectifier output of every encoder layer.
    acts: Vec<Vec<f64>>,
    q: QOutput,
}

fn forward_trace(p: &QParams, inputs: &[f64]) -> Result<Trace> {
    let d = p.cfg.input_dim();
    if inputs.len() % d != 0 || inputs.is_empty() {
        return Err(Error::Shape(format!(
            "input of length {} is not a positive multiple of {d}",
            inputs.len()
        )));
    }
    let batch = inputs.len() / d;
    let mut acts = vec![inputs.to_vec()];
    for &s in &p.layout.encoder {
        let mut h = dense_forward(p, s, acts.last().unwrap(), batch);
        for v in &mut h {
            *v = v.max(0.0);
        }
        acts.push(h);
    }
    let last = acts.last().unwrap();
    let (heads, actions) = (p.cfg.heads, p.cfg.actions);
    let mut q = vec![0.0; batch * heads * actions];
    for (k, &s) in p.layout.heads.iter().enumerate() {
        let out = dense_forward(p, s, last, batch);
        for b in 0..batch {
            let dst = (b * heads + k) * actions;
            q[dst..dst + actions].copy_from_slice(&out[b * actions..(b + 1) * actions]);
        }
    }
    Ok(Trace {
        acts,
        q: QOutput {
            batch,
            heads,
            actions,
            data: q,
        },
    })
}

/// Action values for a batch of flattened frame stacks (`B x H*S*S`).
pub fn forward(p: &QParams, inputs: &[f64]) -> Result<QOutput> {
    Ok(forward_trace(p, inputs)?.q)
}

/// Bootstrapped Double-Q targets, indexed `[head][b]`.
///
/// The online network picks `argmax_a Q_online(next)` per head and the target
/// network evaluates it.
pub fn double_q_targets(
    online: &QParams,
    target: &QParams,
    next_inputs: &[f64],
    rewards: &[[f64; NUM_AGENTS]],
    done: &[bool],
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    let q_online = forward(online, next_inputs)?;
    let q_target = forward(target, next_inputs)?;
    targets_from_values(&q_online, &q_target, rewards, done, gamma)
}

/// Double-Q targets from precomputed next-state values.
pub fn targets_from_values(
    q_online: &QOutput,
    q_target: &QOutput,
    rewards: &[[f64; NUM_AGENTS]],
    done: &[bool],
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    let batch = q_online.batch;
    if rewards.len() != batch || done.len() != batch || q_target.batch != batch {
        return Err(Error::Shape(format!(
            "batch {batch}: {} rewards, {} done flags, {} target rows",
            rewards.len(),
            done.len(),
            q_target.batch
        )));
    }
    if q_online.heads != NUM_AGENTS {
        return Err(Error::Shape(format!("expected {NUM_AGENTS} heads, got {}", q_online.heads)));
    }
    Ok((0..q_online.heads)
        .map(|k| {
            (0..batch)
                .map(|b| {
                    let r = rewards[b][k];
                    if done[b] {
                        r
                    } else {
                        let a = q_online.argmax(b, k);
                        r + gamma * q_target.get(b, k, a)
                    }
                })
                .collect()
        })
        .collect())
}

#[inline]
fn huber(d: f64) -> f64 {
    if d.abs() <= 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: QParams,
    /// Mean absolute TD error across heads, per transition.
    pub td_errors: Vec<f64>,
}

/// `mean_b w_b * mean_k huber(Q_k(s_b, a_bk) - y_kb)` and its exact gradient.
///
/// `actions[b][k]` indexes the action taken by head `k`; `targets[k][b]`.
pub fn loss_and_grads(
    p: &QParams,
    inputs: &[f64],
    actions: &[[usize; NUM_AGENTS]],
    targets: &[Vec<f64>],
    is_weights: &[f64],
) -> Result<LossOutput> {
    let trace = forward_trace(p, inputs)?;
    let q = &trace.q;
    let (batch, heads, n_act) = (q.batch, q.heads, q.actions);
    if actions.len() != batch || is_weights.len() != batch || targets.len() != heads {
        return Err(Error::Shape("actions, targets and weights must match the batch".into()));
    }
    if targets.iter().any(|t| t.len() != batch) {
        return Err(Error::Shape("targets must hold one value per batch element".into()));
    }
    if q.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite Q-values in forward pass".into()));
    }

    let scale = 1.0 / (batch * heads) as f64;
    let mut loss = 0.0;
    let mut td_errors = vec![0.0; batch];
    // dL/dQ per head, laid out [head][b][action] to feed each head's backward.
    let mut dq = vec![vec![0.0; batch * n_act]; heads];
    for b in 0..batch {
        let mut per = 0.0;
        for k in 0..heads {
            let a = actions[b][k];
            if a >= n_act {
                return Err(Error::Shape(format!("action index {a} out of range")));
            }
            let delta = q.get(b, k, a) - targets[k][b];
            per += huber(delta);
            td_errors[b] += delta.abs() / heads as f64;
            dq[k][b * n_act + a] = is_weights[b] * scale * delta.clamp(-1.0, 1.0);
        }
        loss += is_weights[b] * per * scale;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }

    let mut grads = p.zeros_like();
    let n_enc = p.layout.encoder.len();
    let last = &trace.acts[n_enc];
    let width = p.layout.heads[0].cols;
    let mut d_last = vec![0.0; batch * width];
    let mut scratch = vec![0.0; batch * width];
    for (k, &s) in p.layout.heads.iter().enumerate() {
        dense_backward(p, s, last, &dq[k], batch, &mut grads, Some(&mut scratch));
        for (acc, v) in d_last.iter_mut().zip(&scratch) {
            *acc += v;
        }
    }

    let mut upstream = d_last;
    for i in (0..n_enc).rev() {
        let s = p.layout.encoder[i];
        // Rectifier derivative: pass gradient where the activation was positive.
        for (g, &a) in upstream.iter_mut().zip(&trace.acts[i + 1]) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        if i == 0 {
            dense_backward(p, s, &trace.acts[0], &upstream, batch, &mut grads, None);
        } else {
            let mut dx = vec![0.0; batch * s.cols];
            dense_backward(p, s, &trace.acts[i], &upstream, batch, &mut grads, Some(&mut dx));
            upstream = dx;
        }
    }

    Ok(LossOutput {
        loss,
        grads,
        td_errors,
    })
}

/// Accumulates weight/bias gradients of one dense layer and, if requested, writes `dL/dx`.
fn dense_backward(
    p: &QParams,
    s: DenseSlot,
    x: &[f64],
    dz: &[f64],
    batch: usize,
    grads: &mut QParams,
    dx: Option<&mut [f64]>,
) {
    let (rows, cols) = (s.rows, s.cols);
    // dW = dz^T x : (rows x B)(B x cols)
    gemm(rows, batch, cols, dz, 1, rows as isize, x, cols as isize, 1, &mut grads.data[s.w..s.w + rows * cols]);
    let db = &mut grads.data[s.b..s.b + rows];
    for row in dz.chunks_exact(rows) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    // dx = dz W : (B x rows)(rows x cols)
    if let Some(dx) = dx {
        gemm(batch, rows, cols, dz, rows as isize, 1, &p.data[s.w..], cols as isize, 1, dx);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &QParams, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut QParams, grads: &QParams, opt: &mut OptimState) -> Result<()> {
    params.same_shape(grads)?;
    if opt.m.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    opt.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = opt.cfg;
    let c1 = 1.0 - beta1.powi(opt.step as i32);
    let c2 = 1.0 - beta2.powi(opt.step as i32);
    for (((w, &g), m), v) in params
        .data
        .iter_mut()
        .zip(&grads.data)
        .zip(&mut opt.m)
        .zip(&mut opt.v)
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

/// How `tau` enters the target update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolyakForm {
    /// `target <- (1 - tau) target + tau online`: the target trails slowly.
    #[default]
    SlowTarget,
    /// `target <- tau target + (1 - tau) online`, read literally.
    Literal,
}

pub fn soft_update(target: &mut QParams, online: &QParams, tau: f64, form: PolyakForm) -> Result<()> {
    target.same_shape(online)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::param("tau", format!("must lie in [0, 1], got {tau}")));
    }
    let keep = match form {
        PolyakForm::SlowTarget => 1.0 - tau,
        PolyakForm::Literal => tau,
    };
    for (t, &o) in target.data.iter_mut().zip(&online.data) {
        *t = keep * *t + (1.0 - keep) * o;
    }
    Ok(())
}

const CKPT_MAGIC: &[u8; 4] = b"QNCK";
const CKPT_VERSION: u32 = 1;

/// Serializes parameters: magic, version, config echo, then each tensor as
/// rank, dims and little-endian `f32` values, all integers `u32` LE.
pub fn encode_checkpoint(p: &QParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * p.len());
    let put = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CKPT_MAGIC);
    put(CKPT_VERSION as usize, &mut out);
    let c = &p.cfg;
    for v in [c.history, c.input_size, c.heads, c.actions, c.hidden.len()] {
        put(v, &mut out);
    }
    for &h in &c.hidden {
        put(h, &mut out);
    }
    let shapes = p.layout.tensor_shapes();
    put(shapes.len(), &mut out);
    for (offset, shape) in shapes {
        put(shape.len(), &mut out);
        for &d in &shape {
            put(d, &mut out);
        }
        let n: usize = shape.iter().product();
        for &x in &p.data[offset..offset + n] {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, field: &'static str) -> Result<usize> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(field, "unexpected end of checkpoint"))?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()) as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<QParams> {
    if bytes.get(..4) != Some(CKPT_MAGIC.as_slice()) {
        return Err(Error::format("magic", "not a checkpoint"));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32("version")?;
    if version != CKPT_VERSION as usize {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let history = c.u32("history")?;
    let input_size = c.u32("input_size")?;
    let heads = c.u32("heads")?;
    let actions = c.u32("actions")?;
    let n_hidden = c.u32("hidden")?;
    if n_hidden > c.remaining() / 4 {
        return Err(Error::format("hidden", "layer count exceeds file size"));
    }
    let hidden = (0..n_hidden).map(|_| c.u32("hidden")).collect::<Result<Vec<_>>>()?;
    // Each head owns at least one parameter; bound it before building the layout.
    if heads > c.remaining() / 4 {
        return Err(Error::format("heads", "head count exceeds file size"));
    }
    let cfg = QNetConfig {
        history,
        input_size,
        hidden,
        heads,
        actions,
    };
    cfg.validate().map_err(|e| Error::format("config", e.to_string()))?;
    let layout = Layout::new(&cfg).map_err(|e| Error::format("config", e.to_string()))?;
    // Every parameter needs four bytes; reject before allocating.
    if layout.len > c.remaining() / 4 {
        return Err(Error::format("tensors", "parameter count exceeds file size"));
    }
    let shapes = layout.tensor_shapes();
    let count = c.u32("tensor_count")?;
    if count != shapes.len() {
        return Err(Error::format("tensor_count", format!("expected {}, got {count}", shapes.len())));
    }
    let mut data = vec![0.0; layout.len];
    for (offset, shape) in &shapes {
        let rank = c.u32("rank")?;
        if rank != shape.len() {
            return Err(Error::format("rank", format!("expected {}, got {rank}", shape.len())));
        }
        for &d in shape {
            let got = c.u32("shape")?;
            if got != d {
                return Err(Error::format("shape", format!("expected {shape:?}, dimension {got} differs")));
            }
        }
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(c.pos..c.pos + 4 * n)
            .ok_or_else(|| Error::format("tensors", "truncated tensor data"))?;
        for (dst, chunk) in data[*offset..offset + n].iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        c.pos += 4 * n;
    }
    if c.remaining() != 0 {
        return Err(Error::format("tensors", format!("{} trailing bytes", c.remaining())));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::format("tensors", "non-finite parameter"));
    }
    Ok(QParams { cfg, layout, data })
}

pub fn save_checkpoint(p: &QParams, path: impl AsRef<Path>) -> Result<()> {
    crate::image::write_file(path.as_ref(), &encode_checkpoint(p))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<QParams> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> QNetConfig {
        QNetConfig {
            history: 2,
            input_size: 3,
            hidden: vec![7, 5],
            heads: 3,
            actions: 6,
        }
    }

    fn random_inputs(cfg: &QNetConfig, batch: usize, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        (0..batch * cfg.input_dim()).map(|_| rng.next_f64()).collect()
    }

    /// Straight-line re-implementation with explicit loops.
    fn reference_forward(p: &QParams, x: &[f64]) -> Vec<f64> {
        let tensors = p.tensors();
        let n_enc = p.config().hidden.len();
        let mut h = x.to_vec();
        for l in 0..n_enc {
            let (_, shape, w) = &tensors[2 * l];
            let b = tensors[2 * l + 1].2;
            h = (0..shape[0])
                .map(|r| {
                    let z: f64 = (0..shape[1]).map(|c| w[r * shape[1] + c] * h[c]).sum::<f64>() + b[r];
                    z.max(0.0)
                })
                .collect();
        }
        let mut q = Vec::new();
        for k in 0..p.config().heads {
            let (_, shape, w) = &tensors[2 * (n_enc + k)];
            let b = tensors[2 * (n_enc + k) + 1].2;
            for r in 0..shape[0] {
                q.push((0..shape[1]).map(|c| w[r * shape[1] + c] * h[c]).sum::<f64>() + b[r]);
            }
        }
        q
    }

    #[test]
    fn zero_weights_give_zero_q() {
        let p = QParams::zeros(tiny()).unwrap();
        let q = forward(&p, &random_inputs(&tiny(), 3, 1)).unwrap();
        assert!(q.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_reference_and_is_row_independent() {
        let cfg = tiny();
        let p = QParams::init(cfg.clone(), 9).unwrap();
        let x = random_inputs(&cfg, 4, 2);
        let q = forward(&p, &x).unwrap();
        let d = cfg.input_dim();
        for b in 0..4 {
            let r = reference_forward(&p, &x[b * d..(b + 1) * d]);
            let got = &q.data[b * 18..(b + 1) * 18];
            for (a, e) in got.iter().zip(&r) {
                assert!((a - e).abs() < 1e-6);
            }
        }
        let mut dup = x[..d].to_vec();
        dup.extend_from_slice(&x[..d]);
        let q = forward(&p, &dup).unwrap();
        assert_eq!(q.data[..18], q.data[18..]);
        assert!(matches!(forward(&p, &x[..d - 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn heads_are_permutation_equivariant() {
        let cfg = tiny();
        let p = QParams::init(cfg.clone(), 3).unwrap();
        let mut swapped = p.clone();
        // Each head's weight and bias are stored contiguously.
        let (h0, h1) = (p.layout.heads[0], p.layout.heads[1]);
        let n = h0.rows * h0.cols + h0.rows;
        swapped.data[h0.w..h0.w + n].copy_from_slice(&p.data[h1.w..h1.w + n]);
        swapped.data[h1.w..h1.w + n].copy_from_slice(&p.data[h0.w..h0.w + n]);
        let x = random_inputs(&cfg, 2, 5);
        let a = forward(&p, &x).unwrap();
        let b = forward(&swapped, &x).unwrap();
        for r in 0..2 {
            assert_eq!(a.head(r, 0), b.head(r, 1));
            assert_eq!(a.head(r, 1), b.head(r, 0));
            assert_eq!(a.head(r, 2), b.head(r, 2));
        }
    }

    #[test]
    fn double_q_examples() {
        let mk = |rows: &[[f64; 6]]| QOutput {
            batch: 1,
            heads: 3,
            actions: 6,
            data: rows.iter().flatten().copied().collect(),
        };
        let online = mk(&[[0.1, 0.5, 0.2, 0.0, 0.0, 0.0]; 3]);
        let target = mk(&[[9.0, 0.3, 7.0, 0.0, 0.0, 0.0]; 3]);
        let y = targets_from_values(&online, &target, &[[1.0; 3]], &[false], 0.999).unwrap();
        for head in &y {
            assert!((head[0] - 1.2997).abs() < 1e-12);
        }
        let y = targets_from_values(&online, &target, &[[1.0, -2.0, 0.5]], &[true], 0.999).unwrap();
        assert_eq!(y, vec![vec![1.0], vec![-2.0], vec![0.5]]);
        // Ties pick the lowest action.
        let tie = mk(&[[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]; 3]);
        let t = mk(&[[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]; 3]);
        let y = targets_from_values(&tie, &t, &[[0.0; 3]], &[false], 1.0).unwrap();
        assert_eq!(y[0][0], 1.0);
    }

    #[test]
    fn double_q_collapses_to_max_when_networks_match() {
        let cfg = tiny();
        let p = QParams::init(cfg.clone(), 4).unwrap();
        let x = random_inputs(&cfg, 3, 6);
        let r = [[0.5, -1.0, 2.0]; 3];
        let y = double_q_targets(&p, &p, &x, &r, &[false; 3], 0.9).unwrap();
        let q = forward(&p, &x).unwrap();
        for k in 0..3 {
            for b in 0..3 {
                let max = q.head(b, k).iter().copied().fold(f64::MIN, f64::max);
                assert_eq!(y[k][b], r[b][k] + 0.9 * max);
            }
        }
    }

    #[test]
    fn loss_zero_at_targets_and_half_square_inside() {
        let cfg = tiny();
        let p = QParams::init(cfg.clone(), 1).unwrap();
        let x = random_inputs(&cfg, 2, 3);
        let q = forward(&p, &x).unwrap();
        let actions = [[0, 1, 2], [5, 4, 3]];
        let exact: Vec<Vec<f64>> = (0..3).map(|k| (0..2).map(|b| q.get(b, k, actions[b][k])).collect()).collect();
        let out = loss_and_grads(&p, &x, &actions, &exact, &[1.0, 1.0]).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.as_slice().iter().all(|&g| g == 0.0));

        let shifted: Vec<Vec<f64>> = exact.iter().map(|t| t.iter().map(|v| v + 0.3).collect()).collect();
        let out = loss_and_grads(&p, &x, &actions, &shifted, &[0.5, 1.0]).unwrap();
        let expect = (0.5 * 0.5 * 0.09 + 0.5 * 0.09) / 2.0;
        assert!((out.loss - expect).abs() < 1e-12);
        assert!(out.td_errors.iter().all(|&t| (t - 0.3).abs() < 1e-12));
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = tiny();
        let mut p = QParams::init(cfg.clone(), 21).unwrap();
        for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
            *v += 0.01 * ((i % 7) as f64 - 3.0);
        }
        let x = random_inputs(&cfg, 4, 22);
        let actions = [[0, 1, 2], [3, 4, 5], [1, 1, 1], [5, 0, 2]];
        let targets = vec![vec![0.3, -1.5, 2.0, 0.1], vec![1.2, 0.0, -0.4, 3.0], vec![-2.0, 0.7, 0.2, 0.5]];
        let w = [1.0, 0.6, 0.3, 0.9];
        let analytic = loss_and_grads(&p, &x, &actions, &targets, &w).unwrap().grads;
        let h = 1e-4;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let lp = loss_and_grads(&plus, &x, &actions, &targets, &w).unwrap().loss;
            let lm = loss_and_grads(&minus, &x, &actions, &targets, &w).unwrap().loss;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let err = (a - numeric).abs();
            assert!(err <= 1e-4 * a.abs().max(numeric.abs()) || err <= 1e-10, "param {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn adam_examples() {
        let cfg = tiny();
        let mut p = QParams::init(cfg, 2).unwrap();
        let before = p.clone();
        let mut opt = OptimState::new(&p, AdamConfig::default());
        adam_step(&mut p, &before.zeros_like(), &mut opt).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);

        let mut ones = before.zeros_like();
        ones.as_mut_slice().fill(1.0);
        let mut p = before.clone();
        let mut opt = OptimState::new(&p, AdamConfig::default());
        adam_step(&mut p, &ones, &mut opt).unwrap();
        for (a, b) in p.as_slice().iter().zip(before.as_slice()) {
            assert!(((b - a) - 1e-4).abs() < 1e-10);
        }
        let mut q = before.clone();
        let mut opt2 = OptimState::new(&q, AdamConfig::default());
        adam_step(&mut q, &ones, &mut opt2).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn soft_update_examples() {
        let cfg = tiny();
        let online = QParams::zeros(cfg.clone()).unwrap();
        let mut target = online.zeros_like();
        target.as_mut_slice().fill(1.0);
        let orig = target.clone();

        soft_update(&mut target, &online, 0.0, PolyakForm::SlowTarget).unwrap();
        assert_eq!(target, orig);
        soft_update(&mut target, &online, 0.01, PolyakForm::SlowTarget).unwrap();
        assert!(target.as_slice().iter().all(|&v| (v - 0.99).abs() < 1e-15));
        soft_update(&mut target, &online, 1.0, PolyakForm::SlowTarget).unwrap();
        assert_eq!(target, online);

        let mut literal = orig.clone();
        soft_update(&mut literal, &online, 0.01, PolyakForm::Literal).unwrap();
        assert!(literal.as_slice().iter().all(|&v| (v - 0.01).abs() < 1e-15));
    }

    #[test]
    fn soft_update_contracts() {
        let cfg = tiny();
        let online = QParams::init(cfg.clone(), 1).unwrap();
        let mut target = QParams::init(cfg, 2).unwrap();
        let dist = |a: &QParams, b: &QParams| {
            a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let mut d = dist(&target, &online);
        for tau in [0.01, 0.3, 0.9] {
            soft_update(&mut target, &online, tau, PolyakForm::SlowTarget).unwrap();
            let nd = dist(&target, &online);
            assert!(nd < d);
            d = nd;
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let p = QParams::init(tiny(), 5).unwrap();
        let bytes = encode_checkpoint(&p);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), p.config());
        for (a, b) in back.as_slice().iter().zip(p.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(encode_checkpoint(&back), bytes);

        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        // Corrupt the first tensor's row count.
        let mut bad = bytes.clone();
        let pos = 4 + 4 * 6 + 4 * 2 + 4 + 4;
        bad[pos] ^= 1;
        assert!(decode_checkpoint(&bad).is_err());
    }
}

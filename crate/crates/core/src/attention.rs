//! Entropy-guided head-wise attention concentration on a block-wise
//! online-softmax kernel.
//!
//! Two passes share the same tiling. The entropy pass streams each query
//! row's softmax statistics to get the mean attention entropy per head; the
//! forward pass computes `softmax(lambda_h * Q K^T / sqrt(D)) V` with one focus
//! factor per head. Neither pass holds more than one `b_q x b_kv` score tile
//! per worker, and key/value blocks are always consumed in ascending order, so
//! results do not depend on the worker count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Tensor;

/// Q and K are `[heads, N, head_dim]`, V is `[heads, N, value_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Scalar> AttentionInputs<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        for (name, t) in [("q", &q), ("k", &k), ("v", &v)] {
            if t.ndim() != 3 {
                return Err(Error::Dimension(format!(
                    "{name} must be [heads, N, dim], got shape {:?}",
                    t.shape()
                )));
            }
        }
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs[0] != ks[0] || qs[0] != vs[0] {
            return Err(Error::Dimension(format!(
                "head counts differ: q {} k {} v {}",
                qs[0], ks[0], vs[0]
            )));
        }
        if qs[1] != ks[1] || qs[1] != vs[1] {
            return Err(Error::Dimension(format!(
                "token counts differ: q {} k {} v {}",
                qs[1], ks[1], vs[1]
            )));
        }
        if qs[2] != ks[2] {
            return Err(Error::Dimension(format!(
                "q head_dim {} differs from k head_dim {}",
                qs[2], ks[2]
            )));
        }
        if qs[1] == 0 {
            return Err(Error::EmptyInput("attention needs at least one token".into()));
        }
        if qs[0] == 0 || qs[2] == 0 || vs[2] == 0 {
            return Err(Error::EmptyInput(format!(
                "degenerate shapes q {qs:?} v {vs:?}"
            )));
        }
        Ok(Self { q, k, v })
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn value_dim(&self) -> usize {
        self.v.shape()[2]
    }

    pub fn q(&self) -> &Tensor<T> {
        &self.q
    }

    pub fn k(&self) -> &Tensor<T> {
        &self.k
    }

    pub fn v(&self) -> &Tensor<T> {
        &self.v
    }

    pub fn cast<U: Scalar>(&self) -> AttentionInputs<U> {
        AttentionInputs {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            if !t.all_finite() {
                return Err(Error::Numeric(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    fn row(t: &Tensor<T>, head: usize, token: usize) -> &[T] {
        let s = t.shape();
        let width = s[2];
        let start = (head * s[1] + token) * width;
        &t.data()[start..start + width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub b_q: usize,
    pub b_kv: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { b_q: 128, b_kv: 128 }
    }
}

impl BlockConfig {
    pub fn new(b_q: usize, b_kv: usize) -> Self {
        Self { b_q, b_kv }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_q == 0 || self.b_kv == 0 {
            return Err(Error::Config(format!(
                "block sizes must be positive, got b_q={} b_kv={}",
                self.b_q, self.b_kv
            )));
        }
        Ok(())
    }
}

/// Mean attention entropy per head, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub per_head: Vec<f64>,
    pub h_min: f64,
    pub h_max: f64,
}

impl EntropyReport {
    pub fn from_per_head(per_head: Vec<f64>) -> Result<Self> {
        if per_head.is_empty() {
            return Err(Error::EmptyInput("entropy report needs at least one head".into()));
        }
        if per_head.iter().any(|h| !h.is_finite()) {
            return Err(Error::Numeric("non-finite head entropy".into()));
        }
        let h_min = per_head.iter().copied().fold(f64::INFINITY, f64::min);
        let h_max = per_head.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            per_head,
            h_min,
            h_max,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub exponent_p: f64,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        Self {
            lambda_min: 1.0,
            lambda_max: 1.3,
            exponent_p: 2.0,
        }
    }
}

impl ConcentrationConfig {
    /// Both bounds equal: every head gets the same factor.
    pub fn uniform(lambda: f64) -> Self {
        Self {
            lambda_min: lambda,
            lambda_max: lambda,
            exponent_p: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_min.is_finite()
            && self.lambda_max.is_finite()
            && self.lambda_min >= 1.0
            && self.lambda_min <= self.lambda_max
            && self.exponent_p.is_finite()
            && self.exponent_p > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "need 1 <= lambda_min <= lambda_max and p > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One focus factor (inverse temperature) per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusMap {
    pub per_head: Vec<f64>,
}

impl FocusMap {
    pub fn uniform(heads: usize, lambda: f64) -> Self {
        Self {
            per_head: vec![lambda; heads],
        }
    }
}

/// Maps head entropies to focus factors: the most diffuse head gets
/// `lambda_min`, the most concentrated `lambda_max`, with curvature `p`.
pub fn focus_map(report: &EntropyReport, cfg: &ConcentrationConfig) -> Result<FocusMap> {
    cfg.validate()?;
    if !(report.h_max >= report.h_min) {
        return Err(Error::Argument(format!(
            "entropy report has h_max {} < h_min {}",
            report.h_max, report.h_min
        )));
    }
    let span = report.h_max - report.h_min;
    let range = cfg.lambda_max - cfg.lambda_min;
    let per_head = report
        .per_head
        .iter()
        .map(|&h| {
            if span <= 0.0 {
                cfg.lambda_min
            } else {
                let x = ((report.h_max - h) / span).clamp(0.0, 1.0);
                cfg.lambda_min + range * x.powf(cfg.exponent_p)
            }
        })
        .collect();
    Ok(FocusMap { per_head })
}

/// Tracks live engine scratch. Each worker's buffers register on creation
/// and release on drop.
#[derive(Debug, Default)]
pub struct ScratchMeter {
    live: AtomicUsize,
    peak_total: AtomicUsize,
    peak_worker: AtomicUsize,
}

impl ScratchMeter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Highest simultaneous scratch across all workers.
    pub fn peak_total(&self) -> usize {
        self.peak_total.load(Ordering::SeqCst)
    }

    /// Largest single-worker scratch allocation.
    pub fn peak_per_worker(&self) -> usize {
        self.peak_worker.load(Ordering::SeqCst)
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.peak_total.store(self.live(), Ordering::SeqCst);
        self.peak_worker.store(0, Ordering::SeqCst);
    }

    fn acquire(&self, bytes: usize) {
        let now = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak_total.fetch_max(now, Ordering::SeqCst);
        self.peak_worker.fetch_max(bytes, Ordering::SeqCst);
    }

    fn release(&self, bytes: usize) {
        self.live.fetch_sub(bytes, Ordering::SeqCst);
    }
}

struct Metered<'a> {
    meter: Option<&'a ScratchMeter>,
    bytes: usize,
}

impl<'a> Metered<'a> {
    fn new(meter: Option<&'a ScratchMeter>, bytes: usize) -> Self {
        if let Some(m) = meter {
            m.acquire(bytes);
        }
        Self { meter, bytes }
    }
}

impl Drop for Metered<'_> {
    fn drop(&mut self) {
        if let Some(m) = self.meter {
            m.release(self.bytes);
        }
    }
}

/// Scratch of one forward work item: score tile, running max and sum, output
/// accumulator.
struct ForwardScratch<'a, T> {
    scores: Vec<T>,
    row_max: Vec<T>,
    row_sum: Vec<T>,
    acc: Vec<T>,
    _meter: Metered<'a>,
}

impl<'a, T: Scalar> ForwardScratch<'a, T> {
    fn new(rows: usize, cols: usize, value_dim: usize, meter: Option<&'a ScratchMeter>) -> Self {
        let elems = rows * cols + 2 * rows + rows * value_dim;
        Self {
            scores: vec![T::zero(); rows * cols],
            row_max: vec![T::neg_infinity(); rows],
            row_sum: vec![T::zero(); rows],
            acc: vec![T::zero(); rows * value_dim],
            _meter: Metered::new(meter, elems * T::DTYPE.size()),
        }
    }
}

/// Scratch of one entropy work item. Row statistics are kept in `f64`.
struct EntropyScratch<'a, T> {
    scores: Vec<T>,
    row_max: Vec<f64>,
    row_sum: Vec<f64>,
    row_shifted: Vec<f64>,
    _meter: Metered<'a>,
}

impl<'a, T: Scalar> EntropyScratch<'a, T> {
    fn new(rows: usize, cols: usize, meter: Option<&'a ScratchMeter>) -> Self {
        let bytes = rows * cols * T::DTYPE.size() + 3 * rows * 8;
        Self {
            scores: vec![T::zero(); rows * cols],
            row_max: vec![f64::NEG_INFINITY; rows],
            row_sum: vec![0.0; rows],
            row_shifted: vec![0.0; rows],
            _meter: Metered::new(meter, bytes),
        }
    }
}

/// Fills `scores[r * cols + c] = scale * <q_r, k_c>` for one tile.
fn score_tile<T: Scalar>(
    inputs: &AttentionInputs<T>,
    head: usize,
    q_rows: std::ops::Range<usize>,
    kv_cols: std::ops::Range<usize>,
    scale: T,
    scores: &mut [T],
) {
    let cols = kv_cols.len();
    for (r, qi) in q_rows.enumerate() {
        let q = AttentionInputs::row(&inputs.q, head, qi);
        let out = &mut scores[r * cols..(r + 1) * cols];
        for (c, kj) in kv_cols.clone().enumerate() {
            out[c] = dot(q, AttentionInputs::row(&inputs.k, head, kj)) * scale;
        }
    }
}

/// Execution settings shared by both passes.
#[derive(Debug, Clone)]
pub struct Engine {
    pub blocks: BlockConfig,
    pub workers: usize,
    meter: Option<Arc<ScratchMeter>>,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new(BlockConfig::default())
    }
}

impl Engine {
    pub fn new(blocks: BlockConfig) -> Self {
        Self {
            blocks,
            workers: 1,
            meter: None,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn with_meter(mut self, meter: Arc<ScratchMeter>) -> Self {
        self.meter = Some(meter);
        self
    }

    pub fn meter(&self) -> Option<&Arc<ScratchMeter>> {
        self.meter.as_ref()
    }

    /// Runs `job` over every `(head, query block)` item, each writing its
    /// own disjoint chunk of `out` (`row_width` elements per query row).
    fn for_each_block<U, F>(&self, heads: usize, tokens: usize, row_width: usize, out: &mut [U], job: F) -> Result<()>
    where
        U: Send,
        F: Fn(usize, std::ops::Range<usize>, &mut [U]) + Sync,
    {
        let b_q = self.blocks.b_q;
        let mut items: Vec<(usize, usize, &mut [U])> = Vec::new();
        for (head, head_out) in out.chunks_mut(tokens * row_width).enumerate() {
            for (block, chunk) in head_out.chunks_mut(b_q * row_width).enumerate() {
                items.push((head, block * b_q, chunk));
            }
        }
        debug_assert_eq!(items.len(), heads * tokens.div_ceil(b_q));

        let run = |(head, start, chunk): (usize, usize, &mut [U])| {
            let rows = chunk.len() / row_width;
            job(head, start..start + rows, chunk);
        };
        if self.workers <= 1 {
            items.into_iter().for_each(run);
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.workers)))?;
            pool.install(|| items.into_par_iter().for_each(run));
        }
        Ok(())
    }

    /// Shannon entropy of every attention row, `[heads * N]` in head-major
    /// order.
    pub fn row_entropies<T: Scalar>(&self, inputs: &AttentionInputs<T>) -> Result<Vec<f64>> {
        self.blocks.validate()?;
        inputs.check_finite()?;
        let (heads, n) = (inputs.heads(), inputs.tokens());
        let b_kv = self.blocks.b_kv.min(n);
        let scale = T::of(1.0 / (inputs.head_dim() as f64).sqrt());
        let ln_n = (n as f64).ln();
        let meter = self.meter.as_deref();

        let mut entropies = vec![0.0f64; heads * n];
        self.for_each_block(heads, n, 1, &mut entropies, |head, rows, out| {
            let mut ws = EntropyScratch::<T>::new(rows.len(), b_kv, meter);
            for kv_start in (0..n).step_by(b_kv) {
                let cols = kv_start..(kv_start + b_kv).min(n);
                let width = cols.len();
                score_tile(inputs, head, rows.clone(), cols, scale, &mut ws.scores);
                for r in 0..rows.len() {
                    let tile = &ws.scores[r * width..(r + 1) * width];
                    let tile_max = tile.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s.as_f64()));
                    let old_max = ws.row_max[r];
                    let new_max = old_max.max(tile_max);
                    // shifted sum t = sum (s - m) e^(s - m) tracks the running max m
                    let (mut sum, mut shifted) = if old_max == f64::NEG_INFINITY {
                        (0.0, 0.0)
                    } else {
                        let decay = (old_max - new_max).exp();
                        let l = ws.row_sum[r];
                        (decay * l, decay * (ws.row_shifted[r] + (old_max - new_max) * l))
                    };
                    for &s in tile {
                        let z = s.as_f64() - new_max;
                        let e = z.exp();
                        sum += e;
                        shifted += z * e;
                    }
                    ws.row_max[r] = new_max;
                    ws.row_sum[r] = sum;
                    ws.row_shifted[r] = shifted;
                }
            }
            for r in 0..rows.len() {
                let h = ws.row_sum[r].ln() - ws.row_shifted[r] / ws.row_sum[r];
                out[r] = h.clamp(0.0, ln_n);
            }
        })?;
        if entropies.iter().any(|h| !h.is_finite()) {
            return Err(Error::Numeric("non-finite row entropy".into()));
        }
        Ok(entropies)
    }

    /// Stage 1: mean row entropy per head.
    pub fn entropy_pass<T: Scalar>(&self, inputs: &AttentionInputs<T>) -> Result<EntropyReport> {
        let rows = self.row_entropies(inputs)?;
        let n = inputs.tokens();
        let per_head = rows
            .chunks(n)
            .map(|head| head.iter().sum::<f64>() / n as f64)
            .collect();
        EntropyReport::from_per_head(per_head)
    }

    /// Stage 2: block-wise attention with per-head logit scaling.
    pub fn attention_forward<T: Scalar>(&self, inputs: &AttentionInputs<T>, focus: &FocusMap) -> Result<Tensor<T>> {
        self.blocks.validate()?;
        inputs.check_finite()?;
        let (heads, n, dv) = (inputs.heads(), inputs.tokens(), inputs.value_dim());
        if focus.per_head.len() != heads {
            return Err(Error::Argument(format!(
                "focus map has {} factors for {heads} heads",
                focus.per_head.len()
            )));
        }
        if let Some(bad) = focus.per_head.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::Argument(format!("focus factor must be positive, got {bad}")));
        }
        let b_kv = self.blocks.b_kv.min(n);
        let inv_sqrt_d = 1.0 / (inputs.head_dim() as f64).sqrt();
        let meter = self.meter.as_deref();

        let mut out = vec![T::zero(); heads * n * dv];
        self.for_each_block(heads, n, dv, &mut out, |head, rows, dst| {
            let scale = T::of(focus.per_head[head] * inv_sqrt_d);
            let nrows = rows.len();
            let mut ws = ForwardScratch::<T>::new(nrows, b_kv, dv, meter);
            for kv_start in (0..n).step_by(b_kv) {
                let cols = kv_start..(kv_start + b_kv).min(n);
                let width = cols.len();
                score_tile(inputs, head, rows.clone(), cols.clone(), scale, &mut ws.scores);
                for r in 0..nrows {
                    let tile = &ws.scores[r * width..(r + 1) * width];
                    let tile_max = tile.iter().copied().fold(T::neg_infinity(), T::max);
                    let old_max = ws.row_max[r];
                    let new_max = old_max.max(tile_max);
                    let acc = &mut ws.acc[r * dv..(r + 1) * dv];
                    if old_max != T::neg_infinity() {
                        let decay = (old_max - new_max).exp();
                        ws.row_sum[r] *= decay;
                        acc.iter_mut().for_each(|a| *a *= decay);
                    }
                    let mut sum = ws.row_sum[r];
                    for (&s, kj) in tile.iter().zip(cols.clone()) {
                        let p = (s - new_max).exp();
                        sum += p;
                        axpy(acc, p, AttentionInputs::row(&inputs.v, head, kj));
                    }
                    ws.row_sum[r] = sum;
                    ws.row_max[r] = new_max;
                }
            }
            for r in 0..nrows {
                let inv = T::one() / ws.row_sum[r];
                for (d, a) in dst[r * dv..(r + 1) * dv].iter_mut().zip(&ws.acc[r * dv..(r + 1) * dv]) {
                    *d = *a * inv;
                }
            }
        })?;

        let out = Tensor::new(vec![heads, n, dv], out)?;
        if !out.all_finite() {
            return Err(Error::Numeric("attention produced non-finite values".into()));
        }
        Ok(out)
    }
}

pub fn entropy_pass<T: Scalar>(inputs: &AttentionInputs<T>, blocks: BlockConfig) -> Result<EntropyReport> {
    Engine::new(blocks).entropy_pass(inputs)
}

pub fn attention_forward<T: Scalar>(
    inputs: &AttentionInputs<T>,
    focus: &FocusMap,
    blocks: BlockConfig,
) -> Result<Tensor<T>> {
    Engine::new(blocks).attention_forward(inputs, focus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryShape {
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub value_dim: usize,
    pub elem_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// Per-worker scratch of the block-wise engine.
    pub engine_bytes: usize,
    /// Score tile share of `engine_bytes`.
    pub score_scratch_bytes: usize,
    /// A dense `N x N` score matrix for every head.
    pub naive_bytes: u128,
    pub naive_bytes_per_head: u128,
}

pub fn memory_report(shape: MemoryShape, blocks: BlockConfig) -> MemoryReport {
    let score = blocks.b_q * blocks.b_kv;
    let accumulators = blocks.b_q * (shape.head_dim + shape.value_dim + 3);
    let per_head = (shape.tokens as u128).pow(2) * shape.elem_bytes as u128;
    MemoryReport {
        engine_bytes: (score + accumulators) * shape.elem_bytes,
        score_scratch_bytes: score * shape.elem_bytes,
        naive_bytes: per_head * shape.heads as u128,
        naive_bytes_per_head: per_head,
    }
}

#[derive(Debug, Clone)]
pub struct ConcentratedOutput<T> {
    pub output: Tensor<T>,
    pub entropy: EntropyReport,
    pub focus: FocusMap,
    /// Stage 1 was skipped in favour of a cached focus map.
    pub reused: bool,
}

/// Runs both stages and keeps the first focus map for later calls.
#[derive(Debug, Clone)]
pub struct Concentrator {
    pub cfg: ConcentrationConfig,
    pub engine: Engine,
    cache: Option<(EntropyReport, FocusMap)>,
}

impl Concentrator {
    pub fn new(cfg: ConcentrationConfig, engine: Engine) -> Self {
        Self {
            cfg,
            engine,
            cache: None,
        }
    }

    pub fn cached(&self) -> Option<&(EntropyReport, FocusMap)> {
        self.cache.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// With `reuse_cache`, a cached focus map for the same head count skips
    /// the entropy pass.
    pub fn run<T: Scalar>(&mut self, inputs: &AttentionInputs<T>, reuse_cache: bool) -> Result<ConcentratedOutput<T>> {
        self.cfg.validate()?;
        let reusable = reuse_cache
            && self
                .cache
                .as_ref()
                .is_some_and(|(_, f)| f.per_head.len() == inputs.heads());
        let (entropy, focus) = if reusable {
            self.cache.clone().expect("checked above")
        } else {
            let report = self.engine.entropy_pass(inputs)?;
            let focus = focus_map(&report, &self.cfg)?;
            self.cache = Some((report.clone(), focus.clone()));
            (report, focus)
        };
        let output = self.engine.attention_forward(inputs, &focus)?;
        Ok(ConcentratedOutput {
            output,
            entropy,
            focus,
            reused: reusable,
        })
    }
}

pub fn concentrated_attention<T: Scalar>(
    inputs: &AttentionInputs<T>,
    cfg: &ConcentrationConfig,
    blocks: BlockConfig,
) -> Result<(Tensor<T>, EntropyReport, FocusMap)> {
    let out = Concentrator::new(*cfg, Engine::new(blocks)).run(inputs, false)?;
    Ok((out.output, out.entropy, out.focus))
}

//! A seeded, untrained attention layer over a 2D token grid, used to run
//! schedules and concentration end-to-end and to measure repetition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionInputs, ConcentrationConfig, Concentrator, Engine};
use crate::error::{Error, Result};
use crate::extrapolation::Axis;
use crate::rope::{apply_rope_2d_in_place, FrequencySchedule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Score bounds used by the repetition diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepetitionThresholds {
    /// An uncorrected track must correlate above this at its period.
    pub periodic_min: f64,
    /// A corrected track must correlate below this at the old period.
    pub corrected_max: f64,
}

impl Default for RepetitionThresholds {
    fn default() -> Self {
        Self {
            periodic_min: 0.9,
            corrected_max: 0.2,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Tokens in row-major order: token `i` sits at `(i / width, i % width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T> {
    pub height: usize,
    pub width: usize,
    pub tokens: Tensor<T>,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn position(&self, token: usize) -> (usize, usize) {
        (token / self.width, token % self.width)
    }

    pub fn feature_dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Top-left `height x width` window, keeping each token's position.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "cannot crop {height}x{width} from {}x{}",
                self.height, self.width
            )));
        }
        let f = self.feature_dim();
        let mut data = Vec::with_capacity(height * width * f);
        for r in 0..height {
            let start = r * self.width * f;
            data.extend_from_slice(&self.tokens.data()[start..start + width * f]);
        }
        Ok(Self {
            height,
            width,
            tokens: Tensor::new(vec![height * width, f], data)?,
        })
    }
}

/// Seeded standard-normal tokens `[height * width, feature_dim]`.
pub fn token_grid<T: Scalar>(height: usize, width: usize, feature_dim: usize, seed: u64) -> Result<TokenGrid<T>> {
    if height == 0 || width == 0 || feature_dim == 0 {
        return Err(Error::Dimension("token grid dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = normal_vec(&mut rng, height * width * feature_dim, 1.0)
        .into_iter()
        .map(T::of)
        .collect();
    Ok(TokenGrid {
        height,
        width,
        tokens: Tensor::new(vec![height * width, feature_dim], data)?,
    })
}

/// Seeded standard-normal Q, K and V, drawn in that order from one stream.
pub fn random_inputs<T: Scalar>(
    heads: usize,
    tokens: usize,
    head_dim: usize,
    value_dim: usize,
    seed: u64,
) -> Result<AttentionInputs<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |width: usize| {
        let data = normal_vec(&mut rng, heads * tokens * width, 1.0).into_iter().map(T::of).collect();
        Tensor::new(vec![heads, tokens, width], data)
    };
    let q = draw(head_dim)?;
    let k = draw(head_dim)?;
    let v = draw(value_dim)?;
    AttentionInputs::new(q, k, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLayerSpec {
    pub seed: u64,
    pub heads: usize,
    pub feature_dim: usize,
    pub head_dim: usize,
    pub value_dim: usize,
}

/// Q/K/V projections drawn from `N(0, 1/feature_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    pub spec: ToyLayerSpec,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

impl ToyLayer {
    pub fn new(spec: ToyLayerSpec) -> Result<Self> {
        if spec.heads == 0 || spec.feature_dim == 0 || spec.head_dim == 0 || spec.value_dim == 0 {
            return Err(Error::Config(format!("toy layer dimensions must be positive: {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = 1.0 / (spec.feature_dim as f64).sqrt();
        let qk = spec.feature_dim * spec.heads * spec.head_dim;
        let wq = normal_vec(&mut rng, qk, scale);
        let wk = normal_vec(&mut rng, qk, scale);
        let wv = normal_vec(&mut rng, spec.feature_dim * spec.heads * spec.value_dim, scale);
        Ok(Self { spec, wq, wk, wv })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ToyLayerSpec =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("toy layer spec: {e}")))?;
        Self::new(spec)
    }

    /// Zeroes the query projection, which makes every attention row uniform.
    pub fn without_queries(mut self) -> Self {
        self.wq.iter_mut().for_each(|w| *w = 0.0);
        self
    }

    /// `x W` rearranged to `[heads, N, width]`, in `f64`.
    fn project<T: Scalar>(&self, grid: &TokenGrid<T>, weights: &[f64], width: usize) -> Vec<f64> {
        let n = grid.height * grid.width;
        let f = self.spec.feature_dim;
        let heads = self.spec.heads;
        let cols = heads * width;
        let x = grid.tokens.data();
        let mut out = vec![0.0; heads * n * width];
        for i in 0..n {
            let xi = &x[i * f..(i + 1) * f];
            for c in 0..cols {
                let mut acc = 0.0;
                for (fi, xv) in xi.iter().enumerate() {
                    acc += xv.as_f64() * weights[fi * cols + c];
                }
                let (h, d) = (c / width, c % width);
                out[(h * n + i) * width + d] = acc;
            }
        }
        out
    }

    /// Projects the grid and rotates Q and K by their grid positions.
    pub fn inputs<T: Scalar>(
        &self,
        grid: &TokenGrid<T>,
        sched_h: &FrequencySchedule,
        sched_w: &FrequencySchedule,
    ) -> Result<AttentionInputs<T>> {
        if grid.feature_dim() != self.spec.feature_dim {
            return Err(Error::Dimension(format!(
                "grid features {} do not match layer input {}",
                grid.feature_dim(),
                self.spec.feature_dim
            )));
        }
        let d = self.spec.head_dim;
        if d != 2 * (sched_h.len() + sched_w.len()) {
            return Err(Error::Dimension(format!(
                "head_dim {d} does not match rotary pairs {} + {}",
                sched_h.len(),
                sched_w.len()
            )));
        }
        let n = grid.height * grid.width;
        let heads = self.spec.heads;
        let mut q = self.project(grid, &self.wq, d);
        let mut k = self.project(grid, &self.wk, d);
        let v = self.project(grid, &self.wv, self.spec.value_dim);
        for buf in [&mut q, &mut k] {
            for (row, x) in buf.chunks_mut(d).enumerate() {
                let (ph, pw) = grid.position(row % n);
                apply_rope_2d_in_place(x, ph as f64, pw as f64, sched_h, sched_w)?;
            }
        }
        let to_t = |buf: Vec<f64>, width: usize| Tensor::new(vec![heads, n, width], buf.into_iter().map(T::of).collect());
        AttentionInputs::new(to_t(q, d)?, to_t(k, d)?, to_t(v, self.spec.value_dim)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionEntry {
    pub axis: Axis,
    pub period: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridStats {
    pub train_hw: (usize, usize),
    pub target_hw: (usize, usize),
    pub entropy_train: Vec<f64>,
    pub entropy_target: Vec<f64>,
    pub focus: Vec<f64>,
    pub repetition: Vec<RepetitionEntry>,
}

/// Runs the layer on `grid` and gathers entropy at the training window and
/// at the full grid plus repetition scores of the output-norm tracks.
pub fn run_layer<T: Scalar>(
    layer: &ToyLayer,
    grid: &TokenGrid<T>,
    train_hw: (usize, usize),
    sched_h: &FrequencySchedule,
    sched_w: &FrequencySchedule,
    cfg: &ConcentrationConfig,
    engine: &Engine,
) -> Result<(Tensor<T>, GridStats)> {
    let inputs = layer.inputs(grid, sched_h, sched_w)?;
    let run = Concentrator::new(*cfg, engine.clone()).run(&inputs, false)?;

    let entropy_train = if train_hw == (grid.height, grid.width) {
        run.entropy.per_head.clone()
    } else {
        let window = grid.crop(train_hw.0, train_hw.1)?;
        engine.entropy_pass(&layer.inputs(&window, sched_h, sched_w)?)?.per_head
    };

    let norms = output_norms(&run.output, grid.height, grid.width);
    let mut repetition = Vec::new();
    for (axis, schedule, track) in [
        (Axis::H, sched_h, axis_track(&norms, grid.height, grid.width, Axis::H)),
        (Axis::W, sched_w, axis_track(&norms, grid.height, grid.width, Axis::W)),
    ] {
        let mut periods: Vec<usize> = (0..schedule.len())
            .map(|i| schedule.period(i).round() as usize)
            .filter(|&p| p >= 2 && p < track.len())
            .collect();
        periods.sort_unstable();
        periods.dedup();
        for period in periods {
            if let Ok(score) = repetition_score(&track, period) {
                repetition.push(RepetitionEntry { axis, period, score });
            }
        }
    }

    let stats = GridStats {
        train_hw,
        target_hw: (grid.height, grid.width),
        entropy_train,
        entropy_target: run.entropy.per_head.clone(),
        focus: run.focus.per_head.clone(),
        repetition,
    };
    Ok((run.output, stats))
}

/// Euclidean norm of each token's output, summed over heads.
fn output_norms<T: Scalar>(output: &Tensor<T>, height: usize, width: usize) -> Vec<f64> {
    let (heads, n, dv) = (output.shape()[0], output.shape()[1], output.shape()[2]);
    debug_assert_eq!(n, height * width);
    let mut norms = vec![0.0; n];
    for h in 0..heads {
        for (i, norm) in norms.iter_mut().enumerate() {
            let row = &output.data()[(h * n + i) * dv..(h * n + i + 1) * dv];
            *norm += row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        }
    }
    norms
}

/// Mean of `norms` along the other axis, one value per position on `axis`.
fn axis_track(norms: &[f64], height: usize, width: usize, axis: Axis) -> Vec<f64> {
    match axis {
        Axis::H => (0..height)
            .map(|r| norms[r * width..(r + 1) * width].iter().sum::<f64>() / width as f64)
            .collect(),
        Axis::W => (0..width)
            .map(|c| (0..height).map(|r| norms[r * width + c]).sum::<f64>() / height as f64)
            .collect(),
    }
}

/// `cos(theta_k p)` for `p` in `0..length`: the encoding a single frequency
/// contributes along one axis.
pub fn dominant_track(schedule: &FrequencySchedule, index: usize, length: usize) -> Vec<f64> {
    let theta = schedule.freqs[index];
    (0..length).map(|p| (theta * p as f64).cos()).collect()
}

/// Normalized circular autocorrelation at `lag`.
pub fn repetition_score(values: &[f64], lag: usize) -> Result<f64> {
    let n = values.len();
    if lag == 0 || lag >= n {
        return Err(Error::Argument(format!("lag {lag} must lie in 1..{n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let energy: f64 = centered.iter().map(|c| c * c).sum();
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if energy <= (1e-24 * scale * scale) * n as f64 {
        return Err(Error::UndefinedScore("sequence is constant".into()));
    }
    let cross: f64 = (0..n).map(|i| centered[i] * centered[(i + lag) % n]).sum();
    Ok((cross / energy).clamp(-1.0, 1.0))
}

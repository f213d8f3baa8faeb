//! Dense reference implementations. Quadratic memory, `f64` throughout.

use crate::attention::{AttentionInputs, EntropyReport};
use crate::error::{Error, Result};
use crate::rope::FrequencySchedule;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest token count the dense oracle will materialize.
pub const DENSE_CAP: usize = 4096;

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        return Err(Error::Size {
            what: "dense attention rows".into(),
            actual: n,
            limit: cap,
        });
    }
    Ok(())
}

/// Row-stochastic `softmax(lambda * Q K^T / sqrt(D))` for one head.
pub fn dense_probabilities<T: Scalar>(inputs: &AttentionInputs<T>, head: usize, lambda: f64) -> Vec<Vec<f64>> {
    let n = inputs.tokens();
    let d = inputs.head_dim();
    let q = &inputs.q().data()[head * n * d..(head + 1) * n * d];
    let k = &inputs.k().data()[head * n * d..(head + 1) * n * d];
    let scale = lambda / (d as f64).sqrt();
    (0..n)
        .map(|i| {
            let qi = &q[i * d..(i + 1) * d];
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let kj = &k[j * d..(j + 1) * d];
                    scale * qi.iter().zip(kj).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>()
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        })
        .collect()
}

pub fn naive_attention<T: Scalar>(inputs: &AttentionInputs<T>, lambdas: &[f64]) -> Result<Tensor<f64>> {
    naive_attention_with_cap(inputs, lambdas, DENSE_CAP)
}

pub fn naive_attention_with_cap<T: Scalar>(
    inputs: &AttentionInputs<T>,
    lambdas: &[f64],
    cap: usize,
) -> Result<Tensor<f64>> {
    let (heads, n, dv) = (inputs.heads(), inputs.tokens(), inputs.value_dim());
    check_cap(n, cap)?;
    if lambdas.len() != heads {
        return Err(Error::Argument(format!("{} lambdas for {heads} heads", lambdas.len())));
    }
    let v = inputs.v().data();
    let mut out = vec![0.0; heads * n * dv];
    for (head, &lambda) in lambdas.iter().enumerate() {
        let p = dense_probabilities(inputs, head, lambda);
        let v_head = &v[head * n * dv..(head + 1) * n * dv];
        for (i, row) in p.iter().enumerate() {
            let dst = &mut out[(head * n + i) * dv..(head * n + i + 1) * dv];
            for (j, &pij) in row.iter().enumerate() {
                for (o, x) in dst.iter_mut().zip(&v_head[j * dv..(j + 1) * dv]) {
                    *o += pij * x.as_f64();
                }
            }
        }
    }
    Tensor::new(vec![heads, n, dv], out)
}

/// Mean over query rows of `-sum_j P_ij ln P_ij`, with `0 ln 0 = 0`.
pub fn naive_entropy<T: Scalar>(inputs: &AttentionInputs<T>) -> Result<EntropyReport> {
    naive_entropy_with_cap(inputs, DENSE_CAP)
}

pub fn naive_entropy_with_cap<T: Scalar>(inputs: &AttentionInputs<T>, cap: usize) -> Result<EntropyReport> {
    let n = inputs.tokens();
    check_cap(n, cap)?;
    let per_head = (0..inputs.heads())
        .map(|head| {
            let total: f64 = dense_probabilities(inputs, head, 1.0)
                .iter()
                .map(|row| {
                    -row.iter()
                        .filter(|&&p| p > 0.0)
                        .map(|&p| p * p.ln())
                        .sum::<f64>()
                })
                .sum();
            total / n as f64
        })
        .collect();
    EntropyReport::from_per_head(per_head)
}

/// Block-diagonal rotation matrix, row-major `[d, d]`.
pub fn dense_rope_matrix(schedule: &FrequencySchedule, position: f64) -> Tensor<f64> {
    let d = 2 * schedule.len();
    let mut m = vec![0.0; d * d];
    for (j, &theta) in schedule.freqs.iter().enumerate() {
        let (s, c) = (position * theta).sin_cos();
        let (r0, r1) = (2 * j, 2 * j + 1);
        m[r0 * d + r0] = c;
        m[r0 * d + r1] = -s;
        m[r1 * d + r0] = s;
        m[r1 * d + r1] = c;
    }
    Tensor::new(vec![d, d], m).expect("square matrix")
}

pub fn mat_vec(m: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let d = m.shape()[1];
    m.data().chunks(d).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

//! Hybrid token-time event embeddings.
//!
//! An event `(code, t, delta, value)` embeds as the sum of a learnable
//! concept row, a parameter-free sinusoidal encoding of absolute time, a
//! learnable table row indexed by the log-spaced bucket of the relative
//! delta, and (when metadata is present) an affine projection of the scalar
//! value. Missing metadata contributes the zero vector so that additivity
//! is exact.

use crate::error::{Error, Result};
use crate::numeric::{NodeId, ParamBinding, ParamSet, Tape, Tensor};

/// Sinusoidal encoding of absolute time: pairs `(sin(w_k t), cos(w_k t))`
/// for `k = 0..d/2-1` with `w_k = 10000^(-2k/d)`. Squared norm is `d/2`.
pub fn sinusoidal_time(t: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal width must be even and positive, got {d}"
        )));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Validation(format!(
            "time must be finite and nonnegative, got {t}"
        )));
    }
    let mut out = Vec::with_capacity(d);
    for k in 0..d / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / d as f64);
        let (s, c) = (omega * t).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Log-spaced bucket for a relative delta:
/// `min(n_buckets - 1, floor(log2(1 + dt)))`; monotone nondecreasing in dt.
pub fn delta_bucket(dt: f64, n_buckets: usize) -> Result<usize> {
    if !dt.is_finite() || dt < 0.0 {
        return Err(Error::Validation(format!(
            "delta must be finite and nonnegative, got {dt}"
        )));
    }
    debug_assert!(n_buckets >= 2);
    let b = (1.0 + dt).log2().floor() as usize;
    Ok(b.min(n_buckets - 1))
}

/// Slot ids of the embedding parameter tensors inside a [`ParamSet`]:
/// concept table (V x d), delta table (B x d), metadata affine (1 x d each).
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSlots {
    pub concept: usize,
    pub delta: usize,
    pub meta_w: usize,
    pub meta_b: usize,
}

/// Plain (non-tape) embedding of a single event, for direct inspection.
pub fn embed_event(
    concept: &Tensor,
    delta_table: &Tensor,
    meta_w: &Tensor,
    meta_b: &Tensor,
    code: usize,
    t: f64,
    dt: f64,
    value: Option<f64>,
    use_temporal: bool,
) -> Result<Vec<f64>> {
    if code >= concept.rows {
        return Err(Error::Validation(format!(
            "code {code} outside vocabulary of size {}",
            concept.rows
        )));
    }
    let d = concept.cols;
    let mut out = vec![0.0; d];
    for j in 0..d {
        out[j] += concept.get(code, j);
    }
    if use_temporal {
        let pe = sinusoidal_time(t, d)?;
        let bucket = delta_bucket(dt, delta_table.rows)?;
        for j in 0..d {
            out[j] += pe[j] + delta_table.get(bucket, j);
        }
    }
    if let Some(v) = value {
        for j in 0..d {
            out[j] += v * meta_w.get(0, j) + meta_b.get(0, j);
        }
    }
    Ok(out)
}

/// Differentiable embedding of a whole event sequence: returns an `n x d`
/// tape node. `codes` may already include MASK/random corruption.
#[allow(clippy::too_many_arguments)]
pub fn embed_sequence_node(
    tape: &mut Tape,
    binding: &mut ParamBinding,
    params: &ParamSet,
    slots: &EmbeddingSlots,
    codes: &[usize],
    times: &[f64],
    deltas: &[f64],
    values: &[Option<f64>],
    use_temporal: bool,
) -> Result<NodeId> {
    let n = codes.len();
    debug_assert!(n > 0);
    debug_assert_eq!(times.len(), n);
    debug_assert_eq!(deltas.len(), n);
    debug_assert_eq!(values.len(), n);

    let concept = binding.node(tape, params, slots.concept);
    let (vocab_size, d) = tape.shape(concept);
    if let Some(&bad) = codes.iter().find(|&&c| c >= vocab_size) {
        return Err(Error::Validation(format!(
            "code {bad} outside vocabulary of size {vocab_size}"
        )));
    }
    let mut x = tape.gather_rows(concept, codes)?;

    if use_temporal {
        let mut pe = Vec::with_capacity(n * d);
        for &t in times {
            pe.extend(sinusoidal_time(t, d)?);
        }
        let pe_node = tape.constant(n, d, pe);
        x = tape.add(x, pe_node)?;

        let delta_table = binding.node(tape, params, slots.delta);
        let (n_buckets, _) = tape.shape(delta_table);
        let buckets: Vec<usize> = deltas
            .iter()
            .map(|&dt| delta_bucket(dt, n_buckets))
            .collect::<Result<_>>()?;
        let delta_rows = tape.gather_rows(delta_table, &buckets)?;
        x = tape.add(x, delta_rows)?;
    }

    // metadata: value column (zeros when absent) times w, plus presence times b
    let has_meta = values.iter().any(Option::is_some);
    if has_meta {
        let val_col: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
        let presence: Vec<f64> = values
            .iter()
            .map(|v| if v.is_some() { 1.0 } else { 0.0 })
            .collect();
        let val_node = tape.constant(n, 1, val_col);
        let pres_node = tape.constant(n, 1, presence);
        let w = binding.node(tape, params, slots.meta_w);
        let b = binding.node(tape, params, slots.meta_b);
        let scaled = tape.matmul(val_node, w)?;
        let offset = tape.matmul(pres_node, b)?;
        x = tape.add(x, scaled)?;
        x = tape.add(x, offset)?;
    }
    Ok(x)
}

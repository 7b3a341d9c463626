//! Two-level attention with continuous-time bias kernels and instrumented
//! score-space multiply-accumulate counters.
//!
//! Attention scores between tokens i and j are `(Q_i K_j + phi(t_i, t_j)) /
//! sqrt(d_h)` per head: the temporal bias is added before the joint scaling.
//! Multi-head projections are stored per head (`W_Q/W_K/W_V` of `d x d_h`,
//! `W_O` of `d_h x d`) and the head outputs are projected and summed, which
//! is algebraically the usual concat-then-project. The Gaussian kernel's
//! temporal scale is learnable per head through a softplus parameterization;
//! the rotary kernel is the parameter-free inner product of sinusoidal
//! features and depends only on the time difference.
//!
//! The op counter counts one multiply-accumulate per (query, key, channel)
//! triple of the score computation, summed over heads: `n_q * n_k * d` per
//! attention call.

use crate::embeddings::sinusoidal_time;
use crate::error::{Error, Result};
use crate::numeric::{NodeId, Tape};
use serde::{Deserialize, Serialize};

/// Which temporal bias kernel attention applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    None,
    Gaussian,
    Rotary,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelKind::None => write!(f, "none"),
            KernelKind::Gaussian => write!(f, "gaussian"),
            KernelKind::Rotary => write!(f, "rotary"),
        }
    }
}

/// Resolved bias kernel for the scalar [`temporal_bias`] op.
#[derive(Debug, Clone)]
pub enum BiasKernel {
    None,
    /// `phi = -(t_i - t_j)^2 / (2 sigma^2)`, sigma > 0.
    Gaussian { sigma: f64 },
    /// `phi = <RoPE(t_i), RoPE(t_j)>` over `width` sinusoidal channels.
    Rotary { width: usize },
}

/// Sinusoidal rotary features of a timestamp (same frequency schedule as the
/// absolute-time embedding, over `width` channels).
pub fn rotary_features(t: f64, width: usize) -> Result<Vec<f64>> {
    sinusoidal_time(t, width)
}

/// Temporal bias between two timestamps.
pub fn temporal_bias(t_i: f64, t_j: f64, kernel: &BiasKernel) -> Result<f64> {
    match *kernel {
        BiasKernel::None => Ok(0.0),
        BiasKernel::Gaussian { sigma } => {
            if !(sigma > 0.0) {
                return Err(Error::Config(format!("gaussian sigma must be > 0, got {sigma}")));
            }
            let delta = t_i - t_j;
            Ok(-(delta * delta) / (2.0 * sigma * sigma))
        }
        BiasKernel::Rotary { width } => {
            let a = rotary_features(t_i, width)?;
            let b = rotary_features(t_j, width)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
        }
    }
}

/// Kernel configuration threaded through tape-level attention.
#[derive(Debug, Clone, Copy)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub rotary_width: usize,
}

/// Tape nodes of one attention head's parameters. `sigma_raw` is the 1 x 1
/// pre-softplus temporal scale, present only for the Gaussian kernel.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub sigma_raw: Option<NodeId>,
}

/// Tape nodes of one pre-norm encoder layer.
#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub heads: Vec<HeadNodes>,
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub ff_w1: NodeId,
    pub ff_b1: NodeId,
    pub ff_w2: NodeId,
    pub ff_b2: NodeId,
}

/// Which level of the hierarchy a trace entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Intra,
    Inter,
    Flat,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Intra => write!(f, "intra"),
            Level::Inter => write!(f, "inter"),
            Level::Flat => write!(f, "flat"),
        }
    }
}

/// One recorded attention matrix (row-major `rows x rows`).
#[derive(Debug, Clone)]
pub struct TraceMatrix {
    pub level: Level,
    pub layer: usize,
    pub head: usize,
    pub bin: Option<usize>,
    pub rows: usize,
    pub weights: Vec<f64>,
}

impl TraceMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.rows..(i + 1) * self.rows]
    }
}

/// Whether forward passes snapshot attention matrices (counters always run).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Off,
    Weights,
}

/// Recorded attention matrices plus score-space MAC counters, total and per
/// (level, layer).
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub matrices: Vec<TraceMatrix>,
    pub score_macs: u64,
    per_layer: Vec<(Level, usize, u64)>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        AttentionTrace::default()
    }

    fn add_macs(&mut self, level: Level, layer: usize, macs: u64) {
        self.score_macs += macs;
        if let Some(entry) = self
            .per_layer
            .iter_mut()
            .find(|(l, i, _)| *l == level && *i == layer)
        {
            entry.2 += macs;
        } else {
            self.per_layer.push((level, layer, macs));
        }
    }

    /// Counter hook for flat-stack forward passes (model module).
    pub fn add_flat_macs(&mut self, layer: usize, macs: u64) {
        self.add_macs(Level::Flat, layer, macs);
    }

    pub fn layer_macs(&self, level: Level, layer: usize) -> u64 {
        self.per_layer
            .iter()
            .find(|(l, i, _)| *l == level && *i == layer)
            .map(|(_, _, m)| *m)
            .unwrap_or(0)
    }

    pub fn per_layer_macs(&self) -> &[(Level, usize, u64)] {
        &self.per_layer
    }

    /// Matrices recorded for a given level.
    pub fn at_level(&self, level: Level) -> impl Iterator<Item = &TraceMatrix> {
        self.matrices.iter().filter(move |m| m.level == level)
    }
}

/// Analytic score-MAC counts for one local+global layer pair (hierarchical)
/// versus one full-attention layer over all `T*E` tokens (flat).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub hierarchical: u64,
    pub flat: u64,
}

pub fn count_ops(t: usize, e: usize, d: usize) -> OpCount {
    let (t, e, d) = (t as u64, e as u64, d as u64);
    OpCount {
        hierarchical: t * e * e * d + t * t * d,
        flat: (t * e) * (t * e) * d,
    }
}

/// Squared time differences as a constant bias-precursor matrix.
fn delta_sq_matrix(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = times[i] - times[j];
            out[i * n + j] = d * d;
        }
    }
    out
}

fn rotary_bias_matrix(times: &[f64], width: usize) -> Result<Vec<f64>> {
    let n = times.len();
    let feats: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| rotary_features(t, width))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = feats[i].iter().zip(&feats[j]).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Multi-head biased self-attention over `x` (`n x d`).
///
/// Scores per head are `(Q K^T + Phi) / sqrt(d_h)`; masked key positions
/// (`mask[j] == true`) are excluded before the softmax. Returns the combined
/// head outputs (`n x d`), the per-head attention weight nodes, and the
/// score-MAC count (`n * n * d`).
pub fn biased_attention(
    tape: &mut Tape,
    x: NodeId,
    times: &[f64],
    kernel: &KernelSpec,
    heads: &[HeadNodes],
    mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<NodeId>, u64)> {
    let (n, _d) = tape.shape(x);
    if n != times.len() {
        return Err(Error::Validation(format!(
            "attention over {n} tokens got {} timestamps",
            times.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Validation(format!(
                "attention over {n} tokens got {} mask flags",
                m.len()
            )));
        }
        if m.iter().all(|&b| b) {
            return Err(Error::EmptyAttentionRow { row: 0 });
        }
    }

    let bias_precursor = match kernel.kind {
        KernelKind::None => None,
        KernelKind::Gaussian => Some(tape.constant(n, n, delta_sq_matrix(times))),
        KernelKind::Rotary => Some(tape.constant(n, n, rotary_bias_matrix(times, kernel.rotary_width)?)),
    };

    let mut combined: Option<NodeId> = None;
    let mut weight_nodes = Vec::with_capacity(heads.len());
    let mut macs = 0u64;
    for head in heads {
        let (_, dh) = tape.shape(head.wq);
        let q = tape.matmul(x, head.wq)?;
        let k = tape.matmul(x, head.wk)?;
        let v = tape.matmul(x, head.wv)?;
        let mut scores = tape.matmul_nt(q, k)?;
        macs += (n * n * dh) as u64;

        match kernel.kind {
            KernelKind::None => {}
            KernelKind::Gaussian => {
                let sigma_raw = head.sigma_raw.ok_or_else(|| {
                    Error::Config("gaussian kernel requires a sigma parameter per head".into())
                })?;
                let sigma = tape.softplus(sigma_raw);
                let sigma_sq = tape.hadamard(sigma, sigma)?;
                let inv = tape.recip(sigma_sq);
                let half_inv = tape.scale(inv, -0.5);
                let phi = tape.scalar_mul(half_inv, bias_precursor.unwrap())?;
                scores = tape.add(scores, phi)?;
            }
            KernelKind::Rotary => {
                scores = tape.add(scores, bias_precursor.unwrap())?;
            }
        }

        scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.mask_cols(scores, m)?;
        }
        let weights = tape.softmax_rows(scores)?;
        weight_nodes.push(weights);
        let ctx = tape.matmul(weights, v)?;
        let proj = tape.matmul(ctx, head.wo)?;
        combined = Some(match combined {
            None => proj,
            Some(acc) => tape.add(acc, proj)?,
        });
    }
    Ok((combined.expect("at least one head"), weight_nodes, macs))
}

/// One pre-norm transformer layer: biased attention and a position-wise
/// 2-layer feed-forward, each behind layer normalization with a residual.
pub fn encoder_layer(
    tape: &mut Tape,
    x: NodeId,
    times: &[f64],
    kernel: &KernelSpec,
    layer: &LayerNodes,
    mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<NodeId>, u64)> {
    let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
    let (attn, weights, macs) = biased_attention(tape, normed, times, kernel, &layer.heads, mask)?;
    let h = tape.add(x, attn)?;

    let normed2 = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias)?;
    let pre = tape.matmul(normed2, layer.ff_w1)?;
    let pre = tape.add_row(pre, layer.ff_b1)?;
    let act = tape.silu(pre);
    let ff = tape.matmul(act, layer.ff_w2)?;
    let ff = tape.add_row(ff, layer.ff_b2)?;
    let out = tape.add(h, ff)?;
    Ok((out, weights, macs))
}

/// Apply the local encoder stack within each bin independently (no cross-bin
/// leakage) and record per-bin alpha matrices.
#[allow(clippy::too_many_arguments)]
pub fn intra_bin_attention(
    tape: &mut Tape,
    bin_inputs: &[NodeId],
    bin_times: &[Vec<f64>],
    kernel: &KernelSpec,
    layers: &[LayerNodes],
    trace: &mut AttentionTrace,
    mode: TraceMode,
) -> Result<Vec<NodeId>> {
    debug_assert_eq!(bin_inputs.len(), bin_times.len());
    let mut outputs = Vec::with_capacity(bin_inputs.len());
    for (b, (&x0, times)) in bin_inputs.iter().zip(bin_times).enumerate() {
        if times.is_empty() {
            return Err(Error::Validation(format!("intra-bin attention over empty bin {b}")));
        }
        let mut x = x0;
        for (li, layer) in layers.iter().enumerate() {
            let (out, weights, macs) = encoder_layer(tape, x, times, kernel, layer, None)?;
            trace.add_macs(Level::Intra, li, macs);
            if mode == TraceMode::Weights {
                for (hi, w) in weights.iter().enumerate() {
                    trace.matrices.push(TraceMatrix {
                        level: Level::Intra,
                        layer: li,
                        head: hi,
                        bin: Some(b),
                        rows: times.len(),
                        weights: tape.values(*w).to_vec(),
                    });
                }
            }
            x = out;
        }
        outputs.push(x);
    }
    Ok(outputs)
}

/// Apply the global encoder stack over bin summaries using bin reference
/// times for the bias; records beta matrices.
pub fn inter_bin_attention(
    tape: &mut Tape,
    summaries: NodeId,
    reference_times: &[f64],
    kernel: &KernelSpec,
    layers: &[LayerNodes],
    trace: &mut AttentionTrace,
    mode: TraceMode,
) -> Result<NodeId> {
    let (t, _) = tape.shape(summaries);
    if t != reference_times.len() {
        return Err(Error::Validation(format!(
            "{t} summaries vs {} reference times",
            reference_times.len()
        )));
    }
    let mut x = summaries;
    for (li, layer) in layers.iter().enumerate() {
        let (out, weights, macs) = encoder_layer(tape, x, reference_times, kernel, layer, None)?;
        trace.add_macs(Level::Inter, li, macs);
        if mode == TraceMode::Weights {
            for (hi, w) in weights.iter().enumerate() {
                trace.matrices.push(TraceMatrix {
                    level: Level::Inter,
                    layer: li,
                    head: hi,
                    bin: None,
                    rows: t,
                    weights: tape.values(*w).to_vec(),
                });
            }
        }
        x = out;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::CounterRng;
    use crate::numeric::{ParamBinding, ParamSet, Tensor};

    #[test]
    fn gaussian_bias_zero_at_equal_times() {
        let k = BiasKernel::Gaussian { sigma: 5.0 };
        assert_eq!(temporal_bias(7.0, 7.0, &k).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_bias_minus_half_at_one_sigma() {
        let k = BiasKernel::Gaussian { sigma: 3.0 };
        let phi = temporal_bias(10.0, 7.0, &k).unwrap();
        assert!((phi + 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_bias_symmetric_and_nonpositive() {
        let k = BiasKernel::Gaussian { sigma: 2.0 };
        let mut rng = CounterRng::new(1);
        for _ in 0..100 {
            let a = rng.range_f64(0.0, 100.0);
            let b = rng.range_f64(0.0, 100.0);
            let ab = temporal_bias(a, b, &k).unwrap();
            assert_eq!(ab, temporal_bias(b, a, &k).unwrap());
            assert!(ab <= 0.0);
        }
    }

    #[test]
    fn rotary_self_bias_is_half_width() {
        let k = BiasKernel::Rotary { width: 16 };
        let phi = temporal_bias(42.0, 42.0, &k).unwrap();
        assert!((phi - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rotary_bias_shift_invariant() {
        let k = BiasKernel::Rotary { width: 16 };
        let mut rng = CounterRng::new(2);
        for _ in 0..100 {
            let t_i = rng.range_f64(0.0, 500.0);
            let t_j = rng.range_f64(0.0, 500.0);
            let c = rng.range_f64(0.0, 1e4);
            let base = temporal_bias(t_i, t_j, &k).unwrap();
            let shifted = temporal_bias(t_i + c, t_j + c, &k).unwrap();
            assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
        }
    }

    fn identity_head(tape: &mut Tape, d: usize, sigma_raw: Option<f64>) -> HeadNodes {
        let mut eye = Tensor::zeros(d, d);
        for i in 0..d {
            eye.set(i, i, 1.0);
        }
        let zero = Tensor::zeros(d, d);
        HeadNodes {
            wq: tape.leaf(&zero),
            wk: tape.leaf(&zero),
            wv: tape.leaf(&eye),
            wo: tape.leaf(&eye),
            sigma_raw: sigma_raw.map(|s| {
                // raw such that softplus(raw) = s
                let raw = (s.exp() - 1.0).ln();
                tape.constant_scalar(raw)
            }),
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, vec![3.0, -1.0]);
        let head = identity_head(&mut tape, 2, None);
        let spec = KernelSpec {
            kind: KernelKind::None,
            rotary_width: 2,
        };
        let (out, weights, _) = biased_attention(&mut tape, x, &[5.0], &spec, &[head], None).unwrap();
        assert_eq!(tape.values(weights[0]), &[1.0]);
        assert_eq!(tape.values(out), &[3.0, -1.0]);
    }

    #[test]
    fn zero_projections_give_uniform_weights() {
        let mut tape = Tape::new();
        let x = tape.constant(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let head = identity_head(&mut tape, 2, None);
        let spec = KernelSpec {
            kind: KernelKind::None,
            rotary_width: 2,
        };
        let (_, weights, _) =
            biased_attention(&mut tape, x, &[0.0, 1.0, 2.0], &spec, &[head], None).unwrap();
        for &w in tape.values(weights[0]) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    /// With zero content projections and unit head width the biased weights
    /// reduce to a scalar softmax over the Gaussian bias values.
    #[test]
    fn gaussian_weights_match_scalar_softmax_oracle() {
        let mut tape = Tape::new();
        let x = tape.constant(3, 1, vec![1.0, 2.0, 3.0]);
        let head = identity_head(&mut tape, 1, Some(1.0));
        let spec = KernelSpec {
            kind: KernelKind::Gaussian,
            rotary_width: 2,
        };
        let times = [0.0, 1.0, 10.0];
        let (_, weights, _) = biased_attention(&mut tape, x, &times, &spec, &[head], None).unwrap();

        // oracle: phi row 0 = [0, -0.5, -50], d_h = 1 so scaling is 1
        let phis = [0.0f64, -0.5, -50.0];
        let z: f64 = phis.iter().map(|p| p.exp()).sum();
        let row0 = &tape.values(weights[0])[0..3];
        for (w, p) in row0.iter().zip(&phis) {
            assert!((w - p.exp() / z).abs() < 1e-12, "{w} vs {}", p.exp() / z);
        }
    }

    #[test]
    fn gaussian_locality_weights_decrease_with_distance() {
        // content zeroed: weight strictly decreasing in |t_i - t_j|
        let mut rng = CounterRng::new(12);
        for _ in 0..100 {
            let n = 4 + rng.range_usize(4);
            let mut times: Vec<f64> = (0..n).map(|_| rng.range_f64(0.0, 200.0)).collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            times.dedup_by(|a, b| (*a - *b).abs() < 1.0);
            let n = times.len();
            let mut tape = Tape::new();
            let x = tape.constant(n, 1, vec![1.0; n]);
            let head = identity_head(&mut tape, 1, Some(30.0));
            let spec = KernelSpec {
                kind: KernelKind::Gaussian,
                rotary_width: 2,
            };
            let (_, weights, _) =
                biased_attention(&mut tape, x, &times, &spec, &[head], None).unwrap();
            let w = tape.values(weights[0]);
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        let di = (times[i] - times[j]).abs();
                        let dl = (times[i] - times[l]).abs();
                        if di + 1e-9 < dl {
                            assert!(
                                w[i * n + j] > w[i * n + l],
                                "row {i}: |dt|={di} weight {} vs |dt|={dl} weight {}",
                                w[i * n + j],
                                w[i * n + l]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn fully_masked_attention_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let head = identity_head(&mut tape, 2, None);
        let spec = KernelSpec {
            kind: KernelKind::None,
            rotary_width: 2,
        };
        let err = biased_attention(&mut tape, x, &[0.0, 1.0], &spec, &[head], Some(&[true, true]));
        assert!(matches!(err, Err(Error::EmptyAttentionRow { .. })));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(3, 2, vec![1.0; 6]);
        let head = identity_head(&mut tape, 2, None);
        let spec = KernelSpec {
            kind: KernelKind::None,
            rotary_width: 2,
        };
        let (_, weights, _) = biased_attention(
            &mut tape,
            x,
            &[0.0, 1.0, 2.0],
            &spec,
            &[head],
            Some(&[false, true, false]),
        )
        .unwrap();
        let w = tape.values(weights[0]);
        for i in 0..3 {
            assert_eq!(w[i * 3 + 1], 0.0);
            assert!((w[i * 3] + w[i * 3 + 2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_gradient_nonzero_on_distinct_times() {
        let mut params = ParamSet::new();
        let sigma_slot = params.add(
            "sigma_raw",
            Tensor::from_vec(1, 1, vec![(24f64.exp() - 1.0).ln()]),
        );
        let x_vals = Tensor::from_vec(3, 2, vec![0.5, -0.2, 0.3, 0.8, -0.6, 0.1]);
        let wv = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let mut binding = ParamBinding::for_params(&params);
        let x = tape.leaf(&x_vals);
        let zero = Tensor::zeros(2, 2);
        let head = HeadNodes {
            wq: tape.leaf(&zero),
            wk: tape.leaf(&zero),
            wv: tape.leaf(&wv),
            wo: tape.leaf(&wv),
            sigma_raw: Some(binding.node(&mut tape, &params, sigma_slot)),
        };
        let spec = KernelSpec {
            kind: KernelKind::Gaussian,
            rotary_width: 2,
        };
        let (out, _, _) =
            biased_attention(&mut tape, x, &[0.0, 12.0, 40.0], &spec, &[head], None).unwrap();
        let sq = tape.hadamard(out, out).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let sigma_grad = grads.of(binding.node_of(sigma_slot).unwrap())[0];
        assert!(sigma_grad.abs() > 1e-12, "sigma grad {sigma_grad}");
    }

    #[test]
    fn count_ops_matches_hand_values() {
        let c = count_ops(4, 3, 1);
        assert_eq!(c.hierarchical, 52);
        assert_eq!(c.flat, 144);

        // degenerate single-event bins: the global level already costs the
        // full T^2 d, so the hierarchy only adds the T*d local overhead
        let c1 = count_ops(7, 1, 8);
        assert_eq!(c1.hierarchical, c1.flat + 7 * 8);

        // T=100, E=10, d=64 ratio 0.02
        let c2 = count_ops(100, 10, 64);
        assert!((c2.hierarchical as f64 / c2.flat as f64 - 0.02).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_cheaper_whenever_bins_help() {
        // strict saving requires at least two events per bin: for E = 1 the
        // local level is pure overhead on top of the unchanged global cost
        let mut rng = CounterRng::new(3);
        for _ in 0..100 {
            let t = 2 + rng.range_usize(40);
            let e = 2 + rng.range_usize(19);
            let d = 1 + rng.range_usize(64);
            let c = count_ops(t, e, d);
            assert!(c.hierarchical < c.flat, "T={t} E={e} d={d}");
        }
    }

    fn random_leaf(tape: &mut Tape, rng: &mut CounterRng, r: usize, c: usize, scale: f64) -> NodeId {
        let t = Tensor::from_vec(r, c, (0..r * c).map(|_| rng.symmetric(scale)).collect());
        tape.leaf(&t)
    }

    fn random_layer(tape: &mut Tape, rng: &mut CounterRng, d: usize, heads: usize) -> LayerNodes {
        let dh = d / heads;
        let head_nodes: Vec<HeadNodes> = (0..heads)
            .map(|_| HeadNodes {
                wq: random_leaf(tape, rng, d, dh, 0.4),
                wk: random_leaf(tape, rng, d, dh, 0.4),
                wv: random_leaf(tape, rng, d, dh, 0.4),
                wo: random_leaf(tape, rng, dh, d, 0.4),
                sigma_raw: None,
            })
            .collect();
        let ones = Tensor::filled(1, d, 1.0);
        let zeros = Tensor::zeros(1, d);
        LayerNodes {
            heads: head_nodes,
            ln1_gain: tape.leaf(&ones),
            ln1_bias: tape.leaf(&zeros),
            ln2_gain: tape.leaf(&ones),
            ln2_bias: tape.leaf(&zeros),
            ff_w1: random_leaf(tape, rng, d, 4 * d, 0.3),
            ff_b1: tape.leaf(&Tensor::zeros(1, 4 * d)),
            ff_w2: random_leaf(tape, rng, 4 * d, d, 0.3),
            ff_b2: tape.leaf(&Tensor::zeros(1, d)),
        }
    }

    #[test]
    fn intra_bin_has_no_cross_bin_leakage() {
        let d = 4;
        let spec = KernelSpec {
            kind: KernelKind::None,
            rotary_width: 4,
        };
        let run = |bin2_first: f64| -> Vec<f64> {
            let mut rng = CounterRng::new(55);
            let mut tape = Tape::new();
            let layer = random_layer(&mut tape, &mut rng, d, 2);
            let bin1 = tape.constant(2, d, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
            let bin2 = tape.constant(2, d, vec![bin2_first, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2]);
            let mut trace = AttentionTrace::new();
            let outs = intra_bin_attention(
                &mut tape,
                &[bin1, bin2],
                &[vec![0.0, 1.0], vec![25.0, 26.0]],
                &spec,
                &[layer],
                &mut trace,
                TraceMode::Off,
            )
            .unwrap();
            tape.values(outs[0]).to_vec()
        };
        // changing an event in bin 2 leaves bin-1 outputs bit-identical
        assert_eq!(run(9.0), run(-3.0));
    }

    #[test]
    fn permuting_identical_events_preserves_output_multiset() {
        let d = 4;
        let spec = KernelSpec {
            kind: KernelKind::None,
            rotary_width: 4,
        };
        let mut rng = CounterRng::new(66);
        let mut tape = Tape::new();
        let layer = random_layer(&mut tape, &mut rng, d, 2);
        // two identical events (same embedding row, same time) plus one other
        let row = [0.3, -0.2, 0.5, 0.1];
        let other = [0.9, 0.0, -0.4, 0.2];
        let a = tape.constant(
            3,
            d,
            [row.as_slice(), row.as_slice(), other.as_slice()].concat(),
        );
        let b = tape.constant(
            3,
            d,
            [row.as_slice(), other.as_slice(), row.as_slice()].concat(),
        );
        let mut trace = AttentionTrace::new();
        let out_a = intra_bin_attention(
            &mut tape,
            &[a],
            &[vec![5.0, 5.0, 7.0]],
            &spec,
            std::slice::from_ref(&layer),
            &mut trace,
            TraceMode::Off,
        )
        .unwrap();
        let out_b = intra_bin_attention(
            &mut tape,
            &[b],
            &[vec![5.0, 7.0, 5.0]],
            &spec,
            std::slice::from_ref(&layer),
            &mut trace,
            TraceMode::Off,
        )
        .unwrap();
        let va = tape.values(out_a[0]).to_vec();
        let vb = tape.values(out_b[0]).to_vec();
        // rows 0,1,2 of a correspond to rows 0,2,1 of b
        assert_eq!(&va[0..d], &vb[0..d]);
        assert_eq!(&va[d..2 * d], &vb[2 * d..3 * d]);
        assert_eq!(&va[2 * d..3 * d], &vb[d..2 * d]);
    }

    #[test]
    fn inter_bin_single_summary_passes_through() {
        let d = 4;
        let spec = KernelSpec {
            kind: KernelKind::None,
            rotary_width: 4,
        };
        let mut rng = CounterRng::new(77);
        let mut tape = Tape::new();
        let layer = random_layer(&mut tape, &mut rng, d, 2);
        let g = tape.constant(1, d, vec![0.4, -0.3, 0.2, 0.9]);
        let mut trace = AttentionTrace::new();
        let out = inter_bin_attention(
            &mut tape,
            g,
            &[12.0],
            &spec,
            &[layer],
            &mut trace,
            TraceMode::Weights,
        )
        .unwrap();
        let beta = trace.at_level(Level::Inter).next().unwrap();
        assert_eq!(beta.weights, vec![1.0]);
        assert_eq!(tape.values(out).len(), d);
    }

    #[test]
    fn inter_bin_two_summaries_match_scalar_softmax_oracle() {
        // hand-set single-head Q,K at d=1: beta from a 2x2 scalar softmax
        let mut tape = Tape::new();
        let g = tape.constant(2, 1, vec![1.0, 2.0]);
        let one = Tensor::from_vec(1, 1, vec![1.0]);
        let head = HeadNodes {
            wq: tape.leaf(&one),
            wk: tape.leaf(&one),
            wv: tape.leaf(&one),
            wo: tape.leaf(&one),
            sigma_raw: None,
        };
        let spec = KernelSpec {
            kind: KernelKind::None,
            rotary_width: 2,
        };
        let (_, weights, _) = biased_attention(&mut tape, g, &[0.0, 24.0], &spec, &[head], None).unwrap();
        let w = tape.values(weights[0]);
        // row 0: scores [1*1, 1*2] = [1, 2]; softmax([1,2])
        let z = 1f64.exp() + 2f64.exp();
        assert!((w[0] - 1f64.exp() / z).abs() < 1e-12);
        assert!((w[1] - 2f64.exp() / z).abs() < 1e-12);
        // row 1: scores [2, 4]
        let z2 = 2f64.exp() + 4f64.exp();
        assert!((w[2] - 2f64.exp() / z2).abs() < 1e-12);
        assert!((w[3] - 4f64.exp() / z2).abs() < 1e-12);
    }

    #[test]
    fn trace_rows_are_stochastic_and_counters_analytic() {
        // full bins: T bins of exactly E events, one local + one global layer
        let (t_bins, e, d, heads) = (4usize, 3usize, 8usize, 2usize);
        let spec = KernelSpec {
            kind: KernelKind::Rotary,
            rotary_width: 4,
        };
        let mut rng = CounterRng::new(91);
        let mut tape = Tape::new();
        let local = random_layer(&mut tape, &mut rng, d, heads);
        let global = random_layer(&mut tape, &mut rng, d, heads);
        let mut bin_inputs = Vec::new();
        let mut bin_times = Vec::new();
        for b in 0..t_bins {
            let vals: Vec<f64> = (0..e * d).map(|_| rng.symmetric(1.0)).collect();
            bin_inputs.push(tape.constant(e, d, vals));
            bin_times.push((0..e).map(|i| b as f64 * 24.0 + i as f64).collect());
        }
        let mut trace = AttentionTrace::new();
        let outs = intra_bin_attention(
            &mut tape,
            &bin_inputs,
            &bin_times,
            &spec,
            std::slice::from_ref(&local),
            &mut trace,
            TraceMode::Weights,
        )
        .unwrap();
        let summaries: Vec<NodeId> = outs.iter().map(|&o| tape.mean_rows(o)).collect();
        let stacked = tape.stack_rows(&summaries).unwrap();
        let refs: Vec<f64> = (0..t_bins).map(|b| b as f64 * 24.0 + 1.0).collect();
        inter_bin_attention(
            &mut tape,
            stacked,
            &refs,
            &spec,
            std::slice::from_ref(&global),
            &mut trace,
            TraceMode::Weights,
        )
        .unwrap();

        for m in &trace.matrices {
            for i in 0..m.rows {
                let sum: f64 = m.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
        let expect = count_ops(t_bins, e, d);
        assert_eq!(trace.layer_macs(Level::Intra, 0), (t_bins * e * e * d) as u64);
        assert_eq!(trace.layer_macs(Level::Inter, 0), (t_bins * t_bins * d) as u64);
        assert_eq!(trace.score_macs, expect.hierarchical);
    }
}

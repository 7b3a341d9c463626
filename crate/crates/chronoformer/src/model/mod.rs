//! The full network: embed events, contextualize within bins, pool to bin
//! summaries, contextualize across bins, and read out token/sequence
//! representations for the task heads.
//!
//! Token states follow the two-term sum `h_j = local_j + G_{bin(j)}`: the
//! token's intra-bin output plus the globally contextualized summary of its
//! own bin. The sequence vector is the mean of the contextualized bin
//! summaries. With `use_hierarchical = false` the same layers run as one
//! flat stack over all tokens (parameter count stays comparable) and bin
//! summaries become per-bin means of the flat token states.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use crate::attention::{
    self, AttentionTrace, HeadNodes, KernelKind, KernelSpec, LayerNodes, Level, TraceMode,
};
use crate::embeddings::{embed_sequence_node, EmbeddingSlots};
use crate::error::{Error, Result};
use crate::events::{compute_deltas, Label, PatientSequence, Vocabulary};
use crate::numeric::rng::CounterRng;
use crate::numeric::{NodeId, ParamBinding, ParamSet, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Architecture hyperparameters and ablation switches.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub l_local: usize,
    pub l_global: usize,
    pub delta_buckets: usize,
    pub bin_width: f64,
    pub kernel: KernelKind,
    pub rotary_width: usize,
    pub sigma_init: f64,
    pub use_temporal_embeddings: bool,
    pub use_hierarchical: bool,
    pub use_conditional_masking: bool,
    /// Total vocabulary size including PAD and MASK.
    pub vocab_size: usize,
    /// Width of the multi-label head.
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            l_local: 1,
            l_global: 1,
            delta_buckets: 32,
            bin_width: 24.0,
            kernel: KernelKind::None,
            rotary_width: 16,
            sigma_init: 24.0,
            use_temporal_embeddings: true,
            use_hierarchical: true,
            use_conditional_masking: true,
            vocab_size: 0,
            n_classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.d % 2 != 0 {
            return err(format!("d must be even and positive, got {}", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return err(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if self.l_local == 0 || self.l_global == 0 {
            return err("layer counts must be >= 1".into());
        }
        if self.delta_buckets < 2 {
            return err("delta_buckets must be >= 2".into());
        }
        if !(self.bin_width > 0.0) {
            return err("bin_width must be > 0".into());
        }
        if self.rotary_width == 0 || self.rotary_width % 2 != 0 {
            return err(format!(
                "rotary_width must be even and positive, got {}",
                self.rotary_width
            ));
        }
        if !(self.sigma_init > 0.0) {
            return err("sigma_init must be > 0".into());
        }
        if self.vocab_size < 3 {
            return err(format!(
                "vocab_size must include reserved ids plus at least one token, got {}",
                self.vocab_size
            ));
        }
        if self.n_classes == 0 {
            return err("n_classes must be >= 1".into());
        }
        Ok(())
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec {
            kind: self.kernel,
            rotary_width: self.rotary_width,
        }
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadSlots {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub heads: Vec<HeadSlots>,
    /// `[heads x 1]` pre-softplus temporal scales (always allocated so that
    /// parameter sets are interchangeable across kernel settings).
    pub sigma_raw: usize,
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub embed: EmbeddingSlots,
    pub local: Vec<LayerSlots>,
    pub global: Vec<LayerSlots>,
    pub local_final_gain: usize,
    pub local_final_bias: usize,
    pub global_final_gain: usize,
    pub global_final_bias: usize,
    pub head_binary_w: usize,
    pub head_binary_b: usize,
    pub head_multi_w: usize,
    pub head_multi_b: usize,
    pub head_mem_w: usize,
    pub head_mem_b: usize,
    pub head_timegap_w: usize,
    pub head_timegap_b: usize,
}

/// All learnable weights plus the slot layout for binding them onto a tape.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub set: ParamSet,
    pub layout: Layout,
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

fn uniform_tensor(rng: &mut CounterRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.symmetric(scale)).collect(),
    )
}

impl ModelParams {
    /// Initialize all tensors deterministically from `config.seed`; each
    /// tensor draws from its own named stream so values do not depend on
    /// construction order.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let root = CounterRng::new(config.seed).derive("init");
        let mut set = ParamSet::new();
        let d = config.d;
        let dh = config.head_width();
        let inv_d = 1.0 / (d as f64).sqrt();
        let inv_dh = 1.0 / (dh as f64).sqrt();

        let rand = |set: &mut ParamSet, name: String, r: usize, c: usize, scale: f64| {
            let mut rng = root.derive(&name);
            set.add(name, uniform_tensor(&mut rng, r, c, scale))
        };

        let concept = rand(
            &mut set,
            "embed.concept".into(),
            config.vocab_size,
            d,
            inv_d,
        );
        let delta = set.add("embed.delta", Tensor::zeros(config.delta_buckets, d));
        let meta_w = rand(&mut set, "embed.meta_w".into(), 1, d, inv_d);
        let meta_b = set.add("embed.meta_b", Tensor::zeros(1, d));
        let embed = EmbeddingSlots {
            concept,
            delta,
            meta_w,
            meta_b,
        };

        let build_level = |set: &mut ParamSet, level: &str, n_layers: usize| -> Vec<LayerSlots> {
            (0..n_layers)
                .map(|i| {
                    let heads = (0..config.heads)
                        .map(|h| HeadSlots {
                            wq: rand(set, format!("{level}.{i}.h{h}.wq"), d, dh, inv_d),
                            wk: rand(set, format!("{level}.{i}.h{h}.wk"), d, dh, inv_d),
                            wv: rand(set, format!("{level}.{i}.h{h}.wv"), d, dh, inv_d),
                            wo: rand(set, format!("{level}.{i}.h{h}.wo"), dh, d, inv_dh),
                        })
                        .collect();
                    LayerSlots {
                        heads,
                        sigma_raw: set.add(
                            format!("{level}.{i}.sigma_raw"),
                            Tensor::filled(config.heads, 1, softplus_inv(config.sigma_init)),
                        ),
                        ln1_gain: set.add(format!("{level}.{i}.ln1.gain"), Tensor::filled(1, d, 1.0)),
                        ln1_bias: set.add(format!("{level}.{i}.ln1.bias"), Tensor::zeros(1, d)),
                        ln2_gain: set.add(format!("{level}.{i}.ln2.gain"), Tensor::filled(1, d, 1.0)),
                        ln2_bias: set.add(format!("{level}.{i}.ln2.bias"), Tensor::zeros(1, d)),
                        ff_w1: rand(set, format!("{level}.{i}.ff.w1"), d, 4 * d, inv_d),
                        ff_b1: set.add(format!("{level}.{i}.ff.b1"), Tensor::zeros(1, 4 * d)),
                        ff_w2: rand(
                            set,
                            format!("{level}.{i}.ff.w2"),
                            4 * d,
                            d,
                            1.0 / (4.0 * d as f64).sqrt(),
                        ),
                        ff_b2: set.add(format!("{level}.{i}.ff.b2"), Tensor::zeros(1, d)),
                    }
                })
                .collect()
        };
        let local = build_level(&mut set, "local", config.l_local);
        let global = build_level(&mut set, "global", config.l_global);

        let local_final_gain = set.add("local.final_ln.gain", Tensor::filled(1, d, 1.0));
        let local_final_bias = set.add("local.final_ln.bias", Tensor::zeros(1, d));
        let global_final_gain = set.add("global.final_ln.gain", Tensor::filled(1, d, 1.0));
        let global_final_bias = set.add("global.final_ln.bias", Tensor::zeros(1, d));

        let head_binary_w = rand(&mut set, "head.binary.w".into(), d, 1, inv_d);
        let head_binary_b = set.add("head.binary.b", Tensor::zeros(1, 1));
        let head_multi_w = rand(&mut set, "head.multilabel.w".into(), d, config.n_classes, inv_d);
        let head_multi_b = set.add("head.multilabel.b", Tensor::zeros(1, config.n_classes));
        let head_mem_w = rand(&mut set, "head.mem.w".into(), d, config.vocab_size, inv_d);
        let head_mem_b = set.add("head.mem.b", Tensor::zeros(1, config.vocab_size));
        let head_timegap_w = rand(&mut set, "head.timegap.w".into(), d, 1, inv_d);
        let head_timegap_b = set.add("head.timegap.b", Tensor::zeros(1, 1));

        Ok(ModelParams {
            set,
            layout: Layout {
                embed,
                local,
                global,
                local_final_gain,
                local_final_bias,
                global_final_gain,
                global_final_bias,
                head_binary_w,
                head_binary_b,
                head_multi_w,
                head_multi_b,
                head_mem_w,
                head_mem_b,
                head_timegap_w,
                head_timegap_b,
            },
        })
    }
}

/// Flattened, model-ready view of a [`PatientSequence`].
#[derive(Debug, Clone)]
pub struct SeqFeatures {
    pub id: String,
    pub codes: Vec<usize>,
    pub times: Vec<f64>,
    pub deltas: Vec<f64>,
    pub values: Vec<Option<f64>>,
    /// Token index range of each bin, in bin order.
    pub bin_ranges: Vec<(usize, usize)>,
    pub reference_times: Vec<f64>,
    pub labels: BTreeMap<String, Label>,
}

impl SeqFeatures {
    pub fn from_sequence(seq: &PatientSequence) -> Self {
        let mut codes = Vec::new();
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut bin_ranges = Vec::new();
        let mut reference_times = Vec::new();
        for bin in &seq.bins {
            let start = codes.len();
            for ev in &bin.events {
                codes.push(ev.code);
                times.push(ev.time);
                values.push(ev.value);
            }
            bin_ranges.push((start, codes.len()));
            reference_times.push(bin.reference_time);
        }
        SeqFeatures {
            id: seq.id.clone(),
            codes,
            times,
            deltas: compute_deltas(seq),
            values,
            bin_ranges,
            reference_times,
            labels: seq.labels.clone(),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.codes.len()
    }

    pub fn n_bins(&self) -> usize {
        self.bin_ranges.len()
    }

    /// Bin index (position, not bin ordinal) of each token.
    pub fn bin_of_token(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_tokens());
        for (b, &(s, e)) in self.bin_ranges.iter().enumerate() {
            out.extend(std::iter::repeat(b).take(e - s));
        }
        out
    }
}

pub fn features_of(sequences: &[PatientSequence]) -> Vec<SeqFeatures> {
    sequences.iter().map(SeqFeatures::from_sequence).collect()
}

fn bind_layer(
    tape: &mut Tape,
    binding: &mut ParamBinding,
    set: &ParamSet,
    slots: &LayerSlots,
    gaussian: bool,
) -> Result<LayerNodes> {
    let sigma_node = binding.node(tape, set, slots.sigma_raw);
    let heads = slots
        .heads
        .iter()
        .enumerate()
        .map(|(h, hs)| {
            let sigma_raw = if gaussian {
                Some(tape.gather_rows(sigma_node, &[h])?)
            } else {
                None
            };
            Ok(HeadNodes {
                wq: binding.node(tape, set, hs.wq),
                wk: binding.node(tape, set, hs.wk),
                wv: binding.node(tape, set, hs.wv),
                wo: binding.node(tape, set, hs.wo),
                sigma_raw,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerNodes {
        heads,
        ln1_gain: binding.node(tape, set, slots.ln1_gain),
        ln1_bias: binding.node(tape, set, slots.ln1_bias),
        ln2_gain: binding.node(tape, set, slots.ln2_gain),
        ln2_bias: binding.node(tape, set, slots.ln2_bias),
        ff_w1: binding.node(tape, set, slots.ff_w1),
        ff_b1: binding.node(tape, set, slots.ff_b1),
        ff_w2: binding.node(tape, set, slots.ff_w2),
        ff_b2: binding.node(tape, set, slots.ff_b2),
    })
}

/// Outputs of one forward pass, as tape nodes plus the recorded trace.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `n x d` token states (intra-bin output + own bin's global summary).
    pub token_states: NodeId,
    /// `T x d` globally contextualized bin summaries.
    pub bin_summaries: NodeId,
    /// `1 x d` sequence readout (mean of bin summaries).
    pub sequence_vector: NodeId,
    pub trace: AttentionTrace,
}

/// Run the network over one sequence. `corruption`, when present, overrides
/// the concept codes fed to the embedding (masked-event pretraining);
/// times, deltas, and metadata are never altered by masking.
pub fn forward(
    tape: &mut Tape,
    binding: &mut ParamBinding,
    params: &ModelParams,
    config: &ModelConfig,
    feats: &SeqFeatures,
    corruption: Option<&[usize]>,
    mode: TraceMode,
) -> Result<ForwardOutput> {
    if feats.n_tokens() == 0 {
        return Err(Error::Validation(format!(
            "sequence {} has no events",
            feats.id
        )));
    }
    let codes = corruption.unwrap_or(&feats.codes);
    if codes.len() != feats.n_tokens() {
        return Err(Error::Validation(format!(
            "corruption length {} vs {} tokens",
            codes.len(),
            feats.n_tokens()
        )));
    }
    let x = embed_sequence_node(
        tape,
        binding,
        &params.set,
        &params.layout.embed,
        codes,
        &feats.times,
        &feats.deltas,
        &feats.values,
        config.use_temporal_embeddings,
    )?;
    let spec = config.kernel_spec();
    let gaussian = config.kernel == KernelKind::Gaussian;
    let mut trace = AttentionTrace::new();

    if config.use_hierarchical {
        let local_layers: Vec<LayerNodes> = params
            .layout
            .local
            .iter()
            .map(|s| bind_layer(tape, binding, &params.set, s, gaussian))
            .collect::<Result<_>>()?;
        let global_layers: Vec<LayerNodes> = params
            .layout
            .global
            .iter()
            .map(|s| bind_layer(tape, binding, &params.set, s, gaussian))
            .collect::<Result<_>>()?;

        let mut bin_inputs = Vec::with_capacity(feats.n_bins());
        let mut bin_times = Vec::with_capacity(feats.n_bins());
        for &(s, e) in &feats.bin_ranges {
            let idx: Vec<usize> = (s..e).collect();
            bin_inputs.push(tape.gather_rows(x, &idx)?);
            bin_times.push(feats.times[s..e].to_vec());
        }
        let local_outs = attention::intra_bin_attention(
            tape,
            &bin_inputs,
            &bin_times,
            &spec,
            &local_layers,
            &mut trace,
            mode,
        )?;
        let stacked = tape.stack_rows(&local_outs)?;
        let lf_gain = binding.node(tape, &params.set, params.layout.local_final_gain);
        let lf_bias = binding.node(tape, &params.set, params.layout.local_final_bias);
        let local_tokens = tape.layer_norm(stacked, lf_gain, lf_bias)?;

        let mut summaries = Vec::with_capacity(feats.n_bins());
        for &(s, e) in &feats.bin_ranges {
            let idx: Vec<usize> = (s..e).collect();
            let rows = tape.gather_rows(local_tokens, &idx)?;
            summaries.push(tape.mean_rows(rows));
        }
        let g0 = tape.stack_rows(&summaries)?;
        let g_ctx = attention::inter_bin_attention(
            tape,
            g0,
            &feats.reference_times,
            &spec,
            &global_layers,
            &mut trace,
            mode,
        )?;
        let gf_gain = binding.node(tape, &params.set, params.layout.global_final_gain);
        let gf_bias = binding.node(tape, &params.set, params.layout.global_final_bias);
        let g_final = tape.layer_norm(g_ctx, gf_gain, gf_bias)?;

        let sequence_vector = tape.mean_rows(g_final);
        let own_bin = tape.gather_rows(g_final, &feats.bin_of_token())?;
        let token_states = tape.add(local_tokens, own_bin)?;
        Ok(ForwardOutput {
            token_states,
            bin_summaries: g_final,
            sequence_vector,
            trace,
        })
    } else {
        // flat ablation: the same local+global layers as a single stack over
        // all tokens, biased by event times
        let all_slots = params.layout.local.iter().chain(params.layout.global.iter());
        let mut h = x;
        for (li, slots) in all_slots.enumerate() {
            let layer = bind_layer(tape, binding, &params.set, slots, gaussian)?;
            let (out, weights, macs) =
                attention::encoder_layer(tape, h, &feats.times, &spec, &layer, None)?;
            trace_flat(&mut trace, tape, li, macs, &weights, feats.n_tokens(), mode);
            h = out;
        }
        let gf_gain = binding.node(tape, &params.set, params.layout.global_final_gain);
        let gf_bias = binding.node(tape, &params.set, params.layout.global_final_bias);
        let token_states = tape.layer_norm(h, gf_gain, gf_bias)?;

        let mut summaries = Vec::with_capacity(feats.n_bins());
        for &(s, e) in &feats.bin_ranges {
            let idx: Vec<usize> = (s..e).collect();
            let rows = tape.gather_rows(token_states, &idx)?;
            summaries.push(tape.mean_rows(rows));
        }
        let bin_summaries = tape.stack_rows(&summaries)?;
        let sequence_vector = tape.mean_rows(bin_summaries);
        Ok(ForwardOutput {
            token_states,
            bin_summaries,
            sequence_vector,
            trace,
        })
    }
}

fn trace_flat(
    trace: &mut AttentionTrace,
    tape: &Tape,
    layer: usize,
    macs: u64,
    weights: &[NodeId],
    n: usize,
    mode: TraceMode,
) {
    trace.add_flat_macs(layer, macs);
    if mode == TraceMode::Weights {
        for (hi, w) in weights.iter().enumerate() {
            trace.matrices.push(crate::attention::TraceMatrix {
                level: Level::Flat,
                layer,
                head: hi,
                bin: None,
                rows: n,
                weights: tape.values(*w).to_vec(),
            });
        }
    }
}

/// Classification task selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Binary,
    Multilabel,
}

/// Probabilities for a task head applied to the sequence vector:
/// `1 x 1` (binary) or `1 x n_classes` (multilabel), each through a sigmoid.
pub fn predict_node(
    tape: &mut Tape,
    binding: &mut ParamBinding,
    params: &ModelParams,
    sequence_vector: NodeId,
    task: Task,
) -> Result<NodeId> {
    let (w, b) = match task {
        Task::Binary => (params.layout.head_binary_w, params.layout.head_binary_b),
        Task::Multilabel => (params.layout.head_multi_w, params.layout.head_multi_b),
    };
    let wn = binding.node(tape, &params.set, w);
    let bn = binding.node(tape, &params.set, b);
    let z = tape.matmul(sequence_vector, wn)?;
    let z = tape.add(z, bn)?;
    Ok(tape.sigmoid_node(z))
}

/// Convenience wrapper: fresh tape, full forward, head probabilities.
pub fn predict(
    params: &ModelParams,
    config: &ModelConfig,
    feats: &SeqFeatures,
    task: Task,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binding = ParamBinding::for_params(&params.set);
    let out = forward(
        &mut tape,
        &mut binding,
        params,
        config,
        feats,
        None,
        TraceMode::Off,
    )?;
    let probs = predict_node(&mut tape, &mut binding, params, out.sequence_vector, task)?;
    Ok(tape.values(probs).to_vec())
}

/// Forward pass that returns the recorded trace (weights snapshotted).
pub fn traced_forward(
    params: &ModelParams,
    config: &ModelConfig,
    feats: &SeqFeatures,
) -> Result<AttentionTrace> {
    let mut tape = Tape::new();
    let mut binding = ParamBinding::for_params(&params.set);
    let out = forward(
        &mut tape,
        &mut binding,
        params,
        config,
        feats,
        None,
        TraceMode::Weights,
    )?;
    Ok(out.trace)
}

/// Fails when a checkpoint's vocabulary size disagrees with a corpus.
pub fn validate_vocab(config: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
    if config.vocab_size != vocab.size() {
        return Err(Error::Checkpoint(format!(
            "vocabulary size mismatch: checkpoint has {}, corpus has {}",
            config.vocab_size,
            vocab.size()
        )));
    }
    Ok(())
}

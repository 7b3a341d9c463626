//! Evaluation metrics, spectral analysis of attention kernels, and corpus
//! statistics.
//!
//! AUROC uses midranks so ties count half; average precision uses step-wise
//! interpolation over tie-grouped thresholds. Spectra are computed on the
//! symmetrized matrix `(A + A^T)/2` by cyclic Jacobi rotations (softmax
//! attention is not symmetric, so PSD-ness is only guaranteed after
//! symmetrization of genuinely kernel-shaped inputs). Effective rank is the
//! exponential of the spectral entropy with negative eigenvalues clipped to
//! zero; `k*` is the smallest k whose cumulative eigenvalue fraction
//! reaches 90%.

use crate::attention::{AttentionTrace, Level, TraceMatrix};
use crate::error::{Error, Result};
use crate::events::{PatientSequence, Vocabulary, RESERVED_TOKENS};
use crate::numeric::Tensor;
use serde::Serialize;
use std::path::{Path, PathBuf};

fn check_binary_inputs(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("empty inputs".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (midrank formulation).
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check_binary_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "auroc needs both classes present".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block [i, j)
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] == 1.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = pos as f64;
    let nn = neg as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Average precision with step-wise interpolation over distinct thresholds.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, _) = check_binary_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("auprc needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let np = pos as f64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut prev_tp = 0u64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            if labels[k] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            let delta_recall = (tp - prev_tp) as f64 / np;
            ap += precision * delta_recall;
        }
        prev_tp = tp;
        i = j;
    }
    Ok(ap)
}

/// F1 at a fixed threshold (prediction positive when `score >= threshold`).
pub fn f1_at_threshold(scores: &[f64], labels: &[f64], threshold: f64) -> Result<f64> {
    let (pos, _) = check_binary_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("f1 needs at least one positive".into()));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    for (s, l) in scores.iter().zip(labels) {
        if *s >= threshold {
            if *l == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / pos as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Macro average of a per-class metric over multi-hot labels; classes
/// without positives are skipped (erroring only if none remain).
fn macro_metric(
    scores: &[Vec<f64>],
    labels: &[Vec<f64>],
    f: impl Fn(&[f64], &[f64]) -> Result<f64>,
) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::UndefinedMetric("empty or mismatched multilabel inputs".into()));
    }
    let n_classes = scores[0].len();
    let mut values = Vec::new();
    for c in 0..n_classes {
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let l: Vec<f64> = labels.iter().map(|row| row[c]).collect();
        if l.iter().any(|&v| v == 1.0) {
            values.push(f(&s, &l)?);
        }
    }
    if values.is_empty() {
        return Err(Error::UndefinedMetric("no class has positives".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn macro_auprc(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<f64> {
    macro_metric(scores, labels, auprc)
}

pub fn macro_f1(scores: &[Vec<f64>], labels: &[Vec<f64>], threshold: f64) -> Result<f64> {
    macro_metric(scores, labels, |s, l| f1_at_threshold(s, l, threshold))
}

/// RBF kernel matrix `K_ij = exp(-gamma (t_i - t_j)^2)`.
pub fn rbf_kernel(times: &[f64], gamma: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let n = times.len();
    let mut k = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = times[i] - times[j];
            k.set(i, j, (-gamma * d * d).exp());
        }
    }
    Ok(k)
}

/// Eigenvalues (descending), effective rank, and 90%-mass index of a
/// symmetrized matrix.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub effective_rank: f64,
    /// 1-based smallest k with cumulative eigenvalue fraction >= 0.9.
    pub k_star: usize,
    pub trace: f64,
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix (values only).
fn jacobi_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    const MAX_SWEEPS: usize = 64;
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-13 * scale;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q].abs();
            }
        }
        if off < tol {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < tol / (n * n) as f64 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = {
                    let s = if theta >= 0.0 { 1.0 } else { -1.0 };
                    s / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Spectrum of `(A + A^T)/2`.
pub fn spectrum(matrix: &Tensor) -> Result<SpectrumReport> {
    if matrix.rows != matrix.cols {
        return Err(Error::Dim {
            op: "spectrum",
            left: matrix.shape(),
            right: matrix.shape(),
        });
    }
    if matrix.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite matrix entry".into()));
    }
    let n = matrix.rows;
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (matrix.get(i, j) + matrix.get(j, i));
        }
    }
    let trace: f64 = (0..n).map(|i| sym[i * n + i]).sum();
    let mut eigenvalues = jacobi_eigenvalues(&mut sym, n);
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());

    // spectral entropy over clipped, normalized eigenvalues
    let clipped_sum: f64 = eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    let effective_rank = if clipped_sum > 0.0 {
        let entropy: f64 = eigenvalues
            .iter()
            .filter(|&&l| l > 0.0)
            .map(|&l| {
                let p = l / clipped_sum;
                -p * p.ln()
            })
            .sum();
        entropy.exp()
    } else {
        1.0
    };

    let total: f64 = eigenvalues.iter().sum();
    let mut k_star = n;
    if total > 0.0 {
        let mut acc = 0.0;
        for (i, &l) in eigenvalues.iter().enumerate() {
            acc += l;
            if acc / total >= 0.9 {
                k_star = i + 1;
                break;
            }
        }
    }
    Ok(SpectrumReport {
        eigenvalues,
        effective_rank,
        k_star,
        trace,
    })
}

fn trace_tensor(m: &TraceMatrix) -> Tensor {
    Tensor::from_vec(m.rows, m.rows, m.weights.clone())
}

/// Per-matrix k* comparison between two traces of the same input.
#[derive(Debug, Clone, Serialize)]
pub struct DecayEntry {
    pub level: Level,
    pub layer: usize,
    pub head: usize,
    pub bin: Option<usize>,
    pub model_k_star: usize,
    pub baseline_k_star: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub entries: Vec<DecayEntry>,
    pub mean_model_k_star: f64,
    pub mean_baseline_k_star: f64,
}

/// Compare eigenvalue decay of two traces matrix-by-matrix (matched on
/// level/layer/head/bin). Shapes must agree.
pub fn decay_compare(model: &AttentionTrace, baseline: &AttentionTrace) -> Result<DecayReport> {
    let mut entries = Vec::new();
    for m in &model.matrices {
        let Some(b) = baseline.matrices.iter().find(|b| {
            b.level == m.level && b.layer == m.layer && b.head == m.head && b.bin == m.bin
        }) else {
            return Err(Error::Validation(format!(
                "baseline trace missing matrix {:?}/{}/{}/{:?}",
                m.level, m.layer, m.head, m.bin
            )));
        };
        if b.rows != m.rows {
            return Err(Error::Dim {
                op: "decay_compare",
                left: vec![m.rows, m.rows],
                right: vec![b.rows, b.rows],
            });
        }
        entries.push(DecayEntry {
            level: m.level,
            layer: m.layer,
            head: m.head,
            bin: m.bin,
            model_k_star: spectrum(&trace_tensor(m))?.k_star,
            baseline_k_star: spectrum(&trace_tensor(b))?.k_star,
        });
    }
    if entries.is_empty() {
        return Err(Error::Validation("traces hold no matrices".into()));
    }
    let mean = |f: &dyn Fn(&DecayEntry) -> usize| {
        entries.iter().map(|e| f(e) as f64).sum::<f64>() / entries.len() as f64
    };
    Ok(DecayReport {
        mean_model_k_star: mean(&|e| e.model_k_star),
        mean_baseline_k_star: mean(&|e| e.baseline_k_star),
        entries,
    })
}

/// Empirical token entropy in nats over the corpus code distribution.
pub fn token_entropy(corpus: &[PatientSequence]) -> Result<f64> {
    let mut counts: std::collections::BTreeMap<usize, u64> = Default::default();
    let mut total = 0u64;
    for seq in corpus {
        for ev in seq.events_flat() {
            *counts.entry(ev.code).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation("corpus has no events".into()));
    }
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum())
}

/// Fraction of nonzero entries in the within-bin co-occurrence matrix over
/// the non-reserved vocabulary (ordered pairs of distinct events; repeated
/// codes inside a bin populate the diagonal).
pub fn cooccurrence_density(corpus: &[PatientSequence], vocab_size: usize) -> Result<f64> {
    let real = vocab_size.saturating_sub(RESERVED_TOKENS);
    if real == 0 {
        return Err(Error::Validation("vocabulary has no real tokens".into()));
    }
    let mut seen = vec![false; real * real];
    for seq in corpus {
        for bin in &seq.bins {
            for (i, a) in bin.events.iter().enumerate() {
                for (j, b) in bin.events.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let (ca, cb) = (a.code, b.code);
                    if ca >= RESERVED_TOKENS && cb >= RESERVED_TOKENS {
                        seen[(ca - RESERVED_TOKENS) * real + (cb - RESERVED_TOKENS)] = true;
                    }
                }
            }
        }
    }
    let nnz = seen.iter().filter(|&&s| s).count();
    Ok(nnz as f64 / (real * real) as f64)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    level: Level,
    layer: usize,
    head: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    bin: Option<usize>,
    tokens: Vec<&'a str>,
    times: Vec<f64>,
}

/// Write every recorded attention matrix as CSV (`query,key,weight`) plus a
/// JSON sidecar annotating token codes and times. Returns the CSV paths.
pub fn export_attention(
    trace: &AttentionTrace,
    seq: &PatientSequence,
    vocab: &Vocabulary,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let bin_names: Vec<String> = seq.bins.iter().map(|b| format!("bin_{}", b.index)).collect();
    for m in &trace.matrices {
        let stem = match m.bin {
            Some(b) => format!("attn_{}_l{}_h{}_b{}", m.level, m.layer, m.head, b),
            None => format!("attn_{}_l{}_h{}", m.level, m.layer, m.head),
        };
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut csv = String::from("query,key,weight\n");
        for i in 0..m.rows {
            for j in 0..m.rows {
                csv.push_str(&format!("{},{},{}\n", i, j, m.weights[i * m.rows + j]));
            }
        }
        std::fs::write(&csv_path, csv)?;

        let (tokens, times): (Vec<&str>, Vec<f64>) = match m.bin {
            Some(b) => {
                let bin = &seq.bins[b];
                (
                    bin.events
                        .iter()
                        .map(|e| vocab.token_of(e.code).unwrap_or("?"))
                        .collect(),
                    bin.events.iter().map(|e| e.time).collect(),
                )
            }
            None => match m.level {
                Level::Inter => (
                    bin_names.iter().map(String::as_str).collect(),
                    seq.bins.iter().map(|b| b.reference_time).collect(),
                ),
                _ => (
                    seq.events_flat()
                        .map(|e| vocab.token_of(e.code).unwrap_or("?"))
                        .collect(),
                    seq.events_flat().map(|e| e.time).collect(),
                ),
            },
        };
        let sidecar = Sidecar {
            level: m.level,
            layer: m.layer,
            head: m.head,
            bin: m.bin,
            tokens,
            times,
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        paths.push(csv_path);
    }
    Ok(paths)
}

/// Re-read an exported attention CSV into a square matrix.
pub fn import_attention_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "query,key,weight" {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("unexpected header '{line}'"),
                });
            }
            continue;
        }
        let mut parts = line.split(',');
        let mut field = |name: &str| {
            parts.next().ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("missing {name}"),
            })
        };
        let q: usize = field("query")?.parse().map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("query: {e}"),
        })?;
        let k: usize = field("key")?.parse().map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("key: {e}"),
        })?;
        let w: f64 = field("weight")?.parse().map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("weight: {e}"),
        })?;
        entries.push((q, k, w));
    }
    let n = entries.iter().map(|&(q, _, _)| q + 1).max().unwrap_or(0);
    let mut t = Tensor::zeros(n, n);
    for (q, k, w) in entries {
        t.set(q, k, w);
    }
    Ok(t)
}

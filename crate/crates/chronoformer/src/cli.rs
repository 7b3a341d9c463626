//! The `chronoformer` command line: generate / train / finetune / eval /
//! ablate / analyze.
//!
//! Config precedence is defaults < JSON config file (`--config`) < flags,
//! and every run writes a `resolved_config.json` next to its outputs so the
//! exact configuration can be replayed. All randomness derives from the one
//! `--seed`. Exit codes: 0 ok, 2 config error, 3 numeric failure, 4
//! undefined metric, 1 anything else.

use crate::analysis;
use crate::attention::{count_ops, KernelKind};
use crate::error::{Error, Result};
use crate::events::{
    self, GenConfig, Label, Manifest, PatientSequence, SchemaConfig, TaskFamily, Vocabulary,
};
use crate::model::{
    self, features_of, load_checkpoint, save_checkpoint, ModelConfig, ModelParams, SeqFeatures,
    Task,
};
use crate::pretrain::{train, Objective, StepMetric, TrainConfig, TrainResult};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "chronoformer",
    version,
    about = "Temporally biased hierarchical attention over binned event sequences"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted temporal labels.
    Generate(GenerateArgs),
    /// Pretrain with masked event modeling.
    Train(TrainCmdArgs),
    /// Train (or warm-start) the classification head on a labeled task.
    Finetune(FinetuneArgs),
    /// Score a corpus with a checkpoint (or the planted-rule oracle) and
    /// report auroc/auprc/f1.
    Eval(EvalArgs),
    /// Run the four ablation configurations across seeds.
    Ablate(AblateArgs),
    /// Export attention maps, spectra, complexity and corpus statistics.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub l_local: Option<usize>,
    #[arg(long)]
    pub l_global: Option<usize>,
    #[arg(long)]
    pub delta_buckets: Option<usize>,
    #[arg(long)]
    pub bin_width: Option<f64>,
    /// Temporal bias kernel: none, gaussian, or rotary.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub rotary_width: Option<usize>,
    #[arg(long)]
    pub sigma_init: Option<f64>,
    /// Ablation: single-level attention over all tokens.
    #[arg(long)]
    pub no_hierarchical: bool,
    /// Ablation: drop absolute-time and relative-delta embeddings.
    #[arg(long)]
    pub no_temporal: bool,
    /// Ablation: uniform masking probabilities during pretraining.
    #[arg(long)]
    pub no_conditional_masking: bool,
}

impl ModelArgs {
    fn apply(&self, base: &mut ModelConfig) -> Result<()> {
        if let Some(d) = self.d {
            base.d = d;
        }
        if let Some(h) = self.heads {
            base.heads = h;
        }
        if let Some(l) = self.l_local {
            base.l_local = l;
        }
        if let Some(l) = self.l_global {
            base.l_global = l;
        }
        if let Some(b) = self.delta_buckets {
            base.delta_buckets = b;
        }
        if let Some(w) = self.bin_width {
            base.bin_width = w;
        }
        if let Some(k) = &self.kernel {
            base.kernel = parse_kernel(k)?;
        }
        if let Some(r) = self.rotary_width {
            base.rotary_width = r;
        }
        if let Some(s) = self.sigma_init {
            base.sigma_init = s;
        }
        if self.no_hierarchical {
            base.use_hierarchical = false;
        }
        if self.no_temporal {
            base.use_temporal_embeddings = false;
        }
        if self.no_conditional_masking {
            base.use_conditional_masking = false;
        }
        Ok(())
    }
}

fn parse_kernel(s: &str) -> Result<KernelKind> {
    match s {
        "none" => Ok(KernelKind::None),
        "gaussian" => Ok(KernelKind::Gaussian),
        "rotary" => Ok(KernelKind::Rotary),
        other => Err(Error::Config(format!(
            "unknown kernel '{other}' (expected none, gaussian, rotary)"
        ))),
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    /// Pretraining objective: mem or reweighted_mem.
    #[arg(long)]
    pub objective: Option<String>,
    /// Add the time-gap auxiliary loss.
    #[arg(long)]
    pub time_gap: bool,
    #[arg(long)]
    pub time_gap_weight: Option<f64>,
}

impl OptimArgs {
    fn apply(&self, base: &mut TrainConfig) -> Result<()> {
        if let Some(s) = self.steps {
            base.steps = s;
        }
        if let Some(b) = self.batch {
            base.batch_size = b;
        }
        if let Some(lr) = self.lr {
            base.lr = lr;
        }
        if let Some(m) = self.mask_rate {
            base.mask_rate = m;
        }
        if let Some(o) = &self.objective {
            base.objective = match o.as_str() {
                "mem" => Objective::Mem,
                "reweighted_mem" => Objective::ReweightedMem,
                other => {
                    return Err(Error::Config(format!(
                        "unknown objective '{other}' (expected mem, reweighted_mem)"
                    )))
                }
            };
        }
        if self.time_gap {
            base.use_time_gap = true;
        }
        if let Some(w) = self.time_gap_weight {
            base.time_gap_weight = w;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Task family: gap, recency, or longrange.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub events_per_bin: Option<usize>,
    /// Number of filler tokens.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub bin_width: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub prevalence: Option<f64>,
    #[arg(long)]
    pub zipf: Option<f64>,
    /// Gap threshold / recency window / longrange min-gap in hours.
    #[arg(long)]
    pub task_param: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCmdArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary JSON; defaults to vocab.json next to the corpus.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Label name to train against.
    #[arg(long)]
    pub task: String,
    /// Warm-start checkpoint (pretrained weights).
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score with the planted rule from a generator manifest instead of a
    /// checkpoint.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub test_corpus: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// MEM pretraining steps before fine-tuning (0 skips pretraining, which
    /// makes the conditional-masking arm identical to the full model).
    #[arg(long, default_value_t = 0)]
    pub pretrain_steps: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// How many sequences feed the spectral comparison.
    #[arg(long, default_value_t = 20)]
    pub spectral_sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

/// Optional JSON config file holding partial overrides per section.
#[derive(Debug, Default, serde::Deserialize)]
struct FileConfig {
    model: Option<serde_json::Value>,
    train: Option<serde_json::Value>,
    generate: Option<serde_json::Value>,
}

fn read_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config file: {e}")))
        }
    }
}

fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
        for (k, v) in p {
            match b.get_mut(k) {
                Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                _ => {
                    b.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

fn apply_patch<T: Serialize + serde::de::DeserializeOwned>(
    base: &T,
    patch: &Option<serde_json::Value>,
) -> Result<T> {
    match patch {
        None => Ok(serde_json::from_value(serde_json::to_value(base)?)?),
        Some(p) => {
            let mut v = serde_json::to_value(base)?;
            merge_json(&mut v, p);
            serde_json::from_value(v).map_err(|e| Error::Config(format!("config override: {e}")))
        }
    }
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    command: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    corpus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_corpus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generate: Option<GenConfig>,
}

impl<'a> ResolvedConfig<'a> {
    fn new(command: &'a str, seed: u64) -> Self {
        ResolvedConfig {
            command,
            seed,
            corpus: None,
            test_corpus: None,
            vocab: None,
            checkpoint: None,
            task: None,
            model: None,
            train: None,
            generate: None,
        }
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(
            out_dir.join("resolved_config.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Load a corpus and its vocabulary. With an explicit vocabulary the corpus
/// is parsed against it (unknown tokens are errors); otherwise a vocab.json
/// sibling is used when present, and as a last resort the vocabulary is
/// derived from the corpus itself.
pub fn load_corpus(
    corpus: &Path,
    vocab: Option<&Path>,
    bin_width: f64,
) -> Result<(Vec<PatientSequence>, Vocabulary)> {
    let schema = SchemaConfig { bin_width };
    let vocab_path = match vocab {
        Some(v) => Some(v.to_path_buf()),
        None => {
            let sibling = corpus.parent().map(|d| d.join("vocab.json"));
            sibling.filter(|s| s.exists())
        }
    };
    match vocab_path {
        Some(vp) => {
            let v = events::read_vocabulary(&vp)?;
            let seqs = events::parse_corpus_with_vocab(corpus, &schema, &v)?;
            Ok((seqs, v))
        }
        None => events::parse_corpus(corpus, &schema),
    }
}

fn write_metrics_csv(
    path: &Path,
    metrics: &[StepMetric],
    objective: &str,
) -> Result<()> {
    let mut csv = String::from("step,loss,objective,lr,seconds\n");
    for m in metrics {
        csv.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            m.step, m.loss, objective, m.lr, m.seconds
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn objective_name(o: &Objective) -> String {
    match o {
        Objective::Mem => "mem".into(),
        Objective::ReweightedMem => "reweighted_mem".into(),
        Objective::Supervised { task } => format!("supervised:{task}"),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let file = read_file_config(&args.config)?;
    let task = match args.task.as_str() {
        "gap" => TaskFamily::Gap {
            threshold: args.task_param.unwrap_or(60.0),
        },
        "recency" => TaskFamily::Recency {
            window: args.task_param.unwrap_or(48.0),
        },
        "longrange" => TaskFamily::LongRange {
            min_gap: args.task_param.unwrap_or(96.0),
        },
        other => {
            return Err(Error::Config(format!(
                "unknown task '{other}' (expected gap, recency, longrange)"
            )))
        }
    };
    let mut config = apply_patch(&GenConfig { task, ..GenConfig::default() }, &file.generate)?;
    if let Some(p) = args.patients {
        config.patients = p;
    }
    if let Some(b) = args.bins {
        config.bins = b;
    }
    if let Some(e) = args.events_per_bin {
        config.events_per_bin = e;
    }
    if let Some(v) = args.vocab {
        config.vocab_size = v;
    }
    if let Some(w) = args.bin_width {
        config.bin_width = w;
    }
    if let Some(n) = args.noise {
        config.noise = n;
    }
    if let Some(p) = args.prevalence {
        config.prevalence = p;
    }
    if let Some(z) = args.zipf {
        config.zipf_exponent = z;
    }

    let out = events::generate_synthetic(&config, args.seed, &args.out)?;
    let mut resolved = ResolvedConfig::new("generate", args.seed);
    resolved.generate = Some(config);
    resolved.write(&args.out)?;
    println!("{}", out.manifest_path.display());
    Ok(())
}

fn train_common(
    corpus: &Path,
    vocab: Option<&Path>,
    out_dir: &Path,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<TrainResult> {
    let (seqs, vocab) = load_corpus(corpus, vocab, model_config.bin_width)?;
    let mut mc = model_config.clone();
    mc.vocab_size = vocab.size();
    mc.validate()?;
    let feats = features_of(&seqs);
    let result = train(&feats, &vocab, &mc, train_config, init)?;
    std::fs::create_dir_all(out_dir)?;
    save_checkpoint(out_dir.join("checkpoint.bin"), &mc, &result.params)?;
    write_metrics_csv(
        &out_dir.join("metrics.csv"),
        &result.metrics,
        &objective_name(&train_config.objective),
    )?;
    Ok(result)
}

pub fn cmd_train(args: &TrainCmdArgs) -> Result<()> {
    let file = read_file_config(&args.config)?;
    let mut mc = apply_patch(&ModelConfig::default(), &file.model)?;
    args.model.apply(&mut mc)?;
    mc.seed = args.seed;
    let mut tc = apply_patch(
        &TrainConfig {
            objective: Objective::Mem,
            ..TrainConfig::default()
        },
        &file.train,
    )?;
    args.optim.apply(&mut tc)?;
    tc.seed = args.seed;
    if matches!(tc.objective, Objective::Supervised { .. }) {
        return Err(Error::Config(
            "train runs masked pretraining; use finetune for supervised tasks".into(),
        ));
    }
    train_common(&args.corpus, args.vocab.as_deref(), &args.out, &mc, &tc, None)?;

    let mut resolved = ResolvedConfig::new("train", args.seed);
    resolved.corpus = Some(path_str(&args.corpus));
    resolved.vocab = args.vocab.as_deref().map(path_str);
    resolved.model = Some({
        let (_, v) = load_corpus(&args.corpus, args.vocab.as_deref(), mc.bin_width)?;
        let mut m = mc.clone();
        m.vocab_size = v.size();
        m
    });
    resolved.train = Some(tc);
    resolved.write(&args.out)?;
    println!("{}", args.out.join("checkpoint.bin").display());
    Ok(())
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let file = read_file_config(&args.config)?;
    let (mut mc, init) = match &args.init_checkpoint {
        Some(cp) => {
            let (config, params) = load_checkpoint(cp)?;
            (config, Some(params))
        }
        None => {
            let mut mc = apply_patch(&ModelConfig::default(), &file.model)?;
            args.model.apply(&mut mc)?;
            mc.seed = args.seed;
            (mc, None)
        }
    };
    if init.is_none() {
        // vocab size is resolved inside train_common
    } else {
        // warm start: architecture comes from the checkpoint; only ablation
        // switches that do not change parameter shapes may be overridden
        args.model.apply(&mut mc)?;
    }
    let mut tc = apply_patch(
        &TrainConfig {
            objective: Objective::Supervised {
                task: args.task.clone(),
            },
            ..TrainConfig::default()
        },
        &file.train,
    )?;
    args.optim.apply(&mut tc)?;
    tc.objective = Objective::Supervised {
        task: args.task.clone(),
    };
    tc.seed = args.seed;

    train_common(&args.corpus, args.vocab.as_deref(), &args.out, &mc, &tc, init)?;

    let mut resolved = ResolvedConfig::new("finetune", args.seed);
    resolved.corpus = Some(path_str(&args.corpus));
    resolved.vocab = args.vocab.as_deref().map(path_str);
    resolved.checkpoint = args.init_checkpoint.as_deref().map(path_str);
    resolved.task = Some(args.task.clone());
    resolved.model = Some({
        let (_, v) = load_corpus(&args.corpus, args.vocab.as_deref(), mc.bin_width)?;
        let mut m = mc.clone();
        m.vocab_size = v.size();
        m
    });
    resolved.train = Some(tc);
    resolved.write(&args.out)?;
    println!("{}", args.out.join("checkpoint.bin").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    auroc: f64,
    auprc: f64,
    f1: f64,
    n: usize,
}

/// Score every sequence with the binary head.
pub fn score_corpus(
    params: &ModelParams,
    config: &ModelConfig,
    feats: &[SeqFeatures],
) -> Result<Vec<f64>> {
    feats
        .iter()
        .map(|f| Ok(model::predict(params, config, f, Task::Binary)?[0]))
        .collect()
}

fn binary_labels(feats: &[SeqFeatures], task: &str) -> Result<Vec<f64>> {
    feats
        .iter()
        .map(|f| match f.labels.get(task) {
            Some(Label::Binary(v)) => Ok(*v),
            Some(Label::MultiHot(_)) => Err(Error::Validation(format!(
                "label '{task}' is multi-hot; eval --task expects a binary label"
            ))),
            None => Err(Error::Validation(format!(
                "sequence {} has no label '{task}'",
                f.id
            ))),
        })
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if args.checkpoint.is_some() == args.oracle.is_some() {
        return Err(Error::Config(
            "eval needs exactly one of --checkpoint or --oracle".into(),
        ));
    }
    let report;
    let resolved_model;
    if let Some(manifest_path) = &args.oracle {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        let (seqs, vocab) = load_corpus(
            &args.corpus,
            args.vocab.as_deref(),
            manifest.config.bin_width,
        )?;
        let feats = features_of(&seqs);
        let scores: Vec<f64> = seqs
            .iter()
            .map(|s| events::planted_score(s, &manifest, &vocab))
            .collect::<Result<_>>()?;
        let labels = binary_labels(&feats, &args.task)?;
        report = EvalReport {
            auroc: analysis::auroc(&scores, &labels)?,
            auprc: analysis::auprc(&scores, &labels)?,
            f1: analysis::f1_at_threshold(&scores, &labels, 0.5)?,
            n: scores.len(),
        };
        resolved_model = None;
    } else {
        let cp = args.checkpoint.as_ref().unwrap();
        let (config, params) = load_checkpoint(cp)?;
        let (seqs, vocab) = load_corpus(&args.corpus, args.vocab.as_deref(), config.bin_width)?;
        model::validate_vocab(&config, &vocab)?;
        let feats = features_of(&seqs);
        let scores = score_corpus(&params, &config, &feats)?;
        let labels = binary_labels(&feats, &args.task)?;
        report = EvalReport {
            auroc: analysis::auroc(&scores, &labels)?,
            auprc: analysis::auprc(&scores, &labels)?,
            f1: analysis::f1_at_threshold(&scores, &labels, 0.5)?,
            n: scores.len(),
        };
        resolved_model = Some(config);
    }

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut resolved = ResolvedConfig::new("eval", args.seed);
    resolved.corpus = Some(path_str(&args.corpus));
    resolved.vocab = args.vocab.as_deref().map(path_str);
    resolved.checkpoint = args.checkpoint.as_deref().map(path_str);
    resolved.task = Some(args.task.clone());
    resolved.model = resolved_model;
    resolved.write(&args.out)?;
    println!("{}", args.out.join("metrics.json").display());
    Ok(())
}

/// One ablation arm: a named transform of the full configuration.
fn ablation_arms(full: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let mut no_h = full.clone();
    no_h.use_hierarchical = false;
    let mut no_t = full.clone();
    no_t.use_temporal_embeddings = false;
    let mut no_m = full.clone();
    no_m.use_conditional_masking = false;
    vec![
        ("full", full.clone()),
        ("no_hierarchical", no_h),
        ("no_temporal", no_t),
        ("no_conditional_masking", no_m),
    ]
}

/// Pretrain (optionally), finetune, and return test AUROC for one seed.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    train_feats: &[SeqFeatures],
    test_feats: &[SeqFeatures],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    finetune_config: &TrainConfig,
    pretrain_config: Option<&TrainConfig>,
    task: &str,
    seed: u64,
) -> Result<f64> {
    let mut mc = model_config.clone();
    mc.vocab_size = vocab.size();
    mc.seed = seed;
    let init = match pretrain_config {
        Some(pc) => {
            let mut pc = pc.clone();
            pc.seed = seed;
            Some(train(train_feats, vocab, &mc, &pc, None)?.params)
        }
        None => None,
    };
    let mut fc = finetune_config.clone();
    fc.objective = Objective::Supervised { task: task.into() };
    fc.seed = seed;
    let result = train(train_feats, vocab, &mc, &fc, init)?;
    let scores = score_corpus(&result.params, &mc, test_feats)?;
    let labels: Vec<f64> = binary_labels(test_feats, task)?;
    analysis::auroc(&scores, &labels)
}

#[derive(Serialize)]
struct AblationRow {
    config: &'static str,
    auroc_mean: f64,
    auroc_sd: f64,
    delta: f64,
    per_seed: Vec<f64>,
}

#[derive(Serialize)]
struct AblationReport {
    task: String,
    seeds: usize,
    pretrain_steps: usize,
    rows: Vec<AblationRow>,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let file = read_file_config(&args.config)?;
    let mut mc = apply_patch(&ModelConfig::default(), &file.model)?;
    args.model.apply(&mut mc)?;
    let mut tc = apply_patch(&TrainConfig::default(), &file.train)?;
    args.optim.apply(&mut tc)?;
    if args.seeds == 0 {
        return Err(Error::Config("seeds must be >= 1".into()));
    }

    let (train_seqs, vocab) = load_corpus(&args.corpus, args.vocab.as_deref(), mc.bin_width)?;
    let test_seqs =
        events::parse_corpus_with_vocab(&args.test_corpus, &SchemaConfig { bin_width: mc.bin_width }, &vocab)?;
    let train_feats = features_of(&train_seqs);
    let test_feats = features_of(&test_seqs);

    let pretrain_config = if args.pretrain_steps > 0 {
        Some(TrainConfig {
            objective: Objective::Mem,
            steps: args.pretrain_steps,
            ..tc.clone()
        })
    } else {
        None
    };

    let mut rows: Vec<AblationRow> = Vec::new();
    let arms = ablation_arms(&mc);
    let mut full_mean = 0.0;
    for (name, arm_config) in &arms {
        let mut per_seed = Vec::with_capacity(args.seeds);
        for s in 0..args.seeds {
            let seed = args.seed + s as u64;
            per_seed.push(run_experiment(
                &train_feats,
                &test_feats,
                &vocab,
                arm_config,
                &tc,
                pretrain_config.as_ref(),
                &args.task,
                seed,
            )?);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let var = per_seed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / per_seed.len() as f64;
        if *name == "full" {
            full_mean = mean;
        }
        rows.push(AblationRow {
            config: name,
            auroc_mean: mean,
            auroc_sd: var.sqrt(),
            delta: mean - full_mean,
            per_seed,
        });
    }
    // delta is relative to the full arm (first row), recomputed now that
    // full_mean is known
    for row in &mut rows {
        row.delta = row.auroc_mean - full_mean;
    }

    let report = AblationReport {
        task: args.task.clone(),
        seeds: args.seeds,
        pretrain_steps: args.pretrain_steps,
        rows,
    };
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut resolved = ResolvedConfig::new("ablate", args.seed);
    resolved.corpus = Some(path_str(&args.corpus));
    resolved.test_corpus = Some(path_str(&args.test_corpus));
    resolved.task = Some(args.task.clone());
    resolved.model = Some(mc);
    resolved.train = Some(tc);
    resolved.write(&args.out)?;
    println!("{}", args.out.join("ablation.json").display());
    Ok(())
}

#[derive(Serialize)]
struct OpsReport {
    t_bins: usize,
    max_events_per_bin: usize,
    d: usize,
    analytic_hierarchical: u64,
    analytic_flat: u64,
    measured_hierarchical_first_seq: u64,
    measured_flat_first_seq: u64,
    hierarchical_lt_flat: bool,
}

#[derive(Serialize)]
struct EntropyReport {
    token_entropy_nats: f64,
    cooccurrence_density: f64,
    n_sequences: usize,
}

#[derive(Serialize)]
struct DecaySummary {
    model_kernel: String,
    baseline_kernel: String,
    sequences: usize,
    mean_model_k_star: f64,
    mean_baseline_k_star: f64,
    per_layer: Vec<DecayLayerRow>,
}

#[derive(Serialize)]
struct DecayLayerRow {
    layer: usize,
    mean_model_k_star: f64,
    mean_baseline_k_star: f64,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let (config, params) = load_checkpoint(&args.checkpoint)?;
    let (seqs, vocab) = load_corpus(&args.corpus, args.vocab.as_deref(), config.bin_width)?;
    model::validate_vocab(&config, &vocab)?;
    if seqs.is_empty() {
        return Err(Error::Validation("corpus is empty".into()));
    }
    std::fs::create_dir_all(&args.out)?;
    let feats = features_of(&seqs);

    // attention maps of the first sequence
    let trace = model::traced_forward(&params, &config, &feats[0])?;
    analysis::export_attention(&trace, &seqs[0], &vocab, args.out.join("attention"))?;

    // complexity: analytic counts at the corpus' shape plus measured counters
    let t_bins = seqs.iter().map(|s| s.bins.len()).max().unwrap_or(1);
    let max_e = seqs.iter().map(|s| s.max_bin_occupancy()).max().unwrap_or(1);
    let analytic = count_ops(t_bins, max_e, config.d);
    let measured_h = trace.score_macs;
    let mut flat_config = config.clone();
    flat_config.use_hierarchical = false;
    let measured_f = model::traced_forward(&params, &flat_config, &feats[0])?.score_macs;
    let ops = OpsReport {
        t_bins,
        max_events_per_bin: max_e,
        d: config.d,
        analytic_hierarchical: analytic.hierarchical,
        analytic_flat: analytic.flat,
        measured_hierarchical_first_seq: measured_h,
        measured_flat_first_seq: measured_f,
        hierarchical_lt_flat: analytic.hierarchical < analytic.flat,
    };
    std::fs::write(
        args.out.join("ops_report.json"),
        serde_json::to_string_pretty(&ops)?,
    )?;

    // corpus statistics
    let entropy = EntropyReport {
        token_entropy_nats: analysis::token_entropy(&seqs)?,
        cooccurrence_density: analysis::cooccurrence_density(&seqs, vocab.size())?,
        n_sequences: seqs.len(),
    };
    std::fs::write(
        args.out.join("entropy_report.json"),
        serde_json::to_string_pretty(&entropy)?,
    )?;

    // spectral decay: checkpoint kernel (or gaussian when none) vs no bias
    let mut model_config = config.clone();
    if model_config.kernel == KernelKind::None {
        model_config.kernel = KernelKind::Gaussian;
    }
    let mut baseline_config = config.clone();
    baseline_config.kernel = KernelKind::None;
    let n_spectral = args.spectral_sequences.min(feats.len());
    let mut layer_acc: std::collections::BTreeMap<usize, (f64, f64, usize)> = Default::default();
    let mut model_sum = 0.0;
    let mut base_sum = 0.0;
    let mut count = 0usize;
    for f in feats.iter().take(n_spectral) {
        let mt = model::traced_forward(&params, &model_config, f)?;
        let bt = model::traced_forward(&params, &baseline_config, f)?;
        let report = analysis::decay_compare(&mt, &bt)?;
        for e in report
            .entries
            .iter()
            .filter(|e| e.level == crate::attention::Level::Inter)
        {
            let slot = layer_acc.entry(e.layer).or_insert((0.0, 0.0, 0));
            slot.0 += e.model_k_star as f64;
            slot.1 += e.baseline_k_star as f64;
            slot.2 += 1;
            model_sum += e.model_k_star as f64;
            base_sum += e.baseline_k_star as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation("no inter-bin attention recorded".into()));
    }
    let decay = DecaySummary {
        model_kernel: model_config.kernel.to_string(),
        baseline_kernel: baseline_config.kernel.to_string(),
        sequences: n_spectral,
        mean_model_k_star: model_sum / count as f64,
        mean_baseline_k_star: base_sum / count as f64,
        per_layer: layer_acc
            .into_iter()
            .map(|(layer, (m, b, c))| DecayLayerRow {
                layer,
                mean_model_k_star: m / c as f64,
                mean_baseline_k_star: b / c as f64,
            })
            .collect(),
    };
    std::fs::write(
        args.out.join("decay_report.json"),
        serde_json::to_string_pretty(&decay)?,
    )?;

    let mut resolved = ResolvedConfig::new("analyze", args.seed);
    resolved.corpus = Some(path_str(&args.corpus));
    resolved.checkpoint = Some(path_str(&args.checkpoint));
    resolved.model = Some(config);
    resolved.write(&args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Analyze(args) => cmd_analyze(args),
    }
}

/// Exit code for an error, per the documented contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Validation(_) | Error::Parse { .. } | Error::Dim { .. } => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::EmptyAttentionRow { .. } => 3,
        Error::UndefinedMetric(_) => 4,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_parsing() {
        assert_eq!(parse_kernel("none").unwrap(), KernelKind::None);
        assert_eq!(parse_kernel("gaussian").unwrap(), KernelKind::Gaussian);
        assert_eq!(parse_kernel("rotary").unwrap(), KernelKind::Rotary);
        assert!(parse_kernel("fourier").is_err());
    }

    #[test]
    fn json_merge_is_recursive() {
        let mut base = serde_json::json!({"a": 1, "b": {"c": 2, "d": 3}});
        let patch = serde_json::json!({"b": {"d": 9}, "e": 4});
        merge_json(&mut base, &patch);
        assert_eq!(base, serde_json::json!({"a": 1, "b": {"c": 2, "d": 9}, "e": 4}));
    }

    #[test]
    fn exit_codes_match_contract() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Divergence { step: 1, last_loss: 0.5 }),
            3
        );
        assert_eq!(exit_code(&Error::UndefinedMetric("x".into())), 4);
        assert_eq!(
            exit_code(&Error::Checkpoint("x".into())),
            1
        );
    }
}

//! The three-step adaptation procedure and the single-phase baselines.
//!
//! Step 1 fine-tunes the source encoder and classifier on labeled source
//! data, copies the encoder into the target encoder and freezes the source
//! side. Step 2 alternates discriminator and target-encoder updates on
//! lockstep (source batch, target batch) pairs. Step 3 classifies the target
//! evaluation split with the target encoder and the frozen classifier.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, clip_grad_value, clip_weights, zero_grads, Adam, Param, Tensor};
use crate::data::{batch_iter, DomainPairDataset, Labeled};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::losses::{
    coral_loss, dis_loss, gen_loss, kd_loss, median_bandwidth, mmd_gaussian, reverse_gradient, source_ce,
    target_objective, target_objective_supervised, LossValue, Temperature,
};
use crate::models::{max_drift, snapshot, Classifier, Component, ModelBundle, ModelConfig, SequenceEncoder};
use crate::rng::tag;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Source-only fine-tuning, evaluated with the source encoder.
    Baseline,
    /// Adversarial adaptation regularised by distillation.
    Aad,
    /// Adversarial adaptation regularised by source cross-entropy through
    /// the target encoder.
    AadSupervised,
    /// Adversarial adaptation with no regulariser.
    Adda,
    Ddc,
    Dann,
    Coral,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::Aad,
        Method::AadSupervised,
        Method::Adda,
        Method::Ddc,
        Method::Dann,
        Method::Coral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Aad => "aad",
            Method::AadSupervised => "aad-supervised",
            Method::Adda => "adda",
            Method::Ddc => "ddc",
            Method::Dann => "dann",
            Method::Coral => "coral",
        }
    }

    /// Whether the method runs the adversarial second step.
    pub fn is_adversarial(self) -> bool {
        matches!(self, Method::Aad | Method::AadSupervised | Method::Adda)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
            Error::invalid(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step1Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step2Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub temperature: f64,
    /// Multiplier on the distillation term; 0 gives plain adversarial
    /// adaptation.
    pub kd_weight: f64,
    pub clip_norm: f64,
    pub clip_value: f64,
    pub d_steps_per_g_step: usize,
    /// Clamp discriminator weights to `[-clip_value, clip_value]` after each
    /// update instead of relying on gradient clamping alone.
    pub weight_clip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub model: ModelConfig,
    pub step1: Step1Config,
    pub step2: Step2Config,
    /// Weight on the MMD / domain / CORAL term of the single-phase baselines.
    pub align_weight: f64,
    pub dann_lambda: f64,
}

/// Learning rates that train the desk-scale model from scratch in the fixed
/// 3 + 3 epoch budget.
pub const DESK_LR1: f64 = 5e-3;
pub const DESK_LR2: f64 = 5e-3;
/// Learning rates used for fine-tuning pre-trained encoders.
pub const BERT_LR1: f64 = 5e-5;
pub const BERT_LR2: f64 = 1e-5;

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            model: ModelConfig::default(),
            step1: Step1Config {
                epochs: 3,
                lr: DESK_LR1,
                batch: 64,
            },
            step2: Step2Config {
                epochs: 3,
                lr: DESK_LR2,
                batch: 64,
                temperature: 20.0,
                kd_weight: 1.0,
                clip_norm: 1.0,
                clip_value: 0.01,
                d_steps_per_g_step: 1,
                weight_clip: false,
            },
            align_weight: 1.0,
            dann_lambda: 1.0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be non-negative, got {v}")))
            }
        };
        positive("step1.lr", self.step1.lr)?;
        positive("step2.lr", self.step2.lr)?;
        positive("step2.temperature", self.step2.temperature)?;
        positive("step2.clip_norm", self.step2.clip_norm)?;
        positive("step2.clip_value", self.step2.clip_value)?;
        non_negative("step2.kd_weight", self.step2.kd_weight)?;
        non_negative("align_weight", self.align_weight)?;
        non_negative("dann_lambda", self.dann_lambda)?;
        for (name, v) in [
            ("step1.epochs", self.step1.epochs),
            ("step1.batch", self.step1.batch),
            ("step2.epochs", self.step2.epochs),
            ("step2.batch", self.step2.batch),
            ("step2.d_steps_per_g_step", self.step2.d_steps_per_g_step),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Second term of the target-encoder objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetLoss {
    Distill { temperature: f64, weight: f64 },
    Supervised,
}

impl TargetLoss {
    pub fn for_method(method: Method, cfg: &Step2Config) -> Option<TargetLoss> {
        match method {
            Method::Aad => Some(TargetLoss::Distill {
                temperature: cfg.temperature,
                weight: cfg.kd_weight,
            }),
            Method::Adda => Some(TargetLoss::Distill {
                temperature: cfg.temperature,
                weight: 0.0,
            }),
            Method::AadSupervised => Some(TargetLoss::Supervised),
            _ => None,
        }
    }
}

/// Per-update loss values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step1: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub align: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dis: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gen: Vec<f64>,
    /// Distillation or supervised term, whichever the objective uses.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regulariser: Vec<f64>,
}

/// Mean of each consecutive block of `per_epoch` values.
pub fn epoch_means(trace: &[f64], per_epoch: usize) -> Vec<f64> {
    trace
        .chunks(per_epoch.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub pair: String,
    pub method: Method,
    /// Column label; equals the method name except in temperature sweeps.
    pub variant: String,
    pub seed: u64,
    pub target_accuracy: f64,
    pub source_dev_before: f64,
    pub source_dev_after: f64,
    /// Target accuracy of the step-1 model, when the method has a step 1.
    pub step1_target_accuracy: Option<f64>,
    /// Largest change of any source-encoder or classifier parameter during
    /// step 2; always exactly 0 for completed runs.
    pub frozen_drift: f64,
    pub d_updates: usize,
    pub g_updates: usize,
    pub traces: Traces,
}

/// Divergence errors carry the step they happened in.
fn at(step: &str, epoch: usize, batch: usize) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Diverged { what, .. } => Error::Diverged {
            what,
            at: format!("{step} epoch {epoch} batch {batch}"),
        },
        other => other,
    }
}

fn token_slices<'a, T, F>(items: &'a [T], idx: &[usize], f: F) -> Vec<&'a [u32]>
where
    F: Fn(&'a T) -> &'a [u32],
{
    idx.iter().map(|&i| f(&items[i])).collect()
}

fn labels_of(items: &[Labeled], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| items[i].label).collect()
}

/// Argmax class per document; ties go to the lower class index.
pub fn predict(encoder: &impl SequenceEncoder, classifier: &Classifier, docs: &[&[u32]]) -> Result<Vec<usize>> {
    let k = classifier.num_classes();
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(256) {
        let logits = classifier.logits(&encoder.encode_batch(chunk)?)?;
        let v = logits.values();
        for row in v.chunks(k) {
            let best = (1..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

pub fn evaluate(encoder: &impl SequenceEncoder, classifier: &Classifier, data: &[Labeled]) -> Result<f64> {
    let docs: Vec<&[u32]> = data.iter().map(|x| x.tokens.as_slice()).collect();
    let labels: Vec<usize> = data.iter().map(|x| x.label).collect();
    accuracy(&predict(encoder, classifier, &docs)?, &labels)
}

#[derive(Clone, Debug)]
pub struct Step1Report {
    pub source_dev_accuracy: f64,
    pub trace: Vec<f64>,
    pub batches_per_epoch: usize,
}

/// Trains the source encoder and classifier with cross-entropy, then copies
/// the encoder into the target encoder and freezes the source side.
pub fn step1_finetune(
    bundle: &mut ModelBundle,
    ds: &DomainPairDataset,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<Step1Report> {
    let params: Vec<Param> = bundle
        .trainable(Component::SourceEncoder)
        .into_iter()
        .chain(bundle.trainable(Component::Classifier))
        .collect();
    if params.is_empty() {
        return Err(Error::invalid("step 1 needs an unfrozen source encoder and classifier"));
    }
    let mut adam = Adam::new(cfg.step1.lr);
    let mut trace = Vec::new();
    let mut batches_per_epoch = 0;
    for epoch in 0..cfg.step1.epochs {
        let batches = batch_iter(ds.source_train.len(), cfg.step1.batch, seed, tag::SOURCE_BATCHES, epoch)?;
        batches_per_epoch = batches.len();
        for (b, idx) in batches.iter().enumerate() {
            let docs = token_slices(&ds.source_train, idx, |x| &x.tokens);
            let logits = bundle.classifier.logits(&bundle.source.encode_batch(&docs)?)?;
            let loss = source_ce(&logits, &labels_of(&ds.source_train, idx)).map_err(at("step1", epoch, b))?;
            zero_grads(&params);
            loss.backward()?;
            adam.step(&params)?;
            trace.push(loss.value());
        }
    }
    let source_dev_accuracy = evaluate(&bundle.source, &bundle.classifier, &ds.source_dev)?;
    bundle.copy_source_to_target();
    bundle.set_frozen(Component::SourceEncoder, true);
    bundle.set_frozen(Component::Classifier, true);
    Ok(Step1Report {
        source_dev_accuracy,
        trace,
        batches_per_epoch,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Step2Report {
    pub traces: Traces,
    pub d_updates: usize,
    pub g_updates: usize,
    pub frozen_drift: f64,
}

/// Number of lockstep pairs per epoch: the longer of the two batch lists;
/// the shorter one wraps around.
fn lockstep<'a>(a: &'a [Vec<usize>], b: &'a [Vec<usize>]) -> impl Iterator<Item = (&'a [usize], &'a [usize])> {
    let n = a.len().max(b.len());
    (0..n).map(move |i| (a[i % a.len()].as_slice(), b[i % b.len()].as_slice()))
}

/// Alternates discriminator and target-encoder updates. Requires a completed
/// step 1 (source encoder and classifier frozen).
pub fn step2_adapt(
    bundle: &mut ModelBundle,
    ds: &DomainPairDataset,
    cfg: &AdaptConfig,
    objective: TargetLoss,
    seed: u64,
) -> Result<Step2Report> {
    if !bundle.is_frozen(Component::SourceEncoder) || !bundle.is_frozen(Component::Classifier) {
        return Err(Error::invalid("step 2 requires a frozen source encoder and classifier"));
    }
    if ds.source_train.is_empty() || ds.target_train.is_empty() {
        return Err(Error::invalid("step 2 needs source and target training data"));
    }
    let s2 = &cfg.step2;
    let frozen_params: Vec<Param> = bundle
        .params_of(Component::SourceEncoder)
        .into_iter()
        .chain(bundle.params_of(Component::Classifier))
        .collect();
    let before = snapshot(&frozen_params);
    let d_params = bundle.trainable(Component::Discriminator);
    let e_params = bundle.trainable(Component::TargetEncoder);
    let mut d_adam = Adam::new(s2.lr);
    let mut e_adam = Adam::new(s2.lr);
    let mut report = Step2Report::default();

    for epoch in 0..s2.epochs {
        let sb = batch_iter(ds.source_train.len(), s2.batch, seed, tag::STEP2_SOURCE_BATCHES, epoch)?;
        let tb = batch_iter(ds.target_train.len(), s2.batch, seed, tag::STEP2_TARGET_BATCHES, epoch)?;
        for (b, (s_idx, t_idx)) in lockstep(&sb, &tb).enumerate() {
            let located = at("step2", epoch, b);
            let src = token_slices(&ds.source_train, s_idx, |x| &x.tokens);
            let tgt = token_slices(&ds.target_train, t_idx, |x| &x.tokens);
            let src_rep = bundle.source.encode_batch(&src)?;

            for _ in 0..s2.d_steps_per_g_step {
                let tgt_rep = bundle.target.encode_batch(&tgt)?.detach();
                let d = &bundle.discriminator;
                let loss = dis_loss(&d.probability(&src_rep)?, &d.probability(&tgt_rep)?).map_err(&located)?;
                zero_grads(&d_params);
                loss.backward()?;
                clip_grad_value(&d_params, s2.clip_value)?;
                d_adam.step(&d_params)?;
                if s2.weight_clip {
                    clip_weights(&d_params, s2.clip_value);
                }
                report.traces.dis.push(loss.value());
                report.d_updates += 1;
            }

            let gen =
                gen_loss(&bundle.discriminator.probability(&bundle.target.encode_batch(&tgt)?)?).map_err(&located)?;
            let total = match objective {
                TargetLoss::Distill { weight: 0.0, .. } => gen.clone(),
                TargetLoss::Distill { temperature, weight } => {
                    let teacher = bundle.classifier.logits(&src_rep)?;
                    let student = bundle.classifier.logits(&bundle.target.encode_batch(&src)?)?;
                    let kd = kd_loss(&teacher, &student, Temperature::new(temperature)?)
                        .and_then(|kd| kd.scaled(weight, "kd"))
                        .map_err(&located)?;
                    report.traces.regulariser.push(kd.value());
                    target_objective(&gen, &kd).map_err(&located)?
                }
                TargetLoss::Supervised => {
                    let logits = bundle.classifier.logits(&bundle.target.encode_batch(&src)?)?;
                    let labels = labels_of(&ds.source_train, s_idx);
                    let total = target_objective_supervised(&gen, &logits, &labels).map_err(&located)?;
                    report.traces.regulariser.push(total.value() - gen.value());
                    total
                }
            };
            zero_grads(&e_params);
            total.backward()?;
            // The generator pass also reaches the discriminator; those
            // gradients are discarded before its next update.
            zero_grads(&d_params);
            clip_grad_norm(&e_params, s2.clip_norm)?;
            e_adam.step(&e_params)?;
            report.traces.gen.push(gen.value());
            report.g_updates += 1;
        }
    }

    report.frozen_drift = max_drift(&frozen_params, &before);
    if report.frozen_drift != 0.0 {
        return Err(Error::Invariant(format!(
            "frozen parameters moved by {} during step 2",
            report.frozen_drift
        )));
    }
    Ok(report)
}

fn alignment_loss(
    method: Method,
    bundle: &ModelBundle,
    src_rep: &Tensor,
    tgt_rep: &Tensor,
    lambda: f64,
) -> Result<LossValue> {
    match method {
        Method::Ddc => {
            let sigma = median_bandwidth(src_rep, tgt_rep)?;
            mmd_gaussian(src_rep, tgt_rep, &[sigma])
        }
        Method::Coral => coral_loss(src_rep, tgt_rep),
        Method::Dann => {
            let d = &bundle.discriminator;
            let ps = d.probability(&reverse_gradient(src_rep, lambda)?)?;
            let pt = d.probability(&reverse_gradient(tgt_rep, lambda)?)?;
            dis_loss(&ps, &pt)
        }
        other => Err(Error::invalid(format!("{other} has no alignment loss"))),
    }
}

/// Single-phase training of the shared (source) encoder on source
/// cross-entropy plus a weighted alignment loss between source and target
/// batch representations. With weight 0 this is exactly step 1.
pub fn train_aligned(
    bundle: &mut ModelBundle,
    ds: &DomainPairDataset,
    cfg: &AdaptConfig,
    method: Method,
    seed: u64,
) -> Result<Traces> {
    let mut params: Vec<Param> = bundle
        .trainable(Component::SourceEncoder)
        .into_iter()
        .chain(bundle.trainable(Component::Classifier))
        .collect();
    let align = cfg.align_weight > 0.0;
    if method == Method::Dann && align {
        params.extend(bundle.trainable(Component::Discriminator));
    }
    if align && ds.target_train.is_empty() {
        return Err(Error::invalid("alignment needs unlabeled target data"));
    }
    let mut adam = Adam::new(cfg.step1.lr);
    let mut traces = Traces::default();
    for epoch in 0..cfg.step1.epochs {
        let sb = batch_iter(ds.source_train.len(), cfg.step1.batch, seed, tag::SOURCE_BATCHES, epoch)?;
        let tb = batch_iter(
            ds.target_train.len().max(1),
            cfg.step1.batch,
            seed,
            tag::TARGET_BATCHES,
            epoch,
        )?;
        for (b, s_idx) in sb.iter().enumerate() {
            let located = at("train", epoch, b);
            let src = token_slices(&ds.source_train, s_idx, |x| &x.tokens);
            let src_rep = bundle.source.encode_batch(&src)?;
            let logits = bundle.classifier.logits(&src_rep)?;
            let ce = source_ce(&logits, &labels_of(&ds.source_train, s_idx)).map_err(&located)?;
            let loss = if align {
                let t_idx = &tb[b % tb.len()];
                let tgt = token_slices(&ds.target_train, t_idx, |x| &x.tokens);
                let tgt_rep = bundle.source.encode_batch(&tgt)?;
                let a = alignment_loss(method, bundle, &src_rep, &tgt_rep, cfg.dann_lambda)
                    .and_then(|a| a.scaled(cfg.align_weight, "align"))
                    .map_err(&located)?;
                traces.align.push(a.value());
                ce.plus(&a, "total").map_err(&located)?
            } else {
                ce.clone()
            };
            zero_grads(&params);
            loss.backward()?;
            adam.step(&params)?;
            traces.step1.push(ce.value());
        }
    }
    Ok(traces)
}

/// One (pair, method, seed) run end to end. Returns the trained bundle for
/// checkpointing.
pub fn run_method(
    pair: &str,
    variant: &str,
    method: Method,
    ds: &DomainPairDataset,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<(RunResult, ModelBundle)> {
    cfg.validate()?;
    let mut bundle = ModelBundle::init(&cfg.model, seed)?;
    let mut result = RunResult {
        pair: pair.to_string(),
        method,
        variant: variant.to_string(),
        seed,
        target_accuracy: 0.0,
        source_dev_before: 0.0,
        source_dev_after: 0.0,
        step1_target_accuracy: None,
        frozen_drift: 0.0,
        d_updates: 0,
        g_updates: 0,
        traces: Traces::default(),
    };
    match method {
        Method::Baseline | Method::Aad | Method::AadSupervised | Method::Adda => {
            let s1 = step1_finetune(&mut bundle, ds, cfg, seed)?;
            result.source_dev_before = s1.source_dev_accuracy;
            result.traces.step1 = s1.trace;
            let step1_target = evaluate(&bundle.source, &bundle.classifier, &ds.target_eval)?;
            result.step1_target_accuracy = Some(step1_target);
            match TargetLoss::for_method(method, &cfg.step2) {
                None => {
                    result.source_dev_after = s1.source_dev_accuracy;
                    result.target_accuracy = step1_target;
                }
                Some(objective) => {
                    let s2 = step2_adapt(&mut bundle, ds, cfg, objective, seed)?;
                    result.traces.dis = s2.traces.dis;
                    result.traces.gen = s2.traces.gen;
                    result.traces.regulariser = s2.traces.regulariser;
                    result.frozen_drift = s2.frozen_drift;
                    result.d_updates = s2.d_updates;
                    result.g_updates = s2.g_updates;
                    result.source_dev_after = evaluate(&bundle.target, &bundle.classifier, &ds.source_dev)?;
                    result.target_accuracy = evaluate(&bundle.target, &bundle.classifier, &ds.target_eval)?;
                }
            }
        }
        Method::Ddc | Method::Dann | Method::Coral => {
            result.traces = train_aligned(&mut bundle, ds, cfg, method, seed)?;
            let dev = evaluate(&bundle.source, &bundle.classifier, &ds.source_dev)?;
            result.source_dev_before = dev;
            result.source_dev_after = dev;
            result.target_accuracy = evaluate(&bundle.source, &bundle.classifier, &ds.target_eval)?;
        }
    }
    Ok((result, bundle))
}

/// A column of an experiment: a method plus the config it runs with.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub method: Method,
    pub config: AdaptConfig,
}

impl Variant {
    pub fn new(method: Method, config: &AdaptConfig) -> Self {
        Variant {
            name: method.as_str().to_string(),
            method,
            config: config.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub pair: String,
    pub variant: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct ExperimentOutcome {
    /// In (pair, variant, seed) input order.
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    /// Trained bundles keyed like `runs`, kept only when requested.
    pub checkpoints: BTreeMap<(String, String, u64), crate::models::Checkpoint>,
}

/// Runs the full (pair x variant x seed) product on up to `jobs` threads.
/// Failed runs are recorded in `failures`, never dropped.
pub fn run_experiment(
    pairs: &[(String, DomainPairDataset)],
    variants: &[Variant],
    seeds: &[u64],
    jobs: usize,
    keep_checkpoints: bool,
) -> Result<ExperimentOutcome> {
    if pairs.is_empty() || variants.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("an experiment needs at least one pair, method and seed"));
    }
    for v in variants {
        v.config.validate()?;
    }
    let work: Vec<(usize, usize, u64)> = (0..pairs.len())
        .flat_map(|p| (0..variants.len()).flat_map(move |v| seeds.iter().map(move |&s| (p, v, s))))
        .collect();
    let next = AtomicUsize::new(0);
    let outcome = Mutex::new(ExperimentOutcome::default());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(p, v, seed)) = work.get(i) else { break };
                let (pair, ds) = &pairs[p];
                let variant = &variants[v];
                let res = run_method(pair, &variant.name, variant.method, ds, &variant.config, seed);
                let mut out = outcome.lock().expect("result lock poisoned");
                match res {
                    Ok((run, bundle)) => {
                        if keep_checkpoints {
                            out.checkpoints
                                .insert((pair.clone(), variant.name.clone(), seed), bundle.checkpoint());
                        }
                        out.runs.push(run);
                    }
                    Err(e) => out.failures.push(RunFailure {
                        pair: pair.clone(),
                        variant: variant.name.clone(),
                        seed,
                        error: e.to_string(),
                    }),
                }
            });
        }
    });
    let mut outcome = outcome.into_inner().expect("result lock poisoned");
    let key = |pair: &str, variant: &str, seed: u64| {
        (
            pairs.iter().position(|(p, _)| p == pair),
            variants.iter().position(|v| v.name == variant),
            seeds.iter().position(|&s| s == seed),
        )
    };
    outcome.runs.sort_by_key(|r| key(&r.pair, &r.variant, r.seed));
    outcome.failures.sort_by_key(|f| key(&f.pair, &f.variant, f.seed));
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain_pair, GeneratorConfig};

    fn tiny() -> (DomainPairDataset, AdaptConfig) {
        let ds = generate_domain_pair(&GeneratorConfig {
            per_class: 40,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let mut cfg = AdaptConfig::default();
        cfg.model.hidden_dim = 16;
        cfg.model.embed_dim = 8;
        cfg.step1.batch = 16;
        cfg.step2.batch = 16;
        (ds, cfg)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("bert".parse::<Method>().is_err());
    }

    #[test]
    fn step1_copies_and_freezes() {
        let (ds, cfg) = tiny();
        let mut bundle = ModelBundle::init(&cfg.model, 1).unwrap();
        let report = step1_finetune(&mut bundle, &ds, &cfg, 1).unwrap();
        assert_eq!(report.trace.len(), 3 * 4);
        assert!(bundle.is_frozen(Component::SourceEncoder));
        assert!(bundle.is_frozen(Component::Classifier));
        let doc: &[u32] = &ds.target_eval[0].tokens;
        assert_eq!(
            bundle.source.encode(doc).unwrap().to_vec(),
            bundle.target.encode(doc).unwrap().to_vec()
        );
    }

    #[test]
    fn step2_bookkeeping_and_frozen_side() {
        let (ds, mut cfg) = tiny();
        cfg.step2.d_steps_per_g_step = 2;
        let mut bundle = ModelBundle::init(&cfg.model, 2).unwrap();
        step1_finetune(&mut bundle, &ds, &cfg, 2).unwrap();
        let objective = TargetLoss::for_method(Method::Aad, &cfg.step2).unwrap();
        let report = step2_adapt(&mut bundle, &ds, &cfg, objective, 2).unwrap();
        assert_eq!(report.g_updates, 3 * 4);
        assert_eq!(report.d_updates, 2 * report.g_updates);
        assert_eq!(report.frozen_drift, 0.0);
    }

    #[test]
    fn step2_requires_step1() {
        let (ds, cfg) = tiny();
        let mut bundle = ModelBundle::init(&cfg.model, 3).unwrap();
        assert!(step2_adapt(&mut bundle, &ds, &cfg, TargetLoss::Supervised, 3).is_err());
    }

    #[test]
    fn zero_alignment_weight_matches_baseline() {
        let (ds, mut cfg) = tiny();
        cfg.align_weight = 0.0;
        let (base, _) = run_method("p", "baseline", Method::Baseline, &ds, &cfg, 4).unwrap();
        for m in [Method::Ddc, Method::Dann, Method::Coral] {
            let (r, _) = run_method("p", m.as_str(), m, &ds, &cfg, 4).unwrap();
            assert_eq!(r.target_accuracy, base.target_accuracy);
            assert_eq!(r.traces.step1, base.traces.step1);
        }
    }

    #[test]
    fn predict_breaks_ties_low() {
        let (_, cfg) = tiny();
        let bundle = ModelBundle::init(&cfg.model, 5).unwrap();
        for p in bundle.classifier.params() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let docs: Vec<&[u32]> = vec![&[1, 2], &[3]];
        assert_eq!(predict(&bundle.source, &bundle.classifier, &docs).unwrap(), vec![0, 0]);
    }

    #[test]
    fn experiment_is_complete_and_ordered() {
        let (ds, mut cfg) = tiny();
        cfg.step1.epochs = 1;
        cfg.step2.epochs = 1;
        let pairs = vec![("p".to_string(), ds)];
        let variants = vec![Variant::new(Method::Baseline, &cfg), Variant::new(Method::Aad, &cfg)];
        let out = run_experiment(&pairs, &variants, &[3, 1], 2, false).unwrap();
        assert!(out.failures.is_empty());
        let keys: Vec<(String, u64)> = out.runs.iter().map(|r| (r.variant.clone(), r.seed)).collect();
        assert_eq!(
            keys,
            vec![
                ("baseline".into(), 3),
                ("baseline".into(), 1),
                ("aad".into(), 3),
                ("aad".into(), 1)
            ]
        );
        let again = run_experiment(&pairs, &variants, &[3, 1], 1, false).unwrap();
        assert_eq!(out.runs, again.runs);
    }

    #[test]
    fn failures_are_recorded() {
        let (ds, cfg) = tiny();
        let mut empty = ds.clone();
        empty.target_train.clear();
        let pairs = vec![("broken".to_string(), empty)];
        let out = run_experiment(&pairs, &[Variant::new(Method::Aad, &cfg)], &[1], 1, false).unwrap();
        assert!(out.runs.is_empty());
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].pair, "broken");
    }
}

//! Fine-tuning loop for both detection modes: AdamW over the trainable
//! parameters (adapters + classifier head on a frozen base), global-norm
//! gradient clipping, per-epoch validation with best-checkpoint retention,
//! and wall-clock instrumentation that times the training region only.
//!
//! Per-example loss graphs are built in parallel; gradients are reduced
//! sequentially in example order, so runs are bitwise deterministic for a
//! fixed seed regardless of thread count.

pub mod adamw;

pub use adamw::{clip_global_norm, global_norm, AdamW, AdamWConfig, GradMap};

use crate::clsmode::{build_cls_input, cls_loss, predict, ClsInput, DEFAULT_CLS_INSTRUCTION};
use crate::datapipe::{Label, LabeledExample};
use crate::genmode::{
    build_prompt, genmode_loss, predict_gen, verdict_target_ids, GenError, GenerationBudget,
    PromptTemplate, Verdict,
};
use crate::metrics::{Confusion, MetricsError};
use crate::model::{ForwardCtx, Mode, Model, ModelError};
use crate::numerics::{Graph, NumericsError, Scalar};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tokenizer::TokenId;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyData,
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("config asks for {expected} mode but the model is set up for {found}")]
    ModeMismatch { expected: Mode, found: Mode },
    #[error("non-finite gradient in {param}[{index}] = {value}; aborting")]
    NonFiniteGrad {
        param: String,
        index: usize,
        value: f64,
    },
    #[error("non-finite loss {value} at epoch {epoch}, step {step}; aborting")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
    #[error("gradient for {param} has {found} entries, parameter has {expected}")]
    GradShape {
        param: String,
        expected: usize,
        found: usize,
    },
    #[error("gradient for unknown parameter {param:?}")]
    UnknownParam { param: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Hyperparameters for one fine-tuning run. The defaults are the reference
/// recipe: batch 10, lr 5e-5, 5 epochs, AdamW(0.9, 0.999, 1e-8, 0.01),
/// global-norm clip 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub epochs: usize,
    pub adamw: AdamWConfig,
    /// Maximum global gradient norm per step.
    pub grad_clip: f64,
    pub seed: u64,
    /// Decode budget for generative validation/evaluation.
    pub gen_budget_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cls,
            batch_size: 10,
            epochs: 5,
            adamw: AdamWConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            gen_budget_tokens: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            )));
        }
        if self.gen_budget_tokens < 1 {
            return Err(TrainError::BadConfig(
                "gen_budget_tokens must be >= 1".into(),
            ));
        }
        self.adamw.validate()
    }

    pub fn budget(&self) -> GenerationBudget {
        GenerationBudget {
            max_new_tokens: self.gen_budget_tokens,
            temperature: 0.0,
        }
    }
}

/// Everything measured during one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunStats {
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Wall-clock seconds spent in the training region only (monotonic
    /// clock; excludes data preparation and validation).
    pub total_seconds: f64,
    /// Model forward passes over the whole run, validation included.
    pub forward_passes: u64,
    pub optimizer_steps: u64,
    pub val_accuracy: Vec<f64>,
    pub val_parse_rate: Vec<f64>,
    /// Epoch (0-based) whose checkpoint was retained; ties keep the
    /// earliest.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Validation confusion at the best epoch.
    pub final_confusion: Confusion,
}

/// A finished run: the stats and the retained best-validation checkpoint.
#[derive(Debug)]
pub struct TrainOutput<S: Scalar> {
    pub stats: TrainRunStats,
    pub best: Model<S>,
}

/// Tokenized form of one example, ready for a loss graph.
#[derive(Debug, Clone)]
enum PreparedExample {
    Cls { input: ClsInput, label: Label },
    Gen { prompt: Vec<TokenId>, target: Vec<TokenId> },
}

fn prepare<S: Scalar>(
    model: &Model<S>,
    data: &[LabeledExample],
    mode: Mode,
    budget: &GenerationBudget,
) -> Result<Vec<PreparedExample>> {
    let template = PromptTemplate::default();
    let max = model.cfg.max_seq_len;
    data.iter()
        .map(|ex| match mode {
            Mode::Cls => {
                let input = build_cls_input(DEFAULT_CLS_INSTRUCTION, ex.text.as_bytes(), max)?;
                Ok(PreparedExample::Cls {
                    input,
                    label: ex.label,
                })
            }
            Mode::Gen => {
                let prompt = build_prompt(&template, ex.text.as_bytes(), budget, max)?;
                Ok(PreparedExample::Gen {
                    prompt,
                    target: verdict_target_ids(ex.label == Label::Stego),
                })
            }
        })
        .collect()
}

/// One example's contribution: loss value and per-parameter gradients in
/// binding order.
type ExampleGrads = (f64, Vec<(String, Vec<f64>)>);

fn example_grads<S: Scalar>(
    model: &Model<S>,
    ex: &PreparedExample,
    dropout_seed: u64,
) -> Result<ExampleGrads> {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::training(dropout_seed);
    let loss = match ex {
        PreparedExample::Cls { input, label } => cls_loss(model, &mut g, &mut ctx, input, *label)?,
        PreparedExample::Gen { prompt, target } => {
            genmode_loss(model, &mut g, &mut ctx, prompt, target)?
        }
    };
    let value = g.value(loss).item().as_f64();
    g.backward(loss)?;
    let grads = ctx
        .bindings
        .iter()
        .map(|(name, var)| {
            let slice = g
                .grad(*var)
                .expect("bound parameters receive gradients");
            (name.clone(), slice.iter().map(|x| x.as_f64()).collect())
        })
        .collect();
    Ok((value, grads))
}

/// Sums per-example gradients in example order and divides by the batch
/// size, so the step optimizes the batch-mean loss deterministically.
fn reduce_batch(per_example: Vec<ExampleGrads>, out: &mut GradMap) -> f64 {
    let n = per_example.len() as f64;
    let mut loss_sum = 0.0;
    for (value, grads) in per_example {
        loss_sum += value;
        for (name, g) in grads {
            let slot = out.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    for g in out.values_mut() {
        for x in g.iter_mut() {
            *x /= n;
        }
    }
    loss_sum / n
}

/// Result of one evaluation sweep over a labeled dataset.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub confusion: Confusion,
    pub verdicts: Vec<Verdict>,
    /// Fraction of outputs that parsed to a verdict (always 1 in cls mode).
    pub parse_rate: f64,
    pub seconds: f64,
}

/// Runs the mode's real prediction path over `data`: one classification
/// pass per example, or a full greedy decode plus verdict parse.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    data: &[LabeledExample],
    mode: Mode,
    budget: &GenerationBudget,
) -> Result<EvalOutcome> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if mode == Mode::Cls && model.mode() != Mode::Cls {
        return Err(TrainError::ModeMismatch {
            expected: Mode::Cls,
            found: model.mode(),
        });
    }
    let template = PromptTemplate::default();
    let max = model.cfg.max_seq_len;
    let t0 = Instant::now();
    let verdicts: Vec<Verdict> = data
        .par_iter()
        .map(|ex| -> Result<Verdict> {
            match mode {
                Mode::Cls => {
                    let input = build_cls_input(DEFAULT_CLS_INSTRUCTION, ex.text.as_bytes(), max)?;
                    Ok(Verdict::from(predict(model, &input)?.label))
                }
                Mode::Gen => {
                    let (verdict, _) =
                        predict_gen(model, &template, ex.text.as_bytes(), budget, max)?;
                    Ok(verdict)
                }
            }
        })
        .collect::<Result<_>>()?;
    let seconds = t0.elapsed().as_secs_f64();
    let golds: Vec<Label> = data.iter().map(|ex| ex.label).collect();
    let confusion = Confusion::from_pairs(&verdicts, &golds)?;
    let parsed = verdicts.iter().filter(|&&v| v != Verdict::Unparseable).count();
    Ok(EvalOutcome {
        confusion,
        verdicts,
        parse_rate: parsed as f64 / data.len() as f64,
        seconds,
    })
}

/// Fine-tunes `model` on `train_data`, validating on `val_data` after each
/// epoch and retaining the best-validation checkpoint (ties keep the
/// earliest epoch). `Time` covers the batched loss/backward/step region
/// only; preparation and validation run off the clock.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_data: &[LabeledExample],
    val_data: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<TrainOutput<S>> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if cfg.mode == Mode::Cls && model.mode() != Mode::Cls {
        return Err(TrainError::ModeMismatch {
            expected: Mode::Cls,
            found: model.mode(),
        });
    }
    let budget = cfg.budget();
    let prepared = prepare(model, train_data, cfg.mode, &budget)?;
    let mut opt = AdamW::new(cfg.adamw)?;

    let passes_at_start = model.forward_passes();
    let mut stats = TrainRunStats {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        total_seconds: 0.0,
        forward_passes: 0,
        optimizer_steps: 0,
        val_accuracy: Vec::with_capacity(cfg.epochs),
        val_parse_rate: Vec::with_capacity(cfg.epochs),
        best_epoch: cfg.epochs - 1,
        best_val_accuracy: f64::NEG_INFINITY,
        final_confusion: Confusion::default(),
    };
    let mut best: Option<Model<S>> = None;
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(
            cfg.seed,
            "shuffle",
            epoch as u64,
        )));

        let epoch_start = Instant::now();
        let mut loss_sum = 0.0;
        let mut example_count = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Assemble the batch; classification inputs are padded to the
            // batch max length (padding is masked, so results are
            // unaffected).
            let batch: Vec<PreparedExample> = match cfg.mode {
                Mode::Cls => {
                    let longest = chunk
                        .iter()
                        .map(|&i| match &prepared[i] {
                            PreparedExample::Cls { input, .. } => input.tokens.len(),
                            PreparedExample::Gen { .. } => unreachable!(),
                        })
                        .max()
                        .unwrap();
                    chunk
                        .iter()
                        .map(|&i| {
                            let PreparedExample::Cls { input, label } = &prepared[i] else {
                                unreachable!()
                            };
                            let mut padded = input.clone();
                            padded.pad_to(longest).expect("padding never shrinks");
                            PreparedExample::Cls {
                                input: padded,
                                label: *label,
                            }
                        })
                        .collect()
                }
                Mode::Gen => chunk.iter().map(|&i| prepared[i].clone()).collect(),
            };

            let per_example: Vec<ExampleGrads> = batch
                .par_iter()
                .enumerate()
                .map(|(j, ex)| {
                    let dropout_seed =
                        derive_seed(cfg.seed, "dropout", global_step * 1_000_003 + j as u64);
                    example_grads(model, ex, dropout_seed)
                })
                .collect::<Result<_>>()?;

            let mut grads = GradMap::new();
            let batch_loss = reduce_batch(per_example, &mut grads);
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    value: batch_loss,
                });
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(model, &grads)?;
            loss_sum += batch_loss * batch.len() as f64;
            example_count += batch.len();
            global_step += 1;
        }
        stats.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
        stats.epoch_losses.push(loss_sum / example_count as f64);

        // Validation runs off the training clock.
        if !val_data.is_empty() {
            let eval = evaluate(model, val_data, cfg.mode, &budget)?;
            let acc = eval.confusion.accuracy()?;
            stats.val_accuracy.push(acc);
            stats.val_parse_rate.push(eval.parse_rate);
            if acc > stats.best_val_accuracy {
                stats.best_val_accuracy = acc;
                stats.best_epoch = epoch;
                stats.final_confusion = eval.confusion;
                best = Some(model.clone());
            }
        }
    }

    stats.total_seconds = stats.epoch_seconds.iter().sum();
    stats.forward_passes = model.forward_passes() - passes_at_start;
    stats.optimizer_steps = opt.steps_taken();
    if val_data.is_empty() {
        stats.best_epoch = cfg.epochs - 1;
        stats.best_val_accuracy = f64::NAN;
    }
    let best = best.unwrap_or_else(|| model.clone());
    Ok(TrainOutput { stats, best })
}

/// Self-supervised warmup: next-token loss over raw texts (all parameters
/// trainable as given). Returns the mean loss of the final epoch. Used to
/// give the frozen base real language statistics before adapters attach.
pub fn pretrain_causal_lm<S: Scalar>(
    model: &mut Model<S>,
    texts: &[String],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if texts.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if epochs == 0 || batch_size == 0 || !(lr > 0.0) {
        return Err(TrainError::BadConfig(
            "pretraining needs epochs >= 1, batch >= 1, lr > 0".into(),
        ));
    }
    let max = model.cfg.max_seq_len;
    let prepared: Vec<PreparedExample> = texts
        .iter()
        .map(|t| {
            let mut bytes = t.as_bytes().to_vec();
            bytes.truncate(max - 2);
            PreparedExample::Gen {
                prompt: vec![crate::tokenizer::BOS],
                target: bytes.iter().map(|&b| b as TokenId).collect(),
            }
        })
        .collect();
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        ..AdamWConfig::default()
    })?;
    let mut last_epoch_loss = f64::NAN;
    let mut global_step = 0u64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(seed, "pre-shuffle", epoch as u64)));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let per_example: Vec<ExampleGrads> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let dropout_seed =
                        derive_seed(seed, "pre-dropout", global_step * 1_000_003 + j as u64);
                    example_grads(model, &prepared[i], dropout_seed)
                })
                .collect::<Result<_>>()?;
            let mut grads = GradMap::new();
            let batch_loss = reduce_batch(per_example, &mut grads);
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: global_step as usize,
                    value: batch_loss,
                });
            }
            clip_global_norm(&mut grads, 1.0);
            opt.step(model, &grads)?;
            loss_sum += batch_loss * chunk.len() as f64;
            global_step += 1;
        }
        last_epoch_loss = loss_sum / prepared.len() as f64;
    }
    Ok(last_epoch_loss)
}

/// Timing comparison of the two modes on identical data, model size, and
/// epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBenchmark {
    pub gen: TrainRunStats,
    pub cls: TrainRunStats,
    pub gen_seconds: f64,
    pub cls_seconds: f64,
    /// (T_gen − T_cls) / T_gen.
    pub reduction: f64,
}

/// Trains one fresh model per mode from the same initialization and data,
/// and reports the wall-clock reduction of classification over generation.
pub fn benchmark_modes<S: Scalar>(
    train_data: &[LabeledExample],
    val_data: &[LabeledExample],
    model_cfg: &crate::model::ModelConfig,
    lora_cfg: &crate::lora::LoraConfig,
    model_seed: u64,
    gen_cfg: &TrainConfig,
    cls_cfg: &TrainConfig,
) -> Result<ModeBenchmark> {
    if gen_cfg.mode != Mode::Gen || cls_cfg.mode != Mode::Cls {
        return Err(TrainError::BadConfig(
            "benchmark needs one gen config and one cls config".into(),
        ));
    }
    if gen_cfg.epochs != cls_cfg.epochs {
        return Err(TrainError::BadConfig(format!(
            "benchmark epochs must match: {} vs {}",
            gen_cfg.epochs, cls_cfg.epochs
        )));
    }
    let run = |mode: Mode, cfg: &TrainConfig| -> Result<TrainRunStats> {
        let mut model: Model<S> = Model::new(model_cfg.clone(), model_seed)?;
        if mode == Mode::Cls {
            model.add_classifier_head(derive_seed(model_seed, "cls-head", 0));
        }
        model.attach_lora(lora_cfg, derive_seed(model_seed, "lora", 0))?;
        model.freeze_base();
        Ok(train(&mut model, train_data, val_data, cfg)?.stats)
    };
    let gen = run(Mode::Gen, gen_cfg)?;
    let cls = run(Mode::Cls, cls_cfg)?;
    let gen_seconds = gen.total_seconds;
    let cls_seconds = cls.total_seconds;
    let reduction = (gen_seconds - cls_seconds) / gen_seconds;
    Ok(ModeBenchmark {
        gen,
        cls,
        gen_seconds,
        cls_seconds,
        reduction,
    })
}

//! The eight verbs: synthesize corpora, prepare splits, train, evaluate,
//! benchmark the two modes, ablate the adapter rank, self-check gradients,
//! and re-render stored reports.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use lsgc_core::datapipe::{
    balance, filter, read_corpus, read_split, split, write_corpus, write_split, FilterRules,
    LabeledExample, SplitSpec,
};
use lsgc_core::genmode::GenerationBudget;
use lsgc_core::lora::{AttnProj, LoraConfig};
use lsgc_core::metrics::{percent, Report, ReportRow, RunProvenance, SeedStats};
use lsgc_core::model::{checkpoint, Mode, Model, ModelConfig};
use lsgc_core::rng::derive_seed;
use lsgc_core::selfcheck;
use lsgc_core::stegsynth::{synthesize, MarkovLM, PoolDial, SynthSpec};
use lsgc_core::trainer::{
    benchmark_modes, evaluate, train, AdamWConfig, TrainConfig, TrainOutput,
};
use serde::Serialize;

use crate::config::Config;
use crate::error::CliError;
use crate::manifest::RunManifest;

/// Everything a command needs besides its own config section: the parsed
/// config, output directory, and the global flag overrides.
pub struct Ctx {
    pub config: Config,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    /// The invocation, reconstructed for the run manifest.
    pub argv: String,
}

impl Ctx {
    fn seed_or(&self, section: &str, default: u64) -> Result<u64, CliError> {
        match self.seed {
            Some(s) => Ok(s),
            None => self.config.get_or(section, "seed", default),
        }
    }

    fn manifest(&self, seed: u64) -> RunManifest {
        RunManifest::start(
            self.argv.clone(),
            &self.config.path,
            &self.config.hash,
            seed,
            &self.out,
        )
    }

    fn ensure_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Io(format!("out dir {}: {e}", self.out.display())))
    }
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    match s {
        "gen" => Ok(Mode::Gen),
        "cls" => Ok(Mode::Cls),
        other => Err(CliError::Usage(format!(
            "mode must be 'gen' or 'cls', got {other:?}"
        ))),
    }
}

fn mode_from(ctx: &Ctx, section: &str) -> Result<Mode, CliError> {
    if let Some(m) = ctx.mode {
        return Ok(m);
    }
    match ctx.config.raw(section, "mode") {
        Some(s) => parse_mode(s),
        None => Err(CliError::Usage(format!(
            "no mode: pass --mode or set [{section}] mode"
        ))),
    }
}

fn model_cfg_from(config: &Config) -> Result<ModelConfig, CliError> {
    let d = ModelConfig::default();
    let cfg = ModelConfig {
        n_layers: config.get_or("model", "n_layers", d.n_layers)?,
        n_heads: config.get_or("model", "n_heads", d.n_heads)?,
        d_model: config.get_or("model", "d_model", d.d_model)?,
        d_ff: config.get_or("model", "d_ff", d.d_ff)?,
        max_seq_len: config.get_or("model", "max_seq_len", d.max_seq_len)?,
        dropout: config.get_or("model", "dropout", d.dropout)?,
        vocab_size: d.vocab_size,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_targets(s: &str) -> Result<BTreeSet<AttnProj>, CliError> {
    let mut out = BTreeSet::new();
    for ch in s.chars() {
        out.insert(match ch {
            'q' => AttnProj::Query,
            'k' => AttnProj::Key,
            'v' => AttnProj::Value,
            'o' => AttnProj::Output,
            other => {
                return Err(CliError::Usage(format!(
                    "lora targets must use q/k/v/o, got {other:?}"
                )))
            }
        });
    }
    if out.is_empty() {
        return Err(CliError::Usage("lora targets are empty".into()));
    }
    Ok(out)
}

fn lora_cfg_from(config: &Config) -> Result<Option<LoraConfig>, CliError> {
    if !config.has_section("lora") {
        return Ok(None);
    }
    let r: usize = config.get_or("lora", "r", 8)?;
    let mut lc = LoraConfig::with_rank(r);
    if let Some(alpha) = config.get::<f64>("lora", "alpha")? {
        lc.lora_alpha = alpha;
    }
    lc.lora_dropout = config.get_or("lora", "dropout", lc.lora_dropout)?;
    if let Some(t) = config.raw("lora", "targets") {
        lc.targets = parse_targets(t)?;
    }
    lc.validate()
        .map_err(|e| CliError::Usage(format!("lora config: {e}")))?;
    Ok(Some(lc))
}

fn train_cfg_from(
    config: &Config,
    section: &str,
    mode: Mode,
    seed: u64,
) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let adamw = AdamWConfig {
        lr: config.get_or(section, "lr", d.adamw.lr)?,
        weight_decay: config.get_or(section, "weight_decay", d.adamw.weight_decay)?,
        ..d.adamw
    };
    let cfg = TrainConfig {
        mode,
        batch_size: config.get_or(section, "batch_size", d.batch_size)?,
        epochs: config.get_or(section, "epochs", d.epochs)?,
        adamw,
        grad_clip: config.get_or(section, "grad_clip", d.grad_clip)?,
        seed,
        gen_budget_tokens: config.get_or(section, "gen_budget_tokens", d.gen_budget_tokens)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the mode's model: fresh trunk, classifier head when needed,
/// adapters when configured, frozen base when adapters are present.
fn build_model(
    config: &Config,
    model_cfg: &ModelConfig,
    mode: Mode,
    model_seed: u64,
) -> Result<Model<f32>, CliError> {
    let mut model: Model<f32> = Model::new(model_cfg.clone(), model_seed)?;
    if mode == Mode::Cls {
        model.add_classifier_head(derive_seed(model_seed, "cls-head", 0));
    }
    if let Some(lora) = lora_cfg_from(config)? {
        model.attach_lora(&lora, derive_seed(model_seed, "lora", 0))?;
        if config.get_or("train", "freeze_base", true)? {
            model.freeze_base();
        }
    }
    Ok(model)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("encode {}: {e}", path.display())))?;
    std::fs::write(path, json + "\n")
        .map_err(|e| CliError::Io(format!("write {}: {e}", path.display())))
}

fn require_split(dir: &Path, name: &str) -> Result<Vec<LabeledExample>, CliError> {
    let path = dir.join(format!("{name}.jsonl"));
    if !path.exists() {
        return Err(CliError::Data(format!(
            "missing split {}: run prepare first",
            path.display()
        )));
    }
    Ok(read_split(&path)?.1)
}

// ---------------------------------------------------------------- synth --

#[derive(Debug, Serialize)]
struct SynthFile {
    dial: String,
    file: String,
    records: usize,
    mean_bpw: f64,
}

pub fn cmd_synth(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let seed = ctx.seed_or("synth", 0)?;
    let cfg = &ctx.config;
    let n_covers: usize = cfg.require("synth", "n_covers")?;
    let n_stegos: usize = cfg.require("synth", "n_stegos")?;
    let d = SynthSpec::default();
    let min_len: usize = cfg.get_or("synth", "min_len", d.min_len)?;
    let max_len: usize = cfg.get_or("synth", "max_len", d.max_len)?;
    let dials: Vec<PoolDial> = match cfg.list("synth", "dials") {
        Some(items) => items
            .iter()
            .map(|s| s.parse::<PoolDial>().map_err(CliError::Usage))
            .collect::<Result<_, _>>()?,
        None => vec![d.dial],
    };
    if dials.is_empty() {
        return Err(CliError::Usage("[synth] dials is empty".into()));
    }

    let manifest = ctx.manifest(seed);
    let lm = MarkovLM::bundled();
    let mut summary = Vec::new();
    let mut covers_written = false;
    for dial in &dials {
        let spec = SynthSpec {
            n_covers,
            n_stegos,
            min_len,
            max_len,
            dial: *dial,
            seed,
        };
        let (covers, stegos) = synthesize(lm, &spec)?;
        if !covers_written {
            // Covers are dial-independent for a fixed seed: one file.
            let path = ctx.out.join("covers.jsonl");
            write_corpus(&path, &covers)?;
            summary.push(SynthFile {
                dial: "-".into(),
                file: "covers.jsonl".into(),
                records: covers.len(),
                mean_bpw: 0.0,
            });
            covers_written = true;
        }
        let name = format!("stego_{}.jsonl", dial.tag());
        let path = ctx.out.join(&name);
        write_corpus(&path, &stegos)?;
        let mean_bpw = stegos.iter().map(|e| e.bpw).sum::<f64>() / stegos.len().max(1) as f64;
        summary.push(SynthFile {
            dial: dial.tag(),
            file: name,
            records: stegos.len(),
            mean_bpw,
        });
    }
    write_json(&ctx.out.join("synth.json"), &summary)?;
    for s in &summary {
        println!(
            "{:<18} {:>6} records  dial {:<6} mean bpw {:.3}",
            s.file, s.records, s.dial, s.mean_bpw
        );
    }
    manifest.finish()?;
    Ok(())
}

// -------------------------------------------------------------- prepare --

pub fn cmd_prepare(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let seed = ctx.seed_or("prepare", 0)?;
    let cfg = &ctx.config;
    let covers_path: PathBuf = cfg.require("prepare", "covers")?;
    let stegos_path: PathBuf = cfg.require("prepare", "stegos")?;
    for p in [&covers_path, &stegos_path] {
        if !p.exists() {
            return Err(CliError::Data(format!("missing corpus {}", p.display())));
        }
    }
    let dflt = FilterRules::default();
    let rules = FilterRules {
        min_len: cfg.get_or("prepare", "min_len", dflt.min_len)?,
        max_len: cfg.get_or("prepare", "max_len", dflt.max_len)?,
        min_printable_frac: cfg.get_or("prepare", "min_printable_frac", dflt.min_printable_frac)?,
    };

    let manifest = ctx.manifest(seed);
    let covers = read_corpus(&covers_path)?;
    let stegos = read_corpus(&stegos_path)?;
    let before = covers.len() + stegos.len();
    let (kept_covers, rejected_covers) = filter(covers, &rules);
    let (kept_stegos, rejected_stegos) = filter(stegos, &rules);
    let rejected = rejected_covers.len() + rejected_stegos.len();
    let n_per_class: usize = cfg.get_or(
        "prepare",
        "n_per_class",
        kept_covers.len().min(kept_stegos.len()),
    )?;
    let balanced = balance(kept_covers, kept_stegos, n_per_class, seed)?;
    let (train_set, val_set, test_set) = split(balanced, &SplitSpec { seed })?;
    write_split(&ctx.out, "train", &train_set, seed)?;
    write_split(&ctx.out, "val", &val_set, seed)?;
    write_split(&ctx.out, "test", &test_set, seed)?;
    println!(
        "prepared {} -> train {} / val {} / test {} ({} filtered out)",
        before,
        train_set.len(),
        val_set.len(),
        test_set.len(),
        rejected
    );
    manifest.finish()?;
    Ok(())
}

// ---------------------------------------------------------------- train --

#[derive(Debug, Serialize)]
struct TrainSummary {
    mode: String,
    best_epoch: usize,
    best_val_accuracy: f64,
    final_val_parse_rate: Option<f64>,
    total_seconds: f64,
    forward_passes: u64,
    checkpoint: String,
}

pub fn cmd_train(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let mode = mode_from(ctx, "train")?;
    let seed = ctx.seed_or("train", 0)?;
    let cfg = &ctx.config;
    let data_dir: PathBuf = cfg.require("train", "data_dir")?;
    let train_set = require_split(&data_dir, "train")?;
    let val_set = require_split(&data_dir, "val")?;

    let manifest = ctx.manifest(seed);
    let model_cfg = model_cfg_from(cfg)?;
    let model_seed: u64 = cfg.get_or("model", "seed", 42)?;
    let mut model = build_model(cfg, &model_cfg, mode, model_seed)?;
    let train_cfg = train_cfg_from(cfg, "train", mode, seed)?;

    let TrainOutput { stats, best } = train(&mut model, &train_set, &val_set, &train_cfg)?;

    let ckpt_path = ctx.out.join("best.ckpt");
    checkpoint::save(&best, &ckpt_path)?;
    write_json(&ctx.out.join("stats.json"), &stats)?;
    let parse_rate = if mode == Mode::Gen {
        stats.val_parse_rate.last().copied()
    } else {
        None
    };
    let summary = TrainSummary {
        mode: mode.to_string(),
        best_epoch: stats.best_epoch,
        best_val_accuracy: stats.best_val_accuracy,
        final_val_parse_rate: parse_rate,
        total_seconds: stats.total_seconds,
        forward_passes: stats.forward_passes,
        checkpoint: "best.ckpt".into(),
    };
    write_json(&ctx.out.join("train.json"), &summary)?;
    for (e, loss) in stats.epoch_losses.iter().enumerate() {
        println!(
            "epoch {e}: loss {loss:.4}  val acc {}  {:.1}s",
            percent(stats.val_accuracy[e]),
            stats.epoch_seconds[e]
        );
    }
    println!(
        "best epoch {} (val acc {}); {:.1}s training; {} forward passes",
        stats.best_epoch,
        percent(stats.best_val_accuracy),
        stats.total_seconds,
        stats.forward_passes
    );
    if let Some(p) = parse_rate {
        println!("parse rate {}", percent(p));
    }
    manifest.finish()?;
    Ok(())
}

// ----------------------------------------------------------------- eval --

pub fn cmd_eval(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let seed = ctx.seed_or("eval", 0)?;
    let seeds: u64 = ctx.config.get_or("eval", "seeds", 1)?;
    if seeds > 1 {
        return eval_multi_seed(ctx, seed, seeds);
    }
    let cfg = &ctx.config;
    let ckpt_path: PathBuf = cfg.require("eval", "checkpoint")?;
    if !ckpt_path.exists() {
        return Err(CliError::Data(format!(
            "missing checkpoint {}",
            ckpt_path.display()
        )));
    }
    let (ckpt_mode, _) = checkpoint::peek_mode(&ckpt_path)?;
    let mode = match ctx.mode {
        Some(m) => m,
        None => match cfg.raw("eval", "mode") {
            Some(s) => parse_mode(s)?,
            None => ckpt_mode,
        },
    };
    if mode != ckpt_mode {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained for {ckpt_mode} mode, cannot evaluate as {mode}",
            ckpt_path.display()
        )));
    }
    let budget = GenerationBudget {
        max_new_tokens: cfg.get_or("eval", "gen_budget_tokens", 16)?,
        ..GenerationBudget::default()
    };
    let model: Model<f32> = checkpoint::load(&ckpt_path)?;

    let manifest = ctx.manifest(seed);
    let split_paths: Vec<String> = cfg
        .list("eval", "splits")
        .or_else(|| cfg.raw("eval", "split").map(|s| vec![s.to_owned()]))
        .ok_or_else(|| CliError::Usage("missing [eval] split(s)".into()))?;
    let mut rows = Vec::new();
    for sp in &split_paths {
        let path = PathBuf::from(sp);
        if !path.exists() {
            return Err(CliError::Data(format!("missing split {}", path.display())));
        }
        let (prov, data) = read_split(&path)?;
        let outcome = evaluate(&model, &data, mode, &budget)?;
        rows.push(ReportRow {
            dataset: prov.split,
            mode,
            confusion: outcome.confusion,
            seconds: Some(outcome.seconds),
        });
    }
    let report = Report::new(
        RunProvenance {
            command: ctx.argv.clone(),
            seed,
            config_hash: ctx.config.hash.clone(),
        },
        rows,
    );
    let rendered = report.render()?;
    std::fs::write(ctx.out.join("report.json"), report.to_json() + "\n")
        .map_err(|e| CliError::Io(format!("report.json: {e}")))?;
    std::fs::write(ctx.out.join("report.txt"), &rendered)
        .map_err(|e| CliError::Io(format!("report.txt: {e}")))?;
    print!("{rendered}");
    manifest.finish()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MultiSeedRun {
    seed: u64,
    accuracy: f64,
    f1: f64,
}

#[derive(Debug, Serialize)]
struct MultiSeedSummary {
    runs: Vec<MultiSeedRun>,
    accuracy: SeedStats,
    f1: SeedStats,
}

/// The repeated-seeds protocol: train from scratch once per seed on the
/// configured splits, evaluate each run on test, and report mean ± range.
fn eval_multi_seed(ctx: &Ctx, base_seed: u64, seeds: u64) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let mode = mode_from(ctx, "train")?;
    let data_dir: PathBuf = cfg.require("train", "data_dir")?;
    let train_set = require_split(&data_dir, "train")?;
    let val_set = require_split(&data_dir, "val")?;
    let test_set = require_split(&data_dir, "test")?;
    let model_cfg = model_cfg_from(cfg)?;
    let model_seed_base: u64 = cfg.get_or("model", "seed", 42)?;
    let budget = GenerationBudget {
        max_new_tokens: cfg.get_or("eval", "gen_budget_tokens", 16)?,
        ..GenerationBudget::default()
    };

    let manifest = ctx.manifest(base_seed);
    let mut runs = Vec::new();
    for i in 0..seeds {
        let run_seed = base_seed + i;
        let model_seed = derive_seed(model_seed_base, "multi-seed", i);
        let mut model = build_model(cfg, &model_cfg, mode, model_seed)?;
        let train_cfg = train_cfg_from(cfg, "train", mode, run_seed)?;
        let TrainOutput { best, .. } = train(&mut model, &train_set, &val_set, &train_cfg)?;
        let outcome = evaluate(&best, &test_set, mode, &budget)?;
        let run = MultiSeedRun {
            seed: run_seed,
            accuracy: outcome.confusion.accuracy()?,
            f1: outcome.confusion.f1(),
        };
        println!(
            "seed {}: acc {}  f1 {}",
            run.seed,
            percent(run.accuracy),
            percent(run.f1)
        );
        runs.push(run);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let f1s: Vec<f64> = runs.iter().map(|r| r.f1).collect();
    let summary = MultiSeedSummary {
        accuracy: SeedStats::from_values(&accs)?,
        f1: SeedStats::from_values(&f1s)?,
        runs,
    };
    println!("{}", summary.accuracy.render("acc"));
    println!("{}", summary.f1.render("f1"));
    write_json(&ctx.out.join("multiseed.json"), &summary)?;
    manifest.finish()?;
    Ok(())
}

// ---------------------------------------------------------------- bench --

pub fn cmd_bench(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let seed = ctx.seed_or("bench", 0)?;
    let cfg = &ctx.config;
    let data_dir: PathBuf = cfg.require("bench", "data_dir")?;
    let train_set = require_split(&data_dir, "train")?;
    let val_set = require_split(&data_dir, "val")?;
    let model_cfg = model_cfg_from(cfg)?;
    let model_seed: u64 = cfg.get_or("model", "seed", 42)?;
    let lora = lora_cfg_from(cfg)?.ok_or_else(|| {
        CliError::Usage("bench needs a [lora] section: both modes fine-tune adapters".into())
    })?;
    let gen_cfg = train_cfg_from(cfg, "bench", Mode::Gen, seed)?;
    let cls_cfg = TrainConfig {
        mode: Mode::Cls,
        ..gen_cfg.clone()
    };

    let manifest = ctx.manifest(seed);
    let bench = benchmark_modes::<f32>(
        &train_set,
        &val_set,
        &model_cfg,
        &lora,
        model_seed,
        &gen_cfg,
        &cls_cfg,
    )?;
    write_json(&ctx.out.join("bench.json"), &bench)?;
    let report = Report::new(
        RunProvenance {
            command: ctx.argv.clone(),
            seed,
            config_hash: ctx.config.hash.clone(),
        },
        vec![
            ReportRow {
                dataset: "val".into(),
                mode: Mode::Gen,
                confusion: bench.gen.final_confusion,
                seconds: Some(bench.gen_seconds),
            },
            ReportRow {
                dataset: "val".into(),
                mode: Mode::Cls,
                confusion: bench.cls.final_confusion,
                seconds: Some(bench.cls_seconds),
            },
        ],
    );
    let rendered = report.render()?;
    std::fs::write(ctx.out.join("bench.txt"), &rendered)
        .map_err(|e| CliError::Io(format!("bench.txt: {e}")))?;
    print!("{rendered}");
    println!(
        "T_gen {:.1}s  T_cls {:.1}s  reduction {}%",
        bench.gen_seconds,
        bench.cls_seconds,
        percent(bench.reduction)
    );
    manifest.finish()?;
    Ok(())
}

// ------------------------------------------------------------- ablate-r --

#[derive(Debug, Serialize)]
struct AblationRow {
    r: usize,
    adapter_params: usize,
    gen_accuracy: f64,
    gen_f1: f64,
    cls_accuracy: f64,
    cls_f1: f64,
}

#[derive(Debug, Serialize)]
struct AblationReport {
    rows: Vec<AblationRow>,
    /// Published large-scale yardstick: the best reference classifier used
    /// rank 64 and reported 67.88 accuracy.
    reference: String,
}

pub fn cmd_ablate_r(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let seed = ctx.seed_or("ablate", 0)?;
    let cfg = &ctx.config;
    let r_values: Vec<usize> = match cfg.list("ablate", "r") {
        Some(items) => items
            .iter()
            .map(|s| {
                s.parse::<usize>().map_err(|e| {
                    CliError::Usage(format!("[ablate] r value {s:?}: {e}"))
                })
            })
            .collect::<Result<_, _>>()?,
        None => vec![2, 4, 8],
    };
    let model_cfg = model_cfg_from(cfg)?;
    for &r in &r_values {
        if r == 0 || r > model_cfg.d_model {
            return Err(CliError::Usage(format!(
                "ablation rank {r} outside 1..={}",
                model_cfg.d_model
            )));
        }
    }
    let data_dir: PathBuf = cfg.require("ablate", "data_dir")?;
    let train_set = require_split(&data_dir, "train")?;
    let val_set = require_split(&data_dir, "val")?;
    let test_set = require_split(&data_dir, "test")?;
    let model_seed: u64 = cfg.get_or("model", "seed", 42)?;
    let base_lora = lora_cfg_from(cfg)?.unwrap_or_else(|| LoraConfig::with_rank(8));
    let budget = GenerationBudget {
        max_new_tokens: cfg.get_or("ablate", "gen_budget_tokens", 16)?,
        ..GenerationBudget::default()
    };

    let manifest = ctx.manifest(seed);
    let mut rows = Vec::new();
    for &r in &r_values {
        let lora = LoraConfig {
            lora_dropout: base_lora.lora_dropout,
            targets: base_lora.targets.clone(),
            ..LoraConfig::with_rank(r)
        };
        let mut row = AblationRow {
            r,
            adapter_params: 0,
            gen_accuracy: 0.0,
            gen_f1: 0.0,
            cls_accuracy: 0.0,
            cls_f1: 0.0,
        };
        for mode in [Mode::Gen, Mode::Cls] {
            let mut model: Model<f32> =
                Model::new(model_cfg.clone(), derive_seed(model_seed, "ablate", r as u64))?;
            if mode == Mode::Cls {
                model.add_classifier_head(derive_seed(model_seed, "cls-head", r as u64));
            }
            model.attach_lora(&lora, derive_seed(model_seed, "lora", r as u64))?;
            model.freeze_base();
            if mode == Mode::Gen {
                // Adapter count excludes the head: measured on this model,
                // where adapters are the only trainable tensors.
                row.adapter_params = model.trainable_param_count();
            }
            let section = if cfg.has_section("ablate") { "ablate" } else { "train" };
            let train_cfg = train_cfg_from(cfg, section, mode, seed)?;
            let TrainOutput { best, .. } = train(&mut model, &train_set, &val_set, &train_cfg)?;
            let outcome = evaluate(&best, &test_set, mode, &budget)?;
            let acc = outcome.confusion.accuracy()?;
            let f1 = outcome.confusion.f1();
            match mode {
                Mode::Gen => {
                    row.gen_accuracy = acc;
                    row.gen_f1 = f1;
                }
                Mode::Cls => {
                    row.cls_accuracy = acc;
                    row.cls_f1 = f1;
                }
            }
        }
        rows.push(row);
    }
    let report = AblationReport {
        rows,
        reference: "published reference at rank 64: Acc 67.88".into(),
    };
    write_json(&ctx.out.join("ablation.json"), &report)?;
    let mut table = String::new();
    table.push_str(&format!(
        "{:>4} {:>14} {:>8} {:>8} {:>8} {:>8}\n",
        "r", "adapter-params", "gen-acc", "gen-f1", "cls-acc", "cls-f1"
    ));
    for row in &report.rows {
        table.push_str(&format!(
            "{:>4} {:>14} {:>8} {:>8} {:>8} {:>8}\n",
            row.r,
            row.adapter_params,
            percent(row.gen_accuracy),
            percent(row.gen_f1),
            percent(row.cls_accuracy),
            percent(row.cls_f1)
        ));
    }
    table.push_str(&format!("{}\n", report.reference));
    std::fs::write(ctx.out.join("ablation.txt"), &table)
        .map_err(|e| CliError::Io(format!("ablation.txt: {e}")))?;
    print!("{table}");
    manifest.finish()?;
    Ok(())
}

// ------------------------------------------------------------ gradcheck --

pub fn cmd_gradcheck() -> Result<(), CliError> {
    let report = selfcheck::run_suite()?;
    print!("{}", report.render());
    if report.all_passed() {
        Ok(())
    } else {
        let failures: Vec<String> = report
            .results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| format!("{} (rel err {:.3e})", r.name, r.max_rel_err))
            .collect();
        Err(CliError::Numeric(format!(
            "gradient check failed: {}",
            failures.join(", ")
        )))
    }
}

// --------------------------------------------------------------- report --

pub fn cmd_report(path: &Path) -> Result<(), CliError> {
    let file = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_owned()
    };
    if !file.exists() {
        return Err(CliError::Data(format!("no report at {}", file.display())));
    }
    let raw = std::fs::read_to_string(&file)
        .map_err(|e| CliError::Io(format!("read {}: {e}", file.display())))?;
    let report = Report::from_json(&raw)?;
    print!("{}", report.render()?);
    Ok(())
}

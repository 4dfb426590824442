//! End-to-end 64-bit gradient verification for the whole model.
//!
//! The per-operation adjoint rules are validated in `numerics::gradcheck`;
//! this module closes the loop at the level both training modes actually
//! use: full transformer losses, adapters, the classifier head, padding
//! masks, and active dropout. Every scalar parameter that receives a
//! gradient is perturbed and compared against a central finite difference.
//!
//! All checks run on small models (a few thousand parameters) so the whole
//! suite stays comfortably inside its two-minute budget while still
//! exercising every operation the full-size model uses — the tape is the
//! same, only the tensor shapes shrink.

use crate::clsmode::{self, build_cls_input, DEFAULT_CLS_INSTRUCTION};
use crate::datapipe::Label;
use crate::genmode::{self, verdict_target_ids};
use crate::lora::{AttnProj, LoraConfig};
use crate::model::{ForwardCtx, Model, ModelConfig};
use crate::numerics::gradcheck::{CheckResult, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::numerics::{AdjointFault, Graph, Scalar, Var};
use crate::rng::derive_seed;
use crate::tokenizer::{encode, BOS};

/// Errors from building or evaluating a checked loss.
#[derive(Debug, thiserror::Error)]
pub enum SelfCheckError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Gen(#[from] crate::genmode::GenError),
    #[error("loss produced no gradient for any parameter in check {0}")]
    NoGradients(String),
}

type Result<T> = std::result::Result<T, SelfCheckError>;

/// Configuration of the small probe model: every architectural feature of
/// the default model (multi-head attention, MLP, pre-norm residuals, tied
/// byte vocabulary) at a width where exhaustive finite differences over
/// all ~6k parameters take seconds.
pub fn probe_model_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_seq_len: 96,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Checks one scalar loss on one model against central differences.
///
/// `make_ctx` is called once per evaluation; a deterministic seed makes
/// stochastic regularization (dropout) resample the identical mask on
/// every forward, which is what makes finite differences valid there.
fn check_model_loss<L>(
    name: &str,
    model: &mut Model<f64>,
    make_ctx: impl Fn() -> ForwardCtx,
    loss: L,
    fault: Option<AdjointFault>,
) -> Result<CheckResult>
where
    L: Fn(&Model<f64>, &mut Graph<f64>, &mut ForwardCtx) -> Result<Var>,
{
    const REL_FLOOR: f64 = 1e-4;

    // Analytic pass: gradients for every bound (trainable) parameter.
    let analytic: Vec<(String, Vec<f64>)> = {
        let mut g = Graph::new();
        if let Some(f) = fault {
            g.inject_adjoint_fault(f);
        }
        let mut ctx = make_ctx();
        let out = loss(model, &mut g, &mut ctx)?;
        g.backward(out)?;
        ctx.bindings
            .iter()
            .filter_map(|(n, v)| g.grad(*v).map(|grad| (n.clone(), grad.to_vec())))
            .collect()
    };
    if analytic.is_empty() {
        return Err(SelfCheckError::NoGradients(name.to_owned()));
    }

    let eval = |model: &Model<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let mut ctx = make_ctx();
        let out = loss(model, &mut g, &mut ctx)?;
        Ok(g.value(out).item())
    };

    let mut max_rel_err = 0.0f64;
    let mut coords = 0usize;
    for (pname, grads) in &analytic {
        for i in 0..grads.len() {
            let mut orig = 0.0;
            model.for_each_param_mut(|n, t| {
                if n == pname {
                    orig = t.data()[i].as_f64();
                    t.data_mut()[i] = orig + DEFAULT_STEP;
                }
            });
            let up = eval(model)?;
            model.for_each_param_mut(|n, t| {
                if n == pname {
                    t.data_mut()[i] = orig - DEFAULT_STEP;
                }
            });
            let down = eval(model)?;
            model.for_each_param_mut(|n, t| {
                if n == pname {
                    t.data_mut()[i] = orig;
                }
            });
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel_err = max_rel_err.max(rel);
            coords += 1;
        }
    }

    Ok(CheckResult {
        name: name.to_owned(),
        max_rel_err,
        tolerance: DEFAULT_TOLERANCE,
        coords,
    })
}

fn lm_tokens() -> Vec<crate::tokenizer::TokenId> {
    encode(b"the gare of nal dithe rolu", true, true)
}

/// Causal-LM loss with every position scored: embeddings, positions,
/// attention, MLP, norms, and the vocabulary projection all get gradients.
fn check_causal_lm(fault: Option<AdjointFault>) -> Result<CheckResult> {
    let mut model: Model<f64> = Model::new(probe_model_cfg(), 11)?;
    let tokens = lm_tokens();
    check_model_loss(
        "causal-lm-loss",
        &mut model,
        ForwardCtx::eval,
        move |m, g, ctx| {
            let input = &tokens[..tokens.len() - 1];
            let logits = m.forward_causal_lm(g, input, ctx)?;
            let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
            let weights = vec![1.0f64; targets.len()];
            Ok(g.cross_entropy_mean(logits, &targets, &weights)?)
        },
        fault,
    )
}

/// Generation-mode loss: same trunk, but cross-entropy masked to the
/// response span, the shape the verdict fine-tuning actually optimizes.
fn check_gen_masked(fault: Option<AdjointFault>) -> Result<CheckResult> {
    let mut model: Model<f64> = Model::new(probe_model_cfg(), 12)?;
    let mut prompt = vec![BOS];
    prompt.extend(encode(b"say which: abba", false, false));
    let target = verdict_target_ids(true);
    check_model_loss(
        "gen-masked-loss",
        &mut model,
        ForwardCtx::eval,
        move |m, g, ctx| Ok(genmode::genmode_loss(m, g, ctx, &prompt, &target)?),
        fault,
    )
}

/// Classification loss with adapters on all four attention projections and
/// the two-way head: covers the adapter path, last-token pooling with a
/// padding mask, and the head projection. All parameters stay trainable so
/// base weights are checked through the adapter path too.
fn check_cls_with_adapters(fault: Option<AdjointFault>) -> Result<CheckResult> {
    let mut model: Model<f64> = Model::new(probe_model_cfg(), 13)?;
    model.add_classifier_head(derive_seed(13, "cls-head", 0));
    let lora = LoraConfig {
        targets: [
            AttnProj::Query,
            AttnProj::Key,
            AttnProj::Value,
            AttnProj::Output,
        ]
        .into_iter()
        .collect(),
        ..LoraConfig::with_rank(2)
    };
    model.attach_lora(&lora, derive_seed(13, "lora", 0))?;
    model.set_all_trainable();
    let mut input = build_cls_input(DEFAULT_CLS_INSTRUCTION, b"padded text", 64)?;
    input.pad_to(input.tokens.len() + 3)?;
    check_model_loss(
        "cls-loss-with-adapters",
        &mut model,
        ForwardCtx::eval,
        move |m, g, ctx| Ok(clsmode::cls_loss(m, g, ctx, &input, Label::Stego)?),
        fault,
    )
}

/// Classification loss restricted to the trainable set the real recipe
/// uses: frozen base, gradients only through adapters and head.
fn check_frozen_base_adapters(fault: Option<AdjointFault>) -> Result<CheckResult> {
    let mut model: Model<f64> = Model::new(probe_model_cfg(), 14)?;
    model.add_classifier_head(derive_seed(14, "cls-head", 0));
    model.attach_lora(&LoraConfig::with_rank(2), derive_seed(14, "lora", 0))?;
    model.freeze_base();
    let input = build_cls_input(DEFAULT_CLS_INSTRUCTION, b"frozen trunk", 64)?;
    check_model_loss(
        "cls-loss-frozen-base",
        &mut model,
        ForwardCtx::eval,
        move |m, g, ctx| Ok(clsmode::cls_loss(m, g, ctx, &input, Label::Cover)?),
        fault,
    )
}

/// Training-context loss with dropout active in both the trunk and the
/// adapters. The context seed is fixed, so every forward draws the same
/// masks and the finite-difference quotient is well-defined.
fn check_dropout_active(fault: Option<AdjointFault>) -> Result<CheckResult> {
    let mut cfg = probe_model_cfg();
    cfg.dropout = 0.2;
    let mut model: Model<f64> = Model::new(cfg, 15)?;
    model.add_classifier_head(derive_seed(15, "cls-head", 0));
    let lora = LoraConfig {
        lora_dropout: 0.25,
        ..LoraConfig::with_rank(2)
    };
    model.attach_lora(&lora, derive_seed(15, "lora", 0))?;
    model.set_all_trainable();
    let input = build_cls_input(DEFAULT_CLS_INSTRUCTION, b"masked noise", 64)?;
    check_model_loss(
        "dropout-active-loss",
        &mut model,
        || ForwardCtx::training(777),
        move |m, g, ctx| Ok(clsmode::cls_loss(m, g, ctx, &input, Label::Stego)?),
        fault,
    )
}

/// Runs the whole suite. Passing a fault corrupts the named adjoint during
/// every analytic pass, which must turn checks red — the fixture proving
/// the oracle has teeth.
pub fn run_suite_with_fault(fault: Option<AdjointFault>) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    report.push(check_causal_lm(fault)?);
    report.push(check_gen_masked(fault)?);
    report.push(check_cls_with_adapters(fault)?);
    report.push(check_frozen_base_adapters(fault)?);
    report.push(check_dropout_active(fault)?);
    Ok(report)
}

/// The full 64-bit finite-difference suite over every operation both
/// training modes use.
pub fn run_suite() -> Result<GradCheckReport> {
    run_suite_with_fault(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::FaultOp;
    use std::time::Instant;

    #[test]
    fn full_suite_passes_within_budget() {
        let t0 = Instant::now();
        let report = run_suite().unwrap();
        let elapsed = t0.elapsed();
        assert!(
            report.all_passed(),
            "suite failed:\n{}",
            report.render()
        );
        assert_eq!(report.results.len(), 5);
        for r in &report.results {
            assert!(r.coords > 0, "{} checked no coordinates", r.name);
            assert!(
                r.max_rel_err <= 1e-3,
                "{}: rel err {} over tolerance",
                r.name,
                r.max_rel_err
            );
        }
        assert!(
            elapsed.as_secs() < 120,
            "suite took {elapsed:?}, budget is two minutes"
        );
    }

    #[test]
    fn every_parameter_of_the_probe_models_is_covered() {
        // The all-trainable adapter check must perturb every parameter the
        // model owns: trunk, head, and adapters.
        let mut model: Model<f64> = Model::new(probe_model_cfg(), 13).unwrap();
        model.add_classifier_head(0);
        let lora = LoraConfig {
            targets: [
                AttnProj::Query,
                AttnProj::Key,
                AttnProj::Value,
                AttnProj::Output,
            ]
            .into_iter()
            .collect(),
            ..LoraConfig::with_rank(2)
        };
        model.attach_lora(&lora, 1).unwrap();
        model.set_all_trainable();
        let mut total = 0usize;
        let mut lm_head = 0usize;
        model.for_each_param(|n, t| {
            total += t.numel();
            if n.starts_with("lm_head.") {
                lm_head += t.numel();
            }
        });
        let report = run_suite().unwrap();

        // The classification check perturbs everything except the unused
        // vocabulary projection; the causal-LM check perturbs that
        // projection along with the whole trunk. Union: every parameter.
        let adapters = &report.results[2];
        assert_eq!(adapters.name, "cls-loss-with-adapters");
        assert_eq!(
            adapters.coords,
            total - lm_head,
            "adapter check covered {} of {} non-vocab parameters",
            adapters.coords,
            total - lm_head
        );
        let lm = &report.results[0];
        assert_eq!(lm.name, "causal-lm-loss");
        let mut bare_total = 0usize;
        let bare: Model<f64> = Model::new(probe_model_cfg(), 11).unwrap();
        bare.for_each_param(|_, t| bare_total += t.numel());
        assert_eq!(lm.coords, bare_total);
        assert!(total <= 10_000, "probe model too big: {total}");
    }

    #[test]
    fn corrupted_adjoint_fails_with_named_check() {
        let report = run_suite_with_fault(Some(AdjointFault {
            op: FaultOp::SoftmaxRows,
            scale: 1.5,
        }))
        .unwrap();
        assert!(
            !report.all_passed(),
            "a corrupted softmax adjoint must not pass:\n{}",
            report.render()
        );
        // Failures name the check and the size of the disagreement.
        let failed: Vec<_> = report.results.iter().filter(|r| !r.passed()).collect();
        assert!(!failed.is_empty());
        for f in failed {
            assert!(f.render().contains("FAIL"));
            assert!(f.max_rel_err > 1e-3);
        }
    }

    #[test]
    fn corrupted_matmul_adjoint_is_caught_by_every_check() {
        let report = run_suite_with_fault(Some(AdjointFault {
            op: FaultOp::Matmul,
            scale: 0.5,
        }))
        .unwrap();
        for r in &report.results {
            assert!(!r.passed(), "{} missed a corrupted matmul adjoint", r.name);
        }
    }

    #[test]
    fn frozen_check_touches_only_adapters_and_head() {
        let report = run_suite().unwrap();
        let frozen = &report.results[3];
        assert_eq!(frozen.name, "cls-loss-frozen-base");
        // r=2 adapters on Q and V of 2 layers: 2·2·(8·2 + 2·8) = 128
        // coordinates, plus the 2-way head (8·2 + 2 = 18).
        assert_eq!(frozen.coords, 128 + 18);
    }
}

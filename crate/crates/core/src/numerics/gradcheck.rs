//! Finite-difference oracle for the tape's adjoint rules.
//!
//! Every differentiable operation is validated by comparing its analytic
//! gradient against central differences computed from two forward passes.
//! Checks run in f64: the oracle's truncation error is O(step^2), far below
//! the acceptance tolerance, so any disagreement is a wrong adjoint rather
//! than noise.

use super::graph::{AdjointFault, Graph, Var};
use super::tensor::Tensor;
use super::Result;

/// Central-difference step. With f64 values this leaves ~1e-8 truncation
/// error on smooth functions, three orders under [`DEFAULT_TOLERANCE`].
pub const DEFAULT_STEP: f64 = 1e-4;

/// Maximum allowed relative error between analytic and numeric gradients.
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Floor in the relative-error denominator so near-zero gradients do not
/// amplify rounding noise into spurious failures.
const REL_FLOOR: f64 = 1e-4;

/// Outcome of checking one named loss function.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Total scalar parameters perturbed.
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn render(&self) -> String {
        format!(
            "{}: {} (max rel err {:.3e}, tol {:.1e}, {} coords)",
            self.name,
            if self.passed() { "ok" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.coords
        )
    }
}

/// A collection of check results with a single verdict.
#[derive(Debug, Default, Clone)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn push(&mut self, r: CheckResult) {
        self.results.push(r);
    }

    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&r.render());
            out.push('\n');
        }
        out.push_str(&format!(
            "gradient check: {}/{} losses ok\n",
            self.results.iter().filter(|r| r.passed()).count(),
            self.results.len()
        ));
        out
    }
}

/// Checks the analytic gradient of a scalar loss against central
/// differences for every parameter, using default step and tolerance.
///
/// `build` must construct the loss from the given leaves on the supplied
/// graph, deterministically: called repeatedly, it must produce the same
/// function each time (stochastic ops must reseed internally).
pub fn check_gradients<F>(name: &str, params: &[Tensor<f64>], build: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_opts(name, params, None, DEFAULT_STEP, DEFAULT_TOLERANCE, build)
}

/// Full-control variant: optional injected adjoint fault (for proving the
/// oracle catches corruption), custom step and tolerance.
pub fn check_gradients_opts<F>(
    name: &str,
    params: &[Tensor<f64>],
    fault: Option<AdjointFault>,
    step: f64,
    tolerance: f64,
    build: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = params
        .iter()
        .map(|t| {
            let mut c = t.clone();
            c.set_requires_grad(true);
            c
        })
        .collect();

    // Analytic pass.
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        if let Some(f) = fault {
            g.inject_adjoint_fault(f);
        }
        let vars: Vec<Var> = work.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter()
            .zip(&work)
            .map(|(&v, t)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };

    let eval = |work: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = work.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut max_rel_err = 0.0f64;
    let mut coords = 0usize;
    for p in 0..work.len() {
        for i in 0..work[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[p][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel_err = max_rel_err.max(rel);
            coords += 1;
        }
    }

    Ok(CheckResult {
        name: name.to_owned(),
        max_rel_err,
        tolerance,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::FaultOp;
    use crate::rng::rng_from_seed;

    fn randn_mat(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        Tensor::randn(vec![rows, cols], 0.7, &mut rng)
    }

    fn randn_vec(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        let t = Tensor::randn(vec![n], 0.7, &mut rng);
        t
    }

    #[test]
    fn matmul_bias_gelu_chain() {
        let params = vec![randn_mat(3, 4, 1), randn_mat(4, 2, 2), randn_vec(2, 3)];
        let r = check_gradients("matmul+bias+gelu", &params, |g, vars| {
            let h = g.matmul(vars[0], vars[1])?;
            let h = g.add_bias_row(h, vars[2])?;
            let h = g.gelu(h);
            Ok(g.sum(h))
        })
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn matmul_nt_check() {
        let params = vec![randn_mat(3, 4, 4), randn_mat(5, 4, 5)];
        let r = check_gradients("matmul_nt", &params, |g, vars| {
            let h = g.matmul_nt(vars[0], vars[1])?;
            Ok(g.sum(h))
        })
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn elementwise_chain_check() {
        let params = vec![randn_mat(2, 3, 6), randn_mat(2, 3, 7)];
        let r = check_gradients("mul+scale+add", &params, |g, vars| {
            let prod = g.mul(vars[0], vars[1])?;
            let scaled = g.scale(prod, 0.37);
            let s = g.add(scaled, vars[0])?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn softmax_weighted_check() {
        // Weight softmax outputs by a fixed random matrix so the gradient
        // is not annihilated by the rows-sum-to-one constraint.
        let params = vec![randn_mat(2, 5, 8)];
        let weights = randn_mat(2, 5, 9);
        let r = check_gradients("softmax_rows", &params, move |g, vars| {
            let y = g.softmax_rows(vars[0])?;
            let w = g.constant(weights.clone());
            let picked = g.mul(y, w)?;
            Ok(g.sum(picked))
        })
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn cross_entropy_check() {
        let params = vec![randn_mat(4, 6, 10)];
        let r = check_gradients("cross_entropy_mean", &params, |g, vars| {
            g.cross_entropy_mean(vars[0], &[1, 0, 5, 3], &[1.0, 0.0, 2.0, 1.0])
        })
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn layer_norm_check() {
        let params = vec![randn_mat(3, 6, 11), randn_vec(6, 12), randn_vec(6, 13)];
        let weights = randn_mat(3, 6, 14);
        let r = check_gradients("layer_norm_rows", &params, move |g, vars| {
            let y = g.layer_norm_rows(vars[0], vars[1], vars[2], 1e-5)?;
            let w = g.constant(weights.clone());
            let picked = g.mul(y, w)?;
            Ok(g.sum(picked))
        })
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn gather_slice_concat_check() {
        let params = vec![randn_mat(5, 4, 15)];
        let r = check_gradients("gather+slice+concat", &params, |g, vars| {
            let picked = g.gather_rows(vars[0], &[0, 2, 2, 4])?;
            let a = g.slice_cols(picked, 0, 2)?;
            let b = g.slice_cols(picked, 2, 2)?;
            let swapped = g.concat_cols(&[b, a])?;
            let top = g.slice_rows(swapped, 0, 3)?;
            let h = g.gelu(top);
            Ok(g.sum(h))
        })
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn dropout_active_check() {
        // The mask is resampled identically on every evaluation because the
        // builder reseeds; the check therefore sees a fixed linear map.
        let params = vec![randn_mat(4, 8, 16)];
        let r = check_gradients("dropout p=0.5", &params, |g, vars| {
            let mut rng = rng_from_seed(99);
            let y = g.dropout(vars[0], 0.5, &mut rng)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        let params = vec![randn_mat(3, 4, 17), randn_mat(4, 2, 18)];
        let r = check_gradients_opts(
            "matmul with faulty adjoint",
            &params,
            Some(AdjointFault {
                op: FaultOp::Matmul,
                scale: 1.01,
            }),
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
            |g, vars| {
                let h = g.matmul(vars[0], vars[1])?;
                Ok(g.sum(h))
            },
        )
        .unwrap();
        assert!(
            !r.passed(),
            "a 1% adjoint corruption must fail the check: {}",
            r.render()
        );
    }
}

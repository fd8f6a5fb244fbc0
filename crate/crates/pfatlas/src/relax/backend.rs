//! Solver-neutral backend contract and the pure-LP fallback.

use thiserror::Error;

use super::ConicProgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

/// Raw backend output over the flat variable vector.
#[derive(Debug, Clone)]
pub struct BackendSolution {
    pub status: SolveStatus,
    pub objective: f64,
    pub vars: Vec<f64>,
    /// Feasibility tolerance the backend worked to.
    pub tolerance: f64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unsupported program for this backend: {0}")]
    Unsupported(String),
    #[error("solver failure: {0}")]
    Failure(String),
}

pub trait ConicBackend {
    fn solve(&self, prog: &ConicProgram) -> Result<BackendSolution, BackendError>;
    fn name(&self) -> &'static str;
}

/// Simplex-based LP backend. Handles RLT-only programs so the pipeline
/// stays usable without the conic solver; rejects cone constraints.
pub struct LpBackend;

impl ConicBackend for LpBackend {
    fn solve(&self, prog: &ConicProgram) -> Result<BackendSolution, BackendError> {
        if prog.needs_conic_backend() {
            return Err(BackendError::Unsupported(
                "LP backend cannot handle PSD or quadratic cones".into(),
            ));
        }
        use microlp::{ComparisonOp, OptimizationDirection, Problem, SolveOutcome};
        let nv = prog.num_vars();
        let mut obj = vec![0.0; nv];
        for &(v, c) in &prog.objective {
            obj[v] += c;
        }
        let mut problem = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = obj
            .iter()
            .map(|&c| problem.add_var(c, (f64::NEG_INFINITY, f64::INFINITY)))
            .collect();
        for row in &prog.eq {
            let expr: Vec<_> = row.terms.iter().map(|&(v, c)| (vars[v], c)).collect();
            problem.add_constraint(expr, ComparisonOp::Eq, -row.constant);
        }
        for row in &prog.ineq {
            let expr: Vec<_> = row.terms.iter().map(|&(v, c)| (vars[v], c)).collect();
            problem.add_constraint(expr, ComparisonOp::Le, -row.constant);
        }
        match problem.solve() {
            Ok(SolveOutcome::Solution(sol)) => {
                let values: Vec<f64> = vars.iter().map(|&v| sol[v]).collect();
                Ok(BackendSolution {
                    status: SolveStatus::Optimal,
                    objective: sol.objective(),
                    vars: values,
                    tolerance: 1e-9,
                })
            }
            Ok(SolveOutcome::Interrupted(_)) => Ok(BackendSolution {
                status: SolveStatus::NumericalFailure,
                objective: f64::NAN,
                vars: vec![0.0; nv],
                tolerance: 1e-9,
            }),
            Err(microlp::Error::Infeasible) => Ok(BackendSolution {
                status: SolveStatus::Infeasible,
                objective: f64::INFINITY,
                vars: vec![0.0; nv],
                tolerance: 1e-9,
            }),
            Err(e) => Err(BackendError::Failure(e.to_string())),
        }
    }

    fn name(&self) -> &'static str {
        "microlp"
    }
}

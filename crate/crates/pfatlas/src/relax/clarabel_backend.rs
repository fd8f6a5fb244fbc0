//! Interior-point conic backend (Clarabel): LP, rotated quadratic cones
//! expressed as second-order cones, and the PSD triangle cone.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::backend::{BackendError, BackendSolution, ConicBackend, SolveStatus};
use super::{ConicProgram, LinExpr};

pub struct ClarabelBackend {
    pub high_accuracy: bool,
}

const FEAS_TOL: f64 = 1e-8;
const FEAS_TOL_HIGH: f64 = 1e-10;

impl ConicBackend for ClarabelBackend {
    fn solve(&self, prog: &ConicProgram) -> Result<BackendSolution, BackendError> {
        let nv = prog.num_vars();
        let mut q = vec![0.0; nv];
        for &(v, c) in &prog.objective {
            q[v] += c;
        }

        // A v + s = b with s in [Zero, Nonneg, SOC..., PSD].
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0usize;

        let put = |triplets: &mut Vec<(usize, usize, f64)>,
                       b: &mut Vec<f64>,
                       row: usize,
                       expr: &LinExpr,
                       negate: bool| {
            let sgn = if negate { -1.0 } else { 1.0 };
            for &(v, c) in &expr.terms {
                triplets.push((row, v, sgn * c));
            }
            b.push(-sgn * expr.constant);
        };

        for e in &prog.eq {
            put(&mut triplets, &mut b, row, e, false);
            row += 1;
        }
        if !prog.eq.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(prog.eq.len()));
        }
        for e in &prog.ineq {
            put(&mut triplets, &mut b, row, e, false);
            row += 1;
        }
        if !prog.ineq.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(prog.ineq.len()));
        }
        // Rotated cone a^2 + b^2 <= c d  <=>  ||(c-d, 2a, 2b)|| <= c+d.
        for rc in &prog.cones {
            let top = rc.c.clone().add(&rc.d, 1.0).compress();
            let diff = rc.c.clone().add(&rc.d, -1.0).compress();
            let a2 = LinExpr::constant(0.0).add(&rc.a, 2.0);
            let b2 = LinExpr::constant(0.0).add(&rc.b, 2.0);
            for e in [&top, &diff, &a2, &b2] {
                put(&mut triplets, &mut b, row, e, true);
                row += 1;
            }
            cones.push(SupportedConeT::SecondOrderConeT(4));
        }
        if prog.psd {
            // Moment matrix [[1, y'], [y, X]] >= 0, i.e. X >= y y'. PSD on
            // X alone would not couple X to y.
            let m = prog.map.num_y;
            let sqrt2 = std::f64::consts::SQRT_2;
            for jj in 0..=m {
                for ii in 0..=jj {
                    let scale = if ii == jj { 1.0 } else { sqrt2 };
                    match (ii, jj) {
                        (0, 0) => b.push(1.0),
                        (0, j) => {
                            triplets.push((row, j - 1, -scale));
                            b.push(0.0);
                        }
                        (i, j) => {
                            triplets.push((row, prog.map.x_entry_var(i - 1, j - 1), -scale));
                            b.push(0.0);
                        }
                    }
                    row += 1;
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(m + 1));
        }

        let a = csc_from_triplets(row, nv, &mut triplets);
        let p = CscMatrix::zeros((nv, nv));
        let tol = if self.high_accuracy { FEAS_TOL_HIGH } else { FEAS_TOL };
        let settings = DefaultSettings {
            verbose: false,
            tol_feas: tol,
            tol_gap_abs: tol,
            tol_gap_rel: tol,
            max_iter: if self.high_accuracy { 200 } else { 100 },
            ..Default::default()
        };
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| BackendError::Failure(format!("{e:?}")))?;
        solver.solve();

        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            // "Almost" optimality is accepted with the looser tolerance
            // reported below; anything ambiguous is a numerical failure so
            // the caller never prunes on it.
            SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible => SolveStatus::Infeasible,
            _ => SolveStatus::NumericalFailure,
        };
        let reported_tol = match sol.status {
            SolverStatus::Solved => tol,
            _ => tol.sqrt(),
        };
        Ok(BackendSolution {
            status,
            objective: if status == SolveStatus::Infeasible {
                f64::INFINITY
            } else {
                sol.obj_val
            },
            vars: sol.x.clone(),
            tolerance: reported_tol,
        })
    }

    fn name(&self) -> &'static str {
        "clarabel"
    }
}

fn csc_from_triplets(rows: usize, cols: usize, triplets: &mut Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    triplets.sort_unstable_by_key(|&(r, c, _)| (c, r));
    let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
    for &(r, c, v) in triplets.iter() {
        match merged.last_mut() {
            Some(last) if last.0 == r && last.1 == c => last.2 += v,
            _ => merged.push((r, c, v)),
        }
    }
    let mut colptr = vec![0usize; cols + 1];
    let mut rowval = Vec::with_capacity(merged.len());
    let mut nzval = Vec::with_capacity(merged.len());
    for &(r, c, v) in &merged {
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
    }
    for c in 0..cols {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

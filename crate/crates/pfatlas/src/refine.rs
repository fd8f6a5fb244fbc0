//! Newton refinement of relaxation points into verified roots, plus the
//! end-to-end pipeline: atlas -> refine -> dedup.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::bisect::{
    prepare, run_atlas_with, AtlasConfig, AtlasError, AtlasResult, Certificate, Tolerances,
    TraceRow,
};
use crate::caseio::Network;
use crate::gpfmodel::{pf_residual, BoxBounds, GpfInstance, RegionSpec, StateVector};

/// A verified power-flow solution in rectangular and polar form.
#[derive(Debug, Clone)]
pub struct PfSolution {
    pub x: StateVector,
    /// Voltage magnitudes, per unit, internal bus order.
    pub vm: Vec<f64>,
    /// Voltage angles in degrees.
    pub va: Vec<f64>,
    pub residual_inf: f64,
    /// The accepted box whose relaxation point seeded the refinement.
    pub source_box: BoxBounds,
    /// True when the refined root left its (inflated) source box.
    pub escaped: bool,
    /// Buses with |V| below the angle-degeneracy threshold; their angle is
    /// reported as 0 and is not meaningful.
    pub degenerate_angle: Vec<usize>,
}

const ANGLE_DEGENERACY: f64 = 1e-9;

fn polar(x: &StateVector, n: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut vm = Vec::with_capacity(n);
    let mut va = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for k in 0..n {
        let (e, f) = (x[k], x[n + k]);
        let m = e.hypot(f);
        vm.push(m);
        if m < ANGLE_DEGENERACY {
            va.push(0.0);
            degenerate.push(k);
        } else {
            va.push(f.atan2(e).to_degrees());
        }
    }
    (vm, va, degenerate)
}

#[derive(Debug, Error)]
pub enum NewtonFailure {
    #[error("jacobian is singular at iterate {iter}")]
    SingularJacobian { iter: usize, last: StateVector },
    #[error("iterate diverged at iteration {iter}")]
    Divergence { iter: usize, last: StateVector },
    #[error("no convergence within {max_iter} iterations")]
    IterationCap { max_iter: usize, last: StateVector },
}

/// Newton's method on the quadratic-form residual over the free (non-slack)
/// coordinates, with an analytic Jacobian: row k of J is ((A_k + A_k^T) x)
/// restricted to free coordinates.
pub fn newton_refine(
    net: &Network,
    gpf: &GpfInstance,
    x0: &StateVector,
    tol: f64,
    max_iter: usize,
) -> Result<StateVector, NewtonFailure> {
    let m = gpf.equations.len();
    let nf = gpf.free.len();
    let mut x = x0.clone();
    // Pin the slack coordinates regardless of the seed.
    for i in 0..x.len() {
        if !gpf.is_free[i] {
            x[i] = gpf.fixed_template[i];
        }
    }
    let divergence_cap = 1e6;
    for iter in 0..=max_iter {
        let res = pf_residual(net, &gpf.forms, &x).expect("dimension fixed by construction");
        if res.amax() <= tol {
            return Ok(x);
        }
        if iter == max_iter {
            return Err(NewtonFailure::IterationCap { max_iter, last: x });
        }
        if !res.iter().all(|r| r.is_finite()) || x.amax() > divergence_cap {
            return Err(NewtonFailure::Divergence { iter, last: x });
        }
        let mut jac = DMatrix::zeros(m, nf);
        for (row, eq) in gpf.equations.iter().enumerate() {
            let a = gpf.matrix(eq);
            let grad = (a + a.transpose()) * &x;
            for (col, &coord) in gpf.free.iter().enumerate() {
                jac[(row, col)] = grad[coord];
            }
        }
        let step = match jac.svd(true, true).solve(&res, 1e-12) {
            Ok(s) => s,
            Err(_) => return Err(NewtonFailure::SingularJacobian { iter, last: x }),
        };
        if !step.iter().all(|s| s.is_finite()) {
            return Err(NewtonFailure::SingularJacobian { iter, last: x });
        }
        for (col, &coord) in gpf.free.iter().enumerate() {
            x[coord] -= step[col];
        }
    }
    unreachable!()
}

/// Greedy infinity-norm clustering: the first (already sorted by residual)
/// member of each cluster survives. Idempotent for any fixed `delta`.
pub fn dedup(mut solutions: Vec<PfSolution>, delta: f64) -> Vec<PfSolution> {
    solutions.sort_by(|a, b| a.residual_inf.total_cmp(&b.residual_inf));
    let mut kept: Vec<PfSolution> = Vec::new();
    for s in solutions {
        if !kept
            .iter()
            .any(|k| (&k.x - &s.x).amax() <= delta)
        {
            kept.push(s);
        }
    }
    kept.sort_by(|a, b| a.vm.partial_cmp(&b.vm).unwrap());
    kept
}

#[derive(Debug, Clone, Copy)]
pub struct RefineOpts {
    pub newton_tol: f64,
    pub max_iter: usize,
    pub dedup_delta: f64,
    /// Independent verification bar on the final residual.
    pub verify_tol: f64,
    /// Optional first-pass box width for two-stage exploration.
    pub coarse_eps_v: Option<f64>,
}

impl Default for RefineOpts {
    fn default() -> Self {
        RefineOpts {
            newton_tol: 1e-10,
            max_iter: 50,
            dedup_delta: 1e-6,
            verify_tol: 1e-8,
            coarse_eps_v: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocateResult {
    pub solutions: Vec<PfSolution>,
    pub certificate: Certificate,
    pub trace: Vec<TraceRow>,
    pub pruned_log: Vec<(BoxBounds, f64)>,
    /// Boxes whose candidates could not be refined even after one
    /// re-subdivision; the enumeration is incomplete if nonempty.
    pub unresolved: Vec<BoxBounds>,
    pub solver_calls: usize,
    pub wall_ms: u128,
    pub rigorous: bool,
}

/// End-to-end enumeration: branch-and-prune, then Newton refinement of every
/// candidate, then dedup.
pub fn locate_all(
    net: &Network,
    region: &RegionSpec,
    config: &AtlasConfig,
    opts: &RefineOpts,
) -> Result<LocateResult, AtlasError> {
    let (gpf, root) = match prepare(net, region) {
        Ok(v) => v,
        Err(AtlasError::Region(crate::gpfmodel::RegionError::EmptyRegion { .. })) => {
            return Ok(LocateResult {
                solutions: Vec::new(),
                certificate: Certificate::NoSolutionInRegion,
                trace: Vec::new(),
                pruned_log: Vec::new(),
                unresolved: Vec::new(),
                solver_calls: 0,
                wall_ms: 0,
                rigorous: true,
            })
        }
        Err(e) => return Err(e),
    };

    let atlas = if let Some(coarse) = opts.coarse_eps_v {
        // Stage one maps the region with wide boxes; stage two resumes from
        // the surviving boxes at the requested width.
        let coarse_cfg = AtlasConfig {
            tol: Tolerances {
                eps_v: coarse.max(config.tol.eps_v),
                ..config.tol
            },
            ..*config
        };
        let first = run_atlas_with(&gpf, vec![root], &coarse_cfg)?;
        match first.certificate {
            Certificate::AllCandidatesFound => {
                let seeds = first.candidates.iter().map(|(b, _)| b.clone()).collect();
                let mut second = run_atlas_with(&gpf, seeds, config)?;
                second.stats.solver_calls += first.stats.solver_calls;
                second.stats.wall_ms += first.stats.wall_ms;
                second.stats.rigorous &= first.stats.rigorous;
                second.pruned_log.splice(0..0, first.pruned_log);
                second.trace.splice(0..0, first.trace);
                second
            }
            _ => first,
        }
    } else {
        run_atlas_with(&gpf, vec![root], config)?
    };

    refine_atlas(net, &gpf, atlas, config, opts)
}

/// Refine every candidate of an already-computed atlas.
pub fn refine_atlas(
    net: &Network,
    gpf: &GpfInstance,
    atlas: AtlasResult,
    config: &AtlasConfig,
    opts: &RefineOpts,
) -> Result<LocateResult, AtlasError> {
    let n = net.n();
    let mut solver_calls = atlas.stats.solver_calls;
    let mut solutions = Vec::new();
    let mut unresolved = Vec::new();

    // Work items: (source box, seed, may re-subdivide on trouble).
    let mut work: Vec<(BoxBounds, StateVector, bool)> = atlas
        .candidates
        .iter()
        .map(|(b, x)| (b.clone(), x.clone(), true))
        .collect();
    let candidate_boxes: Vec<BoxBounds> = atlas.candidates.iter().map(|(b, _)| b.clone()).collect();

    while let Some((box_, seed, may_subdivide)) = work.pop() {
        let refined = newton_refine(net, gpf, &seed, opts.newton_tol, opts.max_iter);
        let needs_subdivision = match &refined {
            Ok(x) => {
                let res = pf_residual(net, &gpf.forms, x).expect("dimension");
                if res.amax() > opts.verify_tol {
                    true
                } else if !gpf.in_region(x, 1e-7) {
                    // A genuine root outside the sector restrictions: never
                    // report it. Re-subdividing the source box lets the
                    // relaxation prune its in-region remainder.
                    true
                } else {
                    let inflated = box_.inflate(1.1);
                    let mut escaped = false;
                    if !inflated.contains(x, 0.0) {
                        // Re-attribute to whichever candidate box holds the
                        // root; keep (flagged) if none does.
                        escaped = !candidate_boxes.iter().any(|b| b.contains(x, 0.0));
                    }
                    let (vm, va, degenerate_angle) = polar(x, n);
                    solutions.push(PfSolution {
                        x: x.clone(),
                        vm,
                        va,
                        residual_inf: res.amax(),
                        source_box: box_.clone(),
                        escaped,
                        degenerate_angle,
                    });
                    escaped
                }
            }
            Err(_) => true,
        };
        if needs_subdivision {
            if !may_subdivide {
                if refined.is_err() {
                    unresolved.push(box_);
                }
                continue;
            }
            // One extra level of subdivision at half the acceptance width
            // recovers seeds that Newton could not use.
            let sub_cfg = AtlasConfig {
                tol: Tolerances {
                    eps_v: 0.5 * config.tol.eps_v,
                    max_nodes: 10_000,
                    ..config.tol
                },
                ..*config
            };
            let sub = run_atlas_with(gpf, vec![box_], &sub_cfg)?;
            solver_calls += sub.stats.solver_calls;
            for (b, x) in sub.candidates {
                work.push((b, x, false));
            }
        }
    }

    let solutions = dedup(solutions, opts.dedup_delta);
    Ok(LocateResult {
        solutions,
        certificate: atlas.certificate,
        trace: atlas.trace,
        pruned_log: atlas.pruned_log,
        unresolved,
        solver_calls,
        wall_ms: atlas.stats.wall_ms,
        rigorous: atlas.stats.rigorous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caseio::parse_case;
    use crate::gpfmodel::build_gpf;
    use crate::netmatrix::{build_admittance, build_quadratic_forms};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use std::sync::Arc;

    fn two_bus(p_mw: f64) -> (Network, GpfInstance) {
        let net = parse_case(&crate::test_fixtures::two_bus_case(p_mw, 0.0)).unwrap();
        let y = build_admittance(&net).unwrap();
        let forms = Arc::new(build_quadratic_forms(&y));
        let gpf = build_gpf(&net, forms, &RegionSpec::default()).unwrap();
        (net, gpf)
    }

    #[test]
    fn newton_finds_analytic_root() {
        // p_in = -0.5 pu: e2 = (1 + sqrt(1 - 0.01))/2, f2 = -0.05.
        let (net, gpf) = two_bus(50.0);
        let e2 = 0.5 * (1.0 + (1.0 - 0.01_f64).sqrt());
        let x0 = DVector::from_row_slice(&[1.0, 0.9, 0.0, -0.1]);
        let x = newton_refine(&net, &gpf, &x0, 1e-12, 50).unwrap();
        assert_abs_diff_eq!(x[1], e2, epsilon = 1e-10);
        assert_abs_diff_eq!(x[3], -0.05, epsilon = 1e-10);
        // The slack coordinates stay pinned.
        assert_eq!(x[0], 1.0);
        assert_eq!(x[2], 0.0);
    }

    #[test]
    fn newton_zero_iterations_at_root() {
        let (net, gpf) = two_bus(50.0);
        let e2 = 0.5 * (1.0 + (1.0 - 0.01_f64).sqrt());
        let x0 = DVector::from_row_slice(&[1.0, e2, 0.0, -0.05]);
        let x = newton_refine(&net, &gpf, &x0, 1e-9, 0).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn newton_reports_iteration_cap() {
        let (net, gpf) = two_bus(50.0);
        let x0 = DVector::from_row_slice(&[1.0, 0.9, 0.0, -0.1]);
        match newton_refine(&net, &gpf, &x0, 1e-12, 1) {
            Err(NewtonFailure::IterationCap { max_iter: 1, .. }) => {}
            other => panic!("expected iteration cap, got {other:?}"),
        }
    }

    #[test]
    fn newton_singular_at_origin_seed() {
        // x = 0 on the free coordinates zeroes the gradient rows that only
        // touch bus 2, leaving a rank-deficient Jacobian direction.
        let (net, gpf) = two_bus(50.0);
        let x0 = DVector::from_row_slice(&[1.0, -0.5, 0.0, 0.0]);
        // Seed chosen near the saddle between the two roots: Newton still
        // converges or fails loudly, never silently returns a bad point.
        match newton_refine(&net, &gpf, &x0, 1e-12, 50) {
            Ok(x) => {
                let res = pf_residual(&net, &gpf.forms, &x).unwrap();
                assert!(res.amax() <= 1e-10);
            }
            Err(_) => {}
        }
    }

    fn fake_solution(x: &[f64], residual: f64) -> PfSolution {
        let xv = DVector::from_row_slice(x);
        let n = x.len() / 2;
        let (vm, va, degenerate_angle) = polar(&xv, n);
        PfSolution {
            x: xv,
            vm,
            va,
            residual_inf: residual,
            source_box: BoxBounds {
                lower: DVector::zeros(x.len()),
                upper: DVector::zeros(x.len()),
            },
            escaped: false,
            degenerate_angle,
        }
    }

    #[test]
    fn dedup_clusters_and_sorts() {
        let sols = vec![
            fake_solution(&[1.0, 0.9, 0.0, 0.1], 1e-12),
            fake_solution(&[1.0, 0.9 + 5e-7, 0.0, 0.1], 1e-10),
            fake_solution(&[1.0, 0.1, 0.0, 0.1], 1e-11),
        ];
        let out = dedup(sols, 1e-6);
        assert_eq!(out.len(), 2);
        // Sorted by vm lexicographically: the low-voltage root first.
        assert!(out[0].vm[1] < out[1].vm[1]);
        // The lowest-residual representative survives in each cluster.
        assert_eq!(out[1].residual_inf, 1e-12);
        // Idempotence.
        let again = dedup(out.clone(), 1e-6);
        assert_eq!(again.len(), out.len());
        for (a, b) in again.iter().zip(&out) {
            assert_eq!(a.x, b.x);
        }
    }

    #[test]
    fn polar_flags_degenerate_angle() {
        let x = DVector::from_row_slice(&[1.0, 0.0, 0.0, 0.0]);
        let (vm, va, degenerate) = polar(&x, 2);
        assert_eq!(vm, vec![1.0, 0.0]);
        assert_eq!(va, vec![0.0, 0.0]);
        assert_eq!(degenerate, vec![1]);
    }
}

//! Worklist-driven bisection branch-and-prune over hypercubes: solve the
//! relaxation on each box, prune on a positive lower bound, accept small
//! boxes, split the rest.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::caseio::Network;
use crate::gpfmodel::{
    build_gpf, initial_box, BoxBounds, GpfInstance, RegionError, RegionSpec, StateVector,
};
use crate::netmatrix::{build_admittance, build_quadratic_forms, NetError};
use crate::relax::{
    assemble, solve_with, BackendError, RelaxKind, RelaxSolution, SolveOptions, SolveStatus,
};

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Per-unit power-mismatch pruning threshold (epsilon_R).
    pub eps_r: f64,
    /// Box-width acceptance threshold (epsilon_V).
    pub eps_v: f64,
    /// Exploration budget: maximum number of relaxation solves.
    pub max_nodes: usize,
    /// Multiplier on the backend tolerance used when reporting whether a
    /// prune decision was comfortably clear of the threshold.
    pub solver_margin: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            eps_r: 1e-5,
            eps_v: 1e-2,
            max_nodes: 2_000_000,
            solver_margin: 10.0,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<(), AtlasError> {
        if !(self.eps_r > 0.0 && self.eps_v > 0.0 && self.max_nodes >= 1) {
            return Err(AtlasError::BadTolerances);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Prune,
    Accept,
    Split,
}

/// Step-2 classification of a solved box.
///
/// A numerical failure never prunes: it accepts (small box) or splits,
/// keeping the certificate sound at the cost of extra work.
pub fn classify(sol: &RelaxSolution, box_: &BoxBounds, tol: &Tolerances) -> Classification {
    let width = box_.width_inf();
    match sol.status {
        SolveStatus::NumericalFailure => {
            if width <= tol.eps_v {
                Classification::Accept
            } else {
                Classification::Split
            }
        }
        _ => {
            if sol.objective > tol.eps_r {
                Classification::Prune
            } else if width <= tol.eps_v {
                Classification::Accept
            } else {
                Classification::Split
            }
        }
    }
}

/// Split a box at the midpoint of a widest coordinate (lowest index on
/// ties). Children tile the parent exactly.
pub fn branch(box_: &BoxBounds) -> Result<(BoxBounds, BoxBounds), AtlasError> {
    let width = box_.width_inf();
    if width <= 0.0 {
        return Err(AtlasError::ZeroWidthBox);
    }
    let k = (0..box_.dim())
        .find(|&i| box_.width(i) == width)
        .expect("max width attained");
    let mid = 0.5 * (box_.lower[k] + box_.upper[k]);
    let mut left = box_.clone();
    left.upper[k] = mid;
    let mut right = box_.clone();
    right.lower[k] = mid;
    Ok((left, right))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    AllCandidatesFound,
    NoSolutionInRegion,
    BudgetExhausted(Vec<BoxBounds>),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TraceRow {
    pub iteration: usize,
    pub live: usize,
    pub pruned: usize,
    pub accepted: usize,
    pub split: usize,
    pub solver_calls: usize,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default)]
pub struct AtlasStats {
    pub solver_calls: usize,
    pub wall_ms: u128,
    /// False when some prune decision was within `solver_margin x backend
    /// tolerance` of the threshold: the certificate is then numerical
    /// rather than comfortably rigorous.
    pub rigorous: bool,
}

#[derive(Debug, Clone)]
pub struct AtlasResult {
    /// Accepted boxes B_C paired with their relaxation points O*.
    pub candidates: Vec<(BoxBounds, StateVector)>,
    pub certificate: Certificate,
    pub trace: Vec<TraceRow>,
    /// Every pruned box with the lower bound that discarded it.
    pub pruned_log: Vec<(BoxBounds, f64)>,
    pub stats: AtlasStats,
}

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("invalid tolerances")]
    BadTolerances,
    #[error("cannot branch a zero-width box")]
    ZeroWidthBox,
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPolicy {
    /// Reference semantics: strict FIFO, fully deterministic.
    Sequential,
    /// Wave-parallel exploration with a merge barrier per wave. The
    /// candidate set matches the sequential run; trace interleaving and
    /// wall times differ.
    Parallel { workers: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct AtlasConfig {
    pub kind: RelaxKind,
    pub tol: Tolerances,
    pub policy: ExecPolicy,
    pub solve_opts: SolveOptions,
    /// Pop largest boxes first instead of FIFO.
    pub best_first: bool,
    /// Screen each box with the cheaper RLT bound before the cone solve.
    /// Decisions are unchanged (the cone bound dominates the RLT bound).
    pub cascade: bool,
}

impl AtlasConfig {
    pub fn new(kind: RelaxKind, tol: Tolerances) -> Self {
        AtlasConfig {
            kind,
            tol,
            policy: ExecPolicy::Sequential,
            solve_opts: SolveOptions::default(),
            best_first: false,
            cascade: true,
        }
    }
}

/// Build the model for `net` and explore the initial box.
pub fn run_atlas(
    net: &Network,
    region: &RegionSpec,
    kind: RelaxKind,
    tol: Tolerances,
) -> Result<AtlasResult, AtlasError> {
    let config = AtlasConfig::new(kind, tol);
    let (gpf, root) = match prepare(net, region) {
        Ok(v) => v,
        Err(AtlasError::Region(RegionError::EmptyRegion { .. })) => {
            return Ok(empty_region_result())
        }
        Err(e) => return Err(e),
    };
    run_atlas_with(&gpf, vec![root], &config)
}

/// Model assembly shared by the engine and the refinement pipeline.
pub fn prepare(net: &Network, region: &RegionSpec) -> Result<(GpfInstance, BoxBounds), AtlasError> {
    let y = build_admittance(net)?;
    let forms = Arc::new(build_quadratic_forms(&y));
    let gpf = build_gpf(net, forms, region)?;
    let root = initial_box(net, region)?;
    Ok((gpf, root))
}

fn empty_region_result() -> AtlasResult {
    AtlasResult {
        candidates: Vec::new(),
        certificate: Certificate::NoSolutionInRegion,
        trace: Vec::new(),
        pruned_log: Vec::new(),
        stats: AtlasStats {
            rigorous: true,
            ..Default::default()
        },
    }
}

/// Explore a warm-start list of boxes over an existing GPF instance.
pub fn run_atlas_with(
    gpf: &GpfInstance,
    roots: Vec<BoxBounds>,
    config: &AtlasConfig,
) -> Result<AtlasResult, AtlasError> {
    config.tol.validate()?;
    match config.policy {
        ExecPolicy::Sequential => explore_sequential(gpf, roots, config),
        ExecPolicy::Parallel { workers } => explore_parallel(gpf, roots, config, workers),
    }
}

struct NodeOutcome {
    class: Classification,
    objective: f64,
    point: StateVector,
    margin_tight: bool,
}

fn process_box(
    gpf: &GpfInstance,
    box_: &BoxBounds,
    config: &AtlasConfig,
    calls: &mut usize,
) -> Result<NodeOutcome, AtlasError> {
    // Cheap screen: the RLT bound never exceeds the cone bound, so pruning
    // on it reaches the same decision the selected relaxation would.
    if config.cascade && config.kind != RelaxKind::Rlt {
        let screen = assemble(gpf, box_, RelaxKind::Rlt);
        let sol = solve_with(&screen, config.solve_opts)?;
        *calls += 1;
        if classify(&sol, box_, &config.tol) == Classification::Prune {
            let margin_tight = sol.objective.is_finite()
                && sol.objective - config.tol.eps_r
                    < config.tol.solver_margin * sol.solver_tolerance;
            return Ok(NodeOutcome {
                class: Classification::Prune,
                objective: sol.objective,
                point: box_.midpoint(),
                margin_tight,
            });
        }
    }
    let prog = assemble(gpf, box_, config.kind);
    let mut sol = solve_with(&prog, config.solve_opts)?;
    *calls += 1;
    if sol.status == SolveStatus::NumericalFailure && !config.solve_opts.high_accuracy {
        let retry = SolveOptions {
            high_accuracy: true,
            ..config.solve_opts
        };
        sol = solve_with(&prog, retry)?;
        *calls += 1;
    }
    let class = classify(&sol, box_, &config.tol);
    let margin_tight = class == Classification::Prune
        && sol.objective.is_finite()
        && sol.objective - config.tol.eps_r < config.tol.solver_margin * sol.solver_tolerance;
    let point = if sol.status == SolveStatus::Optimal {
        sol.x_star
    } else {
        // No usable relaxation point; fall back to the box midpoint.
        box_.midpoint()
    };
    Ok(NodeOutcome {
        class,
        objective: sol.objective,
        point,
        margin_tight,
    })
}

fn explore_sequential(
    gpf: &GpfInstance,
    roots: Vec<BoxBounds>,
    config: &AtlasConfig,
) -> Result<AtlasResult, AtlasError> {
    let start = Instant::now();
    let mut queue: VecDeque<BoxBounds> = roots.into();
    let mut result = AtlasResult {
        candidates: Vec::new(),
        certificate: Certificate::AllCandidatesFound,
        trace: Vec::new(),
        pruned_log: Vec::new(),
        stats: AtlasStats {
            rigorous: true,
            ..Default::default()
        },
    };
    let (mut pruned, mut accepted, mut split) = (0usize, 0usize, 0usize);
    let mut iteration = 0usize;
    while let Some(box_) = pop_next(&mut queue, config.best_first) {
        if iteration >= config.tol.max_nodes {
            let mut unresolved = vec![box_];
            unresolved.extend(queue.drain(..));
            result.certificate = Certificate::BudgetExhausted(unresolved);
            break;
        }
        iteration += 1;
        let out = process_box(gpf, &box_, config, &mut result.stats.solver_calls)?;
        if out.margin_tight {
            result.stats.rigorous = false;
        }
        match out.class {
            Classification::Prune => {
                pruned += 1;
                result.pruned_log.push((box_, out.objective));
            }
            Classification::Accept => {
                accepted += 1;
                result.candidates.push((box_, out.point));
            }
            Classification::Split => {
                split += 1;
                let (a, b) = branch(&box_)?;
                queue.push_back(a);
                queue.push_back(b);
            }
        }
        result.trace.push(TraceRow {
            iteration,
            live: queue.len(),
            pruned,
            accepted,
            split,
            solver_calls: result.stats.solver_calls,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    if result.certificate == Certificate::AllCandidatesFound && result.candidates.is_empty() {
        result.certificate = Certificate::NoSolutionInRegion;
    }
    result.stats.wall_ms = start.elapsed().as_millis();
    Ok(result)
}

fn pop_next(queue: &mut VecDeque<BoxBounds>, best_first: bool) -> Option<BoxBounds> {
    if !best_first {
        return queue.pop_front();
    }
    // Widest box first; FIFO among equals keeps the run deterministic.
    let mut best = 0;
    for i in 1..queue.len() {
        if queue[i].width_inf() > queue[best].width_inf() {
            best = i;
        }
    }
    queue.remove(best)
}

fn explore_parallel(
    gpf: &GpfInstance,
    roots: Vec<BoxBounds>,
    config: &AtlasConfig,
    workers: usize,
) -> Result<AtlasResult, AtlasError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BackendError::Failure(e.to_string()))?;
    let start = Instant::now();
    let mut wave = roots;
    let mut result = AtlasResult {
        candidates: Vec::new(),
        certificate: Certificate::AllCandidatesFound,
        trace: Vec::new(),
        pruned_log: Vec::new(),
        stats: AtlasStats {
            rigorous: true,
            ..Default::default()
        },
    };
    let (mut pruned, mut accepted, mut split) = (0usize, 0usize, 0usize);
    let mut processed = 0usize;
    while !wave.is_empty() {
        let budget = config.tol.max_nodes.saturating_sub(processed);
        if budget == 0 {
            result.certificate = Certificate::BudgetExhausted(wave);
            break;
        }
        let take = budget.min(wave.len());
        let overflow: Vec<BoxBounds> = wave.split_off(take);
        let outcomes: Vec<Result<(NodeOutcome, usize), AtlasError>> = pool.install(|| {
            wave.par_iter()
                .map(|b| {
                    let mut calls = 0usize;
                    process_box(gpf, b, config, &mut calls).map(|o| (o, calls))
                })
                .collect()
        });
        processed += wave.len();
        let mut next = Vec::new();
        for (box_, outcome) in wave.into_iter().zip(outcomes) {
            let (out, calls) = outcome?;
            result.stats.solver_calls += calls;
            if out.margin_tight {
                result.stats.rigorous = false;
            }
            match out.class {
                Classification::Prune => {
                    pruned += 1;
                    result.pruned_log.push((box_, out.objective));
                }
                Classification::Accept => {
                    accepted += 1;
                    result.candidates.push((box_, out.point));
                }
                Classification::Split => {
                    split += 1;
                    let (a, b) = branch(&box_)?;
                    next.push(a);
                    next.push(b);
                }
            }
        }
        next.extend(overflow);
        result.trace.push(TraceRow {
            iteration: processed,
            live: next.len(),
            pruned,
            accepted,
            split,
            solver_calls: result.stats.solver_calls,
            wall_ms: start.elapsed().as_millis(),
        });
        wave = next;
    }
    if result.certificate == Certificate::AllCandidatesFound && result.candidates.is_empty() {
        result.certificate = Certificate::NoSolutionInRegion;
    }
    result.stats.wall_ms = start.elapsed().as_millis();
    Ok(result)
}

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use pfatlas::bisect::{AtlasConfig, ExecPolicy, Tolerances};
use pfatlas::refine::{locate_all, RefineOpts};
use pfatlas::relax::SolveOptions;
use pfatlas::{parse_case, scale_load, Certificate, RegionSpec, RelaxKind};

/// Enumerate all power-flow solutions of a MATPOWER case inside a voltage
/// region, or certify that none exists.
#[derive(Parser)]
#[command(name = "pfatlas", version, about)]
struct Cli {
    /// MATPOWER case file (.m)
    #[arg(long)]
    case: PathBuf,

    /// Relaxation used for pruning: rlt, socp or sdp
    #[arg(long, default_value = "sdp")]
    relax: RelaxKind,

    /// Mismatch pruning threshold (per unit)
    #[arg(long, default_value_t = 1e-5)]
    eps_r: f64,

    /// Box-width acceptance threshold
    #[arg(long, default_value_t = 0.01)]
    eps_v: f64,

    /// Optional first-stage box width (two-stage exploration)
    #[arg(long)]
    coarse_eps_v: Option<f64>,

    /// Region description (TOML); defaults to the widest valid region
    #[arg(long)]
    region: Option<PathBuf>,

    /// Phase-angle-difference bound for every line, degrees
    #[arg(long)]
    pad: Option<f64>,

    /// Scale every bus load by this factor before solving
    #[arg(long)]
    lambda: Option<f64>,

    /// Exploration budget (relaxation solves)
    #[arg(long, default_value_t = 2_000_000)]
    max_nodes: usize,

    /// Worker threads; 1 means strictly sequential
    #[arg(long, default_value_t = 1)]
    workers: usize,

    /// Write the solution list as JSON to this file (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write per-iteration progress as CSV to this file
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Serialize)]
struct SolutionRecord {
    vm: Vec<f64>,
    va_deg: Vec<f64>,
    e: Vec<f64>,
    f: Vec<f64>,
    residual_inf: f64,
    source_box_lower: Vec<f64>,
    source_box_upper: Vec<f64>,
    escaped_source_box: bool,
    degenerate_angle_buses: Vec<usize>,
}

#[derive(Serialize)]
struct Output {
    case: String,
    relaxation: String,
    certificate: String,
    eps_r: f64,
    eps_v: f64,
    solver_calls: usize,
    wall_ms: u128,
    rigorous: bool,
    solutions: Vec<SolutionRecord>,
    unresolved_boxes: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, String> {
    let text = fs::read_to_string(&cli.case)
        .map_err(|e| format!("{}: {e}", cli.case.display()))?;
    let mut net = parse_case(&text).map_err(|e| e.to_string())?;
    if let Some(lambda) = cli.lambda {
        net = scale_load(&net, lambda).map_err(|e| e.to_string())?;
    }

    let mut region = match &cli.region {
        Some(path) => {
            let rtext = fs::read_to_string(path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            RegionSpec::from_toml_str(&rtext).map_err(|e| e.to_string())?
        }
        None => RegionSpec::default(),
    };
    if let Some(pad) = cli.pad {
        region = region.with_pad_all(pad.to_radians());
    }

    let tol = Tolerances {
        eps_r: cli.eps_r,
        eps_v: cli.eps_v,
        max_nodes: cli.max_nodes,
        ..Default::default()
    };
    let config = AtlasConfig {
        kind: cli.relax,
        tol,
        policy: if cli.workers > 1 {
            ExecPolicy::Parallel {
                workers: cli.workers,
            }
        } else {
            ExecPolicy::Sequential
        },
        solve_opts: SolveOptions::default(),
        best_first: false,
        cascade: true,
    };
    let opts = RefineOpts {
        coarse_eps_v: cli.coarse_eps_v,
        ..Default::default()
    };

    let result = locate_all(&net, &region, &config, &opts).map_err(|e| e.to_string())?;

    if let Some(path) = &cli.trace {
        let mut csv = String::from("iteration,live,pruned,accepted,split,solver_calls,wall_ms\n");
        for r in &result.trace {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iteration, r.live, r.pruned, r.accepted, r.split, r.solver_calls, r.wall_ms
            ));
        }
        fs::write(path, csv).map_err(|e| format!("{}: {e}", path.display()))?;
    }

    let certificate = match &result.certificate {
        Certificate::AllCandidatesFound => "all-candidates-found",
        Certificate::NoSolutionInRegion => "no-solution-in-region",
        Certificate::BudgetExhausted(_) => "budget-exhausted",
    };
    let n = net.n();
    let output = Output {
        case: cli.case.display().to_string(),
        relaxation: format!("{:?}", cli.relax).to_lowercase(),
        certificate: certificate.into(),
        eps_r: cli.eps_r,
        eps_v: cli.eps_v,
        solver_calls: result.solver_calls,
        wall_ms: result.wall_ms,
        rigorous: result.rigorous,
        solutions: result
            .solutions
            .iter()
            .map(|s| SolutionRecord {
                vm: s.vm.clone(),
                va_deg: s.va.clone(),
                e: s.x.iter().take(n).copied().collect(),
                f: s.x.iter().skip(n).copied().collect(),
                residual_inf: s.residual_inf,
                source_box_lower: s.source_box.lower.iter().copied().collect(),
                source_box_upper: s.source_box.upper.iter().copied().collect(),
                escaped_source_box: s.escaped,
                degenerate_angle_buses: s.degenerate_angle.clone(),
            })
            .collect(),
        unresolved_boxes: result.unresolved.len(),
    };
    let json = serde_json::to_string_pretty(&output).map_err(|e| e.to_string())?;
    match &cli.out {
        Some(path) => fs::write(path, json).map_err(|e| format!("{}: {e}", path.display()))?,
        None => println!("{json}"),
    }

    eprintln!(
        "{certificate}: {} solution(s), {} solver call(s), {} ms{}",
        output.solutions.len(),
        output.solver_calls,
        output.wall_ms,
        if output.rigorous { "" } else { " (margins not rigorous)" },
    );

    Ok(match result.certificate {
        Certificate::AllCandidatesFound => ExitCode::SUCCESS,
        Certificate::NoSolutionInRegion => ExitCode::from(3),
        Certificate::BudgetExhausted(_) => ExitCode::from(4),
    })
}

//! Enumerate every real solution of the power-flow equations of a small
//! network inside a voltage region, or certify that none exists.
//!
//! The pipeline: parse a MATPOWER case ([`caseio`]), build the admittance
//! and per-bus quadratic forms ([`netmatrix`]), pose the slack-augmented
//! feasibility problem over a rectangular box ([`gpfmodel`]), lower-bound
//! it with an RLT / SOCP / SDP relaxation ([`relax`]), bisect boxes until
//! each is pruned or accepted ([`bisect`]), and polish candidates with
//! Newton's method ([`refine`]).

pub mod bisect;
pub mod caseio;
pub mod gpfmodel;
pub mod netmatrix;
pub mod refine;
pub mod relax;

pub use bisect::{run_atlas, AtlasConfig, AtlasResult, Certificate, Tolerances};
pub use caseio::{parse_case, scale_load, Network};
pub use gpfmodel::{BoxBounds, RegionSpec};
pub use refine::{locate_all, LocateResult, PfSolution, RefineOpts};
pub use relax::RelaxKind;

/// Small hand-written cases shared by the unit and integration tests.
pub mod test_fixtures {
    /// Slack bus at 1.0 pu / 0 deg feeding a 50 MW PQ load through a pure
    /// 0.1 pu reactance; the two roots have a closed form.
    pub const TWO_BUS: &str = "\
function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;
\t2\t1\t50\t0\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t0\t0\t300\t-300\t1\t100\t1\t250\t10;
];
mpc.branch = [
\t1\t2\t0\t0.1\t0\t250\t250\t250\t0\t0\t1\t-360\t360;
];
";

    /// The same topology with an arbitrary load at bus 2 (MW / MVAr).
    /// With q = 0 and p_in = -p/100, the PQ-bus roots are
    /// f2 = p_in / 10, e2 = (1 +- sqrt(1 - p_in^2 / 25)) / 2.
    pub fn two_bus_case(p_mw: f64, q_mvar: f64) -> String {
        TWO_BUS.replace(
            "\t2\t1\t50\t0",
            &format!("\t2\t1\t{p_mw}\t{q_mvar}"),
        )
    }
}

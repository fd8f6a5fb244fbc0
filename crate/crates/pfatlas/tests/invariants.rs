use nalgebra::DVector;
use proptest::prelude::*;

use pfatlas::bisect::{branch, run_atlas, Tolerances};
use pfatlas::gpfmodel::BoxBounds;
use pfatlas::refine::{dedup, PfSolution};
use pfatlas::relax::RelaxKind;
use pfatlas::{parse_case, RegionSpec};

fn arb_box(dim: usize) -> impl Strategy<Value = BoxBounds> {
    (
        prop::collection::vec(-10.0f64..10.0, dim),
        prop::collection::vec(0.0f64..5.0, dim),
    )
        .prop_map(|(lo, w)| {
            let lower = DVector::from_vec(lo);
            let upper = &lower + DVector::from_vec(w);
            BoxBounds { lower, upper }
        })
}

proptest! {
    // The parser returns an error or a network; it never panics, even on
    // garbage, truncated tables, or sign-flipped numbers.
    #[test]
    fn parser_totality(text in ".{0,400}") {
        let _ = parse_case(&text);
    }

    #[test]
    fn parser_totality_structured(
        base in -10.0f64..1000.0,
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 0..14), 0..6),
    ) {
        let mut text = format!("mpc.baseMVA = {base};\nmpc.bus = [\n");
        for r in &rows {
            let line: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            text.push_str(&format!("\t{};\n", line.join("\t")));
        }
        text.push_str("];\nmpc.gen = [\n];\nmpc.branch = [\n];\n");
        let _ = parse_case(&text);
    }

    // branch() tiles the parent exactly: children agree with the parent on
    // every bound except the split coordinate, where they share the
    // midpoint.
    #[test]
    fn branch_partition_exactness(b in arb_box(6)) {
        prop_assume!(b.width_inf() > 0.0);
        let (l, r) = branch(&b).unwrap();
        let mut split_coords = 0;
        for i in 0..b.dim() {
            if l.upper[i] == b.upper[i] {
                // not the split coordinate
                prop_assert_eq!(l.lower[i], b.lower[i]);
                prop_assert_eq!(r.lower[i], b.lower[i]);
                prop_assert_eq!(r.upper[i], b.upper[i]);
            } else {
                split_coords += 1;
                let mid = 0.5 * (b.lower[i] + b.upper[i]);
                prop_assert_eq!(l.upper[i], mid);
                prop_assert_eq!(r.lower[i], mid);
                prop_assert_eq!(l.lower[i], b.lower[i]);
                prop_assert_eq!(r.upper[i], b.upper[i]);
                // The split coordinate attains the maximal width.
                prop_assert_eq!(b.width(i), b.width_inf());
            }
        }
        prop_assert_eq!(split_coords, 1);
    }

    // dedup is idempotent and never returns two representatives closer
    // than delta.
    #[test]
    fn dedup_idempotence(
        points in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..12),
        delta in 1e-6f64..0.5,
    ) {
        let sols: Vec<PfSolution> = points
            .iter()
            .map(|p| fake_solution(p))
            .collect();
        let once = dedup(sols, delta);
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!((&a.x - &b.x).amax() > delta);
            }
        }
        let twice = dedup(once.clone(), delta);
        prop_assert_eq!(twice.len(), once.len());
        for (a, b) in twice.iter().zip(&once) {
            prop_assert_eq!(&a.x, &b.x);
        }
    }
}

fn fake_solution(p: &[f64]) -> PfSolution {
    let x = DVector::from_row_slice(p);
    let n = p.len() / 2;
    PfSolution {
        x: x.clone(),
        vm: (0..n).map(|k| x[k].hypot(x[n + k])).collect(),
        va: vec![0.0; n],
        residual_inf: 0.0,
        source_box: BoxBounds {
            lower: x.clone(),
            upper: x,
        },
        escaped: false,
        degenerate_angle: Vec::new(),
    }
}

// Sequential exploration is deterministic end to end: identical inputs give
// identical candidate boxes, prune logs, and counters.
#[test]
fn sequential_determinism() {
    let net = parse_case(pfatlas::test_fixtures::TWO_BUS).unwrap();
    let tol = Tolerances {
        eps_r: 1e-5,
        eps_v: 0.05,
        ..Default::default()
    };
    let a = run_atlas(&net, &RegionSpec::default(), RelaxKind::Sdp, tol).unwrap();
    let b = run_atlas(&net, &RegionSpec::default(), RelaxKind::Sdp, tol).unwrap();
    assert_eq!(a.candidates.len(), b.candidates.len());
    for ((ba, xa), (bb, xb)) in a.candidates.iter().zip(&b.candidates) {
        assert_eq!(ba, bb);
        assert_eq!(xa, xb);
    }
    assert_eq!(a.pruned_log.len(), b.pruned_log.len());
    for ((ba, sa), (bb, sb)) in a.pruned_log.iter().zip(&b.pruned_log) {
        assert_eq!(ba, bb);
        assert_eq!(sa, sb);
    }
    assert_eq!(a.trace.len(), b.trace.len());
    assert_eq!(a.stats.solver_calls, b.stats.solver_calls);
}

//! Export of a [`ConicProgram`] to the Conic Benchmark Format (CBF v3)
//! for offline cross-checking against external solvers. Field layout is
//! documented in `docs/cbf.md`.

use std::fmt::Write;

use super::ConicProgram;

/// Serialize the program. Scalar variables are emitted as one free block
/// in the flat (y, X-triangle, s) order; constraint rows are emitted as
/// equalities (`L=`), then `<= 0` rows (`L-`), then one rotated quadratic
/// cone (`QR`, rows `c/2, d, a, b`) per per-line cone; the PSD block, when
/// present, becomes one `PSDCON` holding the moment matrix `[[1, y'],
/// [y, X]]` with unit coefficients.
pub fn to_cbf(prog: &ConicProgram) -> String {
    let mut out = String::new();
    out.push_str("VER\n3\n\n");
    out.push_str("OBJSENSE\nMIN\n\n");

    let nv = prog.num_vars();
    writeln!(out, "VAR\n{nv} 1\nF {nv}\n").unwrap();

    if prog.psd {
        let m = prog.map.num_y + 1;
        writeln!(out, "PSDCON\n1\n{m}\n").unwrap();
    }

    let n_eq = prog.eq.len();
    let n_ineq = prog.ineq.len();
    let n_cone_rows = 4 * prog.cones.len();
    let mut groups = Vec::new();
    if n_eq > 0 {
        groups.push(format!("L= {n_eq}"));
    }
    if n_ineq > 0 {
        groups.push(format!("L- {n_ineq}"));
    }
    for _ in &prog.cones {
        groups.push("QR 4".to_string());
    }
    writeln!(out, "CON\n{} {}", n_eq + n_ineq + n_cone_rows, groups.len()).unwrap();
    for g in &groups {
        writeln!(out, "{g}").unwrap();
    }
    out.push('\n');

    let mut acoord: Vec<(usize, usize, f64)> = Vec::new();
    let mut bcoord: Vec<(usize, f64)> = Vec::new();
    let mut row = 0usize;
    for e in prog.eq.iter().chain(&prog.ineq) {
        for &(v, c) in &e.terms {
            acoord.push((row, v, c));
        }
        if e.constant != 0.0 {
            bcoord.push((row, e.constant));
        }
        row += 1;
    }
    for rc in &prog.cones {
        let half_c = {
            let mut h = rc.c.clone();
            for t in &mut h.terms {
                t.1 *= 0.5;
            }
            h.constant *= 0.5;
            h
        };
        for e in [&half_c, &rc.d, &rc.a, &rc.b] {
            for &(v, c) in &e.terms {
                acoord.push((row, v, c));
            }
            if e.constant != 0.0 {
                bcoord.push((row, e.constant));
            }
            row += 1;
        }
    }

    writeln!(out, "OBJACOORD\n{}", prog.objective.len()).unwrap();
    for &(v, c) in &prog.objective {
        writeln!(out, "{v} {c:.17e}").unwrap();
    }
    out.push('\n');

    writeln!(out, "ACOORD\n{}", acoord.len()).unwrap();
    for (r, v, c) in &acoord {
        writeln!(out, "{r} {v} {c:.17e}").unwrap();
    }
    out.push('\n');

    writeln!(out, "BCOORD\n{}", bcoord.len()).unwrap();
    for (r, c) in &bcoord {
        writeln!(out, "{r} {c:.17e}").unwrap();
    }
    out.push('\n');

    if prog.psd {
        // Moment matrix [[1, y'], [y, X]]: constant 1 via DCOORD, variable
        // entries via HCOORD (lower triangle, row >= col).
        let m = prog.map.num_y;
        let mut hcoord = Vec::new();
        for j in 0..m {
            hcoord.push((0usize, j, j + 1, 0usize, 1.0));
            for i in 0..=j {
                hcoord.push((0usize, prog.map.x_entry_var(i, j), j + 1, i + 1, 1.0));
            }
        }
        writeln!(out, "HCOORD\n{}", hcoord.len()).unwrap();
        for (con, v, r, c, val) in &hcoord {
            writeln!(out, "{con} {v} {r} {c} {val:.1}").unwrap();
        }
        out.push('\n');
        out.push_str("DCOORD\n1\n0 0 0 1.0\n\n");
    }
    out
}

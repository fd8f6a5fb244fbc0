//! Convex relaxations of GPF over a box: RLT envelopes, optional per-line
//! quadratic cones, optional PSD cone on the lifted matrix block.
//!
//! Variable layout of a [`ConicProgram`]: the free coordinates `y`
//! (slack-bus entries eliminated), then the distinct upper-triangle entries
//! of the lifted matrix `X` in column-major order, then the nonnegative
//! equation slacks `s`.

pub mod backend;
pub mod cbf;
#[cfg(feature = "conic")]
pub mod clarabel_backend;

use nalgebra::{DMatrix, DVector};

use crate::gpfmodel::{BoxBounds, GpfInstance, StateVector};
pub use backend::{BackendError, BackendSolution, ConicBackend, LpBackend, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelaxKind {
    Rlt,
    Socp,
    Sdp,
}

impl std::str::FromStr for RelaxKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rlt" => Ok(RelaxKind::Rlt),
            "socp" => Ok(RelaxKind::Socp),
            "sdp" => Ok(RelaxKind::Sdp),
            other => Err(format!("unknown relaxation kind `{other}`")),
        }
    }
}

/// Sparse linear expression over the flat variable vector.
#[derive(Debug, Clone, Default)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn push(&mut self, var: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push((var, coef));
        }
    }

    /// Merge duplicate variable entries.
    pub fn compress(mut self) -> Self {
        self.terms.sort_unstable_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (v, c) in self.terms {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => out.push((v, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        self.terms = out;
        self
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * vars[v]).sum::<f64>()
    }

    pub(crate) fn add(mut self, other: &LinExpr, scale: f64) -> Self {
        self.constant += other.constant * scale;
        for &(v, c) in &other.terms {
            self.push(v, c * scale);
        }
        self
    }
}

/// Mapping between full 2n coordinates and the reduced (y, X, s) variables.
#[derive(Debug, Clone)]
pub struct LiftMap {
    pub dim: usize,
    pub free: Vec<usize>,
    /// coordinate -> y index, None when fixed.
    pub pos: Vec<Option<usize>>,
    pub fixed: DVector<f64>,
    pub num_y: usize,
    pub num_tri: usize,
}

impl LiftMap {
    pub fn from_gpf(gpf: &GpfInstance) -> Self {
        let dim = 2 * gpf.n;
        let mut pos = vec![None; dim];
        for (idx, &c) in gpf.free.iter().enumerate() {
            pos[c] = Some(idx);
        }
        let m = gpf.free.len();
        LiftMap {
            dim,
            free: gpf.free.clone(),
            pos,
            fixed: gpf.fixed_template.clone(),
            num_y: m,
            num_tri: m * (m + 1) / 2,
        }
    }

    /// Column-major upper-triangle index of the X entry for y pair (i, j).
    pub fn tri(i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        j * (j + 1) / 2 + i
    }

    pub fn x_entry_var(&self, i: usize, j: usize) -> usize {
        self.num_y + Self::tri(i, j)
    }

    pub fn slack_var(&self, s: usize) -> usize {
        self.num_y + self.num_tri + s
    }

    /// Lift the product of coordinates `a * b` to a linear expression:
    /// an X entry when both are free, a scaled y term when one is fixed.
    pub fn product(&self, a: usize, b: usize) -> LinExpr {
        let mut e = LinExpr::default();
        match (self.pos[a], self.pos[b]) {
            (Some(i), Some(j)) => e.push(self.x_entry_var(i, j), 1.0),
            (Some(i), None) => e.push(i, self.fixed[b]),
            (None, Some(j)) => e.push(j, self.fixed[a]),
            (None, None) => e.constant = self.fixed[a] * self.fixed[b],
        }
        e
    }

    /// Lift the quadratic form `x' A x` (A symmetric) to a linear
    /// expression over (y, X).
    pub fn lift_quad(&self, a: &DMatrix<f64>) -> LinExpr {
        let mut e = LinExpr::default();
        for j in 0..self.dim {
            for i in 0..=j {
                let v = a[(i, j)];
                if v == 0.0 {
                    continue;
                }
                let coef = if i == j { v } else { 2.0 * v };
                e = e.add(&self.product(i, j), coef);
            }
        }
        e.compress()
    }

    /// Lift a linear coordinate term.
    pub fn coord(&self, c: usize, coef: f64) -> LinExpr {
        let mut e = LinExpr::default();
        match self.pos[c] {
            Some(i) => e.push(i, coef),
            None => e.constant = coef * self.fixed[c],
        }
        e
    }

    /// Reassemble a full-length state vector from the y block.
    pub fn expand(&self, y: &[f64]) -> StateVector {
        let mut x = self.fixed.clone();
        for (idx, &c) in self.free.iter().enumerate() {
            x[c] = y[idx];
        }
        x
    }
}

/// Rotated-cone membership `a^2 + b^2 <= c * d` (with `c, d >= 0`).
#[derive(Debug, Clone)]
pub struct RotatedCone {
    pub c: LinExpr,
    pub d: LinExpr,
    pub a: LinExpr,
    pub b: LinExpr,
}

/// A relaxation instance in solver-neutral conic standard form.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub map: LiftMap,
    pub num_slack: usize,
    /// Linear objective over the flat variables (sum of slacks).
    pub objective: Vec<(usize, f64)>,
    /// Rows `expr == 0`.
    pub eq: Vec<LinExpr>,
    /// Rows `expr <= 0`.
    pub ineq: Vec<LinExpr>,
    /// Membership of the moment matrix [[1, y'], [y, X]] in the PSD cone.
    pub psd: bool,
    pub cones: Vec<RotatedCone>,
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.map.num_y + self.map.num_tri + self.num_slack
    }

    pub fn needs_conic_backend(&self) -> bool {
        self.psd || !self.cones.is_empty()
    }
}

/// McCormick / RLT envelope rows for every free coordinate pair of `box_`,
/// in `expr <= 0` form. Zero-width coordinates degenerate to exact linear
/// equalities (emitted as inequality pairs).
pub fn rlt_block(box_: &BoxBounds, map: &LiftMap) -> Vec<LinExpr> {
    let m = map.num_y;
    let mut rows = Vec::with_capacity(2 * m * (m + 1));
    for j in 0..m {
        for i in 0..=j {
            let (ci, cj) = (map.free[i], map.free[j]);
            let (li, ui) = (box_.lower[ci], box_.upper[ci]);
            let (lj, uj) = (box_.lower[cj], box_.upper[cj]);
            let xv = map.x_entry_var(i, j);
            let push_row = |rows: &mut Vec<LinExpr>, xi: f64, xj: f64, xx: f64, cst: f64| {
                // xi*y_i + xj*y_j + xx*X_ij + cst <= 0
                let mut e = LinExpr::default();
                e.push(i, xi);
                e.push(j, xj); // merges with the i term when i == j
                e.push(xv, xx);
                e.constant = cst;
                rows.push(e.compress());
            };
            let wi = ui - li;
            let wj = uj - lj;
            if wi == 0.0 || wj == 0.0 {
                // X_ij = x_i^fixed * x_j (exact linearization).
                if wi == 0.0 && wj == 0.0 {
                    push_row(&mut rows, 0.0, 0.0, 1.0, -li * lj);
                    push_row(&mut rows, 0.0, 0.0, -1.0, li * lj);
                } else if wi == 0.0 {
                    push_row(&mut rows, 0.0, -li, 1.0, 0.0);
                    push_row(&mut rows, 0.0, li, -1.0, 0.0);
                } else {
                    push_row(&mut rows, -lj, 0.0, 1.0, 0.0);
                    push_row(&mut rows, lj, 0.0, -1.0, 0.0);
                }
                continue;
            }
            // (x_i - l_i)(x_j - l_j) >= 0
            push_row(&mut rows, lj, li, -1.0, -li * lj);
            // (u_i - x_i)(u_j - x_j) >= 0
            push_row(&mut rows, uj, ui, -1.0, -ui * uj);
            // (x_i - l_i)(u_j - x_j) >= 0
            push_row(&mut rows, -uj, -li, 1.0, li * uj);
            if i != j {
                // (u_i - x_i)(x_j - l_j) >= 0
                push_row(&mut rows, -lj, -ui, 1.0, ui * lj);
            }
        }
    }
    rows
}

/// Per-line rotated-cone constraints implied by `X = x x'` (rank-1
/// necessary, convex direction), plus nonnegativity of the two diagonal
/// sums. Returns (cones, extra inequality rows).
pub fn socp_block(gpf: &GpfInstance, map: &LiftMap) -> (Vec<RotatedCone>, Vec<LinExpr>) {
    let n = gpf.n;
    let mut cones = Vec::with_capacity(gpf.lines.len());
    let mut rows = Vec::new();
    for &(i, j) in &gpf.lines {
        let c = map
            .product(i, i)
            .add(&map.product(n + i, n + i), 1.0)
            .compress();
        let d = map
            .product(j, j)
            .add(&map.product(n + j, n + j), 1.0)
            .compress();
        let a = map.product(i, j).add(&map.product(n + i, n + j), 1.0).compress();
        let b = map
            .product(n + i, j)
            .add(&map.product(i, n + j), -1.0)
            .compress();
        // -c <= 0, -d <= 0
        rows.push(LinExpr::constant(0.0).add(&c, -1.0).compress());
        rows.push(LinExpr::constant(0.0).add(&d, -1.0).compress());
        cones.push(RotatedCone { c, d, a, b });
    }
    (cones, rows)
}

/// Assemble the relaxation of `gpf` over `box_` for the given kind.
pub fn assemble(gpf: &GpfInstance, box_: &BoxBounds, kind: RelaxKind) -> ConicProgram {
    let map = LiftMap::from_gpf(gpf);
    let n = gpf.n;
    let num_slack = gpf.slack_count();

    let mut eq = Vec::with_capacity(gpf.equations.len());
    for (idx, e) in gpf.equations.iter().enumerate() {
        let mut row = map.lift_quad(gpf.matrix(e));
        row.push(map.slack_var(2 * idx), 1.0);
        row.push(map.slack_var(2 * idx + 1), -1.0);
        row.constant -= e.rhs;
        eq.push(row);
    }

    let mut ineq = Vec::new();
    // Box membership of y.
    for (i, &c) in map.free.iter().enumerate() {
        let mut up = LinExpr::default();
        up.push(i, 1.0);
        up.constant = -box_.upper[c];
        ineq.push(up);
        let mut lo = LinExpr::default();
        lo.push(i, -1.0);
        lo.constant = box_.lower[c];
        ineq.push(lo);
    }
    // Slack nonnegativity.
    for s in 0..num_slack {
        let mut row = LinExpr::default();
        row.push(map.slack_var(s), -1.0);
        ineq.push(row);
    }
    ineq.extend(rlt_block(box_, &map));
    // PAD rows: |X_{j,n+i} - X_{i,n+j}| <= (X_{i,j} + X_{n+i,n+j}) tan(d).
    for &(i, j, tan_d) in &gpf.pad {
        let s = map.product(i, j).add(&map.product(n + i, n + j), 1.0);
        let d = map.product(j, n + i).add(&map.product(i, n + j), -1.0);
        ineq.push(d.clone().add(&s, -tan_d).compress());
        ineq.push(LinExpr::constant(0.0).add(&d, -1.0).add(&s, -tan_d).compress());
    }
    // Magnitude rows: v_min^2 <= X_kk + X_{n+k,n+k} <= v_max^2.
    for &(k, lo2, hi2) in &gpf.mag_bounds {
        let t = map.product(k, k).add(&map.product(n + k, n + k), 1.0);
        let mut up = t.clone();
        up.constant -= hi2;
        ineq.push(up.compress());
        let mut lo = LinExpr::constant(lo2).add(&t, -1.0);
        lo = lo.compress();
        ineq.push(lo);
    }
    // Sector cuts, linear in x: the voltage phasor lies in the cone
    // spanned by the two edge rays (valid for sector width <= pi).
    for cut in &gpf.angle_cuts {
        let k = cut.bus;
        let e_min = map
            .coord(k, cut.theta_min.sin())
            .add(&map.coord(n + k, -cut.theta_min.cos()), 1.0);
        ineq.push(e_min.compress());
        let e_max = map
            .coord(k, -cut.theta_max.sin())
            .add(&map.coord(n + k, cut.theta_max.cos()), 1.0);
        ineq.push(e_max.compress());
    }

    let (cones, psd) = match kind {
        RelaxKind::Rlt => (Vec::new(), false),
        RelaxKind::Socp => {
            let (cones, extra) = socp_block(gpf, &map);
            ineq.extend(extra);
            (cones, false)
        }
        RelaxKind::Sdp => (Vec::new(), true),
    };

    let objective = (0..num_slack).map(|s| (map.slack_var(s), 1.0)).collect();

    ConicProgram {
        map,
        num_slack,
        objective,
        eq,
        ineq,
        psd,
        cones,
    }
}

/// Solver output for one relaxation.
#[derive(Debug, Clone)]
pub struct RelaxSolution {
    pub status: SolveStatus,
    /// Optimal value S_cvx; +infinity when infeasible.
    pub objective: f64,
    /// Candidate point, full 2n layout (slack-bus coordinates restored).
    pub x_star: StateVector,
    /// Lifted matrix at the optimum, full 2n x 2n (fixed blocks filled
    /// from the rank-1 products with the slack-bus coordinates).
    pub x_matrix: DMatrix<f64>,
    pub solver_tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendChoice {
    /// Conic backend when compiled in, pure-LP path otherwise.
    Auto,
    Conic,
    Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub backend: BackendChoice,
    pub high_accuracy: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            backend: BackendChoice::Auto,
            high_accuracy: false,
        }
    }
}

/// Solve a conic program with the default backend and accuracy.
pub fn solve(prog: &ConicProgram) -> Result<RelaxSolution, BackendError> {
    solve_with(prog, SolveOptions::default())
}

pub fn solve_with(prog: &ConicProgram, opts: SolveOptions) -> Result<RelaxSolution, BackendError> {
    let sol = dispatch(prog, opts)?;
    Ok(interpret(prog, sol))
}

fn dispatch(prog: &ConicProgram, opts: SolveOptions) -> Result<BackendSolution, BackendError> {
    match opts.backend {
        BackendChoice::Linear => LpBackend.solve(prog),
        #[cfg(feature = "conic")]
        BackendChoice::Conic | BackendChoice::Auto => {
            clarabel_backend::ClarabelBackend {
                high_accuracy: opts.high_accuracy,
            }
            .solve(prog)
        }
        #[cfg(not(feature = "conic"))]
        BackendChoice::Conic => Err(BackendError::Unsupported(
            "conic backend not compiled in (enable the `conic` feature)".into(),
        )),
        #[cfg(not(feature = "conic"))]
        BackendChoice::Auto => LpBackend.solve(prog),
    }
}

fn interpret(prog: &ConicProgram, sol: BackendSolution) -> RelaxSolution {
    let map = &prog.map;
    let m = map.num_y;
    let dim = map.dim;
    let (x_star, x_matrix, objective) = match sol.status {
        SolveStatus::Optimal => {
            let y = &sol.vars[..m];
            let x = map.expand(y);
            let mut xx = DMatrix::zeros(dim, dim);
            for cj in 0..dim {
                for ci in 0..=cj {
                    let v = match (map.pos[ci], map.pos[cj]) {
                        (Some(i), Some(j)) => sol.vars[map.x_entry_var(i, j)],
                        (Some(i), None) => y[i] * map.fixed[cj],
                        (None, Some(j)) => y[j] * map.fixed[ci],
                        (None, None) => map.fixed[ci] * map.fixed[cj],
                    };
                    xx[(ci, cj)] = v;
                    xx[(cj, ci)] = v;
                }
            }
            (x, xx, sol.objective)
        }
        SolveStatus::Infeasible => (map.expand(&vec![0.0; m]), DMatrix::zeros(dim, dim), f64::INFINITY),
        SolveStatus::NumericalFailure => {
            (map.expand(&vec![0.0; m]), DMatrix::zeros(dim, dim), f64::NAN)
        }
    };
    RelaxSolution {
        status: sol.status,
        objective,
        x_star,
        x_matrix,
        solver_tolerance: sol.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caseio::parse_case;
    use crate::gpfmodel::{build_gpf, initial_box, BoxBounds, RegionSpec};
    use crate::netmatrix::{build_admittance, build_quadratic_forms};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn two_bus_gpf() -> (crate::caseio::Network, GpfInstance, BoxBounds) {
        let net = parse_case(crate::test_fixtures::TWO_BUS).unwrap();
        let y = build_admittance(&net).unwrap();
        let forms = Arc::new(build_quadratic_forms(&y));
        let region = RegionSpec::default();
        let gpf = build_gpf(&net, forms, &region).unwrap();
        let root = initial_box(&net, &region).unwrap();
        (net, gpf, root)
    }

    /// Flat variable vector (y, X = y y', s = equation residual split)
    /// corresponding to a rank-1 point; feasible for every relaxation.
    fn rank_one_vars(gpf: &GpfInstance, map: &LiftMap, x: &StateVector) -> Vec<f64> {
        let mut vars = vec![0.0; map.num_y + map.num_tri + gpf.slack_count()];
        for (idx, &c) in map.free.iter().enumerate() {
            vars[idx] = x[c];
        }
        for j in 0..map.num_y {
            for i in 0..=j {
                vars[map.x_entry_var(i, j)] = x[map.free[i]] * x[map.free[j]];
            }
        }
        for (idx, e) in gpf.equations.iter().enumerate() {
            let r = (x.transpose() * gpf.matrix(e) * x)[0] - e.rhs;
            vars[map.slack_var(2 * idx)] = (-r).max(0.0);
            vars[map.slack_var(2 * idx + 1)] = r.max(0.0);
        }
        vars
    }

    #[test]
    fn tri_index_is_column_major_upper_triangle() {
        assert_eq!(LiftMap::tri(0, 0), 0);
        assert_eq!(LiftMap::tri(0, 1), 1);
        assert_eq!(LiftMap::tri(1, 1), 2);
        assert_eq!(LiftMap::tri(0, 2), 3);
        assert_eq!(LiftMap::tri(1, 2), 4);
        assert_eq!(LiftMap::tri(2, 2), 5);
        assert_eq!(LiftMap::tri(2, 1), LiftMap::tri(1, 2));
    }

    #[test]
    fn rank_one_points_satisfy_every_row() {
        let (_, gpf, root) = two_bus_gpf();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in [RelaxKind::Rlt, RelaxKind::Socp, RelaxKind::Sdp] {
            let prog = assemble(&gpf, &root, kind);
            for _ in 0..200 {
                let mut x = root.lower.clone();
                for i in 0..x.len() {
                    x[i] += rng.gen::<f64>() * root.width(i);
                }
                let vars = rank_one_vars(&gpf, &prog.map, &x);
                for row in &prog.ineq {
                    assert!(row.eval(&vars) <= 1e-9, "violated row at rank-1 point");
                }
                for rc in &prog.cones {
                    let (c, d) = (rc.c.eval(&vars), rc.d.eval(&vars));
                    let (a, b) = (rc.a.eval(&vars), rc.b.eval(&vars));
                    assert!(a * a + b * b <= c * d + 1e-9);
                }
            }
        }
    }

    #[test]
    fn mccormick_interval_on_symmetric_box() {
        // One free coordinate over [-1, 1] at y = 0: the envelope admits
        // exactly X in [-1, 1].
        let (_, gpf, root) = two_bus_gpf();
        let map = LiftMap::from_gpf(&gpf);
        let mut box_ = root.clone();
        for &c in &map.free {
            box_.lower[c] = -1.0;
            box_.upper[c] = 1.0;
        }
        let rows = rlt_block(&box_, &map);
        let feasible = |x_val: f64| {
            let mut vars = vec![0.0; map.num_y + map.num_tri];
            vars[map.x_entry_var(0, 0)] = x_val;
            rows.iter()
                .filter(|r| r.terms.iter().all(|&(v, _)| v == 0 || v == map.x_entry_var(0, 0)))
                .all(|r| r.eval(&vars) <= 1e-12)
        };
        assert!(feasible(1.0));
        assert!(feasible(-1.0));
        assert!(!feasible(1.001));
        assert!(!feasible(-1.001));
    }

    #[test]
    fn mccormick_exact_at_corners() {
        // At a box corner the four product rows pin X_ij to x_i x_j.
        let (_, gpf, root) = two_bus_gpf();
        let map = LiftMap::from_gpf(&gpf);
        let mut corner = root.lower.clone();
        corner[map.free[1]] = root.upper[map.free[1]];
        let rows = rlt_block(&root, &map);
        let mut vars = rank_one_vars(&gpf, &map, &corner);
        for r in &rows {
            assert!(r.eval(&vars) <= 1e-12);
        }
        // Perturb the off-diagonal entry: some row must now be violated.
        for delta in [1e-3, -1e-3] {
            vars[map.x_entry_var(0, 1)] += delta;
            assert!(
                rows.iter().any(|r| r.eval(&vars) > 1e-9),
                "corner product not pinned"
            );
            vars[map.x_entry_var(0, 1)] -= delta;
        }
    }

    #[test]
    fn zero_width_coordinates_become_equalities() {
        let (_, gpf, root) = two_bus_gpf();
        let map = LiftMap::from_gpf(&gpf);
        let mut box_ = root.clone();
        // Pin the first free coordinate to 0.25.
        box_.lower[map.free[0]] = 0.25;
        box_.upper[map.free[0]] = 0.25;
        let rows = rlt_block(&box_, &map);
        let mut vars = vec![0.0; map.num_y + map.num_tri];
        vars[0] = 0.25;
        vars[1] = 0.8;
        vars[map.x_entry_var(0, 0)] = 0.0625;
        vars[map.x_entry_var(0, 1)] = 0.25 * 0.8;
        vars[map.x_entry_var(1, 1)] = 0.64;
        assert!(rows.iter().all(|r| r.eval(&vars) <= 1e-12));
        vars[map.x_entry_var(0, 1)] += 1e-6;
        assert!(rows.iter().any(|r| r.eval(&vars) > 1e-9));
    }

    #[test]
    fn feasible_box_relaxes_to_zero_all_kinds_and_backends() {
        let (_, gpf, root) = two_bus_gpf();
        for kind in [RelaxKind::Rlt, RelaxKind::Socp, RelaxKind::Sdp] {
            let prog = assemble(&gpf, &root, kind);
            let sol = solve(&prog).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            assert!(sol.objective.abs() <= 1e-6, "{kind:?}: {}", sol.objective);
        }
        // The pure-LP path agrees on the RLT relaxation.
        let prog = assemble(&gpf, &root, RelaxKind::Rlt);
        let sol = solve_with(
            &prog,
            SolveOptions {
                backend: BackendChoice::Linear,
                high_accuracy: false,
            },
        )
        .unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.objective.abs() <= 1e-6);
    }

    #[test]
    fn lp_backend_rejects_cones() {
        let (_, gpf, root) = two_bus_gpf();
        let prog = assemble(&gpf, &root, RelaxKind::Sdp);
        let err = solve_with(
            &prog,
            SolveOptions {
                backend: BackendChoice::Linear,
                high_accuracy: false,
            },
        )
        .unwrap_err();
        assert!(matches!(err, BackendError::Unsupported(_)));
    }

    #[test]
    fn sdp_separates_where_rlt_cannot() {
        // Restrict e2 to [1.2, 1.5]: no root lives there (the high root has
        // e2 < 1). RLT still reports ~0, the moment relaxation must not.
        let (_, gpf, root) = two_bus_gpf();
        let mut box_ = root.clone();
        box_.lower[1] = 1.2;
        box_.upper[1] = 1.5;
        let rlt = solve(&assemble(&gpf, &box_, RelaxKind::Rlt)).unwrap();
        let sdp = solve(&assemble(&gpf, &box_, RelaxKind::Sdp)).unwrap();
        assert!(sdp.objective > 1e-3, "sdp bound too weak: {}", sdp.objective);
        assert!(sdp.objective >= rlt.objective - 1e-6);
    }

    #[test]
    fn relaxation_ordering_on_random_subboxes() {
        let (_, gpf, root) = two_bus_gpf();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let mut lower = root.lower.clone();
            let mut upper = root.upper.clone();
            for i in 0..lower.len() {
                let w = root.width(i);
                if w > 0.0 {
                    let a = root.lower[i] + rng.gen::<f64>() * w;
                    let b = root.lower[i] + rng.gen::<f64>() * w;
                    lower[i] = a.min(b);
                    upper[i] = a.max(b);
                }
            }
            let box_ = BoxBounds { lower, upper };
            let mut vals = Vec::new();
            for kind in [RelaxKind::Rlt, RelaxKind::Socp, RelaxKind::Sdp] {
                let sol = solve(&assemble(&gpf, &box_, kind)).unwrap();
                if sol.status == SolveStatus::NumericalFailure {
                    return; // nothing to compare on this box
                }
                vals.push(sol.objective);
            }
            // The gap tolerance is relative, so scale the comparison slack.
            let scale = 1.0 + vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let slack = 10.0 * 1e-8 * scale;
            assert!(vals[1] >= vals[0] - slack, "socp < rlt: {vals:?}");
            assert!(vals[2] >= vals[1] - slack, "sdp < socp: {vals:?}");
        }
    }

    #[test]
    fn infeasible_magnitude_rows_certified() {
        // Force |V2|^2 >= 4 on a box capped at 1.5 per coordinate in
        // absolute value with X constrained by the envelopes: infeasible.
        let (_, mut gpf, root) = two_bus_gpf();
        gpf.mag_bounds.push((1, 4.0, 9.0));
        let mut box_ = root.clone();
        box_.lower[1] = -0.5;
        box_.upper[1] = 0.5;
        box_.lower[3] = -0.5;
        box_.upper[3] = 0.5;
        let sol = solve(&assemble(&gpf, &box_, RelaxKind::Rlt)).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        assert!(sol.objective.is_infinite());
    }

    #[test]
    fn x_matrix_reconstruction_is_symmetric_and_consistent() {
        let (_, gpf, root) = two_bus_gpf();
        let sol = solve(&assemble(&gpf, &root, RelaxKind::Sdp)).unwrap();
        let xm = &sol.x_matrix;
        assert_eq!(xm.nrows(), 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(xm[(i, j)], xm[(j, i)]);
            }
        }
        // Fixed-fixed block is the exact slack product.
        assert_eq!(xm[(0, 0)], 1.0);
        assert_eq!(xm[(0, 2)], 0.0);
        // Fixed-free entries equal the slack coordinate times x*.
        assert_eq!(xm[(0, 1)], sol.x_star[1]);
    }

    #[test]
    fn cbf_dump_structure() {
        let (_, gpf, root) = two_bus_gpf();
        let prog = assemble(&gpf, &root, RelaxKind::Sdp);
        let text = cbf::to_cbf(&prog);
        assert!(text.starts_with("VER\n3\n"));
        assert!(text.contains("OBJSENSE\nMIN"));
        assert!(text.contains("PSDCON\n1\n3\n"));
        assert!(text.contains("DCOORD\n1\n0 0 0 1.0"));
        let socp = cbf::to_cbf(&assemble(&gpf, &root, RelaxKind::Socp));
        assert!(socp.contains("QR 4"));
        assert!(!socp.contains("PSDCON"));
    }

    #[test]
    fn moment_matrix_at_optimum_dominates_outer_product() {
        let (_, gpf, root) = two_bus_gpf();
        let prog = assemble(&gpf, &root, RelaxKind::Sdp);
        let sol = solve(&prog).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        // Check X - y y' >= -tol I via eigenvalues of the free block.
        let m = prog.map.num_y;
        let mut diff = nalgebra::DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let (ci, cj) = (prog.map.free[i], prog.map.free[j]);
                diff[(i, j)] = sol.x_matrix[(ci, cj)] - sol.x_star[ci] * sol.x_star[cj];
            }
        }
        let eigs = diff.symmetric_eigenvalues();
        assert!(eigs.iter().all(|&e| e > -1e-6), "eigs {eigs:?}");
    }
}

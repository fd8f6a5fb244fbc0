//! The GPF optimization instance: box bounds in rectangular voltage space,
//! optional region restrictions, slack-variable equalities and residuals.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::caseio::{BusKind, Network};
use crate::netmatrix::{net_injections, InjectionMatrices};

/// Rectangular voltage vector `x = [e_1..e_n, f_1..f_n]`.
pub type StateVector = DVector<f64>;

/// A hypercube `[lower, upper]` in the 2n-dimensional voltage space.
/// Slack-bus coordinates have zero width.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    /// Infinity-norm width. Fixed coordinates contribute zero.
    pub fn width_inf(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).fold(0.0, f64::max)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.dim()).all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol)
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    /// Widen every coordinate range by `factor` about its midpoint.
    pub fn inflate(&self, factor: f64) -> BoxBounds {
        let mid = self.midpoint();
        let half = (&self.upper - &self.lower) * (0.5 * factor);
        BoxBounds {
            lower: &mid - &half,
            upper: &mid + &half,
        }
    }
}

/// Per-bus annular-sector restriction, angles in radians.
#[derive(Debug, Clone, Copy)]
pub struct BusSector {
    pub v_min: f64,
    pub v_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBusRegion {
    vmin: Option<f64>,
    vmax: Option<f64>,
    thetamin: Option<f64>,
    thetamax: Option<f64>,
    pad: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLineRegion {
    pad: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionFile {
    default_vmax: Option<f64>,
    all: Option<RawBusRegion>,
    bus: Option<BTreeMap<String, RawBusRegion>>,
    line: Option<BTreeMap<String, RawLineRegion>>,
}

/// Optional search-region restriction: per-bus voltage/angle ranges and
/// per-line phase-angle-difference caps. Bus and line keys use the
/// original case-file numbering; angles are degrees in the file and
/// radians in this struct.
#[derive(Debug, Clone, Default)]
pub struct RegionSpec {
    /// Default voltage-magnitude cap for unrestricted PQ buses.
    pub default_v_max: Option<f64>,
    /// Restriction applied to every bus (per-bus entries override fields).
    pub all: Option<PartialSector>,
    pub buses: BTreeMap<usize, PartialSector>,
    /// PAD cap applied to every line, radians.
    pub pad_all: Option<f64>,
    /// PAD caps for specific lines by external endpoint pair.
    pub pad_lines: BTreeMap<(usize, usize), f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PartialSector {
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub theta_min: Option<f64>,
    pub theta_max: Option<f64>,
}

pub const DEFAULT_PQ_VMAX: f64 = 1.5;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("region parse error: {0}")]
    Parse(String),
    #[error("invalid region: {0}")]
    Invalid(String),
    #[error("bus {bus}: region excludes the fixed voltage setpoint ({reason})")]
    EmptyRegion { bus: usize, reason: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

impl RegionSpec {
    pub fn from_toml_str(text: &str) -> Result<RegionSpec, RegionError> {
        let raw: RegionFile =
            toml::from_str(text).map_err(|e| RegionError::Parse(e.to_string()))?;
        let conv = |r: &RawBusRegion| PartialSector {
            v_min: r.vmin,
            v_max: r.vmax,
            theta_min: r.thetamin.map(f64::to_radians),
            theta_max: r.thetamax.map(f64::to_radians),
        };
        let mut spec = RegionSpec {
            default_v_max: raw.default_vmax,
            ..Default::default()
        };
        if let Some(all) = &raw.all {
            spec.all = Some(conv(all));
            spec.pad_all = all.pad.map(f64::to_radians);
        }
        for (key, r) in raw.bus.iter().flatten() {
            let bus: usize = key
                .parse()
                .map_err(|_| RegionError::Parse(format!("bad bus key `{key}`")))?;
            if r.pad.is_some() {
                return Err(RegionError::Parse(format!(
                    "bus {bus}: `pad` belongs to [line] or [all] sections"
                )));
            }
            spec.buses.insert(bus, conv(r));
        }
        for (key, r) in raw.line.iter().flatten() {
            let (a, b) = key
                .split_once('-')
                .ok_or_else(|| RegionError::Parse(format!("bad line key `{key}`")))?;
            let from: usize = a
                .trim()
                .parse()
                .map_err(|_| RegionError::Parse(format!("bad line key `{key}`")))?;
            let to: usize = b
                .trim()
                .parse()
                .map_err(|_| RegionError::Parse(format!("bad line key `{key}`")))?;
            spec.pad_lines.insert((from, to), r.pad.to_radians());
        }
        spec.validate()?;
        Ok(spec)
    }

    /// A uniform PAD cap on every line, radians.
    pub fn with_pad_all(mut self, pad: f64) -> Self {
        self.pad_all = Some(pad);
        self
    }

    fn validate(&self) -> Result<(), RegionError> {
        let check = |s: &PartialSector, what: &str| -> Result<(), RegionError> {
            if let (Some(lo), Some(hi)) = (s.v_min, s.v_max) {
                if lo > hi {
                    return Err(RegionError::Invalid(format!("{what}: vmin > vmax")));
                }
            }
            if s.v_min.is_some_and(|v| v < 0.0) {
                return Err(RegionError::Invalid(format!("{what}: negative vmin")));
            }
            if let (Some(lo), Some(hi)) = (s.theta_min, s.theta_max) {
                if lo > hi {
                    return Err(RegionError::Invalid(format!("{what}: thetamin > thetamax")));
                }
            }
            for t in [s.theta_min, s.theta_max].into_iter().flatten() {
                if !(-PI - 1e-9..=PI + 1e-9).contains(&t) {
                    return Err(RegionError::Invalid(format!(
                        "{what}: angle outside [-180, 180] degrees"
                    )));
                }
            }
            Ok(())
        };
        if let Some(all) = &self.all {
            check(all, "[all]")?;
        }
        for (bus, s) in &self.buses {
            check(s, &format!("[bus.{bus}]"))?;
        }
        for (&(a, b), &pad) in &self.pad_lines {
            if !(0.0 < pad && pad < PI / 2.0) {
                return Err(RegionError::Invalid(format!(
                    "[line.{a}-{b}]: pad must be in (0, 90) degrees"
                )));
            }
        }
        if let Some(pad) = self.pad_all {
            if !(0.0 < pad && pad < PI / 2.0) {
                return Err(RegionError::Invalid(
                    "[all]: pad must be in (0, 90) degrees".into(),
                ));
            }
        }
        Ok(())
    }

    /// Effective sector for internal bus `k`, after defaults and overrides.
    /// `explicit` reports whether any voltage-range restriction was given,
    /// which controls whether magnitude rows are added to the model.
    fn resolve_bus(&self, net: &Network, k: usize) -> (BusSector, bool) {
        let bus = &net.buses[k];
        let (mut v_min, mut v_max) = match bus.kind {
            BusKind::Pq => (0.0, self.default_v_max.unwrap_or(DEFAULT_PQ_VMAX)),
            BusKind::Pv | BusKind::Slack => (bus.v_set, bus.v_set),
        };
        let (mut theta_min, mut theta_max) = match bus.kind {
            BusKind::Slack => (bus.theta_set, bus.theta_set),
            _ => (-PI, PI),
        };
        let mut explicit = false;
        let ext = net.ext_bus(k);
        for layer in [self.all.as_ref(), self.buses.get(&ext)].into_iter().flatten() {
            if let Some(v) = layer.v_min {
                v_min = v;
                explicit = true;
            }
            if let Some(v) = layer.v_max {
                v_max = v;
                explicit = true;
            }
            if let Some(t) = layer.theta_min {
                theta_min = t;
            }
            if let Some(t) = layer.theta_max {
                theta_max = t;
            }
        }
        (
            BusSector {
                v_min,
                v_max,
                theta_min,
                theta_max,
            },
            explicit,
        )
    }
}

/// Tight rectangular hull of the annular sector
/// `{(V cos t, V sin t) : V in [v_min, v_max], t in [t_min, t_max]}`.
pub fn sector_hull(s: &BusSector) -> ((f64, f64), (f64, f64)) {
    let cos_candidates = |lo: f64, hi: f64| -> (f64, f64) {
        let mut cmin = f64::min(lo.cos(), hi.cos());
        let mut cmax = f64::max(lo.cos(), hi.cos());
        if lo <= 0.0 && 0.0 <= hi {
            cmax = 1.0;
        }
        if (lo <= PI && PI <= hi) || (lo <= -PI && -PI <= hi) {
            cmin = -1.0;
        }
        (cmin, cmax)
    };
    let sin_candidates = |lo: f64, hi: f64| -> (f64, f64) {
        let mut smin = f64::min(lo.sin(), hi.sin());
        let mut smax = f64::max(lo.sin(), hi.sin());
        if lo <= PI / 2.0 && PI / 2.0 <= hi {
            smax = 1.0;
        }
        if lo <= -PI / 2.0 && -PI / 2.0 <= hi {
            smin = -1.0;
        }
        (smin, smax)
    };
    let scale = |c: f64| if c >= 0.0 { (s.v_min * c, s.v_max * c) } else { (s.v_max * c, s.v_min * c) };
    let (cmin, cmax) = cos_candidates(s.theta_min, s.theta_max);
    let (smin, smax) = sin_candidates(s.theta_min, s.theta_max);
    let e_lo = scale(cmin).0.min(scale(cmax).0);
    let e_hi = scale(cmin).1.max(scale(cmax).1);
    let f_lo = scale(smin).0.min(scale(smax).0);
    let f_hi = scale(smin).1.max(scale(smax).1);
    ((e_lo, e_hi), (f_lo, f_hi))
}

/// Initial search box per the bound rules: PQ buses get the hull of their
/// (possibly default) sector, PV buses are bounded by their setpoint
/// magnitude, the slack bus is pinned.
pub fn initial_box(net: &Network, region: &RegionSpec) -> Result<BoxBounds, RegionError> {
    region.validate()?;
    let n = net.n();
    let mut lower = DVector::zeros(2 * n);
    let mut upper = DVector::zeros(2 * n);
    for k in 0..n {
        let bus = &net.buses[k];
        let (sector, _) = region.resolve_bus(net, k);
        match bus.kind {
            BusKind::Slack => {
                let (e, f) = (bus.v_set * bus.theta_set.cos(), bus.v_set * bus.theta_set.sin());
                let v_ok = sector.v_min - 1e-12 <= bus.v_set && bus.v_set <= sector.v_max + 1e-12;
                let t_ok = sector.theta_min - 1e-12 <= bus.theta_set
                    && bus.theta_set <= sector.theta_max + 1e-12;
                if !(v_ok && t_ok) {
                    return Err(RegionError::EmptyRegion {
                        bus: net.ext_bus(k),
                        reason: format!(
                            "slack setpoint {:.4} /_ {:.2} deg outside the region",
                            bus.v_set,
                            bus.theta_set.to_degrees()
                        ),
                    });
                }
                lower[k] = e;
                upper[k] = e;
                lower[n + k] = f;
                upper[n + k] = f;
            }
            BusKind::Pv => {
                if sector.v_min - 1e-12 > bus.v_set || bus.v_set > sector.v_max + 1e-12 {
                    return Err(RegionError::EmptyRegion {
                        bus: net.ext_bus(k),
                        reason: format!(
                            "PV setpoint {:.4} outside [{:.4}, {:.4}]",
                            bus.v_set, sector.v_min, sector.v_max
                        ),
                    });
                }
                let pinned = BusSector {
                    v_min: bus.v_set,
                    v_max: bus.v_set,
                    ..sector
                };
                let ((el, eu), (fl, fu)) = sector_hull(&pinned);
                lower[k] = el;
                upper[k] = eu;
                lower[n + k] = fl;
                upper[n + k] = fu;
            }
            BusKind::Pq => {
                let ((el, eu), (fl, fu)) = sector_hull(&sector);
                lower[k] = el;
                upper[k] = eu;
                lower[n + k] = fl;
                upper[n + k] = fu;
            }
        }
    }
    Ok(BoxBounds { lower, upper })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqKind {
    /// Active-power balance at a PV or PQ bus.
    P(usize),
    /// Reactive-power balance at a PQ bus.
    Q(usize),
    /// Squared-magnitude equality at a PV bus.
    V(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct GpfEquation {
    pub kind: EqKind,
    pub rhs: f64,
}

/// Linear sector cut for a bus whose angle range is narrower than pi:
/// membership of `(e_k, f_k)` in the cone spanned by the two edge rays.
#[derive(Debug, Clone, Copy)]
pub struct AngleCut {
    pub bus: usize,
    pub theta_min: f64,
    pub theta_max: f64,
}

/// The GPF instance: quadratic-form equalities with slack pairs, fixed
/// slack-bus coordinates, and region rows (PAD, magnitude, sector cuts)
/// inherited by every relaxation.
#[derive(Debug, Clone)]
pub struct GpfInstance {
    pub n: usize,
    pub forms: Arc<InjectionMatrices>,
    pub equations: Vec<GpfEquation>,
    /// Coordinates not fixed by the slack bus, ascending.
    pub free: Vec<usize>,
    /// Length-2n template holding fixed coordinate values (zero elsewhere).
    pub fixed_template: DVector<f64>,
    pub is_free: Vec<bool>,
    /// Internal endpoint pairs of in-service branches.
    pub lines: Vec<(usize, usize)>,
    /// PAD rows `(i, j, tan(delta_max))`.
    pub pad: Vec<(usize, usize, f64)>,
    /// Two-sided magnitude rows `(bus, v_min^2, v_max^2)`.
    pub mag_bounds: Vec<(usize, f64, f64)>,
    pub angle_cuts: Vec<AngleCut>,
}

impl GpfInstance {
    pub fn matrix(&self, eq: &GpfEquation) -> &DMatrix<f64> {
        match eq.kind {
            EqKind::P(k) => &self.forms.z[k],
            EqKind::Q(k) => &self.forms.zbar[k],
            EqKind::V(k) => &self.forms.m[k],
        }
    }

    /// Number of s+/s- pairs (one per equation).
    pub fn slack_count(&self) -> usize {
        2 * self.equations.len()
    }

    /// Whether `x` satisfies every region restriction (magnitude ranges,
    /// sector angle cuts, PAD rows) within `tol`. The box exploration works
    /// on the rectangular hull of each sector, so a refined root can land
    /// inside the hull yet outside the sector; such roots must be rejected.
    pub fn in_region(&self, x: &StateVector, tol: f64) -> bool {
        let n = self.n;
        let theta = |k: usize| x[n + k].atan2(x[k]);
        let mag2 = |k: usize| x[k] * x[k] + x[n + k] * x[n + k];
        for &(k, lo2, hi2) in &self.mag_bounds {
            let m2 = mag2(k);
            if m2 < lo2 - tol || m2 > hi2 + tol {
                return false;
            }
        }
        for cut in &self.angle_cuts {
            // The angle of a (near-)zero phasor is undefined; any sector
            // containing the origin in magnitude admits it.
            if mag2(cut.bus) < 1e-12 {
                continue;
            }
            let t = theta(cut.bus);
            if t < cut.theta_min - tol || t > cut.theta_max + tol {
                return false;
            }
        }
        for &(i, j, tan_d) in &self.pad {
            if mag2(i) < 1e-12 || mag2(j) < 1e-12 {
                continue;
            }
            let mut d = theta(i) - theta(j);
            if d > PI {
                d -= 2.0 * PI;
            } else if d < -PI {
                d += 2.0 * PI;
            }
            if d.abs() > tan_d.atan() + tol {
                return false;
            }
        }
        true
    }

    /// Rebuild a full-length state vector from free-coordinate values.
    pub fn expand(&self, y: &[f64]) -> StateVector {
        let mut x = self.fixed_template.clone();
        for (&yi, &coord) in y.iter().zip(&self.free) {
            x[coord] = yi;
        }
        x
    }
}

/// Assemble the GPF instance for a network with the given region.
pub fn build_gpf(
    net: &Network,
    forms: Arc<InjectionMatrices>,
    region: &RegionSpec,
) -> Result<GpfInstance, RegionError> {
    let n = net.n();
    if forms.n != n {
        return Err(RegionError::Dimension {
            expected: n,
            got: forms.n,
        });
    }
    let (p_in, q_in) = net_injections(net);
    let mut equations = Vec::new();
    for k in 0..n {
        if net.buses[k].kind != BusKind::Slack {
            equations.push(GpfEquation {
                kind: EqKind::P(k),
                rhs: p_in[k],
            });
        }
    }
    for k in net.pq_buses() {
        equations.push(GpfEquation {
            kind: EqKind::Q(k),
            rhs: q_in[k],
        });
    }
    for k in net.pv_buses() {
        let v = net.buses[k].v_set;
        equations.push(GpfEquation {
            kind: EqKind::V(k),
            rhs: v * v,
        });
    }

    let slack = net.slack();
    let mut free = Vec::new();
    let mut is_free = vec![true; 2 * n];
    let mut fixed_template = DVector::zeros(2 * n);
    is_free[slack] = false;
    is_free[n + slack] = false;
    let sb = &net.buses[slack];
    fixed_template[slack] = sb.v_set * sb.theta_set.cos();
    fixed_template[n + slack] = sb.v_set * sb.theta_set.sin();
    for i in 0..2 * n {
        if is_free[i] {
            free.push(i);
        }
    }

    let lines: Vec<(usize, usize)> = net.branches.iter().map(|b| (b.from, b.to)).collect();
    let mut pad = Vec::new();
    for (idx, br) in net.branches.iter().enumerate() {
        let key = (net.ext_bus(br.from), net.ext_bus(br.to));
        let rev = (key.1, key.0);
        let delta = region
            .pad_lines
            .get(&key)
            .or_else(|| region.pad_lines.get(&rev))
            .copied()
            .or(region.pad_all);
        if let Some(d) = delta {
            let (i, j) = lines[idx];
            pad.push((i, j, d.tan()));
        }
    }

    let mut mag_bounds = Vec::new();
    let mut angle_cuts = Vec::new();
    for k in 0..n {
        let (sector, explicit) = region.resolve_bus(net, k);
        if net.buses[k].kind == BusKind::Slack {
            continue;
        }
        if explicit {
            mag_bounds.push((k, sector.v_min * sector.v_min, sector.v_max * sector.v_max));
        }
        if sector.theta_max - sector.theta_min <= PI {
            angle_cuts.push(AngleCut {
                bus: k,
                theta_min: sector.theta_min,
                theta_max: sector.theta_max,
            });
        }
    }

    Ok(GpfInstance {
        n,
        forms,
        equations,
        free,
        fixed_template,
        is_free,
        lines,
        pad,
        mag_bounds,
        angle_cuts,
    })
}

/// Residuals of the compact quadratic-form equations at `x`, ordered as
/// P rows (non-slack buses ascending), then Q rows (PQ buses), then V rows
/// (PV buses) -- the same order as [`GpfInstance::equations`].
pub fn pf_residual(
    net: &Network,
    forms: &InjectionMatrices,
    x: &StateVector,
) -> Result<DVector<f64>, RegionError> {
    let n = net.n();
    if x.len() != 2 * n {
        return Err(RegionError::Dimension {
            expected: 2 * n,
            got: x.len(),
        });
    }
    let (p_in, q_in) = net_injections(net);
    let mut res = Vec::new();
    for k in 0..n {
        if net.buses[k].kind != BusKind::Slack {
            res.push((x.transpose() * &forms.z[k] * x)[0] - p_in[k]);
        }
    }
    for k in net.pq_buses() {
        res.push((x.transpose() * &forms.zbar[k] * x)[0] - q_in[k]);
    }
    for k in net.pv_buses() {
        let v = net.buses[k].v_set;
        res.push((x.transpose() * &forms.m[k] * x)[0] - v * v);
    }
    Ok(DVector::from_vec(res))
}

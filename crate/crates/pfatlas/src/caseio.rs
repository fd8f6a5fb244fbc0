//! MATPOWER-style case file parsing, serialization and load scaling.
//!
//! Quantities are converted to per-unit on `base_mva` at parse time. Bus
//! numbers are compacted to `0..n` internally; the original numbering is
//! kept in [`Network::ext_index`] for reporting.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BusKind {
    Pq,
    Pv,
    Slack,
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BusKind::Pq => write!(f, "PQ"),
            BusKind::Pv => write!(f, "PV"),
            BusKind::Slack => write!(f, "Slack"),
        }
    }
}

/// A bus with aggregated generation and demand, all in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub kind: BusKind,
    pub p_d: f64,
    pub q_d: f64,
    pub g_sh: f64,
    pub b_sh: f64,
    /// Voltage magnitude setpoint; meaningful for PV and Slack buses.
    pub v_set: f64,
    /// Angle setpoint in radians; meaningful for the Slack bus.
    pub theta_set: f64,
    pub p_g: f64,
    pub q_g: f64,
}

/// A transmission line or transformer on the standard pi model.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Internal (0-based) endpoint indices.
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    pub b_ch: f64,
    pub tap: f64,
    /// Phase shift in radians.
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub base_mva: f64,
    /// Internal index -> original bus number from the case file.
    pub ext_index: Vec<usize>,
}

impl Network {
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("network invariant: one slack bus")
    }

    pub fn pq_buses(&self) -> Vec<usize> {
        self.kind_buses(BusKind::Pq)
    }

    pub fn pv_buses(&self) -> Vec<usize> {
        self.kind_buses(BusKind::Pv)
    }

    fn kind_buses(&self, kind: BusKind) -> Vec<usize> {
        (0..self.n()).filter(|&k| self.buses[k].kind == kind).collect()
    }

    /// Original case-file number of an internal bus index.
    pub fn ext_bus(&self, k: usize) -> usize {
        self.ext_index[k]
    }

    /// Internal index of an original case-file bus number, if present.
    pub fn int_bus(&self, ext: usize) -> Option<usize> {
        self.ext_index.iter().position(|&e| e == ext)
    }
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing required section `{0}`")]
    MissingSection(String),
    #[error("{table} row {row}, field {field}: {msg}")]
    Field {
        table: &'static str,
        row: usize,
        field: &'static str,
        msg: String,
    },
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("nonpositive load scale {0}")]
    NonpositiveLambda(f64),
}

/// Raw numeric matrix extracted from an `mpc.<name> = [ ... ];` block.
fn extract_matrix(text: &str, name: &str) -> Result<Option<Vec<(usize, Vec<f64>)>>, CaseError> {
    let pattern = format!("mpc.{name}");
    let mut rows = Vec::new();
    let mut in_block = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('%') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let trimmed = line.trim();
        if !in_block {
            if let Some(rest) = trimmed.strip_prefix(&pattern) {
                let rest = rest.trim_start();
                if let Some(rest) = rest.strip_prefix('=') {
                    if let Some(body) = rest.trim_start().strip_prefix('[') {
                        in_block = true;
                        if let Some(done) = parse_block_line(body, lineno, &mut rows)? {
                            if done {
                                return Ok(Some(rows));
                            }
                        }
                    }
                }
            }
        } else if let Some(done) = parse_block_line(trimmed, lineno, &mut rows)? {
            if done {
                return Ok(Some(rows));
            }
        }
    }
    if in_block {
        return Err(CaseError::Syntax {
            line: 0,
            msg: format!("unterminated matrix `{name}`"),
        });
    }
    Ok(None)
}

/// Parses one line inside a matrix block. Returns Some(true) when the
/// closing `];` was consumed.
fn parse_block_line(
    line: &str,
    lineno: usize,
    rows: &mut Vec<(usize, Vec<f64>)>,
) -> Result<Option<bool>, CaseError> {
    let mut body = line;
    let mut terminal = false;
    if let Some(p) = body.find(']') {
        body = &body[..p];
        terminal = true;
    }
    for row_text in body.split(';') {
        let row_text = row_text.trim();
        if row_text.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in row_text.split([' ', '\t', ',']) {
            if tok.is_empty() {
                continue;
            }
            let v: f64 = tok.parse().map_err(|_| CaseError::Syntax {
                line: lineno + 1,
                msg: format!("unparseable number `{tok}`"),
            })?;
            row.push(v);
        }
        if !row.is_empty() {
            rows.push((lineno + 1, row));
        }
    }
    Ok(Some(terminal))
}

fn extract_scalar(text: &str, name: &str) -> Option<f64> {
    let pattern = format!("mpc.{name}");
    for raw in text.lines() {
        let line = match raw.find('%') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix(&pattern) {
            let rest = rest.trim_start();
            if let Some(rest) = rest.strip_prefix('=') {
                let val = rest.trim().trim_end_matches(';').trim();
                if let Ok(v) = val.parse() {
                    return Some(v);
                }
            }
        }
    }
    None
}

fn field(row: &[f64], idx: usize, table: &'static str, rowno: usize, name: &'static str) -> Result<f64, CaseError> {
    row.get(idx).copied().ok_or(CaseError::Field {
        table,
        row: rowno,
        field: name,
        msg: "missing column".into(),
    })
}

/// Parse a MATPOWER-style case into a [`Network`].
///
/// Out-of-service branches and generators are dropped; multiple generators
/// at a bus are aggregated by summing their injections. Generator limits,
/// costs and area data are accepted and ignored.
pub fn parse_case(text: &str) -> Result<Network, CaseError> {
    let base_mva = extract_scalar(text, "baseMVA")
        .ok_or_else(|| CaseError::MissingSection("baseMVA".into()))?;
    if base_mva <= 0.0 {
        return Err(CaseError::Semantic(format!(
            "nonpositive baseMVA {base_mva}"
        )));
    }
    let bus_rows = extract_matrix(text, "bus")?
        .ok_or_else(|| CaseError::MissingSection("bus".into()))?;
    let gen_rows = extract_matrix(text, "gen")?
        .ok_or_else(|| CaseError::MissingSection("gen".into()))?;
    let branch_rows = extract_matrix(text, "branch")?
        .ok_or_else(|| CaseError::MissingSection("branch".into()))?;

    let mut buses = Vec::new();
    let mut ext_index = Vec::new();
    let mut ext_to_int = BTreeMap::new();
    for (rowno, (line, row)) in bus_rows.iter().enumerate() {
        let get = |i, name| field(row, i, "bus", *line, name);
        let bus_i = get(0, "BUS_I")?;
        if bus_i <= 0.0 || bus_i.fract() != 0.0 {
            return Err(CaseError::Field {
                table: "bus",
                row: *line,
                field: "BUS_I",
                msg: format!("invalid bus number {bus_i}"),
            });
        }
        let ext = bus_i as usize;
        if ext_to_int.insert(ext, rowno).is_some() {
            return Err(CaseError::Semantic(format!("duplicate bus number {ext}")));
        }
        let kind = match get(1, "TYPE")? as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            4 => BusKind::Pq, // isolated buses are treated as unloaded PQ
            t => {
                return Err(CaseError::Field {
                    table: "bus",
                    row: *line,
                    field: "TYPE",
                    msg: format!("unknown bus type {t}"),
                })
            }
        };
        buses.push(Bus {
            kind,
            p_d: get(2, "PD")? / base_mva,
            q_d: get(3, "QD")? / base_mva,
            g_sh: get(4, "GS")? / base_mva,
            b_sh: get(5, "BS")? / base_mva,
            v_set: get(7, "VM")?,
            theta_set: get(8, "VA")?.to_radians(),
            p_g: 0.0,
            q_g: 0.0,
        });
        ext_index.push(ext);
    }

    for (line, row) in &gen_rows {
        let get = |i, name| field(row, i, "gen", *line, name);
        let status = get(7, "GEN_STATUS")?;
        if status <= 0.0 {
            continue;
        }
        let ext = get(0, "GEN_BUS")? as usize;
        let &k = ext_to_int.get(&ext).ok_or(CaseError::Field {
            table: "gen",
            row: *line,
            field: "GEN_BUS",
            msg: format!("generator at unknown bus {ext}"),
        })?;
        buses[k].p_g += get(1, "PG")? / base_mva;
        buses[k].q_g += get(2, "QG")? / base_mva;
        let vg = get(5, "VG")?;
        if vg > 0.0 {
            buses[k].v_set = vg;
        }
    }

    let mut branches = Vec::new();
    for (line, row) in &branch_rows {
        let get = |i, name| field(row, i, "branch", *line, name);
        if row.len() > 10 && get(10, "BR_STATUS")? <= 0.0 {
            continue;
        }
        let f_ext = get(0, "F_BUS")? as usize;
        let t_ext = get(1, "T_BUS")? as usize;
        let from = *ext_to_int.get(&f_ext).ok_or(CaseError::Field {
            table: "branch",
            row: *line,
            field: "F_BUS",
            msg: format!("dangling endpoint {f_ext}"),
        })?;
        let to = *ext_to_int.get(&t_ext).ok_or(CaseError::Field {
            table: "branch",
            row: *line,
            field: "T_BUS",
            msg: format!("dangling endpoint {t_ext}"),
        })?;
        if from == to {
            return Err(CaseError::Field {
                table: "branch",
                row: *line,
                field: "T_BUS",
                msg: "branch endpoints coincide".into(),
            });
        }
        let r = get(2, "BR_R")?;
        let x = get(3, "BR_X")?;
        if r == 0.0 && x == 0.0 {
            return Err(CaseError::Field {
                table: "branch",
                row: *line,
                field: "BR_X",
                msg: "zero series impedance".into(),
            });
        }
        let tap_raw = get(8, "TAP")?;
        let tap = if tap_raw == 0.0 { 1.0 } else { tap_raw };
        if tap <= 0.0 {
            return Err(CaseError::Field {
                table: "branch",
                row: *line,
                field: "TAP",
                msg: format!("nonpositive tap {tap}"),
            });
        }
        branches.push(Branch {
            from,
            to,
            r,
            x,
            b_ch: get(4, "BR_B")?,
            tap,
            shift: get(9, "SHIFT")?.to_radians(),
        });
    }

    let slack_count = buses.iter().filter(|b| b.kind == BusKind::Slack).count();
    if slack_count == 0 {
        return Err(CaseError::Semantic("no slack bus".into()));
    }
    if slack_count > 1 {
        return Err(CaseError::Semantic("multiple slack buses".into()));
    }
    for (k, bus) in buses.iter().enumerate() {
        if bus.kind != BusKind::Pq && bus.v_set <= 0.0 {
            return Err(CaseError::Semantic(format!(
                "bus {}: nonpositive voltage setpoint {}",
                ext_index[k], bus.v_set
            )));
        }
    }

    Ok(Network {
        buses,
        branches,
        base_mva,
        ext_index,
    })
}

/// Serialize a [`Network`] back to MATPOWER case text.
///
/// Aggregated generators come back as a single row per machine bus, so
/// re-parsing the output reproduces the same `Network` field-wise.
pub fn write_case(net: &Network) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let base = net.base_mva;
    writeln!(out, "function mpc = case{}", net.n()).unwrap();
    writeln!(out, "mpc.version = '2';").unwrap();
    writeln!(out, "mpc.baseMVA = {};", fmt_num(base)).unwrap();
    writeln!(out, "mpc.bus = [").unwrap();
    for (k, b) in net.buses.iter().enumerate() {
        let kind = match b.kind {
            BusKind::Pq => 1,
            BusKind::Pv => 2,
            BusKind::Slack => 3,
        };
        writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t0\t1\t1.1\t0.9;",
            net.ext_index[k],
            kind,
            fmt_num(b.p_d * base),
            fmt_num(b.q_d * base),
            fmt_num(b.g_sh * base),
            fmt_num(b.b_sh * base),
            fmt_num(b.v_set),
            fmt_num(b.theta_set.to_degrees()),
        )
        .unwrap();
    }
    writeln!(out, "];").unwrap();
    writeln!(out, "mpc.gen = [").unwrap();
    for (k, b) in net.buses.iter().enumerate() {
        if b.kind == BusKind::Pq && b.p_g == 0.0 && b.q_g == 0.0 {
            continue;
        }
        writeln!(
            out,
            "\t{}\t{}\t{}\t0\t0\t{}\t{}\t1\t0\t0;",
            net.ext_index[k],
            fmt_num(b.p_g * base),
            fmt_num(b.q_g * base),
            fmt_num(b.v_set),
            fmt_num(base),
        )
        .unwrap();
    }
    writeln!(out, "];").unwrap();
    writeln!(out, "mpc.branch = [").unwrap();
    for br in &net.branches {
        writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t0\t0\t0\t{}\t{}\t1\t-360\t360;",
            net.ext_index[br.from],
            net.ext_index[br.to],
            fmt_num(br.r),
            fmt_num(br.x),
            fmt_num(br.b_ch),
            fmt_num(if br.tap == 1.0 { 0.0 } else { br.tap }),
            fmt_num(br.shift.to_degrees()),
        )
        .unwrap();
    }
    writeln!(out, "];").unwrap();
    out
}

fn fmt_num(v: f64) -> String {
    // Round-trippable decimal form.
    let s = format!("{v:.17}");
    if s.parse::<f64>() == Ok(v) {
        let t = format!("{v}");
        if t.parse::<f64>() == Ok(v) {
            return t;
        }
        return s;
    }
    format!("{v}")
}

/// Scale every active power demand by `lambda`, leaving reactive demand
/// and generation untouched.
pub fn scale_load(net: &Network, lambda: f64) -> Result<Network, CaseError> {
    if !(lambda > 0.0) {
        return Err(CaseError::NonpositiveLambda(lambda));
    }
    let mut out = net.clone();
    for b in &mut out.buses {
        b.p_d *= lambda;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_fixtures::TWO_BUS;

    #[test]
    fn two_bus_fixture_parses() {
        let net = parse_case(TWO_BUS).unwrap();
        assert_eq!(net.n(), 2);
        assert_eq!(net.branches.len(), 1);
        assert_eq!(net.buses[0].kind, BusKind::Slack);
        assert_eq!(net.buses[1].kind, BusKind::Pq);
        assert_eq!(net.buses[1].p_d, 0.5);
        assert_eq!(net.branches[0].x, 0.1);
        assert_eq!(net.slack(), 0);
    }

    #[test]
    fn multiple_slack_rejected() {
        let text = TWO_BUS.replace("\t2\t1\t50", "\t2\t3\t50");
        let err = parse_case(&text).unwrap_err();
        assert!(err.to_string().contains("multiple slack buses"), "{err}");
    }

    #[test]
    fn no_slack_rejected() {
        let text = TWO_BUS.replace("\t1\t3\t0", "\t1\t2\t0");
        let err = parse_case(&text).unwrap_err();
        assert!(err.to_string().contains("no slack bus"), "{err}");
    }

    #[test]
    fn dangling_branch_rejected() {
        let text = TWO_BUS.replace("\t1\t2\t0\t0.1", "\t1\t7\t0\t0.1");
        let err = parse_case(&text).unwrap_err();
        assert!(err.to_string().contains("dangling endpoint"), "{err}");
    }

    #[test]
    fn zero_impedance_rejected() {
        let text = TWO_BUS.replace("\t1\t2\t0\t0.1", "\t1\t2\t0\t0");
        let err = parse_case(&text).unwrap_err();
        assert!(err.to_string().contains("zero series impedance"), "{err}");
    }

    #[test]
    fn out_of_service_dropped_and_gens_aggregated() {
        let text = TWO_BUS
            .replace(
                "mpc.gen = [\n\t1\t0\t0\t300\t-300\t1\t100\t1\t250\t10;",
                "mpc.gen = [\n\t1\t10\t5\t300\t-300\t1\t100\t1\t250\t10;\n\t1\t20\t5\t300\t-300\t1\t100\t1\t250\t10;\n\t2\t99\t99\t0\t0\t1\t100\t0\t0\t0;",
            )
            .replace(
                "\t1\t2\t0\t0.1\t0\t250\t250\t250\t0\t0\t1\t-360\t360;",
                "\t1\t2\t0\t0.1\t0\t250\t250\t250\t0\t0\t1\t-360\t360;\n\t1\t2\t0\t9\t0\t0\t0\t0\t0\t0\t0\t-360\t360;",
            );
        let net = parse_case(&text).unwrap();
        assert_eq!(net.branches.len(), 1);
        approx::assert_abs_diff_eq!(net.buses[0].p_g, 0.3, epsilon = 1e-15);
        assert_eq!(net.buses[1].p_g, 0.0);
    }

    #[test]
    fn roundtrip_identity() {
        let net = parse_case(TWO_BUS).unwrap();
        let net2 = parse_case(&write_case(&net)).unwrap();
        assert_eq!(net, net2);
    }

    #[test]
    fn scale_load_identity_and_composition() {
        let net = parse_case(TWO_BUS).unwrap();
        assert_eq!(scale_load(&net, 1.0).unwrap(), net);
        let a = scale_load(&scale_load(&net, 2.0).unwrap(), 3.0).unwrap();
        let b = scale_load(&net, 6.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(scale_load(&net, 2.0).unwrap().buses[1].p_d, 1.0);
        assert!(scale_load(&net, 0.0).is_err());
        assert!(scale_load(&net, -1.0).is_err());
    }
}

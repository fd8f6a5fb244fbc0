//! Nodal admittance matrix and the per-bus quadratic-form matrices that
//! express power-flow equations as traces over `x = [e; f]`.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

use crate::caseio::Network;

/// Y = G + jB stored as two real matrices.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl AdmittanceMatrix {
    pub fn n(&self) -> usize {
        self.g.nrows()
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("branch {from}-{to}: zero series impedance")]
    ZeroImpedance { from: usize, to: usize },
}

/// Assemble the bus admittance matrix from the pi model of every branch
/// plus bus shunts on the diagonal.
pub fn build_admittance(net: &Network) -> Result<AdmittanceMatrix, NetError> {
    let n = net.n();
    let mut y = DMatrix::<Complex<f64>>::zeros(n, n);
    for br in &net.branches {
        let z2 = br.r * br.r + br.x * br.x;
        if z2 == 0.0 {
            return Err(NetError::ZeroImpedance {
                from: net.ext_bus(br.from),
                to: net.ext_bus(br.to),
            });
        }
        let ys = Complex::new(br.r / z2, -br.x / z2);
        let ych = Complex::new(0.0, br.b_ch / 2.0);
        let t = Complex::from_polar(br.tap, br.shift);
        let (i, j) = (br.from, br.to);
        y[(i, i)] += (ys + ych) / (br.tap * br.tap);
        y[(j, j)] += ys + ych;
        y[(i, j)] += -ys / t.conj();
        y[(j, i)] += -ys / t;
    }
    for (k, bus) in net.buses.iter().enumerate() {
        y[(k, k)] += Complex::new(bus.g_sh, bus.b_sh);
    }
    Ok(AdmittanceMatrix {
        g: y.map(|c| c.re),
        b: y.map(|c| c.im),
    })
}

/// The symmetric 2n x 2n matrices Z_k, Zbar_k, M_k with
/// `x' Z_k x` = active injection at bus k, `x' Zbar_k x` = reactive
/// injection, `x' M_k x` = squared voltage magnitude.
#[derive(Debug, Clone)]
pub struct InjectionMatrices {
    pub z: Vec<DMatrix<f64>>,
    pub zbar: Vec<DMatrix<f64>>,
    pub m: Vec<DMatrix<f64>>,
    pub n: usize,
}

pub fn build_quadratic_forms(y: &AdmittanceMatrix) -> InjectionMatrices {
    let n = y.n();
    let mut z = Vec::with_capacity(n);
    let mut zbar = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    for k in 0..n {
        // Y_k = b_k b_k' Y has row k of Y and zeros elsewhere.
        // S = Y_k + Y_k', D = Y_k - Y_k'.
        let mut s_re: DMatrix<f64> = DMatrix::zeros(n, n);
        let mut s_im: DMatrix<f64> = DMatrix::zeros(n, n);
        let mut d_re: DMatrix<f64> = DMatrix::zeros(n, n);
        let mut d_im: DMatrix<f64> = DMatrix::zeros(n, n);
        for j in 0..n {
            let (gr, bi) = (y.g[(k, j)], y.b[(k, j)]);
            s_re[(k, j)] += gr;
            s_re[(j, k)] += gr;
            s_im[(k, j)] += bi;
            s_im[(j, k)] += bi;
            d_re[(k, j)] += gr;
            d_re[(j, k)] -= gr;
            d_im[(k, j)] += bi;
            d_im[(j, k)] -= bi;
        }
        let mut zk: DMatrix<f64> = DMatrix::zeros(2 * n, 2 * n);
        let mut zbk: DMatrix<f64> = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                zk[(i, j)] = 0.5 * s_re[(i, j)];
                zk[(n + i, n + j)] = 0.5 * s_re[(i, j)];
                zk[(i, n + j)] = -0.5 * d_im[(i, j)];
                zk[(n + i, j)] = 0.5 * d_im[(i, j)];
                zbk[(i, j)] = -0.5 * s_im[(i, j)];
                zbk[(n + i, n + j)] = -0.5 * s_im[(i, j)];
                zbk[(i, n + j)] = -0.5 * d_re[(i, j)];
                zbk[(n + i, j)] = 0.5 * d_re[(i, j)];
            }
        }
        let mut mk: DMatrix<f64> = DMatrix::zeros(2 * n, 2 * n);
        mk[(k, k)] = 1.0;
        mk[(n + k, n + k)] = 1.0;
        z.push(zk);
        zbar.push(zbk);
        m.push(mk);
    }
    InjectionMatrices { z, zbar, m, n }
}

/// Net injections p_g - p_d and q_g - q_d per bus. The model consumes the
/// active entry for PV and PQ buses and the reactive entry for PQ buses;
/// the remaining entries are unused.
pub fn net_injections(net: &Network) -> (DVector<f64>, DVector<f64>) {
    let p = DVector::from_iterator(net.n(), net.buses.iter().map(|b| b.p_g - b.p_d));
    let q = DVector::from_iterator(net.n(), net.buses.iter().map(|b| b.q_g - b.q_d));
    (p, q)
}

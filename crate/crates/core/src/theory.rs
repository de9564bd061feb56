//! Closed-form photon statistics for Fock/coherent mixtures.
//!
//! A source that emits the Fock state `|n>` with probability `p` and an
//! equal-mean coherent state otherwise has zero-delay correlations
//!
//! ```text
//! g^(k)(0) = p * n! / ((n-k)! * n^k) + (1 - p)   for n >= k
//! g^(k)(0) = 1 - p                               for n <  k
//! ```
//!
//! These values anchor everything else: they are the reference table for the
//! estimator tests and the inverse model behind the threshold baseline
//! classifier.

use crate::correlator::CorrelationMap;
use crate::error::{Error, Result};
use crate::PhotonClass;

/// Mixing probabilities of the reference table rows.
pub const TABLE1_QLP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Fock levels of the reference table columns.
pub const TABLE1_FOCK: [u32; 3] = [1, 2, 3];

/// A zero-delay correlation query: Fock level `n`, correlation order `k`,
/// quantum-light probability `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GkQuery {
    n: u32,
    k: u32,
    p: f64,
}

impl GkQuery {
    pub fn new(n: u32, k: u32, p: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidArgument(format!(
                "fock level must be >= 1, got {n}"
            )));
        }
        if !(k == 2 || k == 3) {
            return Err(Error::InvalidArgument(format!(
                "correlation order must be 2 or 3, got {k}"
            )));
        }
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "quantum-light probability must lie in [0, 1], got {p}"
            )));
        }
        Ok(GkQuery { n, k, p })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// Zero-delay k-th order correlation of the `|n>`/coherent mixture.
pub fn gk_zero(query: &GkQuery) -> f64 {
    let (n, k, p) = (query.n, query.k, query.p);
    if n >= k {
        // n!/(n-k)! = n * (n-1) * ... * (n-k+1)
        let falling: u64 = (n - k + 1..=n).map(u64::from).product();
        let coeff = falling as f64 / (n as f64).powi(k as i32);
        coeff * p + (1.0 - p)
    } else {
        1.0 - p
    }
}

/// The reference grid of `(g2(0), g3(0))` pairs: rows follow [`TABLE1_QLP`],
/// columns follow [`TABLE1_FOCK`].
pub fn table1() -> [[(f64, f64); 3]; 5] {
    let mut out = [[(0.0, 0.0); 3]; 5];
    for (row, &p) in TABLE1_QLP.iter().enumerate() {
        for (col, &n) in TABLE1_FOCK.iter().enumerate() {
            let g2 = gk_zero(&GkQuery::new(n, 2, p).expect("grid point is valid"));
            let g3 = gk_zero(&GkQuery::new(n, 3, p).expect("grid point is valid"));
            out[row][col] = (g2, g3);
        }
    }
    out
}

/// Outcome of the analytic threshold baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineVerdict {
    pub photon_class: PhotonClass,
    /// Best-fit quantum-light probability in [0, 1].
    pub qlp_est: f64,
    /// Squared residual of the best fit.
    pub residual: f64,
}

const BASELINE_GRID_STEPS: u32 = 1000;

/// Classify a source from its two measured critical values by inverting the
/// closed-form model.
///
/// For each candidate Fock level the quantum-light probability is fitted on a
/// dense grid (step 0.001) by least squares over the `(g2(0), g3(0))` pair;
/// the candidate with the smallest residual wins, ties resolving toward the
/// smaller level. Fits with `qlp_est < 0.5` are reported as coherent.
///
/// Inputs must be finite and non-negative.
pub fn baseline_classify(g2_zero: f64, g3_zero: f64) -> BaselineVerdict {
    assert!(
        g2_zero.is_finite() && g3_zero.is_finite() && g2_zero >= 0.0 && g3_zero >= 0.0,
        "critical values must be finite and non-negative"
    );

    let mut best: Option<(u32, f64, f64)> = None;
    for n in 1..=3u32 {
        for step in 0..=BASELINE_GRID_STEPS {
            let p = step as f64 / BASELINE_GRID_STEPS as f64;
            let g2 = gk_zero(&GkQuery::new(n, 2, p).expect("grid point is valid"));
            let g3 = gk_zero(&GkQuery::new(n, 3, p).expect("grid point is valid"));
            let residual = (g2_zero - g2).powi(2) + (g3_zero - g3).powi(2);
            let better = match best {
                None => true,
                // Strict inequality keeps the first (smallest n, smallest p) fit.
                Some((_, _, best_res)) => residual < best_res,
            };
            if better {
                best = Some((n, p, residual));
            }
        }
    }

    let (n, qlp_est, residual) = best.expect("candidate grid is non-empty");
    let photon_class = if qlp_est < 0.5 {
        PhotonClass::Coherent
    } else {
        PhotonClass::fock(n as u8).expect("candidate levels are 1..=3")
    };
    BaselineVerdict {
        photon_class,
        qlp_est,
        residual,
    }
}

/// Noiseless correlation map of the mixture: `g3(0)` at the center, `g2(0)`
/// wherever exactly one delay is zero, 1 elsewhere.
pub fn analytic_map(fock_n: u8, qlp: f64, tau_max: u8) -> Result<CorrelationMap> {
    let g2 = gk_zero(&GkQuery::new(fock_n as u32, 2, qlp)?);
    let g3 = gk_zero(&GkQuery::new(fock_n as u32, 3, qlp)?);
    let dim = 2 * tau_max as usize + 1;
    let t = tau_max as i32;
    let mut values = ndarray::Array2::<f64>::ones((dim, dim));
    for tau13 in -t..=t {
        for tau12 in -t..=t {
            let zeros = [tau12 == 0, tau13 == 0, tau13 - tau12 == 0]
                .iter()
                .filter(|&&z| z)
                .count();
            let v = match zeros {
                3 => g3,
                1 => g2,
                _ => 1.0,
            };
            values[((tau13 + t) as usize, (tau12 + t) as usize)] = v;
        }
    }
    Ok(CorrelationMap::from_values(values, tau_max, true))
}

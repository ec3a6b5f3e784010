//! Small shared record types for experiment outputs.

use serde::{Deserialize, Serialize};

/// One checked quantity inside an experiment report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssertionRecord {
    pub name: String,
    pub observed: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl AssertionRecord {
    /// |observed - reference| <= tolerance
    pub fn within(name: impl Into<String>, observed: f64, reference: f64, tolerance: f64) -> Self {
        AssertionRecord {
            name: name.into(),
            observed,
            reference,
            tolerance,
            pass: (observed - reference).abs() <= tolerance,
        }
    }

    /// observed <= reference (tolerance recorded as 0)
    pub fn at_most(name: impl Into<String>, observed: f64, reference: f64) -> Self {
        AssertionRecord {
            name: name.into(),
            observed,
            reference,
            tolerance: 0.0,
            pass: observed <= reference,
        }
    }

    pub fn boolean(name: impl Into<String>, pass: bool) -> Self {
        AssertionRecord {
            name: name.into(),
            observed: if pass { 1.0 } else { 0.0 },
            reference: 1.0,
            tolerance: 0.0,
            pass,
        }
    }
}

/// Wilson score interval for a binomial proportion.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WilsonInterval {
    pub p_hat: f64,
    pub lo: f64,
    pub hi: f64,
    pub hits: u64,
    pub trials: u64,
}

/// z-quantile for the two-sided 99% Wilson interval.
pub const WILSON_Z99: f64 = 2.5758293035489004;

pub fn wilson_interval(hits: u64, trials: u64, z: f64) -> WilsonInterval {
    assert!(trials > 0);
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) + z2 / (4.0 * n)) / n).sqrt() / denom;
    WilsonInterval {
        p_hat: p,
        lo: (center - half).max(0.0),
        hi: (center + half).min(1.0),
        hits,
        trials,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_contains_p_hat() {
        for &(k, n) in &[(0u64, 100u64), (1, 100), (50, 100), (100, 100), (7, 12345)] {
            let w = wilson_interval(k, n, WILSON_Z99);
            assert!(w.lo <= w.p_hat + 1e-15 && w.p_hat <= w.hi + 1e-15);
            assert!(w.lo >= 0.0 && w.hi <= 1.0);
        }
    }
}

//! Expected shortfall `E[h | h >= gamma]` from the same weighted runs as the
//! probability estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Tail;
use crate::multilevel::{z_value, TailMoments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvarReport {
    /// Threshold in model units.
    pub gamma: f64,
    /// Conditional tail mean in model units.
    pub estimate: f64,
    pub rel_half_width: f64,
    /// Plug-in asymptotic variance of the self-normalized estimator.
    pub sigma_sq: f64,
    pub runs: usize,
    pub confidence: f64,
}

impl CvarReport {
    pub fn std_error(&self) -> f64 {
        (self.sigma_sq / self.runs as f64).sqrt()
    }
}

struct Plugin {
    p: f64,
    m_y: f64,
    var_a: f64,
    e_ab: f64,
    e_b2: f64,
}

fn plugin(m: &TailMoments) -> Result<Plugin> {
    if m.sum_b == 0.0 || m.n == 0 {
        return Err(Error::ZeroHits { runs: m.n });
    }
    let n = m.n as f64;
    let m_y = m.sum_a / n;
    Ok(Plugin {
        p: m.sum_b / n,
        m_y,
        var_a: (m.sum_a2 / n - m_y * m_y).max(0.0),
        e_ab: m.sum_ab / n,
        e_b2: m.sum_b2 / n,
    })
}

/// Self-normalized estimator `sum A / sum B` on oriented responses, with
/// `gamma` the oriented threshold.
pub fn estimate_cvar(moments: &TailMoments, gamma: f64, tail: Tail, confidence: f64) -> Result<CvarReport> {
    let z = z_value(confidence)?;
    let q = plugin(moments)?;
    let ratio = moments.sum_a / moments.sum_b;
    let p3 = q.p * q.p * q.p;
    let sigma_sq = (q.var_a / (q.p * q.p) - 2.0 * q.m_y * q.e_ab / p3
        + q.m_y * q.m_y / p3 * (q.e_b2 / q.p + q.p))
        .max(0.0);
    let rel = z * (sigma_sq / moments.n as f64).sqrt() / ratio.abs();
    let sign = match tail {
        Tail::Right => 1.0,
        Tail::Left => -1.0,
    };
    Ok(CvarReport {
        gamma: sign * gamma,
        estimate: sign * ratio,
        rel_half_width: rel,
        sigma_sq,
        runs: moments.n,
        confidence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnnormalizedCvar {
    pub estimate: f64,
    /// Plug-in `Var(A) / p^2`.
    pub sigma_bar_sq: f64,
}

/// `sum A / (n p)` for a known or separately estimated probability `p`.
pub fn estimate_cvar_unnormalized(moments: &TailMoments, p: f64) -> Result<UnnormalizedCvar> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::domain(format!("probability must lie in (0,1], got {p}")));
    }
    let q = plugin(moments)?;
    Ok(UnnormalizedCvar {
        estimate: q.m_y / p,
        sigma_bar_sq: q.var_a / (p * p),
    })
}

/// Bias of the unshifted self-normalized estimator on `n` runs, counting an
/// empty tail sample as zero.
pub fn cvar_exact_bias(cvar: f64, p: f64, n: usize) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::domain(format!("probability must lie in (0,1], got {p}")));
    }
    Ok(-cvar * (1.0 - p).powi(n as i32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelSpec};
    use crate::multilevel::weighted_draws;
    use crate::normal::{std_normal_pdf, std_normal_sf};
    use crate::rng::RngStream;
    use crate::vector::ShiftVector;

    const MILLS: f64 = 1.938_677_166_622_543;

    fn toy(seed: u64, n: usize, theta: f64) -> TailMoments {
        let m = Model::builtin(ModelSpec::identity(1)).unwrap();
        weighted_draws(&m, 1.5, &ShiftVector(vec![theta]), &RngStream::new(seed, 3), 0, n)
            .unwrap()
            .0
    }

    #[test]
    fn mills_ratio_oracle() {
        let p = std_normal_sf(1.5);
        assert!((std_normal_pdf(1.5) / p - MILLS).abs() < 1e-12);
    }

    #[test]
    fn toy_variances() {
        let mom = toy(1, 1_000_000, 0.0);
        let r = estimate_cvar(&mom, 1.5, Tail::Right, 0.95).unwrap();
        assert!((r.estimate - MILLS).abs() < 3.0 * r.std_error(), "{r:?}");
        assert!((r.sigma_sq / 2.0 - 1.0).abs() < 0.15, "sigma^2 {}", r.sigma_sq);
        let u = estimate_cvar_unnormalized(&mom, std_normal_sf(1.5)).unwrap();
        assert!((u.sigma_bar_sq / 54.0 - 1.0).abs() < 0.15, "{}", u.sigma_bar_sq);
        assert!(r.estimate >= 1.5);
    }

    #[test]
    fn variance_gap_matches_closed_form() {
        // with the estimated p, sigma_bar^2 - sigma^2 = E[Y1]^2 (1-p) / p^3
        let mom = toy(2, 200_000, 0.0);
        let p = mom.probability();
        let r = estimate_cvar(&mom, 1.5, Tail::Right, 0.95).unwrap();
        let u = estimate_cvar_unnormalized(&mom, p).unwrap();
        let m_y = mom.sum_a / mom.n as f64;
        let gap = m_y * m_y * (1.0 - p) / p.powi(3);
        assert!(gap > 0.0);
        assert!((u.sigma_bar_sq - r.sigma_sq - gap).abs() < 1e-9 * gap);
    }

    #[test]
    fn constant_tail_gives_that_value() {
        let mut m = TailMoments::default();
        for (i, w) in [0.3, 2.0, 0.01, 7.0].iter().enumerate() {
            m.push(true, *w, 4.25);
            m.push(false, 1.0, i as f64);
        }
        let r = estimate_cvar(&m, 4.0, Tail::Right, 0.95).unwrap();
        assert!((r.estimate - 4.25).abs() < 1e-14);
        let mut one = TailMoments::default();
        one.push(true, 1.0, 3.0);
        assert_eq!(estimate_cvar_unnormalized(&one, 1.0).unwrap().estimate, 3.0);
    }

    #[test]
    fn left_tail_reports_model_units() {
        let mut m = TailMoments::default();
        m.push(true, 1.0, 6.0);
        m.push(true, 1.0, 5.0);
        m.push(false, 1.0, 1.0);
        let r = estimate_cvar(&m, 5.0, Tail::Left, 0.95).unwrap();
        assert_eq!(r.estimate, -5.5);
        assert_eq!(r.gamma, -5.0);
    }

    #[test]
    fn zero_hits() {
        let mut m = TailMoments::default();
        m.push(false, 1.0, 0.0);
        assert!(matches!(estimate_cvar(&m, 1.0, Tail::Right, 0.95), Err(Error::ZeroHits { runs: 1 })));
    }

    #[test]
    fn bias_law() {
        assert_eq!(cvar_exact_bias(MILLS, 1.0, 5).unwrap(), 0.0);
        assert!(cvar_exact_bias(MILLS, 0.0668, 10_000).unwrap().abs() < 1e-250);
        let p = std_normal_sf(1.5);
        let mean = MILLS + cvar_exact_bias(MILLS, p, 5).unwrap();
        assert!((mean - 0.566_651_015_704_349_2).abs() < 1e-12);
        assert!(cvar_exact_bias(1.0, 0.0, 5).is_err());
    }

    #[test]
    fn shift_invariance_in_expectation() {
        let a = estimate_cvar(&toy(5, 200_000, 0.0), 1.5, Tail::Right, 0.95).unwrap();
        let b = estimate_cvar(&toy(6, 200_000, 1.77), 1.5, Tail::Right, 0.95).unwrap();
        let se = (a.std_error().powi(2) + b.std_error().powi(2)).sqrt();
        assert!((a.estimate - b.estimate).abs() < 3.0 * se);
        assert!(b.std_error() < a.std_error());
    }
}

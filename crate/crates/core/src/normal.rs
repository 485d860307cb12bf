//! Standard normal density, distribution function and quantile.
//!
//! Tails are evaluated through `erfc` so that `sf(x)` keeps full relative
//! precision far out (down to ~1e-300), which matters for targets near 1e-10.
//! The quantile starts from Wichura's AS241 rational approximation and applies
//! one Halley step against `cdf`/`sf`.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `P(X > x) = cdf(-x)`.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Inverse of [`std_normal_cdf`] on the open unit interval.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("quantile needs p in (0,1), got {p}")));
    }
    let x = as241(p);
    // Polish against whichever tail is small so the residual keeps relative precision.
    let resid = if p < 0.5 {
        std_normal_cdf(x) - p
    } else {
        (1.0 - p) - std_normal_sf(x)
    };
    Ok(halley(x, resid))
}

/// Inverse of [`std_normal_sf`]: the `x` with `P(X > x) = q`.
pub fn std_normal_isf(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::domain(format!("isf needs q in (0,1), got {q}")));
    }
    if q < 0.5 {
        let x = -as241(q);
        Ok(halley(x, q - std_normal_sf(x)))
    } else {
        Ok(-std_normal_quantile(q)?)
    }
}

#[inline]
fn halley(x: f64, resid: f64) -> f64 {
    let dens = std_normal_pdf(x);
    if dens == 0.0 || !resid.is_finite() {
        return x;
    }
    let e = resid / dens;
    x - e / (1.0 + 0.5 * x * e)
}

fn as241(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_870_1e4)
            * r
            + 4.592_195_393_154_987_1e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_4e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_6)
            * q;
        let den = ((((((5.226_495_278_852_854_6e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_132e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed with 40-digit arithmetic (mpmath ncdf).
    const CDF_TABLE: &[(f64, f64)] = &[
        (0.5, 0.691_462_461_274_013_1),
        (1.0, 0.841_344_746_068_542_9),
        (1.5, 0.933_192_798_731_141_9),
        (2.0, 0.977_249_868_051_820_8),
        (3.0, 0.998_650_101_968_369_9),
        (3.719_016, 0.999_899_999_807_833_2),
        (-1.0, 0.158_655_253_931_457_05),
        (-3.0, 1.349_898_031_630_094_5e-3),
        (-5.0, 2.866_515_718_791_939e-7),
        (-8.0, 6.220_960_574_271_784e-16),
        (-10.0, 7.619_853_024_160_526e-24),
        (-20.0, 2.753_624_118_606_233_7e-89),
        (-37.0, 5.725_571_222_524_577e-300),
    ];

    #[test]
    fn cdf_matches_high_precision_table() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        for &(x, want) in CDF_TABLE {
            let got = std_normal_cdf(x);
            assert!((got - want).abs() <= 1e-15, "cdf({x}) = {got}, want {want}");
            if x < 0.0 {
                // the lower tail must also be relatively accurate
                assert!(((got - want) / want).abs() < 1e-13, "cdf({x}) rel err");
            }
        }
    }

    #[test]
    fn toy_tail_probability() {
        let tail = std_normal_sf(1.5);
        assert!((tail - 0.066_807_201_268_858_07).abs() < 1e-16);
        assert!((tail - 0.067).abs() < 5e-4);
        assert!((std_normal_sf(4.0) - 3.167_124_183_311_992e-5).abs() < 1e-19);
    }

    #[test]
    fn symmetry() {
        for i in -400..=400 {
            let x = i as f64 * 0.025;
            let s = std_normal_cdf(x) + std_normal_cdf(-x);
            assert!((s - 1.0).abs() <= 2e-16, "x={x}");
        }
    }

    #[test]
    fn quantile_reference_values() {
        let cases: [(f64, f64); 7] = [
            (0.9999, 3.719_016_485_455_680_6),
            (0.975, 1.959_963_984_540_054_2),
            (1e-4, -3.719_016_485_455_680_6),
            (1e-10, -6.361_340_902_404_056),
            (0.3, -0.524_400_512_708_040_8),
            (1e-300, -37.047_096_299_361_2),
            (0.999_999, 4.753_424_308_822_899),
        ];
        assert_eq!(std_normal_quantile(0.5).unwrap(), 0.0);
        for (p, want) in cases {
            let got = std_normal_quantile(p).unwrap();
            let tol = if p > 0.5 { 1e-9 } else { 1e-13 * want.abs().max(1.0) };
            assert!((got - want).abs() <= tol, "q({p}) = {got}, want {want}");
        }
        let isf = std_normal_isf(1e-4).unwrap();
        assert!((isf - 3.719_016_485_455_680_6).abs() < 1e-13);
        let isf = std_normal_isf(1.25e-9).unwrap();
        assert!((isf - 5.961_456_155_913_366_5).abs() < 1e-12);
    }

    #[test]
    fn quantile_domain_errors() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(std_normal_quantile(p), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn quantile_inverts_cdf_on_log_grid() {
        // p in [1e-12, 1 - 1e-12]
        let mut k = 0;
        while k <= 240 {
            let p = 10f64.powf(-12.0 + k as f64 * 0.05);
            let p = p.min(0.5);
            let x = std_normal_quantile(p).unwrap();
            let back = std_normal_cdf(x);
            assert!(((back - p) / p).abs() < 1e-12, "p={p}: back={back}");
            // mirrored upper tail
            let q = 1.0 - p;
            if q < 1.0 {
                let x = std_normal_quantile(q).unwrap();
                let back = std_normal_cdf(x);
                assert!(((back - q) / q).abs() < 1e-12, "q={q}: back={back}");
            }
            k += 1;
        }
    }

    #[test]
    fn pdf_integrates_cdf_slope() {
        let h = 1e-5;
        for x in [-3.0, -0.7, 0.0, 1.2, 2.5] {
            let fd = (std_normal_cdf(x + h) - std_normal_cdf(x - h)) / (2.0 * h);
            assert!((fd - std_normal_pdf(x)).abs() < 1e-9);
        }
    }
}

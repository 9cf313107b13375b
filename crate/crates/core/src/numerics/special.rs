//! Scalar special functions.
//!
//! `erf`/`erfc` use W. J. Cody's rational Chebyshev approximations
//! (Math. Comp. 23, 1969), accurate to roughly machine precision on the
//! whole real line.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

const FRAC_1_SQRT_PI: f64 = 5.641_895_835_477_562_869_5e-1;

const A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_6e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_5e3,
    1.857_777_061_846_031_5e-1,
];
const B: [f64; 4] = [
    2.360_129_095_234_412_1e1,
    2.440_246_379_344_441_7e2,
    1.282_616_526_077_372_3e3,
    2.844_236_833_439_170_6e3,
];
const C: [f64; 9] = [
    5.641_884_969_886_700_9e-1,
    8.883_149_794_388_376e0,
    6.611_919_063_714_163e1,
    2.986_351_381_974_001_3e2,
    8.819_522_212_417_691e2,
    1.712_047_612_634_070_6e3,
    2.051_078_377_826_071_5e3,
    1.230_339_354_797_997_2e3,
    2.153_115_354_744_038_5e-8,
];
const D: [f64; 8] = [
    1.574_492_611_070_983_5e1,
    1.176_939_508_913_125e2,
    5.371_811_018_620_099e2,
    1.621_389_574_566_690_2e3,
    3.290_799_235_733_459_6e3,
    4.362_619_090_143_247e3,
    3.439_367_674_143_721_6e3,
    1.230_339_354_803_749_4e3,
];
const P: [f64; 6] = [
    3.053_266_349_612_323_4e-1,
    3.603_448_999_498_044e-1,
    1.257_817_261_112_292_5e-1,
    1.608_378_514_874_227_7e-2,
    6.587_491_615_298_378e-4,
    1.631_538_713_730_209_8e-2,
];
const Q: [f64; 5] = [
    2.568_520_192_289_822_4e0,
    1.872_952_849_923_467_3e0,
    5.279_051_029_514_284e-1,
    6.051_834_131_244_132e-2,
    2.335_204_976_268_691_8e-3,
];

/// `exp(-y^2)` with the argument split to limit cancellation error.
fn exp_neg_sq(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// `erfc(y)` for `y > 0.46875`.
fn erfc_tail(y: f64) -> f64 {
    if y <= 4.0 {
        let mut num = C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + C[i]) * y;
            den = (den + D[i]) * y;
        }
        exp_neg_sq(y) * (num + C[7]) / (den + D[7])
    } else if y >= 26.6 {
        0.0
    } else {
        let ysq = 1.0 / (y * y);
        let mut num = P[5] * ysq;
        let mut den = ysq;
        for i in 0..4 {
            num = (num + P[i]) * ysq;
            den = (den + Q[i]) * ysq;
        }
        let r = ysq * (num + P[4]) / (den + Q[4]);
        exp_neg_sq(y) * (FRAC_1_SQRT_PI - r) / y
    }
}

fn erf_small(x: f64) -> f64 {
    let ysq = if x.abs() > 1.11e-16 { x * x } else { 0.0 };
    let mut num = A[4] * ysq;
    let mut den = ysq;
    for i in 0..3 {
        num = (num + A[i]) * ysq;
        den = (den + B[i]) * ysq;
    }
    x * (num + A[3]) / (den + B[3])
}

pub fn erf(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        erf_small(x)
    } else {
        let r = 1.0 - erfc_tail(y);
        if x < 0.0 {
            -r
        } else {
            r
        }
    }
}

pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        1.0 - erf_small(x)
    } else {
        let r = erfc_tail(y);
        if x < 0.0 {
            2.0 - r
        } else {
            r
        }
    }
}

/// Standard normal CDF, evaluated through `erfc` so both tails keep
/// relative precision.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from mpmath at 30 significant digits.
    const CDF_REF: [(f64, f64); 8] = [
        (0.0, 0.5),
        (1.96, 0.975_002_104_851_779_563_787),
        (-1.96, 0.024_997_895_148_220_436_212_8),
        (0.3, 0.617_911_422_188_952_633_072),
        (1.0, 0.841_344_746_068_542_948_585),
        (-3.5, 2.326_290_790_355_250_363_5e-4),
        (5.0, 0.999_999_713_348_428_120_806),
        (-8.0, 6.220_960_574_271_784_123_5e-16),
    ];

    const ERF_REF: [(f64, f64); 6] = [
        (0.1, 0.112_462_916_018_284_898_405),
        (0.46875, 0.492_613_473_217_937_991_588),
        (0.5, 0.520_499_877_813_046_537_683),
        (2.0, 0.995_322_265_018_952_734_162),
        (-3.0, -0.999_977_909_503_001_414_559),
        (4.5, 0.999_999_999_803_383_955_846),
    ];

    #[test]
    fn normal_cdf_matches_reference() {
        for (x, want) in CDF_REF {
            let got = normal_cdf(x);
            let tol = 1e-12_f64.max(want.abs() * 1e-12);
            assert!((got - want).abs() <= tol, "Phi({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn erf_matches_reference() {
        for (x, want) in ERF_REF {
            assert!((erf(x) - want).abs() < 1e-15, "erf({x})");
            assert!((erfc(x) - (1.0 - want)).abs() < 1e-15, "erfc({x})");
        }
    }

    #[test]
    fn normal_cdf_is_symmetric() {
        for i in -60..=60 {
            let x = i as f64 * 0.137;
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
    }
}

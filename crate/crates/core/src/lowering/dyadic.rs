use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest shift accepted anywhere; keeps `2^(d-1)` inside `i32`.
pub const D_LIMIT: u32 = 30;

/// Default largest shift used by lowering. Requantization ratios after
/// 8-bit layers are around `2^-15`, so shifts well past 16 are needed to keep
/// the relative error small.
pub const DEFAULT_D_MAX: u32 = D_LIMIT;

pub const ACC_MAX: i64 = i32::MAX as i64;

/// The multiplier `c / 2^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DyadicRational {
    pub c: i64,
    pub d: u32,
}

impl DyadicRational {
    pub const ONE: DyadicRational = DyadicRational { c: 1, d: 0 };

    pub fn value(&self) -> f64 {
        self.c as f64 * (-(self.d as f64)).exp2()
    }

    /// Rounding offset `2^(d-1)` added before the shift (0 when `d = 0`).
    pub fn half(&self) -> i64 {
        if self.d == 0 {
            0
        } else {
            1i64 << (self.d - 1)
        }
    }

    /// Worst-case `|eta| * c + 2^(d-1)` for `|eta| <= max_abs`.
    pub fn bound(&self, max_abs: i64) -> i64 {
        max_abs.saturating_mul(self.c).saturating_add(self.half())
    }

    pub fn fits(&self, max_abs: i64) -> bool {
        self.bound(max_abs) <= ACC_MAX
    }

    pub fn is_power_of_two(&self) -> bool {
        self.c > 0 && self.c & (self.c - 1) == 0
    }
}

/// Search mode for skip-connection multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowerMode {
    /// Free numerator `c` and shift `d`.
    Aqd,
    /// Numerator fixed to a power of two: the multiplier is `2^k`.
    Fqn,
}

fn check_ratio(m: f64, n: f64, d_max: u32) -> Result<f64> {
    if !(m.is_finite() && n.is_finite() && m > 0.0 && n > 0.0) {
        return Err(Error::InvalidConfig(format!("ratio operands must be positive and finite: {m}, {n}")));
    }
    if d_max > D_LIMIT {
        return Err(Error::InvalidConfig(format!("d_max {d_max} exceeds {D_LIMIT}")));
    }
    let r = m / n;
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidConfig(format!("ratio {m}/{n} is not representable")));
    }
    Ok(r)
}

/// `|r - c/2^d|`. Exact whenever `r 2^d >= 1/2` and `c` is the floor or
/// ceiling of `r 2^d`: the subtraction is then exact by Sterbenz's lemma and
/// the scalings are powers of two.
fn abs_error(r: f64, q: DyadicRational) -> f64 {
    let s = (q.d as f64).exp2();
    (r * s - q.c as f64).abs() / s
}

/// Best `c / 2^d` approximation of `m / n` over `d` in `[0, d_max]`, `c >= 1`,
/// subject to `max_abs * c + 2^(d-1) <= i32::MAX`. Ties go to the smallest `d`,
/// then the smallest `c`. Returns the pair and its absolute error.
pub fn dyadic_approx(m: f64, n: f64, d_max: u32, max_abs: i64) -> Result<(DyadicRational, f64)> {
    let r = check_ratio(m, n, d_max)?;
    let mut best: Option<(DyadicRational, f64)> = None;
    for d in 0..=d_max {
        let half = if d == 0 { 0 } else { 1i64 << (d - 1) };
        let c_cap = (ACC_MAX - half) / max_abs.max(1);
        if c_cap < 1 {
            continue;
        }
        let scaled = r * (d as f64).exp2();
        let lo = (scaled.floor().min(c_cap as f64) as i64).max(1);
        let hi = (scaled.ceil().min(c_cap as f64) as i64).max(1);
        for c in [lo, hi] {
            let q = DyadicRational { c, d };
            let err = abs_error(r, q);
            if best.is_none_or(|(_, e)| err < e) {
                best = Some((q, err));
            }
        }
    }
    best.ok_or(Error::NoFeasibleDyadic { ratio: r, max_abs })
}

/// Best power-of-two approximation `2^k` of `m / n` with `k >= -d_max`,
/// stored as `(2^k, 0)` or `(1, -k)`, under the same accumulator bound and
/// tie rule as [`dyadic_approx`].
pub fn fqn_approx(m: f64, n: f64, d_max: u32, max_abs: i64) -> Result<(DyadicRational, f64)> {
    let r = check_ratio(m, n, d_max)?;
    let mut best: Option<(DyadicRational, f64)> = None;
    let mut consider = |q: DyadicRational| {
        if !q.fits(max_abs) {
            return;
        }
        let err = (r - q.value()).abs();
        let better = match best {
            None => true,
            Some((b, e)) => err < e || (err == e && (q.d, q.c) < (b.d, b.c)),
        };
        if better {
            best = Some((q, err));
        }
    };
    for d in (1..=d_max).rev() {
        consider(DyadicRational { c: 1, d });
    }
    for k in 0..=D_LIMIT {
        consider(DyadicRational { c: 1i64 << k, d: 0 });
    }
    best.ok_or(Error::NoFeasibleDyadic { ratio: r, max_abs })
}

/// Dispatches on `mode`.
pub fn approx(mode: LowerMode, m: f64, n: f64, d_max: u32, max_abs: i64) -> Result<(DyadicRational, f64)> {
    match mode {
        LowerMode::Aqd => dyadic_approx(m, n, d_max, max_abs),
        LowerMode::Fqn => fqn_approx(m, n, d_max, max_abs),
    }
}

/// `(t + 2^(d-1)) >> d`, the rounding shift shared by requantization and skip fusion.
pub fn shift_round(t: i64, d: u32) -> i64 {
    if d == 0 {
        t
    } else {
        (t + (1i64 << (d - 1))) >> d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_ratio() {
        let (q, e) = dyadic_approx(3.7, 3.7, 16, 255).unwrap();
        assert_eq!((q, e), (DyadicRational { c: 1, d: 0 }, 0.0));
    }

    #[test]
    fn exact_half_ratio() {
        let (q, e) = dyadic_approx(1.5, 1.0, 8, 255).unwrap();
        assert_eq!((q.c, q.d, e), (3, 1, 0.0));
    }

    #[test]
    fn tie_prefers_smaller_shift() {
        let (q, e) = dyadic_approx(1.3, 1.0, 3, 255).unwrap();
        assert_eq!((q.c, q.d), (5, 2));
        assert!((e - 0.05).abs() < 1e-12);
        let alt = DyadicRational { c: 10, d: 3 };
        assert_eq!(abs_error(1.3, alt), e);
    }

    #[test]
    fn accumulator_bound_limits_numerator() {
        let max_abs = 1 << 20;
        let (q, _) = dyadic_approx(1.0, 3.0, 16, max_abs).unwrap();
        assert!(q.fits(max_abs));
        assert!(q.d < 16);
        assert!(matches!(
            dyadic_approx(1.0, 1.0, 16, ACC_MAX + 1),
            Err(Error::NoFeasibleDyadic { .. })
        ));
    }

    #[test]
    fn rejects_bad_operands() {
        assert!(dyadic_approx(0.0, 1.0, 16, 1).is_err());
        assert!(dyadic_approx(1.0, f64::NAN, 16, 1).is_err());
        assert!(dyadic_approx(1.0, 1.0, 31, 1).is_err());
    }

    #[test]
    fn fqn_picks_nearest_power_of_two() {
        assert_eq!(fqn_approx(3.1, 1.0, 16, 255).unwrap().0, DyadicRational { c: 4, d: 0 });
        assert_eq!(fqn_approx(0.3, 1.0, 16, 255).unwrap().0, DyadicRational { c: 1, d: 2 });
        assert_eq!(fqn_approx(1.5, 1.0, 16, 255).unwrap().0, DyadicRational { c: 1, d: 0 });
        assert_eq!(fqn_approx(0.75, 1.0, 16, 255).unwrap().0, DyadicRational { c: 1, d: 0 });
    }

    #[test]
    fn shift_rounds_half_up() {
        assert_eq!(shift_round(7, 1), 4);
        assert_eq!(shift_round(9, 1), 5);
        assert_eq!(shift_round(-3, 1), -1);
        assert_eq!(shift_round(-5, 2), -1);
        assert_eq!(shift_round(6, 0), 6);
    }
}

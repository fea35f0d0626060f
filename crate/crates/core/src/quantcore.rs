//! Quantized values, learnable-interval quantizers and their straight-through
//! gradients.
//!
//! Every quantized value is an integer `eta` times a real scale `alpha`.
//! Activations live on the unsigned grid `{0, .., 2^b-1} * nu / (2^b-1)`,
//! weights on the symmetric grid `-nu + k * 2nu / (2^b-1)`, and the 8-bit
//! output head on the signed grid `{-(2^(b-1)-1), .., 2^(b-1)-1} * nu / (2^(b-1)-1)`.
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUPPORTED_BITS: [u32; 4] = [2, 3, 4, 8];

/// Bitwidth used for the network input and the output head.
pub const BOUNDARY_BITS: u32 = 8;

pub fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidQuantizer(format!(
            "bitwidth {bits} not in {SUPPORTED_BITS:?}"
        )))
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu.is_finite() && nu > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidQuantizer(format!("interval {nu} must be positive")))
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: x[index],
        }),
        None => Ok(()),
    }
}

/// Where an input fell relative to the clipping interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    Low = 0,
    Inside = 1,
    High = 2,
}

/// Result of quantizing one scalar.
///
/// `residual` is `round(z) - z` for the pre-rounding grid coordinate `z`.
/// Feeding it back through the `frozen` argument of the `*_point` functions
/// replaces rounding by `z + residual`, which gives a locally smooth surrogate
/// whose exact derivatives are the straight-through gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantPoint {
    pub eta: i32,
    pub value: f64,
    pub residual: f64,
    pub region: Region,
}

fn grid_round(z: f64, frozen: Option<f64>) -> (f64, f64) {
    match frozen {
        Some(r) => (z + r, r),
        None => {
            let q = z.round();
            (q, q - z)
        }
    }
}

/// Unsigned activation quantizer on `[0, nu]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuantizer {
    pub nu: f64,
    pub bits: u32,
}

impl ActQuantizer {
    pub fn new(nu: f64, bits: u32) -> Result<Self> {
        check_nu(nu)?;
        check_bits(bits)?;
        Ok(Self { nu, bits })
    }

    /// `2^b - 1`.
    pub fn levels(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    pub fn max_eta(&self) -> i32 {
        (1i32 << self.bits) - 1
    }

    /// Scale of the integer representation, `nu / (2^b - 1)`.
    pub fn scale(&self) -> f64 {
        self.nu / self.levels()
    }

    pub fn point(&self, x: f64, frozen: Option<f64>) -> QuantPoint {
        let levels = self.levels();
        let t = x / self.nu;
        let (clipped, region) = if t <= 0.0 {
            (0.0, Region::Low)
        } else if t >= 1.0 {
            (1.0, Region::High)
        } else {
            (t, Region::Inside)
        };
        let (q, residual) = grid_round(clipped * levels, frozen);
        QuantPoint {
            eta: q.round() as i32,
            value: q * self.nu / levels,
            residual,
            region,
        }
    }
}

/// Symmetric weight quantizer on `[-nu, nu]` with `2^b` levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WtQuantizer {
    pub nu: f64,
    pub bits: u32,
}

impl WtQuantizer {
    pub fn new(nu: f64, bits: u32) -> Result<Self> {
        check_nu(nu)?;
        check_bits(bits)?;
        Ok(Self { nu, bits })
    }

    pub fn levels(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    pub fn max_eta(&self) -> i32 {
        (1i32 << self.bits) - 1
    }

    pub fn point(&self, w: f64, frozen: Option<f64>) -> QuantPoint {
        let levels = self.levels();
        let t = w / self.nu;
        let (clipped, region) = if t <= -1.0 {
            (-1.0, Region::Low)
        } else if t >= 1.0 {
            (1.0, Region::High)
        } else {
            (t, Region::Inside)
        };
        let (q, residual) = grid_round((clipped + 1.0) / 2.0 * levels, frozen);
        QuantPoint {
            eta: q.round() as i32,
            value: (2.0 * q - levels) * self.nu / levels,
            residual,
            region,
        }
    }
}

/// Signed symmetric quantizer with a zero level, used for the 8-bit output head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedQuantizer {
    pub nu: f64,
    pub bits: u32,
}

impl SignedQuantizer {
    pub fn new(nu: f64, bits: u32) -> Result<Self> {
        check_nu(nu)?;
        check_bits(bits)?;
        Ok(Self { nu, bits })
    }

    /// `2^(b-1) - 1`.
    pub fn levels(&self) -> f64 {
        ((1u64 << (self.bits - 1)) - 1) as f64
    }

    pub fn max_eta(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    pub fn scale(&self) -> f64 {
        self.nu / self.levels()
    }

    pub fn point(&self, x: f64, frozen: Option<f64>) -> QuantPoint {
        let levels = self.levels();
        let t = x / self.nu;
        let (clipped, region) = if t <= -1.0 {
            (-1.0, Region::Low)
        } else if t >= 1.0 {
            (1.0, Region::High)
        } else {
            (t, Region::Inside)
        };
        let (q, residual) = grid_round(clipped * levels, frozen);
        QuantPoint {
            eta: q.round() as i32,
            value: q * self.nu / levels,
            residual,
            region,
        }
    }
}

/// Quantize activations to the unsigned grid. Returns `(eta, xbar)`.
pub fn quantize_activation(x: &[f64], q: &ActQuantizer) -> Result<(Vec<i32>, Vec<f64>)> {
    check_nu(q.nu)?;
    check_finite(x)?;
    Ok(x.iter()
        .map(|&v| {
            let p = q.point(v, None);
            (p.eta, p.value)
        })
        .unzip())
}

/// Quantize weights to the symmetric grid. Returns `(eta, wbar)`.
pub fn quantize_weight(w: &[f64], q: &WtQuantizer) -> Result<(Vec<i32>, Vec<f64>)> {
    check_nu(q.nu)?;
    check_finite(w)?;
    Ok(w.iter()
        .map(|&v| {
            let p = q.point(v, None);
            (p.eta, p.value)
        })
        .unzip())
}

pub fn quantize_signed(x: &[f64], q: &SignedQuantizer) -> Result<(Vec<i32>, Vec<f64>)> {
    check_nu(q.nu)?;
    check_finite(x)?;
    Ok(x.iter()
        .map(|&v| {
            let p = q.point(v, None);
            (p.eta, p.value)
        })
        .unzip())
}

/// Partial derivatives `(d xbar / d x, d xbar / d nu)` given the quantized
/// value and region. Shared by all three quantizers.
fn ste_partials(x: f64, value: f64, nu: f64, region: Region, low_nu_slope: f64) -> (f64, f64) {
    match region {
        Region::Inside => (1.0, (value - x) / nu),
        Region::High => (0.0, 1.0),
        Region::Low => (0.0, low_nu_slope),
    }
}

/// Straight-through gradients for one activation: `(dL/dx, dL/dnu)`.
///
/// The `nu` gradient is unscaled; multiply by [`nu_grad_scale`] when training.
pub fn ste_grad_activation(x: f64, upstream: f64, q: &ActQuantizer) -> (f64, f64) {
    let p = q.point(x, None);
    let (dx, dnu) = ste_partials(x, p.value, q.nu, p.region, 0.0);
    (upstream * dx, upstream * dnu)
}

/// Straight-through gradients for one weight: `(dL/dw, dL/dnu)`.
pub fn ste_grad_weight(w: f64, upstream: f64, q: &WtQuantizer) -> (f64, f64) {
    let p = q.point(w, None);
    let (dw, dnu) = ste_partials(w, p.value, q.nu, p.region, -1.0);
    (upstream * dw, upstream * dnu)
}

pub fn ste_grad_signed(x: f64, upstream: f64, q: &SignedQuantizer) -> (f64, f64) {
    let p = q.point(x, None);
    let (dx, dnu) = ste_partials(x, p.value, q.nu, p.region, -1.0);
    (upstream * dx, upstream * dnu)
}

/// Same as the `ste_grad_*` functions but from an already computed point,
/// which lets the training graph reuse its forward cache.
pub(crate) fn ste_from_point(x: f64, p: &QuantPoint, nu: f64, signed_low: bool) -> (f64, f64) {
    ste_partials(x, p.value, nu, p.region, if signed_low { -1.0 } else { 0.0 })
}

/// LSQ-style interval gradient scale `1 / sqrt(N * (2^b - 1))`.
pub fn nu_grad_scale(numel: usize, bits: u32) -> f64 {
    let levels = ((1u64 << bits) - 1) as f64;
    1.0 / (numel.max(1) as f64 * levels).sqrt()
}

/// Initial weight interval: `2 * mean|w|` at 2 bits, widened by
/// `sqrt(Q / Q_2bit)` for wider grids and capped at `max|w|`.
pub fn init_weight_nu(w: &[f64], bits: u32) -> f64 {
    let signed_levels = ((1u64 << (bits - 1)) - 1) as f64;
    init_nu(w, 2.0 * signed_levels.sqrt())
}

/// Initial activation interval: `3 * mean|x|` at 2 bits, widened by
/// `sqrt((2^b-1)/3)` for wider grids and capped at `max|x|`.
pub fn init_act_nu(x: &[f64], bits: u32) -> f64 {
    let levels = ((1u64 << bits) - 1) as f64;
    init_nu(x, 3.0 * (levels / 3.0).sqrt())
}

fn init_nu(v: &[f64], factor: f64) -> f64 {
    if v.is_empty() {
        return 1.0;
    }
    let mean = v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    // The 2-bit rule is used as is; widened rules stop at the largest magnitude.
    let nu = if factor > 3.0 { (factor * mean).min(max).max(mean) } else { factor * mean };
    if nu > 1e-8 {
        nu
    } else {
        1.0
    }
}

/// Range of integer values a [`QuantTensor`] may hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// `[0, 2^b - 1]`.
    Unsigned,
    /// `[-2^31, 2^31 - 1]`.
    SignedAccumulator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scale {
    PerTensor(f64),
    PerChannel(Vec<f64>),
}

impl Scale {
    pub fn at(&self, channel: usize) -> f64 {
        match self {
            Scale::PerTensor(a) => *a,
            Scale::PerChannel(v) => v[channel],
        }
    }
}

/// Integer array with scale metadata: element value is `eta * alpha`.
///
/// The channel axis is 1 for 4-D `NCHW` shapes and 0 otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    eta: Vec<i32>,
    shape: Vec<usize>,
    alpha: Scale,
    bits: u32,
    domain: Domain,
}

impl QuantTensor {
    pub fn new(
        eta: Vec<i32>,
        shape: Vec<usize>,
        alpha: Scale,
        bits: u32,
        domain: Domain,
    ) -> Result<Self> {
        check_bits(bits)?;
        let numel: usize = shape.iter().product();
        if numel != eta.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements, got {}",
                eta.len()
            )));
        }
        let channels = Self::channel_count(&shape);
        match &alpha {
            Scale::PerTensor(a) => {
                if !(a.is_finite() && *a > 0.0) {
                    return Err(Error::InvalidTensor(format!("scale {a} must be positive")));
                }
            }
            Scale::PerChannel(v) => {
                if v.len() != channels {
                    return Err(Error::Shape(format!(
                        "{} per-channel scales for {channels} channels",
                        v.len()
                    )));
                }
                if let Some(a) = v.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
                    return Err(Error::InvalidTensor(format!("scale {a} must be positive")));
                }
            }
        }
        if domain == Domain::Unsigned {
            let max = (1i32 << bits) - 1;
            if let Some(i) = eta.iter().position(|&e| e < 0 || e > max) {
                return Err(Error::InvalidTensor(format!(
                    "eta[{i}] = {} outside unsigned {bits}-bit range",
                    eta[i]
                )));
            }
        }
        Ok(Self {
            eta,
            shape,
            alpha,
            bits,
            domain,
        })
    }

    fn channel_count(shape: &[usize]) -> usize {
        match shape.len() {
            0 => 1,
            4 => shape[1],
            _ => shape[0],
        }
    }

    pub fn eta(&self) -> &[i32] {
        &self.eta
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn alpha(&self) -> &Scale {
        &self.alpha
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn channels(&self) -> usize {
        Self::channel_count(&self.shape)
    }

    /// Channel index of flat element `i`.
    pub fn channel_of(&self, i: usize) -> usize {
        match self.shape.len() {
            0 => 0,
            4 => (i / (self.shape[2] * self.shape[3])) % self.shape[1],
            _ => i / (self.eta.len() / self.shape[0].max(1)),
        }
    }

    pub fn into_eta(self) -> Vec<i32> {
        self.eta
    }
}

/// `eta * alpha` with per-channel broadcast.
pub fn dequantize(t: &QuantTensor) -> Vec<f64> {
    t.eta
        .iter()
        .enumerate()
        .map(|(i, &e)| e as f64 * t.alpha.at(t.channel_of(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn activation_examples() {
        let q = ActQuantizer::new(1.0, 2).unwrap();
        let (eta, xbar) = quantize_activation(&[0.4, -0.7], &q).unwrap();
        assert_eq!(eta, vec![1, 0]);
        assert!(close(xbar[0], 1.0 / 3.0));
        assert_eq!(xbar[1], 0.0);

        let q = ActQuantizer::new(2.0, 3).unwrap();
        let (eta, xbar) = quantize_activation(&[5.0], &q).unwrap();
        assert_eq!(eta, vec![7]);
        assert!(close(xbar[0], 2.0));
    }

    #[test]
    fn weight_examples() {
        let q = WtQuantizer::new(1.0, 2).unwrap();
        let (eta, wbar) = quantize_weight(&[1.0, 0.2], &q).unwrap();
        assert_eq!(eta, vec![3, 2]);
        assert!(close(wbar[0], 1.0));
        assert!(close(wbar[1], 1.0 / 3.0));

        let q = WtQuantizer::new(1.0, 4).unwrap();
        let (eta, wbar) = quantize_weight(&[-2.0], &q).unwrap();
        assert_eq!(eta, vec![0]);
        assert!(close(wbar[0], -1.0));
    }

    #[test]
    fn rejects_non_finite_and_bad_quantizers() {
        let q = ActQuantizer::new(1.0, 2).unwrap();
        assert!(matches!(
            quantize_activation(&[0.1, f64::NAN], &q),
            Err(Error::NonFinite { index: 1, .. })
        ));
        let w = WtQuantizer::new(1.0, 2).unwrap();
        assert!(quantize_weight(&[f64::INFINITY], &w).is_err());
        assert!(ActQuantizer::new(0.0, 2).is_err());
        assert!(ActQuantizer::new(1.0, 5).is_err());
        assert!(WtQuantizer::new(-1.0, 2).is_err());
    }

    #[test]
    fn ties_round_away_from_zero() {
        // 0.5 / 1.0 * 3 = 1.5 -> 2
        let q = ActQuantizer::new(1.0, 2).unwrap();
        assert_eq!(q.point(0.5, None).eta, 2);
        // w = 0: (0 + 1)/2 * 3 = 1.5 -> 2
        let w = WtQuantizer::new(1.0, 2).unwrap();
        assert_eq!(w.point(0.0, None).eta, 2);
    }

    #[test]
    fn ste_activation_examples() {
        let q = ActQuantizer::new(1.0, 2).unwrap();
        let (dx, dnu) = ste_grad_activation(0.4, 1.0, &q);
        assert_eq!(dx, 1.0);
        assert!(close(dnu, -1.0 / 15.0));
        assert_eq!(ste_grad_activation(1.5, 1.0, &q), (0.0, 1.0));
        assert_eq!(ste_grad_activation(-0.2, 1.0, &q), (0.0, 0.0));
    }

    #[test]
    fn ste_weight_examples() {
        let q = WtQuantizer::new(1.0, 2).unwrap();
        let (dw, dnu) = ste_grad_weight(0.2, 1.0, &q);
        assert_eq!(dw, 1.0);
        assert!(close(dnu, 2.0 / 15.0));
        assert_eq!(ste_grad_weight(2.0, 1.0, &q), (0.0, 1.0));
        assert_eq!(ste_grad_weight(-2.0, 1.0, &q), (0.0, -1.0));
        // upstream scales both partials
        let (dw, dnu) = ste_grad_weight(0.2, -3.0, &q);
        assert_eq!(dw, -3.0);
        assert!(close(dnu, -6.0 / 15.0));
    }

    #[test]
    fn dequantize_examples() {
        let t = QuantTensor::new(
            vec![0, 0],
            vec![2],
            Scale::PerTensor(0.5),
            2,
            Domain::Unsigned,
        )
        .unwrap();
        assert_eq!(dequantize(&t), vec![0.0, 0.0]);

        let t = QuantTensor::new(
            vec![3],
            vec![1],
            Scale::PerTensor(1.0 / 3.0),
            2,
            Domain::Unsigned,
        )
        .unwrap();
        assert!(close(dequantize(&t)[0], 1.0));

        let t = QuantTensor::new(
            vec![1, 2],
            vec![2, 1],
            Scale::PerChannel(vec![0.5, 0.25]),
            2,
            Domain::Unsigned,
        )
        .unwrap();
        assert_eq!(dequantize(&t), vec![0.5, 0.5]);
    }

    #[test]
    fn nchw_per_channel_broadcast() {
        // N=2, C=2, H=1, W=2
        let t = QuantTensor::new(
            vec![1, 1, 1, 1, 2, 2, 2, 2],
            vec![2, 2, 1, 2],
            Scale::PerChannel(vec![1.0, 10.0]),
            8,
            Domain::Unsigned,
        )
        .unwrap();
        assert_eq!(
            dequantize(&t),
            vec![1.0, 1.0, 10.0, 10.0, 2.0, 2.0, 20.0, 20.0]
        );
    }

    #[test]
    fn quant_tensor_invariants() {
        assert!(matches!(
            QuantTensor::new(vec![4], vec![1], Scale::PerTensor(1.0), 2, Domain::Unsigned),
            Err(Error::InvalidTensor(_))
        ));
        assert!(QuantTensor::new(
            vec![-4],
            vec![1],
            Scale::PerTensor(1.0),
            2,
            Domain::SignedAccumulator
        )
        .is_ok());
        assert!(matches!(
            QuantTensor::new(vec![1, 2], vec![2, 1], Scale::PerChannel(vec![1.0]), 2, Domain::Unsigned),
            Err(Error::Shape(_))
        ));
        assert!(QuantTensor::new(vec![1], vec![1], Scale::PerTensor(-1.0), 2, Domain::Unsigned).is_err());
        assert!(QuantTensor::new(vec![1, 2], vec![3], Scale::PerTensor(1.0), 2, Domain::Unsigned).is_err());
    }

    #[test]
    fn init_heuristics() {
        let w = [0.5, -0.5, 0.1, -0.1];
        // 2-bit: 2 * mean|w| = 0.6
        assert!(close(init_weight_nu(&w, 2), 0.6));
        // 8-bit: widened beyond max|w|, so capped at 0.5
        assert!(close(init_weight_nu(&w, 8), 0.5));
        let x = [0.0, 0.1, 0.2, 3.0];
        assert!(close(init_act_nu(&x, 2), 3.0 * 3.3 / 4.0));
        assert_eq!(init_act_nu(&[0.0; 4], 2), 1.0);
    }

    /// Brute-force enumeration of all 2^b grid points.
    fn act_grid(q: &ActQuantizer) -> Vec<f64> {
        (0..=q.max_eta()).map(|k| k as f64 * q.nu / q.levels()).collect()
    }

    fn wt_grid(q: &WtQuantizer) -> Vec<f64> {
        (0..=q.max_eta())
            .map(|k| -q.nu + k as f64 * 2.0 * q.nu / q.levels())
            .collect()
    }

    fn bits_strategy() -> impl Strategy<Value = u32> {
        prop::sample::select(SUPPORTED_BITS.to_vec())
    }

    proptest! {
        #[test]
        fn activation_idempotent_and_on_grid(
            x in -5.0f64..5.0, nu in 0.05f64..4.0, bits in bits_strategy()
        ) {
            let q = ActQuantizer::new(nu, bits).unwrap();
            let p = q.point(x, None);
            prop_assert!(p.eta >= 0 && p.eta <= q.max_eta());
            let again = q.point(p.value, None);
            prop_assert_eq!(again.eta, p.eta);
            prop_assert!((again.value - p.value).abs() <= 1e-12 * nu);
            let grid = act_grid(&q);
            prop_assert!(grid.iter().any(|g| (g - p.value).abs() <= 1e-12 * nu));
            // nearest grid point (within half a step)
            let dist = grid.iter().map(|g| (g - x.clamp(0.0, nu)).abs()).fold(f64::MAX, f64::min);
            prop_assert!(((p.value - x.clamp(0.0, nu)).abs() - dist).abs() <= 1e-12);
        }

        #[test]
        fn weight_idempotent_and_on_grid(
            w in -5.0f64..5.0, nu in 0.05f64..4.0, bits in bits_strategy()
        ) {
            let q = WtQuantizer::new(nu, bits).unwrap();
            let p = q.point(w, None);
            prop_assert!(p.eta >= 0 && p.eta <= q.max_eta());
            let again = q.point(p.value, None);
            prop_assert_eq!(again.eta, p.eta);
            let grid = wt_grid(&q);
            prop_assert!(grid.iter().any(|g| (g - p.value).abs() <= 1e-12 * nu));
        }

        #[test]
        fn quantizers_are_monotone(
            a in -5.0f64..5.0, b in -5.0f64..5.0, nu in 0.05f64..4.0, bits in bits_strategy()
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q = ActQuantizer::new(nu, bits).unwrap();
            prop_assert!(q.point(lo, None).eta <= q.point(hi, None).eta);
            let w = WtQuantizer::new(nu, bits).unwrap();
            prop_assert!(w.point(lo, None).eta <= w.point(hi, None).eta);
            let s = SignedQuantizer::new(nu, bits).unwrap();
            prop_assert!(s.point(lo, None).eta <= s.point(hi, None).eta);
        }
    }

    /// dL/dnu from the STE matches central differences of the frozen-rounding
    /// surrogate `L(xbar)` with `L = sum_i c_i * xbar_i^2`, away from knots.
    #[test]
    fn nu_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let h = 1e-4;
        let mut checked = 0;
        for bits in SUPPORTED_BITS {
            for _ in 0..200 {
                let nu = rng.gen_range(0.3..2.0);
                let x: f64 = rng.gen_range(-1.0..3.0);
                let c: f64 = rng.gen_range(-2.0..2.0);
                let q = ActQuantizer::new(nu, bits).unwrap();
                let p = q.point(x, None);
                // skip points within 1e-3 of a rounding knot or clip boundary
                let z = (x / nu).clamp(0.0, 1.0) * q.levels();
                if (z - z.floor() - 0.5).abs() < 1e-3 || (x - nu).abs() < 1e-3 || x.abs() < 1e-3 {
                    continue;
                }
                let loss = |nu: f64| {
                    let v = ActQuantizer { nu, bits }.point(x, Some(p.residual)).value;
                    c * v * v
                };
                let fd = (loss(nu + h) - loss(nu - h)) / (2.0 * h);
                let upstream = 2.0 * c * p.value;
                let (_, dnu) = ste_grad_activation(x, upstream, &q);
                let tol = 1e-3 * dnu.abs().max(fd.abs()).max(1e-6);
                assert!((dnu - fd).abs() <= tol, "x={x} nu={nu} b={bits}: {dnu} vs {fd}");

                let w = WtQuantizer::new(nu, bits).unwrap();
                let wp = w.point(x - 1.0, None);
                if (x - 1.0).abs() < nu - 1e-3 || (x - 1.0).abs() > nu + 1e-3 {
                    let wloss = |nu: f64| {
                        let v = WtQuantizer { nu, bits }.point(x - 1.0, Some(wp.residual)).value;
                        c * v * v
                    };
                    let fd = (wloss(nu + h) - wloss(nu - h)) / (2.0 * h);
                    let (_, dnu) = ste_grad_weight(x - 1.0, 2.0 * c * wp.value, &w);
                    let tol = 1e-3 * dnu.abs().max(fd.abs()).max(1e-6);
                    assert!((dnu - fd).abs() <= tol, "w={} nu={nu}: {dnu} vs {fd}", x - 1.0);
                }
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn grad_scale() {
        assert!(close(nu_grad_scale(3, 2), 1.0 / 3.0));
        assert!(close(nu_grad_scale(1, 8), 1.0 / 255f64.sqrt()));
    }
}

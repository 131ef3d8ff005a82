//! The activation family: relu, the scaled/shifted sigmoid and the clipped
//! linear ramp. Every variant prints in, and parses from, the textual form
//! used in the ablation tables, e.g. `sigmoid(x - ln3) * 4` or
//! `min(max(0, x+1), 4)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum ActivationSpec {
    Relu,
    /// `scale * sigmoid(x - hshift) + vshift`
    Sigmoid {
        scale: f64,
        hshift: f64,
        vshift: f64,
    },
    /// `min(max(lower, x + shift), upper)`
    ClippedLinear {
        shift: f64,
        lower: f64,
        upper: f64,
    },
}

/// Image of an activation over the real line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueRange {
    pub lower: f64,
    pub upper: f64,
    pub lower_closed: bool,
    pub upper_closed: bool,
}

impl ValueRange {
    pub fn contains(&self, v: f64) -> bool {
        let above = if self.lower_closed { v >= self.lower } else { v > self.lower };
        let below = if self.upper_closed { v <= self.upper } else { v < self.upper };
        above && below
    }
}

impl fmt::Display for ValueRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let open = if self.lower_closed { '[' } else { '(' };
        let close = if self.upper_closed { ']' } else { ')' };
        let upper = if self.upper.is_infinite() { "+inf".to_string() } else { fmt_num(self.upper) };
        write!(f, "{open}{}, {upper}{close}", fmt_num(self.lower))
    }
}

impl ActivationSpec {
    /// `sigmoid(x - ln(alpha - 1)) * alpha`: positive, bounded by `alpha`,
    /// and equal to 1 at the origin.
    pub fn quotient(alpha: f64) -> Result<Self> {
        if !(alpha > 1.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "quotient activation needs alpha > 1 (ln(alpha - 1) is undefined otherwise), got {alpha}"
            )));
        }
        Ok(ActivationSpec::Sigmoid { scale: alpha, hshift: (alpha - 1.0).ln(), vshift: 0.0 })
    }

    pub fn clipped_linear(shift: f64, lower: f64, upper: f64) -> Result<Self> {
        let spec = ActivationSpec::ClippedLinear { shift, lower, upper };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationSpec::Relu => Ok(()),
            ActivationSpec::Sigmoid { scale, hshift, vshift } => {
                if !(scale > 0.0) || ![scale, hshift, vshift].iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("bad sigmoid activation {self:?}")));
                }
                Ok(())
            }
            ActivationSpec::ClippedLinear { shift, lower, upper } => {
                if !(lower < upper) || ![shift, lower, upper].iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "clipped linear activation needs lower < upper, got [{lower}, {upper}]"
                    )));
                }
                Ok(())
            }
        }
    }

    #[inline]
    pub fn apply<T: Element>(&self, x: T) -> T {
        match *self {
            ActivationSpec::Relu => x.max(T::zero()),
            ActivationSpec::Sigmoid { scale, hshift, vshift } => {
                T::from_f64(scale) * sigmoid(x - T::from_f64(hshift)) + T::from_f64(vshift)
            }
            ActivationSpec::ClippedLinear { shift, lower, upper } => {
                (x + T::from_f64(shift)).max(T::from_f64(lower)).min(T::from_f64(upper))
            }
        }
    }

    /// Derivative with respect to the input; kinks take the subgradient 0.
    #[inline]
    pub fn derivative<T: Element>(&self, x: T) -> T {
        match *self {
            ActivationSpec::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationSpec::Sigmoid { scale, hshift, .. } => {
                let s = sigmoid(x - T::from_f64(hshift));
                T::from_f64(scale) * s * (T::one() - s)
            }
            ActivationSpec::ClippedLinear { shift, lower, upper } => {
                let z = x + T::from_f64(shift);
                if z > T::from_f64(lower) && z < T::from_f64(upper) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn value_range(&self) -> ValueRange {
        match *self {
            ActivationSpec::Relu => {
                ValueRange { lower: 0.0, upper: f64::INFINITY, lower_closed: true, upper_closed: false }
            }
            ActivationSpec::Sigmoid { scale, vshift, .. } => {
                ValueRange { lower: vshift, upper: vshift + scale, lower_closed: false, upper_closed: false }
            }
            ActivationSpec::ClippedLinear { lower, upper, .. } => {
                ValueRange { lower, upper, lower_closed: true, upper_closed: true }
            }
        }
    }

    /// Value at the origin: the point `(0, f(0))` the curve passes through.
    pub fn passing_value(&self) -> f64 {
        self.apply(0.0f64)
    }

    /// Points where the function is not differentiable.
    pub fn kinks(&self) -> Vec<f64> {
        match *self {
            ActivationSpec::Relu => vec![0.0],
            ActivationSpec::Sigmoid { .. } => Vec::new(),
            ActivationSpec::ClippedLinear { shift, lower, upper } => vec![lower - shift, upper - shift],
        }
    }

    pub fn is_globally_differentiable(&self) -> bool {
        self.kinks().is_empty()
    }

    /// Lossless machine form (`sigmoid 2 0 0`), unlike the rounded display form.
    pub fn encode(&self) -> String {
        match *self {
            ActivationSpec::Relu => "relu".to_string(),
            ActivationSpec::Sigmoid { scale, hshift, vshift } => format!("sigmoid {scale:?} {hshift:?} {vshift:?}"),
            ActivationSpec::ClippedLinear { shift, lower, upper } => format!("clipped {shift:?} {lower:?} {upper:?}"),
        }
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot decode activation `{s}`"));
        let mut parts = s.split_whitespace();
        let kind = parts.next().ok_or_else(bad)?;
        let nums: Vec<f64> = parts.map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let spec = match (kind, nums.as_slice()) {
            ("relu", []) => ActivationSpec::Relu,
            ("sigmoid", &[scale, hshift, vshift]) => ActivationSpec::Sigmoid { scale, hshift, vshift },
            ("clipped", &[shift, lower, upper]) => ActivationSpec::ClippedLinear { shift, lower, upper },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn family(&self) -> &'static str {
        match self {
            ActivationSpec::Relu => "relu",
            ActivationSpec::Sigmoid { .. } => "mod sigmoid",
            ActivationSpec::ClippedLinear { .. } => "mod linear",
        }
    }
}

/// Elementwise application over a tensor.
pub fn activate<T: Element>(x: &Tensor<T>, spec: &ActivationSpec) -> Tensor<T> {
    let mut out = vec![T::zero(); x.numel()];
    spec.apply_slice(x.data(), &mut out);
    Tensor::from_parts(x.shape().clone(), out)
}

impl ActivationSpec {
    /// `out[i] = f(x[i])`, with the family dispatch hoisted out of the loop.
    pub fn apply_slice<T: Element>(&self, x: &[T], out: &mut [T]) {
        assert_eq!(x.len(), out.len());
        match *self {
            ActivationSpec::Relu => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = v.max(T::zero());
                }
            }
            ActivationSpec::Sigmoid { scale, hshift, vshift } => {
                let (a, h, v0) = (T::from_f64(scale), T::from_f64(hshift), T::from_f64(vshift));
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = a * (v - h).sigmoid() + v0;
                }
            }
            ActivationSpec::ClippedLinear { shift, lower, upper } => {
                let (c, lo, hi) = (T::from_f64(shift), T::from_f64(lower), T::from_f64(upper));
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = (v + c).max(lo).min(hi);
                }
            }
        }
    }

    /// Input gradient given the forward output `y` and upstream gradient `g`.
    /// Every family's derivative is a function of its output, so no
    /// transcendental is re-evaluated: the sigmoid family has
    /// `f' = (y - v)(1 - (y - v)/s)`, and the piecewise-linear ones have slope
    /// 1 exactly where `y` lies strictly inside the value range.
    pub fn backward_from_output<T: Element>(&self, y: &[T], g: &[T], out: &mut [T]) {
        assert!(y.len() == g.len() && g.len() == out.len());
        match *self {
            ActivationSpec::Relu => {
                for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
                    *o = if yv > T::zero() { gv } else { T::zero() };
                }
            }
            ActivationSpec::Sigmoid { scale, vshift, .. } => {
                let (inv, v0) = (T::from_f64(1.0 / scale), T::from_f64(vshift));
                for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
                    let u = yv - v0;
                    *o = gv * u * (T::one() - u * inv);
                }
            }
            ActivationSpec::ClippedLinear { lower, upper, .. } => {
                let (lo, hi) = (T::from_f64(lower), T::from_f64(upper));
                for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
                    *o = if yv > lo && yv < hi { gv } else { T::zero() };
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    x.sigmoid()
}

fn is_short_decimal(x: f64) -> bool {
    ((x * 1e6).round() - x * 1e6).abs() < 1e-6 * x.abs().max(1.0)
}

/// Shortest decimal form, rounded to 6 places so `exp(ln 1.5)` prints `1.5`.
fn fmt_num(x: f64) -> String {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        "0".to_string()
    } else {
        format!("{r}")
    }
}

impl fmt::Display for ActivationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ActivationSpec::Relu => write!(f, "ReLU"),
            ActivationSpec::Sigmoid { scale, hshift, vshift } => {
                write!(f, "sigmoid(x")?;
                if hshift != 0.0 {
                    // `- ln k` when k is a short decimal (ln0.5), else `+ ln k` (ln3).
                    let k = hshift.exp();
                    if is_short_decimal(k) {
                        write!(f, " - ln{}", fmt_num(k))?;
                    } else {
                        write!(f, " + ln{}", fmt_num(1.0 / k))?;
                    }
                }
                write!(f, ")")?;
                if scale != 1.0 {
                    write!(f, " * {}", fmt_num(scale))?;
                }
                if vshift > 0.0 {
                    write!(f, " + {}", fmt_num(vshift))?;
                } else if vshift < 0.0 {
                    write!(f, " - {}", fmt_num(-vshift))?;
                }
                Ok(())
            }
            ActivationSpec::ClippedLinear { shift, lower, upper } => {
                let inner = if shift > 0.0 {
                    format!("x+{}", fmt_num(shift))
                } else if shift < 0.0 {
                    format!("x-{}", fmt_num(-shift))
                } else {
                    "x".to_string()
                };
                write!(f, "min(max({}, {inner}), {})", fmt_num(lower), fmt_num(upper))
            }
        }
    }
}

impl FromStr for ActivationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse activation `{s}`"));
        let norm: String = s.replace(['\u{2013}', '\u{2212}'], "-").chars().filter(|c| !c.is_whitespace()).collect();
        if norm.eq_ignore_ascii_case("relu") {
            return Ok(ActivationSpec::Relu);
        }
        if let Some(rest) = norm.strip_prefix("sigmoid(x") {
            let close = rest.find(')').ok_or_else(bad)?;
            let hshift = match &rest[..close] {
                "" => 0.0,
                inner => {
                    let (sign, body) = split_sign(inner).ok_or_else(bad)?;
                    let shift = match body.strip_prefix("ln") {
                        Some(arg) => parse_num(arg).ok_or_else(bad)?.ln(),
                        None => parse_num(body).ok_or_else(bad)?,
                    };
                    // `x - a` shifts right by a; hshift is what gets subtracted.
                    -sign * shift
                }
            };
            let mut tail = &rest[close + 1..];
            let mut scale = 1.0;
            if let Some(t) = tail.strip_prefix('*') {
                let end = t.get(1..).and_then(|r| r.find(['+', '-'])).map(|i| i + 1).unwrap_or(t.len());
                scale = parse_num(&t[..end]).ok_or_else(bad)?;
                tail = &t[end..];
            }
            let vshift = if tail.is_empty() {
                0.0
            } else {
                let (sign, body) = split_sign(tail).ok_or_else(bad)?;
                sign * parse_num(body).ok_or_else(bad)?
            };
            let spec = ActivationSpec::Sigmoid { scale, hshift, vshift };
            spec.validate()?;
            return Ok(spec);
        }
        if let Some(rest) = norm.strip_prefix("min(max(") {
            let (lower, rest) = rest.split_once(",x").ok_or_else(bad)?;
            let (shift, upper) = rest.split_once("),").ok_or_else(bad)?;
            let upper = upper.strip_suffix(')').ok_or_else(bad)?;
            let shift = if shift.is_empty() {
                0.0
            } else {
                let (sign, body) = split_sign(shift).ok_or_else(bad)?;
                sign * parse_num(body).ok_or_else(bad)?
            };
            return ActivationSpec::clipped_linear(
                shift,
                parse_num(lower).ok_or_else(bad)?,
                parse_num(upper).ok_or_else(bad)?,
            );
        }
        Err(bad())
    }
}

fn split_sign(s: &str) -> Option<(f64, &str)> {
    if let Some(b) = s.strip_prefix('+') {
        Some((1.0, b))
    } else {
        s.strip_prefix('-').map(|b| (-1.0, b))
    }
}

fn parse_num(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotient_activation_passes_through_one() {
        let spec = ActivationSpec::quotient(1.8).unwrap();
        assert!((spec.apply(0.0f64) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quotient_activation_rejects_small_alpha() {
        assert!(ActivationSpec::quotient(1.0).is_err());
        assert!(ActivationSpec::quotient(0.5).is_err());
        assert!(ActivationSpec::quotient(f64::NAN).is_err());
    }

    #[test]
    fn alpha_two_at_one() {
        // 2 * sigmoid(1) = 2 / (1 + e^-1)
        let spec = ActivationSpec::quotient(2.0).unwrap();
        assert!((spec.apply(1.0f64) - 1.462117).abs() < 1e-5);
    }

    #[test]
    fn clipped_linear_table_values() {
        let spec: ActivationSpec = "min(max(0, x+1), 4)".parse().unwrap();
        assert_eq!(spec.apply(-2.0f64), 0.0);
        assert_eq!(spec.apply(0.0f64), 1.0);
        assert_eq!(spec.apply(5.0f64), 4.0);
    }

    #[test]
    fn clipped_linear_requires_ordered_bounds() {
        assert!(ActivationSpec::clipped_linear(1.0, 4.0, 4.0).is_err());
        assert!("min(max(5, x+1), 4)".parse::<ActivationSpec>().is_err());
    }

    #[test]
    fn display_round_trips_table_strings() {
        for s in [
            "ReLU",
            "sigmoid(x - ln3) * 4",
            "sigmoid(x - ln1.5) * 2.5",
            "sigmoid(x) * 2",
            "sigmoid(x - ln0.5) * 1.5",
            "sigmoid(x + ln3) * 2 - 0.5",
            "sigmoid(x + ln9) * 2 - 0.8",
            "min(max(0, x+1), 8)",
            "min(max(-0.5, x+1), 3.5)",
            "min(max(0, x+0.5), 4)",
        ] {
            let spec: ActivationSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
    }

    #[test]
    fn encode_is_lossless() {
        for spec in [
            ActivationSpec::Relu,
            ActivationSpec::quotient(1.2345678901).unwrap(),
            ActivationSpec::clipped_linear(1.0, -0.5, 3.5).unwrap(),
        ] {
            assert_eq!(ActivationSpec::decode(&spec.encode()).unwrap(), spec);
        }
        assert!(ActivationSpec::decode("sigmoid 1").is_err());
    }

    #[test]
    fn en_dash_is_accepted() {
        let a: ActivationSpec = "sigmoid(x \u{2013} ln3) * 2".parse().unwrap();
        let b: ActivationSpec = "sigmoid(x - ln3) * 2".parse().unwrap();
        assert_eq!(a, b);
        assert!((a.passing_value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quotient_constructor_matches_printed_form() {
        assert_eq!(ActivationSpec::quotient(4.0).unwrap().to_string(), "sigmoid(x - ln3) * 4");
        assert_eq!(ActivationSpec::quotient(2.0).unwrap().to_string(), "sigmoid(x) * 2");
        assert_eq!(ActivationSpec::quotient(1.5).unwrap().to_string(), "sigmoid(x - ln0.5) * 1.5");
    }

    #[test]
    fn kinks_of_clipped_linear() {
        let spec: ActivationSpec = "min(max(0, x+1), 4)".parse().unwrap();
        assert_eq!(spec.kinks(), vec![-1.0, 3.0]);
        for k in spec.kinks() {
            let h = 1e-6;
            let left = (spec.apply(k) - spec.apply(k - h)) / h;
            let right = (spec.apply(k + h) - spec.apply(k)) / h;
            assert!((left - right).abs() > 0.5, "no kink at {k}");
        }
        assert!(!spec.is_globally_differentiable());
        assert!(ActivationSpec::quotient(1.7).unwrap().is_globally_differentiable());
    }

    #[test]
    fn range_rendering() {
        assert_eq!(ActivationSpec::Relu.value_range().to_string(), "[0, +inf)");
        assert_eq!(ActivationSpec::quotient(4.0).unwrap().value_range().to_string(), "(0, 4)");
        let s: ActivationSpec = "min(max(-1, x+1), 3)".parse().unwrap();
        assert_eq!(s.value_range().to_string(), "[-1, 3]");
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!(sigmoid(-1000.0f32).is_finite());
    }
}

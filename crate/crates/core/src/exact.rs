//! Exact rational arithmetic helpers.
//!
//! Measurements ingested from tables carry at most a handful of decimals, so
//! they are parsed into [`Exact`] values without going through binary floating
//! point. Rounding happens only when a value is formatted for display.

use std::fmt;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::de::{self, Deserializer, Visitor};
use serde::Serializer;

/// Arbitrary-precision rational used for every ratio and measurement.
pub type Exact = BigRational;

pub fn int(v: i64) -> Exact {
    Exact::from_integer(BigInt::from(v))
}

pub fn from_u64(v: u64) -> Exact {
    Exact::from_integer(BigInt::from(v))
}

/// `num / den` as an exact value. Panics on a zero denominator.
pub fn ratio(num: i64, den: i64) -> Exact {
    Exact::new(BigInt::from(num), BigInt::from(den))
}

/// Parses a plain decimal literal such as `"85.90"`, `"-3"`, `"1e-2"` or a
/// fraction `"7/3"` (either side may be a decimal) into an exact rational.
pub fn parse_decimal(text: &str) -> Option<Exact> {
    let text = text.trim();
    if text.is_empty() {
        return None;
    }
    if let Some((n, d)) = text.split_once('/') {
        if n.contains('/') || d.contains('/') {
            return None;
        }
        let n = parse_decimal(n)?;
        let d = parse_decimal(d)?;
        if d.is_zero() {
            return None;
        }
        return Some(n / d);
    }
    let (mantissa, exponent) = match text.find(['e', 'E']) {
        Some(idx) => (&text[..idx], text[idx + 1..].parse::<i32>().ok()?),
        None => (text, 0),
    };
    if exponent.abs() > 1000 {
        return None;
    }
    let (negative, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (whole, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if whole.is_empty() && frac.is_empty() {
        return None;
    }
    if !whole.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let all_digits = format!("{whole}{frac}");
    let mut value = Exact::from_integer(all_digits.parse::<BigInt>().ok()?);
    let scale = exponent - frac.len() as i32;
    let ten = BigInt::from(10);
    if scale >= 0 {
        value *= Exact::from_integer(num_traits::pow(ten, scale as usize));
    } else {
        value /= Exact::from_integer(num_traits::pow(ten, (-scale) as usize));
    }
    Some(if negative { -value } else { value })
}

/// Formats with `places` decimals, rounding half away from zero.
pub fn format_fixed(value: &Exact, places: usize) -> String {
    let scale = num_traits::pow(BigInt::from(10), places);
    let scaled = value.abs() * Exact::from_integer(scale.clone());
    let (q, r) = scaled.numer().div_rem(scaled.denom());
    // half-up: compare 2r with the denominator
    let rounded = if r * 2 >= *scaled.denom() { q + 1 } else { q };
    let (int_part, frac_part) = rounded.div_rem(&scale);
    let sign = if value.is_negative() && !rounded_is_zero(&int_part, &frac_part) { "-" } else { "" };
    if places == 0 {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{:0>width$}", frac_part.to_string(), width = places)
    }
}

fn rounded_is_zero(a: &BigInt, b: &BigInt) -> bool {
    a.is_zero() && b.is_zero()
}

/// Rounds half away from zero to `places` decimals, returning the rounded exact value.
pub fn round_to(value: &Exact, places: usize) -> Exact {
    parse_decimal(&format_fixed(value, places)).expect("format_fixed emits a decimal literal")
}

pub fn to_f64(value: &Exact) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}

/// Canonical text form: a terminating decimal when one exists, `p/q` otherwise.
pub fn to_text(value: &Exact) -> String {
    let mut den = value.denom().clone();
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    let mut twos = 0usize;
    let mut fives = 0usize;
    while (&den % &two).is_zero() {
        den /= &two;
        twos += 1;
    }
    while (&den % &five).is_zero() {
        den /= &five;
        fives += 1;
    }
    if den.is_one() {
        return format_fixed(value, twos.max(fives));
    }
    format!("{}/{}", value.numer(), value.denom())
}

pub fn is_positive(value: &Exact) -> bool {
    value.is_positive()
}

/// Serde adapter: accepts a JSON number or a decimal/fraction string, emits a
/// string in [`to_text`] form.
pub mod serde_exact {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Exact, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_text(value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Exact, D::Error> {
        d.deserialize_any(ExactVisitor)
    }

    pub(crate) struct ExactVisitor;

    impl<'de> Visitor<'de> for ExactVisitor {
        type Value = Exact;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a decimal number or a decimal/fraction string")
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<Exact, E> {
            Ok(int(v))
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<Exact, E> {
            Ok(from_u64(v))
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<Exact, E> {
            if !v.is_finite() {
                return Err(E::custom("non-finite number"));
            }
            // shortest round-trip repr recovers the literal the file contained
            parse_decimal(&format!("{v:?}")).ok_or_else(|| E::custom("unparseable number"))
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<Exact, E> {
            parse_decimal(v).ok_or_else(|| E::custom(format!("invalid decimal '{v}'")))
        }
    }
}

/// Same as [`serde_exact`] for optional fields.
pub mod serde_exact_opt {
    use super::*;
    use serde::Deserialize;

    pub fn serialize<S: Serializer>(value: &Option<Exact>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => s.serialize_some(&to_text(v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Exact>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::serde_exact")] Exact);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

pub fn zero() -> Exact {
    Exact::zero()
}

pub fn one() -> Exact {
    Exact::one()
}

//! Floating-point abstraction shared by the model, trainer, attacks and metrics.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the numerical core is generic over (`f32` or `f64`).
pub trait Scalar:
    NdFloat + FromPrimitive + ToPrimitive + FromStr + Default + Debug + Display + Send + Sync + 'static
{
    /// Tag written into model files so readers can reject a mismatched width.
    const NAME: &'static str;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Formats a value with 17 significant digits, which round-trips any `f64`.
pub fn fmt_exact<F: Scalar>(v: F) -> String {
    let v = v.f64();
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Parses the output of [`fmt_exact`].
pub fn parse_exact<F: Scalar>(s: &str) -> Option<F> {
    let v: f64 = match s.trim() {
        "inf" => f64::INFINITY,
        "-inf" => f64::NEG_INFINITY,
        "nan" => f64::NAN,
        other => other.parse().ok()?,
    };
    F::from_f64(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn exact_format_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let back: f64 = parse_exact(&fmt_exact(v)).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }

        #[test]
        fn exact_format_round_trips_f32(v in any::<f32>().prop_filter("finite", |v| v.is_finite())) {
            let back: f32 = parse_exact(&fmt_exact(v)).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_exact(0.1f64), "1.0000000000000001e-1");
        assert_eq!(fmt_exact(f64::INFINITY), "inf");
    }
}

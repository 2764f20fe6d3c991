use crate::error::{Result, TslmError};
use crate::timeseries::check_finite;

/// Integer rendering of a series: `values * 10^exponent`, rounded.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSeries {
    pub text: String,
    pub integers: Vec<i64>,
    pub exponent: i32,
}

/// Space-separated digits per value, values joined by `" ,"`; negatives
/// carry a leading `" -"`. `[1866, 449, -762]` gives `"1 8 6 6 ,4 4 9 , -7 6 2"`.
pub fn render_integers(values: &[i64]) -> String {
    let parts: Vec<String> = values
        .iter()
        .map(|&v| {
            let digits: Vec<String> = v.unsigned_abs().to_string().chars().map(String::from).collect();
            let body = digits.join(" ");
            if v < 0 {
                format!(" -{body}")
            } else {
                body
            }
        })
        .collect();
    parts.join(" ,")
}

/// Inverse of [`render_integers`].
pub fn detokenize(text: &str) -> Result<Vec<i64>> {
    if text.is_empty() {
        return Ok(vec![]);
    }
    text.split(" ,")
        .map(|part| {
            let (neg, body) = match part.strip_prefix(" -") {
                Some(b) => (true, b),
                None => (false, part),
            };
            let digits: String = body.split(' ').collect();
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return Err(TslmError::Parse(format!("bad digit group {part:?}")));
            }
            let v: i64 = digits.parse().map_err(|e| TslmError::Parse(format!("{part:?}: {e}")))?;
            Ok(if neg { -v } else { v })
        })
        .collect()
}

/// Scale so the largest magnitude has four significant digits, round, and
/// render as digit text.
pub fn tokenize_series_as_text(values: &[f64]) -> Result<TokenizedSeries> {
    check_finite(values)?;
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let exponent = if max == 0.0 { 0 } else { 3 - max.log10().floor() as i32 };
    let scale = 10f64.powi(exponent);
    let integers: Vec<i64> = values.iter().map(|v| (v * scale).round() as i64).collect();
    Ok(TokenizedSeries { text: render_integers(&integers), integers, exponent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn digit_rendering() {
        assert_eq!(render_integers(&[1866]), "1 8 6 6");
        assert_eq!(render_integers(&[-762]), " -7 6 2");
        assert_eq!(render_integers(&[1866, 449, 1057, 855, -762, 652]), "1 8 6 6 ,4 4 9 ,1 0 5 7 ,8 5 5 , -7 6 2 ,6 5 2");
        assert_eq!(render_integers(&[-375, -124]), " -3 7 5 , -1 2 4");
        assert_eq!(render_integers(&[0]), "0");
    }

    #[test]
    fn four_significant_digits() {
        let t = tokenize_series_as_text(&[0.1866, -0.0762, 0.0449]).unwrap();
        assert_eq!(t.exponent, 4);
        assert_eq!(t.integers, vec![1866, -762, 449]);
        assert_eq!(tokenize_series_as_text(&[0.0, 0.0]).unwrap().text, "0 ,0");
        assert!(tokenize_series_as_text(&[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(v in prop::collection::vec(-99_999i64..99_999, 0..40)) {
            prop_assert_eq!(detokenize(&render_integers(&v)).unwrap(), v);
        }
    }
}

//! Serde helpers for floats that may be infinite or NaN.

use serde::{Deserialize, Deserializer, Serializer};

/// Serializes non-finite values as the strings `NEG_INF`, `POS_INF` and `NaN`.
pub mod ext_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("POS_INF")
        } else {
            s.serialize_str("NEG_INF")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Tok(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Tok(t) => match t.as_str() {
                "NEG_INF" => Ok(f64::NEG_INFINITY),
                "POS_INF" => Ok(f64::INFINITY),
                "NaN" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("unknown float token {other:?}"))),
            },
        }
    }
}

//! Serde adapter for `f64` fields that may hold infinities. JSON has no
//! literal for them, so non-finite values travel as the strings `"inf"`,
//! `"-inf"` and `"nan"`. Plain numbers are accepted on input as usual.

use serde::{Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Int(i64),
    Text(String),
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Int(v) => Ok(v as f64),
        Repr::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => other
                .parse()
                .map_err(|_| serde::de::Error::custom(format!("expected a number, got '{t}'"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Holder {
        #[serde(with = "super")]
        v: f64,
    }

    #[test]
    fn infinities_roundtrip_through_json() {
        for v in [f64::INFINITY, f64::NEG_INFINITY, 0.25, -3.0] {
            let s = serde_json::to_string(&Holder { v }).unwrap();
            assert_eq!(serde_json::from_str::<Holder>(&s).unwrap(), Holder { v });
        }
        let h: Holder = serde_json::from_str(r#"{"v": 2}"#).unwrap();
        assert_eq!(h.v, 2.0);
        assert!(serde_json::from_str::<Holder>(r#"{"v": "lots"}"#).is_err());
    }
}

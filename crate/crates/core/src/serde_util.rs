//! Serde helpers for scale factors, where `+inf` (exact balance) must survive
//! a JSON round trip. Infinite values are written as the string `"inf"`.

use std::collections::BTreeMap;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Text(String),
}

fn to_repr(v: f64) -> Repr {
    if v.is_infinite() && v > 0.0 {
        Repr::Text("inf".into())
    } else if v.is_infinite() {
        Repr::Text("-inf".into())
    } else {
        Repr::Num(v)
    }
}

fn from_repr<E: de::Error>(r: Repr) -> Result<f64, E> {
    match r {
        Repr::Num(v) => Ok(v),
        Repr::Text(s) => match s.to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "exact" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            other => Err(E::custom(format!("expected a number or \"inf\", got `{other}`"))),
        },
    }
}

pub mod inf_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

pub mod inf_map {
    use super::*;

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let out: BTreeMap<&String, Repr> = m.iter().map(|(k, &v)| (k, to_repr(v))).collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let raw = BTreeMap::<String, Repr>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, r)| from_repr(r).map(|v| (k, v)))
            .collect()
    }
}

pub mod inf_vec {
    use super::*;

    pub fn serialize<T: Scalar, S: Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Repr> = v.iter().map(|x| to_repr(x.to_f64_lossy())).collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, T: Scalar, D: Deserializer<'de>>(d: D) -> Result<Vec<T>, D::Error> {
        let raw = Vec::<Repr>::deserialize(d)?;
        raw.into_iter()
            .map(|r| from_repr(r).map(T::lit))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct S {
        #[serde(with = "inf_vec")]
        v: Vec<f64>,
        #[serde(with = "inf_f64")]
        x: f64,
    }

    #[test]
    fn infinity_survives_json() {
        let s = S {
            v: vec![f64::INFINITY, 0.5],
            x: f64::INFINITY,
        };
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(text, r#"{"v":["inf",0.5],"x":"inf"}"#);
        assert_eq!(serde_json::from_str::<S>(&text).unwrap(), s);
        assert!(serde_json::from_str::<S>(r#"{"v":["big"],"x":1}"#).is_err());
    }
}

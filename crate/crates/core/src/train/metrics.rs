use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    /// dB; `+inf` when `mse` is zero (written as the string `"inf"` in JSON).
    #[serde(with = "sentinel")]
    pub psnr: f64,
}

/// Mean squared error and `20·log10(max(pred) / √mse)`.
pub fn compute_metrics(predictions: &[f64], targets: &[f64]) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::validation("compute_metrics: empty input"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::validation(format!(
            "compute_metrics: {} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    let peak = predictions.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Metrics { mse, psnr: psnr(mse, peak) })
}

pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else if peak <= 0.0 {
        f64::NEG_INFINITY
    } else {
        20.0 * (peak / mse.sqrt()).log10()
    }
}

/// Median of a non-empty set (mean of the middle pair for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub(crate) mod sentinel {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float sentinel {other:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed() {
        let m = compute_metrics(&[0.5, 1.0], &[0.4, 0.8]).unwrap();
        assert!((m.mse - 0.025).abs() < 1e-15);
        assert!((m.psnr - 20.0 * (1.0 / 0.025f64.sqrt()).log10()).abs() < 1e-12);
    }

    #[test]
    fn identical_is_infinite() {
        let m = compute_metrics(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.psnr, f64::INFINITY);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"mse":0.0,"psnr":"inf"}"#);
        assert_eq!(serde_json::from_str::<Metrics>(&json).unwrap(), m);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

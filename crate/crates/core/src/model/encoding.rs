//! Constant (weight-free) feature lifts: sinusoidal direction encoding and SH
//! design matrices.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::sh::{sh_count, sh_eval_into};
use crate::tensor::Tensor;

/// `sin(2^k π c), cos(2^k π c)` for each component `c` and `k < frequencies`,
/// laid out component-major: 6·frequencies values.
pub fn positional_features(dir: &Vec3, frequencies: usize) -> Result<Vec<f64>> {
    let norm = dir.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::validation("cannot encode a zero direction"));
    }
    let mut out = Vec::with_capacity(6 * frequencies);
    push_features(&(dir / norm), frequencies, &mut out);
    Ok(out)
}

fn push_features(unit: &Vec3, frequencies: usize, out: &mut Vec<f64>) {
    for c in unit.iter() {
        let mut w = PI;
        for _ in 0..frequencies {
            out.push((w * c).sin());
            out.push((w * c).cos());
            w *= 2.0;
        }
    }
}

/// Stacked positional features of unit directions, `[len, 6·frequencies]`.
pub(crate) fn positional_matrix(dirs: &[Vec3], frequencies: usize) -> Tensor {
    let mut data = Vec::with_capacity(dirs.len() * 6 * frequencies);
    for d in dirs {
        push_features(d, frequencies, &mut data);
    }
    Tensor::matrix(dirs.len(), 6 * frequencies, data).expect("consistent size")
}

/// SH values of unit directions, `[len, (degree+1)^2]`.
pub(crate) fn sh_matrix(dirs: &[Vec3], degree: usize) -> Result<Tensor> {
    let n = sh_count(degree);
    let mut data = vec![0.0; dirs.len() * n];
    for (d, row) in dirs.iter().zip(data.chunks_mut(n)) {
        sh_eval_into(d, degree, row)?;
    }
    Tensor::matrix(dirs.len(), n, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frequency_layout() {
        let f = positional_features(&Vec3::new(0.0, 0.0, 1.0), 1).unwrap();
        assert_eq!(f[..2], [0.0, 1.0]);
        assert_eq!(f.len(), 6);
        assert!(positional_features(&Vec3::zeros(), 2).is_err());
    }
}

//! Real orthonormal spherical harmonics.
//!
//! Ordering is `(l, m) = (0,0), (1,-1), (1,0), (1,1), (2,-2), …`, no
//! Condon–Shortley phase, `m > 0` ↔ `cos(mφ)`, `m < 0` ↔ `sin(|m|φ)`. The
//! `sin^|m| θ` factor of `P_l^|m|` is carried by `Re/Im (x + iy)^|m|`, so
//! the poles need no special casing.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Stored in checkpoints so a reader can tell which basis produced them.
pub const SH_CONVENTION: &str = "real-orthonormal;no-condon-shortley;order=(l,m) m=-l..l;m>0:cos,m<0:sin";

pub const MAX_DEGREE: usize = 8;

/// `(L + 1)^2`.
pub fn sh_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Flat index of `(l, m)`.
pub fn sh_index(l: usize, m: isize) -> usize {
    ((l * l + l) as isize + m) as usize
}

/// Evaluates all `(L+1)^2` basis functions at `dir`, which is renormalized
/// if it is not unit length.
pub fn sh_eval(dir: &Vec3, degree: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; sh_count(degree)];
    sh_eval_into(dir, degree, &mut out)?;
    Ok(out)
}

pub fn sh_eval_into(dir: &Vec3, degree: usize, out: &mut [f64]) -> Result<()> {
    if degree > MAX_DEGREE {
        return Err(Error::validation(format!("SH degree {degree} exceeds {MAX_DEGREE}")));
    }
    if out.len() != sh_count(degree) {
        return Err(Error::validation(format!(
            "SH output buffer of {} for degree {degree}",
            out.len()
        )));
    }
    let norm = dir.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::validation("SH direction must be a non-zero finite vector"));
    }
    let d = if (norm - 1.0).abs() > 1e-9 { dir / norm } else { *dir };
    let (x, y, z) = (d.x, d.y, d.z);

    // p[l][m]: associated Legendre polynomial with the sin^m factor removed
    let n = degree + 1;
    let mut p = [[0.0f64; MAX_DEGREE + 1]; MAX_DEGREE + 1];
    let mut pmm = 1.0;
    for m in 0..n {
        if m > 0 {
            pmm *= (2 * m - 1) as f64;
        }
        p[m][m] = pmm;
        if m + 1 < n {
            p[m + 1][m] = z * (2 * m + 1) as f64 * pmm;
        }
        for l in m + 2..n {
            p[l][m] = ((2 * l - 1) as f64 * z * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }

    // (x + iy)^m
    let mut re = [0.0f64; MAX_DEGREE + 1];
    let mut im = [0.0f64; MAX_DEGREE + 1];
    re[0] = 1.0;
    for m in 1..n {
        re[m] = re[m - 1] * x - im[m - 1] * y;
        im[m] = re[m - 1] * y + im[m - 1] * x;
    }

    for l in 0..n {
        let base = (2 * l + 1) as f64 / (4.0 * PI);
        out[sh_index(l, 0)] = base.sqrt() * p[l][0];
        // (l-m)!/(l+m)! built incrementally
        let mut ratio = 1.0;
        for m in 1..=l {
            ratio /= ((l + m) * (l - m + 1)) as f64;
            let k = (2.0 * base * ratio).sqrt() * p[l][m];
            out[sh_index(l, m as isize)] = k * re[m];
            out[sh_index(l, -(m as isize))] = k * im[m];
        }
    }
    Ok(())
}

/// `coeffs · sh_eval(dir)`; the degree follows from the coefficient count.
pub fn sh_project(coeffs: &[f64], dir: &Vec3) -> Result<f64> {
    let degree = (coeffs.len() as f64).sqrt().round() as usize;
    if degree == 0 || sh_count(degree - 1) != coeffs.len() {
        return Err(Error::validation(format!(
            "{} SH coefficients is not a square count",
            coeffs.len()
        )));
    }
    let basis = sh_eval(dir, degree - 1)?;
    Ok(coeffs.iter().zip(&basis).map(|(c, b)| c * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_pole_values() {
        for d in [Vec3::x(), Vec3::new(0.3, -0.2, 0.9), -Vec3::z()] {
            let y = sh_eval(&d, 3).unwrap();
            assert!((y[0] - 0.5 / PI.sqrt()).abs() < 1e-15);
        }
        let y = sh_eval(&Vec3::z(), 3).unwrap();
        assert!((y[sh_index(1, 0)] - (3.0 / (4.0 * PI)).sqrt()).abs() < 1e-15);
        assert!((y[sh_index(1, 0)] - 0.4886025).abs() < 1e-7);
    }

    #[test]
    fn poles_zero_for_nonzero_m() {
        for d in [Vec3::z(), -Vec3::z()] {
            let y = sh_eval(&d, 4).unwrap();
            for l in 0..=4usize {
                for m in -(l as isize)..=(l as isize) {
                    let v = y[sh_index(l, m)];
                    assert!(v.is_finite());
                    if m != 0 {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn degree_two_closed_forms() {
        let d = Vec3::new(0.48, -0.6, 0.64);
        let (x, y, z) = (d.x, d.y, d.z);
        let c = 0.25 * (15.0 / PI).sqrt();
        let expected = [
            2.0 * c * x * y,
            2.0 * c * y * z,
            0.25 * (5.0 / PI).sqrt() * (3.0 * z * z - 1.0),
            2.0 * c * x * z,
            c * (x * x - y * y),
        ];
        let got = sh_eval(&d, 2).unwrap();
        for (g, e) in got[4..9].iter().zip(expected) {
            assert!((g - e).abs() < 1e-14, "{g} vs {e}");
        }
    }

    #[test]
    fn project_checks() {
        let mut c = vec![0.0; 16];
        c[0] = 2.0 * PI.sqrt();
        assert!((sh_project(&c, &Vec3::new(1.0, 2.0, 3.0)).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(sh_project(&[0.0; 16], &Vec3::x()).unwrap(), 0.0);
        assert!(sh_project(&[0.0; 15], &Vec3::x()).is_err());
        assert!(sh_eval(&Vec3::zeros(), 3).is_err());
    }

    #[test]
    fn renormalizes_input() {
        let a = sh_eval(&Vec3::new(0.0, 3.0, 4.0), 3).unwrap();
        let b = sh_eval(&Vec3::new(0.0, 0.6, 0.8), 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

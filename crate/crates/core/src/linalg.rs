//! Small dense linear-algebra helpers shared by the task classifier, the
//! rank monitor and the Jacobian baselines.

use crate::{Matrix, Vector};

/// How singular values are compared against a rank tolerance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankConvention {
    /// Count singular values strictly larger than `tol`.
    Absolute,
    /// Count singular values strictly larger than `tol * σ_max`.
    Relative,
}

/// Singular values in decreasing order. Empty matrices have none.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn numerical_rank(m: &Matrix, tol: f64, convention: RankConvention) -> usize {
    let s = singular_values(m);
    let threshold = match convention {
        RankConvention::Absolute => tol,
        RankConvention::Relative => tol * s.first().copied().unwrap_or(0.0),
    };
    s.iter().filter(|&&v| v > threshold).count()
}

/// Moore-Penrose pseudoinverse, discarding singular values below
/// `rel_cutoff * σ_max`.
pub fn pseudo_inverse(m: &Matrix, rel_cutoff: f64) -> Matrix {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Matrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s_max = svd.singular_values.max();
    let mut out = Matrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > rel_cutoff * s_max && s > 0.0 {
            out += v_t.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

/// Stack row vectors (or matrices) vertically.
pub fn vstack(blocks: &[Matrix]) -> Matrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), cols);
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

pub fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn mat_inf_norm(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

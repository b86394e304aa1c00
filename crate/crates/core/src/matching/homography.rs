//! Planar homography estimation by normalized DLT.

use nalgebra::{DMatrix, Matrix3, Vector3};

/// 3×3 projective map, scaled so `H[2][2] = 1` when that entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    /// Rescales so the bottom-right entry is 1; `None` if the matrix is not
    /// invertible.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let m = if m[(2, 2)].abs() > 1e-12 { m / m[(2, 2)] } else { m };
        let norm = m.norm();
        if norm == 0.0 || (m / norm).determinant().abs() <= 1e-12 {
            return None;
        }
        Some(Homography(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Option<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn to_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn inverse(&self) -> Option<Self> {
        self.0.try_inverse().and_then(Self::from_matrix)
    }

    /// Maps a point; `None` when it lands at infinity.
    pub fn project(&self, p: (f64, f64)) -> Option<(f64, f64)> {
        let v = self.0 * Vector3::new(p.0, p.1, 1.0);
        if v.z.abs() < 1e-12 {
            return None;
        }
        Some((v.x / v.z, v.y / v.z))
    }

    /// `‖H·p − q‖`, infinite for points mapped to infinity.
    pub fn reprojection_error(&self, p: (f64, f64), q: (f64, f64)) -> f64 {
        match self.project(p) {
            Some((x, y)) => ((x - q.0).powi(2) + (y - q.1).powi(2)).sqrt(),
            None => f64::INFINITY,
        }
    }

    pub fn compose(&self, other: &Homography) -> Option<Homography> {
        Self::from_matrix(self.0 * other.0)
    }
}

/// Similarity transform taking the centroid to the origin and the mean
/// distance to √2.
fn normalizer(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let mean_dist = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply(m: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = m * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Least-squares homography mapping `src[i]` to `dst[i]` (at least four
/// pairs), via the null vector of the normalized DLT system.
pub fn fit_homography(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Homography> {
    assert_eq!(src.len(), dst.len());
    let n = src.len();
    if n < 4 {
        return None;
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let (x, y) = apply(&ts, src[i]);
        let (u, v) = apply(&td, dst[i]);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse()?;
    Homography::from_matrix(td_inv * hn * ts)
}

/// Twice the signed area of the triangle `abc`.
fn cross(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// True when any three of the four points are (nearly) collinear.
pub fn is_degenerate_sample(pts: &[(f64, f64); 4]) -> bool {
    let scale = pts
        .iter()
        .flat_map(|a| pts.iter().map(move |b| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)))
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return true;
    }
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| cross(pts[t[0]], pts[t[1]], pts[t[2]]).abs() <= 1e-9 * scale)
}

//! Beer–Lambert optical density and colour deconvolution.
//!
//! The hematoxylin concentration channel, min-max scaled per image, is the
//! regression target of the hematoxylin pretext task.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Image;

/// Intensities below this are clamped before taking the logarithm.
pub const OD_FLOOR: f64 = 1.0 / 255.0;

const SINGULAR_DET: f64 = 1e-12;

/// Rows are unit stain vectors in optical-density RGB space:
/// hematoxylin, eosin, residual. Pixels satisfy `od = c · M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
}

impl Default for StainMatrix {
    /// Standard H&E vectors; the third row is the normalised cross product.
    fn default() -> Self {
        Self::from_he([0.650, 0.704, 0.286], [0.072, 0.990, 0.105]).expect("standard H&E vectors are independent")
    }
}

impl StainMatrix {
    /// Builds a matrix from hematoxylin and eosin vectors, completing it with
    /// their normalised cross product.
    pub fn from_he(h: [f64; 3], e: [f64; 3]) -> Result<Self> {
        let h = unit(h)?;
        let e = unit(e)?;
        let r = unit(cross(h, e))?;
        Self::from_rows([h, e, r])
    }

    /// Rows are normalised; fails when any row is zero or the matrix is
    /// singular.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        let m = StainMatrix { rows: [unit(rows[0])?, unit(rows[1])?, unit(rows[2])?] };
        let det = m.determinant();
        if det.abs() < SINGULAR_DET {
            return Err(Error::SingularMatrix { det });
        }
        Ok(m)
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        self.rows
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.rows[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.rows[1]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.rows;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<[[f64; 3]; 3]> {
        let det = self.determinant();
        if det.abs() < SINGULAR_DET || !det.is_finite() {
            return Err(Error::SingularMatrix { det });
        }
        let m = &self.rows;
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                // cofactor of (j, i), transposed
                let (a0, a1) = others(j);
                let (b0, b1) = others(i);
                let minor = m[a0][b0] * m[a1][b1] - m[a0][b1] * m[a1][b0];
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                *v = sign * minor / det;
            }
        }
        Ok(inv)
    }

    /// Condition number in the 1-norm, `‖M‖₁ ‖M⁻¹‖₁`.
    pub fn condition_number(&self) -> Result<f64> {
        let inv = self.inverse()?;
        Ok(norm1(&self.rows) * norm1(&inv))
    }

    /// Reads nine whitespace-separated numbers, row-major.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Path { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let vals = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::param(format!("stain matrix entry {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 9 {
            return Err(Error::param(format!("stain matrix needs 9 values, found {}", vals.len())));
        }
        Self::from_rows([
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            [vals[6], vals[7], vals[8]],
        ])
    }

    pub fn to_text(&self) -> String {
        self.rows
            .iter()
            .map(|r| format!("{} {} {}", r[0], r[1], r[2]))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

fn others(i: usize) -> (usize, usize) {
    match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn norm1(m: &[[f64; 3]; 3]) -> f64 {
    (0..3).map(|j| (0..3).map(|i| m[i][j].abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn unit(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::param("stain vector must be nonzero and finite"));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Per-pixel stain concentrations, channel order H, E, residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    pub concentrations: Array3<f64>,
    pub stain_matrix: StainMatrix,
    /// Number of channel values clipped from negative to zero.
    pub clipped: usize,
}

impl ConcentrationMap {
    pub fn hematoxylin(&self) -> Array2<f64> {
        self.concentrations.index_axis(Axis(2), 0).to_owned()
    }
}

/// `od = -log10(max(I, 1/255))`, elementwise.
pub fn rgb_to_od(image: ArrayView3<f64>) -> Array3<f64> {
    image.mapv(|i| -(i.max(OD_FLOOR)).log10())
}

/// Inverse of [`rgb_to_od`] for a single optical-density value.
pub fn od_to_intensity(od: f64) -> f64 {
    10f64.powf(-od)
}

/// Unclipped concentrations `od · M⁻¹`.
pub fn unmix(od: ArrayView3<f64>, stains: &StainMatrix) -> Result<Array3<f64>> {
    let inv = stains.inverse()?;
    let (h, w, _) = od.dim();
    let mut out = Array3::zeros((h, w, 3));
    Zip::from(out.lanes_mut(Axis(2))).and(od.lanes(Axis(2))).for_each(|mut c, o| {
        for j in 0..3 {
            c[j] = o[0] * inv[0][j] + o[1] * inv[1][j] + o[2] * inv[2][j];
        }
    });
    Ok(out)
}

/// Concentrations with negatives clipped to zero.
pub fn deconvolve(od: ArrayView3<f64>, stains: &StainMatrix) -> Result<ConcentrationMap> {
    let mut c = unmix(od, stains)?;
    let mut clipped = 0;
    c.mapv_inplace(|v| {
        if v < 0.0 {
            clipped += 1;
            0.0
        } else {
            v
        }
    });
    Ok(ConcentrationMap { concentrations: c, stain_matrix: *stains, clipped })
}

/// Re-mixes concentrations into optical density, `c · M`.
pub fn remix(conc: ArrayView3<f64>, stains: &StainMatrix) -> Array3<f64> {
    let m = stains.rows();
    let (h, w, _) = conc.dim();
    let mut out = Array3::zeros((h, w, 3));
    Zip::from(out.lanes_mut(Axis(2))).and(conc.lanes(Axis(2))).for_each(|mut o, c| {
        for j in 0..3 {
            o[j] = c[0] * m[0][j] + c[1] * m[1][j] + c[2] * m[2][j];
        }
    });
    out
}

/// Min-max scales a map to [0, 1]; constant maps become all zeros.
pub fn minmax_scale(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-12) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Hematoxylin concentration of `image` under `stains`, min-max scaled per
/// image.
pub fn hematoxylin_target_with(image: &Image, stains: &StainMatrix) -> Array2<f64> {
    let od = rgb_to_od(image.view());
    let conc = deconvolve(od.view(), stains).expect("StainMatrix is invertible by construction");
    minmax_scale(&conc.hematoxylin())
}

/// [`hematoxylin_target_with`] using the default H&E matrix.
pub fn hematoxylin_target(image: &Image) -> Array2<f64> {
    hematoxylin_target_with(image, &StainMatrix::default())
}

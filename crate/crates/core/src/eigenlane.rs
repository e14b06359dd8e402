//! Eigenlane curve basis: lanes as coefficient vectors over the leading left
//! singular vectors of the training-lane matrix.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// Horizontal lane coordinates at the fixed sample rows of a [`crate::geometry::LaneGeometry`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneCurve {
    pub xs: Vec<f64>,
    /// First and last sample rows that carry observed (in-image) values.
    pub valid: (usize, usize),
}

impl LaneCurve {
    pub fn new(xs: Vec<f64>, valid: (usize, usize)) -> Result<Self> {
        if xs.len() < 2 || valid.0 > valid.1 || valid.1 >= xs.len() {
            return Err(Error::Input(format!(
                "lane with {} rows cannot have valid range {valid:?}",
                xs.len()
            )));
        }
        if xs[valid.0..=valid.1].iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite lane coordinate".into()));
        }
        Ok(LaneCurve { xs, valid })
    }

    /// A lane observed on every row.
    pub fn full(xs: Vec<f64>) -> Self {
        let last = xs.len() - 1;
        LaneCurve { xs, valid: (0, last) }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.valid.1 - self.valid.0 + 1
    }

    /// Copy with rows outside the valid range replaced by linear
    /// extrapolation of the nearest two valid rows (constant if only one).
    pub fn completed(&self) -> Vec<f64> {
        let (a, b) = self.valid;
        let mut xs = self.xs.clone();
        if a == b {
            xs.iter_mut().for_each(|x| *x = self.xs[a]);
            return xs;
        }
        let head = self.xs[a + 1] - self.xs[a];
        for i in 0..a {
            xs[i] = self.xs[a] - head * (a - i) as f64;
        }
        let tail = self.xs[b] - self.xs[b - 1];
        for i in b + 1..xs.len() {
            xs[i] = self.xs[b] + tail * (i - b) as f64;
        }
        xs
    }
}

pub const SIGN_CONVENTION: &str = "largest-magnitude-entry-positive";

/// `N × M` matrix with orthonormal columns (the eigenlanes).
#[derive(Clone, Debug, PartialEq)]
pub struct EigenlaneBasis {
    n: usize,
    m: usize,
    /// Row-major `N × M`.
    u: Vec<f64>,
    singular_values: Vec<f64>,
}

impl EigenlaneBasis {
    pub fn from_columns(n: usize, m: usize, u: Vec<f64>, singular_values: Vec<f64>) -> Result<Self> {
        if u.len() != n * m || m > n || m == 0 {
            return Err(Error::Config(format!("basis {n}x{m} with {} entries", u.len())));
        }
        Ok(EigenlaneBasis {
            n,
            m,
            u,
            singular_values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Entry `(row, col)` of `U`.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.u[row * self.m + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.at(r, col)).collect()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// `Uᵀ` as an `[M, N]` tensor, for batched reconstruction `C · Uᵀ`.
    pub fn transposed_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.m, self.n], |i| self.at(i % self.n, i / self.n))
    }

    /// `c = Uᵀ r`.
    pub fn project_xs(&self, xs: &[f64]) -> Result<Vec<f64>> {
        if xs.len() != self.n {
            return Err(Error::dim("project", format!("lane has {} rows, basis {}", xs.len(), self.n)));
        }
        Ok((0..self.m)
            .map(|j| (0..self.n).map(|i| self.at(i, j) * xs[i]).sum())
            .collect())
    }

    /// Coefficients of a lane after completing rows outside its valid range.
    pub fn project(&self, lane: &LaneCurve) -> Result<Vec<f64>> {
        self.project_xs(&lane.completed())
    }

    /// `r = U c`.
    pub fn reconstruct(&self, coeff: &[f64]) -> Result<LaneCurve> {
        if coeff.len() != self.m {
            return Err(Error::dim("reconstruct", format!("{} coefficients, basis {}", coeff.len(), self.m)));
        }
        let xs = (0..self.n)
            .map(|i| (0..self.m).map(|j| self.at(i, j) * coeff[j]).sum())
            .collect();
        Ok(LaneCurve::full(xs))
    }

    /// Largest deviation of `UᵀU` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.m {
            for b in 0..self.m {
                let dot: f64 = (0..self.n).map(|i| self.at(i, a) * self.at(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    pub fn save(&self, json_path: &Path, blob_path: &Path) -> Result<()> {
        let u = Tensor::new(&[self.n, self.m], self.u.clone())?;
        let sha = io::write_tensors(blob_path, &[&u])?;
        let header = BasisHeader {
            format: BASIS_FORMAT.into(),
            version: 1,
            n: self.n,
            m: self.m,
            sign_convention: SIGN_CONVENTION.into(),
            mean: vec![0.0; self.n],
            singular_values: self.singular_values.clone(),
            blob: blob_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_sha256: sha,
        };
        io::write_json(json_path, &header)
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let header: BasisHeader = io::read_json(json_path)?;
        if header.format != BASIS_FORMAT || header.sign_convention != SIGN_CONVENTION {
            return Err(Error::Incompatible(format!("{} is not an eigenlane basis", json_path.display())));
        }
        let dir = json_path.parent().unwrap_or(Path::new("."));
        let tensors = io::read_tensors(&dir.join(&header.blob), Some(&header.blob_sha256))?;
        let u = tensors
            .into_iter()
            .next()
            .ok_or_else(|| Error::Format("empty basis blob".into()))?;
        if u.shape() != [header.n, header.m] {
            return Err(Error::Format(format!("basis blob has shape {:?}", u.shape())));
        }
        Self::from_columns(header.n, header.m, u.into_data(), header.singular_values)
    }
}

const BASIS_FORMAT: &str = "omr-eigenlane-basis";

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    format: String,
    version: u32,
    n: usize,
    m: usize,
    sign_convention: String,
    /// Always zero: lanes are not mean-centered before the decomposition.
    mean: Vec<f64>,
    singular_values: Vec<f64>,
    blob: String,
    blob_sha256: String,
}

/// Fit an `M`-column eigenlane basis to training lanes. Partial lanes are
/// completed by linear extrapolation first; no mean is subtracted.
pub fn fit_basis(lanes: &[LaneCurve], m: usize) -> Result<EigenlaneBasis> {
    let n = lanes
        .first()
        .map(LaneCurve::len)
        .ok_or_else(|| Error::Config("cannot fit a basis to zero lanes".into()))?;
    if m == 0 || m > n || m > lanes.len() {
        return Err(Error::Config(format!(
            "basis size {m} invalid for {} lanes of {n} rows",
            lanes.len()
        )));
    }
    if let Some(bad) = lanes.iter().find(|l| l.len() != n) {
        return Err(Error::Config(format!("lane with {} rows among {n}-row lanes", bad.len())));
    }
    let cols: Vec<Vec<f64>> = lanes.iter().map(LaneCurve::completed).collect();
    let a = DMatrix::from_fn(n, lanes.len(), |i, j| cols[j][i]);
    let svd = a.svd(true, false);
    let u_full = svd
        .u
        .ok_or_else(|| Error::Config("SVD did not produce left singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| {
        svd.singular_values[y]
            .partial_cmp(&svd.singular_values[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });
    let mut u = vec![0.0; n * m];
    let mut sv = Vec::with_capacity(m);
    for (j, &src) in order.iter().take(m).enumerate() {
        let col: Vec<f64> = (0..n).map(|i| u_full[(i, src)]).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, *v) } else { best });
        let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            u[i * m + j] = sign * col[i];
        }
        sv.push(svd.singular_values[src]);
    }
    EigenlaneBasis::from_columns(n, m, u, sv)
}

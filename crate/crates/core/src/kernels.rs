//! Per-view Gram matrices, Hadamard products and classical centering.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    /// Allele dosages coded 0, 1, 2.
    Genotype,
    Continuous,
}

/// One omics view: `n` samples (rows) by `p` features (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct DataView {
    values: DMatrix<f64>,
    kind: ViewKind,
    feature_ids: Vec<String>,
}

impl DataView {
    pub fn new(values: DMatrix<f64>, kind: ViewKind, feature_ids: Vec<String>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::DimensionMismatch(format!("a view needs at least 2 samples, got {}", values.nrows())));
        }
        if values.ncols() == 0 {
            return Err(Error::DimensionMismatch("a view needs at least one feature".into()));
        }
        if feature_ids.len() != values.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature ids for {} columns",
                feature_ids.len(),
                values.ncols()
            )));
        }
        for (row, col) in (0..values.nrows()).flat_map(|i| (0..values.ncols()).map(move |j| (i, j))) {
            let v = values[(row, col)];
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("view value at row {row}, column {col}")));
            }
            if kind == ViewKind::Genotype && !(v == 0.0 || v == 1.0 || v == 2.0) {
                return Err(Error::InvalidGenotype { row, col, value: v });
            }
        }
        Ok(DataView { values, kind, feature_ids })
    }

    /// A view with generated feature labels `f0, f1, ...`.
    pub fn from_matrix(values: DMatrix<f64>, kind: ViewKind) -> Result<Self> {
        let ids = (0..values.ncols()).map(|j| format!("f{j}")).collect();
        Self::new(values, kind, ids)
    }

    pub fn samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn features(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn kind(&self) -> ViewKind {
        self.kind
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    fn squared_distance(&self, i: usize, j: usize) -> f64 {
        self.values
            .row(i)
            .iter()
            .zip(self.values.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Symmetric `n x n` kernel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    /// Wraps a square matrix that is symmetric to `1e-10` (relative to its
    /// largest entry) and mirrors its upper triangle.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "Gram matrix must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gram matrix entry".into()));
        }
        let scale = values.amax().max(1.0);
        let n = values.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (values[(i, j)] - values[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidArgument(format!("Gram matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self::symmetrized(values))
    }

    #[allow(dead_code)]
    pub(crate) fn from_symmetric_unchecked(values: DMatrix<f64>) -> Self {
        GramMatrix(values)
    }

    pub(crate) fn symmetrized(mut values: DMatrix<f64>) -> Self {
        let n = values.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                values[(j, i)] = values[(i, j)];
            }
        }
        GramMatrix(values)
    }

    pub fn identity(n: usize) -> Self {
        GramMatrix(DMatrix::identity(n, n))
    }

    pub fn ones(n: usize) -> Self {
        GramMatrix(DMatrix::from_element(n, n, 1.0))
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.0.diagonal()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        self.0.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        SymmetricEigen::new(self.0.clone()).eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().max()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Ibs,
    Linear,
}

/// Kernel choice for one view; `bandwidth` overrides the median heuristic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

impl KernelSpec {
    pub fn gaussian() -> Self {
        KernelSpec { kind: KernelKind::Gaussian, bandwidth: None }
    }

    pub fn ibs() -> Self {
        KernelSpec { kind: KernelKind::Ibs, bandwidth: None }
    }

    pub fn linear() -> Self {
        KernelSpec { kind: KernelKind::Linear, bandwidth: None }
    }

    /// IBS for genotype views, Gaussian otherwise.
    pub fn default_for(kind: ViewKind) -> Self {
        match kind {
            ViewKind::Genotype => Self::ibs(),
            ViewKind::Continuous => Self::gaussian(),
        }
    }

    pub fn build(&self, view: &DataView) -> Result<GramMatrix> {
        match self.kind {
            KernelKind::Gaussian => {
                let bw = match self.bandwidth {
                    Some(b) => b,
                    None => median_bandwidth(view)?,
                };
                gaussian_gram(view, bw)
            }
            KernelKind::Ibs => ibs_gram(view),
            KernelKind::Linear => Ok(linear_gram(view)),
        }
    }
}

/// Lower median of the `n(n-1)/2` pairwise Euclidean distances between rows.
pub fn median_bandwidth(view: &DataView) -> Result<f64> {
    let n = view.samples();
    let mut distances = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            distances.push(view.squared_distance(i, j).sqrt());
        }
    }
    let mid = (distances.len() - 1) / 2;
    let (_, median, _) = distances.select_nth_unstable_by(mid, f64::total_cmp);
    if *median > 0.0 {
        Ok(*median)
    } else {
        Err(Error::ZeroBandwidth)
    }
}

/// `K_ij = exp(-|x_i - x_j|^2 / (2 bandwidth^2))`.
pub fn gaussian_gram(view: &DataView, bandwidth: f64) -> Result<GramMatrix> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    let n = view.samples();
    let scale = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            k[(i, j)] = (-view.squared_distance(i, j) * scale).exp();
        }
    }
    Ok(GramMatrix::symmetrized(k))
}

/// Identity-by-state similarity `(1 / 2p) sum_s (2 - |g_is - g_js|)`.
pub fn ibs_gram(view: &DataView) -> Result<GramMatrix> {
    if view.kind() != ViewKind::Genotype {
        return Err(Error::InvalidArgument("IBS kernel needs a genotype view".into()));
    }
    let n = view.samples();
    let p = view.features();
    let g = view.values();
    let mut k = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let shared: f64 = (0..p).map(|s| 2.0 - (g[(i, s)] - g[(j, s)]).abs()).sum();
            k[(i, j)] = shared / (2.0 * p as f64);
        }
    }
    Ok(GramMatrix::symmetrized(k))
}

pub fn linear_gram(view: &DataView) -> GramMatrix {
    let x = view.values();
    GramMatrix::symmetrized(x * x.transpose())
}

/// Entrywise product of two Gram matrices of equal order.
pub fn hadamard(a: &GramMatrix, b: &GramMatrix) -> Result<GramMatrix> {
    if a.order() != b.order() {
        return Err(Error::DimensionMismatch(format!("hadamard of orders {} and {}", a.order(), b.order())));
    }
    Ok(GramMatrix(a.0.component_mul(&b.0)))
}

/// `H K H` with `H = I - 11'/n`.
pub fn classical_center(k: &GramMatrix) -> GramMatrix {
    let n = k.order();
    let row_means = k.0.row_sum().transpose() / n as f64;
    let grand = row_means.sum() / n as f64;
    let mut out = k.0.clone();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = k.0[(i, j)] - row_means[i] - row_means[j] + grand;
        }
    }
    GramMatrix::symmetrized(out)
}

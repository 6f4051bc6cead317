//! Finite-dimensional Galerkin spaces on an interval and weak-form assembly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::SeeError;

/// Gauss–Legendre nodes and weights on `[-1, 1]`, three points.
const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// One-dimensional basis families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Basis1d {
    /// Piecewise-linear hat functions on `n` interior nodes of `[0, length]`
    /// (homogeneous Dirichlet boundary). Coordinates are nodal values.
    Hat { length: f64, n: usize },
    /// `1, cos(2πkz/ℓ), sin(2πkz/ℓ)` for `k = 1..=modes`, L²-normalized.
    Trigonometric { length: f64, modes: usize },
}

/// Which derivative of a basis function enters a bilinear form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Derivative {
    Value,
    First,
}

impl Basis1d {
    pub fn dim(&self) -> usize {
        match *self {
            Basis1d::Hat { n, .. } => n,
            Basis1d::Trigonometric { modes, .. } => 2 * modes + 1,
        }
    }

    pub fn length(&self) -> f64 {
        match *self {
            Basis1d::Hat { length, .. } | Basis1d::Trigonometric { length, .. } => length,
        }
    }

    fn check(&self) -> Result<(), SeeError> {
        let l = self.length();
        if !(l.is_finite() && l > 0.0) {
            return Err(SeeError::Space(format!(
                "domain length must be > 0, got {l}"
            )));
        }
        if self.dim() == 0 {
            return Err(SeeError::Space("basis dimension must be >= 1".into()));
        }
        Ok(())
    }

    /// Element partition used for quadrature.
    fn elements(&self) -> Vec<(f64, f64)> {
        let (l, count) = match *self {
            Basis1d::Hat { length, n } => (length, n + 1),
            Basis1d::Trigonometric { length, modes } => (length, 16 * (modes + 1)),
        };
        let h = l / count as f64;
        (0..count)
            .map(|k| (k as f64 * h, (k + 1) as f64 * h))
            .collect()
    }

    /// Quadrature points `(z, weight)` over the whole domain.
    pub fn quadrature(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for (a, b) in self.elements() {
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            for (xi, w) in GAUSS3 {
                out.push((mid + half * xi, half * w));
            }
        }
        out
    }

    /// `(index, value, derivative)` of every basis function that is nonzero at `z`.
    pub fn active(&self, z: f64) -> Vec<(usize, f64, f64)> {
        match *self {
            Basis1d::Hat { length, n } => {
                let h = length / (n + 1) as f64;
                let k = ((z / h).floor() as isize).clamp(0, n as isize) as usize;
                let left = k as f64 * h;
                let s = (z - left) / h;
                let mut out = Vec::with_capacity(2);
                // node k is basis index k-1, node k+1 is basis index k
                if k >= 1 {
                    out.push((k - 1, 1.0 - s, -1.0 / h));
                }
                if k < n {
                    out.push((k, s, 1.0 / h));
                }
                out
            }
            Basis1d::Trigonometric { length, modes } => {
                let c0 = 1.0 / length.sqrt();
                let c = (2.0 / length).sqrt();
                let mut out = Vec::with_capacity(2 * modes + 1);
                out.push((0, c0, 0.0));
                for k in 1..=modes {
                    let w = 2.0 * std::f64::consts::PI * k as f64 / length;
                    let (s, co) = (w * z).sin_cos();
                    out.push((2 * k - 1, c * co, -c * w * s));
                    out.push((2 * k, c * s, c * w * co));
                }
                out
            }
        }
    }

    /// `(i, j) ↦ ∫ f(z) D^trial e_j(z) D^test e_i(z) dz`.
    pub fn bilinear<F: Fn(f64) -> f64>(
        &self,
        f: F,
        trial: Derivative,
        test: Derivative,
    ) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (z, w) in self.quadrature() {
            let fz = f(z) * w;
            if fz == 0.0 {
                continue;
            }
            let act = self.active(z);
            for &(i, vi, di) in &act {
                let ti = if test == Derivative::Value { vi } else { di };
                for &(j, vj, dj) in &act {
                    let tj = if trial == Derivative::Value { vj } else { dj };
                    m[(i, j)] += fz * tj * ti;
                }
            }
        }
        m
    }

    /// `i ↦ ∫ f(z) e_i(z) dz`.
    pub fn load<F: Fn(f64) -> f64>(&self, f: F) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        for (z, w) in self.quadrature() {
            let fz = f(z) * w;
            for (i, vi, _) in self.active(z) {
                v[i] += fz * vi;
            }
        }
        v
    }

    /// Value of `Σ x_i e_i` at `z`.
    pub fn evaluate(&self, x: &DVector<f64>, z: f64) -> f64 {
        self.active(z).into_iter().map(|(i, v, _)| x[i] * v).sum()
    }

    /// Points used for field snapshots.
    pub fn plot_points(&self) -> Vec<f64> {
        let l = self.length();
        match *self {
            Basis1d::Hat { n, .. } => (0..=n + 1).map(|j| l * j as f64 / (n + 1) as f64).collect(),
            Basis1d::Trigonometric { modes, .. } => {
                let count = 4 * (2 * modes + 1);
                (0..=count).map(|j| l * j as f64 / count as f64).collect()
            }
        }
    }
}

/// Galerkin space with its H-Gram matrix and V-form.
#[derive(Debug, Clone)]
pub struct GalerkinSpace {
    pub basis: Option<Basis1d>,
    gram_h: DMatrix<f64>,
    form_v: DMatrix<f64>,
    gram_chol: Cholesky<f64, Dyn>,
    form_chol: Cholesky<f64, Dyn>,
}

impl GalerkinSpace {
    /// Builds a space from explicit matrices. `gram_h` and `form_v` must be
    /// symmetric positive definite.
    pub fn from_matrices(gram_h: DMatrix<f64>, form_v: DMatrix<f64>) -> Result<Self, SeeError> {
        let n = gram_h.nrows();
        if gram_h.ncols() != n || form_v.shape() != (n, n) {
            return Err(SeeError::Dimension(format!(
                "Gram {:?} and V-form {:?} must be square and equal-sized",
                gram_h.shape(),
                form_v.shape()
            )));
        }
        for (name, m) in [("H-Gram", &gram_h), ("V-form", &form_v)] {
            let asym = (m - m.transpose()).amax();
            if asym > 1e-12 * m.amax().max(1.0) {
                return Err(SeeError::Space(format!(
                    "{name} matrix is not symmetric ({asym:e})"
                )));
            }
        }
        let gram_chol = gram_h
            .clone()
            .cholesky()
            .ok_or_else(|| SeeError::Space("H-Gram matrix is not positive definite".into()))?;
        let form_chol = form_v
            .clone()
            .cholesky()
            .ok_or_else(|| SeeError::Space("V-form matrix is not positive definite".into()))?;
        Ok(Self {
            basis: None,
            gram_h,
            form_v,
            gram_chol,
            form_chol,
        })
    }

    /// Assembles mass and V-form for a one-dimensional basis. The V-form is
    /// the Dirichlet form for hat functions and the full H¹ form otherwise.
    pub fn from_basis(basis: Basis1d) -> Result<Self, SeeError> {
        basis.check()?;
        let mass = symmetrize(basis.bilinear(|_| 1.0, Derivative::Value, Derivative::Value));
        let stiff = symmetrize(basis.bilinear(|_| 1.0, Derivative::First, Derivative::First));
        let form = match basis {
            Basis1d::Hat { .. } => stiff,
            Basis1d::Trigonometric { .. } => &stiff + &mass,
        };
        let mut space = Self::from_matrices(mass, form)?;
        space.basis = Some(basis);
        Ok(space)
    }

    pub fn dim(&self) -> usize {
        self.gram_h.nrows()
    }

    pub fn gram_h(&self) -> &DMatrix<f64> {
        &self.gram_h
    }

    pub fn form_v(&self) -> &DMatrix<f64> {
        &self.form_v
    }

    pub fn gram_cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.gram_chol
    }

    pub fn form_cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.form_chol
    }

    pub fn h_inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (&self.gram_h * y).dot(x)
    }

    pub fn h_norm2(&self, x: &DVector<f64>) -> f64 {
        self.h_inner(x, x)
    }

    pub fn v_norm2(&self, x: &DVector<f64>) -> f64 {
        (&self.form_v * x).dot(x)
    }

    /// Riesz representative `M⁻¹ f` of a load vector `f_i = (f, e_i)_H`.
    pub fn riesz(&self, load: &DVector<f64>) -> DVector<f64> {
        self.gram_chol.solve(load)
    }

    /// `‖P f‖²_H = fᵀ M⁻¹ f` for a load vector.
    pub fn load_norm2(&self, load: &DVector<f64>) -> f64 {
        self.riesz(load).dot(load)
    }

    /// L² projection of `f` onto the space.
    pub fn project<F: Fn(f64) -> f64>(&self, f: F) -> Option<DVector<f64>> {
        self.basis.map(|b| self.riesz(&b.load(f)))
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

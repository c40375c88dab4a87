//! Branch (generalized Steklov) mode family for the advection-diffusion
//! operator.
//!
//! The eigenproblem is, in dimensionless form on `x in [0, 1]`,
//!
//! ```text
//! V'' - Pe V' = lam V
//! V'(0) = (lam/2 + Pe) V(0),    V'(1) = -(lam/2) V(1)
//! ```
//!
//! with `Pe = c v0 L / k` and the Steklov coefficient fixed at `zeta = cL/2`
//! (dimensionless 1/2). Writing `alpha = Pe/2` and `beta = sqrt(Pe^2 + 4 lam)/2`,
//! solutions are `V = e^{alpha x}(cosh(beta x) + (s/beta) sinh(beta x))` with
//! `s = alpha + lam/2`, and eigenvalues are the roots of
//!
//! ```text
//! (s^2 + beta^2) sinh(beta) + 2 s beta cosh(beta) = 0
//! ```
//!
//! A real `beta` yields at most two surface-type modes; the infinite family
//! comes from imaginary `beta = j q`, where the condition becomes
//! `(s^2 - q^2) sin(q) + 2 s q cos(q) = 0` with `s = alpha - (q^2 + alpha^2)/2`.
//! The adjoint problem (advection reversed, Steklov fluxes swapped) has the
//! same spectrum and eigenfunctions `V* = e^{-alpha x}(...)` with the same
//! trigonometric part. For `Pe = 0` the pair collapses to the self-adjoint
//! pure-diffusion Steklov family plus the constant mode.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{Grid1D, MaterialParams};
use crate::scalar::{lit, Scalar};

/// Below this magnitude of Peclet number the eigenproblem is treated as pure
/// diffusion (the near-zero mean of an antisymmetric velocity field would
/// otherwise ask for roots at the square root of floating noise).
const PECLET_FLOOR: f64 = 1e-8;

/// One eigenvalue branch of the Steklov problem, stored dimensionless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BranchRoot<T> {
    /// `lam = 0`, constant mode; exists only for `Pe = 0`.
    Constant,
    /// Real `beta`; `lam = beta^2 - alpha^2`.
    Real(T),
    /// Imaginary `beta = j q`; `lam = -q^2 - alpha^2`.
    Imaginary(T),
}

#[derive(Debug, Clone)]
pub struct BranchBasis<T: Scalar> {
    grid: Grid1D<T>,
    mat: MaterialParams<T>,
    velocity: T,
    peclet: T,
    /// Dimensional Steklov coefficient `c L / 2`.
    zeta: T,
    roots: Vec<BranchRoot<T>>,
    /// Dimensional eigenvalues `lam_i k / (c L^2)`, ordered by magnitude.
    eigenvalues: Vec<T>,
    /// `modes[(i, j)] = V_i(X_j)`.
    modes: DMatrix<T>,
    adjoint_modes: DMatrix<T>,
    /// Analytic spatial derivative `dV_i/dX` sampled on the grid.
    modes_dx: DMatrix<T>,
}

impl<T: Scalar> BranchBasis<T> {
    pub fn new(grid: Grid1D<T>, mat: MaterialParams<T>, v0: T, n_modes: usize) -> Result<Self> {
        if n_modes < 1 {
            return Err(Error::invalid("mode count must be at least 1"));
        }
        let length = grid.length();
        let mut peclet = mat.heat_capacity * v0 * length / mat.conductivity;
        if peclet.abs() < lit::<T>(PECLET_FLOOR) {
            peclet = T::zero();
        }
        let alpha = peclet * lit::<T>(0.5);

        let mut candidates: Vec<(BranchRoot<T>, T)> = Vec::new();
        if peclet == T::zero() {
            candidates.push((BranchRoot::Constant, T::zero()));
        } else {
            for beta in real_roots(alpha) {
                candidates.push((BranchRoot::Real(beta), beta * beta - alpha * alpha));
            }
        }
        for q in imaginary_roots(alpha, n_modes + 6) {
            candidates.push((BranchRoot::Imaginary(q), -q * q - alpha * alpha));
        }
        candidates.sort_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap());
        if candidates.len() < n_modes {
            return Err(Error::RootSearch {
                found: candidates.len(),
                requested: n_modes,
            });
        }
        candidates.truncate(n_modes);

        let scale = mat.conductivity / (mat.heat_capacity * length * length);
        let roots: Vec<BranchRoot<T>> = candidates.iter().map(|c| c.0).collect();
        let eigenvalues: Vec<T> = candidates.iter().map(|c| c.1 * scale).collect();
        let zeta = mat.heat_capacity * length * lit::<T>(0.5);

        let n_x = grid.node_count();
        let mut modes = DMatrix::zeros(n_modes, n_x);
        let mut adjoint_modes = DMatrix::zeros(n_modes, n_x);
        let mut modes_dx = DMatrix::zeros(n_modes, n_x);
        for (i, root) in roots.iter().enumerate() {
            for j in 0..n_x {
                let x = grid.nodes()[j] / length;
                modes[(i, j)] = shape(alpha, *root, x);
                adjoint_modes[(i, j)] = adjoint_shape(alpha, *root, x);
                modes_dx[(i, j)] = shape_dx(alpha, *root, x) / length;
            }
        }

        let mut basis = Self {
            grid,
            mat,
            velocity: v0,
            peclet,
            zeta,
            roots,
            eigenvalues,
            modes,
            adjoint_modes,
            modes_dx,
        };
        basis.normalize()?;
        Ok(basis)
    }

    /// Rescales every pair by `1/sqrt(C_D(V_i, V*_i))` so that the
    /// bi-orthogonality product is one on the diagonal while `Pe = 0` still
    /// gives `V_i = V*_i` pointwise.
    fn normalize(&mut self) -> Result<()> {
        for i in 0..self.mode_count() {
            let d = self.biorthogonal_product(
                self.modes.row(i).iter().copied().collect::<Vec<_>>().as_slice(),
                self.adjoint_modes
                    .row(i)
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
                    .as_slice(),
            );
            if d <= T::zero() {
                return Err(Error::invalid(format!(
                    "mode {i} has non-positive bi-orthogonal norm {d:e}"
                )));
            }
            let f = T::one() / d.sqrt();
            for j in 0..self.grid.node_count() {
                self.modes[(i, j)] *= f;
                self.adjoint_modes[(i, j)] *= f;
                self.modes_dx[(i, j)] *= f;
            }
        }
        Ok(())
    }

    /// `C_D(f, g) = int c f g dX + zeta (f(0) g(0) + f(L) g(L))` under the
    /// grid trapezoid quadrature.
    pub fn biorthogonal_product(&self, f: &[T], g: &[T]) -> T {
        let n = self.grid.node_count();
        self.mat.heat_capacity * self.grid.integrate_product(f, g)
            + self.zeta * (f[0] * g[0] + f[n - 1] * g[n - 1])
    }

    /// Largest off-diagonal bi-orthogonality defect.
    pub fn biorthogonality_residual(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.mode_count() {
            let vi = self.mode(i);
            for j in 0..self.mode_count() {
                if i == j {
                    continue;
                }
                let vj = self.adjoint_mode(j);
                worst = worst.max(self.biorthogonal_product(&vi, &vj).abs());
            }
        }
        worst
    }

    pub fn grid(&self) -> &Grid1D<T> {
        &self.grid
    }

    pub fn material(&self) -> MaterialParams<T> {
        self.mat
    }

    pub fn base_velocity(&self) -> T {
        self.velocity
    }

    pub fn peclet(&self) -> T {
        self.peclet
    }

    pub fn steklov_coefficient(&self) -> T {
        self.zeta
    }

    pub fn mode_count(&self) -> usize {
        self.modes.nrows()
    }

    pub fn roots(&self) -> &[BranchRoot<T>] {
        &self.roots
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    pub fn mode(&self, i: usize) -> Vec<T> {
        self.modes.row(i).iter().copied().collect()
    }

    pub fn adjoint_mode(&self, i: usize) -> Vec<T> {
        self.adjoint_modes.row(i).iter().copied().collect()
    }

    pub fn mode_value(&self, i: usize, node: usize) -> T {
        self.modes[(i, node)]
    }

    pub fn adjoint_mode_value(&self, i: usize, node: usize) -> T {
        self.adjoint_modes[(i, node)]
    }

    /// Analytic `dV_i/dX` at a node.
    pub fn mode_derivative(&self, i: usize, node: usize) -> T {
        self.modes_dx[(i, node)]
    }

    /// State coefficients of a temperature snapshot: `z_m = C_D(T, V*_m)`.
    pub fn project(&self, snapshot: &[T]) -> Result<DVector<T>> {
        if snapshot.len() != self.grid.node_count() {
            return Err(Error::invalid(format!(
                "snapshot has {} samples, grid has {} nodes",
                snapshot.len(),
                self.grid.node_count()
            )));
        }
        let mut z = DVector::zeros(self.mode_count());
        for m in 0..self.mode_count() {
            let vm = self.adjoint_mode(m);
            z[m] = self.biorthogonal_product(snapshot, &vm);
        }
        Ok(z)
    }

    pub fn reconstruct(&self, coeffs: &DVector<T>) -> Result<Vec<T>> {
        if coeffs.len() != self.mode_count() {
            return Err(Error::invalid("coefficient count differs from mode count"));
        }
        let n = self.grid.node_count();
        let mut out = vec![T::zero(); n];
        for i in 0..self.mode_count() {
            let c = coeffs[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o += c * self.modes[(i, j)];
            }
        }
        Ok(out)
    }

    /// Residual of the transcendental eigenvalue equation for root `i`,
    /// evaluated in its tangent form.
    pub fn transcendental_residual(&self, i: usize) -> T {
        let alpha = self.peclet * lit::<T>(0.5);
        match self.roots[i] {
            BranchRoot::Constant => T::zero(),
            BranchRoot::Real(beta) => {
                let s = alpha + (beta * beta - alpha * alpha) * lit::<T>(0.5);
                beta.tanh() + lit::<T>(2.0) * s * beta / (beta * beta + s * s)
            }
            BranchRoot::Imaginary(q) => {
                let s = alpha - (q * q + alpha * alpha) * lit::<T>(0.5);
                q.tan() - lit::<T>(2.0) * s * q / (q * q - s * s)
            }
        }
    }
}

/// Dimensionless mode value `V(x)` for `x in [0, 1]`.
fn shape<T: Scalar>(alpha: T, root: BranchRoot<T>, x: T) -> T {
    match root {
        BranchRoot::Constant => T::one(),
        BranchRoot::Real(beta) => {
            let s = alpha + (beta * beta - alpha * alpha) * lit::<T>(0.5);
            (alpha * x).exp() * ((beta * x).cosh() + s / beta * (beta * x).sinh())
        }
        BranchRoot::Imaginary(q) => {
            let s = alpha - (q * q + alpha * alpha) * lit::<T>(0.5);
            (alpha * x).exp() * ((q * x).cos() + s / q * (q * x).sin())
        }
    }
}

/// Adjoint mode: same oscillatory part, reversed exponential envelope.
fn adjoint_shape<T: Scalar>(alpha: T, root: BranchRoot<T>, x: T) -> T {
    match root {
        BranchRoot::Constant => T::one(),
        BranchRoot::Real(beta) => {
            let s = alpha + (beta * beta - alpha * alpha) * lit::<T>(0.5);
            (-alpha * x).exp() * ((beta * x).cosh() + s / beta * (beta * x).sinh())
        }
        BranchRoot::Imaginary(q) => {
            let s = alpha - (q * q + alpha * alpha) * lit::<T>(0.5);
            (-alpha * x).exp() * ((q * x).cos() + s / q * (q * x).sin())
        }
    }
}

/// Dimensionless derivative `dV/dx`.
fn shape_dx<T: Scalar>(alpha: T, root: BranchRoot<T>, x: T) -> T {
    let half = lit::<T>(0.5);
    match root {
        BranchRoot::Constant => T::zero(),
        BranchRoot::Real(beta) => {
            let s = alpha + (beta * beta - alpha * alpha) * half;
            (alpha * x).exp()
                * ((alpha + s) * (beta * x).cosh() + (alpha * s / beta + beta) * (beta * x).sinh())
        }
        BranchRoot::Imaginary(q) => {
            let s = alpha - (q * q + alpha * alpha) * half;
            (alpha * x).exp()
                * ((alpha + s) * (q * x).cos() + (alpha * s / q - q) * (q * x).sin())
        }
    }
}

/// Normalized eigenvalue condition for the oscillatory family.
fn condition_imaginary<T: Scalar>(alpha: T, q: T) -> T {
    let s = alpha - (q * q + alpha * alpha) * lit::<T>(0.5);
    ((s * s - q * q) * q.sin() + lit::<T>(2.0) * s * q * q.cos()) / (T::one() + q * q + s * s)
}

/// Normalized eigenvalue condition for real `beta`.
fn condition_real<T: Scalar>(alpha: T, beta: T) -> T {
    let s = alpha + (beta * beta - alpha * alpha) * lit::<T>(0.5);
    (beta.tanh() * (s * s + beta * beta) + lit::<T>(2.0) * s * beta)
        / (T::one() + beta * beta + s * s)
}

/// Bisection to floating point exhaustion; `f(a)` and `f(b)` must differ in sign.
fn bisect<T: Scalar>(f: impl Fn(T) -> T, mut a: T, mut b: T) -> T {
    let mut fa = f(a);
    let half = lit::<T>(0.5);
    for _ in 0..200 {
        let m = (a + b) * half;
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == T::zero() {
            return m;
        }
        if (fa > T::zero()) == (fm > T::zero()) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    (a + b) * half
}

/// Scans `f` over the given abscissas, bisecting every sign change.
fn scan_roots<T: Scalar>(f: impl Fn(T) -> T + Copy, points: &[T]) -> Vec<T> {
    let mut roots = Vec::new();
    let mut prev_x = points[0];
    let mut prev_f = f(prev_x);
    for &x in &points[1..] {
        let fx = f(x);
        if fx == T::zero() {
            roots.push(x);
        } else if prev_f != T::zero() && (prev_f > T::zero()) != (fx > T::zero()) {
            roots.push(bisect(f, prev_x, x));
        }
        prev_x = x;
        prev_f = fx;
    }
    roots
}

/// Roots of the oscillatory-family condition, ascending, enough for
/// `n_wanted` modes. One root sits in each period of the tangent once `q`
/// clears the low-frequency region, so scanning up to `(n_wanted + 2) pi`
/// with a dense sweep is sufficient.
fn imaginary_roots<T: Scalar>(alpha: T, n_wanted: usize) -> Vec<T> {
    let q_max = T::pi() * T::from_usize(n_wanted + 2).unwrap();
    let mut points = Vec::new();
    // geometric sweep through the low-q region where a perturbed constant
    // mode can hide at q ~ sqrt(Pe)
    let mut q = lit::<T>(1e-9) * (T::one() + alpha.abs());
    let grow = lit::<T>(1.6);
    while q < lit::<T>(0.5) {
        points.push(q);
        q *= grow;
    }
    // linear sweep, ~256 points per pi
    let step = T::pi() / lit::<T>(256.0);
    let mut x = lit::<T>(0.5);
    while x < q_max {
        points.push(x);
        x += step;
    }
    points.push(q_max);
    scan_roots(|q| condition_imaginary(alpha, q), &points)
}

/// Real-`beta` roots (surface modes). The condition is positive wherever
/// `s >= 0`, so roots can only live in the pocket `beta^2 < alpha^2 - 2 alpha`,
/// which is non-empty only for `Pe > 4` or `Pe < 0`.
fn real_roots<T: Scalar>(alpha: T) -> Vec<T> {
    let pocket_sq = alpha * alpha - lit::<T>(2.0) * alpha;
    if pocket_sq <= T::zero() {
        return Vec::new();
    }
    let hi = pocket_sq.sqrt();
    let mut points = Vec::new();
    let mut b = hi * lit::<T>(1e-9);
    let grow = lit::<T>(1.6);
    while b < hi * lit::<T>(1e-2) {
        points.push(b);
        b *= grow;
    }
    let n = 2000;
    for k in 0..=n {
        points.push(hi * lit::<T>(0.01) + (hi - hi * lit::<T>(0.01)) * T::from_usize(k).unwrap() / T::from_usize(n).unwrap());
    }
    let roots = scan_roots(|b| condition_real(alpha, b), &points);
    debug_assert!(roots.len() <= 2, "more than two real Steklov roots found");
    roots
}

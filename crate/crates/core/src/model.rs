//! Reduced state-space form of the advection-diffusion problem and its
//! semi-implicit time integration.
//!
//! Both mode families reduce the PDE to
//!
//! ```text
//! C dZ/dt = A(t) Z + M(t) + D B(t)
//! ```
//!
//! advanced with the semi-implicit stencil
//!
//! ```text
//! (C - dt A_{k+1}) Z_{k+1} = C Z_k + dt M_{k+1} + dt D (B_{k+1} + B_k) / 2
//! ```
//!
//! The adjoint sweep implemented here is the exact discrete adjoint of that
//! stencil together with the trapezoid Bolza cost, so the resulting gradient
//! matches finite differences of the discrete cost to roundoff rather than to
//! `O(dt)`.

use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn};

use crate::basis::SpectralBasis;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{Grid1D, MaterialParams, TimeGrid};
use crate::scalar::{lit, Scalar};

/// Prescribed boundary flux densities and their time derivatives, sampled on
/// a time grid. `left` is the flux at `X = 0`, `right` at `X = L`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFluxes<T: Scalar> {
    pub left: Vec<T>,
    pub right: Vec<T>,
    pub left_rate: Vec<T>,
    pub right_rate: Vec<T>,
}

impl<T: Scalar> BoundaryFluxes<T> {
    pub fn zero(tg: &TimeGrid<T>) -> Self {
        let n = tg.sample_count();
        Self {
            left: vec![T::zero(); n],
            right: vec![T::zero(); n],
            left_rate: vec![T::zero(); n],
            right_rate: vec![T::zero(); n],
        }
    }

    /// Samples analytic fluxes and their analytic derivatives.
    pub fn from_functions(
        tg: &TimeGrid<T>,
        left: impl Fn(T) -> T,
        right: impl Fn(T) -> T,
        left_rate: impl Fn(T) -> T,
        right_rate: impl Fn(T) -> T,
    ) -> Self {
        Self {
            left: tg.times().iter().map(|t| left(*t)).collect(),
            right: tg.times().iter().map(|t| right(*t)).collect(),
            left_rate: tg.times().iter().map(|t| left_rate(*t)).collect(),
            right_rate: tg.times().iter().map(|t| right_rate(*t)).collect(),
        }
    }

    /// Builds from tabulated fluxes, differentiating by central differences
    /// with one-sided ends.
    pub fn from_samples(tg: &TimeGrid<T>, left: Vec<T>, right: Vec<T>) -> Result<Self> {
        let n = tg.sample_count();
        if left.len() != n || right.len() != n {
            return Err(Error::invalid("flux sample count differs from time grid"));
        }
        let left_rate = finite_difference_rate(&left, tg.dt());
        let right_rate = finite_difference_rate(&right, tg.dt());
        Ok(Self {
            left,
            right,
            left_rate,
            right_rate,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.left.len()
    }
}

fn finite_difference_rate<T: Scalar>(values: &[T], dt: T) -> Vec<T> {
    let n = values.len();
    let half = lit::<T>(0.5);
    (0..n)
        .map(|k| {
            if k == 0 {
                (values[1] - values[0]) / dt
            } else if k == n - 1 {
                (values[n - 1] - values[n - 2]) / dt
            } else {
                (values[k + 1] - values[k - 1]) * half / dt
            }
        })
        .collect()
}

/// A time-indexed array of `N_m`-component coefficient vectors, used for
/// states, controls, adjoints and gradients alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    steps: Vec<DVector<T>>,
    time: TimeGrid<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn zeros(tg: &TimeGrid<T>, n_modes: usize) -> Self {
        Self {
            steps: (0..tg.sample_count())
                .map(|_| DVector::zeros(n_modes))
                .collect(),
            time: tg.clone(),
        }
    }

    pub fn from_steps(tg: &TimeGrid<T>, steps: Vec<DVector<T>>) -> Result<Self> {
        if steps.len() != tg.sample_count() {
            return Err(Error::invalid("trajectory length differs from time grid"));
        }
        let n = steps[0].len();
        if steps.iter().any(|s| s.len() != n) {
            return Err(Error::invalid("trajectory steps have mixed dimensions"));
        }
        Ok(Self {
            steps,
            time: tg.clone(),
        })
    }

    pub fn time(&self) -> &TimeGrid<T> {
        &self.time
    }

    pub fn mode_count(&self) -> usize {
        self.steps[0].len()
    }

    pub fn sample_count(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, k: usize) -> &DVector<T> {
        &self.steps[k]
    }

    pub fn step_mut(&mut self, k: usize) -> &mut DVector<T> {
        &mut self.steps[k]
    }

    pub fn steps(&self) -> &[DVector<T>] {
        &self.steps
    }

    pub fn last(&self) -> &DVector<T> {
        self.steps.last().unwrap()
    }

    /// Time integral of the pointwise inner product, trapezoid quadrature.
    pub fn integral_dot(&self, other: &Self) -> T {
        let mut acc = T::zero();
        for k in 0..self.steps.len() {
            acc += self.time.weight(k) * self.steps[k].dot(&other.steps[k]);
        }
        acc
    }

    /// `integral_dot` plus the terminal product (the Bolza pairing).
    pub fn bolza_dot(&self, other: &Self) -> T {
        self.integral_dot(other) + self.last().dot(other.last())
    }

    /// Time-integrated squared L2 norm.
    pub fn norm_sq(&self) -> T {
        self.integral_dot(self)
    }

    pub fn difference(&self, other: &Self) -> Result<Self> {
        if self.steps.len() != other.steps.len() || self.mode_count() != other.mode_count() {
            return Err(Error::invalid("trajectory shapes differ"));
        }
        Ok(Self {
            steps: self
                .steps
                .iter()
                .zip(other.steps.iter())
                .map(|(a, b)| a - b)
                .collect(),
            time: self.time.clone(),
        })
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.steps.iter_mut().zip(other.steps.iter()) {
            a.axpy(scale, b, T::one());
        }
    }

    pub fn scale(&mut self, factor: T) {
        for s in &mut self.steps {
            *s *= factor;
        }
    }

    pub fn map_steps(&self, f: impl FnMut(&DVector<T>) -> DVector<T>) -> Self {
        Self {
            steps: self.steps.iter().map(f).collect(),
            time: self.time.clone(),
        }
    }
}

/// Time-indexed state-space coefficients.
#[derive(Debug, Clone)]
pub struct ModelMatrices<T: Scalar> {
    /// Convection-diffusion matrices; one entry when time-constant, else
    /// `N_t + 1` entries indexed by the time sample.
    a: Vec<DMatrix<T>>,
    /// Capacity matrix (`cI` for Fourier, the boundary-corrected Gram for
    /// branch modes).
    pub c: DMatrix<T>,
    /// Control injection matrix.
    pub d: DMatrix<T>,
    /// Source-free forcing vectors, `N_t + 1` entries.
    m: Vec<DVector<T>>,
}

impl<T: Scalar> ModelMatrices<T> {
    /// Builds a system from explicit coefficients; `a` holds either one
    /// matrix (time-constant) or one per time sample.
    pub fn from_parts(
        a: Vec<DMatrix<T>>,
        c: DMatrix<T>,
        d: DMatrix<T>,
        m: Vec<DVector<T>>,
    ) -> Result<Self> {
        let n = c.nrows();
        if c.ncols() != n || d.nrows() != n || d.ncols() != n {
            return Err(Error::invalid("capacity and injection matrices must be square"));
        }
        if a.is_empty() || a.iter().any(|ak| ak.nrows() != n || ak.ncols() != n) {
            return Err(Error::invalid("state matrices have inconsistent dimensions"));
        }
        if a.len() != 1 && a.len() != m.len() {
            return Err(Error::invalid("need one A matrix or one per time sample"));
        }
        if m.iter().any(|mk| mk.len() != n) {
            return Err(Error::invalid("forcing vectors have inconsistent dimensions"));
        }
        Ok(Self { a, c, d, m })
    }

    pub fn a(&self, k: usize) -> &DMatrix<T> {
        if self.a.len() == 1 {
            &self.a[0]
        } else {
            &self.a[k]
        }
    }

    pub fn time_constant(&self) -> bool {
        self.a.len() == 1
    }

    pub fn m(&self, k: usize) -> &DVector<T> {
        &self.m[k]
    }

    pub fn mode_count(&self) -> usize {
        self.c.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.m.len()
    }
}

/// Assembles `A(t), C, D, M(t)` for the given basis, material, velocity
/// samples and boundary fluxes.
pub fn assemble_matrices<T: Scalar>(
    basis: &SpectralBasis<T>,
    mat: MaterialParams<T>,
    velocity: &Field<T>,
    fluxes: &BoundaryFluxes<T>,
    tg: &TimeGrid<T>,
) -> Result<ModelMatrices<T>> {
    let grid = basis.grid();
    if velocity.node_count() != grid.node_count() || velocity.time_count() != tg.sample_count() {
        return Err(Error::invalid("velocity samples do not match the grids"));
    }
    if fluxes.sample_count() != tg.sample_count() {
        return Err(Error::invalid("flux samples do not match the time grid"));
    }
    let steady = velocity_is_steady(velocity);
    match basis {
        SpectralBasis::Fourier(fb) => {
            assemble_fourier(fb, mat, velocity, fluxes, tg, steady)
        }
        SpectralBasis::Branch(bb) => assemble_branch(bb, velocity, fluxes, tg, steady),
    }
}

fn velocity_is_steady<T: Scalar>(velocity: &Field<T>) -> bool {
    let first = velocity.profile(0);
    (1..velocity.time_count()).all(|k| velocity.profile(k) == first)
}

fn assemble_fourier<T: Scalar>(
    basis: &crate::basis::FourierBasis<T>,
    mat: MaterialParams<T>,
    velocity: &Field<T>,
    fluxes: &BoundaryFluxes<T>,
    tg: &TimeGrid<T>,
    steady: bool,
) -> Result<ModelMatrices<T>> {
    let grid = basis.grid();
    let n_m = basis.mode_count();
    let n_x = grid.node_count();
    let length = grid.length();
    let pi = T::pi();
    let two = lit::<T>(2.0);
    let cond = mat.conductivity;
    let cap = mat.heat_capacity;

    // trigonometric samples reused by the advection coupling integrals
    let mut sines = DMatrix::zeros(n_m, n_x); // sin(i pi X / L)
    let mut cosines = DMatrix::zeros(n_m, n_x); // cos(i pi X / L)
    for i in 0..n_m {
        let freq = T::from_usize(i).unwrap() * pi / length;
        for j in 0..n_x {
            sines[(i, j)] = (freq * grid.nodes()[j]).sin();
            cosines[(i, j)] = (freq * grid.nodes()[j]).cos();
        }
    }

    let diffusion: Vec<T> = basis.eigenvalues().iter().map(|ev| cond * *ev).collect();

    let a_count = if steady { 1 } else { tg.sample_count() };
    let mut a_list = Vec::with_capacity(a_count);
    for k in 0..a_count {
        let v = velocity.profile(k);
        let mut a = DMatrix::zeros(n_m, n_m);
        for m in 0..n_m {
            a[(m, m)] += diffusion[m];
            for i in 1..n_m {
                // (2 c i pi / L^2) \int v sin(i pi X/L) cos(m pi X/L) dX
                let mut prod = vec![T::zero(); n_x];
                for j in 0..n_x {
                    prod[j] = v[j] * sines[(i, j)] * cosines[(m, j)];
                }
                let coupling = two * cap * T::from_usize(i).unwrap() * pi
                    / (length * length)
                    * grid.integrate(&prod);
                a[(m, i)] += coupling;
            }
        }
        a_list.push(a);
    }

    let mut m_list = Vec::with_capacity(tg.sample_count());
    let half_freq = pi / (two * length);
    let lift_gain = two * length / (cond * pi);
    for k in 0..tg.sample_count() {
        let v = velocity.profile(k);
        let p1 = fluxes.left[k];
        let p2 = fluxes.right[k];
        let dp1 = fluxes.left_rate[k];
        let dp2 = fluxes.right_rate[k];
        let mut p_samples = vec![T::zero(); n_x];
        for j in 0..n_x {
            let s = (half_freq * grid.nodes()[j]).sin();
            let g = (half_freq * grid.nodes()[j]).cos();
            p_samples[j] = cap * lift_gain * (dp1 * s - dp2 * g)
                + half_freq * (p1 * s - p2 * g)
                + cap * v[j] / cond * (p1 * g + p2 * s);
        }
        let mut mk = DVector::zeros(n_m);
        for m in 0..n_m {
            let mut prod = vec![T::zero(); n_x];
            for j in 0..n_x {
                prod[j] = p_samples[j] * cosines[(m, j)];
            }
            mk[m] = two / length * grid.integrate(&prod);
        }
        m_list.push(mk);
    }

    Ok(ModelMatrices {
        a: a_list,
        c: DMatrix::from_diagonal_element(n_m, n_m, cap),
        d: DMatrix::identity(n_m, n_m),
        m: m_list,
    })
}

fn assemble_branch<T: Scalar>(
    basis: &crate::basis::BranchBasis<T>,
    velocity: &Field<T>,
    fluxes: &BoundaryFluxes<T>,
    tg: &TimeGrid<T>,
    steady: bool,
) -> Result<ModelMatrices<T>> {
    let grid = basis.grid();
    let n_m = basis.mode_count();
    let n_x = grid.node_count();
    let cap = basis.material().heat_capacity;
    let zeta = basis.steklov_coefficient();
    let v0 = basis.base_velocity();
    let last = n_x - 1;

    // gamma_im = delta_im - zeta (V_i(0) V*_m(0) + V_i(L) V*_m(L))
    let mut gamma = DMatrix::zeros(n_m, n_m);
    for m in 0..n_m {
        for i in 0..n_m {
            let boundary = basis.mode_value(i, 0) * basis.adjoint_mode_value(m, 0)
                + basis.mode_value(i, last) * basis.adjoint_mode_value(m, last);
            gamma[(m, i)] = if i == m { T::one() } else { T::zero() } - zeta * boundary;
        }
    }

    let a_count = if steady { 1 } else { tg.sample_count() };
    let mut a_list = Vec::with_capacity(a_count);
    for k in 0..a_count {
        let v = velocity.profile(k);
        let mut a = DMatrix::zeros(n_m, n_m);
        for m in 0..n_m {
            a[(m, m)] += basis.eigenvalues()[m];
            for i in 0..n_m {
                // advection defect against the frozen eigenproblem velocity:
                // P_im = c \int (v - v0) V_i' V*_m dX - c v0 V_i(0) V*_m(0)
                let mut prod = vec![T::zero(); n_x];
                for j in 0..n_x {
                    prod[j] = (v[j] - v0)
                        * basis.mode_derivative(i, j)
                        * basis.adjoint_mode_value(m, j);
                }
                let p_im = cap * grid.integrate(&prod)
                    - cap * v0 * basis.mode_value(i, 0) * basis.adjoint_mode_value(m, 0);
                a[(m, i)] -= p_im;
            }
        }
        a_list.push(a);
    }

    let mut m_list = Vec::with_capacity(tg.sample_count());
    for k in 0..tg.sample_count() {
        let mut mk = DVector::zeros(n_m);
        for m in 0..n_m {
            mk[m] = fluxes.left[k] * basis.adjoint_mode_value(m, 0)
                - fluxes.right[k] * basis.adjoint_mode_value(m, last);
        }
        m_list.push(mk);
    }

    Ok(ModelMatrices {
        a: a_list,
        c: gamma.clone(),
        d: gamma,
        m: m_list,
    })
}

/// Prefactored semi-implicit stepper: LU factors of every step matrix
/// `C - dt A_k` and of its transpose, reusable across inversions.
pub struct Propagator<'a, T: Scalar> {
    mm: &'a ModelMatrices<T>,
    tg: TimeGrid<T>,
    forward_lu: Vec<LU<T, Dyn, Dyn>>,
    adjoint_lu: Vec<LU<T, Dyn, Dyn>>,
    c_transpose: DMatrix<T>,
}

impl<'a, T: Scalar> Propagator<'a, T> {
    pub fn new(mm: &'a ModelMatrices<T>, tg: &TimeGrid<T>) -> Result<Self> {
        if mm.sample_count() != tg.sample_count() {
            return Err(Error::invalid("matrices do not match the time grid"));
        }
        let dt = tg.dt();
        let count = if mm.time_constant() { 1 } else { tg.steps() };
        let mut forward_lu = Vec::with_capacity(count);
        let mut adjoint_lu = Vec::with_capacity(count);
        for idx in 0..count {
            // factors for step matrix E_k with k = idx + 1
            let k = idx + 1;
            let e = &mm.c - mm.a(k) * dt;
            let lu = LU::new(e.clone());
            if !lu.is_invertible() {
                return Err(Error::SingularStep { step: k });
            }
            let lu_t = LU::new(e.transpose());
            if !lu_t.is_invertible() {
                return Err(Error::SingularStep { step: k });
            }
            forward_lu.push(lu);
            adjoint_lu.push(lu_t);
        }
        Ok(Self {
            mm,
            tg: tg.clone(),
            forward_lu,
            adjoint_lu,
            c_transpose: mm.c.transpose(),
        })
    }

    pub fn matrices(&self) -> &ModelMatrices<T> {
        self.mm
    }

    pub fn time(&self) -> &TimeGrid<T> {
        &self.tg
    }

    fn forward_factor(&self, k: usize) -> &LU<T, Dyn, Dyn> {
        if self.forward_lu.len() == 1 {
            &self.forward_lu[0]
        } else {
            &self.forward_lu[k - 1]
        }
    }

    fn adjoint_factor(&self, k: usize) -> &LU<T, Dyn, Dyn> {
        if self.adjoint_lu.len() == 1 {
            &self.adjoint_lu[0]
        } else {
            &self.adjoint_lu[k - 1]
        }
    }

    /// Integrates the state equation with control `b`, initial state `z0`,
    /// including the source-free forcing `M`.
    pub fn solve_forward(&self, b: &Trajectory<T>, z0: &DVector<T>) -> Result<Trajectory<T>> {
        self.solve_forward_impl(b, z0, true)
    }

    /// Response of the homogeneous system (`M = 0`, zero initial state) to a
    /// control perturbation; the forward map is linear so this is the exact
    /// directional derivative of the state trajectory.
    pub fn solve_linearized(&self, w: &Trajectory<T>) -> Result<Trajectory<T>> {
        let z0 = DVector::zeros(self.mm.mode_count());
        self.solve_forward_impl(w, &z0, false)
    }

    fn solve_forward_impl(
        &self,
        b: &Trajectory<T>,
        z0: &DVector<T>,
        with_forcing: bool,
    ) -> Result<Trajectory<T>> {
        let n_m = self.mm.mode_count();
        if b.mode_count() != n_m || b.sample_count() != self.tg.sample_count() {
            return Err(Error::invalid("control trajectory does not match the model"));
        }
        if z0.len() != n_m {
            return Err(Error::invalid("initial state has the wrong dimension"));
        }
        let dt = self.tg.dt();
        let half_dt = dt * lit::<T>(0.5);
        let mut steps = Vec::with_capacity(self.tg.sample_count());
        steps.push(z0.clone());
        for k in 0..self.tg.steps() {
            let mut rhs = &self.mm.c * &steps[k];
            if with_forcing {
                rhs.axpy(dt, self.mm.m(k + 1), T::one());
            }
            let b_avg = (b.step(k + 1) + b.step(k)) * half_dt;
            rhs += &self.mm.d * b_avg;
            let z_next = self
                .forward_factor(k + 1)
                .solve(&rhs)
                .ok_or(Error::SingularStep { step: k + 1 })?;
            steps.push(z_next);
        }
        Trajectory::from_steps(&self.tg, steps)
    }

    /// Backward sweep of the discrete adjoint, driven by the state residual
    /// `r = observed - modeled`. Returns the multiplier trajectory collocated
    /// on the time nodes, so that the cost gradient is `-D^T mu` pointwise
    /// and the discrete cost obeys `dJ[dB] = sum_k w_k (grad_k . dB_k)`.
    pub fn solve_adjoint(&self, residual: &Trajectory<T>) -> Result<Trajectory<T>> {
        let n_m = self.mm.mode_count();
        if residual.mode_count() != n_m || residual.sample_count() != self.tg.sample_count() {
            return Err(Error::invalid("residual does not match the model"));
        }
        let n = self.tg.steps();
        let dt = self.tg.dt();
        let half = lit::<T>(0.5);

        // step multipliers psi_1 .. psi_N
        let mut psi = vec![DVector::<T>::zeros(n_m); n + 1];
        let terminal = residual.step(n) * (T::one() + dt * half);
        psi[n] = self
            .adjoint_factor(n)
            .solve(&terminal)
            .ok_or(Error::SingularStep { step: n })?;
        for j in (1..n).rev() {
            let mut rhs = &self.c_transpose * &psi[j + 1];
            rhs.axpy(dt, residual.step(j), T::one());
            psi[j] = self
                .adjoint_factor(j)
                .solve(&rhs)
                .ok_or(Error::SingularStep { step: j })?;
        }

        // collocate on the time nodes
        let mut steps = Vec::with_capacity(n + 1);
        steps.push(psi[1].clone());
        for j in 1..n {
            steps.push((&psi[j] + &psi[j + 1]) * half);
        }
        steps.push(psi[n].clone());
        Trajectory::from_steps(&self.tg, steps)
    }
}

/// One-shot forward solve (factors the step matrices internally).
pub fn solve_forward<T: Scalar>(
    mm: &ModelMatrices<T>,
    b: &Trajectory<T>,
    z0: &DVector<T>,
    tg: &TimeGrid<T>,
) -> Result<Trajectory<T>> {
    Propagator::new(mm, tg)?.solve_forward(b, z0)
}

/// Particular temperature component carrying the boundary fluxes for the
/// Fourier path: `T_p = -(2L/k pi) p1 sin(pi X / 2L) + (2L/k pi) p2 cos(pi X / 2L)`.
pub fn fourier_lift_profile<T: Scalar>(
    grid: &Grid1D<T>,
    mat: MaterialParams<T>,
    flux_left: T,
    flux_right: T,
) -> Vec<T> {
    let length = grid.length();
    let pi = T::pi();
    let gain = lit::<T>(2.0) * length / (mat.conductivity * pi);
    let half_freq = pi / (lit::<T>(2.0) * length);
    grid.nodes()
        .iter()
        .map(|x| {
            -gain * flux_left * (half_freq * *x).sin() + gain * flux_right * (half_freq * *x).cos()
        })
        .collect()
}

/// Maps a state trajectory back to the temperature field. The Fourier states
/// describe the flux-homogenized component and get the particular lift added
/// back; branch states represent the temperature directly.
pub fn lift_temperature<T: Scalar>(
    states: &Trajectory<T>,
    basis: &SpectralBasis<T>,
    mat: MaterialParams<T>,
    fluxes: &BoundaryFluxes<T>,
) -> Result<Field<T>> {
    let grid = basis.grid();
    let tg = states.time().clone();
    let mut out = Field::zeros(grid, &tg);
    for k in 0..tg.sample_count() {
        let mut profile = basis.reconstruct(states.step(k))?;
        if matches!(basis, SpectralBasis::Fourier(_)) {
            let lift = fourier_lift_profile(grid, mat, fluxes.left[k], fluxes.right[k]);
            for (p, l) in profile.iter_mut().zip(lift.iter()) {
                *p += *l;
            }
        }
        out.set_profile(k, &profile);
    }
    Ok(out)
}

/// Projects measured temperature data to observed state trajectories,
/// homogenizing first on the Fourier path.
pub fn project_observations<T: Scalar>(
    data: &Field<T>,
    basis: &SpectralBasis<T>,
    mat: MaterialParams<T>,
    fluxes: &BoundaryFluxes<T>,
    tg: &TimeGrid<T>,
) -> Result<Trajectory<T>> {
    if data.time_count() != tg.sample_count() {
        return Err(Error::invalid("data does not match the time grid"));
    }
    let grid = basis.grid();
    let mut steps = Vec::with_capacity(tg.sample_count());
    for k in 0..tg.sample_count() {
        let mut profile = data.profile(k);
        if matches!(basis, SpectralBasis::Fourier(_)) {
            let lift = fourier_lift_profile(grid, mat, fluxes.left[k], fluxes.right[k]);
            for (p, l) in profile.iter_mut().zip(lift.iter()) {
                *p -= *l;
            }
        }
        steps.push(basis.project(&profile)?);
    }
    Trajectory::from_steps(tg, steps)
}

/// Projected initial state for a spatially constant initial temperature.
pub fn initial_state<T: Scalar>(
    basis: &SpectralBasis<T>,
    mat: MaterialParams<T>,
    fluxes: &BoundaryFluxes<T>,
    t0: T,
) -> Result<DVector<T>> {
    let grid = basis.grid();
    let mut profile = vec![t0; grid.node_count()];
    if matches!(basis, SpectralBasis::Fourier(_)) {
        let lift = fourier_lift_profile(grid, mat, fluxes.left[0], fluxes.right[0]);
        for (p, l) in profile.iter_mut().zip(lift.iter()) {
            *p -= *l;
        }
    }
    basis.project(&profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisFamily;
    use approx::assert_relative_eq;

    fn grid() -> Grid1D<f64> {
        Grid1D::uniform(1.5, 200).unwrap()
    }

    fn mat() -> MaterialParams<f64> {
        MaterialParams::new(1.0, 0.03).unwrap()
    }

    fn fourier(n: usize) -> SpectralBasis<f64> {
        SpectralBasis::build(BasisFamily::Fourier, grid(), mat(), 0.0, n).unwrap()
    }

    #[test]
    fn fourier_matrices_without_velocity_are_diagonal() {
        let tg = TimeGrid::new(1.0, 5).unwrap();
        let basis = fourier(6);
        let v = Field::zeros(basis.grid(), &tg);
        let fluxes = BoundaryFluxes::zero(&tg);
        let mm = assemble_matrices(&basis, mat(), &v, &fluxes, &tg).unwrap();
        assert!(mm.time_constant());
        let l = 1.5;
        for i in 0..6 {
            let expect = -0.03 * (i as f64 * std::f64::consts::PI / l).powi(2);
            assert_relative_eq!(mm.a(0)[(i, i)], expect, max_relative = 1e-12);
            for j in 0..6 {
                if i != j {
                    assert_eq!(mm.a(0)[(i, j)], 0.0);
                }
            }
        }
        // c = 1 makes C the identity, and D is always the identity here
        assert_eq!(mm.c, DMatrix::identity(6, 6));
        assert_eq!(mm.d, DMatrix::identity(6, 6));
    }

    #[test]
    fn constant_velocity_coupling_has_zero_diagonal() {
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let basis = fourier(8);
        let v = Field::from_fn(basis.grid(), &tg, |_, _| 0.05);
        let fluxes = BoundaryFluxes::zero(&tg);
        let mm = assemble_matrices(&basis, mat(), &v, &fluxes, &tg).unwrap();
        let l = 1.5;
        for i in 1..8 {
            let diffusion = -0.03 * (i as f64 * std::f64::consts::PI / l).powi(2);
            // sin(i pi X/L) cos(i pi X/L) integrates to zero over [0, L]
            assert!(
                (mm.a(0)[(i, i)] - diffusion).abs() < 1e-12,
                "diagonal advection leak at mode {i}"
            );
        }
    }

    #[test]
    fn zero_input_stays_zero() {
        let tg = TimeGrid::new(1.0, 20).unwrap();
        let basis = fourier(4);
        let v = Field::zeros(basis.grid(), &tg);
        let fluxes = BoundaryFluxes::zero(&tg);
        let mm = assemble_matrices(&basis, mat(), &v, &fluxes, &tg).unwrap();
        let b = Trajectory::zeros(&tg, 4);
        let z = solve_forward(&mm, &b, &DVector::zeros(4), &tg).unwrap();
        assert!(z.steps().iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn single_mode_decay_matches_exact_solution_to_first_order() {
        let l = 1.5;
        let kappa = 0.03 * (std::f64::consts::PI / l).powi(2); // mode 1 rate, c = 1
        let t_f = 2.0;
        let mut errors = Vec::new();
        for steps in [50, 100] {
            let tg = TimeGrid::new(t_f, steps).unwrap();
            let basis = fourier(3);
            let v = Field::zeros(basis.grid(), &tg);
            let fluxes = BoundaryFluxes::zero(&tg);
            let mm = assemble_matrices(&basis, mat(), &v, &fluxes, &tg).unwrap();
            let b = Trajectory::zeros(&tg, 3);
            let z0 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
            let z = solve_forward(&mm, &b, &z0, &tg).unwrap();
            let exact = (-kappa * t_f).exp();
            errors.push((z.last()[1] - exact).abs());
            assert!(z.last()[1] > 0.0 && z.last()[1] < 1.0);
        }
        // halving dt should roughly halve the error of the implicit scheme
        let ratio = errors[0] / errors[1];
        assert!(
            ratio > 1.7 && ratio < 2.4,
            "convergence ratio {ratio}, errors {errors:?}"
        );
    }

    #[test]
    fn mode_zero_is_stationary_without_sources() {
        let tg = TimeGrid::new(5.0, 50).unwrap();
        let basis = fourier(5);
        let v = Field::zeros(basis.grid(), &tg);
        let fluxes = BoundaryFluxes::zero(&tg);
        let mm = assemble_matrices(&basis, mat(), &v, &fluxes, &tg).unwrap();
        let b = Trajectory::zeros(&tg, 5);
        let z0 = DVector::from_vec(vec![2.0, 0.3, 0.1, 0.0, 0.0]);
        let z = solve_forward(&mm, &b, &z0, &tg).unwrap();
        for k in 0..=50 {
            assert_relative_eq!(z.step(k)[0], 2.0, max_relative = 1e-6);
        }
    }

    #[test]
    fn lift_reproduces_prescribed_left_flux() {
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let basis = fourier(4);
        let fluxes = BoundaryFluxes::from_functions(
            &tg,
            |t| 0.4 + 0.1 * t,
            |_| 0.0,
            |_| 0.1,
            |_| 0.0,
        );
        let z = Trajectory::zeros(&tg, 4);
        let t = lift_temperature(&z, &basis, mat(), &fluxes).unwrap();
        let h = basis.grid().spacing();
        for k in 0..=4 {
            // T(0, t) = 0 when the right flux vanishes
            assert_relative_eq!(t.value(k, 0), 0.0, epsilon = 1e-13);
            let slope = (t.value(k, 1) - t.value(k, 0)) / h;
            let recovered = -0.03 * slope;
            let expected = fluxes.left[k];
            assert!(
                (recovered - expected).abs() <= 0.02 * expected.abs(),
                "step {k}: recovered {recovered}, expected {expected}"
            );
        }
    }

    #[test]
    fn observation_projection_inverts_lift() {
        let tg = TimeGrid::new(1.0, 6).unwrap();
        let basis = fourier(8);
        let fluxes = BoundaryFluxes::from_functions(
            &tg,
            |t: f64| -0.005 * (0.1742 * t).exp(),
            |t: f64| 0.005 * (0.1249 * t).exp(),
            |t: f64| -0.005 * 0.1742 * (0.1742 * t).exp(),
            |t: f64| 0.005 * 0.1249 * (0.1249 * t).exp(),
        );
        // build a state trajectory, lift it, and project it back
        let mut z = Trajectory::zeros(&tg, 8);
        for k in 0..=6 {
            for i in 0..8 {
                *z.step_mut(k) = z.step(k).clone();
                z.step_mut(k)[i] = ((k + 1) as f64 * 0.1) / (1.0 + i as f64);
            }
        }
        let t = lift_temperature(&z, &basis, mat(), &fluxes).unwrap();
        let back = project_observations(&t, &basis, mat(), &fluxes, &tg).unwrap();
        for k in 0..=6 {
            for i in 0..8 {
                assert!(
                    (back.step(k)[i] - z.step(k)[i]).abs() < 1e-8,
                    "step {k} mode {i}"
                );
            }
        }
    }

    #[test]
    fn singular_step_is_reported() {
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let mm = ModelMatrices::from_parts(
            vec![DMatrix::from_diagonal_element(2, 2, 1.0 / tg.dt())],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            vec![DVector::zeros(2); 3],
        )
        .unwrap();
        // C - dt A = 0, singular
        match Propagator::new(&mm, &tg).err() {
            Some(Error::SingularStep { step }) => assert_eq!(step, 1),
            other => panic!("expected singular step, got {other:?}"),
        }
    }
}

//! Adjoint-state conjugate gradient inversion.
//!
//! The discrete cost is the Bolza least-squares functional on the states,
//!
//! ```text
//! J(B) = 1/2 int ||Zd - Z(B)||^2 dt + 1/2 ||Zd(t_f) - Z(t_f; B)||^2
//! ```
//!
//! minimized over the control trajectory `B` with Fletcher-Reeves conjugate
//! directions. The gradient comes from one backward adjoint sweep per
//! iteration (`grad = -D^T mu`), and because the forward map is linear in
//! `B` the line search is an exact quadratic step computed from one extra
//! homogeneous forward solve. Optional stabilizers: truncated-SVD filtering
//! of the gradient trajectory before the direction update, or a Tikhonov
//! penalty `1/2 alpha int ||B||^2 dt` folded into gradient and step.

use nalgebra::{DMatrix, DVector};

use crate::basis::SpectralBasis;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::TimeGrid;
use crate::model::{ModelMatrices, Propagator, Trajectory};
use crate::scalar::{lit, Scalar};
use crate::tsvd;

/// Value of the Bolza cost, split into its two quadratic parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostValue<T: Scalar> {
    pub total: T,
    pub integral_part: T,
    pub terminal_part: T,
}

/// Cost of a model trajectory against observed states.
pub fn cost<T: Scalar>(observed: &Trajectory<T>, modeled: &Trajectory<T>) -> Result<CostValue<T>> {
    if observed.sample_count() != modeled.sample_count()
        || observed.mode_count() != modeled.mode_count()
    {
        return Err(Error::invalid("trajectories live on different grids"));
    }
    Ok(cost_from_residual(&observed.difference(modeled)?))
}

/// Cost evaluated directly on the residual `observed - modeled`.
pub fn cost_from_residual<T: Scalar>(residual: &Trajectory<T>) -> CostValue<T> {
    let half = lit::<T>(0.5);
    let integral_part = half * residual.integral_dot(residual);
    let last = residual.last();
    let terminal_part = half * last.dot(last);
    CostValue {
        total: integral_part + terminal_part,
        integral_part,
        terminal_part,
    }
}

/// Backward adjoint sweep for the given data/model pair. Convenience wrapper
/// over [`Propagator::solve_adjoint`] that factors the step matrices
/// internally; inversion loops should hold a `Propagator` instead.
pub fn solve_adjoint<T: Scalar>(
    mm: &ModelMatrices<T>,
    observed: &Trajectory<T>,
    modeled: &Trajectory<T>,
    tg: &TimeGrid<T>,
) -> Result<Trajectory<T>> {
    let residual = observed.difference(modeled)?;
    Propagator::new(mm, tg)?.solve_adjoint(&residual)
}

/// Pointwise-in-time gradient extraction `grad(t) = -D^T mu(t)`.
pub fn gradient_from_adjoint<T: Scalar>(mu: &Trajectory<T>, d: &DMatrix<T>) -> Trajectory<T> {
    let dt = d.transpose();
    mu.map_steps(|m| -(&dt * m))
}

/// Fletcher-Reeves direction update. `previous` carries the former direction
/// and the former gradient's squared time-integrated norm; `None` (or an
/// iteration index hitting the restart period) resets to steepest descent.
/// Returns the new direction and the mixing factor used.
pub fn descent_direction<T: Scalar>(
    grad: &Trajectory<T>,
    grad_norm_sq: T,
    previous: Option<(&Trajectory<T>, T)>,
) -> (Trajectory<T>, T) {
    let mut w = grad.clone();
    w.scale(-T::one());
    match previous {
        Some((w_prev, prev_norm_sq)) if prev_norm_sq > T::zero() => {
            let gamma = grad_norm_sq / prev_norm_sq;
            w.add_scaled(w_prev, gamma);
            (w, gamma)
        }
        _ => (w, T::zero()),
    }
}

/// Exact quadratic line search along `direction`.
///
/// Solves the homogeneous forward problem once to get the state response
/// `dZ`, then minimizes the exactly quadratic `J(B + rho w)` (plus the
/// Tikhonov term when `alpha > 0`):
///
/// ```text
/// rho = (<r, dZ>_B - alpha <B, w>_t) / (<dZ, dZ>_B + alpha <w, w>_t)
/// ```
///
/// Returns the step and the state response so the caller can update states
/// and residual without another forward solve.
pub fn line_search<T: Scalar>(
    prop: &Propagator<'_, T>,
    residual: &Trajectory<T>,
    direction: &Trajectory<T>,
    tikhonov: Option<(T, &Trajectory<T>)>,
) -> Result<(T, Trajectory<T>)> {
    let dz = prop.solve_linearized(direction)?;
    let mut numerator = residual.bolza_dot(&dz);
    let mut denominator = dz.bolza_dot(&dz);
    if let Some((alpha, control)) = tikhonov {
        numerator -= alpha * control.integral_dot(direction);
        denominator += alpha * direction.integral_dot(direction);
    }
    if denominator <= T::zero() || !denominator.is_finite() {
        return Err(Error::Stagnation);
    }
    Ok((numerator / denominator, dz))
}

/// Regularization mode of a CGM run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer<T: Scalar> {
    None,
    /// Gradient-trajectory TSVD at the given energy share.
    Tsvd { energy: T },
    /// Quadratic penalty `1/2 alpha int ||B||^2 dt`.
    Tikhonov { alpha: T },
}

impl<T: Scalar> std::fmt::Display for Regularizer<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regularizer::None => write!(f, "none"),
            Regularizer::Tsvd { .. } => write!(f, "tsvd"),
            Regularizer::Tikhonov { .. } => write!(f, "tikhonov"),
        }
    }
}

/// Stopping rule of the iteration (besides the iteration cap).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stopping<T: Scalar> {
    /// Stop once `J < J_e`, the cost the projected measurement noise alone
    /// would produce.
    NoiseProjection { j_e: T },
    /// Classic discrepancy form `J < tau sigma^2`.
    Discrepancy { tau: T, sigma: T },
}

impl<T: Scalar> Stopping<T> {
    pub fn threshold(&self) -> T {
        match self {
            Stopping::NoiseProjection { j_e } => *j_e,
            Stopping::Discrepancy { tau, sigma } => *tau * *sigma * *sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Cost fell below the stopping threshold.
    Threshold,
    /// Gradient vanished; the iterate is a minimum of the discrete problem.
    GradientVanished,
    /// Iteration cap reached without satisfying the stopping rule.
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct CgmConfig<T: Scalar> {
    pub max_iterations: usize,
    pub stopping: Option<Stopping<T>>,
    pub regularizer: Regularizer<T>,
    /// Reset to steepest descent every this many iterations.
    pub restart_period: usize,
}

impl<T: Scalar> CgmConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be positive"));
        }
        if self.restart_period == 0 {
            return Err(Error::invalid("restart_period must be positive"));
        }
        match self.regularizer {
            Regularizer::Tsvd { energy } => {
                if energy <= T::zero() || energy > T::one() {
                    return Err(Error::invalid("TSVD energy share must lie in (0, 1]"));
                }
            }
            Regularizer::Tikhonov { alpha } => {
                if alpha < T::zero() {
                    return Err(Error::invalid("Tikhonov penalty must be >= 0"));
                }
            }
            Regularizer::None => {}
        }
        if let Some(Stopping::Discrepancy { tau, sigma }) = self.stopping {
            if tau <= T::zero() || sigma < T::zero() {
                return Err(Error::invalid("discrepancy stopping needs tau > 0, sigma >= 0"));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for CgmConfig<T> {
    fn default() -> Self {
        Self {
            max_iterations: 800,
            stopping: None,
            regularizer: Regularizer::None,
            restart_period: 200,
        }
    }
}

/// Raw outcome of one CGM run in state space.
#[derive(Debug, Clone)]
pub struct CgmRun<T: Scalar> {
    /// Identified control trajectory.
    pub control: Trajectory<T>,
    /// Final model state trajectory.
    pub states: Trajectory<T>,
    /// Data-misfit cost per iteration, including iteration 0.
    pub j_history: Vec<T>,
    /// Penalized cost per iteration (equals `j_history` without Tikhonov).
    pub j_augmented_history: Vec<T>,
    pub rho_history: Vec<T>,
    pub gamma_history: Vec<T>,
    /// Retained TSVD rank per iteration (empty without TSVD).
    pub rank_history: Vec<usize>,
    /// Gram eigenvalue spectrum per iteration (empty without TSVD).
    pub spectrum_history: Vec<Vec<T>>,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
}

impl<T: Scalar> CgmRun<T> {
    pub fn final_cost(&self) -> T {
        *self.j_history.last().unwrap()
    }
}

/// Runs the conjugate gradient iteration.
///
/// `observed` are the projected data states, `z0` the projected initial
/// temperature, `initial_control` an optional warm start (zero otherwise).
pub fn run_cgm<T: Scalar>(
    prop: &Propagator<'_, T>,
    observed: &Trajectory<T>,
    z0: &DVector<T>,
    cfg: &CgmConfig<T>,
    initial_control: Option<Trajectory<T>>,
) -> Result<CgmRun<T>> {
    cfg.validate()?;
    let tg = prop.time().clone();
    let n_m = prop.matrices().mode_count();
    if observed.mode_count() != n_m || observed.sample_count() != tg.sample_count() {
        return Err(Error::invalid("observed states do not match the model"));
    }
    let alpha = match cfg.regularizer {
        Regularizer::Tikhonov { alpha } => alpha,
        _ => T::zero(),
    };
    let half = lit::<T>(0.5);

    let mut control = match initial_control {
        Some(b) => {
            if b.mode_count() != n_m || b.sample_count() != tg.sample_count() {
                return Err(Error::invalid("initial control does not match the model"));
            }
            b
        }
        None => Trajectory::zeros(&tg, n_m),
    };
    let mut states = prop.solve_forward(&control, z0)?;
    let mut residual = observed.difference(&states)?;
    let mut j = cost_from_residual(&residual).total;

    let threshold = cfg.stopping.as_ref().map(Stopping::threshold);
    let mut j_history = vec![j];
    let mut j_augmented_history = vec![j + half * alpha * control.norm_sq()];
    let mut rho_history = Vec::new();
    let mut gamma_history = Vec::new();
    let mut rank_history = Vec::new();
    let mut spectrum_history = Vec::new();

    let mut done = threshold.map(|th| j < th).unwrap_or(false);
    let mut stop = if done {
        StopReason::Threshold
    } else {
        StopReason::MaxIterations
    };
    let mut converged = done;

    let mut previous: Option<(Trajectory<T>, T)> = None;
    let mut iterations = 0;
    let grad_floor = T::default_epsilon() * T::default_epsilon();

    while !done && iterations < cfg.max_iterations {
        let mu = prop.solve_adjoint(&residual)?;
        let mut grad = gradient_from_adjoint(&mu, &prop.matrices().d);
        if alpha > T::zero() {
            grad.add_scaled(&control, alpha);
        }
        if let Regularizer::Tsvd { energy } = cfg.regularizer {
            let (filtered, fact) = tsvd::svd_filter(&grad, energy)?;
            grad = filtered;
            rank_history.push(fact.rank);
            spectrum_history.push(fact.eigenvalues);
        }
        let grad_norm_sq = grad.norm_sq();
        if grad_norm_sq <= grad_floor {
            converged = true;
            stop = StopReason::GradientVanished;
            break;
        }

        let restart = iterations % cfg.restart_period == 0;
        let prev_ref = if restart {
            None
        } else {
            previous.as_ref().map(|(w, n)| (w, *n))
        };
        let (direction, gamma) = descent_direction(&grad, grad_norm_sq, prev_ref);

        let tik = if alpha > T::zero() {
            Some((alpha, &control))
        } else {
            None
        };
        let (rho, dz) = line_search(prop, &residual, &direction, tik)?;

        control.add_scaled(&direction, rho);
        states.add_scaled(&dz, rho);
        residual.add_scaled(&dz, -rho);
        j = cost_from_residual(&residual).total;

        gamma_history.push(gamma);
        rho_history.push(rho);
        j_history.push(j);
        j_augmented_history.push(j + half * alpha * control.norm_sq());
        previous = Some((direction, grad_norm_sq));
        iterations += 1;

        if let Some(th) = threshold {
            if j < th {
                converged = true;
                stop = StopReason::Threshold;
                done = true;
            }
        }
    }

    Ok(CgmRun {
        control,
        states,
        j_history,
        j_augmented_history,
        rho_history,
        gamma_history,
        rank_history,
        spectrum_history,
        iterations,
        converged,
        stop,
    })
}

/// Noise level of the cost: projects recorded measurement noise onto the
/// modes and evaluates `J_e = 1/2 int ||Z_e||^2 dt`.
pub fn noise_threshold<T: Scalar>(
    noise: &Field<T>,
    basis: &SpectralBasis<T>,
    tg: &TimeGrid<T>,
) -> Result<T> {
    if noise.time_count() != tg.sample_count() {
        return Err(Error::invalid("noise recordings do not match the time grid"));
    }
    let half = lit::<T>(0.5);
    let mut acc = T::zero();
    for k in 0..tg.sample_count() {
        let z = basis.project(&noise.profile(k))?;
        acc += tg.weight(k) * z.dot(&z);
    }
    Ok(half * acc)
}

/// Variance factors of the state projection of unit-variance white noise:
/// `var(z_i) = sigma^2 * factor_i`. Used for the analytic default of the
/// discrepancy constant `tau`.
pub fn projected_noise_unit_variance<T: Scalar>(basis: &SpectralBasis<T>) -> Vec<T> {
    let grid = basis.grid();
    let n_x = grid.node_count();
    match basis {
        SpectralBasis::Fourier(fb) => {
            let two_over_l = lit::<T>(2.0) / grid.length();
            (0..fb.mode_count())
                .map(|i| {
                    let mut acc = T::zero();
                    for j in 0..n_x {
                        // projection weight of sample j onto cos(i pi X/L)
                        let c = if i == 0 {
                            T::one()
                        } else {
                            // modes store 1/2 for i = 0 but project against
                            // the plain cosine, value cos(i pi X_j / L)
                            fb.mode_value(i, j)
                        };
                        let w = two_over_l * grid.weight(j) * c;
                        acc += w * w;
                    }
                    acc
                })
                .collect()
        }
        SpectralBasis::Branch(bb) => {
            let cap = bb.material().heat_capacity;
            let zeta = bb.steklov_coefficient();
            (0..bb.mode_count())
                .map(|m| {
                    let mut acc = T::zero();
                    for j in 0..n_x {
                        let mut w = cap * grid.weight(j) * bb.adjoint_mode_value(m, j);
                        if j == 0 || j == n_x - 1 {
                            w += zeta * bb.adjoint_mode_value(m, j);
                        }
                        acc += w * w;
                    }
                    acc
                })
                .collect()
        }
    }
}

/// Analytic default for the discrepancy constant of `J < tau sigma^2`:
/// the expected projected-noise cost divided by `sigma^2`.
pub fn discrepancy_tau_default<T: Scalar>(basis: &SpectralBasis<T>, tg: &TimeGrid<T>) -> T {
    let half = lit::<T>(0.5);
    let sum: T = projected_noise_unit_variance(basis)
        .into_iter()
        .fold(T::zero(), |a, b| a + b);
    half * tg.t_final() * sum
}

/// Peak reconstruction error normalized by the exact source's range:
/// `max |q_hat - q_exact| / (max q_exact - min q_exact)` over one profile.
pub fn error_ths<T: Scalar>(q_hat: &[T], q_exact: &[T]) -> Result<T> {
    if q_hat.len() != q_exact.len() {
        return Err(Error::invalid("profiles have different lengths"));
    }
    let lo = q_exact.iter().copied().fold(q_exact[0], T::min);
    let hi = q_exact.iter().copied().fold(q_exact[0], T::max);
    if hi == lo {
        return Err(Error::invalid("error_ths is undefined for a constant exact source"));
    }
    let peak = q_hat
        .iter()
        .zip(q_exact.iter())
        .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
    Ok(peak / (hi - lo))
}

/// Full inversion record: iterate history, identified source, and the
/// statistics the comparison tables are built from.
#[derive(Debug, Clone)]
pub struct InversionReport<T: Scalar> {
    pub case: String,
    pub basis: String,
    pub regularizer: String,
    pub sigma: T,
    pub seed: u64,
    pub mode_count: usize,
    /// Identified control trajectory.
    pub b_hat: Trajectory<T>,
    /// Reconstructed source field.
    pub q_hat: Field<T>,
    pub j_history: Vec<T>,
    pub rho_history: Vec<T>,
    pub gamma_history: Vec<T>,
    pub rank_history: Vec<usize>,
    pub spectrum_history: Vec<Vec<T>>,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    /// Final data-misfit cost.
    pub j_min: T,
    /// Peak source error at the evaluation time, when the truth is known.
    pub error_ths: Option<T>,
    /// Index of the evaluation instant used for profiles and `error_ths`.
    pub eval_index: usize,
    /// Mean of the temperature residual profile at the evaluation time.
    pub residual_mean: T,
    /// Standard deviation of that residual profile.
    pub residual_std: T,
    /// Profiles at the evaluation time, for report emission.
    pub q_exact_eval: Option<Vec<T>>,
    pub t_data_eval: Vec<T>,
    pub t_model_eval: Vec<T>,
    /// Echo of the configuration that produced the run.
    pub config_echo: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisFamily, SpectralBasis};
    use crate::field::Field;
    use crate::grid::{Grid1D, MaterialParams};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tgrid(t_f: f64, steps: usize) -> TimeGrid<f64> {
        TimeGrid::new(t_f, steps).unwrap()
    }

    /// Random stable test system; `symmetric_c` toggles between the Fourier
    /// shape (C = cI) and a branch-like nonsymmetric capacity matrix.
    fn random_system(
        n_m: usize,
        tg: &TimeGrid<f64>,
        rng: &mut StdRng,
        symmetric_c: bool,
    ) -> ModelMatrices<f64> {
        let a: Vec<DMatrix<f64>> = (0..tg.sample_count())
            .map(|_| {
                DMatrix::from_fn(n_m, n_m, |i, j| {
                    let noise: f64 = rng.random_range(-0.5..0.5);
                    if i == j {
                        -1.0 + 0.3 * noise
                    } else {
                        0.4 * noise
                    }
                })
            })
            .collect();
        let c = if symmetric_c {
            DMatrix::from_diagonal_element(n_m, n_m, 1.3)
        } else {
            DMatrix::identity(n_m, n_m)
                + DMatrix::from_fn(n_m, n_m, |_, _| rng.random_range(-0.15..0.15))
        };
        let d = DMatrix::from_fn(n_m, n_m, |i, j| {
            if i == j {
                1.0
            } else {
                rng.random_range(-0.2..0.2)
            }
        });
        let m = (0..tg.sample_count())
            .map(|_| DVector::from_fn(n_m, |_, _| rng.random_range(-0.3..0.3)))
            .collect();
        ModelMatrices::from_parts(a, c, d, m).unwrap()
    }

    fn random_trajectory(n_m: usize, tg: &TimeGrid<f64>, rng: &mut StdRng) -> Trajectory<f64> {
        Trajectory::from_steps(
            tg,
            (0..tg.sample_count())
                .map(|_| DVector::from_fn(n_m, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn discrete_cost(
        prop: &Propagator<'_, f64>,
        observed: &Trajectory<f64>,
        b: &Trajectory<f64>,
        z0: &DVector<f64>,
    ) -> f64 {
        let z = prop.solve_forward(b, z0).unwrap();
        cost(observed, &z).unwrap().total
    }

    #[test]
    fn cost_of_identical_trajectories_is_zero() {
        let tg = tgrid(1.0, 10);
        let t = Trajectory::<f64>::zeros(&tg, 3);
        let c = cost(&t, &t).unwrap();
        assert_eq!(c.total, 0.0);
    }

    #[test]
    fn cost_of_constant_residual_has_closed_form() {
        let tg = tgrid(40.0, 400);
        let n_m = 18;
        let r = 0.37;
        let observed = Trajectory::from_steps(
            &tg,
            (0..=400).map(|_| DVector::from_element(n_m, r)).collect(),
        )
        .unwrap();
        let modeled = Trajectory::zeros(&tg, n_m);
        let c = cost(&observed, &modeled).unwrap();
        let n = n_m as f64;
        assert_relative_eq!(c.integral_part, 0.5 * n * r * r * 40.0, max_relative = 1e-12);
        assert_relative_eq!(c.terminal_part, 0.5 * n * r * r, max_relative = 1e-12);
    }

    #[test]
    fn cost_is_quadratically_homogeneous() {
        let tg = tgrid(2.0, 20);
        let mut rng = StdRng::seed_from_u64(5);
        let r = random_trajectory(4, &tg, &mut rng);
        let mut r2 = r.clone();
        r2.scale(2.0);
        let j1 = cost_from_residual(&r).total;
        let j2 = cost_from_residual(&r2).total;
        assert_relative_eq!(j2, 4.0 * j1, max_relative = 1e-12);
    }

    #[test]
    fn adjoint_of_zero_residual_vanishes() {
        let tg = tgrid(1.0, 15);
        let mut rng = StdRng::seed_from_u64(1);
        let mm = random_system(3, &tg, &mut rng, true);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let mu = prop.solve_adjoint(&Trajectory::zeros(&tg, 3)).unwrap();
        assert!(mu.steps().iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn adjoint_approximates_scalar_backward_ode() {
        // single mode, C = c, A = a, constant residual r:
        // -c mu' = a mu + r, mu(t_f) = r / c
        let c = 1.7;
        let a = -0.9;
        let r = 0.4;
        let t_f = 2.0;
        let mut errs = Vec::new();
        for steps in [100usize, 200] {
            let tg = tgrid(t_f, steps);
            let mm = ModelMatrices::from_parts(
                vec![DMatrix::from_element(1, 1, a)],
                DMatrix::from_element(1, 1, c),
                DMatrix::identity(1, 1),
                vec![DVector::zeros(1); tg.sample_count()],
            )
            .unwrap();
            let prop = Propagator::new(&mm, &tg).unwrap();
            let residual = Trajectory::from_steps(
                &tg,
                (0..=steps).map(|_| DVector::from_element(1, r)).collect(),
            )
            .unwrap();
            let mu = prop.solve_adjoint(&residual).unwrap();
            // exact: in tau = t_f - t, c mu_tau = a mu + r
            let mu_f = r / c;
            let exact_at_0 = (mu_f + r / a) * (a * t_f / c).exp() - r / a;
            errs.push((mu.step(0)[0] - exact_at_0).abs());
        }
        assert!(errs[0] < 2e-2, "coarse error {}", errs[0]);
        let ratio = errs[0] / errs[1];
        assert!(ratio > 1.6, "first-order convergence ratio {ratio}");
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        for (seed, symmetric_c) in [(11u64, true), (12, false)] {
            let mut rng = StdRng::seed_from_u64(seed);
            let n_m = 4;
            let tg = tgrid(1.0, 20);
            let mm = random_system(n_m, &tg, &mut rng, symmetric_c);
            let prop = Propagator::new(&mm, &tg).unwrap();
            let z0 = DVector::from_fn(n_m, |_, _| rng.random_range(-0.5..0.5));
            let observed = random_trajectory(n_m, &tg, &mut rng);
            let b = random_trajectory(n_m, &tg, &mut rng);

            let states = prop.solve_forward(&b, &z0).unwrap();
            let residual = observed.difference(&states).unwrap();
            let mu = prop.solve_adjoint(&residual).unwrap();
            let grad = gradient_from_adjoint(&mu, &mm.d);

            let h = 1e-6;
            for k in 0..=20 {
                for i in 0..n_m {
                    let mut bp = b.clone();
                    bp.step_mut(k)[i] += h;
                    let mut bm = b.clone();
                    bm.step_mut(k)[i] -= h;
                    let fd = (discrete_cost(&prop, &observed, &bp, &z0)
                        - discrete_cost(&prop, &observed, &bm, &z0))
                        / (2.0 * h);
                    let analytic = tg.weight(k) * grad.step(k)[i];
                    let denom = fd.abs().max(1e-8);
                    assert!(
                        (fd - analytic).abs() / denom < 1e-3,
                        "seed {seed} step {k} mode {i}: fd {fd} vs adjoint {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn adjoint_duality_pairing() {
        let mut rng = StdRng::seed_from_u64(23);
        let n_m = 5;
        let tg = tgrid(1.5, 30);
        let mm = random_system(n_m, &tg, &mut rng, false);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let z0 = DVector::zeros(n_m);
        let observed = random_trajectory(n_m, &tg, &mut rng);
        let b = random_trajectory(n_m, &tg, &mut rng);
        let states = prop.solve_forward(&b, &z0).unwrap();
        let residual = observed.difference(&states).unwrap();
        let mu = prop.solve_adjoint(&residual).unwrap();
        let grad = gradient_from_adjoint(&mu, &mm.d);

        for probe in 0..3 {
            let w = random_trajectory(n_m, &tg, &mut StdRng::seed_from_u64(100 + probe));
            let dz = prop.solve_linearized(&w).unwrap();
            // dJ[w] through the states equals dJ[w] through the gradient
            let via_states = -residual.bolza_dot(&dz);
            let via_grad = grad.integral_dot(&w);
            let denom = via_states.abs().max(1e-12);
            assert!(
                (via_states - via_grad).abs() / denom < 5e-3,
                "probe {probe}: {via_states} vs {via_grad}"
            );
        }
    }

    #[test]
    fn gradient_with_identity_injection_is_minus_mu() {
        let tg = tgrid(1.0, 8);
        let mut rng = StdRng::seed_from_u64(3);
        let mu = random_trajectory(3, &tg, &mut rng);
        let grad = gradient_from_adjoint(&mu, &DMatrix::identity(3, 3));
        for k in 0..=8 {
            for i in 0..3 {
                assert_eq!(grad.step(k)[i], -mu.step(k)[i]);
            }
        }
    }

    #[test]
    fn first_direction_is_steepest_descent() {
        let tg = tgrid(1.0, 8);
        let mut rng = StdRng::seed_from_u64(4);
        let g = random_trajectory(3, &tg, &mut rng);
        let (w, gamma) = descent_direction(&g, g.norm_sq(), None);
        assert_eq!(gamma, 0.0);
        for k in 0..=8 {
            for i in 0..3 {
                assert_eq!(w.step(k)[i], -g.step(k)[i]);
            }
        }
    }

    #[test]
    fn equal_gradients_double_the_direction() {
        let tg = tgrid(1.0, 8);
        let mut rng = StdRng::seed_from_u64(6);
        let g = random_trajectory(3, &tg, &mut rng);
        let mut w_prev = g.clone();
        w_prev.scale(-1.0);
        let n = g.norm_sq();
        let (w, gamma) = descent_direction(&g, n, Some((&w_prev, n)));
        assert_relative_eq!(gamma, 1.0);
        for k in 0..=8 {
            for i in 0..3 {
                assert_relative_eq!(w.step(k)[i], -2.0 * g.step(k)[i], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn line_search_zero_residual_gives_zero_step() {
        let tg = tgrid(1.0, 12);
        let mut rng = StdRng::seed_from_u64(7);
        let mm = random_system(3, &tg, &mut rng, true);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let w = random_trajectory(3, &tg, &mut rng);
        let r = Trajectory::zeros(&tg, 3);
        let (rho, _) = line_search(&prop, &r, &w, None).unwrap();
        assert_eq!(rho, 0.0);
    }

    #[test]
    fn line_search_exact_fit_gives_unit_step() {
        let tg = tgrid(1.0, 12);
        let mut rng = StdRng::seed_from_u64(8);
        let mm = random_system(3, &tg, &mut rng, true);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let w = random_trajectory(3, &tg, &mut rng);
        let dz = prop.solve_linearized(&w).unwrap();
        // make the residual exactly the reachable state response
        let (rho, _) = line_search(&prop, &dz, &w, None).unwrap();
        assert_relative_eq!(rho, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn line_search_matches_brute_force_scan() {
        let mut rng = StdRng::seed_from_u64(9);
        let n_m = 4;
        let tg = tgrid(1.0, 25);
        let mm = random_system(n_m, &tg, &mut rng, false);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let z0 = DVector::zeros(n_m);
        let observed = random_trajectory(n_m, &tg, &mut rng);
        let b = Trajectory::zeros(&tg, n_m);
        let states = prop.solve_forward(&b, &z0).unwrap();
        let residual = observed.difference(&states).unwrap();
        let mu = prop.solve_adjoint(&residual).unwrap();
        let mut w = gradient_from_adjoint(&mu, &mm.d);
        w.scale(-1.0);
        let (rho, _) = line_search(&prop, &residual, &w, None).unwrap();

        // 100-point bracketed scan around the step
        let mut best = (f64::INFINITY, 0.0);
        for s in 0..=100 {
            let cand = rho * (0.5 + s as f64 / 100.0);
            let mut bc = b.clone();
            bc.add_scaled(&w, cand);
            let j = discrete_cost(&prop, &observed, &bc, &z0);
            if j < best.0 {
                best = (j, cand);
            }
        }
        assert!(
            (best.1 - rho).abs() <= 0.011 * rho.abs(),
            "scan argmin {} vs exact {rho}",
            best.1
        );
    }

    #[test]
    fn line_search_rejects_null_directions() {
        let tg = tgrid(1.0, 10);
        let mut rng = StdRng::seed_from_u64(10);
        let mm = random_system(3, &tg, &mut rng, true);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let r = random_trajectory(3, &tg, &mut rng);
        let w = Trajectory::zeros(&tg, 3);
        assert!(matches!(
            line_search(&prop, &r, &w, None),
            Err(Error::Stagnation)
        ));
    }

    /// Manufactures observed states from a known control so that the
    /// inversion has an exactly attainable optimum.
    fn manufactured_problem(
        seed: u64,
        n_m: usize,
        tg: &TimeGrid<f64>,
    ) -> (ModelMatrices<f64>, Trajectory<f64>, DVector<f64>, Trajectory<f64>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mm = random_system(n_m, tg, &mut rng, true);
        let z0 = DVector::zeros(n_m);
        let b_true = random_trajectory(n_m, tg, &mut rng);
        let observed = {
            let prop = Propagator::new(&mm, tg).unwrap();
            prop.solve_forward(&b_true, &z0).unwrap()
        };
        (mm, observed, z0, b_true)
    }

    #[test]
    fn cgm_descends_monotonically_and_converges() {
        let tg = tgrid(1.0, 40);
        let (mm, observed, z0, _) = manufactured_problem(31, 4, &tg);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let j0 = {
            let z = prop.solve_forward(&Trajectory::zeros(&tg, 4), &z0).unwrap();
            cost(&observed, &z).unwrap().total
        };
        // the control-to-state map smooths, so the quadratic's spectrum has a
        // long tail; a six-decade drop is ample evidence of convergence
        let cfg = CgmConfig {
            max_iterations: 300,
            stopping: Some(Stopping::NoiseProjection { j_e: 1e-6 * j0 }),
            regularizer: Regularizer::None,
            restart_period: 1000,
        };
        let run = run_cgm(&prop, &observed, &z0, &cfg, None).unwrap();
        for w in run.j_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "cost increased: {w:?}");
        }
        assert!(
            run.converged,
            "stalled at J = {} from J0 = {j0}",
            run.final_cost()
        );
        assert!(run.final_cost() < 1e-6 * j0);
        // every accepted step was a descent step
        assert!(run.rho_history.iter().all(|r| *r > 0.0));
    }

    #[test]
    fn cgm_with_exact_start_converges_immediately() {
        let tg = tgrid(1.0, 30);
        let (mm, observed, z0, b_true) = manufactured_problem(32, 3, &tg);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let cfg = CgmConfig {
            max_iterations: 50,
            stopping: Some(Stopping::NoiseProjection { j_e: 1e-18 }),
            regularizer: Regularizer::None,
            restart_period: 50,
        };
        let run = run_cgm(&prop, &observed, &z0, &cfg, Some(b_true)).unwrap();
        assert!(run.converged);
        assert_eq!(run.iterations, 0);
    }

    #[test]
    fn tikhonov_at_zero_alpha_reproduces_plain_cgm() {
        let tg = tgrid(1.0, 30);
        let (mm, observed, z0, _) = manufactured_problem(33, 3, &tg);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let base = CgmConfig {
            max_iterations: 25,
            stopping: None,
            regularizer: Regularizer::None,
            restart_period: 50,
        };
        let tik = CgmConfig {
            regularizer: Regularizer::Tikhonov { alpha: 0.0 },
            ..base.clone()
        };
        let a = run_cgm(&prop, &observed, &z0, &base, None).unwrap();
        let b = run_cgm(&prop, &observed, &z0, &tik, None).unwrap();
        assert_eq!(a.j_history, b.j_history);
        for k in 0..a.control.sample_count() {
            for i in 0..3 {
                assert_eq!(a.control.step(k)[i], b.control.step(k)[i]);
            }
        }
    }

    #[test]
    fn tsvd_run_records_ranks_and_descends() {
        let tg = tgrid(1.0, 40);
        let (mm, observed, z0, _) = manufactured_problem(34, 5, &tg);
        let prop = Propagator::new(&mm, &tg).unwrap();
        let cfg = CgmConfig {
            max_iterations: 60,
            stopping: None,
            regularizer: Regularizer::Tsvd { energy: 0.95 },
            restart_period: 50,
        };
        let run = run_cgm(&prop, &observed, &z0, &cfg, None).unwrap();
        assert_eq!(run.rank_history.len(), run.iterations);
        assert!(run.rank_history.iter().all(|r| *r >= 1 && *r <= 5));
        for w in run.j_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn noise_threshold_zero_for_silence() {
        let g = Grid1D::uniform(1.5, 50).unwrap();
        let tg = tgrid(1.0, 10);
        let mat = MaterialParams::new(1.0, 0.03).unwrap();
        let basis = SpectralBasis::build(BasisFamily::Fourier, g.clone(), mat, 0.0, 6).unwrap();
        let noise = Field::zeros(&g, &tg);
        assert_eq!(noise_threshold(&noise, &basis, &tg).unwrap(), 0.0);
    }

    #[test]
    fn noise_threshold_concentrates_at_prediction() {
        use crate::reference::{noise_recordings, NoiseModel};
        let g = Grid1D::uniform(1.5, 200).unwrap();
        let tg = tgrid(40.0, 50);
        let mat = MaterialParams::new(1.0, 0.03).unwrap();
        let basis = SpectralBasis::build(BasisFamily::Fourier, g.clone(), mat, 0.0, 12).unwrap();
        let sigma = 0.3;
        let template = Field::zeros(&g, &tg);
        let mut sum = 0.0;
        let draws = 100;
        for seed in 0..draws {
            let nm = NoiseModel::new(sigma, seed, 0.0).unwrap();
            let e = noise_recordings(&template, &nm);
            sum += noise_threshold(&e, &basis, &tg).unwrap();
        }
        let mean = sum / draws as f64;
        let predicted = discrepancy_tau_default(&basis, &tg) * sigma * sigma;
        assert!(
            (mean - predicted).abs() < 0.1 * predicted,
            "Monte Carlo {mean} vs prediction {predicted}"
        );
        // determinism per seed
        let nm = NoiseModel::new(sigma, 5, 0.0).unwrap();
        let a = noise_threshold(&noise_recordings(&template, &nm), &basis, &tg).unwrap();
        let b = noise_threshold(&noise_recordings(&template, &nm), &basis, &tg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn error_ths_basics() {
        let exact = vec![0.0, 1.0, 0.2, 0.2];
        assert_eq!(error_ths(&exact, &exact).unwrap(), 0.0);
        let shifted: Vec<f64> = exact.iter().map(|q| q + 0.05).collect();
        assert_relative_eq!(error_ths(&shifted, &exact).unwrap(), 0.05);
        assert!(error_ths(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }
}

//! Synthetic data generation: the shipped test cases, an independent
//! finite-volume solver, and seeded Gaussian noise.
//!
//! The finite-volume discretization (implicit Euler, central diffusion,
//! first-order upwind advection, ghost-node Neumann boundaries) deliberately
//! belongs to a different family than the spectral model used for inversion,
//! so reconstructions are never tested against data manufactured by the
//! inversion's own discretization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{Grid1D, MaterialParams, TimeGrid};
use crate::model::BoundaryFluxes;
use crate::scalar::{lit, Scalar};

/// Velocity profile of the shipped test cases:
/// `v(X, t) = 0.1 c (t/t_f) tanh(3 (t/t_f) (X - L/2))`.
pub fn velocity_profile<T: Scalar>(x: T, t: T, mat: MaterialParams<T>, length: T, t_final: T) -> T {
    let s = t / t_final;
    lit::<T>(0.1) * mat.heat_capacity * s * (lit::<T>(3.0) * s * (x - length * lit::<T>(0.5))).tanh()
}

/// Transient source of test case 2:
/// `q(X, t) = (t/30 + sin(t/10)) exp(-(X - L/2)^2 / 0.1)`.
pub fn source_transient<T: Scalar>(x: T, t: T, length: T) -> T {
    let d = x - length * lit::<T>(0.5);
    (t / lit::<T>(30.0) + (t / lit::<T>(10.0)).sin()) * (-d * d / lit::<T>(0.1)).exp()
}

/// Continuous piecewise-linear profile with constant extension outside the
/// outermost breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearSource<T: Scalar> {
    breakpoints: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> PiecewiseLinearSource<T> {
    pub fn new(breakpoints: Vec<T>, values: Vec<T>) -> Result<Self> {
        if breakpoints.len() != values.len() || breakpoints.len() < 2 {
            return Err(Error::invalid("need matching breakpoint/value lists, >= 2 points"));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        Ok(Self {
            breakpoints,
            values,
        })
    }

    pub fn eval(&self, x: T) -> T {
        let n = self.breakpoints.len();
        if x <= self.breakpoints[0] {
            return self.values[0];
        }
        if x >= self.breakpoints[n - 1] {
            return self.values[n - 1];
        }
        let mut i = 0;
        while self.breakpoints[i + 1] < x {
            i += 1;
        }
        let w = (x - self.breakpoints[i]) / (self.breakpoints[i + 1] - self.breakpoints[i]);
        (T::one() - w) * self.values[i] + w * self.values[i + 1]
    }
}

/// Analytic boundary flux description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FluxSpec<T: Scalar> {
    Zero,
    /// `amp * exp(rate * t)`.
    Exponential { amp: T, rate: T },
}

impl<T: Scalar> FluxSpec<T> {
    pub fn value(&self, t: T) -> T {
        match self {
            FluxSpec::Zero => T::zero(),
            FluxSpec::Exponential { amp, rate } => *amp * (*rate * t).exp(),
        }
    }

    pub fn rate(&self, t: T) -> T {
        match self {
            FluxSpec::Zero => T::zero(),
            FluxSpec::Exponential { amp, rate } => *amp * *rate * (*rate * t).exp(),
        }
    }
}

/// Analytic velocity description.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocitySpec<T: Scalar> {
    Zero,
    Uniform(T),
    /// The tanh ramp of [`velocity_profile`].
    TanhRamp,
}

/// Analytic source description.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec<T: Scalar> {
    Zero,
    Uniform(T),
    /// Stationary piecewise-linear profile.
    PiecewiseLinear(PiecewiseLinearSource<T>),
    /// The transient Gaussian of [`source_transient`].
    TransientGaussian,
}

/// Geometry, material, inputs and the true source of a synthetic experiment.
#[derive(Debug, Clone)]
pub struct TestCase<T: Scalar> {
    pub name: String,
    pub grid: Grid1D<T>,
    pub tg: TimeGrid<T>,
    pub mat: MaterialParams<T>,
    pub initial_temperature: T,
    pub velocity: VelocitySpec<T>,
    pub source: SourceSpec<T>,
    pub flux_left: FluxSpec<T>,
    pub flux_right: FluxSpec<T>,
}

/// Default space resolution of the shipped cases (the sensor count of the
/// synthetic observations; chosen so the projected-noise cost level matches
/// the regime the inversion tables are quoted in).
pub const DEFAULT_NODES: usize = 550;
/// Default time resolution. The semi-implicit solver is first order in time
/// and the boundary fluxes grow exponentially, so the step must be small
/// enough to keep the integration error below the measurement noise; 0.02 s
/// is also a realistic infrared frame spacing.
pub const DEFAULT_STEPS: usize = 2000;

impl<T: Scalar> TestCase<T> {
    /// Test case 1 at the default resolution.
    pub fn case_1_default() -> Result<Self> {
        Self::case_1(DEFAULT_NODES, DEFAULT_STEPS)
    }

    /// Test case 2 at the default resolution.
    pub fn case_2_default() -> Result<Self> {
        Self::case_2(DEFAULT_NODES, DEFAULT_STEPS)
    }

    /// Test case 1: stationary piecewise-linear source with kinks at
    /// `X = 0.6` and `X = 0.8`. The shape is a configurable input; the
    /// default magnitude is chosen so that the temperature at the `t = 20 s`
    /// evaluation time gives `SNR ~ 60` at `sigma = 0.3 K` (the ratio keeps
    /// growing with time as the fluxes build up).
    pub fn case_1(nodes: usize, steps: usize) -> Result<Self> {
        let source = PiecewiseLinearSource::new(
            vec![lit(0.0), lit(0.6), lit(0.8), lit(1.5)],
            vec![lit(0.0), lit(4.5), lit(0.9), lit(0.9)],
        )?;
        Ok(Self {
            source: SourceSpec::PiecewiseLinear(source),
            ..Self::base("tc1", nodes, steps)?
        })
    }

    /// Test case 2: smooth transient Gaussian source.
    pub fn case_2(nodes: usize, steps: usize) -> Result<Self> {
        Ok(Self {
            source: SourceSpec::TransientGaussian,
            ..Self::base("tc2", nodes, steps)?
        })
    }

    fn base(name: &str, nodes: usize, steps: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            grid: Grid1D::uniform(lit(1.5), nodes)?,
            tg: TimeGrid::new(lit(40.0), steps)?,
            mat: MaterialParams::new(lit(1.0), lit(0.03))?,
            initial_temperature: T::zero(),
            velocity: VelocitySpec::TanhRamp,
            source: SourceSpec::Zero,
            flux_left: FluxSpec::Exponential {
                amp: lit(-0.005),
                rate: lit(0.1742),
            },
            flux_right: FluxSpec::Exponential {
                amp: lit(0.005),
                rate: lit(0.1249),
            },
        })
    }

    pub fn velocity_at(&self, x: T, t: T) -> T {
        match &self.velocity {
            VelocitySpec::Zero => T::zero(),
            VelocitySpec::Uniform(v) => *v,
            VelocitySpec::TanhRamp => {
                velocity_profile(x, t, self.mat, self.grid.length(), self.tg.t_final())
            }
        }
    }

    pub fn source_at(&self, x: T, t: T) -> T {
        match &self.source {
            SourceSpec::Zero => T::zero(),
            SourceSpec::Uniform(q) => *q,
            SourceSpec::PiecewiseLinear(p) => p.eval(x),
            SourceSpec::TransientGaussian => source_transient(x, t, self.grid.length()),
        }
    }

    /// Velocity samples on the inversion grids.
    pub fn velocity_field(&self) -> Field<T> {
        Field::from_fn(&self.grid, &self.tg, |x, t| self.velocity_at(x, t))
    }

    /// True source samples on the inversion grids.
    pub fn source_field(&self) -> Field<T> {
        Field::from_fn(&self.grid, &self.tg, |x, t| self.source_at(x, t))
    }

    /// Boundary flux samples (analytic time derivatives).
    pub fn boundary_fluxes(&self) -> BoundaryFluxes<T> {
        BoundaryFluxes::from_functions(
            &self.tg,
            |t| self.flux_left.value(t),
            |t| self.flux_right.value(t),
            |t| self.flux_left.rate(t),
            |t| self.flux_right.rate(t),
        )
    }

    /// Spatial mean of the velocity field over space and time; the frozen
    /// coefficient handed to the branch eigenproblem.
    pub fn mean_velocity(&self) -> T {
        let field = self.velocity_field();
        let mut acc = T::zero();
        let mut wsum = T::zero();
        for k in 0..field.time_count() {
            let wt = self.tg.weight(k);
            let profile = field.profile(k);
            acc += wt * self.grid.integrate(&profile);
            wsum += wt * self.grid.length();
        }
        acc / wsum
    }
}

/// Solves the test case with the finite-volume discretization on a grid
/// `refine` times finer in space and time, then restricts the solution back
/// to the inversion grids by direct sampling.
pub fn solve_reference<T: Scalar>(tc: &TestCase<T>, refine: usize) -> Result<Field<T>> {
    if refine < 1 {
        return Err(Error::invalid("refine factor must be at least 1"));
    }
    let coarse_cells = tc.grid.node_count() - 1;
    let n_x = refine * coarse_cells + 1;
    let n_steps = refine * tc.tg.steps();
    let fine_grid = Grid1D::uniform(tc.grid.length(), n_x)?;
    let h = fine_grid.spacing();
    let dt = tc.tg.t_final() / T::from_usize(n_steps).unwrap();
    let cap = tc.mat.heat_capacity;
    let cond = tc.mat.conductivity;

    let mut temperature = vec![tc.initial_temperature; n_x];
    let mut out = Field::zeros(&tc.grid, &tc.tg);
    // the initial field is uniform, so plain truncation restricts it exactly
    out.set_profile(0, &temperature[..tc.grid.node_count()]);

    let two = lit::<T>(2.0);
    let mut lower = vec![T::zero(); n_x];
    let mut diag = vec![T::zero(); n_x];
    let mut upper = vec![T::zero(); n_x];
    let mut rhs = vec![T::zero(); n_x];

    for step in 1..=n_steps {
        let t = dt * T::from_usize(step).unwrap();
        let p1 = tc.flux_left.value(t);
        let p2 = tc.flux_right.value(t);
        let r_diff = cond / (h * h);

        for i in 0..n_x {
            let x = fine_grid.nodes()[i];
            let v = tc.velocity_at(x, t);
            let q = tc.source_at(x, t);
            let mut d = cap / dt + two * r_diff;
            let mut lo = -r_diff;
            let mut up = -r_diff;
            let mut b = cap / dt * temperature[i] + q;
            // first-order upwind advection
            let adv = cap * v / h;
            if v > T::zero() {
                d += adv;
                lo -= adv;
            } else if v < T::zero() {
                d -= adv;
                up += adv;
            }
            if i == 0 {
                // ghost node from -cond (T_1 - T_{-1}) / 2h = p1:
                // T_{-1} = T_1 + 2 h p1 / cond, folded into the stencil
                up += lo;
                b -= lo * two * h * p1 / cond;
                lo = T::zero();
            } else if i == n_x - 1 {
                // ghost node from -cond (T_{n} - T_{n-2}) / 2h = p2
                lo += up;
                b -= up * (-two) * h * p2 / cond;
                up = T::zero();
            }
            lower[i] = lo;
            diag[i] = d;
            upper[i] = up;
            rhs[i] = b;
        }
        solve_tridiagonal(&lower, &mut diag, &upper, &mut rhs)?;
        temperature.copy_from_slice(&rhs);

        if step % refine == 0 {
            let k = step / refine;
            for i in 0..tc.grid.node_count() {
                *out.value_mut(k, i) = temperature[i * refine];
            }
        }
    }
    Ok(out)
}

/// Thomas algorithm; `diag` and `rhs` are consumed as scratch, the solution
/// lands in `rhs`.
fn solve_tridiagonal<T: Scalar>(
    lower: &[T],
    diag: &mut [T],
    upper: &[T],
    rhs: &mut [T],
) -> Result<()> {
    let n = diag.len();
    for i in 1..n {
        if diag[i - 1] == T::zero() {
            return Err(Error::SingularStep { step: i });
        }
        let w = lower[i] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    if diag[n - 1] == T::zero() {
        return Err(Error::SingularStep { step: n });
    }
    rhs[n - 1] /= diag[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = (rhs[i] - upper[i] * rhs[i + 1]) / diag[i];
    }
    Ok(())
}

/// Additive zero-mean Gaussian noise with an explicit seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel<T: Scalar> {
    /// Standard deviation of the temperature noise, K.
    pub sigma: T,
    pub seed: u64,
    /// Velocity noise standard deviation as a fraction of `max |v|`.
    pub velocity_noise_fraction: T,
}

impl<T: Scalar> NoiseModel<T> {
    pub fn new(sigma: T, seed: u64, velocity_noise_fraction: T) -> Result<Self> {
        if sigma < T::zero() || velocity_noise_fraction < T::zero() {
            return Err(Error::invalid("noise magnitudes must be >= 0"));
        }
        Ok(Self {
            sigma,
            seed,
            velocity_noise_fraction,
        })
    }
}

/// Independent sub-streams of one experiment seed.
#[derive(Debug, Clone, Copy)]
pub enum NoiseStream {
    Temperature = 1,
    Velocity = 2,
    /// A second temperature-noise realization standing in for the noise
    /// recordings an experimentalist takes before the test.
    Recordings = 3,
}

fn seeded_rng(seed: u64, stream: NoiseStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn gaussian_field<T: Scalar>(template: &Field<T>, sigma: T, mut rng: ChaCha8Rng) -> Field<T> {
    if sigma == T::zero() {
        return template.map(|_| T::zero());
    }
    let normal = Normal::new(0.0_f64, sigma.to_f64().unwrap()).expect("sigma validated");
    let mut noise = template.clone();
    for k in 0..noise.time_count() {
        for i in 0..noise.node_count() {
            *noise.value_mut(k, i) = T::from_f64(normal.sample(&mut rng)).unwrap();
        }
    }
    noise
}

/// `field + e` with `e ~ N(0, sigma^2)` i.i.d. per sample, deterministic per
/// seed.
pub fn add_noise<T: Scalar>(field: &Field<T>, nm: &NoiseModel<T>) -> Field<T> {
    if nm.sigma == T::zero() {
        return field.clone();
    }
    let noise = gaussian_field(field, nm.sigma, seeded_rng(nm.seed, NoiseStream::Temperature));
    field.add_scaled(&noise, T::one()).expect("same shape")
}

/// Velocity observations perturbed by `N(0, (fraction max|v|)^2)` noise.
pub fn noisy_velocity<T: Scalar>(velocity: &Field<T>, nm: &NoiseModel<T>) -> Field<T> {
    let sigma = nm.velocity_noise_fraction * velocity.max_abs();
    if sigma == T::zero() {
        return velocity.clone();
    }
    let noise = gaussian_field(velocity, sigma, seeded_rng(nm.seed, NoiseStream::Velocity));
    velocity.add_scaled(&noise, T::one()).expect("same shape")
}

/// A fresh noise realization with the data's statistics, deterministic per
/// seed but independent of the noise injected into the observations.
pub fn noise_recordings<T: Scalar>(template: &Field<T>, nm: &NoiseModel<T>) -> Field<T> {
    gaussian_field(template, nm.sigma, seeded_rng(nm.seed, NoiseStream::Recordings))
}

/// Signal-to-noise ratio `max{T} / (2 sigma)` at one time slice (the final
/// instant when `time_index` is `None`).
pub fn snr<T: Scalar>(field: &Field<T>, sigma: T, time_index: Option<usize>) -> Result<T> {
    if sigma <= T::zero() {
        return Err(Error::invalid("SNR is undefined for sigma <= 0"));
    }
    let k = time_index.unwrap_or(field.time_count() - 1);
    if k >= field.time_count() {
        return Err(Error::invalid("time index out of range"));
    }
    let max = field
        .profile(k)
        .into_iter()
        .fold(T::min_value().unwrap_or(-T::one() / T::default_epsilon()), T::max);
    Ok(max / (lit::<T>(2.0) * sigma))
}

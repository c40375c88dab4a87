//! Truncated SVD filtering of the gradient trajectory.
//!
//! The gradient of the cost is a trajectory `grad(t)` of mode coefficients.
//! Its energy over the time window is carried by the Gram matrix
//! `W = int grad(t) grad(t)^T dt`; projecting every time sample onto the
//! leading eigenvectors of `W` keeps the descent content and discards the
//! noise-dominated directions. The retained rank is the smallest one whose
//! eigenvalues carry the requested share (95% by default) of the trace.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::MaterialParams;
use crate::model::Trajectory;
use crate::scalar::{lit, Scalar};

/// Eigendecomposition of the gradient Gram matrix with the selected rank.
#[derive(Debug, Clone)]
pub struct GramFactorization<T: Scalar> {
    /// The Gram matrix `W` itself.
    pub matrix: DMatrix<T>,
    /// Orthogonal eigenvector matrix, columns sorted by eigenvalue.
    pub vectors: DMatrix<T>,
    /// Eigenvalues sorted descending, clamped at zero.
    pub eigenvalues: Vec<T>,
    /// Retained rank.
    pub rank: usize,
    /// Cumulative eigenvalue share at the retained rank.
    pub energy_fraction: T,
}

/// Time-quadrature Gram matrix of a trajectory, symmetric by construction.
pub fn gram_matrix<T: Scalar>(grad: &Trajectory<T>) -> DMatrix<T> {
    let n = grad.mode_count();
    let mut w = DMatrix::zeros(n, n);
    for k in 0..grad.sample_count() {
        let g = grad.step(k);
        let wt = grad.time().weight(k);
        for i in 0..n {
            let gi = g[i] * wt;
            for j in 0..=i {
                w[(i, j)] += gi * g[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            w[(j, i)] = w[(i, j)];
        }
    }
    w
}

fn sorted_eigen<T: Scalar>(w: DMatrix<T>) -> (DMatrix<T>, Vec<T>) {
    let n = w.nrows();
    let eig = SymmetricEigen::new(w);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].partial_cmp(&eig.eigenvalues[*a]).unwrap());
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let values = order
        .iter()
        .map(|i| eig.eigenvalues[*i].max(T::zero()))
        .collect();
    (vectors, values)
}

/// Rank selection: smallest `r` whose leading eigenvalues carry at least the
/// requested energy share.
fn select_rank<T: Scalar>(eigenvalues: &[T], energy: T) -> (usize, T) {
    let total = eigenvalues.iter().fold(T::zero(), |a, b| a + *b);
    if total <= T::zero() {
        return (0, T::one());
    }
    let mut cum = T::zero();
    for (i, ev) in eigenvalues.iter().enumerate() {
        cum += *ev;
        if cum / total >= energy {
            return (i + 1, cum / total);
        }
    }
    (eigenvalues.len(), T::one())
}

/// Projects the trajectory onto the dominant eigenvectors of its Gram matrix.
///
/// Returns the filtered trajectory together with the factorization used. A
/// trajectory with zero energy comes back unchanged (all zero) with rank 0.
pub fn svd_filter<T: Scalar>(
    grad: &Trajectory<T>,
    energy: T,
) -> Result<(Trajectory<T>, GramFactorization<T>)> {
    if energy <= T::zero() || energy > T::one() {
        return Err(Error::invalid("energy share must lie in (0, 1]"));
    }
    let w = gram_matrix(grad);
    let (vectors, eigenvalues) = sorted_eigen(w.clone());
    let (rank, energy_fraction) = select_rank(&eigenvalues, energy);
    let fact = GramFactorization {
        matrix: w,
        vectors,
        eigenvalues,
        rank,
        energy_fraction,
    };
    if rank == 0 {
        let zero = grad.map_steps(|s| DVector::zeros(s.len()));
        return Ok((zero, fact));
    }
    if rank == grad.mode_count() {
        return Ok((grad.clone(), fact));
    }
    let u_r = fact.vectors.columns(0, rank).clone_owned();
    let filtered = grad.map_steps(|g| &u_r * (u_r.transpose() * g));
    Ok((filtered, fact))
}

/// Empirical-mode source initializer.
#[derive(Debug, Clone)]
pub struct EmpiricalInitializer<T: Scalar> {
    /// Source field recovered from the mode-filtered data by inverting the
    /// heat equation pointwise.
    pub source: Field<T>,
    /// Energy share of every empirical spatial mode, descending.
    pub energy_shares: Vec<T>,
    /// Number of modes kept.
    pub rank: usize,
}

/// Builds an initial source guess from the dominant empirical spatial modes
/// of the temperature data.
///
/// The data snapshots are projected onto the leading `n_modes` eigenvectors
/// of their spatial Gram matrix (the discrete Karhunen-Loeve modes); the
/// filtered field is smooth enough to evaluate the heat operator explicitly,
/// which yields the source without any further regularization. Useful as a
/// warm start for branch-basis inversions.
pub fn empirical_mode_initializer<T: Scalar>(
    data: &Field<T>,
    n_modes: usize,
    mat: MaterialParams<T>,
    velocity: &Field<T>,
) -> Result<EmpiricalInitializer<T>> {
    if n_modes < 1 {
        return Err(Error::invalid("need at least one empirical mode"));
    }
    if velocity.node_count() != data.node_count() || velocity.time_count() != data.time_count() {
        return Err(Error::invalid("velocity samples do not match the data"));
    }
    let n_x = data.node_count();
    let n_t = data.time_count();

    // spatial Gram matrix over the time samples
    let mut w = DMatrix::zeros(n_x, n_x);
    for k in 0..n_t {
        let snap = data.profile(k);
        for i in 0..n_x {
            for j in 0..=i {
                w[(i, j)] += snap[i] * snap[j];
            }
        }
    }
    for i in 0..n_x {
        for j in 0..i {
            w[(j, i)] = w[(i, j)];
        }
    }
    let (vectors, eigenvalues) = sorted_eigen(w);
    let total = eigenvalues.iter().fold(T::zero(), |a, b| a + *b);
    if total <= T::zero() {
        // no signal at all: the initializer is identically zero
        return Ok(EmpiricalInitializer {
            source: data.map(|_| T::zero()),
            energy_shares: vec![T::zero(); n_x.min(n_modes)],
            rank: 0,
        });
    }
    let tol = lit::<T>(1e-12) * eigenvalues[0];
    let numerical_rank = eigenvalues.iter().filter(|ev| **ev > tol).count();
    if n_modes > numerical_rank {
        return Err(Error::invalid(format!(
            "requested {n_modes} empirical modes but the data has numerical rank {numerical_rank}"
        )));
    }
    let energy_shares: Vec<T> = eigenvalues.iter().map(|ev| *ev / total).collect();

    // filter the snapshots
    let u_r = vectors.columns(0, n_modes).clone_owned();
    let mut filtered = data.clone();
    for k in 0..n_t {
        let snap = DVector::from_vec(data.profile(k));
        let smooth = &u_r * (u_r.transpose() * snap);
        for i in 0..n_x {
            *filtered.value_mut(k, i) = smooth[i];
        }
    }

    // invert the heat operator on the filtered field with finite differences
    let h = data.positions()[1] - data.positions()[0];
    let dt = data.times()[1] - data.times()[0];
    let half = lit::<T>(0.5);
    let two = lit::<T>(2.0);
    let cap = mat.heat_capacity;
    let cond = mat.conductivity;
    let mut source = data.map(|_| T::zero());
    for k in 0..n_t {
        for i in 1..n_x - 1 {
            let t_dot = if k == 0 {
                (filtered.value(1, i) - filtered.value(0, i)) / dt
            } else if k == n_t - 1 {
                (filtered.value(n_t - 1, i) - filtered.value(n_t - 2, i)) / dt
            } else {
                (filtered.value(k + 1, i) - filtered.value(k - 1, i)) * half / dt
            };
            let t_x = (filtered.value(k, i + 1) - filtered.value(k, i - 1)) * half / h;
            let t_xx = (filtered.value(k, i + 1) - two * filtered.value(k, i)
                + filtered.value(k, i - 1))
                / (h * h);
            *source.value_mut(k, i) =
                cap * t_dot + cap * velocity.value(k, i) * t_x - cond * t_xx;
        }
        // one-sided stencils at the walls are noise amplifiers; extend the
        // neighboring interior estimate instead
        *source.value_mut(k, 0) = source.value(k, 1);
        *source.value_mut(k, n_x - 1) = source.value(k, n_x - 2);
    }
    Ok(EmpiricalInitializer {
        source,
        energy_shares,
        rank: n_modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid1D, TimeGrid};
    use approx::assert_relative_eq;

    fn tg(steps: usize) -> TimeGrid<f64> {
        TimeGrid::new(2.0, steps).unwrap()
    }

    fn trajectory_from(steps: Vec<Vec<f64>>, grid: &TimeGrid<f64>) -> Trajectory<f64> {
        Trajectory::from_steps(
            grid,
            steps.into_iter().map(DVector::from_vec).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gram_of_zero_trajectory_is_zero() {
        let t = Trajectory::<f64>::zeros(&tg(4), 3);
        let w = gram_matrix(&t);
        assert!(w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gram_of_constant_trajectory_is_rank_one() {
        let grid = tg(10);
        let g = vec![1.0, -2.0, 0.5];
        let t = trajectory_from(vec![g.clone(); 11], &grid);
        let w = gram_matrix(&t);
        // W = t_f * g g^T
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(w[(i, j)], 2.0 * g[i] * g[j], max_relative = 1e-12);
            }
        }
        let (_, fact) = svd_filter(&t, 0.95).unwrap();
        assert_eq!(fact.rank, 1);
    }

    #[test]
    fn gram_matches_fine_riemann_oracle() {
        // oracle: resample the trajectory 10x finer with linear interpolation
        // and accumulate midpoint products
        let grid = tg(64);
        let steps: Vec<Vec<f64>> = (0..65)
            .map(|k| {
                let t = k as f64 * 2.0 / 64.0;
                vec![(1.3 * t).sin(), (0.7 * t).cos() - 0.2, t * t * 0.1]
            })
            .collect();
        let traj = trajectory_from(steps.clone(), &grid);
        let w = gram_matrix(&traj);

        let mut oracle = DMatrix::<f64>::zeros(3, 3);
        let fine = 640;
        let dt = 2.0 / fine as f64;
        for m in 0..fine {
            let t = (m as f64 + 0.5) * dt;
            let pos = t / (2.0 / 64.0);
            let k = (pos.floor() as usize).min(63);
            let w_lin = pos - k as f64;
            let g: Vec<f64> = (0..3)
                .map(|i| steps[k][i] * (1.0 - w_lin) + steps[k + 1][i] * w_lin)
                .collect();
            for i in 0..3 {
                for j in 0..3 {
                    oracle[(i, j)] += g[i] * g[j] * dt;
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let denom = oracle[(i, j)].abs().max(1e-3);
                assert!(
                    (w[(i, j)] - oracle[(i, j)]).abs() / denom < 5e-3,
                    "entry ({i},{j}): {} vs oracle {}",
                    w[(i, j)],
                    oracle[(i, j)]
                );
            }
        }
    }

    /// Builds a trajectory whose Gram spectrum is exactly `shares` (times an
    /// arbitrary scale): orthonormal directions modulated by time profiles
    /// that are orthogonal under the trapezoid quadrature.
    fn trajectory_with_spectrum(shares: &[f64], grid: &TimeGrid<f64>) -> Trajectory<f64> {
        let n = shares.len();
        let t_f = grid.t_final();
        let steps: Vec<Vec<f64>> = grid
            .times()
            .iter()
            .map(|t| {
                (0..n)
                    .map(|i| {
                        // sqrt(share) * sqrt(2/t_f) * cos(i pi t / t_f) profile on
                        // direction e_i; trapezoid keeps these orthogonal
                        let profile = if i == 0 {
                            (1.0 / t_f).sqrt()
                        } else {
                            (2.0 / t_f).sqrt()
                                * (i as f64 * std::f64::consts::PI * t / t_f).cos()
                        };
                        shares[i].sqrt() * profile
                    })
                    .collect()
            })
            .collect();
        trajectory_from(steps, grid)
    }

    #[test]
    fn rank_rule_on_prescribed_spectrum() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let traj = trajectory_with_spectrum(&[0.90, 0.06, 0.04], &grid);
        let (_, fact) = svd_filter(&traj, 0.95).unwrap();
        assert_eq!(fact.rank, 2, "eigenvalues {:?}", fact.eigenvalues);
        assert!(fact.energy_fraction >= 0.95);
    }

    #[test]
    fn rank_monotone_in_energy() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let traj = trajectory_with_spectrum(&[0.55, 0.25, 0.12, 0.05, 0.03], &grid);
        let r90 = svd_filter(&traj, 0.90).unwrap().1.rank;
        let r95 = svd_filter(&traj, 0.95).unwrap().1.rank;
        let r99 = svd_filter(&traj, 0.99).unwrap().1.rank;
        assert!(r90 <= r95 && r95 <= r99, "ranks {r90}, {r95}, {r99}");
    }

    #[test]
    fn full_energy_keeps_the_trajectory() {
        let grid = tg(12);
        let steps: Vec<Vec<f64>> = (0..13)
            .map(|k| vec![0.3 * k as f64, (k as f64).sin(), 1.0])
            .collect();
        let traj = trajectory_from(steps, &grid);
        let (filtered, fact) = svd_filter(&traj, 1.0).unwrap();
        assert_eq!(fact.rank, 3);
        for k in 0..13 {
            for i in 0..3 {
                assert!((filtered.step(k)[i] - traj.step(k)[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_trajectory_filters_to_rank_zero() {
        let traj = Trajectory::<f64>::zeros(&tg(5), 4);
        let (filtered, fact) = svd_filter(&traj, 0.95).unwrap();
        assert_eq!(fact.rank, 0);
        assert!(filtered.steps().iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn filter_is_idempotent() {
        let grid = tg(20);
        let steps: Vec<Vec<f64>> = (0..21)
            .map(|k| {
                let t = k as f64 * 0.1;
                vec![t.sin(), t.cos(), 0.3 * t, 0.01 * (7.0 * t).sin()]
            })
            .collect();
        let traj = trajectory_from(steps, &grid);
        let (once, fact1) = svd_filter(&traj, 0.95).unwrap();
        let (twice, fact2) = svd_filter(&once, 0.95).unwrap();
        assert!(fact2.rank <= fact1.rank);
        for k in 0..21 {
            for i in 0..4 {
                assert!(
                    (once.step(k)[i] - twice.step(k)[i]).abs() < 1e-12,
                    "step {k} mode {i}"
                );
            }
        }
    }

    #[test]
    fn energy_split_is_pythagorean() {
        let grid = tg(30);
        let steps: Vec<Vec<f64>> = (0..31)
            .map(|k| {
                let t = k as f64 / 15.0;
                vec![(2.0 * t).sin(), t, (5.0 * t).cos() * 0.3, 0.1 - t * t * 0.05]
            })
            .collect();
        let traj = trajectory_from(steps, &grid);
        let (filtered, fact) = svd_filter(&traj, 0.9).unwrap();
        let discarded: f64 = fact.eigenvalues[fact.rank..].iter().sum();
        let total = traj.norm_sq();
        let kept = filtered.norm_sq();
        assert_relative_eq!(total, kept + discarded, max_relative = 1e-8);
        // descent alignment of the filtered gradient
        assert!(filtered.integral_dot(&traj) >= 0.0);
    }

    #[test]
    fn factorization_invariants() {
        let grid = tg(25);
        let steps: Vec<Vec<f64>> = (0..26)
            .map(|k| {
                let t = k as f64 * 0.08;
                vec![t.exp() * 0.01, (3.0 * t).sin(), 1.0 - t]
            })
            .collect();
        let traj = trajectory_from(steps, &grid);
        let (_, fact) = svd_filter(&traj, 0.95).unwrap();
        // W = U S U^T and U^T U = I
        let s = DMatrix::from_diagonal(&DVector::from_vec(fact.eigenvalues.clone()));
        let rebuilt = &fact.vectors * s * fact.vectors.transpose();
        let scale = fact.eigenvalues[0];
        assert!((&rebuilt - &fact.matrix).abs().max() <= 1e-10 * scale);
        let gram = fact.vectors.transpose() * &fact.vectors;
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!((gram - eye).abs().max() <= 1e-10);
        for w in fact.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(fact.eigenvalues.iter().all(|ev| *ev >= 0.0));
    }

    #[test]
    fn empirical_modes_capture_rank_one_data() {
        let g = Grid1D::uniform(1.5, 60).unwrap();
        let t = TimeGrid::new(4.0, 30).unwrap();
        let data = Field::from_fn(&g, &t, |x: f64, tt: f64| (1.0 + tt) * (2.0 * x).sin());
        let v = Field::zeros(&g, &t);
        let mat = MaterialParams::new(1.0, 0.03).unwrap();
        let init = empirical_mode_initializer(&data, 1, mat, &v).unwrap();
        assert!(init.energy_shares[0] > 1.0 - 1e-10);
    }

    #[test]
    fn empirical_modes_reject_rank_overflow() {
        let g = Grid1D::uniform(1.5, 40).unwrap();
        let t = TimeGrid::new(4.0, 10).unwrap();
        let data = Field::from_fn(&g, &t, |x: f64, tt: f64| (1.0 + tt) * (2.0 * x).sin());
        let v = Field::zeros(&g, &t);
        let mat = MaterialParams::new(1.0, 0.03).unwrap();
        assert!(empirical_mode_initializer(&data, 5, mat, &v).is_err());
    }

    #[test]
    fn empirical_modes_of_zero_data_are_zero() {
        let g = Grid1D::uniform(1.5, 40).unwrap();
        let t = TimeGrid::new(4.0, 10).unwrap();
        let data = Field::zeros(&g, &t);
        let v = Field::zeros(&g, &t);
        let mat = MaterialParams::new(1.0, 0.03).unwrap();
        let init = empirical_mode_initializer(&data, 3, mat, &v).unwrap();
        assert_eq!(init.rank, 0);
        assert!(init.source.iter().all(|q| q == 0.0));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_trajectory() -> impl Strategy<Value = Trajectory<f64>> {
            proptest::collection::vec(
                proptest::collection::vec(-2.0_f64..2.0, 4),
                13,
            )
            .prop_map(|steps| {
                let grid = TimeGrid::new(1.5, 12).unwrap();
                Trajectory::from_steps(
                    &grid,
                    steps.into_iter().map(DVector::from_vec).collect(),
                )
                .unwrap()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            /// Retained rank never shrinks as the energy demand grows.
            #[test]
            fn rank_monotone_in_energy(traj in arb_trajectory()) {
                let r90 = svd_filter(&traj, 0.90).unwrap().1.rank;
                let r95 = svd_filter(&traj, 0.95).unwrap().1.rank;
                let r99 = svd_filter(&traj, 0.99).unwrap().1.rank;
                prop_assert!(r90 <= r95 && r95 <= r99);
            }

            /// Kept plus discarded energy reproduces the total.
            #[test]
            fn energy_split_is_conservative(traj in arb_trajectory()) {
                let (filtered, fact) = svd_filter(&traj, 0.9).unwrap();
                let discarded: f64 = fact.eigenvalues[fact.rank..].iter().sum();
                let total = traj.norm_sq();
                let kept = filtered.norm_sq();
                prop_assert!((total - kept - discarded).abs() <= 1e-8 * total.max(1e-12));
                // the filtered trajectory still points downhill
                prop_assert!(filtered.integral_dot(&traj) >= -1e-12);
            }
        }
    }
}

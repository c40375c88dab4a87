//! Spectral mode families and truncation-order selection.

mod branch;
mod fourier;

pub use branch::{BranchBasis, BranchRoot};
pub use fourier::FourierBasis;

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{Grid1D, MaterialParams};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisFamily {
    Fourier,
    Branch,
}

impl std::fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BasisFamily::Fourier => write!(f, "fourier"),
            BasisFamily::Branch => write!(f, "branch"),
        }
    }
}

/// Either mode family behind one projection/reconstruction surface.
#[derive(Debug, Clone)]
pub enum SpectralBasis<T: Scalar> {
    Fourier(FourierBasis<T>),
    Branch(BranchBasis<T>),
}

impl<T: Scalar> SpectralBasis<T> {
    pub fn build(
        family: BasisFamily,
        grid: Grid1D<T>,
        mat: MaterialParams<T>,
        v0: T,
        n_modes: usize,
    ) -> Result<Self> {
        match family {
            BasisFamily::Fourier => Ok(SpectralBasis::Fourier(FourierBasis::new(grid, n_modes)?)),
            BasisFamily::Branch => Ok(SpectralBasis::Branch(BranchBasis::new(
                grid, mat, v0, n_modes,
            )?)),
        }
    }

    pub fn family(&self) -> BasisFamily {
        match self {
            SpectralBasis::Fourier(_) => BasisFamily::Fourier,
            SpectralBasis::Branch(_) => BasisFamily::Branch,
        }
    }

    pub fn grid(&self) -> &Grid1D<T> {
        match self {
            SpectralBasis::Fourier(b) => b.grid(),
            SpectralBasis::Branch(b) => b.grid(),
        }
    }

    pub fn mode_count(&self) -> usize {
        match self {
            SpectralBasis::Fourier(b) => b.mode_count(),
            SpectralBasis::Branch(b) => b.mode_count(),
        }
    }

    pub fn eigenvalues(&self) -> Vec<T> {
        match self {
            SpectralBasis::Fourier(b) => b.eigenvalues().to_vec(),
            SpectralBasis::Branch(b) => b.eigenvalues().to_vec(),
        }
    }

    pub fn mode(&self, i: usize) -> Vec<T> {
        match self {
            SpectralBasis::Fourier(b) => b.mode(i),
            SpectralBasis::Branch(b) => b.mode(i),
        }
    }

    /// State coefficients of one snapshot.
    pub fn project(&self, snapshot: &[T]) -> Result<DVector<T>> {
        match self {
            SpectralBasis::Fourier(b) => b.project(snapshot),
            SpectralBasis::Branch(b) => b.project(snapshot),
        }
    }

    /// Pointwise mode sum.
    pub fn reconstruct(&self, coeffs: &DVector<T>) -> Result<Vec<T>> {
        match self {
            SpectralBasis::Fourier(b) => b.reconstruct(coeffs),
            SpectralBasis::Branch(b) => b.reconstruct(coeffs),
        }
    }

    /// Source field from control coefficients. The branch decomposition
    /// carries an extra heat-capacity factor: `q = sum b_i c V_i`.
    pub fn reconstruct_source(&self, coeffs: &DVector<T>) -> Result<Vec<T>> {
        match self {
            SpectralBasis::Fourier(b) => b.reconstruct(coeffs),
            SpectralBasis::Branch(b) => {
                let mut q = b.reconstruct(coeffs)?;
                let c = b.material().heat_capacity;
                for v in &mut q {
                    *v *= c;
                }
                Ok(q)
            }
        }
    }

    /// Control coefficients of a known source snapshot (the inverse of
    /// [`Self::reconstruct_source`] on the span).
    pub fn project_source(&self, snapshot: &[T]) -> Result<DVector<T>> {
        match self {
            SpectralBasis::Fourier(b) => b.project(snapshot),
            SpectralBasis::Branch(b) => {
                let c = b.material().heat_capacity;
                Ok(b.project(snapshot)? / c)
            }
        }
    }

    /// Writes the sampled modes as CSV, one mode per column, header row
    /// carrying the eigenvalues.
    pub fn write_modes_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::from("x");
        for ev in self.eigenvalues() {
            let _ = write!(out, ",{}", ev.to_f64().unwrap_or(f64::NAN));
        }
        out.push('\n');
        let grid = self.grid();
        let samples: Vec<Vec<T>> = (0..self.mode_count()).map(|i| self.mode(i)).collect();
        for j in 0..grid.node_count() {
            let _ = write!(out, "{}", grid.nodes()[j].to_f64().unwrap_or(f64::NAN));
            for mode in &samples {
                let _ = write!(out, ",{}", mode[j].to_f64().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Settings for the truncation-order search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationConfig<T: Scalar> {
    /// Threshold multiplier `m` of criterion 1 (`tau < m sigma`), `> 1`.
    pub threshold_multiplier: T,
    /// Relative-decrease tolerance of criterion 2, in `(0, 1)`.
    pub relative_tolerance: T,
    /// Noise standard deviation of the data, K.
    pub noise_std: T,
    /// Hard cap on the mode count.
    pub max_modes: usize,
}

impl<T: Scalar> TruncationConfig<T> {
    pub fn new(
        threshold_multiplier: T,
        relative_tolerance: T,
        noise_std: T,
        max_modes: usize,
    ) -> Result<Self> {
        if threshold_multiplier <= T::one() {
            return Err(Error::invalid("threshold multiplier must exceed 1"));
        }
        if relative_tolerance <= T::zero() || relative_tolerance >= T::one() {
            return Err(Error::invalid("relative tolerance must lie in (0, 1)"));
        }
        if noise_std < T::zero() {
            return Err(Error::invalid("noise standard deviation must be >= 0"));
        }
        if max_modes < 1 {
            return Err(Error::invalid("max_modes must be at least 1"));
        }
        Ok(Self {
            threshold_multiplier,
            relative_tolerance,
            noise_std,
            max_modes,
        })
    }

    /// The crate defaults: `m = 1.05`, `eps = 0.01`, `N_max = 60`.
    pub fn with_noise(noise_std: T, max_modes: usize) -> Self {
        Self {
            threshold_multiplier: lit(1.05),
            relative_tolerance: lit(0.01),
            noise_std,
            max_modes,
        }
    }
}

/// Outcome of the truncation-order search.
#[derive(Debug, Clone)]
pub struct ModeSelection<T: Scalar> {
    pub mode_count: usize,
    /// Set when neither criterion fired before the cap.
    pub capped: bool,
    /// Which criterion fired at `mode_count` (1 or 2, 0 when capped).
    pub criterion: u8,
    /// RMS filtering residual `tau_N` for `N = 1..=max`, indexed by `N - 1`.
    pub residuals: Vec<T>,
}

/// Picks the smallest mode count at which the filtering residual either
/// drops below `m sigma` or stops improving by more than the relative
/// tolerance. `data` is the raw observed field (the criterion filters the
/// observations as recorded; the flux-driven boundary slopes are part of
/// the signal being resolved) and `basis` must be built with
/// `cfg.max_modes` modes.
pub fn select_mode_count<T: Scalar>(
    data: &Field<T>,
    basis: &SpectralBasis<T>,
    cfg: &TruncationConfig<T>,
) -> Result<ModeSelection<T>> {
    if data.node_count() != basis.grid().node_count() {
        return Err(Error::invalid("data and basis grids differ"));
    }
    if basis.mode_count() < cfg.max_modes {
        return Err(Error::invalid(
            "basis carries fewer modes than the truncation cap",
        ));
    }
    if data.sample_total() == 0 {
        return Err(Error::invalid("empty data field"));
    }
    let n_max = cfg.max_modes;
    let n_x = data.node_count();
    let n_t = data.time_count();
    let total = T::from_usize(n_x * n_t).unwrap();

    // residual energy after keeping the leading N modes, accumulated by
    // peeling one mode at a time from each snapshot
    let mut sum_sq = vec![T::zero(); n_max + 1];
    let modes: Vec<Vec<T>> = (0..n_max).map(|i| basis.mode(i)).collect();
    for k in 0..n_t {
        let snapshot = data.profile(k);
        let coeffs = basis.project(&snapshot)?;
        let mut residual = snapshot;
        for n in 0..n_max {
            let c = coeffs[n];
            for (r, m) in residual.iter_mut().zip(modes[n].iter()) {
                *r -= c * *m;
            }
            if n < n_max {
                let e = residual.iter().fold(T::zero(), |a, v| a + *v * *v);
                sum_sq[n + 1] += e;
            }
        }
    }
    let residuals: Vec<T> = (1..=n_max).map(|n| (sum_sq[n] / total).sqrt()).collect();

    let threshold = cfg.threshold_multiplier * cfg.noise_std;
    for n in 1..=n_max {
        let tau = residuals[n - 1];
        if cfg.noise_std > T::zero() && tau < threshold {
            return Ok(ModeSelection {
                mode_count: n,
                capped: false,
                criterion: 1,
                residuals,
            });
        }
        if n < n_max {
            let tau_next = residuals[n];
            let converged = if tau == T::zero() {
                true
            } else {
                (tau - tau_next) / tau < cfg.relative_tolerance
            };
            if converged {
                return Ok(ModeSelection {
                    mode_count: n,
                    capped: false,
                    criterion: 2,
                    residuals,
                });
            }
        }
    }
    Ok(ModeSelection {
        mode_count: n_max,
        capped: true,
        criterion: 0,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;

    fn grid() -> Grid1D<f64> {
        Grid1D::uniform(1.5, 400).unwrap()
    }

    fn mat() -> MaterialParams<f64> {
        MaterialParams::new(1.0, 0.03).unwrap()
    }

    #[test]
    fn zero_snapshot_projects_to_zero() {
        for family in [BasisFamily::Fourier, BasisFamily::Branch] {
            let b = SpectralBasis::build(family, grid(), mat(), 0.0, 6).unwrap();
            let z = b.project(&vec![0.0; 400]).unwrap();
            assert!(z.iter().all(|v| *v == 0.0));
            let f = b.reconstruct(&z).unwrap();
            assert!(f.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn coefficient_roundtrip_fourier() {
        let b = SpectralBasis::build(BasisFamily::Fourier, grid(), mat(), 0.0, 30).unwrap();
        let coeffs = DVector::from_fn(30, |i, _| ((i * 7 % 11) as f64 - 5.0) * 0.1);
        let field = b.reconstruct(&coeffs).unwrap();
        let back = b.project(&field).unwrap();
        for i in 0..30 {
            assert!(
                (back[i] - coeffs[i]).abs() < 1e-8,
                "fourier coeff {i}: {} vs {}",
                back[i],
                coeffs[i]
            );
        }
    }

    #[test]
    fn coefficient_roundtrip_branch_at_quadrature_level() {
        // the branch pair is bi-orthogonal only to quadrature accuracy
        // (off-diagonals of order 1e-5 on a 400-node grid), so the
        // roundtrip defect sits at that level rather than at 1e-8
        let b = SpectralBasis::build(BasisFamily::Branch, grid(), mat(), 0.004, 30).unwrap();
        let coeffs = DVector::from_fn(30, |i, _| ((i * 5 % 13) as f64 - 6.0) * 0.1);
        let field = b.reconstruct(&coeffs).unwrap();
        let back = b.project(&field).unwrap();
        for i in 0..30 {
            assert!(
                (back[i] - coeffs[i]).abs() < 1e-3,
                "branch coeff {i}: {} vs {}",
                back[i],
                coeffs[i]
            );
        }
    }

    #[test]
    fn source_roundtrip_carries_capacity_factor() {
        let c = 2.5;
        let mat = MaterialParams::new(c, 0.03).unwrap();
        let b = SpectralBasis::build(BasisFamily::Branch, grid(), mat, 0.0, 4).unwrap();
        let coeffs = DVector::from_vec(vec![1.0, -0.5, 0.25, 0.0]);
        let q = b.reconstruct_source(&coeffs).unwrap();
        // plain temperature reconstruction times c
        let t = b.reconstruct(&coeffs).unwrap();
        for (a, bb) in q.iter().zip(t.iter()) {
            assert!((a - c * bb).abs() < 1e-14);
        }
        let back = b.project_source(&q).unwrap();
        for i in 0..4 {
            assert!((back[i] - coeffs[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn selection_stops_at_span_dimension() {
        let g = grid();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let b5 = SpectralBasis::build(BasisFamily::Fourier, g.clone(), mat(), 0.0, 5).unwrap();
        let l = g.length();
        let data = Field::from_fn(&g, &tg, |x, t| {
            let mut v = 0.0;
            for i in 0..5 {
                let amp = 1.0 / (1.0 + i as f64) * (1.0 + t);
                v += amp
                    * if i == 0 {
                        0.5
                    } else {
                        (i as f64 * std::f64::consts::PI * x / l).cos()
                    };
            }
            v
        });
        let _ = b5;
        let basis = SpectralBasis::build(BasisFamily::Fourier, g, mat(), 0.0, 12).unwrap();
        let cfg = TruncationConfig::with_noise(0.0, 12);
        let sel = select_mode_count(&data, &basis, &cfg).unwrap();
        assert!(sel.mode_count <= 5, "selected {}", sel.mode_count);
        assert_eq!(sel.criterion, 2);
        assert!(!sel.capped);
    }

    #[test]
    fn selection_monotone_in_noise_threshold() {
        let g = grid();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let l = g.length();
        let data = Field::from_fn(&g, &tg, |x, t| {
            (1.0 + t) * ((2.0 * std::f64::consts::PI * x / l).cos() + 0.3 * (7.0 * x).sin())
        });
        let basis = SpectralBasis::build(BasisFamily::Fourier, g, mat(), 0.0, 40).unwrap();
        let mut last = usize::MAX;
        for sigma in [0.1, 0.3, 0.6] {
            let cfg = TruncationConfig::with_noise(sigma, 40);
            let sel = select_mode_count(&data, &basis, &cfg).unwrap();
            assert!(
                sel.mode_count <= last,
                "sigma {sigma} selected {} after {last}",
                sel.mode_count
            );
            last = sel.mode_count;
        }
    }

    #[test]
    fn selection_caps_with_warning() {
        let g = grid();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        // white-ish deterministic junk that no small basis fits
        let data = Field::from_fn(&g, &tg, |x, t| ((x * 9301.0 + t * 49297.0).sin() * 233280.0).fract());
        let basis = SpectralBasis::build(BasisFamily::Fourier, g, mat(), 0.0, 5).unwrap();
        let cfg = TruncationConfig {
            threshold_multiplier: 1.1,
            relative_tolerance: 1e-6,
            noise_std: 1e-12,
            max_modes: 5,
        };
        let sel = select_mode_count(&data, &basis, &cfg).unwrap();
        assert!(sel.capped);
        assert_eq!(sel.mode_count, 5);
    }
}

//! Cosine (Neumann) mode family on `[0, L]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::Grid1D;
use crate::scalar::{lit, Scalar};

/// Fourier basis `{1/2, cos(i pi X / L)}` sampled on a grid.
///
/// The leading mode is the constant `1/2`, so that every coefficient is the
/// plain cosine-series coefficient `(2/L) \int f cos(i pi X / L) dX`.
#[derive(Debug, Clone)]
pub struct FourierBasis<T: Scalar> {
    grid: Grid1D<T>,
    /// `modes[(i, j)] = V_i(X_j)`.
    modes: DMatrix<T>,
    /// Eigenvalues `-(i pi / L)^2` of the second-derivative operator.
    eigenvalues: Vec<T>,
}

impl<T: Scalar> FourierBasis<T> {
    pub fn new(grid: Grid1D<T>, mode_count: usize) -> Result<Self> {
        if mode_count < 1 {
            return Err(Error::invalid("mode count must be at least 1"));
        }
        let length = grid.length();
        let pi = T::pi();
        let half = lit::<T>(0.5);
        let modes = DMatrix::from_fn(mode_count, grid.node_count(), |i, j| {
            if i == 0 {
                half
            } else {
                let freq = T::from_usize(i).unwrap() * pi / length;
                (freq * grid.nodes()[j]).cos()
            }
        });
        let eigenvalues = (0..mode_count)
            .map(|i| {
                let freq = T::from_usize(i).unwrap() * pi / length;
                -freq * freq
            })
            .collect();
        Ok(Self {
            grid,
            modes,
            eigenvalues,
        })
    }

    pub fn grid(&self) -> &Grid1D<T> {
        &self.grid
    }

    pub fn mode_count(&self) -> usize {
        self.modes.nrows()
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    /// Samples of mode `i` on the grid nodes.
    pub fn mode(&self, i: usize) -> Vec<T> {
        self.modes.row(i).iter().copied().collect()
    }

    pub fn mode_value(&self, i: usize, node: usize) -> T {
        self.modes[(i, node)]
    }

    /// Cosine-series coefficients of a field snapshot via trapezoid quadrature.
    pub fn project(&self, snapshot: &[T]) -> Result<DVector<T>> {
        if snapshot.len() != self.grid.node_count() {
            return Err(Error::invalid(format!(
                "snapshot has {} samples, grid has {} nodes",
                snapshot.len(),
                self.grid.node_count()
            )));
        }
        let two_over_l = lit::<T>(2.0) / self.grid.length();
        let pi = T::pi();
        let mut coeffs = DVector::zeros(self.mode_count());
        for i in 0..self.mode_count() {
            let integral = if i == 0 {
                self.grid.integrate(snapshot)
            } else {
                let freq = T::from_usize(i).unwrap() * pi / self.grid.length();
                let cosine: Vec<T> = self.grid.nodes().iter().map(|x| (freq * *x).cos()).collect();
                self.grid.integrate_product(snapshot, &cosine)
            };
            coeffs[i] = two_over_l * integral;
        }
        Ok(coeffs)
    }

    /// Pointwise sum of weighted modes.
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
}

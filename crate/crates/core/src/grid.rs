//! Spatial and temporal grids plus material constants.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Uniform 1D grid on `[0, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D<T: Scalar> {
    length: T,
    nodes: Vec<T>,
}

impl<T: Scalar> Grid1D<T> {
    /// Uniform grid with `node_count` nodes, `X[0] = 0`, `X[last] = length`.
    pub fn uniform(length: T, node_count: usize) -> Result<Self> {
        if length <= T::zero() {
            return Err(Error::invalid("grid length must be positive"));
        }
        if node_count < 3 {
            return Err(Error::invalid("grid needs at least 3 nodes"));
        }
        let n = T::from_usize(node_count - 1).unwrap();
        let nodes = (0..node_count)
            .map(|i| length * T::from_usize(i).unwrap() / n)
            .collect();
        Ok(Self { length, nodes })
    }

    /// Builds a grid from explicit nodes, validating uniformity.
    pub fn from_nodes(nodes: Vec<T>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::invalid("grid needs at least 3 nodes"));
        }
        if nodes[0] != T::zero() {
            return Err(Error::invalid("grid must start at X = 0"));
        }
        let length = *nodes.last().unwrap();
        if length <= T::zero() {
            return Err(Error::invalid("grid length must be positive"));
        }
        let h = nodes[1] - nodes[0];
        let tol = lit::<T>(1e-12) * length;
        for w in nodes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("grid nodes must be strictly increasing"));
            }
            if ((w[1] - w[0]) - h).abs() > tol {
                return Err(Error::invalid("grid spacing must be uniform"));
            }
        }
        Ok(Self { length, nodes })
    }

    pub fn length(&self) -> T {
        self.length
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn spacing(&self) -> T {
        self.nodes[1] - self.nodes[0]
    }

    /// Trapezoid quadrature of samples given on the grid nodes.
    pub fn integrate(&self, values: &[T]) -> T {
        debug_assert_eq!(values.len(), self.nodes.len());
        let h = self.spacing();
        let half = lit::<T>(0.5);
        let mut acc = half * (values[0] + values[values.len() - 1]);
        for v in &values[1..values.len() - 1] {
            acc += *v;
        }
        acc * h
    }

    /// Trapezoid quadrature of the product of two sample sets.
    pub fn integrate_product(&self, a: &[T], b: &[T]) -> T {
        debug_assert_eq!(a.len(), b.len());
        let h = self.spacing();
        let half = lit::<T>(0.5);
        let n = a.len();
        let mut acc = half * (a[0] * b[0] + a[n - 1] * b[n - 1]);
        for i in 1..n - 1 {
            acc += a[i] * b[i];
        }
        acc * h
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> T {
        let h = self.spacing();
        if i == 0 || i + 1 == self.nodes.len() {
            h * lit::<T>(0.5)
        } else {
            h
        }
    }
}

/// Uniform time grid on `[0, t_final]` with `steps` intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T: Scalar> {
    t_final: T,
    steps: usize,
    times: Vec<T>,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(t_final: T, steps: usize) -> Result<Self> {
        if t_final <= T::zero() {
            return Err(Error::invalid("final time must be positive"));
        }
        if steps < 2 {
            return Err(Error::invalid("time grid needs at least 2 steps"));
        }
        let n = T::from_usize(steps).unwrap();
        let times = (0..=steps)
            .map(|k| t_final * T::from_usize(k).unwrap() / n)
            .collect();
        Ok(Self {
            t_final,
            steps,
            times,
        })
    }

    pub fn t_final(&self) -> T {
        self.t_final
    }

    /// Number of time steps (intervals); there are `steps + 1` sample instants.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sample_count(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> T {
        self.times[1] - self.times[0]
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    /// Trapezoid weight of time node `k`.
    pub fn weight(&self, k: usize) -> T {
        if k == 0 || k == self.steps {
            self.dt() * lit::<T>(0.5)
        } else {
            self.dt()
        }
    }

    /// Index of the sample instant closest to `t`.
    pub fn nearest_index(&self, t: T) -> usize {
        let dt = self.dt();
        let k = (t / dt).round().to_usize().unwrap_or(0);
        k.min(self.steps)
    }
}

/// Constant material properties of the specimen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams<T: Scalar> {
    /// Volumetric heat capacity, J/(cm^3 K).
    pub heat_capacity: T,
    /// Thermal conductivity, W/(cm K).
    pub conductivity: T,
}

impl<T: Scalar> MaterialParams<T> {
    pub fn new(heat_capacity: T, conductivity: T) -> Result<Self> {
        if heat_capacity <= T::zero() || conductivity <= T::zero() {
            return Err(Error::invalid("material constants must be positive"));
        }
        Ok(Self {
            heat_capacity,
            conductivity,
        })
    }
}

//! Space-time scalar fields sampled on the inversion grids, with CSV I/O.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{Grid1D, TimeGrid};
use crate::scalar::Scalar;

/// A field `f(X, t)` sampled on a space grid and a time grid.
///
/// Values are stored row-major in time: `values[(k, i)]` is the sample at
/// time index `k`, node index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T: Scalar> {
    positions: Vec<T>,
    times: Vec<T>,
    values: DMatrix<T>,
}

impl<T: Scalar> Field<T> {
    pub fn zeros(grid: &Grid1D<T>, tg: &TimeGrid<T>) -> Self {
        Self {
            positions: grid.nodes().to_vec(),
            times: tg.times().to_vec(),
            values: DMatrix::zeros(tg.sample_count(), grid.node_count()),
        }
    }

    /// Samples `f(x, t)` on the grid product.
    pub fn from_fn(grid: &Grid1D<T>, tg: &TimeGrid<T>, mut f: impl FnMut(T, T) -> T) -> Self {
        let mut out = Self::zeros(grid, tg);
        for k in 0..out.times.len() {
            let t = out.times[k];
            for i in 0..out.positions.len() {
                out.values[(k, i)] = f(out.positions[i], t);
            }
        }
        out
    }

    pub fn from_values(positions: Vec<T>, times: Vec<T>, values: DMatrix<T>) -> Result<Self> {
        if values.nrows() != times.len() || values.ncols() != positions.len() {
            return Err(Error::invalid("field dimensions inconsistent with grids"));
        }
        Ok(Self {
            positions,
            times,
            values,
        })
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn time_count(&self) -> usize {
        self.times.len()
    }

    pub fn value(&self, time_index: usize, node: usize) -> T {
        self.values[(time_index, node)]
    }

    pub fn value_mut(&mut self, time_index: usize, node: usize) -> &mut T {
        &mut self.values[(time_index, node)]
    }

    /// Spatial profile at one time index.
    pub fn profile(&self, time_index: usize) -> Vec<T> {
        (0..self.node_count())
            .map(|i| self.values[(time_index, i)])
            .collect()
    }

    /// Overwrites the spatial profile at one time index.
    pub fn set_profile(&mut self, time_index: usize, profile: &[T]) {
        debug_assert_eq!(profile.len(), self.node_count());
        for (i, v) in profile.iter().enumerate() {
            self.values[(time_index, i)] = *v;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.values.iter().copied()
    }

    pub fn sample_total(&self) -> usize {
        self.values.len()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            positions: self.positions.clone(),
            times: self.times.clone(),
            values: self.values.map(f),
        }
    }

    /// Pointwise combination `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: T) -> Result<Self> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::invalid("field shapes differ"));
        }
        Ok(Self {
            positions: self.positions.clone(),
            times: self.times.clone(),
            values: &self.values + &other.values * scale,
        })
    }

    pub fn max_value(&self) -> T {
        self.values
            .iter()
            .copied()
            .fold(T::min_value().unwrap_or(-T::one() / T::default_epsilon()), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Relative L2 distance `||self - other|| / ||other||` over all samples.
    pub fn relative_l2_distance(&self, other: &Self) -> Result<T> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::invalid("field shapes differ"));
        }
        let mut num = T::zero();
        let mut den = T::zero();
        for (a, b) in self.values.iter().zip(other.values.iter()) {
            let d = *a - *b;
            num += d * d;
            den += *b * *b;
        }
        if den == T::zero() {
            return Err(Error::invalid("reference field is identically zero"));
        }
        Ok((num / den).sqrt())
    }

    /// Writes the field as CSV: first row is the node positions, first column
    /// the sample times, body the values. Numbers are printed with the
    /// shortest representation that parses back to the identical bits.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str("t\\x");
        for x in &self.positions {
            let _ = write!(out, ",{}", DisplayExact(*x));
        }
        out.push('\n');
        for k in 0..self.times.len() {
            let _ = write!(out, "{}", DisplayExact(self.times[k]));
            for i in 0..self.positions.len() {
                let _ = write!(out, ",{}", DisplayExact(self.values[(k, i)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_string(&std::fs::read_to_string(path)?)
    }

    pub fn from_csv_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty field CSV".into()))?;
        let positions: Vec<T> = header
            .split(',')
            .skip(1)
            .map(parse_scalar)
            .collect::<Result<_>>()?;
        if positions.is_empty() {
            return Err(Error::Parse("field CSV has no space nodes".into()));
        }
        let mut times = Vec::new();
        let mut rows: Vec<Vec<T>> = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            let t = parse_scalar(
                cells
                    .next()
                    .ok_or_else(|| Error::Parse("missing time cell".into()))?,
            )?;
            let row: Vec<T> = cells.map(parse_scalar).collect::<Result<_>>()?;
            if row.len() != positions.len() {
                return Err(Error::Parse(format!(
                    "row has {} values, expected {}",
                    row.len(),
                    positions.len()
                )));
            }
            times.push(t);
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse("field CSV has no time rows".into()));
        }
        let values = DMatrix::from_fn(times.len(), positions.len(), |k, i| rows[k][i]);
        Field::from_values(positions, times, values)
    }
}

fn parse_scalar<T: Scalar>(cell: &str) -> Result<T> {
    let x: f64 = cell
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("bad number {cell:?}: {e}")))?;
    T::from_f64(x).ok_or_else(|| Error::Parse(format!("value {x} not representable")))
}

/// Shortest round-trip formatting (Rust's float Display guarantees that the
/// printed string parses back to the same bits).
struct DisplayExact<T>(T);

impl<T: Scalar> std::fmt::Display for DisplayExact<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(x) = self.0.to_f64() {
            if x == x.trunc() && x.abs() < 1e15 {
                return write!(f, "{x:.1}");
            }
            write!(f, "{x}")
        } else {
            write!(f, "{:e}", self.0)
        }
    }
}

/// Sample mean and population standard deviation of a slice.
pub fn mean_std<T: Scalar>(samples: &[T]) -> (T, T) {
    let n = T::from_usize(samples.len()).unwrap();
    let mean = samples.iter().fold(T::zero(), |a, b| a + *b) / n;
    let var = samples
        .iter()
        .fold(T::zero(), |a, b| a + (*b - mean) * (*b - mean))
        / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid1D, TimeGrid};

    fn small_field() -> Field<f64> {
        let g = Grid1D::uniform(1.5, 7).unwrap();
        let tg = TimeGrid::new(2.0, 4).unwrap();
        Field::from_fn(&g, &tg, |x, t| (3.1 * x + 0.7 * t).sin() * 1.0e-3 + x * t)
    }

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let f = small_field();
        let text = f.to_csv_string();
        let g = Field::<f64>::from_csv_string(&text).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn csv_roundtrip_survives_awkward_values() {
        let g = Grid1D::uniform(1.0, 3).unwrap();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let mut f = Field::zeros(&g, &tg);
        *f.value_mut(0, 0) = 0.1 + 0.2; // 0.30000000000000004
        *f.value_mut(1, 1) = -1.0 / 3.0;
        *f.value_mut(2, 2) = 1.0e-300;
        let h = Field::<f64>::from_csv_string(&f.to_csv_string()).unwrap();
        assert_eq!(f, h);
    }

    #[test]
    fn mean_std_of_constant() {
        let (m, s) = mean_std(&[2.0_f64; 10]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn relative_distance_of_identical_fields_is_zero() {
        let f = small_field();
        assert_eq!(f.relative_l2_distance(&f).unwrap(), 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Arbitrary finite values survive the CSV round trip bit-exactly.
            #[test]
            fn csv_roundtrip_is_exact(values in proptest::collection::vec(-1.0e12_f64..1.0e12, 6)) {
                let g = Grid1D::uniform(1.0, 3).unwrap();
                let tg = TimeGrid::new(1.0, 2).unwrap();
                let mut f = Field::zeros(&g, &tg);
                let mut it = values.into_iter();
                for k in 0..2 {
                    for i in 0..3 {
                        *f.value_mut(k, i) = it.next().unwrap();
                    }
                }
                let back = Field::<f64>::from_csv_string(&f.to_csv_string()).unwrap();
                prop_assert_eq!(f, back);
            }
        }
    }
}

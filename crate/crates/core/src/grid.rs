use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// Discretization `0 = t_0 < t_1 < ... < t_K = T` of the time horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return arg("time grid needs at least two points");
        }
        if points[0] != 0.0 {
            return arg(format!("time grid must start at 0, got {}", points[0]));
        }
        for w in points.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return arg("time grid must be strictly increasing and finite");
            }
        }
        Ok(Self { points })
    }

    /// Uniform grid with `steps` cells on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return arg(format!("horizon must be positive, got {horizon}"));
        }
        if steps == 0 {
            return arg("uniform grid needs at least one step");
        }
        let h = horizon / steps as f64;
        let mut points: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
        points[steps] = horizon;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of cells `K`.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn t(&self, k: usize) -> f64 {
        self.points[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.points[k + 1] - self.points[k]
    }

    pub fn is_uniform(&self) -> bool {
        let h = self.horizon() / self.steps() as f64;
        (0..self.steps()).all(|k| (self.dt(k) - h).abs() <= 1e-12 * h.max(1.0))
    }

    /// Index of the grid point equal to `t` up to a relative tolerance.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let scale = self.horizon().max(1.0);
        let pos = self
            .points
            .partition_point(|&p| p < t - 1e-9 * scale);
        if pos < self.points.len() && (self.points[pos] - t).abs() <= 1e-9 * scale {
            Ok(pos)
        } else {
            arg(format!("time {t} is not a grid point"))
        }
    }

    /// Uniform refinement splitting every cell into `factor` pieces.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return arg("refinement factor must be positive");
        }
        let mut points = Vec::with_capacity(self.steps() * factor + 1);
        for k in 0..self.steps() {
            let (a, b) = (self.points[k], self.points[k + 1]);
            for j in 0..factor {
                points.push(a + (b - a) * j as f64 / factor as f64);
            }
        }
        points.push(self.horizon());
        Ok(Self { points })
    }

    /// Keeps every `factor`-th point; `steps` must be divisible by `factor`.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return arg(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.steps()
            ));
        }
        Ok(Self {
            points: self.points.iter().step_by(factor).copied().collect(),
        })
    }

    /// Cell index `k` with `t_k <= t < t_{k+1}` (last cell for `t = T`).
    pub fn cell_of(&self, t: f64) -> usize {
        let k = self.points.partition_point(|&p| p <= t);
        k.saturating_sub(1).min(self.steps() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_endpoints() {
        let g = TimeGrid::uniform(0.5, 512).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.horizon(), 0.5);
        assert_eq!(g.steps(), 512);
        assert!(g.is_uniform());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 0.2]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.2, 0.2]).is_err());
        assert!(TimeGrid::uniform(-1.0, 4).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
    }

    #[test]
    fn index_and_cells() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.index_of(0.75).unwrap(), 3);
        assert!(g.index_of(0.3).is_err());
        assert_eq!(g.cell_of(0.3), 1);
        assert_eq!(g.cell_of(1.0), 3);
        assert_eq!(g.cell_of(0.0), 0);
    }

    #[test]
    fn refine_then_coarsen_round_trips() {
        let g = TimeGrid::uniform(0.5, 8).unwrap();
        let f = g.refine(4).unwrap();
        assert_eq!(f.steps(), 32);
        let c = f.coarsen(4).unwrap();
        for (a, b) in c.points().iter().zip(g.points()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(f.coarsen(5).is_err());
    }
}

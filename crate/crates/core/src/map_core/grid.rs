use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2-D point in the ego frame: x forward, y left, meters.
pub type Point2 = [f64; 2];

const EXTENT_TOLERANCE: f64 = 1e-9;

/// Metric ↔ cell mapping of the bird's-eye-view grid.
///
/// Row 0 is the front edge (largest x) and column 0 is the left edge
/// (largest y). A cell `(row, col)` has its center at
/// `x = x_max − (row + ½)·res`, `y = y_max − (col + ½)·res`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGridSpec {
    pub rows: usize,
    pub cols: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub resolution: f64,
}

impl BevGridSpec {
    pub fn new(
        rows: usize,
        cols: usize,
        x_range: [f64; 2],
        y_range: [f64; 2],
        resolution: f64,
    ) -> Result<Self> {
        let grid = BevGridSpec {
            rows,
            cols,
            x_range,
            y_range,
            resolution,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// 200×100 cells at 0.3 m over [−30, 30] × [−15, 15] m.
    pub fn full_scale() -> Self {
        BevGridSpec {
            rows: 200,
            cols: 100,
            x_range: [-30.0, 30.0],
            y_range: [-15.0, 15.0],
            resolution: 0.3,
        }
    }

    /// Same extent as [`BevGridSpec::full_scale`] at 1 m cells (60×30).
    pub fn desk() -> Self {
        BevGridSpec {
            rows: 60,
            cols: 30,
            x_range: [-30.0, 30.0],
            y_range: [-15.0, 15.0],
            resolution: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid needs at least 2x2 cells, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "grid resolution must be positive, got {}",
                self.resolution
            )));
        }
        let check = |name: &str, count: usize, range: [f64; 2]| {
            let extent = range[1] - range[0];
            if (count as f64 * self.resolution - extent).abs() > EXTENT_TOLERANCE {
                Err(Error::InvalidConfig(format!(
                    "{name}: {count} cells x {} m != extent {extent} m",
                    self.resolution
                )))
            } else {
                Ok(())
            }
        };
        check("rows", self.rows, self.x_range)?;
        check("cols", self.cols, self.y_range)
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn x_extent(&self) -> f64 {
        self.x_range[1] - self.x_range[0]
    }

    pub fn y_extent(&self) -> f64 {
        self.y_range[1] - self.y_range[0]
    }

    pub fn contains(&self, p: Point2) -> bool {
        p[0] >= self.x_range[0]
            && p[0] <= self.x_range[1]
            && p[1] >= self.y_range[0]
            && p[1] <= self.y_range[1]
    }

    /// Center of cell `(row, col)` in meters.
    pub fn cell_center(&self, row: usize, col: usize) -> Result<Point2> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::OutOfRange(format!(
                "cell ({row}, {col}) outside {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok(self.cell_center_unchecked(row, col))
    }

    pub(crate) fn cell_center_unchecked(&self, row: usize, col: usize) -> Point2 {
        [
            self.x_range[1] - (row as f64 + 0.5) * self.resolution,
            self.y_range[1] - (col as f64 + 0.5) * self.resolution,
        ]
    }

    /// Cell containing `p`; points on the rear/right edges map to the last
    /// row/column.
    pub fn metric_to_cell(&self, p: Point2) -> Result<(usize, usize)> {
        if !self.contains(p) {
            return Err(Error::OutOfRange(format!(
                "point ({}, {}) outside BEV range",
                p[0], p[1]
            )));
        }
        let row = ((self.x_range[1] - p[0]) / self.resolution).floor() as usize;
        let col = ((self.y_range[1] - p[1]) / self.resolution).floor() as usize;
        Ok((row.min(self.rows - 1), col.min(self.cols - 1)))
    }

    /// Maps a metric point to `(u, v)` in `[0, 1]²`, `u` along x and `v`
    /// along y.
    pub fn normalize(&self, p: Point2) -> Point2 {
        [
            (p[0] - self.x_range[0]) / self.x_extent(),
            (p[1] - self.y_range[0]) / self.y_extent(),
        ]
    }

    pub fn denormalize(&self, uv: Point2) -> Point2 {
        [
            self.x_range[0] + uv[0] * self.x_extent(),
            self.y_range[0] + uv[1] * self.y_extent(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_grid_first_cell() {
        let g = BevGridSpec::full_scale();
        g.validate().unwrap();
        let c = g.cell_center(0, 0).unwrap();
        assert!((c[0] - 29.85).abs() < 1e-12 && (c[1] - 14.85).abs() < 1e-12);
    }

    #[test]
    fn small_grid_first_cell() {
        let g = BevGridSpec::new(2, 2, [-1.0, 1.0], [-1.0, 1.0], 1.0).unwrap();
        assert_eq!(g.cell_center(0, 0).unwrap(), [0.5, 0.5]);
        assert_eq!(g.cell_center(1, 1).unwrap(), [-0.5, -0.5]);
    }

    #[test]
    fn round_trip_within_half_cell() {
        let g = BevGridSpec::full_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = [
                rng.random_range(-30.0..=30.0),
                rng.random_range(-15.0..=15.0),
            ];
            let (r, c) = g.metric_to_cell(p).unwrap();
            let q = g.cell_center(r, c).unwrap();
            let err = (q[0] - p[0]).abs().max((q[1] - p[1]).abs());
            assert!(err <= g.resolution / 2.0 + 1e-12, "{p:?} -> {q:?}");
        }
    }

    #[test]
    fn out_of_range_is_rejected() {
        let g = BevGridSpec::desk();
        assert!(g.cell_center(60, 0).is_err());
        assert!(g.metric_to_cell([30.5, 0.0]).is_err());
    }

    #[test]
    fn invalid_extents_are_rejected() {
        assert!(BevGridSpec::new(10, 10, [-30.0, 30.0], [-15.0, 15.0], 1.0).is_err());
        assert!(BevGridSpec::new(1, 2, [0.0, 1.0], [0.0, 2.0], 1.0).is_err());
        assert!(BevGridSpec::new(2, 2, [0.0, 0.0], [0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn normalize_center() {
        let g = BevGridSpec::desk();
        assert_eq!(g.denormalize([0.5, 0.5]), [0.0, 0.0]);
        assert_eq!(g.normalize([30.0, -15.0]), [1.0, 0.0]);
    }
}

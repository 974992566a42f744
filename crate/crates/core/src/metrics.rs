//! Elevation maps and the DEM error metrics (AED, RED, Coverage).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("height map has no valid cells")]
    AllInvalid,
    #[error("ground truth has no valid cells")]
    EmptyGroundTruth,
}

/// Regular grid of elevations; NaN marks an invalid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeightMap {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    /// Planar `(x, y)` of the center of cell `(0, 0)`; rows advance in `y`, columns in `x`.
    pub origin: [f64; 2],
    pub values: Vec<f64>,
}

impl HeightMap {
    pub fn new(rows: usize, cols: usize, cell_size: f64, origin: [f64; 2], values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "height map needs rows * cols values");
        Self { rows, cols, cell_size, origin, values }
    }

    pub fn filled_with(rows: usize, cols: usize, cell_size: f64, value: f64) -> Self {
        Self::new(rows, cols, cell_size, [0.5 * cell_size; 2], vec![value; rows * cols])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.get(r, c).is_finite()
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }

    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        [self.origin[0] + c as f64 * self.cell_size, self.origin[1] + r as f64 * self.cell_size]
    }

    /// Same grid with `f` applied to every valid value.
    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> Self {
        let values = self.values.iter().map(|&v| if v.is_finite() { f(v) } else { f64::NAN }).collect();
        Self { values, ..self.clone() }
    }

    fn check_shape(&self, other: &HeightMap) -> Result<(), MetricsError> {
        if self.shape() != other.shape() {
            return Err(MetricsError::ShapeMismatch(self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Replaces every invalid cell by the Euclidean-nearest valid cell
/// (ties: smallest row, then smallest column).
pub fn nearest_fill(map: &HeightMap) -> Result<HeightMap, MetricsError> {
    let (rows, cols) = map.shape();
    let valid = |r: usize, c: usize| map.is_valid(r, c);
    if map.valid_count() == 0 {
        return Err(MetricsError::AllInvalid);
    }
    if map.valid_count() == map.values.len() {
        return Ok(map.clone());
    }
    // The nearest valid cell to any invalid cell always has an invalid 4-neighbor:
    // otherwise its neighbor one step toward the query would be valid and strictly closer.
    let mut sources = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !valid(r, c) {
                continue;
            }
            let edge = (r > 0 && !valid(r - 1, c))
                || (r + 1 < rows && !valid(r + 1, c))
                || (c > 0 && !valid(r, c - 1))
                || (c + 1 < cols && !valid(r, c + 1));
            if edge {
                sources.push((r as i64, c as i64));
            }
        }
    }
    let mut out = map.clone();
    for r in 0..rows {
        for c in 0..cols {
            if valid(r, c) {
                continue;
            }
            // sources are in row-major order, so the first strict minimum wins ties.
            let mut best = (i64::MAX, 0usize);
            for (i, &(sr, sc)) in sources.iter().enumerate() {
                let d = (sr - r as i64).pow(2) + (sc - c as i64).pow(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            let (sr, sc) = sources[best.1];
            out.values[r * cols + c] = map.get(sr as usize, sc as usize);
        }
    }
    Ok(out)
}

fn gt_cells(gt: &HeightMap) -> Result<Vec<usize>, MetricsError> {
    let idx: Vec<usize> = (0..gt.values.len()).filter(|&i| gt.values[i].is_finite()).collect();
    if idx.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(idx)
}

/// Mean absolute elevation difference over ground-truth-valid cells; holes in
/// `pred` are nearest-filled first.
pub fn aed(pred: &HeightMap, gt: &HeightMap) -> Result<f64, MetricsError> {
    pred.check_shape(gt)?;
    let filled = nearest_fill(pred)?;
    let cells = gt_cells(gt)?;
    let sum: f64 = cells.iter().map(|&i| (filled.values[i] - gt.values[i]).abs()).sum();
    Ok(sum / cells.len() as f64)
}

/// Each cell minus the mean of the valid cells in its square window of
/// half-width `radius` cells (truncated at the borders). Invalid cells stay NaN.
pub fn subtract_local_mean(map: &HeightMap, radius: usize) -> HeightMap {
    let (rows, cols) = map.shape();
    // Summed-area tables of values and valid counts, (rows + 1) x (cols + 1).
    let w = cols + 1;
    let mut sum = vec![0.0; (rows + 1) * w];
    let mut cnt = vec![0i64; (rows + 1) * w];
    for r in 0..rows {
        for c in 0..cols {
            let v = map.get(r, c);
            let (s, n) = if v.is_finite() { (v, 1) } else { (0.0, 0) };
            let i = (r + 1) * w + c + 1;
            sum[i] = s + sum[i - 1] + sum[i - w] - sum[i - w - 1];
            cnt[i] = n + cnt[i - 1] + cnt[i - w] - cnt[i - w - 1];
        }
    }
    let mut out = map.clone();
    for r in 0..rows {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius + 1).min(rows));
        for c in 0..cols {
            let v = map.get(r, c);
            if !v.is_finite() {
                continue;
            }
            let (c0, c1) = (c.saturating_sub(radius), (c + radius + 1).min(cols));
            let s = sum[r1 * w + c1] - sum[r0 * w + c1] - sum[r1 * w + c0] + sum[r0 * w + c0];
            let n = cnt[r1 * w + c1] - cnt[r0 * w + c1] - cnt[r1 * w + c0] + cnt[r0 * w + c0];
            out.values[r * cols + c] = v - s / n as f64;
        }
    }
    out
}

/// Window half-width in cells for a window of side `window` (map units).
pub fn window_radius(window: f64, cell_size: f64) -> usize {
    (window / (2.0 * cell_size)).floor().max(0.0) as usize
}

/// Relative elevation difference: AED after removing each map's local mean.
pub fn red(pred: &HeightMap, gt: &HeightMap, window: f64) -> Result<f64, MetricsError> {
    pred.check_shape(gt)?;
    let radius = window_radius(window, gt.cell_size);
    let filled = nearest_fill(pred)?;
    let rel_pred = subtract_local_mean(&filled, radius);
    let rel_gt = subtract_local_mean(gt, radius);
    aed(&rel_pred, &rel_gt)
}

/// Fraction of ground-truth-valid cells where `pred` is valid and within
/// relative error `tau`. Holes in `pred` count as failures.
pub fn coverage_at(pred: &HeightMap, gt: &HeightMap, tau: f64) -> Result<f64, MetricsError> {
    pred.check_shape(gt)?;
    let cells = gt_cells(gt)?;
    let hits = cells
        .iter()
        .filter(|&&i| {
            let (p, g) = (pred.values[i], gt.values[i]);
            p.is_finite() && (p - g).abs() / (g.abs() + 1e-12) <= tau
        })
        .count();
    Ok(hits as f64 / cells.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aed: f64,
    pub red: f64,
    pub coverage: f64,
    pub tau: f64,
    pub window: f64,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub gt_valid_cells: usize,
    pub pred_valid_cells: usize,
}

pub fn evaluate(pred: &HeightMap, gt: &HeightMap, window: f64, tau: f64) -> Result<EvalReport, MetricsError> {
    Ok(EvalReport {
        aed: aed(pred, gt)?,
        red: red(pred, gt, window)?,
        coverage: coverage_at(pred, gt, tau)?,
        tau,
        window,
        cell_size: gt.cell_size,
        rows: gt.rows,
        cols: gt.cols,
        gt_valid_cells: gt.valid_count(),
        pred_valid_cells: pred.valid_count(),
    })
}

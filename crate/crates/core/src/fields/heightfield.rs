//! Explicit height field: a bilinear grid of raw heights and column
//! embeddings over a planar rectangle.
//!
//! Grid nodes sit at the centers of a `rows x cols` partition of
//! `x_range x y_range`. Queries interpolate the raw values first and then
//! apply `h_offset + h_scale * tanh(.)`, so the height bound is exact.
//! Queries outside the node span clamp to the border.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::IdAlloc;
use crate::metrics::HeightMap;
use crate::params::{Param, ParamGroup};
use crate::tape::{sigmoid, GatherPlan, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeightFieldConfig {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// `(rows, cols)`; rows run along y, columns along x.
    pub grid_res: (usize, usize),
    pub feature_dim: usize,
    pub h_scale: f64,
    pub h_offset: f64,
    /// Sigmoid sharpness of the column density (1/scene unit).
    pub k1: f64,
    /// Density plateau below the surface (1/scene unit).
    pub k2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeightField {
    pub config: HeightFieldConfig,
    /// `rows x cols` unbounded raw heights.
    pub raw: Param,
    /// `rows*cols x feature_dim` column embeddings.
    pub features: Param,
}

impl HeightField {
    /// Flat field at `h_offset` with small random embeddings.
    pub fn new(config: HeightFieldConfig, ids: &mut IdAlloc, rng: &mut impl Rng) -> Self {
        let (rows, cols) = config.grid_res;
        assert!(rows >= 1 && cols >= 1, "height grid needs at least one node");
        let raw = Param::zeros(ids.next(), "height.raw", vec![rows, cols], ParamGroup::Grid);
        let feats = (0..rows * cols * config.feature_dim).map(|_| rng.random_range(-1e-2..1e-2)).collect();
        let features = Param::new(ids.next(), "height.features", vec![rows * cols, config.feature_dim], feats, ParamGroup::Grid);
        Self { config, raw, features }
    }

    pub fn cell_size(&self) -> (f64, f64) {
        let (rows, cols) = self.config.grid_res;
        ((self.config.x_range[1] - self.config.x_range[0]) / cols as f64, (self.config.y_range[1] - self.config.y_range[0]) / rows as f64)
    }

    /// Planar position of node `(row, col)`.
    pub fn node_position(&self, row: usize, col: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        (self.config.x_range[0] + (col as f64 + 0.5) * dx, self.config.y_range[0] + (row as f64 + 0.5) * dy)
    }

    /// Bilinear corners `(node index, weight)` for a planar query.
    pub fn bilinear(&self, x: f64, y: f64) -> [(u32, f64); 4] {
        let (rows, cols) = self.config.grid_res;
        let (dx, dy) = self.cell_size();
        let axis = |v: f64, lo: f64, step: f64, n: usize| -> (usize, usize, f64) {
            let g = ((v - lo) / step - 0.5).clamp(0.0, (n - 1) as f64);
            if n == 1 {
                return (0, 0, 0.0);
            }
            let i0 = (g.floor() as usize).min(n - 2);
            (i0, i0 + 1, g - i0 as f64)
        };
        let (c0, c1, fx) = axis(x, self.config.x_range[0], dx, cols);
        let (r0, r1, fy) = axis(y, self.config.y_range[0], dy, rows);
        let idx = |r: usize, c: usize| (r * cols + c) as u32;
        [(idx(r0, c0), (1.0 - fx) * (1.0 - fy)), (idx(r0, c1), fx * (1.0 - fy)), (idx(r1, c0), (1.0 - fx) * fy), (idx(r1, c1), fx * fy)]
    }

    pub fn raw_at(&self, x: f64, y: f64) -> f64 {
        self.bilinear(x, y).iter().map(|&(i, w)| w * self.raw.data[i as usize]).sum()
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.config.h_offset + self.config.h_scale * self.raw_at(x, y).tanh()
    }

    pub fn embedding(&self, x: f64, y: f64) -> Vec<f64> {
        let f = self.config.feature_dim;
        let mut out = vec![0.0; f];
        for (i, w) in self.bilinear(x, y) {
            for (o, v) in out.iter_mut().zip(&self.features.data[i as usize * f..(i as usize + 1) * f]) {
                *o += w * v;
            }
        }
        out
    }

    /// Height and column embedding at `(x, y)`.
    pub fn query(&self, x: f64, y: f64) -> (f64, Vec<f64>) {
        (self.height(x, y), self.embedding(x, y))
    }

    /// `k2 * sigmoid(k1 * (h(x, y) - z))`.
    pub fn density(&self, x: f64, y: f64, z: f64) -> f64 {
        self.config.k2 * sigmoid(self.config.k1 * (self.height(x, y) - z))
    }

    /// Surface normal from central differences at half-cell steps.
    pub fn normal(&self, x: f64, y: f64) -> [f64; 3] {
        let (gx, gy) = self.slope(x, y);
        crate::geom::normalize([-gx, -gy, 1.0])
    }

    pub fn slope(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        let (ex, ey) = (0.5 * dx, 0.5 * dy);
        ((self.height(x + ex, y) - self.height(x - ex, y)) / (2.0 * ex), (self.height(x, y + ey) - self.height(x, y - ey)) / (2.0 * ey))
    }

    /// Sets raw values so node heights equal `f(x, y)` (clamped inside the tanh range).
    pub fn fit_nodes(&mut self, f: impl Fn(f64, f64) -> f64) {
        let (rows, cols) = self.config.grid_res;
        for r in 0..rows {
            for c in 0..cols {
                let (x, y) = self.node_position(r, c);
                let u = ((f(x, y) - self.config.h_offset) / self.config.h_scale).clamp(-0.999_999, 0.999_999);
                self.raw.data[r * cols + c] = u.atanh();
            }
        }
    }

    /// Dense DEM sampled at the cell centers of an `out_rows x out_cols` partition.
    pub fn to_heightmap(&self, out_rows: usize, out_cols: usize) -> HeightMap {
        assert!(out_rows >= 1 && out_cols >= 1);
        let [x0, x1] = self.config.x_range;
        let [y0, y1] = self.config.y_range;
        let (sx, sy) = ((x1 - x0) / out_cols as f64, (y1 - y0) / out_rows as f64);
        let mut values = Vec::with_capacity(out_rows * out_cols);
        for r in 0..out_rows {
            for c in 0..out_cols {
                values.push(self.height(x0 + (c as f64 + 0.5) * sx, y0 + (r as f64 + 0.5) * sy));
            }
        }
        HeightMap::new(out_rows, out_cols, sx, [x0 + 0.5 * sx, y0 + 0.5 * sy], values)
    }

    fn plan(&self, xy: &[[f64; 2]]) -> GatherPlan {
        let mut plan = GatherPlan::with_capacity(xy.len(), 1, 4);
        for &[x, y] in xy {
            for (i, w) in self.bilinear(x, y) {
                plan.index.push(i);
                plan.weight.push(w);
            }
        }
        plan.rows = xy.len();
        plan
    }

    /// Heights at planar points as an `n x 1` tape node.
    pub fn tape_height(&self, tape: &mut Tape, xy: &[[f64; 2]]) -> Var {
        let raw = tape.gather(&self.raw, 1, self.plan(xy));
        let t = tape.tanh(raw);
        let s = tape.scale(t, self.config.h_scale);
        tape.add_scalar(s, self.config.h_offset)
    }

    /// Column embeddings at planar points as an `n x feature_dim` tape node.
    pub fn tape_embedding(&self, tape: &mut Tape, xy: &[[f64; 2]]) -> Var {
        tape.gather(&self.features, self.config.feature_dim, self.plan(xy))
    }

    /// `n x 2` slopes `(dh/dx, dh/dy)` by the same central differences as [`HeightField::slope`].
    pub fn tape_slopes(&self, tape: &mut Tape, xy: &[[f64; 2]]) -> Var {
        let (dx, dy) = self.cell_size();
        let (ex, ey) = (0.5 * dx, 0.5 * dy);
        let shifted = |ox: f64, oy: f64| xy.iter().map(|&[x, y]| [x + ox, y + oy]).collect::<Vec<_>>();
        let xp = self.tape_height(tape, &shifted(ex, 0.0));
        let xm = self.tape_height(tape, &shifted(-ex, 0.0));
        let yp = self.tape_height(tape, &shifted(0.0, ey));
        let ym = self.tape_height(tape, &shifted(0.0, -ey));
        let gx = tape.sub(xp, xm);
        let gx = tape.scale(gx, 1.0 / (2.0 * ex));
        let gy = tape.sub(yp, ym);
        let gy = tape.scale(gy, 1.0 / (2.0 * ey));
        tape.concat_cols(&[gx, gy])
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.raw, &self.features]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.raw, &mut self.features]
    }
}

//! Point clouds and their multi-layer binary BEV occupancy grids.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Points in the sensor frame, meters. Intensity is carried but unused.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Spatial window and cell counts of the BEV volume. Rows (`h_cells`)
/// follow x, columns (`w_cells`) follow y, layers (`c_layers`) follow z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub h_cells: usize,
    pub w_cells: usize,
    pub c_layers: usize,
}

impl GridConfig {
    /// 256 x 256 x 32 over x, y in [-50, 50) m and z in [-4, 3) m.
    pub fn full() -> Self {
        Self {
            x_range: (-50.0, 50.0),
            y_range: (-50.0, 50.0),
            z_range: (-4.0, 3.0),
            h_cells: 256,
            w_cells: 256,
            c_layers: 32,
        }
    }

    /// Same window at 64 x 64 x 8.
    pub fn desk() -> Self {
        Self {
            h_cells: 64,
            w_cells: 64,
            c_layers: 8,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, (lo, hi)) in [
            ("x", self.x_range),
            ("y", self.y_range),
            ("z", self.z_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Config(format!(
                    "{axis} range must satisfy min < max, got [{lo}, {hi})"
                )));
            }
        }
        if self.h_cells == 0 || self.w_cells == 0 || self.c_layers == 0 {
            return Err(Error::Config("cell counts must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_sizes(&self) -> [f64; 3] {
        [
            (self.x_range.1 - self.x_range.0) / self.h_cells as f64,
            (self.y_range.1 - self.y_range.0) / self.w_cells as f64,
            (self.z_range.1 - self.z_range.0) / self.c_layers as f64,
        ]
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v < hi;
        inside(p[0], self.x_range) && inside(p[1], self.y_range) && inside(p[2], self.z_range)
    }

    /// `(h, w, c)` cell of an in-range point.
    pub fn cell_of(&self, p: &[f64; 3]) -> Option<(usize, usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let [sx, sy, sz] = self.cell_sizes();
        let bin =
            |v: f64, lo: f64, size: f64, n: usize| (((v - lo) / size).floor() as usize).min(n - 1);
        Some((
            bin(p[0], self.x_range.0, sx, self.h_cells),
            bin(p[1], self.y_range.0, sy, self.w_cells),
            bin(p[2], self.z_range.0, sz, self.c_layers),
        ))
    }
}

/// Binary occupancy volume, `h x w x c`, stored row-major with the layer
/// index fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevGrid {
    h: usize,
    w: usize,
    c: usize,
    cells: Vec<bool>,
}

impl BevGrid {
    pub fn empty(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            cells: vec![false; h * w * c],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> bool {
        self.cells[(h * self.w + w) * self.c + c]
    }

    pub fn set(&mut self, h: usize, w: usize, c: usize) {
        self.cells[(h * self.w + w) * self.c + c] = true;
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| {
                let c = i % self.c;
                let hw = i / self.c;
                (hw / self.w, hw % self.w, c)
            })
    }

    /// `C x H x W` tensor with z-layers as channels.
    pub fn to_channels(&self) -> Tensor {
        let (h, w, c) = (self.h, self.w, self.c);
        let mut data = vec![0.0; h * w * c];
        for (r, col, layer) in self.occupied() {
            data[(layer * h + r) * w + col] = 1.0;
        }
        Tensor::from_parts(vec![c, h, w], data)
    }

    /// Top-down footprint pooled by `stride` in both directions: a pooled
    /// cell is set when any layer of any cell in its footprint is occupied.
    pub fn pooled_footprint(&self, stride: usize) -> Vec<bool> {
        let (ph, pw) = (self.h.div_ceil(stride), self.w.div_ceil(stride));
        let mut out = vec![false; ph * pw];
        for (r, col, _) in self.occupied() {
            out[(r / stride) * pw + col / stride] = true;
        }
        out
    }
}

/// Points with `min <= coord < max` on all three axes.
pub fn crop(cloud: &PointCloud, cfg: &GridConfig) -> PointCloud {
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| cfg.contains(&cloud.points[i]))
        .collect();
    PointCloud {
        points: keep.iter().map(|&i| cloud.points[i]).collect(),
        intensity: cloud
            .intensity
            .as_ref()
            .map(|int| keep.iter().map(|&i| int[i]).collect()),
    }
}

/// Sets every cell that receives at least one in-range point.
pub fn voxelize(cloud: &PointCloud, cfg: &GridConfig) -> BevGrid {
    let mut grid = BevGrid::empty(cfg.h_cells, cfg.w_cells, cfg.c_layers);
    for p in &cloud.points {
        if let Some((h, w, c)) = cfg.cell_of(p) {
            grid.set(h, w, c);
        }
    }
    grid
}

pub fn to_channels(grid: &BevGrid) -> Tensor {
    grid.to_channels()
}

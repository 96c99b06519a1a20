//! Uniform tensor-product grids, scalar fields over them, fourth-order finite
//! differences, norms and CSV round-tripping.
//!
//! Node coordinates are generated as `min + i*h` with the arithmetic carried
//! out in the field's scalar type. This matters for the extended-precision
//! paths: computing nodes in f64 and widening afterwards jitters positions by
//! an ulp, which re-enters the data as white noise against the uniform-spacing
//! assumption of the stencils.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CfhError, Result};
use crate::scalar::Real;

/// Fewest nodes per axis that the one-sided fourth-order stencils support.
pub const MIN_NODES: usize = 6;

/// Uniform rectangular grid on `[x_min,x_max] x [y_min,y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Grid2 {
    pub fn new(nx: usize, ny: usize, x: (f64, f64), y: (f64, f64)) -> Result<Grid2> {
        if nx < MIN_NODES || ny < MIN_NODES {
            return Err(CfhError::shape(format!(
                "grid needs at least {MIN_NODES} nodes per axis, got {nx} x {ny}"
            )));
        }
        if !(x.0.is_finite() && x.1.is_finite() && y.0.is_finite() && y.1.is_finite())
            || x.0 >= x.1
            || y.0 >= y.1
        {
            return Err(CfhError::shape(format!(
                "invalid grid ranges [{}, {}] x [{}, {}]",
                x.0, x.1, y.0, y.1
            )));
        }
        Ok(Grid2 { nx, ny, x_min: x.0, x_max: x.1, y_min: y.0, y_max: y.1 })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny);
        iy * self.nx + ix
    }

    pub fn hx<T: Real>(&self) -> T {
        (T::of(self.x_max) - T::of(self.x_min)) / T::of_int(self.nx as i64 - 1)
    }

    pub fn hy<T: Real>(&self) -> T {
        (T::of(self.y_max) - T::of(self.y_min)) / T::of_int(self.ny as i64 - 1)
    }

    pub fn x<T: Real>(&self, ix: usize) -> T {
        T::of(self.x_min) + T::of_int(ix as i64) * self.hx::<T>()
    }

    pub fn y<T: Real>(&self, iy: usize) -> T {
        T::of(self.y_min) + T::of_int(iy as i64) * self.hy::<T>()
    }

    /// Index pair of the node nearest to `(x, y)`.
    pub fn nearest(&self, x: f64, y: f64) -> (usize, usize) {
        let fx = (x - self.x_min) / self.hx::<f64>();
        let fy = (y - self.y_min) / self.hy::<f64>();
        let ix = fx.round().clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = fy.round().clamp(0.0, (self.ny - 1) as f64) as usize;
        (ix, iy)
    }

    /// Same window, `2n-1` nodes per axis (every cell halved).
    pub fn refined(&self) -> Grid2 {
        Grid2 {
            nx: 2 * self.nx - 1,
            ny: 2 * self.ny - 1,
            ..*self
        }
    }

    /// True if every "off" node index is even, i.e. `coarse` nodes embed in
    /// `self`'s nodes by doubling indices.
    pub fn refines(&self, coarse: &Grid2) -> bool {
        self.nx == 2 * coarse.nx - 1
            && self.ny == 2 * coarse.ny - 1
            && self.x_min == coarse.x_min
            && self.x_max == coarse.x_max
            && self.y_min == coarse.y_min
            && self.y_max == coarse.y_max
    }
}

/// Scalar field sampled on a [`Grid2`], row-major with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2<T> {
    pub grid: Grid2,
    data: Vec<T>,
}

impl<T: Real> Field2<T> {
    pub fn zeros(grid: Grid2) -> Field2<T> {
        Field2 { grid, data: vec![T::zero(); grid.len()] }
    }

    pub fn from_data(grid: Grid2, data: Vec<T>) -> Result<Field2<T>> {
        if data.len() != grid.len() {
            return Err(CfhError::shape(format!(
                "field data length {} does not match grid {} x {}",
                data.len(),
                grid.nx,
                grid.ny
            )));
        }
        Ok(Field2 { grid, data })
    }

    /// Evaluate `f(x, y)` at every node, in parallel over rows.
    pub fn from_fn(grid: Grid2, f: impl Fn(T, T) -> T + Sync) -> Field2<T> {
        let mut data = vec![T::zero(); grid.len()];
        data.par_chunks_mut(grid.nx).enumerate().for_each(|(iy, row)| {
            let y = grid.y::<T>(iy);
            for (ix, v) in row.iter_mut().enumerate() {
                *v = f(grid.x::<T>(ix), y);
            }
        });
        Field2 { grid, data }
    }

    /// Evaluate `f(ix, iy)` at every node, in parallel over rows.
    pub fn from_fn_indexed(grid: Grid2, f: impl Fn(usize, usize) -> T + Sync) -> Field2<T> {
        let mut data = vec![T::zero(); grid.len()];
        data.par_chunks_mut(grid.nx).enumerate().for_each(|(iy, row)| {
            for (ix, v) in row.iter_mut().enumerate() {
                *v = f(ix, iy);
            }
        });
        Field2 { grid, data }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize) -> T {
        self.data[self.grid.idx(ix, iy)]
    }

    #[inline]
    pub fn at_mut(&mut self, ix: usize, iy: usize) -> &mut T {
        let i = self.grid.idx(ix, iy);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Field2<T> {
        let data = self.data.par_iter().map(|&v| f(v)).collect();
        Field2 { grid: self.grid, data }
    }

    /// Elementwise combination of two fields on the same grid.
    pub fn zip(&self, other: &Field2<T>, f: impl Fn(T, T) -> T + Sync) -> Field2<T> {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        let data = self
            .data
            .par_iter()
            .zip(other.data.par_iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Field2 { grid: self.grid, data }
    }

    pub fn add(&self, other: &Field2<T>) -> Field2<T> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field2<T>) -> Field2<T> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Field2<T>) -> Field2<T> {
        self.zip(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Field2<T>) -> Field2<T> {
        self.zip(other, |a, b| a / b)
    }

    pub fn scale(&self, s: T) -> Field2<T> {
        self.map(|v| v * s)
    }

    /// Convert to another scalar type through the nearest f64.
    pub fn cast<U: Real>(&self) -> Field2<U> {
        Field2 {
            grid: self.grid,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Restriction to the matching coarse grid (every second node).
    pub fn restrict_to(&self, coarse: Grid2) -> Result<Field2<T>> {
        if !self.grid.refines(&coarse) {
            return Err(CfhError::shape(format!(
                "{}x{} is not a refinement of {}x{}",
                self.grid.nx, self.grid.ny, coarse.nx, coarse.ny
            )));
        }
        Ok(Field2::from_fn_indexed(coarse, |ix, iy| self.at(2 * ix, 2 * iy)))
    }
}

/// Largest absolute node value. Sequential pass, deterministic.
pub fn linf<T: Real>(f: &Field2<T>) -> T {
    f.data().iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}

/// Largest absolute value at least `band` nodes from every edge.
pub fn linf_interior<T: Real>(f: &Field2<T>, band: usize) -> T {
    let g = f.grid;
    assert!(g.nx > 2 * band && g.ny > 2 * band, "band swallows the grid");
    let mut m = T::zero();
    for iy in band..g.ny - band {
        for ix in band..g.nx - band {
            m = m.max(f.at(ix, iy).abs());
        }
    }
    m
}

/// Node of the largest absolute value: `(ix, iy, value)`.
pub fn argmax_abs<T: Real>(f: &Field2<T>) -> (usize, usize, T) {
    let g = f.grid;
    let mut best = (0, 0, T::zero());
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let v = f.at(ix, iy).abs();
            if v > best.2 {
                best = (ix, iy, v);
            }
        }
    }
    best
}

/// Compensated (Kahan) sum; sequential, deterministic.
pub fn compensated_sum<T: Real>(xs: impl Iterator<Item = T>) -> T {
    let mut s = T::zero();
    let mut c = T::zero();
    for x in xs {
        let y = x - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s
}

/// Grid-weighted L2 norm: `sqrt(hx*hy*sum f^2)`.
pub fn l2<T: Real>(f: &Field2<T>) -> T {
    let w = f.grid.hx::<T>() * f.grid.hy::<T>();
    (w * compensated_sum(f.data().iter().map(|&v| v * v))).sqrt()
}

/// Mean and population standard deviation of the node values.
pub fn mean_stdev<T: Real>(f: &Field2<T>) -> (T, T) {
    let n = T::of_int(f.grid.len() as i64);
    let mean = compensated_sum(f.data().iter().copied()) / n;
    let var = compensated_sum(f.data().iter().map(|&v| (v - mean) * (v - mean))) / n;
    (mean, var.sqrt())
}

/// Observed order from errors on a grid pair with halved spacing.
pub fn convergence_order(err_coarse: f64, err_fine: f64) -> f64 {
    (err_coarse / err_fine).log2()
}

/// Fourth-order derivative (order 1 or 2) of uniformly spaced line samples.
pub fn deriv_line<T: Real>(values: &[T], h: T, order: u8) -> Result<Vec<T>> {
    let n = values.len();
    if n < MIN_NODES {
        return Err(CfhError::shape(format!("line of {n} samples is below the stencil minimum {MIN_NODES}")));
    }
    let rule = LineRule::new(order, h);
    let mut out = vec![T::zero(); n];
    rule.apply(|i| values[i], n, &mut out);
    Ok(out)
}

// Fourth-order finite difference weights. Boundary rows use one-sided
// stencils of the same order; all weights are exact rationals, instantiated
// in the working scalar on demand.
const D1_INTERIOR: [(i64, i64, i64); 5] =
    [(-2, 1, 12), (-1, -2, 3), (0, 0, 1), (1, 2, 3), (2, -1, 12)];
const D1_EDGE0: [(i64, i64, i64); 5] =
    [(0, -25, 12), (1, 4, 1), (2, -3, 1), (3, 4, 3), (4, -1, 4)];
const D1_EDGE1: [(i64, i64, i64); 5] =
    [(-1, -1, 4), (0, -5, 6), (1, 3, 2), (2, -1, 2), (3, 1, 12)];
const D2_INTERIOR: [(i64, i64, i64); 5] =
    [(-2, -1, 12), (-1, 4, 3), (0, -5, 2), (1, 4, 3), (2, -1, 12)];
const D2_EDGE0: [(i64, i64, i64); 6] =
    [(0, 15, 4), (1, -77, 6), (2, 107, 6), (3, -13, 1), (4, 61, 12), (5, -5, 6)];
const D2_EDGE1: [(i64, i64, i64); 6] =
    [(-1, 5, 6), (0, -5, 4), (1, -1, 3), (2, 7, 6), (3, -1, 2), (4, 1, 12)];

/// A 1D differentiation rule: per-row stencils resolved to scalar weights.
struct LineRule<T> {
    /// (offset, weight) lists for nodes 0, 1, interior, n-2, n-1.
    rows: [Vec<(i64, T)>; 5],
    scale: T,
}

impl<T: Real> LineRule<T> {
    fn new(order: u8, h: T) -> LineRule<T> {
        fn resolve<T: Real>(tbl: &[(i64, i64, i64)]) -> Vec<(i64, T)> {
            tbl.iter().map(|&(o, num, den)| (o, T::of_int(num) / T::of_int(den))).collect()
        }
        match order {
            1 => {
                // Mirrored rules negate both offsets and weights.
                let mirror = |v: &[(i64, T)]| {
                    v.iter().map(|&(o, w)| (-o, -w)).collect::<Vec<_>>()
                };
                let e0 = resolve::<T>(&D1_EDGE0);
                let e1 = resolve::<T>(&D1_EDGE1);
                let rows = [
                    e0.clone(),
                    e1.clone(),
                    resolve::<T>(&D1_INTERIOR),
                    mirror(&e1),
                    mirror(&e0),
                ];
                LineRule { rows, scale: T::one() / h }
            }
            2 => {
                // Second derivative is even: mirrored rules keep their weights.
                let mirror = |v: &[(i64, T)]| {
                    v.iter().map(|&(o, w)| (-o, w)).collect::<Vec<_>>()
                };
                let e0 = resolve::<T>(&D2_EDGE0);
                let e1 = resolve::<T>(&D2_EDGE1);
                let rows = [
                    e0.clone(),
                    e1.clone(),
                    resolve::<T>(&D2_INTERIOR),
                    mirror(&e1),
                    mirror(&e0),
                ];
                LineRule { rows, scale: T::one() / (h * h) }
            }
            _ => panic!("derivative order must be 1 or 2"),
        }
    }

    fn row(&self, i: usize, n: usize) -> &[(i64, T)] {
        if i == 0 {
            &self.rows[0]
        } else if i == 1 {
            &self.rows[1]
        } else if i + 2 < n {
            &self.rows[2]
        } else if i + 2 == n {
            &self.rows[3]
        } else {
            &self.rows[4]
        }
    }

    /// Differentiate one line of strided data.
    fn apply(&self, get: impl Fn(usize) -> T, n: usize, out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = T::zero();
            for &(off, w) in self.row(i, n) {
                let j = (i as i64 + off) as usize;
                acc = acc + w * get(j);
            }
            *o = acc * self.scale;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis2 {
    X,
    Y,
}

/// Fourth-order partial derivative of a 2D field along one axis.
/// `order` is 1 or 2; mixed derivatives compose two calls.
pub fn partial<T: Real>(f: &Field2<T>, axis: Axis2, order: u8) -> Field2<T> {
    let g = f.grid;
    let mut out = Field2::zeros(g);
    match axis {
        Axis2::X => {
            let rule = LineRule::new(order, g.hx::<T>());
            let nx = g.nx;
            out.data_mut().par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
                rule.apply(|i| f.at(i, iy), nx, row);
            });
        }
        Axis2::Y => {
            let rule = LineRule::new(order, g.hy::<T>());
            let ny = g.ny;
            let cols: Vec<Vec<T>> = (0..g.nx)
                .into_par_iter()
                .map(|ix| {
                    let mut col = vec![T::zero(); ny];
                    rule.apply(|j| f.at(ix, j), ny, &mut col);
                    col
                })
                .collect();
            for iy in 0..ny {
                for ix in 0..g.nx {
                    *out.at_mut(ix, iy) = cols[ix][iy];
                }
            }
        }
    }
    out
}

/// Convenience: d/dx, d/dy, d2/dx2, d2/dy2, d2/dxdy.
pub fn dx<T: Real>(f: &Field2<T>) -> Field2<T> {
    partial(f, Axis2::X, 1)
}
pub fn dy<T: Real>(f: &Field2<T>) -> Field2<T> {
    partial(f, Axis2::Y, 1)
}
pub fn dxx<T: Real>(f: &Field2<T>) -> Field2<T> {
    partial(f, Axis2::X, 2)
}
pub fn dyy<T: Real>(f: &Field2<T>) -> Field2<T> {
    partial(f, Axis2::Y, 2)
}
pub fn dxy<T: Real>(f: &Field2<T>) -> Field2<T> {
    partial(&partial(f, Axis2::X, 1), Axis2::Y, 1)
}

/// Uniform box grid; z is the slowest axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Grid3 {
    pub fn new(base: Grid2, nz: usize, z: (f64, f64)) -> Result<Grid3> {
        if nz == 0 {
            return Err(CfhError::shape("need at least 1 z-slice"));
        }
        if !(z.0.is_finite() && z.1.is_finite()) {
            return Err(CfhError::shape(format!("invalid z range [{}, {}]", z.0, z.1)));
        }
        // A single slice is a degenerate box pinned at one z value; any wider
        // stack needs an increasing range.
        if nz == 1 && z.0 != z.1 {
            return Err(CfhError::shape(format!(
                "a single z-slice needs a degenerate range, got [{}, {}]",
                z.0, z.1
            )));
        }
        if nz > 1 && z.0 >= z.1 {
            return Err(CfhError::shape(format!("invalid z range [{}, {}]", z.0, z.1)));
        }
        Ok(Grid3 {
            nx: base.nx,
            ny: base.ny,
            nz,
            x_min: base.x_min,
            x_max: base.x_max,
            y_min: base.y_min,
            y_max: base.y_max,
            z_min: z.0,
            z_max: z.1,
        })
    }

    pub fn base(&self) -> Grid2 {
        Grid2 {
            nx: self.nx,
            ny: self.ny,
            x_min: self.x_min,
            x_max: self.x_max,
            y_min: self.y_min,
            y_max: self.y_max,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny && iz < self.nz);
        (iz * self.ny + iy) * self.nx + ix
    }

    pub fn hz<T: Real>(&self) -> T {
        if self.nz == 1 {
            return T::zero();
        }
        (T::of(self.z_max) - T::of(self.z_min)) / T::of_int(self.nz as i64 - 1)
    }

    pub fn z<T: Real>(&self, iz: usize) -> T {
        T::of(self.z_min) + T::of_int(iz as i64) * self.hz::<T>()
    }

    pub fn x<T: Real>(&self, ix: usize) -> T {
        self.base().x(ix)
    }

    pub fn y<T: Real>(&self, iy: usize) -> T {
        self.base().y(iy)
    }
}

/// Scalar field on a [`Grid3`]; a stack of 2D slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Field3<T> {
    pub grid: Grid3,
    data: Vec<T>,
}

impl<T: Real> Field3<T> {
    pub fn zeros(grid: Grid3) -> Field3<T> {
        Field3 { grid, data: vec![T::zero(); grid.len()] }
    }

    pub fn from_data(grid: Grid3, data: Vec<T>) -> Result<Field3<T>> {
        if data.len() != grid.len() {
            return Err(CfhError::shape(format!(
                "field data length {} does not match grid {} x {} x {}",
                data.len(),
                grid.nx,
                grid.ny,
                grid.nz
            )));
        }
        Ok(Field3 { grid, data })
    }

    /// Assemble from per-slice fields, checked against the base grid.
    pub fn from_slices(grid: Grid3, slices: &[Field2<T>]) -> Result<Field3<T>> {
        if slices.len() != grid.nz {
            return Err(CfhError::shape(format!(
                "{} slices for {} z-levels",
                slices.len(),
                grid.nz
            )));
        }
        let base = grid.base();
        let mut data = Vec::with_capacity(grid.len());
        for s in slices {
            if s.grid != base {
                return Err(CfhError::shape("slice grid does not match the 3D base grid"));
            }
            data.extend_from_slice(s.data());
        }
        Ok(Field3 { grid, data })
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> T {
        self.data[self.grid.idx(ix, iy, iz)]
    }

    #[inline]
    pub fn at_mut(&mut self, ix: usize, iy: usize, iz: usize) -> &mut T {
        let i = self.grid.idx(ix, iy, iz);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Copy of slice `iz` as a 2D field.
    pub fn slice(&self, iz: usize) -> Field2<T> {
        let base = self.grid.base();
        let n = base.len();
        Field2 { grid: base, data: self.data[iz * n..(iz + 1) * n].to_vec() }
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Field3<T> {
        let data = self.data.par_iter().map(|&v| f(v)).collect();
        Field3 { grid: self.grid, data }
    }

    pub fn zip(&self, other: &Field3<T>, f: impl Fn(T, T) -> T + Sync) -> Field3<T> {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        let data = self
            .data
            .par_iter()
            .zip(other.data.par_iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Field3 { grid: self.grid, data }
    }

    pub fn sub(&self, other: &Field3<T>) -> Field3<T> {
        self.zip(other, |a, b| a - b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis3 {
    X,
    Y,
    Z,
}

/// Fourth-order partial derivative of a 3D field along one axis.
pub fn partial3<T: Real>(f: &Field3<T>, axis: Axis3, order: u8) -> Field3<T> {
    let g = f.grid;
    let mut out = Field3::zeros(g);
    match axis {
        Axis3::X | Axis3::Y => {
            let ax = if axis == Axis3::X { Axis2::X } else { Axis2::Y };
            let slices: Vec<Field2<T>> =
                (0..g.nz).map(|iz| partial(&f.slice(iz), ax, order)).collect();
            out = Field3::from_slices(g, &slices).expect("slice shapes preserved");
        }
        Axis3::Z => {
            if g.nz < MIN_NODES {
                panic!("z derivative needs at least {MIN_NODES} slices");
            }
            let rule = LineRule::new(order, g.hz::<T>());
            let plane = g.nx * g.ny;
            let mut line = vec![T::zero(); g.nz];
            for p in 0..plane {
                rule.apply(|iz| self_at_plane(f, p, iz), g.nz, &mut line);
                for iz in 0..g.nz {
                    out.data[iz * plane + p] = line[iz];
                }
            }
        }
    }
    out
}

#[inline]
fn self_at_plane<T: Real>(f: &Field3<T>, p: usize, iz: usize) -> T {
    f.data[iz * f.grid.nx * f.grid.ny + p]
}

pub fn linf3<T: Real>(f: &Field3<T>) -> T {
    f.data().iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}

/// Write a 2D field as `x,y,value` CSV. Values print in shortest
/// round-trip form, so read-back is bit-exact.
pub fn write_field2_csv(f: &Field2<f64>, path: &Path) -> Result<()> {
    let g = f.grid;
    let mut s = String::with_capacity(g.len() * 24);
    s.push_str("x,y,value\n");
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            writeln!(s, "{},{},{}", g.x::<f64>(ix), g.y::<f64>(iy), f.at(ix, iy))
                .expect("string write");
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_field2_csv(path: &Path) -> Result<Field2<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line.trim() != "x,y,value" {
                return Err(CfhError::parse(format!(
                    "expected header 'x,y,value', got '{line}'"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let mut next = || -> Result<f64> {
            it.next()
                .ok_or_else(|| CfhError::parse(format!("short row at line {}", ln + 1)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| CfhError::parse(format!("line {}: {e}", ln + 1)))
        };
        rows.push((next()?, next()?, next()?));
    }
    if rows.is_empty() {
        return Err(CfhError::parse("empty field file"));
    }
    // x is the fastest axis; the first row block shares one y.
    let y0 = rows[0].1;
    let nx = rows.iter().take_while(|r| r.1 == y0).count();
    if nx == 0 || rows.len() % nx != 0 {
        return Err(CfhError::parse("rows do not form a rectangular grid"));
    }
    let ny = rows.len() / nx;
    let grid = Grid2::new(
        nx,
        ny,
        (rows[0].0, rows[nx - 1].0),
        (rows[0].1, rows[rows.len() - 1].1),
    )?;
    Field2::from_data(grid, rows.into_iter().map(|r| r.2).collect())
}

/// Write a 3D field as `x,y,z,value` CSV, z slowest.
pub fn write_field3_csv(f: &Field3<f64>, path: &Path) -> Result<()> {
    let g = f.grid;
    let mut s = String::with_capacity(g.len() * 30);
    s.push_str("x,y,z,value\n");
    for iz in 0..g.nz {
        let z = g.z::<f64>(iz);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                writeln!(s, "{},{},{},{}", g.x::<f64>(ix), g.y::<f64>(iy), z, f.at(ix, iy, iz))
                    .expect("string write");
            }
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_field3_csv(path: &Path) -> Result<Field3<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line.trim() != "x,y,z,value" {
                return Err(CfhError::parse(format!(
                    "expected header 'x,y,z,value', got '{line}'"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let mut next = || -> Result<f64> {
            it.next()
                .ok_or_else(|| CfhError::parse(format!("short row at line {}", ln + 1)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| CfhError::parse(format!("line {}: {e}", ln + 1)))
        };
        rows.push((next()?, next()?, next()?, next()?));
    }
    if rows.is_empty() {
        return Err(CfhError::parse("empty field file"));
    }
    let y0 = rows[0].1;
    let z0 = rows[0].2;
    let nx = rows.iter().take_while(|r| r.1 == y0 && r.2 == z0).count();
    let nxy = rows.iter().take_while(|r| r.2 == z0).count();
    if nx == 0 || nxy % nx != 0 || rows.len() % nxy != 0 {
        return Err(CfhError::parse("rows do not form a rectangular box"));
    }
    let ny = nxy / nx;
    let nz = rows.len() / nxy;
    let base = Grid2::new(nx, ny, (rows[0].0, rows[nx - 1].0), (rows[0].1, rows[nxy - 1].1))?;
    let grid = Grid3::new(base, nz, (rows[0].2, rows[rows.len() - 1].2))?;
    Field3::from_data(grid, rows.into_iter().map(|r| r.3).collect())
}

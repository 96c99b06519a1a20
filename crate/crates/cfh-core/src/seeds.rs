//! The two closed-form seed families.
//!
//! Both families fix the Guichard angle phi and its conjugate psi at z = 0 in
//! closed form, and reduce the remaining initial data (the inverse conformal
//! factor w = e^{-P}, its z-derivative, and the middle principal curvature
//! kappa3) to linear one-variable ODE systems:
//!
//! * family 1 ("profile" seeds): tan phi = e^{rho(y)}, phi_z = sigma(x) sin phi
//!   for monotone profiles rho, sigma with sigma > 0; the ODE unknowns are
//!   X1, X2 in x and Y1, Y2 in y, anchored at 0.
//! * family 2 ("polar" seeds): phi is twice the polar angle of (x, y) and
//!   phi_z = y/(x^2+y^2); the unknowns are X1, X2 in x (anchored at the
//!   quadrature base x = 1) and Y in y (anchored at 0). x = 0 is a regular
//!   singularity of the X1 equation, so solves stay on one side of it.
//!
//! Each family carries two first integrals G(x) and H(y); admissible initial
//! data has kappa3^2 = zeta, which pins G + H. The family samplers complete a
//! free parameter triple into ODE initial values realizing that constraint,
//! or reject the triple when the feasibility inequality fails.
//!
//! Solutions are sampled on the caller's axis nodes with exact endpoint hits.
//! Every solve re-samples its trajectory on a 4x-refined axis and differences
//! that refinement to measure the defining-equation residual; the refinement
//! matters because seventh derivatives of the family-2 X1 reach O(10^3) and
//! un-refined fourth-order differencing would drown the 1e-8 gate.

use crate::error::{CfhError, Result};
use crate::field::{deriv_line, Field2, Grid2, MIN_NODES};
use crate::ode::{self, OdeOpts, OdeRhs};
use crate::scalar::Real;

/// Defining-residual gate at the reference spacing h = 0.01; scaled by
/// (h/0.01)^4 on coarser axes so exploratory grids are not rejected by the
/// differencing floor rather than by the solver.
pub const RESIDUAL_GATE: f64 = 1e-8;
const GATE_REF_H: f64 = 0.01;

fn residual_gate(h: f64) -> f64 {
    RESIDUAL_GATE * ((h / GATE_REF_H).powi(4)).max(1.0)
}

// ---------------------------------------------------------------------------
// one-variable function specs

/// A smooth one-variable function with first three derivatives, used for the
/// family-1 profiles rho and sigma.
#[derive(Clone, Debug)]
pub enum FnSpec {
    /// a + b x
    Affine { a: f64, b: f64 },
    /// amp e^{rate x}
    Exp { amp: f64, rate: f64 },
    /// Uniform samples at x0 + i h; evaluated anywhere through a sliding
    /// degree-5 interpolant, so derivatives are stencil-grade, not exact.
    Sampled { x0: f64, h: f64, values: Vec<f64> },
}

impl FnSpec {
    /// Value and first three derivatives at `x`.
    pub fn jet<T: Real>(&self, x: T) -> [T; 4] {
        match self {
            FnSpec::Affine { a, b } => [T::of(*a) + T::of(*b) * x, T::of(*b), T::zero(), T::zero()],
            FnSpec::Exp { amp, rate } => {
                let r = T::of(*rate);
                let v = T::of(*amp) * (r * x).exp();
                [v, r * v, r * r * v, r * r * r * v]
            }
            FnSpec::Sampled { x0, h, values } => sampled_jet(*x0, *h, values, x),
        }
    }

    pub fn eval<T: Real>(&self, x: T) -> T {
        self.jet(x)[0]
    }

    fn check(&self) -> Result<()> {
        match self {
            FnSpec::Sampled { h, values, .. } => {
                if values.len() < 6 {
                    Err(CfhError::config(format!(
                        "sampled function needs at least 6 values, got {}",
                        values.len()
                    )))
                } else if !(*h > 0.0) {
                    Err(CfhError::config("sampled function needs positive spacing"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Newton interpolation on the 6 samples nearest `x`, evaluated with
/// derivative accumulation.
fn sampled_jet<T: Real>(x0: f64, h: f64, values: &[f64], x: T) -> [T; 4] {
    let n = values.len();
    let t = (x.f64() - x0) / h;
    let k = (t.round() as i64 - 2).clamp(0, n as i64 - 6) as usize;
    let nodes: Vec<T> = (0..6).map(|j| T::of(x0) + T::of_int((k + j) as i64) * T::of(h)).collect();
    let mut c: Vec<T> = (0..6).map(|j| T::of(values[k + j])).collect();
    for lvl in 1..6 {
        for j in (lvl..6).rev() {
            c[j] = (c[j] - c[j - 1]) / (nodes[j] - nodes[j - lvl]);
        }
    }
    let mut v = c[5];
    let (mut d1, mut d2, mut d3) = (T::zero(), T::zero(), T::zero());
    for j in (0..5).rev() {
        let dx = x - nodes[j];
        d3 = d3 * dx + T::of_int(3) * d2;
        d2 = d2 * dx + T::of_int(2) * d1;
        d1 = d1 * dx + v;
        v = v * dx + c[j];
    }
    [v, d1, d2, d3]
}

// ---------------------------------------------------------------------------
// sampled ODE solutions

/// A one-variable ODE solution sampled on an axis, carrying value and first
/// three derivatives per node plus the measured defining-equation residual.
#[derive(Clone, Debug)]
pub struct OdeSolution<T> {
    xs: Vec<T>,
    jets: Vec<[T; 4]>,
    /// Relative tolerance the integrator ran at.
    pub rtol: f64,
    /// L-infinity residual of the defining equation over the refined interior
    /// sampling (see module docs). NaN only for hand-built solutions.
    pub defining_residual: f64,
}

impl<T: Real> OdeSolution<T> {
    /// Wrap externally produced samples; used for closed-form comparison data.
    pub fn from_parts(xs: Vec<T>, jets: Vec<[T; 4]>, rtol: f64, residual: f64) -> Result<Self> {
        if xs.len() != jets.len() {
            return Err(CfhError::shape(format!(
                "axis has {} nodes but {} jets were supplied",
                xs.len(),
                jets.len()
            )));
        }
        Ok(OdeSolution { xs, jets, rtol, defining_residual: residual })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn xs(&self) -> &[T] {
        &self.xs
    }

    pub fn jet(&self, i: usize) -> [T; 4] {
        self.jets[i]
    }

    pub fn value(&self, i: usize) -> T {
        self.jets[i][0]
    }

    pub fn d1(&self, i: usize) -> T {
        self.jets[i][1]
    }

    pub fn d2(&self, i: usize) -> T {
        self.jets[i][2]
    }

    pub fn d3(&self, i: usize) -> T {
        self.jets[i][3]
    }

    pub fn cast<U: Real>(&self) -> OdeSolution<U> {
        OdeSolution {
            xs: self.xs.iter().map(|&x| U::of(x.f64())).collect(),
            jets: self
                .jets
                .iter()
                .map(|j| [U::of(j[0].f64()), U::of(j[1].f64()), U::of(j[2].f64()), U::of(j[3].f64())])
                .collect(),
            rtol: self.rtol,
            defining_residual: self.defining_residual,
        }
    }
}

/// Validate an axis for solving: ascending, uniform, enough nodes. Returns h.
fn check_axis<T: Real>(label: &str, xs: &[T]) -> Result<f64> {
    let n = xs.len();
    if n < MIN_NODES {
        return Err(CfhError::shape(format!("{label}: axis has {n} nodes, below {MIN_NODES}")));
    }
    let h = (xs[n - 1].f64() - xs[0].f64()) / (n - 1) as f64;
    if !(h > 0.0) {
        return Err(CfhError::shape(format!("{label}: axis is not ascending")));
    }
    for w in xs.windows(2) {
        let d = w[1].f64() - w[0].f64();
        if d <= 0.0 || (d - h).abs() > 1e-8 * h {
            return Err(CfhError::shape(format!("{label}: axis spacing is not uniform")));
        }
    }
    Ok(h)
}

/// Insert three evenly spaced abscissae into every axis interval. Original
/// nodes are kept bit-identical at indices 0, 4, 8, ...
fn refine_axis<T: Real>(xs: &[T]) -> Vec<T> {
    let q = T::of(0.25);
    let mut out = Vec::with_capacity(4 * (xs.len() - 1) + 1);
    for w in xs.windows(2) {
        let d = (w[1] - w[0]) * q;
        out.push(w[0]);
        out.push(w[0] + d);
        out.push(w[0] + d + d);
        out.push(w[0] + d + d + d);
    }
    out.push(xs[xs.len() - 1]);
    out
}

/// Integrate one system over the refined axis; returns the refined states.
fn solve_refined<T: Real, const N: usize>(
    f: &impl OdeRhs<T, N>,
    x0: T,
    u0: [T; N],
    fine: &[T],
    opts: &OdeOpts,
) -> Result<Vec<[T; N]>> {
    ode::sample_grid_from(f, x0, u0, fine, opts)
}

/// Max |v| over the interior differencing band of a refined line.
fn interior_linf<T: Real>(vals: &[T]) -> f64 {
    let n = vals.len();
    vals[2..n - 2].iter().fold(0.0f64, |m, v| m.max(v.abs().f64()))
}

fn full_linf<T: Real>(vals: &[T]) -> f64 {
    vals.iter().fold(0.0f64, |m, v| m.max(v.abs().f64()))
}

/// Gate a measured residual and package the solution.
fn seal<T: Real>(
    label: &str,
    xs: &[T],
    jets: Vec<[T; 4]>,
    opts: &OdeOpts,
    residual: f64,
    h: f64,
) -> Result<OdeSolution<T>> {
    let cap = residual_gate(h);
    if !residual.is_finite() || residual > cap {
        return Err(CfhError::numerical(format!(
            "{label}: sampled-trajectory ODE residual {residual:.3e} exceeds {cap:.3e}"
        )));
    }
    Ok(OdeSolution { xs: xs.to_vec(), jets, rtol: opts.rtol, defining_residual: residual })
}

fn grid_x_axis<T: Real>(grid: &Grid2) -> Vec<T> {
    (0..grid.nx).map(|i| grid.x(i)).collect()
}

fn grid_y_axis<T: Real>(grid: &Grid2) -> Vec<T> {
    (0..grid.ny).map(|j| grid.y(j)).collect()
}

fn ensure_matches_axis<T: Real>(label: &str, xs: &[T], axis: &[T]) -> Result<()> {
    if xs.len() != axis.len() {
        return Err(CfhError::shape(format!(
            "{label}: solution has {} nodes, grid axis has {}",
            xs.len(),
            axis.len()
        )));
    }
    let scale = axis.iter().fold(1.0f64, |m, v| m.max(v.abs().f64()));
    for (a, b) in xs.iter().zip(axis) {
        if (a.f64() - b.f64()).abs() > 1e-12 * scale {
            return Err(CfhError::shape(format!("{label}: solution nodes do not match the grid axis")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// family samplers

/// Square-root branch selector for the family completions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    fn apply(self, v: f64) -> f64 {
        match self {
            Branch::Plus => v,
            Branch::Minus => -v,
        }
    }
}

/// Outcome of a family sampler: rejection is data, not an error.
#[derive(Clone, Debug)]
pub enum FamilyOutcome<C> {
    Accepted(C),
    Rejected {
        /// Signed feasibility margin; negative by more than rounding.
        margin: f64,
        reason: String,
    },
}

impl<C> FamilyOutcome<C> {
    pub fn is_accepted(&self) -> bool {
        matches!(self, FamilyOutcome::Accepted(_))
    }

    pub fn accepted(self) -> Result<C> {
        match self {
            FamilyOutcome::Accepted(c) => Ok(c),
            FamilyOutcome::Rejected { margin, reason } => Err(CfhError::config(format!(
                "family parameters rejected (margin {margin:.3e}): {reason}"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// family 2: polar seeds

/// Constants and ODE initial values for a family-2 member. Initial values are
/// taken at x = 1 (the X2 quadrature anchor) and y = 0.
#[derive(Clone, Copy, Debug)]
pub struct Example2Params {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// X1, X1', X1'' at x = 1.
    pub x1_init: [f64; 3],
    /// Y, Y' at y = 0.
    pub y_init: [f64; 2],
}

impl Example2Params {
    /// Nonzero-constant control member: X1 = x^2 + 5/2, X2 = -9/2, Y = y^2 - 2
    /// with (c0, c1) = (1, 0), giving G = 5 and H = -4 identically.
    pub fn control() -> Example2Params {
        Example2Params {
            c0: 1.0,
            c1: 0.0,
            c2: -4.5,
            x1_init: [3.5, 2.0, 2.0],
            y_init: [-2.0, 0.0],
        }
    }

    /// Default admissible member used by the evolution pipeline:
    /// (c0, c2, c3) = (-1, -1, 0) with branches (+, -, +). Its w = e^{-P} stays
    /// in [2.4, 4.8] on the default window and min |kappa1 kappa2| is about
    /// 7.2, so every genericity margin is wide.
    pub fn reference() -> Example2Params {
        match ex2_family_sample_with(-1.0, -1.0, 0.0, [Branch::Plus, Branch::Minus, Branch::Plus]) {
            FamilyOutcome::Accepted(c) => c.params(),
            FamilyOutcome::Rejected { .. } => unreachable!("reference triple satisfies the inequality"),
        }
    }
}

/// A completed family-2 parameter triple.
#[derive(Clone, Copy, Debug)]
pub struct Ex2Completion {
    pub c0: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    /// H(0); G(1) = -H(0) for admissible members.
    pub h0: f64,
    pub y0: f64,
    pub yp0: f64,
    pub x1_0: f64,
    pub x1p_0: f64,
    pub x1pp_0: f64,
}

impl Ex2Completion {
    pub fn params(&self) -> Example2Params {
        Example2Params {
            c0: self.c0,
            c1: 0.0,
            c2: self.c2,
            x1_init: [self.x1_0, self.x1p_0, self.x1pp_0],
            y_init: [self.y0, self.yp0],
        }
    }
}

/// Complete `(c0, c2, c3)` into ODE initial values with all three square
/// roots on the positive branch.
pub fn ex2_family_sample(c0: f64, c2: f64, c3: f64) -> FamilyOutcome<Ex2Completion> {
    ex2_family_sample_with(c0, c2, c3, [Branch::Plus; 3])
}

/// Completion with explicit branch choices `[Y(0), X1(1), X1'(1)]`.
///
/// Feasibility requires 17 c0^2 + 9 c0 c2 + c2^2 >= 13 c3^2; that margin is
/// exactly 13 times the length of the admissible c4 interval, whose midpoint
/// is used. H(0) is likewise the midpoint of its interval, which makes the
/// two outer discriminants equal. Boundary triples (margin 0) complete with
/// vanishing discriminants.
pub fn ex2_family_sample_with(
    c0: f64,
    c2: f64,
    c3: f64,
    signs: [Branch; 3],
) -> FamilyOutcome<Ex2Completion> {
    let lhs = 17.0 * c0 * c0 + 9.0 * c0 * c2 + c2 * c2;
    let rhs = 13.0 * c3 * c3;
    let margin = lhs - rhs;
    let tol = 1e-12 * lhs.abs().max(rhs.abs()).max(1.0);
    if margin < -tol {
        return FamilyOutcome::Rejected {
            margin,
            reason: format!("17 c0^2 + 9 c0 c2 + c2^2 = {lhs:.6} < 13 c3^2 = {rhs:.6}"),
        };
    }
    let lo = -(c2 - 2.0 * c0) * (c2 - 2.0 * c0) / 13.0;
    let hi = c0 * c2 + c0 * c0 - c3 * c3;
    let c4 = 0.5 * (lo + hi);
    let h0_lo = 4.0 * (c3 * c3 - c0 * c0);
    let h0_hi = 4.0 * (c0 * c2 - c4);
    let h0 = 0.5 * (h0_lo + h0_hi);
    let dy = (h0 - h0_lo).max(0.0);
    let dx = (h0_hi - h0).max(0.0);
    let du = ((c2 - 2.0 * c0) * (c2 - 2.0 * c0) + 13.0 * c4).max(0.0);
    let y0 = -2.0 * c0 + signs[0].apply(dy.sqrt());
    let x1_0 = -(c0 + c2) + signs[1].apply(dx.sqrt());
    let x1p_0 = (4.0 / 13.0) * (-(c2 - 2.0 * c0) + signs[2].apply(du.sqrt()));
    FamilyOutcome::Accepted(Ex2Completion {
        c0,
        c2,
        c3,
        c4,
        h0,
        y0,
        yp0: 2.0 * c3,
        x1_0,
        x1p_0,
        x1pp_0: c0 - x1_0 - c2,
    })
}

/// Closed-form family-2 data at one point; requires x > 0 and x^2 != y^2.
#[derive(Clone, Copy, Debug)]
pub struct Ex2Point<T> {
    pub cos_phi: T,
    pub sin_phi: T,
    pub phi: T,
    pub phi_x: T,
    pub phi_y: T,
    pub phi_xx: T,
    pub phi_yy: T,
    pub phi_xy: T,
    pub phi_z: T,
    pub phi_zx: T,
    pub phi_zy: T,
    pub phi_zz: T,
    pub psi: T,
    pub psi_x: T,
    pub psi_y: T,
    pub psi_xx: T,
    pub psi_yy: T,
    pub psi_z: T,
    pub psi_zz: T,
    /// phi_xx - phi_yy.
    pub l_phi: T,
    /// psi_xx - psi_yy.
    pub l_psi: T,
}

/// Evaluate the family-2 closed forms at `(x, y)`.
pub fn ex2_point<T: Real>(x: T, y: T) -> Ex2Point<T> {
    let two = T::of_int(2);
    let x2 = x * x;
    let y2 = y * y;
    let r2 = x2 + y2;
    let r4 = r2 * r2;
    let diff = x2 - y2;
    let cos_phi = diff / r2;
    let sin_phi = two * x * y / r2;
    let phi = two * (y / x).atan();
    let phi_xx = T::of_int(4) * x * y / r4;
    let ninth = T::of(1.125);
    let psi_xx = -two * diff / r4 + ninth / x2;
    let psi_yy = two * diff / r4;
    Ex2Point {
        cos_phi,
        sin_phi,
        phi,
        phi_x: -two * y / r2,
        phi_y: two * x / r2,
        phi_xx,
        phi_yy: -phi_xx,
        phi_xy: -two * diff / r4,
        phi_z: y / r2,
        phi_zx: -two * x * y / r4,
        phi_zy: diff / r4,
        phi_zz: -y * (T::of_int(7) * x2 + T::of_int(9) * y2) / (two * x * r4),
        psi: r2.ln() - ninth * x.ln(),
        psi_x: two * x / r2 - ninth / x,
        psi_y: two * y / r2,
        psi_xx,
        psi_yy,
        psi_z: -x / r2,
        psi_zz: (T::of_int(23) * x2 * x2 + T::of_int(22) * x2 * y2 - T::of_int(9) * y2 * y2)
            / (T::of_int(8) * x2 * r4),
        l_phi: two * phi_xx,
        l_psi: psi_xx - psi_yy,
    }
}

/// Family-2 seed fields on a grid.
#[derive(Clone, Debug)]
pub struct Ex2Seed<T> {
    pub phi: Field2<T>,
    pub phi_z: Field2<T>,
    pub psi: Field2<T>,
    pub psi_z: Field2<T>,
    pub phi_zz: Field2<T>,
    pub psi_zz: Field2<T>,
}

/// Sample the family-2 closed forms on `grid`. The window must stay clear of
/// the singular lines x = 0 and |x| = |y|, and on the x > 0 side.
pub fn ex2_closed_forms<T: Real>(grid: &Grid2) -> Result<Ex2Seed<T>> {
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let (x, y): (f64, f64) = (grid.x(i), grid.y(j));
            if x <= 1e-12 {
                return Err(CfhError::config(format!(
                    "window touches the singular line x = 0 (node x = {x})"
                )));
            }
            if (x.abs() - y.abs()).abs() <= 1e-12 {
                return Err(CfhError::config(format!(
                    "window touches the singular line |x| = |y| (node ({x}, {y}))"
                )));
            }
        }
    }
    Ok(Ex2Seed {
        phi: Field2::from_fn(*grid, |x, y| ex2_point(x, y).phi),
        phi_z: Field2::from_fn(*grid, |x, y| ex2_point(x, y).phi_z),
        psi: Field2::from_fn(*grid, |x, y| ex2_point(x, y).psi),
        psi_z: Field2::from_fn(*grid, |x, y| ex2_point(x, y).psi_z),
        phi_zz: Field2::from_fn(*grid, |x, y| ex2_point(x, y).phi_zz),
        psi_zz: Field2::from_fn(*grid, |x, y| ex2_point(x, y).psi_zz),
    })
}

/// Family-2 X jets from the integration state `[X1, X1', X1'', X2]`.
fn ex2_x_jets<T: Real>(c0: T, c1: T, x: T, u: &[T; 4]) -> ([T; 4], [T; 4]) {
    let nq = T::of(2.25);
    let x2 = x * x;
    let x1ppp = (c0 * x2 + c1 + u[2] - (x + nq / x) * u[1] + u[0]) / x;
    let x2p = u[3] / x + nq * u[1] / x2;
    let x2pp = x2p / x - u[3] / x2 + nq * (u[2] / x2 - T::of_int(2) * u[1] / (x2 * x));
    let x2ppp = x2pp / x - T::of_int(2) * x2p / x2
        + T::of_int(2) * u[3] / (x2 * x)
        + nq * (x1ppp / x2 - T::of_int(4) * u[2] / (x2 * x) + T::of_int(6) * u[1] / (x2 * x2));
    ([u[0], u[1], u[2], x1ppp], [u[3], x2p, x2pp, x2ppp])
}

/// Solve the family-2 systems on the given axes.
///
/// X1 solves the third-order equation with the regular singularity at x = 0,
/// jointly with the X2 quadrature (anchored at x = 1 where X2 = c2); Y solves
/// Y'' + Y = c0 y^2 + c1 from y = 0. The measured residuals are the
/// stencil-vs-trajectory form of the X1 equation, the algebraic first-order
/// relation X1'' + X1 + X2 = c0 x^2 - c1 (which propagates linearly from its
/// x = 1 value, so it genuinely checks the X1''(1) seed), the X2 quadrature
/// derivative, and the Y equation.
pub fn ex2_solve_odes<T: Real>(
    p: &Example2Params,
    xs: &[T],
    ys: &[T],
    opts: &OdeOpts,
) -> Result<(OdeSolution<T>, OdeSolution<T>, OdeSolution<T>)> {
    let hx = check_axis("family-2 x axis", xs)?;
    let hy = check_axis("family-2 y axis", ys)?;
    if xs[0].f64() <= 0.0 {
        return Err(CfhError::config("family-2 x range must stay right of the singularity at 0"));
    }
    let (c0, c1) = (T::of(p.c0), T::of(p.c1));
    let nq = T::of(2.25);

    let rhs_x = |x: T, u: &[T; 4]| {
        let x2 = x * x;
        [
            u[1],
            u[2],
            (c0 * x2 + c1 + u[2] - (x + nq / x) * u[1] + u[0]) / x,
            u[3] / x + nq * u[1] / x2,
        ]
    };
    let u0 = [T::of(p.x1_init[0]), T::of(p.x1_init[1]), T::of(p.x1_init[2]), T::of(p.c2)];
    let fine = refine_axis(xs);
    let states = solve_refined(&rhs_x, T::one(), u0, &fine, opts)?;

    let x1pp: Vec<T> = states.iter().map(|u| u[2]).collect();
    let x2v: Vec<T> = states.iter().map(|u| u[3]).collect();
    let hf = hx / 4.0;
    let d_x1pp = deriv_line(&x1pp, T::of(hf), 1)?;
    let d_x2 = deriv_line(&x2v, T::of(hf), 1)?;
    let mut r_ode = Vec::with_capacity(fine.len());
    let mut r_alg = Vec::with_capacity(fine.len());
    let mut r_x2 = Vec::with_capacity(fine.len());
    for (i, (&x, u)) in fine.iter().zip(&states).enumerate() {
        let x2 = x * x;
        r_ode.push(x * d_x1pp[i] - u[2] + (x + nq / x) * u[1] - u[0] - c0 * x2 - c1);
        r_alg.push(u[2] + u[0] + u[3] - c0 * x2 + c1);
        r_x2.push(d_x2[i] - u[3] / x - nq * u[1] / x2);
    }
    let res_x1 = interior_linf(&r_ode).max(full_linf(&r_alg));
    let res_x2 = interior_linf(&r_x2);

    let mut jets_x1 = Vec::with_capacity(xs.len());
    let mut jets_x2 = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let (j1, j2) = ex2_x_jets(c0, c1, x, &states[4 * i]);
        jets_x1.push(j1);
        jets_x2.push(j2);
    }
    let x1 = seal("family-2 X1", xs, jets_x1, opts, res_x1, hx)?;
    let x2 = seal("family-2 X2", xs, jets_x2, opts, res_x2, hx)?;

    let rhs_y = |y: T, u: &[T; 2]| [u[1], c0 * y * y + c1 - u[0]];
    let v0 = [T::of(p.y_init[0]), T::of(p.y_init[1])];
    let fine_y = refine_axis(ys);
    let ystates = solve_refined(&rhs_y, T::zero(), v0, &fine_y, opts)?;
    let yv: Vec<T> = ystates.iter().map(|u| u[0]).collect();
    let d2_y = deriv_line(&yv, T::of(hy / 4.0), 2)?;
    let r_y: Vec<T> = fine_y
        .iter()
        .zip(&ystates)
        .enumerate()
        .map(|(i, (&y, u))| d2_y[i] + u[0] - c0 * y * y - c1)
        .collect();
    let jets_y: Vec<[T; 4]> = ys
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let u = ystates[4 * i];
            [u[0], u[1], c0 * y * y + c1 - u[0], T::of_int(2) * c0 * y - u[1]]
        })
        .collect();
    let y = seal("family-2 Y", ys, jets_y, opts, interior_linf(&r_y), hy)?;

    Ok((x1, x2, y))
}

// ---------------------------------------------------------------------------
// assembled seed data

/// Initial data assembled from a family's ODE solutions: the inverse
/// conformal factor w = e^{-P}, its z-derivative, and kappa3, all at z = 0.
#[derive(Clone, Debug)]
pub struct SeedData<T> {
    pub w: Field2<T>,
    pub kappa3: Field2<T>,
    pub w_z: Field2<T>,
    /// True when w was negative over the whole window and the admissible
    /// global sign flip of (w, kappa3, w_z) was applied.
    pub flipped: bool,
}

fn finish_seed_data<T: Real>(
    mut w: Field2<T>,
    mut kappa3: Field2<T>,
    mut w_z: Field2<T>,
) -> Result<SeedData<T>> {
    let mut max_abs = 0.0f64;
    let mut min_abs = f64::INFINITY;
    let mut max_val = f64::NEG_INFINITY;
    for v in w.data() {
        let a = v.abs().f64();
        max_abs = max_abs.max(a);
        min_abs = min_abs.min(a);
        max_val = max_val.max(v.f64());
    }
    if max_abs == 0.0 {
        return Err(CfhError::numerical("conformal factor vanishes identically"));
    }
    if min_abs <= 1e-13 * max_abs {
        return Err(CfhError::numerical("conformal factor vanishes at a grid node"));
    }
    let flipped = max_val < 0.0;
    if flipped {
        let neg = |f: &mut Field2<T>| {
            for v in f.data_mut() {
                *v = -*v;
            }
        };
        neg(&mut w);
        neg(&mut kappa3);
        neg(&mut w_z);
    }
    Ok(SeedData { w, kappa3, w_z, flipped })
}

/// Assemble family-2 initial data on `grid` from solved (X1, X2, Y).
///
/// With Xbar = x X1' - X1, Ybar = y Y' - Y and A = Xbar + Ybar:
/// w = X1' - (2x/r^2) A, kappa3 = -Y' + (2y/r^2) A, and
/// w_z = (x X1' - A + (2 y^2/r^2) A)/r^2.
pub fn ex2_initial_data<T: Real>(
    x1: &OdeSolution<T>,
    x2: &OdeSolution<T>,
    y: &OdeSolution<T>,
    grid: &Grid2,
) -> Result<SeedData<T>> {
    let ax: Vec<T> = grid_x_axis(grid);
    let ay: Vec<T> = grid_y_axis(grid);
    ensure_matches_axis("family-2 X1", x1.xs(), &ax)?;
    ensure_matches_axis("family-2 X2", x2.xs(), &ax)?;
    ensure_matches_axis("family-2 Y", y.xs(), &ay)?;
    let two = T::of_int(2);
    let xbar: Vec<T> = ax.iter().enumerate().map(|(i, &x)| x * x1.d1(i) - x1.value(i)).collect();
    let ybar: Vec<T> = ay.iter().enumerate().map(|(j, &yy)| yy * y.d1(j) - y.value(j)).collect();
    let mut wd = Vec::with_capacity(grid.len());
    let mut kd = Vec::with_capacity(grid.len());
    let mut zd = Vec::with_capacity(grid.len());
    let _ = x2; // X2 enters w_z only through the first integrals, not (3-line) assembly
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let x = ax[i];
            let yy = ay[j];
            let r2 = x * x + yy * yy;
            let a = xbar[i] + ybar[j];
            wd.push(x1.d1(i) - two * x * a / r2);
            kd.push(-y.d1(j) + two * yy * a / r2);
            zd.push((x * x1.d1(i) - a + two * yy * yy * a / r2) / r2);
        }
    }
    finish_seed_data(
        Field2::from_data(*grid, wd)?,
        Field2::from_data(*grid, kd)?,
        Field2::from_data(*grid, zd)?,
    )
}

/// First-integral report for one family member.
#[derive(Clone, Debug)]
pub struct GhReport<T> {
    pub g: Vec<T>,
    pub h: Vec<T>,
    pub g_mean: T,
    pub h_mean: T,
    pub g_stdev: T,
    pub h_stdev: T,
    /// stdev / (1 + |mean|).
    pub g_rel_stdev: f64,
    pub h_rel_stdev: f64,
    pub g_min: f64,
}

fn slice_stats<T: Real>(v: &[T]) -> (T, T) {
    let n = T::of_int(v.len() as i64);
    let mean = crate::field::compensated_sum(v.iter().copied()) / n;
    let var = crate::field::compensated_sum(v.iter().map(|&x| (x - mean) * (x - mean))) / n;
    (mean, var.sqrt())
}

fn gh_report<T: Real>(g: Vec<T>, h: Vec<T>) -> GhReport<T> {
    let (g_mean, g_stdev) = slice_stats(&g);
    let (h_mean, h_stdev) = slice_stats(&h);
    let g_min = g.iter().fold(f64::INFINITY, |m, v| m.min(v.f64()));
    GhReport {
        g_rel_stdev: g_stdev.f64() / (1.0 + g_mean.abs().f64()),
        h_rel_stdev: h_stdev.f64() / (1.0 + h_mean.abs().f64()),
        g,
        h,
        g_mean,
        h_mean,
        g_stdev,
        h_stdev,
        g_min,
    }
}

/// Family-2 first integrals. Constancy of both is the solve's acceptance
/// check; G + H equals kappa3^2 - zeta, so admissible members have G + H = 0.
pub fn ex2_gh<T: Real>(
    x1: &OdeSolution<T>,
    x2: &OdeSolution<T>,
    y: &OdeSolution<T>,
    c0: f64,
    c1: f64,
) -> GhReport<T> {
    let (c0, c1) = (T::of(c0), T::of(c1));
    let (two, four) = (T::of_int(2), T::of_int(4));
    let nq = T::of(2.25);
    let g: Vec<T> = x1
        .xs()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (v, d, w) = (x1.value(i), x1.d1(i), x2.value(i));
            let s = v + c1 + w - c0 * x * x;
            s * s
                + four * c0 * (v + c1)
                + (T::one() + nq / (x * x)) * d * d
                + (two * w / x - four * c0 * x) * d
        })
        .collect();
    let h: Vec<T> = y
        .xs()
        .iter()
        .enumerate()
        .map(|(j, &yy)| {
            let (v, d) = (y.value(j), y.d1(j));
            let a = d - two * c0 * yy;
            let b = v - c1 - c0 * yy * yy + two * c0;
            a * a + b * b - four * c0 * c0
        })
        .collect();
    gh_report(g, h)
}

// ---------------------------------------------------------------------------
// family 1: profile seeds

/// Profiles and constants for a family-1 member. Both profile domains must
/// contain 0 (the ODE anchor); sigma > 0, and rho', sigma' keep one sign.
#[derive(Clone, Debug)]
pub struct Example1Params {
    pub rho: FnSpec,
    pub sigma: FnSpec,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// X1, X1' at x = 0 (X2(0) = c0 by definition).
    pub x1_init: [f64; 2],
    /// Y1, Y1' at y = 0 (Y2(0) = e^{rho(0)} Y1(0) + c1 by definition).
    pub y1_init: [f64; 2],
}

impl Example1Params {
    /// Default member: rho(y) = y, sigma(x) = e^x, admissibly completed so
    /// that G = 0.9 and H = -0.9 exactly.
    pub fn reference() -> Example1Params {
        Example1Params {
            rho: FnSpec::Affine { a: 0.0, b: 1.0 },
            sigma: FnSpec::Exp { amp: 1.0, rate: 1.0 },
            c0: 0.3,
            c1: 0.1,
            c2: -0.2,
            x1_init: [0.8, 0.1],
            y1_init: [1.1, -0.75],
        }
    }

    pub fn with_completion(mut self, c: &Ex1Completion) -> Example1Params {
        self.y1_init = [c.y1_0, c.y1p_0];
        self
    }

    fn validate(&self, xs: &[f64], ys: &[f64]) -> Result<()> {
        self.rho.check()?;
        self.sigma.check()?;
        let mut sig_dir = 0.0f64;
        for &x in xs {
            let j = self.sigma.jet(x);
            if !(j[0] > 0.0) {
                return Err(CfhError::config(format!("sigma({x}) = {} is not positive", j[0])));
            }
            if j[1] == 0.0 || (sig_dir != 0.0 && j[1].signum() != sig_dir) {
                return Err(CfhError::config("sigma must be strictly monotone on the window"));
            }
            sig_dir = j[1].signum();
        }
        let mut rho_dir = 0.0f64;
        for &y in ys {
            let j = self.rho.jet(y);
            if j[1] == 0.0 || (rho_dir != 0.0 && j[1].signum() != rho_dir) {
                return Err(CfhError::config("rho must be strictly monotone on the window"));
            }
            rho_dir = j[1].signum();
        }
        Ok(())
    }
}

/// Completed family-1 Y1 initial values.
#[derive(Clone, Copy, Debug)]
pub struct Ex1Completion {
    pub y1_0: f64,
    pub y1p_0: f64,
    /// The -H(0) the completion realizes; defaults to G(0).
    pub neg_h0: f64,
}

/// Complete a family-1 member: choose Y1(0) so that -H(0) takes the requested
/// value (default G(0), which makes kappa3^2 - zeta vanish and can never be
/// rejected since G >= 0), then Y1'(0) from the c2 relation.
pub fn ex1_family_sample(
    p: &Example1Params,
    neg_h0: Option<f64>,
    sign: Branch,
) -> FamilyOutcome<Ex1Completion> {
    let s0 = self_f64(&p.sigma, 0.0);
    let rj = p.rho.jet(0.0f64);
    let e0 = rj[0].exp();
    let q0 = 1.0 + e0 * e0;
    let g0 = {
        let t = s0 * p.x1_init[0] - p.c0;
        t * t + p.x1_init[0] * p.x1_init[0] + p.x1_init[1] * p.x1_init[1]
    };
    let nh = neg_h0.unwrap_or(g0);
    let rad = nh + (p.c1 * p.c1 + p.c2 * p.c2) * q0;
    if rad < 0.0 {
        return FamilyOutcome::Rejected {
            margin: rad,
            reason: format!("requested -H(0) = {nh:.6} leaves a negative discriminant"),
        };
    }
    let y1_0 = p.c1 * e0 + sign.apply(rad.sqrt());
    let y1p_0 = e0 * p.c2 - rj[1] * e0 * e0 / q0 * y1_0;
    FamilyOutcome::Accepted(Ex1Completion { y1_0, y1p_0, neg_h0: nh })
}

fn self_f64(f: &FnSpec, x: f64) -> f64 {
    f.eval(x)
}

/// Closed-form family-1 data at one point.
#[derive(Clone, Copy, Debug)]
pub struct Ex1Point<T> {
    pub sigma: T,
    pub sigma_p: T,
    pub e_rho: T,
    pub rho_p: T,
    pub rho_pp: T,
    pub cos_phi: T,
    pub sin_phi: T,
    pub phi: T,
    pub cos_2phi: T,
    pub phi_y: T,
    pub phi_yy: T,
    pub phi_z: T,
    pub phi_zx: T,
    pub phi_zy: T,
    pub phi_zz: T,
    pub psi_xx: T,
    pub psi_yy: T,
    pub psi_zz: T,
    /// psi_z before the base-point gauge constant is added.
    pub psi_z_raw: T,
    /// phi_xx - phi_yy (= -phi_yy here).
    pub l_phi: T,
    /// psi_xx - psi_yy.
    pub l_psi: T,
}

/// Evaluate the family-1 closed forms at `(x, y)`.
pub fn ex1_point<T: Real>(p: &Example1Params, x: T, y: T) -> Ex1Point<T> {
    let two = T::of_int(2);
    let sg = p.sigma.jet(x);
    let rj = p.rho.jet(y);
    let e = rj[0].exp();
    let e2 = e * e;
    let q = T::one() + e2;
    let root = q.sqrt();
    let cos_phi = T::one() / root;
    let sin_phi = e / root;
    let sc = e / q;
    let s2 = e2 / q;
    let cos_2phi = (T::one() - e2) / q;
    let phi_yy = (rj[2] + rj[1] * rj[1] * cos_2phi) * sc;
    let psi_xx = sg[0] * sg[0] / two;
    let psi_yy = rj[2] * s2 + rj[1] * rj[1] * s2 * (T::one() + two * cos_2phi) / two;
    Ex1Point {
        sigma: sg[0],
        sigma_p: sg[1],
        e_rho: e,
        rho_p: rj[1],
        rho_pp: rj[2],
        cos_phi,
        sin_phi,
        phi: e.atan(),
        cos_2phi,
        phi_y: rj[1] * sc,
        phi_yy,
        phi_z: sg[0] * sin_phi,
        phi_zx: sg[1] * sin_phi,
        phi_zy: sg[0] * rj[1] * sin_phi * cos_phi * cos_phi,
        phi_zz: (sg[0] * sg[0] - rj[2] - rj[1] * rj[1] / q) * sc,
        psi_xx,
        psi_yy,
        psi_zz: -(sg[0] * sg[0] * cos_2phi
            + two * rj[2] * s2
            + rj[1] * rj[1] * s2 * cos_2phi)
            / two,
        psi_z_raw: -sg[0] * cos_phi,
        l_phi: -phi_yy,
        l_psi: psi_xx - psi_yy,
    }
}

/// Family-1 seed fields on a grid.
#[derive(Clone, Debug)]
pub struct Ex1Seed<T> {
    pub phi: Field2<T>,
    pub phi_z: Field2<T>,
    pub phi_y: Field2<T>,
    pub phi_yy: Field2<T>,
    pub phi_zz: Field2<T>,
    pub psi_zz: Field2<T>,
    pub l_psi: Field2<T>,
}

/// Sample the family-1 closed forms on `grid`.
pub fn ex1_closed_forms<T: Real>(p: &Example1Params, grid: &Grid2) -> Result<Ex1Seed<T>> {
    let fx: Vec<f64> = (0..grid.nx).map(|i| grid.x(i)).collect();
    let fy: Vec<f64> = (0..grid.ny).map(|j| grid.y(j)).collect();
    p.validate(&fx, &fy)?;
    Ok(Ex1Seed {
        phi: Field2::from_fn(*grid, |x, y| ex1_point(p, x, y).phi),
        phi_z: Field2::from_fn(*grid, |x, y| ex1_point(p, x, y).phi_z),
        phi_y: Field2::from_fn(*grid, |x, y| ex1_point(p, x, y).phi_y),
        phi_yy: Field2::from_fn(*grid, |x, y| ex1_point(p, x, y).phi_yy),
        phi_zz: Field2::from_fn(*grid, |x, y| ex1_point(p, x, y).phi_zz),
        psi_zz: Field2::from_fn(*grid, |x, y| ex1_point(p, x, y).psi_zz),
        l_psi: Field2::from_fn(*grid, |x, y| ex1_point(p, x, y).l_psi),
    })
}

/// psi_z = -sigma(x) cos phi(y), gauged to vanish at `base`.
pub fn ex1_psi_z<T: Real>(p: &Example1Params, grid: &Grid2, base: (f64, f64)) -> Field2<T> {
    let pb = ex1_point(p, T::of(base.0), T::of(base.1));
    let gauge = pb.sigma * pb.cos_phi;
    Field2::from_fn(*grid, |x, y| {
        let pt = ex1_point(p, x, y);
        gauge - pt.sigma * pt.cos_phi
    })
}

/// The separable conjugate-function representative psi = alpha(x) + beta(y)
/// with alpha'' = sigma^2/2, beta'' = the rho-profile source, both vanishing
/// to first order at `base`. Any other representative differs by a gauge
/// affine in nothing the evolution consumes (only second derivatives enter).
pub fn ex1_psi<T: Real>(
    p: &Example1Params,
    xs: &[T],
    ys: &[T],
    base: (f64, f64),
    opts: &OdeOpts,
) -> Result<(OdeSolution<T>, OdeSolution<T>)> {
    let hx = check_axis("family-1 alpha axis", xs)?;
    let hy = check_axis("family-1 beta axis", ys)?;
    let two = T::of_int(2);

    let sig = p.sigma.clone();
    let rhs_a = move |x: T, u: &[T; 2]| {
        let s = sig.eval(x);
        [u[1], s * s / two]
    };
    let fine = refine_axis(xs);
    let astates = solve_refined(&rhs_a, T::of(base.0), [T::zero(); 2], &fine, opts)?;
    let av: Vec<T> = astates.iter().map(|u| u[0]).collect();
    let d2a = deriv_line(&av, T::of(hx / 4.0), 2)?;
    let ra: Vec<T> = fine
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = p.sigma.eval(x);
            d2a[i] - s * s / two
        })
        .collect();
    let jets_a: Vec<[T; 4]> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let sj = p.sigma.jet(x);
            [astates[4 * i][0], astates[4 * i][1], sj[0] * sj[0] / two, sj[0] * sj[1]]
        })
        .collect();
    let alpha = seal("family-1 alpha", xs, jets_a, opts, interior_linf(&ra), hx)?;

    let rho = p.rho.clone();
    let beta_src = move |y: T| {
        let rj = rho.jet(y);
        let e2 = rj[0].exp() * rj[0].exp();
        let q = T::one() + e2;
        let s2 = e2 / q;
        let c2 = (T::one() - e2) / q;
        s2 * (rj[2] + rj[1] * rj[1] * (T::one() + two * c2) / two)
    };
    let bsrc = beta_src.clone();
    let rhs_b = move |y: T, u: &[T; 2]| [u[1], bsrc(y)];
    let fine_b = refine_axis(ys);
    let bstates = solve_refined(&rhs_b, T::of(base.1), [T::zero(); 2], &fine_b, opts)?;
    let bv: Vec<T> = bstates.iter().map(|u| u[0]).collect();
    let d2b = deriv_line(&bv, T::of(hy / 4.0), 2)?;
    let rb: Vec<T> =
        fine_b.iter().enumerate().map(|(j, &y)| d2b[j] - beta_src(y)).collect();
    let jets_b: Vec<[T; 4]> = ys
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let rj = p.rho.jet(y);
            let e2 = rj[0].exp() * rj[0].exp();
            let q = T::one() + e2;
            let (s2, c2) = (e2 / q, (T::one() - e2) / q);
            let m = rj[2] + rj[1] * rj[1] * (T::one() + two * c2) / two;
            let mp = rj[3] + rj[1] * rj[2] * (T::one() + two * c2)
                - T::of_int(4) * rj[1] * rj[1] * rj[1] * e2 / (q * q);
            let b3 = two * rj[1] * (e2 / (q * q)) * m + s2 * mp;
            [bstates[4 * j][0], bstates[4 * j][1], s2 * m, b3]
        })
        .collect();
    let beta = seal("family-1 beta", ys, jets_b, opts, interior_linf(&rb), hy)?;
    Ok((alpha, beta))
}

/// Assemble the separable psi field from solved (alpha, beta).
pub fn ex1_psi_field<T: Real>(
    alpha: &OdeSolution<T>,
    beta: &OdeSolution<T>,
    grid: &Grid2,
) -> Result<Field2<T>> {
    ensure_matches_axis("family-1 alpha", alpha.xs(), &grid_x_axis(grid))?;
    ensure_matches_axis("family-1 beta", beta.xs(), &grid_y_axis(grid))?;
    let mut data = Vec::with_capacity(grid.len());
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            data.push(alpha.value(i) + beta.value(j));
        }
    }
    Field2::from_data(*grid, data)
}

/// Family-1 Y-system context at one ordinate.
struct Ex1YCtx<T> {
    e: T,
    ei: T,
    c2: T,
    r: [T; 4],
    u_aux: T,
    u_aux_p: T,
    c2p: T,
}

impl<T: Real> Ex1YCtx<T> {
    fn new(rho: &FnSpec, y: T) -> Self {
        let r = rho.jet(y);
        let e = r[0].exp();
        let e2 = e * e;
        let q = T::one() + e2;
        let sc = e / q;
        let c2 = (T::one() - e2) / q;
        let u_aux = (r[2] + r[1] * r[1] / q) * sc - e;
        let c2p = -T::of_int(4) * r[1] * e2 / (q * q);
        let u_aux_p = (r[3] + T::of_int(2) * r[1] * r[2] / q
            - T::of_int(2) * r[1] * r[1] * r[1] * e2 / (q * q))
            * sc
            + (r[2] + r[1] * r[1] / q) * c2 * r[1] * sc
            - r[1] * e;
        Ex1YCtx { e, ei: T::one() / e, c2, r, u_aux, u_aux_p, c2p }
    }

    /// Y1'' from the state.
    fn rr(&self, u: &[T; 3]) -> T {
        -self.e * u[2] + self.r[1] * self.c2 * u[1] - self.e * self.u_aux * u[0]
    }

    /// Y2' from the state.
    fn y2p(&self, u: &[T; 3]) -> T {
        self.e * (self.r[1] * u[0] + u[1]) + self.ei * u[1]
    }
}

/// Solve the family-1 systems on the given axes: the X system (X1 second
/// order coupled to the X2 quadrature) and the Y system (Y1 second order
/// coupled to the Y2 quadrature), both anchored at 0.
pub fn ex1_solve_odes<T: Real>(
    p: &Example1Params,
    xs: &[T],
    ys: &[T],
    opts: &OdeOpts,
) -> Result<(OdeSolution<T>, OdeSolution<T>, OdeSolution<T>, OdeSolution<T>)> {
    let hx = check_axis("family-1 x axis", xs)?;
    let hy = check_axis("family-1 y axis", ys)?;
    let fx: Vec<f64> = xs.iter().map(|v| v.f64()).collect();
    let fy: Vec<f64> = ys.iter().map(|v| v.f64()).collect();
    p.validate(&fx, &fy)?;

    let sig = p.sigma.clone();
    let rhs_x = move |x: T, u: &[T; 3]| {
        let s = sig.jet(x);
        [u[1], -(T::one() + s[0] * s[0]) * u[0] + s[0] * u[2], s[1] * u[0]]
    };
    let u0 = [T::of(p.x1_init[0]), T::of(p.x1_init[1]), T::of(p.c0)];
    let fine = refine_axis(xs);
    let states = solve_refined(&rhs_x, T::zero(), u0, &fine, opts)?;
    let x1pp: Vec<T> = fine
        .iter()
        .zip(&states)
        .map(|(&x, u)| {
            let s = p.sigma.jet(x);
            -(T::one() + s[0] * s[0]) * u[0] + s[0] * u[2]
        })
        .collect();
    let d_x1pp = deriv_line(&x1pp, T::of(hx / 4.0), 1)?;
    let x2v: Vec<T> = states.iter().map(|u| u[2]).collect();
    let d_x2 = deriv_line(&x2v, T::of(hx / 4.0), 1)?;
    let mut r_x1 = Vec::with_capacity(fine.len());
    let mut r_x2 = Vec::with_capacity(fine.len());
    for (i, (&x, u)) in fine.iter().zip(&states).enumerate() {
        let s = p.sigma.jet(x);
        r_x1.push(
            s[0] * d_x1pp[i] - s[1] * x1pp[i] + s[0] * (T::one() + s[0] * s[0]) * u[1]
                - s[1] * u[0],
        );
        r_x2.push(d_x2[i] - s[1] * u[0]);
    }
    let mut jets_x1 = Vec::with_capacity(xs.len());
    let mut jets_x2 = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let s = p.sigma.jet(x);
        let u = states[4 * i];
        let pp = -(T::one() + s[0] * s[0]) * u[0] + s[0] * u[2];
        let ppp = -s[0] * s[1] * u[0] - (T::one() + s[0] * s[0]) * u[1] + s[1] * u[2];
        jets_x1.push([u[0], u[1], pp, ppp]);
        jets_x2.push([u[2], s[1] * u[0], s[2] * u[0] + s[1] * u[1], s[3] * u[0] + T::of_int(2) * s[2] * u[1] + s[1] * pp]);
    }
    let x1 = seal("family-1 X1", xs, jets_x1, opts, interior_linf(&r_x1), hx)?;
    let x2 = seal("family-1 X2", xs, jets_x2, opts, interior_linf(&r_x2), hx)?;

    let rho = p.rho.clone();
    let rhs_y = move |y: T, u: &[T; 3]| {
        let c = Ex1YCtx::new(&rho, y);
        [u[1], c.rr(u), c.y2p(u)]
    };
    let e0 = T::of(p.rho.jet(0.0f64)[0]).exp();
    let v0 = [
        T::of(p.y1_init[0]),
        T::of(p.y1_init[1]),
        e0 * T::of(p.y1_init[0]) + T::of(p.c1),
    ];
    let fine_y = refine_axis(ys);
    let ystates = solve_refined(&rhs_y, T::zero(), v0, &fine_y, opts)?;
    let y1v: Vec<T> = ystates.iter().map(|u| u[0]).collect();
    let y2v: Vec<T> = ystates.iter().map(|u| u[2]).collect();
    let d2_y1 = deriv_line(&y1v, T::of(hy / 4.0), 2)?;
    let d_y2 = deriv_line(&y2v, T::of(hy / 4.0), 1)?;
    let mut r_y1 = Vec::with_capacity(fine_y.len());
    let mut r_y2 = Vec::with_capacity(fine_y.len());
    for (j, (&y, u)) in fine_y.iter().zip(&ystates).enumerate() {
        let c = Ex1YCtx::new(&p.rho, y);
        r_y1.push(d2_y1[j] - c.rr(u));
        r_y2.push(d_y2[j] - c.y2p(u));
    }
    let mut jets_y1 = Vec::with_capacity(ys.len());
    let mut jets_y2 = Vec::with_capacity(ys.len());
    for (j, &y) in ys.iter().enumerate() {
        let c = Ex1YCtx::new(&p.rho, y);
        let u = ystates[4 * j];
        let rr = c.rr(&u);
        let y2p = c.y2p(&u);
        let rp = -c.r[1] * c.e * u[2] - c.e * y2p
            + c.r[2] * c.c2 * u[1]
            + c.r[1] * c.c2p * u[1]
            + c.r[1] * c.c2 * rr
            - c.r[1] * c.e * c.u_aux * u[0]
            - c.e * c.u_aux_p * u[0]
            - c.e * c.u_aux * u[1];
        let w = c.r[1] * u[0] + u[1];
        let wp = c.r[2] * u[0] + c.r[1] * u[1] + rr;
        let wpp = c.r[3] * u[0] + T::of_int(2) * c.r[2] * u[1] + c.r[1] * rr + rp;
        let y2pp = c.e * (c.r[1] * w + wp) + c.ei * (rr - c.r[1] * u[1]);
        let y2ppp = c.e * (c.r[1] * c.r[1] * w + T::of_int(2) * c.r[1] * wp + c.r[2] * w + wpp)
            + c.ei * (rp - T::of_int(2) * c.r[1] * rr + (c.r[1] * c.r[1] - c.r[2]) * u[1]);
        jets_y1.push([u[0], u[1], rr, rp]);
        jets_y2.push([u[2], y2p, y2pp, y2ppp]);
    }
    let y1 = seal("family-1 Y1", ys, jets_y1, opts, interior_linf(&r_y1), hy)?;
    let y2 = seal("family-1 Y2", ys, jets_y2, opts, interior_linf(&r_y2), hy)?;
    Ok((x1, x2, y1, y2))
}

/// Assemble family-1 initial data on `grid` from solved (X1, X2, Y1, Y2):
/// w = cos phi X1 + Y1, kappa3 = -sin phi X1 - e^rho Y1 + Y2, and
/// w_z = -sigma sin^2 phi X1 + X2 + sigma cos phi Y1.
pub fn ex1_initial_data<T: Real>(
    p: &Example1Params,
    x1: &OdeSolution<T>,
    x2: &OdeSolution<T>,
    y1: &OdeSolution<T>,
    y2: &OdeSolution<T>,
    grid: &Grid2,
) -> Result<SeedData<T>> {
    let ax: Vec<T> = grid_x_axis(grid);
    let ay: Vec<T> = grid_y_axis(grid);
    ensure_matches_axis("family-1 X1", x1.xs(), &ax)?;
    ensure_matches_axis("family-1 X2", x2.xs(), &ax)?;
    ensure_matches_axis("family-1 Y1", y1.xs(), &ay)?;
    ensure_matches_axis("family-1 Y2", y2.xs(), &ay)?;
    let sig: Vec<T> = ax.iter().map(|&x| p.sigma.eval(x)).collect();
    struct Row<T> {
        c: T,
        s: T,
        e: T,
    }
    let rows: Vec<Row<T>> = ay
        .iter()
        .map(|&y| {
            let e = p.rho.eval(y).exp();
            let q = (T::one() + e * e).sqrt();
            Row { c: T::one() / q, s: e / q, e }
        })
        .collect();
    let mut wd = Vec::with_capacity(grid.len());
    let mut kd = Vec::with_capacity(grid.len());
    let mut zd = Vec::with_capacity(grid.len());
    for (j, row) in rows.iter().enumerate() {
        for i in 0..grid.nx {
            let v1 = x1.value(i);
            let (w1, w2) = (y1.value(j), y2.value(j));
            wd.push(row.c * v1 + w1);
            kd.push(-row.s * v1 - row.e * w1 + w2);
            zd.push(-sig[i] * row.s * row.s * v1 + x2.value(i) + sig[i] * row.c * w1);
        }
    }
    finish_seed_data(
        Field2::from_data(*grid, wd)?,
        Field2::from_data(*grid, kd)?,
        Field2::from_data(*grid, zd)?,
    )
}

/// Family-1 first integrals; G >= 0 always, and admissible members have
/// H = -G.
pub fn ex1_gh<T: Real>(
    p: &Example1Params,
    x1: &OdeSolution<T>,
    x2: &OdeSolution<T>,
    y1: &OdeSolution<T>,
    y2: &OdeSolution<T>,
) -> GhReport<T> {
    let g: Vec<T> = x1
        .xs()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = p.sigma.eval(x);
            let t = s * x1.value(i) - x2.value(i);
            t * t + x1.value(i) * x1.value(i) + x1.d1(i) * x1.d1(i)
        })
        .collect();
    let h: Vec<T> = y1
        .xs()
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let rj = p.rho.jet(y);
            let e = rj[0].exp();
            let q = T::one() + e * e;
            let root = q.sqrt();
            let mid = root / e * y1.d1(j) + rj[1] * e / root * y1.value(j);
            y2.value(j) * y2.value(j) + mid * mid - q * y1.value(j) * y1.value(j)
        })
        .collect();
    gh_report(g, h)
}

// ---------------------------------------------------------------------------
// default windows

/// Default family-2 window [0.6, 1.4] x [1.6, 2.4]: right of the x = 0
/// singularity, clear of |x| = |y|, with phi_z > 0 throughout.
pub fn ex2_default_window(n: usize) -> Result<Grid2> {
    Grid2::new(n, n, (0.6, 1.4), (1.6, 2.4))
}

/// Default family-1 window [-0.4, 0.4]^2 around the profile anchors.
pub fn ex1_default_window(n: usize) -> Result<Grid2> {
    Grid2::new(n, n, (-0.4, 0.4), (-0.4, 0.4))
}

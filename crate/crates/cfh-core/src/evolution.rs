//! Evolution of a Guichard slice in the flat direction.
//!
//! Starting from an assembled initial slice, the coupled second order system
//! for the angle pair (phi, psi) and the linear equation for the conformal
//! factor e^{-P} are integrated over a symmetric z-strip. Two drivers are
//! provided: a truncated Taylor expansion in z whose coefficients follow from
//! the field equations by recursion, and a classical method of lines marching
//! the slice ODE system with RK4. Both report the strip they actually cover;
//! degeneracy monitors (|sin 2phi| above the guard, e^{-P} positive, the
//! curvature product keeping its sign) shrink the strip instead of producing
//! poles.
//!
//! The module also evaluates the pointwise diagnostics of an evolved stack:
//! principal curvatures, the first-order coupling invariants, sectional
//! curvatures with their product identities, and the propagation residuals
//! that tie the z-derivatives of the invariants to their tangential
//! derivatives.

use crate::error::{CfhError, Result};
use crate::field::{self, partial, partial3, Axis2, Axis3, Field2, Field3, Grid2, Grid3, MIN_NODES};
use crate::guichard::{summarize3, ResidualEntry, DEFAULT_DEGENERACY_GUARD};
use crate::initial_data::{constraint_residuals, InitialDataSet};
use crate::jet::Jet2;
use crate::scalar::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default truncation order of the z-Taylor driver.
pub const DEFAULT_TAYLOR_ORDER: usize = 8;
/// Default half-width of the evolved strip.
pub const DEFAULT_Z_MAX: f64 = 0.1;
/// Default slice count (odd; the initial slice sits in the middle).
pub const DEFAULT_SLICES: usize = 41;

/// Integration scheme for the z-direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EvolutionMethod {
    /// Truncated Taylor expansion around z = 0. The field equations determine
    /// all higher coefficients from the first two; `order` is the highest
    /// power kept.
    Taylor { order: usize },
    /// RK4 march of the slice system, `substeps` steps per slice interval.
    /// With `filter` set, a cosine-basis projector drops the top third of the
    /// per-axis modes after every substep. The projector is only meaningful
    /// on near-uniform data; on smooth non-periodic fields the cut itself
    /// injects a per-step kick that the z-instability amplifies.
    MethodOfLines { substeps: usize, filter: bool },
}

impl Default for EvolutionMethod {
    fn default() -> Self {
        EvolutionMethod::Taylor { order: DEFAULT_TAYLOR_ORDER }
    }
}

/// Strip geometry and scheme selection for [`evolve`] / [`evolve_phi_psi`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionOptions {
    /// Half-width of the requested strip; the output covers [-z_max, z_max]
    /// unless a monitor shrinks it.
    pub z_max: f64,
    /// Total slice count including the initial slice; must be odd.
    pub slices: usize,
    pub method: EvolutionMethod,
    /// Lower bound imposed on |sin 2phi| over every kept slice.
    pub degeneracy_guard: f64,
}

impl Default for EvolutionOptions {
    fn default() -> Self {
        EvolutionOptions {
            z_max: DEFAULT_Z_MAX,
            slices: DEFAULT_SLICES,
            method: EvolutionMethod::default(),
            degeneracy_guard: DEFAULT_DEGENERACY_GUARD,
        }
    }
}

impl EvolutionOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_max.is_finite() && self.z_max >= 0.0) {
            return Err(CfhError::config(format!(
                "strip half-width must be finite and non-negative, got {}",
                self.z_max
            )));
        }
        if self.slices == 0 || self.slices % 2 == 0 {
            return Err(CfhError::config(format!(
                "slice count must be odd so the initial slice sits in the middle, got {}",
                self.slices
            )));
        }
        if (self.z_max == 0.0) != (self.slices == 1) {
            return Err(CfhError::config(format!(
                "a zero half-width pairs with exactly one slice, got z_max = {} with {} slices",
                self.z_max, self.slices
            )));
        }
        if !(self.degeneracy_guard.is_finite()
            && self.degeneracy_guard > 0.0
            && self.degeneracy_guard < 1.0)
        {
            return Err(CfhError::config(format!(
                "degeneracy guard must lie in (0, 1), got {}",
                self.degeneracy_guard
            )));
        }
        match self.method {
            EvolutionMethod::Taylor { order } => {
                if !(2..=12).contains(&order) {
                    return Err(CfhError::config(format!(
                        "Taylor order must lie in 2..=12, got {order}"
                    )));
                }
            }
            EvolutionMethod::MethodOfLines { substeps, .. } => {
                if substeps == 0 || substeps > 4096 {
                    return Err(CfhError::config(format!(
                        "substep count must lie in 1..=4096, got {substeps}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Angle pair over the evolved strip, with the z-jets the driver carries.
#[derive(Clone, Debug)]
pub struct AngleEvolution<T> {
    pub phi: Field3<T>,
    pub psi: Field3<T>,
    pub phi_z: Option<Field3<T>>,
    pub phi_zz: Option<Field3<T>>,
    pub psi_z: Option<Field3<T>>,
    /// Half-width actually covered after the degeneracy monitors.
    pub reached_z: f64,
}

/// Principal curvature fields over a stack; kappa3 is the middle one.
#[derive(Clone, Debug)]
pub struct KappaFields<T> {
    pub kappa1: Field3<T>,
    pub kappa2: Field3<T>,
    pub kappa3: Field3<T>,
}

/// First-order invariants of a stack. The couplings vanish on admissible
/// data; `curvature_gap` is kappa3^2 - zeta and measures the first integral.
#[derive(Clone, Debug)]
pub struct ConstraintFields<T> {
    pub coupling_xy: Field3<T>,
    pub coupling_xz: Field3<T>,
    pub coupling_yz: Field3<T>,
    pub curvature_gap: Field3<T>,
}

/// Max-norms of the invariants on one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceNorms {
    pub z: f64,
    pub coupling_xy: f64,
    pub coupling_xz: f64,
    pub coupling_yz: f64,
    pub curvature_gap: f64,
}

/// Per-slice norms plus whole-stack summaries of the invariant fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTrace {
    pub slices: Vec<SliceNorms>,
    pub summary: Vec<ResidualEntry>,
}

impl ConstraintTrace {
    /// Norms of the middle slice (z = 0).
    pub fn center(&self) -> &SliceNorms {
        &self.slices[(self.slices.len() - 1) / 2]
    }

    /// Largest coupling norm over all slices.
    pub fn max_coupling(&self) -> f64 {
        self.slices
            .iter()
            .fold(0.0, |m, s| m.max(s.coupling_xy).max(s.coupling_xz).max(s.coupling_yz))
    }

    /// Largest gap norm over all slices.
    pub fn max_gap(&self) -> f64 {
        self.slices.iter().fold(0.0, |m, s| m.max(s.curvature_gap))
    }
}

/// Sectional curvatures of the induced metric and their defects against the
/// principal curvature products. `gap_yz` and `gap_zx` coincide with
/// zeta - kappa3^2 identically at stencil level, so `gauss_defect` (the xy
/// defect) is the one carrying independent information. `zeta_residual`
/// checks zeta = K_yz sin^2 phi + K_zx cos^2 phi, again an identity of the
/// assembled stencils.
#[derive(Clone, Debug)]
pub struct CurvatureDiagnostics<T> {
    pub k_xy: Field3<T>,
    pub k_yz: Field3<T>,
    pub k_zx: Field3<T>,
    pub gauss_defect: Field3<T>,
    pub gap_yz: Field3<T>,
    pub gap_zx: Field3<T>,
    pub zeta_residual: Field3<T>,
}

impl<T: Real> CurvatureDiagnostics<T> {
    pub fn entries(&self) -> Vec<ResidualEntry> {
        vec![
            summarize3("sectional_xy", &self.k_xy),
            summarize3("sectional_yz", &self.k_yz),
            summarize3("sectional_zx", &self.k_zx),
            summarize3("gauss_defect", &self.gauss_defect),
            summarize3("gap_yz", &self.gap_yz),
            summarize3("gap_zx", &self.gap_zx),
            summarize3("zeta_residual", &self.zeta_residual),
        ]
    }

    pub fn max_gauss_gap(&self) -> f64 {
        field::linf3(&self.gauss_defect).f64()
    }
}

/// Residuals of the four propagation identities: the z-derivatives of the
/// coupling invariants and of the gap integral expressed through their
/// tangential derivatives. They vanish for any positive solution of the
/// conformal factor equation, admissible or not.
#[derive(Clone, Debug)]
pub struct PropagationResiduals<T> {
    pub eq_xy: Field3<T>,
    pub eq_xz: Field3<T>,
    pub eq_yz: Field3<T>,
    pub eq_j: Field3<T>,
}

impl<T: Real> PropagationResiduals<T> {
    pub fn entries(&self) -> Vec<ResidualEntry> {
        vec![
            summarize3("prop_xy", &self.eq_xy),
            summarize3("prop_xz", &self.eq_xz),
            summarize3("prop_yz", &self.eq_yz),
            summarize3("prop_j", &self.eq_j),
        ]
    }
}

/// Full evolved data set: fields, their z-jets, curvatures and the
/// constraint trace of the strip that survived the monitors.
#[derive(Clone, Debug)]
pub struct EvolvedGuichardData<T> {
    pub phi: Field3<T>,
    pub psi: Field3<T>,
    /// The conformal factor e^{-P}; positive on every kept slice.
    pub conformal: Field3<T>,
    pub kappa1: Field3<T>,
    pub kappa2: Field3<T>,
    pub kappa3: Field3<T>,
    pub phi_z: Option<Field3<T>>,
    pub phi_zz: Option<Field3<T>>,
    pub psi_z: Option<Field3<T>>,
    pub conformal_z: Option<Field3<T>>,
    pub trace: ConstraintTrace,
    pub reached_z: f64,
}

// ---------------------------------------------------------------------------
// small builders and input checks

fn field_from<T: Real>(grid: Grid2, f: impl Fn(usize) -> T + Sync) -> Field2<T> {
    let nx = grid.nx;
    Field2::from_fn_indexed(grid, |ix, iy| f(iy * nx + ix))
}

fn stack_from<T: Real>(grid: Grid3, f: impl Fn(usize) -> T + Sync) -> Field3<T> {
    let mut data = vec![T::zero(); grid.len()];
    data.par_chunks_mut(grid.nx).enumerate().for_each(|(row, chunk)| {
        let base = row * grid.nx;
        for (j, v) in chunk.iter_mut().enumerate() {
            *v = f(base + j);
        }
    });
    Field3::from_data(grid, data).expect("length matches the grid by construction")
}

fn check_guard_value(guard: f64) -> Result<()> {
    if !(guard.is_finite() && guard > 0.0 && guard < 1.0) {
        return Err(CfhError::config(format!(
            "degeneracy guard must lie in (0, 1), got {guard}"
        )));
    }
    Ok(())
}

/// Common admission checks for the stack diagnostics: matching grids, enough
/// slices for z-stencils, the angle clear of degeneracy, the conformal
/// factor (when given) finite and positive.
fn check_stack_inputs<T: Real>(
    phi: &Field3<T>,
    conformal: Option<&Field3<T>>,
    guard: f64,
) -> Result<()> {
    check_guard_value(guard)?;
    if phi.grid.nz < MIN_NODES {
        return Err(CfhError::config(format!(
            "stack diagnostics need at least {MIN_NODES} z-slices, got {}",
            phi.grid.nz
        )));
    }
    let g = T::of(guard);
    for (i, &v) in phi.data().iter().enumerate() {
        if !v.is_finite() || (v + v).sin().abs() < g {
            return Err(CfhError::numerical(format!(
                "|sin 2phi| falls below the degeneracy guard {guard} at node {i}"
            )));
        }
    }
    if let Some(u) = conformal {
        if u.grid != phi.grid {
            return Err(CfhError::shape("conformal factor lives on a different grid than phi"));
        }
        for (i, &v) in u.data().iter().enumerate() {
            if !(v.is_finite() && v > T::zero()) {
                return Err(CfhError::numerical(format!(
                    "the conformal factor must stay positive; node {i} fails"
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Taylor coefficients in z

/// Same series with the constant coefficient zeroed; the nilpotent part that
/// the series sine and cosine act on.
fn drop_constant<T: Real>(j: &Jet2<T>) -> Jet2<T> {
    let mut coeffs: Vec<Field2<T>> = (0..=j.order()).map(|k| j.coeff(k).clone()).collect();
    coeffs[0] = Field2::zeros(j.grid());
    Jet2::from_coeffs(coeffs).expect("coefficients share one grid")
}

/// Multiply every coefficient by a fixed z-independent field.
fn jet_scale_field<T: Real>(j: &Jet2<T>, f: &Field2<T>) -> Jet2<T> {
    let coeffs: Vec<Field2<T>> = (0..=j.order()).map(|k| j.coeff(k).mul(f)).collect();
    Jet2::from_coeffs(coeffs).expect("coefficients share one grid")
}

/// Series for sin 2phi and cos 2phi around the initial slice, split off the
/// constant part so the remainder is nilpotent.
fn double_angle_jets<T: Real>(a: &Jet2<T>, s20: &Field2<T>, c20: &Field2<T>) -> (Jet2<T>, Jet2<T>) {
    let chi2 = drop_constant(a).scale(T::of_int(2));
    let sn = chi2.sin_nilpotent();
    let cn = chi2.cos_nilpotent();
    let s2 = jet_scale_field(&cn, s20).add(&jet_scale_field(&sn, c20));
    let c2 = jet_scale_field(&cn, c20).sub(&jet_scale_field(&sn, s20));
    (s2, c2)
}

/// z-jets of the angle pair. Coefficients 0..2 are seeded from the data set;
/// the coupled wave system
///   phi_zz = (phi_xx - phi_yy) cos 2phi + (psi_xx - psi_yy) sin 2phi
///   psi_zz = (phi_xx - phi_yy) sin 2phi - (psi_xx - psi_yy) cos 2phi
/// supplies every higher coefficient by matching powers of z.
fn angle_jets<T: Real>(data: &InitialDataSet<T>, order: usize) -> (Jet2<T>, Jet2<T>) {
    let grid = data.grid();
    let half = T::one() / T::of_int(2);
    let mut a = Jet2::zeros(grid, order);
    a.set_coeff(0, data.phi.clone());
    a.set_coeff(1, data.phi_z.clone());
    a.set_coeff(2, data.phi_zz.scale(half));
    let mut b = Jet2::zeros(grid, order);
    b.set_coeff(0, data.psi.clone());
    b.set_coeff(1, data.psi_z.clone());
    b.set_coeff(2, data.psi_zz.scale(half));

    let s20 = data.phi.map(|v| (v + v).sin());
    let c20 = data.phi.map(|v| (v + v).cos());
    for k in 1..=order.saturating_sub(2) {
        let (s2, c2) = double_angle_jets(&a, &s20, &c20);
        let lphi = a.partial(Axis2::X, 2).sub(&a.partial(Axis2::Y, 2));
        let lpsi = b.partial(Axis2::X, 2).sub(&b.partial(Axis2::Y, 2));
        let rhs_phi = lphi.mul(&c2).add(&lpsi.mul(&s2));
        let rhs_psi = lphi.mul(&s2).sub(&lpsi.mul(&c2));
        let inv = T::one() / T::of_int(((k + 1) * (k + 2)) as i64);
        a.set_coeff(k + 2, rhs_phi.coeff(k).scale(inv));
        b.set_coeff(k + 2, rhs_psi.coeff(k).scale(inv));
    }
    (a, b)
}

/// z-jet of the conformal factor from the linear slice equation
///   u_zz = u_xx + 2 phi_x tan(phi) u_x + u_yy - 2 phi_y cot(phi) u_y
///          + (1 - 2 psi_zz) u,
/// with the angle jets supplying the variable coefficients.
fn conformal_jet<T: Real>(data: &InitialDataSet<T>, a: &Jet2<T>, b: &Jet2<T>, order: usize) -> Jet2<T> {
    let grid = data.grid();
    let half = T::one() / T::of_int(2);
    let two = T::of_int(2);

    let s0 = data.phi.map(|v| v.sin());
    let c0 = data.phi.map(|v| v.cos());
    let chi = drop_constant(a);
    let sn = chi.sin_nilpotent();
    let cn = chi.cos_nilpotent();
    let sphi = jet_scale_field(&cn, &s0).add(&jet_scale_field(&sn, &c0));
    let cphi = jet_scale_field(&cn, &c0).sub(&jet_scale_field(&sn, &s0));
    let tan = sphi.div(&cphi);
    let cot = cphi.div(&sphi);
    let ax2t = a.partial(Axis2::X, 1).mul(&tan).scale(two);
    let ay2c = a.partial(Axis2::Y, 1).mul(&cot).scale(two);

    // q = 1 - 2 psi_zz as a series; the psi-jet already satisfies the wave
    // system, so its differentiated series is the consistent choice
    let mut q = b.dz().dz().scale(-two);
    q.set_coeff(0, q.coeff(0).map(|v| v + T::one()));

    let mut u = Jet2::zeros(grid, order);
    u.set_coeff(0, data.w.clone());
    u.set_coeff(1, data.w_z.clone());
    u.set_coeff(2, data.w_zz.scale(half));
    for k in 1..=order.saturating_sub(2) {
        let ux = u.partial(Axis2::X, 1);
        let uy = u.partial(Axis2::Y, 1);
        let rhs = u
            .partial(Axis2::X, 2)
            .add(&ax2t.mul(&ux))
            .add(&u.partial(Axis2::Y, 2))
            .sub(&ay2c.mul(&uy))
            .add(&q.mul(&u));
        let inv = T::one() / T::of_int(((k + 1) * (k + 2)) as i64);
        u.set_coeff(k + 2, rhs.coeff(k).scale(inv));
    }
    u
}

// ---------------------------------------------------------------------------
// slice storage shared by both drivers

#[derive(Clone)]
struct SliceData<T> {
    phi: Field2<T>,
    psi: Field2<T>,
    phi_z: Field2<T>,
    phi_zz: Field2<T>,
    psi_z: Field2<T>,
    u: Option<Field2<T>>,
    u_z: Option<Field2<T>>,
}

struct SliceSet<T> {
    center: SliceData<T>,
    plus: Vec<SliceData<T>>,
    minus: Vec<SliceData<T>>,
    hz: f64,
}

impl<T: Real> SliceSet<T> {
    fn half(&self) -> usize {
        debug_assert_eq!(self.plus.len(), self.minus.len());
        self.plus.len()
    }

    fn reached(&self) -> f64 {
        self.hz * self.half() as f64
    }

    fn truncate(&mut self, new_half: usize) {
        self.plus.truncate(new_half);
        self.minus.truncate(new_half);
    }

    /// Assemble one component into a stack; slice order is -half ..= +half.
    fn stack(&self, pick: impl Fn(&SliceData<T>) -> &Field2<T>) -> Result<Field3<T>> {
        let h = self.half();
        let base = self.center.phi.grid;
        let span = self.hz * h as f64;
        let grid = Grid3::new(base, 2 * h + 1, (-span, span))?;
        let mut slices = Vec::with_capacity(2 * h + 1);
        for s in self.minus.iter().rev() {
            slices.push(pick(s).clone());
        }
        slices.push(pick(&self.center).clone());
        for s in self.plus.iter() {
            slices.push(pick(s).clone());
        }
        Field3::from_slices(grid, &slices)
    }
}

fn center_slice<T: Real>(data: &InitialDataSet<T>, with_u: bool) -> SliceData<T> {
    SliceData {
        phi: data.phi.clone(),
        psi: data.psi.clone(),
        phi_z: data.phi_z.clone(),
        phi_zz: data.phi_zz.clone(),
        psi_z: data.psi_z.clone(),
        u: with_u.then(|| data.w.clone()),
        u_z: with_u.then(|| data.w_z.clone()),
    }
}

/// A slice is kept when every value is finite, the angle stays clear of the
/// degeneracy guard, and the conformal factor (when evolved) stays positive.
fn slice_admissible<T: Real>(s: &SliceData<T>, guard: f64) -> bool {
    let g = T::of(guard);
    let angle_ok = s
        .phi
        .data()
        .iter()
        .all(|&v| v.is_finite() && (v + v).sin().abs() >= g);
    let finite = |f: &Field2<T>| f.data().iter().all(|v| v.is_finite());
    let u_ok = match (&s.u, &s.u_z) {
        (Some(u), Some(uz)) => u.data().iter().all(|&v| v.is_finite() && v > T::zero()) && finite(uz),
        _ => true,
    };
    angle_ok && finite(&s.psi) && finite(&s.phi_z) && finite(&s.phi_zz) && finite(&s.psi_z) && u_ok
}

fn eval_slice<T: Real>(a: &Jet2<T>, b: &Jet2<T>, u: Option<&Jet2<T>>, z: T) -> SliceData<T> {
    SliceData {
        phi: a.eval(z),
        psi: b.eval(z),
        phi_z: a.eval_dz(1, z),
        phi_zz: a.eval_dz(2, z),
        psi_z: b.eval_dz(1, z),
        u: u.map(|j| j.eval(z)),
        u_z: u.map(|j| j.eval_dz(1, z)),
    }
}

fn sample_taylor<T: Real>(
    data: &InitialDataSet<T>,
    order: usize,
    half: usize,
    hz: f64,
    with_u: bool,
    guard: f64,
) -> Result<SliceSet<T>> {
    let (a, b) = angle_jets(data, order);
    let ujet = with_u.then(|| conformal_jet(data, &a, &b, order));

    let center = center_slice(data, with_u);
    if !slice_admissible(&center, guard) {
        return Err(CfhError::numerical(
            "the initial slice already violates the degeneracy guard",
        ));
    }

    let hz_t = T::of(hz);
    let mut plus = Vec::with_capacity(half);
    let mut minus = Vec::with_capacity(half);
    for d in 1..=half {
        let zp = hz_t * T::of_int(d as i64);
        let sp = eval_slice(&a, &b, ujet.as_ref(), zp);
        let sm = eval_slice(&a, &b, ujet.as_ref(), -zp);
        if !(slice_admissible(&sp, guard) && slice_admissible(&sm, guard)) {
            break;
        }
        plus.push(sp);
        minus.push(sm);
    }
    if plus.is_empty() {
        return Err(CfhError::numerical(format!(
            "evolution degenerates within the first z-step (|z| <= {hz:.3e}); shrink the z-range"
        )));
    }
    Ok(SliceSet { center, plus, minus, hz })
}

// ---------------------------------------------------------------------------
// method of lines

#[derive(Clone)]
struct MarchState<T> {
    phi: Field2<T>,
    psi: Field2<T>,
    phi_t: Field2<T>,
    psi_t: Field2<T>,
    u: Option<Field2<T>>,
    u_t: Option<Field2<T>>,
}

fn lin2<T: Real>(a: &Field2<T>, b: &Field2<T>, h: T) -> Field2<T> {
    a.zip(b, move |x, y| x + h * y)
}

fn lin2_opt<T: Real>(a: &Option<Field2<T>>, b: &Option<Field2<T>>, h: T) -> Option<Field2<T>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(lin2(a, b, h)),
        _ => None,
    }
}

impl<T: Real> MarchState<T> {
    fn shifted(&self, k: &MarchState<T>, h: T) -> MarchState<T> {
        MarchState {
            phi: lin2(&self.phi, &k.phi, h),
            psi: lin2(&self.psi, &k.psi, h),
            phi_t: lin2(&self.phi_t, &k.phi_t, h),
            psi_t: lin2(&self.psi_t, &k.psi_t, h),
            u: lin2_opt(&self.u, &k.u, h),
            u_t: lin2_opt(&self.u_t, &k.u_t, h),
        }
    }
}

/// Slice derivative of the full state under the coupled wave system plus the
/// conformal factor equation.
fn mol_rhs<T: Real>(s: &MarchState<T>) -> MarchState<T> {
    let g = s.phi.grid;
    let two = T::of_int(2);
    let lphi = partial(&s.phi, Axis2::X, 2).sub(&partial(&s.phi, Axis2::Y, 2));
    let lpsi = partial(&s.psi, Axis2::X, 2).sub(&partial(&s.psi, Axis2::Y, 2));
    let pd = s.phi.data();
    let lf = lphi.data();
    let lp = lpsi.data();
    let acc_phi = field_from(g, |i| {
        let (s2, c2) = (pd[i] + pd[i]).sin_cos();
        lf[i] * c2 + lp[i] * s2
    });
    let acc_psi = field_from(g, |i| {
        let (s2, c2) = (pd[i] + pd[i]).sin_cos();
        lf[i] * s2 - lp[i] * c2
    });

    let (u_new, ut_new) = match (&s.u, &s.u_t) {
        (Some(u), Some(ut)) => {
            let px = partial(&s.phi, Axis2::X, 1);
            let py = partial(&s.phi, Axis2::Y, 1);
            let ux = partial(u, Axis2::X, 1);
            let uy = partial(u, Axis2::Y, 1);
            let uxx = partial(u, Axis2::X, 2);
            let uyy = partial(u, Axis2::Y, 2);
            let acc_u = {
                let (pxd, pyd) = (px.data(), py.data());
                let (uxd, uyd) = (ux.data(), uy.data());
                let (uxxd, uyyd) = (uxx.data(), uyy.data());
                let (ud, ad) = (u.data(), acc_psi.data());
                field_from(g, |i| {
                    let (sp, cp) = pd[i].sin_cos();
                    uxxd[i] + two * pxd[i] * (sp / cp) * uxd[i] + uyyd[i]
                        - two * pyd[i] * (cp / sp) * uyd[i]
                        + (T::one() - two * ad[i]) * ud[i]
                })
            };
            (Some(ut.clone()), Some(acc_u))
        }
        _ => (None, None),
    };

    MarchState {
        phi: s.phi_t.clone(),
        psi: s.psi_t.clone(),
        phi_t: acc_phi,
        psi_t: acc_psi,
        u: u_new,
        u_t: ut_new,
    }
}

fn combine4<T: Real>(
    y: &Field2<T>,
    k1: &Field2<T>,
    k2: &Field2<T>,
    k3: &Field2<T>,
    k4: &Field2<T>,
    h: T,
) -> Field2<T> {
    let h6 = h / T::of_int(6);
    let two = T::of_int(2);
    let (yd, a, b, c, d) = (y.data(), k1.data(), k2.data(), k3.data(), k4.data());
    field_from(y.grid, |i| yd[i] + h6 * (a[i] + two * (b[i] + c[i]) + d[i]))
}

fn combine4_opt<T: Real>(
    y: &Option<Field2<T>>,
    k1: &Option<Field2<T>>,
    k2: &Option<Field2<T>>,
    k3: &Option<Field2<T>>,
    k4: &Option<Field2<T>>,
    h: T,
) -> Option<Field2<T>> {
    match (y, k1, k2, k3, k4) {
        (Some(y), Some(a), Some(b), Some(c), Some(d)) => Some(combine4(y, a, b, c, d, h)),
        _ => None,
    }
}

fn rk4_step<T: Real>(s: &MarchState<T>, h: T) -> MarchState<T> {
    let half = h / T::of_int(2);
    let k1 = mol_rhs(s);
    let k2 = mol_rhs(&s.shifted(&k1, half));
    let k3 = mol_rhs(&s.shifted(&k2, half));
    let k4 = mol_rhs(&s.shifted(&k3, h));
    MarchState {
        phi: combine4(&s.phi, &k1.phi, &k2.phi, &k3.phi, &k4.phi, h),
        psi: combine4(&s.psi, &k1.psi, &k2.psi, &k3.psi, &k4.psi, h),
        phi_t: combine4(&s.phi_t, &k1.phi_t, &k2.phi_t, &k3.phi_t, &k4.phi_t, h),
        psi_t: combine4(&s.psi_t, &k1.psi_t, &k2.psi_t, &k3.psi_t, &k4.psi_t, h),
        u: combine4_opt(&s.u, &k1.u, &k2.u, &k3.u, &k4.u, h),
        u_t: combine4_opt(&s.u_t, &k1.u_t, &k2.u_t, &k3.u_t, &k4.u_t, h),
    }
}

/// Apply the separable low-pass projector: rows over x, then rows over y.
fn apply_low_pass<T: Real>(f: &Field2<T>, px: &[T], py: &[T]) -> Field2<T> {
    let g = f.grid;
    let (nx, ny) = (g.nx, g.ny);
    debug_assert_eq!(px.len(), nx * nx);
    debug_assert_eq!(py.len(), ny * ny);
    let fd = f.data();
    let tmp = field_from(g, |i| {
        let (ix, iy) = (i % nx, i / nx);
        let mut acc = T::zero();
        for k in 0..nx {
            acc = acc + px[ix * nx + k] * fd[iy * nx + k];
        }
        acc
    });
    let td = tmp.data();
    field_from(g, |i| {
        let (ix, iy) = (i % nx, i / nx);
        let mut acc = T::zero();
        for l in 0..ny {
            acc = acc + py[iy * ny + l] * td[l * nx + ix];
        }
        acc
    })
}

impl<T: Real> MarchState<T> {
    fn filtered(&self, px: &[T], py: &[T]) -> MarchState<T> {
        MarchState {
            phi: apply_low_pass(&self.phi, px, py),
            psi: apply_low_pass(&self.psi, px, py),
            phi_t: apply_low_pass(&self.phi_t, px, py),
            psi_t: apply_low_pass(&self.psi_t, px, py),
            u: self.u.as_ref().map(|f| apply_low_pass(f, px, py)),
            u_t: self.u_t.as_ref().map(|f| apply_low_pass(f, px, py)),
        }
    }
}

fn slice_from_state<T: Real>(s: &MarchState<T>) -> SliceData<T> {
    // the PDE gives the second jet pointwise from the current slice
    let acc = mol_rhs(s);
    SliceData {
        phi: s.phi.clone(),
        psi: s.psi.clone(),
        phi_z: s.phi_t.clone(),
        phi_zz: acc.phi_t,
        psi_z: s.psi_t.clone(),
        u: s.u.clone(),
        u_z: s.u_t.clone(),
    }
}

fn march_mol<T: Real>(
    data: &InitialDataSet<T>,
    half: usize,
    hz: f64,
    substeps: usize,
    filter: bool,
    with_u: bool,
    guard: f64,
) -> Result<SliceSet<T>> {
    let center = center_slice(data, with_u);
    if !slice_admissible(&center, guard) {
        return Err(CfhError::numerical(
            "the initial slice already violates the degeneracy guard",
        ));
    }
    let grid = data.grid();
    let proj = filter.then(|| (low_pass_matrix::<T>(grid.nx), low_pass_matrix::<T>(grid.ny)));

    let start = MarchState {
        phi: data.phi.clone(),
        psi: data.psi.clone(),
        phi_t: data.phi_z.clone(),
        psi_t: data.psi_z.clone(),
        u: with_u.then(|| data.w.clone()),
        u_t: with_u.then(|| data.w_z.clone()),
    };

    let mut sides: [Vec<SliceData<T>>; 2] = [Vec::new(), Vec::new()];
    for (side, out) in sides.iter_mut().enumerate() {
        let sign = if side == 0 { 1.0 } else { -1.0 };
        let h = T::of(sign * hz / substeps as f64);
        let mut s = start.clone();
        for _ in 0..half {
            for _ in 0..substeps {
                s = rk4_step(&s, h);
                if let Some((px, py)) = &proj {
                    s = s.filtered(px, py);
                }
            }
            let slice = slice_from_state(&s);
            if !slice_admissible(&slice, guard) {
                break;
            }
            out.push(slice);
        }
    }
    let [mut plus, mut minus] = sides;
    let keep = plus.len().min(minus.len());
    if keep == 0 {
        return Err(CfhError::numerical(format!(
            "evolution degenerates within the first z-step (|z| <= {hz:.3e}); shrink the z-range"
        )));
    }
    plus.truncate(keep);
    minus.truncate(keep);
    Ok(SliceSet { center, plus, minus, hz })
}

fn run_evolution<T: Real>(
    data: &InitialDataSet<T>,
    opts: &EvolutionOptions,
    with_u: bool,
) -> Result<SliceSet<T>> {
    let half = (opts.slices - 1) / 2;
    let hz = opts.z_max / half as f64;
    match opts.method {
        EvolutionMethod::Taylor { order } => {
            sample_taylor(data, order, half, hz, with_u, opts.degeneracy_guard)
        }
        EvolutionMethod::MethodOfLines { substeps, filter } => {
            march_mol(data, half, hz, substeps, filter, with_u, opts.degeneracy_guard)
        }
    }
}

// ---------------------------------------------------------------------------
// public drivers

fn single_slice_stack<T: Real>(f: &Field2<T>) -> Result<Field3<T>> {
    let grid = Grid3::new(f.grid, 1, (0.0, 0.0))?;
    Field3::from_slices(grid, std::slice::from_ref(f))
}

/// Evolve only the angle pair over the requested strip.
///
/// A degenerate request (`z_max = 0`, one slice) echoes the initial slice
/// unchanged. Otherwise slices are produced outward from z = 0 and the strip
/// is truncated symmetrically at the first monitor violation; covering no
/// slice at all is an error.
pub fn evolve_phi_psi<T: Real>(
    data: &InitialDataSet<T>,
    opts: &EvolutionOptions,
) -> Result<AngleEvolution<T>> {
    opts.validate()?;
    if opts.slices == 1 {
        return Ok(AngleEvolution {
            phi: single_slice_stack(&data.phi)?,
            psi: single_slice_stack(&data.psi)?,
            phi_z: Some(single_slice_stack(&data.phi_z)?),
            phi_zz: Some(single_slice_stack(&data.phi_zz)?),
            psi_z: Some(single_slice_stack(&data.psi_z)?),
            reached_z: 0.0,
        });
    }
    let set = run_evolution(data, opts, false)?;
    Ok(AngleEvolution {
        phi: set.stack(|s| &s.phi)?,
        psi: set.stack(|s| &s.psi)?,
        phi_z: Some(set.stack(|s| &s.phi_z)?),
        phi_zz: Some(set.stack(|s| &s.phi_zz)?),
        psi_z: Some(set.stack(|s| &s.psi_z)?),
        reached_z: set.reached(),
    })
}

/// Index distance from the center to the first slice whose curvature product
/// kappa1 kappa2 changes sign against the center slice anywhere.
fn first_sign_change<T: Real>(k: &KappaFields<T>) -> Option<usize> {
    let g = k.kappa1.grid;
    let n2 = g.nx * g.ny;
    let c = (g.nz - 1) / 2;
    let k1 = k.kappa1.data();
    let k2 = k.kappa2.data();
    let prod = |iz: usize, i: usize| k1[iz * n2 + i] * k2[iz * n2 + i];
    for d in 1..=c {
        for iz in [c - d, c + d] {
            for i in 0..n2 {
                if prod(iz, i) * prod(c, i) <= T::zero() {
                    return Some(d);
                }
            }
        }
    }
    None
}

/// Evolve the full Guichard data: angles, conformal factor, curvatures and
/// the constraint trace.
///
/// On top of the per-slice monitors the strip is truncated where the product
/// kappa1 kappa2 changes sign against the initial slice, so the genericity
/// of the data is a property of the whole output.
pub fn evolve<T: Real>(
    data: &InitialDataSet<T>,
    opts: &EvolutionOptions,
) -> Result<EvolvedGuichardData<T>> {
    opts.validate()?;
    let guard = opts.degeneracy_guard;
    if opts.slices == 1 {
        let report = constraint_residuals(data);
        let slices = vec![SliceNorms {
            z: 0.0,
            coupling_xy: field::linf(&report.coupling_xy).f64(),
            coupling_xz: field::linf(&report.coupling_xz).f64(),
            coupling_yz: field::linf(&report.coupling_yz).f64(),
            curvature_gap: field::linf(&report.curvature_gap).f64(),
        }];
        let summary = report.entries().to_vec();
        return Ok(EvolvedGuichardData {
            phi: single_slice_stack(&data.phi)?,
            psi: single_slice_stack(&data.psi)?,
            conformal: single_slice_stack(&data.w)?,
            kappa1: single_slice_stack(&data.kappa1)?,
            kappa2: single_slice_stack(&data.kappa2)?,
            kappa3: single_slice_stack(&data.kappa3)?,
            phi_z: Some(single_slice_stack(&data.phi_z)?),
            phi_zz: Some(single_slice_stack(&data.phi_zz)?),
            psi_z: Some(single_slice_stack(&data.psi_z)?),
            conformal_z: Some(single_slice_stack(&data.w_z)?),
            trace: ConstraintTrace { slices, summary },
            reached_z: 0.0,
        });
    }
    if opts.slices < MIN_NODES + 1 {
        return Err(CfhError::config(format!(
            "the curvature diagnostics need at least {} slices, got {}",
            MIN_NODES + 1,
            opts.slices
        )));
    }

    let mut set = run_evolution(data, opts, true)?;
    let thin = |half: usize, hz: f64| {
        CfhError::numerical(format!(
            "monitors leave only {} slices (|z| <= {:.4}); too thin for z-derivatives, \
             shrink the z-range",
            2 * half + 1,
            hz * half as f64
        ))
    };
    if set.half() < (MIN_NODES + 1) / 2 {
        return Err(thin(set.half(), set.hz));
    }

    // the sign truncation changes the stack, which moves the stencils near
    // the new edge, so the scan repeats until the strip is stable
    let mut rounds = 0;
    let (phi3, u3, kappas) = loop {
        let phi3 = set.stack(|s| &s.phi)?;
        let u3 = set.stack(|s| s.u.as_ref().expect("evolved with the conformal factor"))?;
        let kappas = kappa_fields(&phi3, &u3, guard)?;
        match first_sign_change(&kappas) {
            None => break (phi3, u3, kappas),
            Some(d) => {
                let new_half = d - 1;
                if new_half < (MIN_NODES + 1) / 2 {
                    return Err(CfhError::numerical(format!(
                        "the curvature product kappa1 kappa2 changes sign by |z| = {:.4}; \
                         the admissible strip is too thin",
                        d as f64 * set.hz
                    )));
                }
                set.truncate(new_half);
            }
        }
        rounds += 1;
        if rounds > 64 {
            return Err(CfhError::numerical(
                "the curvature sign scan failed to settle on a stable strip",
            ));
        }
    };

    let psi3 = set.stack(|s| &s.psi)?;
    let trace = constraint_report(&phi3, &psi3, &u3, &kappas.kappa3, guard)?;
    Ok(EvolvedGuichardData {
        reached_z: set.reached(),
        phi_z: Some(set.stack(|s| &s.phi_z)?),
        phi_zz: Some(set.stack(|s| &s.phi_zz)?),
        psi_z: Some(set.stack(|s| &s.psi_z)?),
        conformal_z: Some(set.stack(|s| s.u_z.as_ref().expect("evolved with the conformal factor"))?),
        phi: phi3,
        psi: psi3,
        conformal: u3,
        kappa1: kappas.kappa1,
        kappa2: kappas.kappa2,
        kappa3: kappas.kappa3,
        trace,
    })
}

// ---------------------------------------------------------------------------
// standalone conformal factor march

/// Cubic interpolation of per-slice coefficient fields at a fractional slice
/// position. Node positions are exact integers, so sampling at a node
/// reproduces that slice bitwise.
struct SliceInterp<'a, T> {
    coef: &'a [(Field2<T>, Field2<T>, Field2<T>)],
}

impl<T: Real> SliceInterp<'_, T> {
    fn at(&self, pos: T) -> (Field2<T>, Field2<T>, Field2<T>) {
        let nz = self.coef.len();
        let up = pos.f64().ceil() as i64;
        let j0 = (up - 2).clamp(0, nz as i64 - 4) as usize;
        let mut w = [T::zero(); 4];
        for (a, wa) in w.iter_mut().enumerate() {
            let xa = T::of_int((j0 + a) as i64);
            let mut num = T::one();
            let mut den = T::one();
            for b in 0..4 {
                if b != a {
                    let xb = T::of_int((j0 + b) as i64);
                    num = num * (pos - xb);
                    den = den * (xa - xb);
                }
            }
            *wa = num / den;
        }
        let grid = self.coef[0].0.grid;
        let pick = |sel: fn(&(Field2<T>, Field2<T>, Field2<T>)) -> &Field2<T>| {
            let rows: Vec<&[T]> = (0..4).map(|a| sel(&self.coef[j0 + a]).data()).collect();
            field_from(grid, |i| {
                w[0] * rows[0][i] + w[1] * rows[1][i] + w[2] * rows[2][i] + w[3] * rows[3][i]
            })
        };
        (pick(|c| &c.0), pick(|c| &c.1), pick(|c| &c.2))
    }
}

fn conf_rhs<T: Real>(u: &Field2<T>, coef: &(Field2<T>, Field2<T>, Field2<T>)) -> Field2<T> {
    let ux = partial(u, Axis2::X, 1);
    let uy = partial(u, Axis2::Y, 1);
    let uxx = partial(u, Axis2::X, 2);
    let uyy = partial(u, Axis2::Y, 2);
    let (a, b, q) = (coef.0.data(), coef.1.data(), coef.2.data());
    let (uxd, uyd, uxxd, uyyd, ud) = (ux.data(), uy.data(), uxx.data(), uyy.data(), u.data());
    field_from(u.grid, |i| {
        uxxd[i] + a[i] * uxd[i] + uyyd[i] - b[i] * uyd[i] + q[i] * ud[i]
    })
}

/// Re-integrate the conformal factor over an existing angle stack.
///
/// The variable coefficients of the slice equation are rebuilt from `phi`
/// alone (the potential enters only through its z-curvature, which the wave
/// system expresses through phi) and interpolated cubically between slices.
/// The march starts from the middle slice; a non-positive value anywhere is
/// an error rather than a truncation, because the output must cover the
/// angle stack it was given. The equation is linear: scaling both inputs
/// scales the output exactly.
pub fn evolve_conformal<T: Real>(
    phi: &Field3<T>,
    u0: &Field2<T>,
    u0_z: &Field2<T>,
    substeps: usize,
    guard: f64,
) -> Result<Field3<T>> {
    if substeps == 0 || substeps > 4096 {
        return Err(CfhError::config(format!(
            "substep count must lie in 1..=4096, got {substeps}"
        )));
    }
    let g3 = phi.grid;
    if g3.nz % 2 == 0 {
        return Err(CfhError::config(
            "the angle stack needs an odd slice count; the march starts at the middle slice",
        ));
    }
    if (g3.z_min + g3.z_max).abs() > 1e-12 * (g3.z_max - g3.z_min).abs() {
        return Err(CfhError::config(format!(
            "the angle stack must cover a symmetric strip, got [{}, {}]",
            g3.z_min, g3.z_max
        )));
    }
    check_stack_inputs(phi, None, guard)?;
    let base = g3.base();
    if u0.grid != base || u0_z.grid != base {
        return Err(CfhError::shape("initial conformal data does not match the angle grid"));
    }
    for f in [u0, u0_z] {
        if !f.data().iter().all(|v| v.is_finite()) {
            return Err(CfhError::numerical("initial conformal data must be finite"));
        }
    }
    if !u0.data().iter().all(|&v| v > T::zero()) {
        return Err(CfhError::numerical("the initial conformal factor must be positive"));
    }

    // per-slice coefficients: a = 2 phi_x tan phi, b = 2 phi_y cot phi,
    // q = 1 - 2 (phi_xx - phi_yy - phi_zz cos 2phi) / sin 2phi
    let pzz3 = partial3(phi, Axis3::Z, 2);
    let coef: Vec<(Field2<T>, Field2<T>, Field2<T>)> = (0..g3.nz)
        .map(|iz| {
            let p = phi.slice(iz);
            let px = partial(&p, Axis2::X, 1);
            let py = partial(&p, Axis2::Y, 1);
            let lphi = partial(&p, Axis2::X, 2).sub(&partial(&p, Axis2::Y, 2));
            let pzz = pzz3.slice(iz);
            let two = T::of_int(2);
            let (pd, pxd, pyd, ld, zd) = (p.data(), px.data(), py.data(), lphi.data(), pzz.data());
            let a = field_from(base, |i| {
                let (sp, cp) = pd[i].sin_cos();
                two * pxd[i] * (sp / cp)
            });
            let b = field_from(base, |i| {
                let (sp, cp) = pd[i].sin_cos();
                two * pyd[i] * (cp / sp)
            });
            let q = field_from(base, |i| {
                let (s2, c2) = (pd[i] + pd[i]).sin_cos();
                T::one() - two * (ld[i] - zd[i] * c2) / s2
            });
            (a, b, q)
        })
        .collect();
    let interp = SliceInterp { coef: &coef };

    let c = (g3.nz - 1) / 2;
    let h_t = g3.hz::<T>() / T::of_int(substeps as i64);
    let denom = T::of_int(2 * substeps as i64);
    let hz_f = g3.hz::<f64>();
    // stage positions in slice units; integer at the nodes, so the node
    // coefficients enter exactly
    let pos_at = |sign: i64, m2: i64| T::of_int(c as i64) + T::of_int(sign * m2) / denom;

    let mut sides: [Vec<Field2<T>>; 2] = [Vec::new(), Vec::new()];
    for (side, out) in sides.iter_mut().enumerate() {
        let sign: i64 = if side == 0 { 1 } else { -1 };
        let h = if sign > 0 { h_t } else { -h_t };
        let half_h = h / T::of_int(2);
        let h6 = h / T::of_int(6);
        let two = T::of_int(2);
        let mut u = u0.clone();
        let mut ut = u0_z.clone();
        for d in 1..=c {
            for m in 0..substeps {
                let m2 = 2 * ((d - 1) * substeps + m) as i64;
                let c0 = interp.at(pos_at(sign, m2));
                let ch = interp.at(pos_at(sign, m2 + 1));
                let c1 = interp.at(pos_at(sign, m2 + 2));
                let k1u = ut.clone();
                let k1t = conf_rhs(&u, &c0);
                let k2u = lin2(&ut, &k1t, half_h);
                let k2t = conf_rhs(&lin2(&u, &k1u, half_h), &ch);
                let k3u = lin2(&ut, &k2t, half_h);
                let k3t = conf_rhs(&lin2(&u, &k2u, half_h), &ch);
                let k4u = lin2(&ut, &k3t, h);
                let k4t = conf_rhs(&lin2(&u, &k3u, h), &c1);
                let (ud, a1, a2, a3, a4) = (u.data(), k1u.data(), k2u.data(), k3u.data(), k4u.data());
                let u_next = field_from(base, |i| {
                    ud[i] + h6 * (a1[i] + two * (a2[i] + a3[i]) + a4[i])
                });
                let (td, b1, b2, b3, b4) = (ut.data(), k1t.data(), k2t.data(), k3t.data(), k4t.data());
                let ut_next = field_from(base, |i| {
                    td[i] + h6 * (b1[i] + two * (b2[i] + b3[i]) + b4[i])
                });
                u = u_next;
                ut = ut_next;
            }
            if !u.data().iter().all(|&v| v.is_finite() && v > T::zero()) {
                return Err(CfhError::numerical(format!(
                    "the conformal factor crosses zero near z = {:.4}; shrink the z-range",
                    sign as f64 * d as f64 * hz_f
                )));
            }
            out.push(u.clone());
        }
    }
    let [plus, minus] = sides;
    let mut slices = Vec::with_capacity(g3.nz);
    for s in minus.iter().rev() {
        slices.push(s.clone());
    }
    slices.push(u0.clone());
    slices.extend(plus);
    Field3::from_slices(g3, &slices)
}

// ---------------------------------------------------------------------------
// stack diagnostics

/// Principal curvatures of a stack. kappa3 comes from the second-derivative
/// expression of the conformal factor; the other two differ from it by
/// u tan phi and -u cot phi.
pub fn kappa_fields<T: Real>(
    phi: &Field3<T>,
    conformal: &Field3<T>,
    guard: f64,
) -> Result<KappaFields<T>> {
    check_stack_inputs(phi, Some(conformal), guard)?;
    let g = phi.grid;
    let px = partial3(phi, Axis3::X, 1);
    let py = partial3(phi, Axis3::Y, 1);
    let pz = partial3(phi, Axis3::Z, 1);
    let pzz = partial3(phi, Axis3::Z, 2);
    let ux = partial3(conformal, Axis3::X, 1);
    let uy = partial3(conformal, Axis3::Y, 1);
    let uz = partial3(conformal, Axis3::Z, 1);
    let uxx = partial3(conformal, Axis3::X, 2);
    let uyy = partial3(conformal, Axis3::Y, 2);

    let pd = phi.data();
    let ud = conformal.data();
    let (pxd, pyd, pzd, pzzd) = (px.data(), py.data(), pz.data(), pzz.data());
    let (uxd, uyd, uzd, uxxd, uyyd) = (ux.data(), uy.data(), uz.data(), uxx.data(), uyy.data());
    let kappa3 = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        let c2 = cp * cp - sp * sp;
        (sp / cp) * uxxd[i] - pxd[i] * (c2 / (cp * cp)) * uxd[i]
            - ((cp / sp) * uyyd[i] - pyd[i] * (c2 / (sp * sp)) * uyd[i])
            + ud[i] * pzzd[i]
            - uzd[i] * pzd[i]
    });
    let k3 = kappa3.data();
    let kappa1 = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        ud[i] * (sp / cp) + k3[i]
    });
    let kappa2 = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        -ud[i] * (cp / sp) + k3[i]
    });
    Ok(KappaFields { kappa1, kappa2, kappa3 })
}

/// The scalar first integral zeta of the conformal factor equation.
pub fn zeta_field<T: Real>(phi: &Field3<T>, conformal: &Field3<T>, guard: f64) -> Result<Field3<T>> {
    check_stack_inputs(phi, Some(conformal), guard)?;
    let g = phi.grid;
    let px = partial3(phi, Axis3::X, 1);
    let py = partial3(phi, Axis3::Y, 1);
    let pz = partial3(phi, Axis3::Z, 1);
    let ux = partial3(conformal, Axis3::X, 1);
    let uy = partial3(conformal, Axis3::Y, 1);
    let uz = partial3(conformal, Axis3::Z, 1);
    let uxx = partial3(conformal, Axis3::X, 2);
    let uyy = partial3(conformal, Axis3::Y, 2);
    let uzz = partial3(conformal, Axis3::Z, 2);

    let two = T::of_int(2);
    let pd = phi.data();
    let ud = conformal.data();
    let (pxd, pyd, pzd) = (px.data(), py.data(), pz.data());
    let (uxd, uyd, uzd) = (ux.data(), uy.data(), uz.data());
    let (uxxd, uyyd, uzzd) = (uxx.data(), uyy.data(), uzz.data());
    Ok(stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        let lx = uxxd[i] + two * pxd[i] * (sp / cp) * uxd[i];
        let ly = uyyd[i] - two * pyd[i] * (cp / sp) * uyd[i];
        ud[i] * (lx + ly + uzzd[i] + pzd[i] * pzd[i] * ud[i])
            - (uxd[i] * uxd[i] / (cp * cp) + uyd[i] * uyd[i] / (sp * sp) + uzd[i] * uzd[i])
    }))
}

/// The three coupling invariants and the gap integral J = zeta - kappa3^2.
fn invariant_fields<T: Real>(
    phi: &Field3<T>,
    conformal: &Field3<T>,
    kappa3: &Field3<T>,
    guard: f64,
) -> Result<(Field3<T>, Field3<T>, Field3<T>, Field3<T>)> {
    check_stack_inputs(phi, Some(conformal), guard)?;
    if kappa3.grid != phi.grid {
        return Err(CfhError::shape("kappa3 lives on a different grid than phi"));
    }
    let g = phi.grid;
    let px = partial3(phi, Axis3::X, 1);
    let py = partial3(phi, Axis3::Y, 1);
    let pz = partial3(phi, Axis3::Z, 1);
    let pzx = partial3(&pz, Axis3::X, 1);
    let pzy = partial3(&pz, Axis3::Y, 1);
    let ux = partial3(conformal, Axis3::X, 1);
    let uy = partial3(conformal, Axis3::Y, 1);
    let uz = partial3(conformal, Axis3::Z, 1);
    let uxy = partial3(&ux, Axis3::Y, 1);
    let uzx = partial3(&uz, Axis3::X, 1);
    let uzy = partial3(&uz, Axis3::Y, 1);

    let pd = phi.data();
    let ud = conformal.data();
    let (pxd, pyd, pzd) = (px.data(), py.data(), pz.data());
    let (pzxd, pzyd) = (pzx.data(), pzy.data());
    let (uxd, uyd, uzd) = (ux.data(), uy.data(), uz.data());
    let (uxyd, uzxd, uzyd) = (uxy.data(), uzx.data(), uzy.data());
    let ixy = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        uxyd[i] - uyd[i] * pxd[i] * (cp / sp) + uxd[i] * pyd[i] * (sp / cp)
    });
    let ixz = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        uzxd[i] + uxd[i] * pzd[i] * (sp / cp) - ud[i] * pzxd[i] * (cp / sp)
    });
    let iyz = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        uzyd[i] - uyd[i] * pzd[i] * (cp / sp) + ud[i] * pzyd[i] * (sp / cp)
    });
    let zeta = zeta_field(phi, conformal, guard)?;
    let zd = zeta.data();
    let kd = kappa3.data();
    let j = stack_from(g, |i| zd[i] - kd[i] * kd[i]);
    Ok((ixy, ixz, iyz, j))
}

/// The coupling invariants together with the gap kappa3^2 - zeta, the
/// quantities whose per-slice norms make up the constraint trace.
pub fn constraint_fields<T: Real>(
    phi: &Field3<T>,
    conformal: &Field3<T>,
    kappa3: &Field3<T>,
    guard: f64,
) -> Result<ConstraintFields<T>> {
    let (ixy, ixz, iyz, j) = invariant_fields(phi, conformal, kappa3, guard)?;
    Ok(ConstraintFields {
        coupling_xy: ixy,
        coupling_xz: ixz,
        coupling_yz: iyz,
        curvature_gap: j.map(|v| -v),
    })
}

/// Per-slice constraint norms over the strip plus stack-level summaries.
///
/// The potential does not enter the residuals themselves; it is taken to pin
/// the slab the report describes and is checked for shape only.
pub fn constraint_report<T: Real>(
    phi: &Field3<T>,
    psi: &Field3<T>,
    conformal: &Field3<T>,
    kappa3: &Field3<T>,
    guard: f64,
) -> Result<ConstraintTrace> {
    if psi.grid != phi.grid {
        return Err(CfhError::shape("psi lives on a different grid than phi"));
    }
    let f = constraint_fields(phi, conformal, kappa3, guard)?;
    let g = phi.grid;
    let n2 = g.nx * g.ny;
    let slice_max = |fld: &Field3<T>, iz: usize| {
        fld.data()[iz * n2..(iz + 1) * n2]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs().f64()))
    };
    let slices = (0..g.nz)
        .map(|iz| SliceNorms {
            z: g.z::<f64>(iz),
            coupling_xy: slice_max(&f.coupling_xy, iz),
            coupling_xz: slice_max(&f.coupling_xz, iz),
            coupling_yz: slice_max(&f.coupling_yz, iz),
            curvature_gap: slice_max(&f.curvature_gap, iz),
        })
        .collect();
    let summary = vec![
        summarize3("coupling_xy", &f.coupling_xy),
        summarize3("coupling_xz", &f.coupling_xz),
        summarize3("coupling_yz", &f.coupling_yz),
        summarize3("curvature_gap", &f.curvature_gap),
    ];
    Ok(ConstraintTrace { slices, summary })
}

/// Sectional curvatures of the induced metric and their defects against the
/// pairwise products of principal curvatures.
pub fn curvature_diagnostics<T: Real>(
    phi: &Field3<T>,
    conformal: &Field3<T>,
    kappas: &KappaFields<T>,
    guard: f64,
) -> Result<CurvatureDiagnostics<T>> {
    check_stack_inputs(phi, Some(conformal), guard)?;
    if kappas.kappa1.grid != phi.grid {
        return Err(CfhError::shape("curvature fields live on a different grid than phi"));
    }
    let g = phi.grid;
    let px = partial3(phi, Axis3::X, 1);
    let py = partial3(phi, Axis3::Y, 1);
    let pz = partial3(phi, Axis3::Z, 1);
    let pxx = partial3(phi, Axis3::X, 2);
    let pyy = partial3(phi, Axis3::Y, 2);
    let pzz = partial3(phi, Axis3::Z, 2);
    let ux = partial3(conformal, Axis3::X, 1);
    let uy = partial3(conformal, Axis3::Y, 1);
    let uz = partial3(conformal, Axis3::Z, 1);
    let uxx = partial3(conformal, Axis3::X, 2);
    let uyy = partial3(conformal, Axis3::Y, 2);
    let uzz = partial3(conformal, Axis3::Z, 2);

    // the z-curvature of the embedding functions cos(phi)/u and sin(phi)/u
    // carries the remaining mixed term of the xy section
    let pd = phi.data();
    let ud = conformal.data();
    let ec = stack_from(g, |i| pd[i].cos() / ud[i]);
    let es = stack_from(g, |i| pd[i].sin() / ud[i]);
    let ecz = partial3(&ec, Axis3::Z, 1);
    let esz = partial3(&es, Axis3::Z, 1);

    let (pxd, pyd, pzd) = (px.data(), py.data(), pz.data());
    let (pxxd, pyyd, pzzd) = (pxx.data(), pyy.data(), pzz.data());
    let (uxd, uyd, uzd) = (ux.data(), uy.data(), uz.data());
    let (uxxd, uyyd, uzzd) = (uxx.data(), uyy.data(), uzz.data());
    let (eczd, eszd) = (ecz.data(), esz.data());

    let k_xy = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        let sc = sp * cp;
        let u = ud[i];
        u / (cp * cp) * (uxxd[i] + pxd[i] / sc * uxd[i])
            + u / (sp * sp) * (uyyd[i] - pyd[i] / sc * uyd[i])
            - uxd[i] * uxd[i] / (cp * cp)
            - uyd[i] * uyd[i] / (sp * sp)
            - u * u / sc * (pxxd[i] - pyyd[i])
            - u * u * u * u / sc * eczd[i] * eszd[i]
    });
    let k_yz = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        let sc = sp * cp;
        let u = ud[i];
        u * pxd[i] / sc * uxd[i]
            + u / (sp * sp) * (uyyd[i] - pyd[i] * (cp / sp) * uyd[i])
            + u * (uzzd[i] + pzd[i] * (cp / sp) * uzd[i])
            - uxd[i] * uxd[i] / (cp * cp)
            - uyd[i] * uyd[i] / (sp * sp)
            - uzd[i] * uzd[i]
            + u * u * (pzd[i] * pzd[i] - pzzd[i] * (cp / sp))
    });
    let k_zx = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        let sc = sp * cp;
        let u = ud[i];
        u / (cp * cp) * (uxxd[i] + pxd[i] * (sp / cp) * uxd[i]) - u * pyd[i] / sc * uyd[i]
            + u * (uzzd[i] - pzd[i] * (sp / cp) * uzd[i])
            - uxd[i] * uxd[i] / (cp * cp)
            - uyd[i] * uyd[i] / (sp * sp)
            - uzd[i] * uzd[i]
            + u * u * (pzd[i] * pzd[i] + pzzd[i] * (sp / cp))
    });

    let (k1, k2, k3) = (kappas.kappa1.data(), kappas.kappa2.data(), kappas.kappa3.data());
    let (kxyd, kyzd, kzxd) = (k_xy.data(), k_yz.data(), k_zx.data());
    let gauss_defect = stack_from(g, |i| kxyd[i] - k1[i] * k2[i]);
    let gap_yz = stack_from(g, |i| kyzd[i] - k2[i] * k3[i]);
    let gap_zx = stack_from(g, |i| kzxd[i] - k3[i] * k1[i]);
    let zeta = zeta_field(phi, conformal, guard)?;
    let zd = zeta.data();
    let zeta_residual = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        zd[i] - (kyzd[i] * sp * sp + kzxd[i] * cp * cp)
    });
    Ok(CurvatureDiagnostics {
        k_xy,
        k_yz,
        k_zx,
        gauss_defect,
        gap_yz,
        gap_zx,
        zeta_residual,
    })
}

/// Residuals of the propagation identities relating z-derivatives of the
/// coupling invariants and of the gap integral to tangential derivatives.
pub fn propagation_residuals<T: Real>(
    phi: &Field3<T>,
    conformal: &Field3<T>,
    kappas: &KappaFields<T>,
    guard: f64,
) -> Result<PropagationResiduals<T>> {
    if kappas.kappa1.grid != phi.grid {
        return Err(CfhError::shape("curvature fields live on a different grid than phi"));
    }
    let (ixy, ixz, iyz, j) = invariant_fields(phi, conformal, &kappas.kappa3, guard)?;
    let g = phi.grid;
    let px = partial3(phi, Axis3::X, 1);
    let py = partial3(phi, Axis3::Y, 1);
    let pz = partial3(phi, Axis3::Z, 1);
    let ux = partial3(conformal, Axis3::X, 1);
    let uy = partial3(conformal, Axis3::Y, 1);
    let uz = partial3(conformal, Axis3::Z, 1);
    let ixy_x = partial3(&ixy, Axis3::X, 1);
    let ixy_y = partial3(&ixy, Axis3::Y, 1);
    let ixy_z = partial3(&ixy, Axis3::Z, 1);
    let ixz_x = partial3(&ixz, Axis3::X, 1);
    let ixz_y = partial3(&ixz, Axis3::Y, 1);
    let ixz_z = partial3(&ixz, Axis3::Z, 1);
    let iyz_y = partial3(&iyz, Axis3::Y, 1);
    let iyz_z = partial3(&iyz, Axis3::Z, 1);
    let j_x = partial3(&j, Axis3::X, 1);
    let j_y = partial3(&j, Axis3::Y, 1);
    let j_z = partial3(&j, Axis3::Z, 1);

    let pd = phi.data();
    let ud = conformal.data();
    let (pxd, pyd, pzd) = (px.data(), py.data(), pz.data());
    let (uxd, uyd, uzd) = (ux.data(), uy.data(), uz.data());
    let (k1, k2, k3) = (kappas.kappa1.data(), kappas.kappa2.data(), kappas.kappa3.data());
    let (ixyd, ixzd, iyzd) = (ixy.data(), ixz.data(), iyz.data());
    let half = T::one() / T::of_int(2);
    let two = T::of_int(2);

    let d_ixy = (ixy_x.data(), ixy_y.data(), ixy_z.data());
    let d_ixz = (ixz_x.data(), ixz_y.data(), ixz_z.data());
    let d_iyz = (iyz_y.data(), iyz_z.data());
    let d_j = (j_x.data(), j_y.data(), j_z.data());

    let eq_xy = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        let t = sp / cp;
        let ct = cp / sp;
        d_ixy.2[i]
            - (d_ixz.1[i] - pzd[i] * t * ixyd[i] + pyd[i] * t * ixzd[i] - pxd[i] * ct * iyzd[i])
    });
    let eq_xz = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        let (s2, c2) = (sp * sp, cp * cp);
        let t = sp / cp;
        -k2[i] * t * d_ixz.2[i]
            - (half * d_j.0[i] - k3[i] / (sp * cp) * d_ixy.1[i]
                + ((k3[i] * pyd[i] / c2 + uyd[i]) / s2) * ixyd[i]
                + (-k3[i] * pzd[i] / c2 + ud[i] * pzd[i] * t + uzd[i]) * ixzd[i])
    });
    let eq_yz = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        let (s2, c2) = (sp * sp, cp * cp);
        let ct = cp / sp;
        k1[i] * ct * d_iyz.1[i]
            - (half * d_j.1[i]
                + k3[i] / (sp * cp) * d_ixy.0[i]
                + ((k3[i] * pxd[i] / s2 + uxd[i]) / c2) * ixyd[i]
                - (k3[i] * pzd[i] / s2 + ud[i] * pzd[i] * ct - uzd[i]) * iyzd[i])
    });
    let eq_j = stack_from(g, |i| {
        let (sp, cp) = pd[i].sin_cos();
        let (s2, c2) = (sp * sp, cp * cp);
        let cos2 = c2 - s2;
        let t = sp / cp;
        let ct = cp / sp;
        half * d_j.2[i]
            - (-k2[i] * t * d_ixz.0[i] + k1[i] * ct * d_iyz.0[i]
                + (two * ud[i] * pxd[i] * t + k3[i] * pxd[i] * cos2 / c2 - uxd[i] / c2) * ixzd[i]
                - (two * ud[i] * pyd[i] * ct + k3[i] * pyd[i] * cos2 / s2 + uyd[i] / s2) * iyzd[i])
    });
    Ok(PropagationResiduals { eq_xy, eq_xz, eq_yz, eq_j })
}

// ---------------------------------------------------------------------------
// spectral projector

/// Row-major n x n matrix of the cosine-basis low-pass projector that keeps
/// the bottom two thirds of the modes. Exactly reproduces constants and
/// annihilates the alternating top mode (up to rounding). Needs n >= 2.
pub fn low_pass_matrix<T: Real>(n: usize) -> Vec<T> {
    assert!(n >= 2, "projector needs at least 2 nodes");
    let m = (n - 1) as f64;
    let keep = (2.0 * m / 3.0).floor() as usize;
    let w = |j: usize| if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
    // P = synthesis . mask . analysis for the endpoint-weighted cosine basis
    let mut p = vec![0.0f64; n * n];
    for row in 0..n {
        for col in 0..n {
            let mut acc = 0.0;
            for k in 0..=keep {
                let basis = |j: usize| (std::f64::consts::PI * (k * j) as f64 / m).cos();
                acc += (2.0 / m) * w(k) * basis(row) * w(col) * basis(col);
            }
            p[row * n + col] = acc;
        }
    }
    p.into_iter().map(T::of).collect()
}

// ---------------------------------------------------------------------------

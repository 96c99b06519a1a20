//! Residual diagnostics for the coupled angle system behind conformally flat
//! 3-metrics, and the constant-curvature 2-metric carried by its z-slices.
//!
//! The diagonal metric `cos^2(phi) dx^2 + sin^2(phi) dy^2 + dz^2` is
//! conformally flat exactly when the angle `phi` satisfies four third-order
//! equations; [`flatness_residuals`] evaluates them on sampled data. A
//! companion potential `psi` couples to `phi` through four second-order
//! equations plus two normalization constraints; [`psi_residuals`] evaluates
//! those. On each z-slice an admissible pair induces an orthogonal 2-metric
//! `A^2 dx^2 + B^2 dy^2` whose Gauss curvature must be identically -1;
//! [`hat_metric`] extracts it and [`gauss_curvature`] checks it. Finally,
//! [`guichard_check`] classifies a diagonal 3-metric by which permutation of
//! its coefficients satisfies the Pythagorean sum condition
//! `l_i^2 + l_j^2 = l_k^2`.
//!
//! All derivatives not supplied analytically come from the fourth-order
//! stencils in [`crate::field`]. Residuals are reported, never clamped;
//! degeneracy of the divisors is guarded at construction time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CfhError, Result};
use crate::field::{self, compensated_sum, dx, dy, partial3, Axis3, Field2, Field3, Grid3};
use crate::scalar::Real;

/// Default lower bound enforced on |sin 2phi|, and on |phi_z| where it
/// divides. Working windows are chosen so the fields clear this comfortably.
pub const DEFAULT_DEGENERACY_GUARD: f64 = 0.05;

/// Norm summary of one residual field, ready for the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub name: String,
    pub linf: f64,
    /// Volume-weighted L2 norm.
    pub l2: f64,
    /// Node (ix, iy, iz) where |value| peaks; iz is the slice index for 2D
    /// data.
    pub max_node: [usize; 3],
}

/// Summarize a 3D residual field.
pub fn summarize3<T: Real>(name: &str, f: &Field3<T>) -> ResidualEntry {
    let g = f.grid;
    let mut peak = T::zero();
    let mut at = 0usize;
    for (i, v) in f.data().iter().enumerate() {
        let a = v.abs();
        if a > peak {
            peak = a;
            at = i;
        }
    }
    let w = g.base().hx::<T>() * g.base().hy::<T>() * g.hz::<T>();
    let l2 = (w * compensated_sum(f.data().iter().map(|&v| v * v))).sqrt();
    ResidualEntry {
        name: name.to_string(),
        linf: peak.f64(),
        l2: l2.f64(),
        max_node: unravel(g, at),
    }
}

/// Summarize a per-slice residual field; `iz` records which slice it came
/// from.
pub fn summarize2<T: Real>(name: &str, f: &Field2<T>, iz: usize) -> ResidualEntry {
    let (ix, iy, peak) = field::argmax_abs(f);
    ResidualEntry {
        name: name.to_string(),
        linf: peak.f64(),
        l2: field::l2(f).f64(),
        max_node: [ix, iy, iz],
    }
}

/// Largest absolute value at least `band` nodes away from every face.
pub fn linf_interior3<T: Real>(f: &Field3<T>, band: usize) -> T {
    let g = f.grid;
    assert!(
        g.nx > 2 * band && g.ny > 2 * band && g.nz > 2 * band,
        "band swallows the grid"
    );
    let mut m = T::zero();
    for iz in band..g.nz - band {
        for iy in band..g.ny - band {
            for ix in band..g.nx - band {
                m = m.max(f.at(ix, iy, iz).abs());
            }
        }
    }
    m
}

fn unravel(g: Grid3, i: usize) -> [usize; 3] {
    let plane = g.nx * g.ny;
    [i % plane % g.nx, i % plane / g.nx, i / plane]
}

fn ensure_finite3<T: Real>(name: &str, f: &Field3<T>) -> Result<()> {
    for (i, v) in f.data().iter().enumerate() {
        if !v.f64().is_finite() {
            let [ix, iy, iz] = unravel(f.grid, i);
            return Err(CfhError::numerical(format!(
                "{name} is not finite at node ({ix}, {iy}, {iz})"
            )));
        }
    }
    Ok(())
}

fn check_guard(guard: f64) -> Result<()> {
    if !(guard.is_finite() && guard > 0.0) {
        return Err(CfhError::config(format!(
            "degeneracy guard must be positive and finite, got {guard}"
        )));
    }
    Ok(())
}

/// Angle field of a candidate conformally flat 3-metric.
///
/// Construction enforces the degeneracy guard: the residual suites divide by
/// sin 2phi throughout, so |sin 2phi| must stay above the guard on the whole
/// box. Producers that know the z-derivatives exactly (Taylor jet data does)
/// can attach them; stencils in z fill in otherwise.
#[derive(Clone, Debug)]
pub struct GuichardAngle<T> {
    phi: Field3<T>,
    phi_z: Option<Field3<T>>,
    phi_zz: Option<Field3<T>>,
    guard: f64,
    min_sin2: f64,
}

impl<T: Real> GuichardAngle<T> {
    pub fn new(phi: Field3<T>) -> Result<Self> {
        Self::with_guard(phi, DEFAULT_DEGENERACY_GUARD)
    }

    pub fn with_guard(phi: Field3<T>, guard: f64) -> Result<Self> {
        check_guard(guard)?;
        ensure_finite3("phi", &phi)?;
        let mut min_sin2 = f64::INFINITY;
        let mut worst = 0usize;
        for (i, v) in phi.data().iter().enumerate() {
            let s = (2.0 * v.f64()).sin().abs();
            if s < min_sin2 {
                min_sin2 = s;
                worst = i;
            }
        }
        if min_sin2 < guard {
            let [ix, iy, iz] = unravel(phi.grid, worst);
            return Err(CfhError::numerical(format!(
                "|sin 2phi| = {min_sin2:.3e} at node ({ix}, {iy}, {iz}) is below the \
                 degeneracy guard {guard}"
            )));
        }
        Ok(GuichardAngle { phi, phi_z: None, phi_zz: None, guard, min_sin2 })
    }

    /// Attach analytic first and second z-derivative fields.
    pub fn with_z_jets(mut self, phi_z: Field3<T>, phi_zz: Field3<T>) -> Result<Self> {
        for (name, f) in [("phi_z", &phi_z), ("phi_zz", &phi_zz)] {
            if f.grid != self.phi.grid {
                return Err(CfhError::shape(format!("{name} grid does not match phi")));
            }
            ensure_finite3(name, f)?;
        }
        self.phi_z = Some(phi_z);
        self.phi_zz = Some(phi_zz);
        Ok(self)
    }

    pub fn phi(&self) -> &Field3<T> {
        &self.phi
    }

    pub fn guard(&self) -> f64 {
        self.guard
    }

    /// Smallest |sin 2phi| over the box, recorded at construction.
    pub fn min_sin_2phi(&self) -> f64 {
        self.min_sin2
    }

    fn d_z(&self) -> Field3<T> {
        match &self.phi_z {
            Some(f) => f.clone(),
            None => partial3(&self.phi, Axis3::Z, 1),
        }
    }

    fn d_zz(&self) -> Field3<T> {
        match &self.phi_zz {
            Some(f) => f.clone(),
            None => partial3(&self.phi, Axis3::Z, 2),
        }
    }
}

/// Companion potential coupled to a [`GuichardAngle`]. Finiteness is the only
/// construction invariant; the coupling residuals are reported, not enforced.
#[derive(Clone, Debug)]
pub struct PsiField<T> {
    psi: Field3<T>,
    psi_z: Option<Field3<T>>,
}

impl<T: Real> PsiField<T> {
    pub fn new(psi: Field3<T>) -> Result<Self> {
        ensure_finite3("psi", &psi)?;
        Ok(PsiField { psi, psi_z: None })
    }

    /// Attach an analytic first z-derivative field.
    pub fn with_z_jet(mut self, psi_z: Field3<T>) -> Result<Self> {
        if psi_z.grid != self.psi.grid {
            return Err(CfhError::shape("psi_z grid does not match psi"));
        }
        ensure_finite3("psi_z", &psi_z)?;
        self.psi_z = Some(psi_z);
        Ok(self)
    }

    pub fn psi(&self) -> &Field3<T> {
        &self.psi
    }
}

/// Residual fields of the four third-order flatness equations. All four are
/// zero exactly when the metric built from the angle is conformally flat, up
/// to sampling accuracy.
#[derive(Clone, Debug)]
pub struct FlatnessResiduals<T> {
    /// Mixed equation in all three directions.
    pub eq_xyz: Field3<T>,
    /// Equation whose derivative slot is d/dx.
    pub eq_x: Field3<T>,
    /// Equation whose derivative slot is d/dy.
    pub eq_y: Field3<T>,
    /// Equation whose derivative slot is d/dz.
    pub eq_z: Field3<T>,
}

impl<T: Real> FlatnessResiduals<T> {
    pub fn entries(&self) -> [ResidualEntry; 4] {
        [
            summarize3("flatness_xyz", &self.eq_xyz),
            summarize3("flatness_x", &self.eq_x),
            summarize3("flatness_y", &self.eq_y),
            summarize3("flatness_z", &self.eq_z),
        ]
    }

    /// Largest interior residual over all four equations.
    pub fn interior_linf(&self, band: usize) -> f64 {
        [&self.eq_xyz, &self.eq_x, &self.eq_y, &self.eq_z]
            .into_iter()
            .map(|f| linf_interior3(f, band).f64())
            .fold(0.0, f64::max)
    }
}

/// Evaluate the four conformal-flatness residuals of an angle field.
///
/// Degeneracy of sin 2phi is enforced when the angle is constructed; with a
/// lowered guard the residuals scale like 1/sin 2phi near a degeneracy and
/// stay finite.
pub fn flatness_residuals<T: Real>(angle: &GuichardAngle<T>) -> FlatnessResiduals<T> {
    let phi = &angle.phi;
    let px = partial3(phi, Axis3::X, 1);
    let py = partial3(phi, Axis3::Y, 1);
    let pz = angle.d_z();
    let pxx = partial3(phi, Axis3::X, 2);
    let pyy = partial3(phi, Axis3::Y, 2);
    let pzz = angle.d_zz();
    let pxz = partial3(&pz, Axis3::X, 1);
    let pyz = partial3(&pz, Axis3::Y, 1);
    let pxyz = partial3(&pxz, Axis3::Y, 1);
    let pxxx = partial3(&pxx, Axis3::X, 1);
    let pyyx = partial3(&pyy, Axis3::X, 1);
    let pzzx = partial3(&pzz, Axis3::X, 1);
    let pxxy = partial3(&pxx, Axis3::Y, 1);
    let pyyy = partial3(&pyy, Axis3::Y, 1);
    let pzzy = partial3(&pzz, Axis3::Y, 1);
    let pxxz = partial3(&pz, Axis3::X, 2);
    let pyyz = partial3(&pz, Axis3::Y, 2);
    let pzzz = partial3(&pzz, Axis3::Z, 1);

    let g = phi.grid;
    let half = T::of(0.5);
    let rows: Vec<[T; 4]> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let v = phi.data()[i];
            let (sn, cs) = (v.sin(), v.cos());
            let (s2, c2) = ((v + v).sin(), (v + v).cos());
            let cot = cs / sn;
            let tan = sn / cs;
            let lap = pxx.data()[i] - pyy.data()[i];
            // shared bracket coefficients of the x/y and z equations
            let b = (lap * c2 - pzz.data()[i]) / s2;
            let c = (lap - pzz.data()[i] * c2) / s2;
            let exyz = pxyz.data()[i] + px.data()[i] * pyz.data()[i] * tan
                - py.data()[i] * pxz.data()[i] * cot;
            let ex = (pxxx.data()[i] - pyyx.data()[i] + pzzx.data()[i]) * half
                - b * px.data()[i]
                - pxz.data()[i] * pz.data()[i] * cot;
            let ey = (pxxy.data()[i] - pyyy.data()[i] - pzzy.data()[i]) * half
                - b * py.data()[i]
                - pyz.data()[i] * pz.data()[i] * tan;
            let ez = (pxxz.data()[i] + pyyz.data()[i] + pzzz.data()[i]) * half
                + c * pz.data()[i]
                - px.data()[i] * pxz.data()[i] * cot
                + py.data()[i] * pyz.data()[i] * tan;
            [exyz, ex, ey, ez]
        })
        .collect();
    let pick = |k: usize| {
        Field3::from_data(g, rows.iter().map(|r| r[k]).collect()).expect("sized to grid")
    };
    FlatnessResiduals { eq_xyz: pick(0), eq_x: pick(1), eq_y: pick(2), eq_z: pick(3) }
}

/// Residual fields of the four coupling equations and the two normalization
/// constraints tying the potential to the angle.
#[derive(Clone, Debug)]
pub struct PsiResiduals<T> {
    /// psi_xz + phi_xz cot phi.
    pub eq_xz: Field3<T>,
    /// psi_yz - phi_yz tan phi.
    pub eq_yz: Field3<T>,
    /// psi_zz - (phi_xx - phi_yy) sin 2phi + (psi_xx - psi_yy) cos 2phi.
    pub eq_zz: Field3<T>,
    /// phi_zz - (phi_xx - phi_yy) cos 2phi - (psi_xx - psi_yy) sin 2phi.
    pub eq_phi_zz: Field3<T>,
    /// psi_xy - phi_x phi_y.
    pub norm_xy: Field3<T>,
    /// (phi_xx - phi_yy) sin 2phi - (psi_xx - psi_yy) cos 2phi
    /// + (psi_xx + psi_yy) - phi_x^2 - phi_y^2 - phi_z^2.
    pub norm_trace: Field3<T>,
}

impl<T: Real> PsiResiduals<T> {
    pub fn entries(&self) -> [ResidualEntry; 6] {
        [
            summarize3("psi_xz", &self.eq_xz),
            summarize3("psi_yz", &self.eq_yz),
            summarize3("psi_zz", &self.eq_zz),
            summarize3("phi_zz", &self.eq_phi_zz),
            summarize3("norm_xy", &self.norm_xy),
            summarize3("norm_trace", &self.norm_trace),
        ]
    }
}

/// Evaluate the coupling and normalization residuals of an angle/potential
/// pair on a shared grid.
pub fn psi_residuals<T: Real>(
    angle: &GuichardAngle<T>,
    psi: &PsiField<T>,
) -> Result<PsiResiduals<T>> {
    let phi = &angle.phi;
    if psi.psi.grid != phi.grid {
        return Err(CfhError::shape("psi grid does not match phi"));
    }
    let px = partial3(phi, Axis3::X, 1);
    let py = partial3(phi, Axis3::Y, 1);
    let pz = angle.d_z();
    let pxx = partial3(phi, Axis3::X, 2);
    let pyy = partial3(phi, Axis3::Y, 2);
    let pzz = angle.d_zz();
    let pxz = partial3(&pz, Axis3::X, 1);
    let pyz = partial3(&pz, Axis3::Y, 1);

    let s = &psi.psi;
    let sx = partial3(s, Axis3::X, 1);
    let sxy = partial3(&sx, Axis3::Y, 1);
    let sxx = partial3(s, Axis3::X, 2);
    let syy = partial3(s, Axis3::Y, 2);
    let sz = match &psi.psi_z {
        Some(f) => f.clone(),
        None => partial3(s, Axis3::Z, 1),
    };
    let sxz = partial3(&sz, Axis3::X, 1);
    let syz = partial3(&sz, Axis3::Y, 1);
    let szz = match &psi.psi_z {
        Some(f) => partial3(f, Axis3::Z, 1),
        None => partial3(s, Axis3::Z, 2),
    };

    let g = phi.grid;
    let rows: Vec<[T; 6]> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let v = phi.data()[i];
            let (sn, cs) = (v.sin(), v.cos());
            let (s2, c2) = ((v + v).sin(), (v + v).cos());
            let lphi = pxx.data()[i] - pyy.data()[i];
            let lpsi = sxx.data()[i] - syy.data()[i];
            let e1 = sxz.data()[i] + pxz.data()[i] * cs / sn;
            let e2 = syz.data()[i] - pyz.data()[i] * sn / cs;
            let e3 = szz.data()[i] - lphi * s2 + lpsi * c2;
            let e4 = pzz.data()[i] - lphi * c2 - lpsi * s2;
            let n1 = sxy.data()[i] - px.data()[i] * py.data()[i];
            let n2 = lphi * s2 - lpsi * c2 + (sxx.data()[i] + syy.data()[i])
                - px.data()[i] * px.data()[i]
                - py.data()[i] * py.data()[i]
                - pz.data()[i] * pz.data()[i];
            [e1, e2, e3, e4, n1, n2]
        })
        .collect();
    let pick = |k: usize| {
        Field3::from_data(g, rows.iter().map(|r| r[k]).collect()).expect("sized to grid")
    };
    Ok(PsiResiduals {
        eq_xz: pick(0),
        eq_yz: pick(1),
        eq_zz: pick(2),
        eq_phi_zz: pick(3),
        norm_xy: pick(4),
        norm_trace: pick(5),
    })
}

/// Orthogonal 2-metric coefficients on one z-slice. Both are strictly
/// positive; construction through [`hat_metric`] enforces it.
#[derive(Clone, Debug)]
pub struct Hat2Metric<T> {
    pub a: Field2<T>,
    pub b: Field2<T>,
}

/// Per-slice inputs for [`hat_metric`]. Producers with closed forms should
/// fill these exactly; stencil-derived fields work at stencil accuracy.
#[derive(Clone, Debug)]
pub struct HatSliceData<T> {
    pub sin_phi: Field2<T>,
    pub cos_phi: Field2<T>,
    pub phi_z: Field2<T>,
    pub phi_zx: Field2<T>,
    pub phi_zy: Field2<T>,
}

/// Extract the slice 2-metric `A = -phi_zx / (phi_z sin phi)`,
/// `B = phi_zy / (phi_z cos phi)`.
///
/// `guard` bounds |phi_z| from below directly and |sin phi|, |cos phi| by
/// half of it, which is what a guarded angle guarantees. A non-positive
/// coefficient is rejected: the output must be a Riemannian 2-metric.
pub fn hat_metric<T: Real>(data: &HatSliceData<T>, guard: f64) -> Result<Hat2Metric<T>> {
    check_guard(guard)?;
    let g = data.sin_phi.grid;
    for (name, f) in [
        ("cos_phi", &data.cos_phi),
        ("phi_z", &data.phi_z),
        ("phi_zx", &data.phi_zx),
        ("phi_zy", &data.phi_zy),
    ] {
        if f.grid != g {
            return Err(CfhError::shape(format!("{name} grid does not match sin_phi")));
        }
    }
    let half_guard = 0.5 * guard;
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let dzv = data.phi_z.at(ix, iy).f64().abs();
            let snv = data.sin_phi.at(ix, iy).f64().abs();
            let csv = data.cos_phi.at(ix, iy).f64().abs();
            if !(dzv >= guard && snv >= half_guard && csv >= half_guard) {
                return Err(CfhError::numerical(format!(
                    "zero divisor at node ({ix}, {iy}): |phi_z| = {dzv:.3e}, \
                     |sin phi| = {snv:.3e}, |cos phi| = {csv:.3e} (guard {guard})"
                )));
            }
        }
    }
    let a = data.phi_zx.zip(&data.phi_z.mul(&data.sin_phi), |num, den| -(num / den));
    let b = data.phi_zy.zip(&data.phi_z.mul(&data.cos_phi), |num, den| num / den);
    for (name, f) in [("A", &a), ("B", &b)] {
        let mut min = f64::INFINITY;
        let mut at = (0usize, 0usize);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let v = f.at(ix, iy).f64();
                if v < min {
                    min = v;
                    at = (ix, iy);
                }
            }
        }
        if !(min > 0.0) {
            return Err(CfhError::numerical(format!(
                "slice coefficient {name} reaches {min:.3e} at node ({}, {}); \
                 not a Riemannian 2-metric",
                at.0, at.1
            )));
        }
    }
    Ok(Hat2Metric { a, b })
}

/// Extract the slice 2-metric from sampled angle data. Uses the analytic
/// z-jet when the angle carries one, a z-stencil otherwise; the in-slice
/// derivatives of phi_z always come from stencils.
pub fn hat_metric_at_slice<T: Real>(
    angle: &GuichardAngle<T>,
    iz: usize,
    guard: f64,
) -> Result<Hat2Metric<T>> {
    let g = angle.phi.grid;
    if iz >= g.nz {
        return Err(CfhError::shape(format!(
            "slice {iz} out of range for {} z-levels",
            g.nz
        )));
    }
    let pz = angle.d_z().slice(iz);
    let phi = angle.phi.slice(iz);
    let data = HatSliceData {
        sin_phi: phi.map(|v| v.sin()),
        cos_phi: phi.map(|v| v.cos()),
        phi_zx: dx(&pz),
        phi_zy: dy(&pz),
        phi_z: pz,
    };
    hat_metric(&data, guard)
}

/// Gauss curvature of the orthogonal metric `A^2 dx^2 + B^2 dy^2`:
/// `K = -(1/AB) [ (B_x/A)_x + (A_y/B)_y ]`.
pub fn gauss_curvature<T: Real>(a: &Field2<T>, b: &Field2<T>) -> Result<Field2<T>> {
    if a.grid != b.grid {
        return Err(CfhError::shape("metric coefficient grids differ"));
    }
    for (name, f) in [("A", a), ("B", b)] {
        for iy in 0..f.grid.ny {
            for ix in 0..f.grid.nx {
                let v = f.at(ix, iy).f64();
                if !(v > 0.0) {
                    return Err(CfhError::numerical(format!(
                        "metric coefficient {name} is not positive at node \
                         ({ix}, {iy}): {v:.3e}"
                    )));
                }
            }
        }
    }
    let t1 = dx(&dx(b).div(a));
    let t2 = dy(&dy(a).div(b));
    let ab = a.mul(b);
    Ok(t1.add(&t2).zip(&ab, |s, p| -(s / p)))
}

/// One permutation row of a [`GuichardReport`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GuichardPermutation {
    /// Which sum identity this row tests, e.g. "l1^2 + l2^2 = l3^2".
    pub label: String,
    /// Pointwise residual of li^2 + lj^2 - lk^2.
    pub sum: ResidualEntry,
    /// Relative spread of the would-be hypotenuse lk^2 around its mean. Zero
    /// means the triple is in canonical form (constant hypotenuse).
    pub hypotenuse_spread: f64,
}

/// Permutation classification of a diagonal 3-metric.
///
/// The sum condition is conformally invariant: scaling all three coefficients
/// by a common factor keeps the residual at zero. `canonical` additionally
/// requires the hypotenuse coefficient to be constant, which a nonconstant
/// conformal factor destroys.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GuichardReport {
    pub perms: Vec<GuichardPermutation>,
    /// Index into `perms` of the permutation whose sum residual passes `tol`
    /// (the smallest, when several pass).
    pub holds: Option<usize>,
    /// The passing permutation whose hypotenuse is also constant within
    /// `tol`, if any.
    pub canonical: Option<usize>,
    pub tol: f64,
}

/// Test the three permutations of the sum condition on squared coefficient
/// fields sharing one grid.
pub fn guichard_check<T: Real>(
    l1sq: &Field3<T>,
    l2sq: &Field3<T>,
    l3sq: &Field3<T>,
    tol: f64,
) -> Result<GuichardReport> {
    if l1sq.grid != l2sq.grid || l2sq.grid != l3sq.grid {
        return Err(CfhError::shape("coefficient grids differ"));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(CfhError::config(format!(
            "tolerance must be positive and finite, got {tol}"
        )));
    }
    let fields = [l1sq, l2sq, l3sq];
    let mut perms = Vec::with_capacity(3);
    for (i, j, k) in [(0usize, 1usize, 2usize), (1, 2, 0), (2, 0, 1)] {
        let diff = fields[i].zip(fields[j], |a, b| a + b).sub(fields[k]);
        let label = format!("l{}^2 + l{}^2 = l{}^2", i + 1, j + 1, k + 1);
        let sum = summarize3(&label, &diff);
        let hyp = fields[k];
        let n = T::of_int(hyp.grid.len() as i64);
        let mean = compensated_sum(hyp.data().iter().copied()) / n;
        let spread = hyp
            .data()
            .iter()
            .fold(T::zero(), |m, &v| m.max((v - mean).abs()));
        let hypotenuse_spread = spread.f64() / (1.0 + mean.f64().abs());
        perms.push(GuichardPermutation { label, sum, hypotenuse_spread });
    }
    let mut holds: Option<usize> = None;
    for (idx, p) in perms.iter().enumerate() {
        if p.sum.linf <= tol && holds.map_or(true, |h| p.sum.linf < perms[h].sum.linf) {
            holds = Some(idx);
        }
    }
    let canonical = holds.filter(|&h| perms[h].hypotenuse_spread <= tol);
    Ok(GuichardReport { perms, holds, canonical, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{linf, linf_interior, linf3, Grid2};
    use crate::scalar::Dd;
    use crate::seeds::{ex2_closed_forms, ex2_point};
    use approx::assert_relative_eq;

    fn grid3(
        nx: usize,
        ny: usize,
        nz: usize,
        xr: (f64, f64),
        yr: (f64, f64),
        zr: (f64, f64),
    ) -> Grid3 {
        Grid3::new(Grid2::new(nx, ny, xr, yr).unwrap(), nz, zr).unwrap()
    }

    fn field3(g: Grid3, f: impl Fn(f64, f64, f64) -> f64) -> Field3<f64> {
        let mut data = Vec::with_capacity(g.len());
        for iz in 0..g.nz {
            let z = g.z::<f64>(iz);
            for iy in 0..g.ny {
                let y = g.y::<f64>(iy);
                for ix in 0..g.nx {
                    data.push(f(g.x::<f64>(ix), y, z));
                }
            }
        }
        Field3::from_data(g, data).unwrap()
    }

    /// Quadratic-in-z extension of the family-2 closed forms on the canonical
    /// window; the attached z-jets are exact for this extension.
    fn ex2_extension(n: usize, nz: usize) -> (GuichardAngle<f64>, PsiField<f64>, Grid3) {
        let base = Grid2::new(n, n, (0.6, 1.4), (1.6, 2.4)).unwrap();
        let s = ex2_closed_forms::<f64>(&base).unwrap();
        let g = Grid3::new(base, nz, (-0.05, 0.05)).unwrap();
        let taylor = |f0: &Field2<f64>, f1: &Field2<f64>, f2: &Field2<f64>| {
            let slices: Vec<_> = (0..nz)
                .map(|iz| {
                    let z = g.z::<f64>(iz);
                    Field2::from_fn_indexed(base, |i, j| {
                        f0.at(i, j) + z * f1.at(i, j) + 0.5 * z * z * f2.at(i, j)
                    })
                })
                .collect();
            Field3::from_slices(g, &slices).unwrap()
        };
        let zero = Field2::zeros(base);
        let phi = taylor(&s.phi, &s.phi_z, &s.phi_zz);
        let phi_z = taylor(&s.phi_z, &s.phi_zz, &zero);
        let phi_zz = taylor(&s.phi_zz, &zero, &zero);
        let psi3 = taylor(&s.psi, &s.psi_z, &s.psi_zz);
        let psi_z = taylor(&s.psi_z, &s.psi_zz, &zero);
        let angle = GuichardAngle::new(phi).unwrap().with_z_jets(phi_z, phi_zz).unwrap();
        let psi = PsiField::new(psi3).unwrap().with_z_jet(psi_z).unwrap();
        (angle, psi, g)
    }

    #[test]
    fn constant_angle_is_flat() {
        let g = grid3(9, 8, 7, (0.0, 1.0), (0.0, 1.0), (0.0, 1.0));
        let angle = GuichardAngle::new(field3(g, |_, _, _| 0.55)).unwrap();
        let r = flatness_residuals(&angle);
        for f in [&r.eq_xyz, &r.eq_x, &r.eq_y, &r.eq_z] {
            assert!(linf3(f) < 1e-9);
        }
        let psi = PsiField::new(field3(g, |_, _, _| 0.3)).unwrap();
        let pr = psi_residuals(&angle, &psi).unwrap();
        for f in [&pr.eq_xz, &pr.eq_yz, &pr.eq_zz, &pr.eq_phi_zz, &pr.norm_xy, &pr.norm_trace] {
            assert!(linf3(f) < 1e-9);
        }
    }

    #[test]
    fn constant_angle_is_flat_dd() {
        let g = grid3(7, 6, 6, (0.0, 1.0), (0.0, 1.0), (0.0, 1.0));
        let phi = Field3::from_data(g, vec![Dd::of(0.55); g.len()]).unwrap();
        let angle = GuichardAngle::new(phi).unwrap();
        let r = flatness_residuals(&angle);
        for f in [&r.eq_xyz, &r.eq_x, &r.eq_y, &r.eq_z] {
            assert!(linf3(f).f64() < 1e-24);
        }
    }

    #[test]
    fn quadratic_angle_matches_closed_residual() {
        let g = grid3(9, 7, 7, (0.3, 0.7), (0.0, 1.0), (0.0, 1.0));
        let angle = GuichardAngle::new(field3(g, |x, _, _| x * x)).unwrap();
        let r = flatness_residuals(&angle);
        // stencils are exact on this polynomial, so the only surviving
        // residual is the x equation, pointwise -4 x cot(2 x^2)
        let expected = field3(g, |x, _, _| -4.0 * x / (2.0 * x * x).tan());
        assert!(linf3(&r.eq_x.sub(&expected)) < 1e-10);
        let x = g.x::<f64>(4);
        assert_relative_eq!(
            r.eq_x.at(4, 3, 3),
            -4.0 * x / (2.0 * x * x).tan(),
            max_relative = 1e-11
        );
        assert!(linf3(&r.eq_xyz) < 1e-10);
        assert!(linf3(&r.eq_y) < 1e-10);
        assert!(linf3(&r.eq_z) < 1e-10);
    }

    #[test]
    fn degeneracy_guard_rejects_small_sin() {
        let g = grid3(6, 6, 6, (0.0, 1.0), (0.0, 1.0), (0.0, 1.0));
        let phi = field3(g, |_, _, _| 0.01);
        let err = GuichardAngle::new(phi.clone()).unwrap_err();
        assert!(err.to_string().contains("degeneracy guard"));
        let angle = GuichardAngle::with_guard(phi, 0.001).unwrap();
        assert_relative_eq!(angle.min_sin_2phi(), (0.02f64).sin(), max_relative = 1e-12);
        assert!(GuichardAngle::with_guard(field3(g, |_, _, _| 0.5), 0.0).is_err());

        let mut bad = field3(g, |_, _, _| 0.5);
        *bad.at_mut(1, 2, 3) = f64::NAN;
        assert!(GuichardAngle::new(bad).is_err());
        let mut bad_psi = field3(g, |_, _, _| 0.0);
        *bad_psi.at_mut(0, 0, 0) = f64::INFINITY;
        assert!(PsiField::new(bad_psi).is_err());
    }

    #[test]
    fn ex2_extension_psi_residuals_vanish_at_z0() {
        let (angle, psi, g) = ex2_extension(41, 7);
        let r = psi_residuals(&angle, &psi).unwrap();
        let mid = g.nz / 2;
        assert!(g.z::<f64>(mid).abs() < 1e-15);
        for f in [&r.eq_xz, &r.eq_yz, &r.eq_zz, &r.eq_phi_zz, &r.norm_xy, &r.norm_trace] {
            let sl = f.slice(mid);
            let inner = linf_interior(&sl, 2);
            assert!(inner < 1e-5, "interior residual {inner:.3e}");
            let full = linf(&sl);
            assert!(full < 5e-4, "full residual {full:.3e}");
        }
    }

    #[test]
    fn psi_zero_reveals_required_coupling() {
        let (angle, _, g) = ex2_extension(41, 7);
        let zero = PsiField::new(Field3::zeros(g)).unwrap();
        let r = psi_residuals(&angle, &zero).unwrap();
        // node (20, 20) sits at (x, y) = (1, 2) where the closed forms give
        // phi_zx cot(phi) = (-4/25)(-3/4) = 0.12
        assert_relative_eq!(r.eq_xz.at(20, 20, 3), 0.12, epsilon = 1e-4);
        // and the xy constraint degrades to -phi_x phi_y = 4xy/r^4 = 8/25
        assert_relative_eq!(r.norm_xy.at(20, 20, 3), 0.32, epsilon = 1e-4);
    }

    #[test]
    fn hat_metric_recovers_hyperbolic_slice() {
        let base = Grid2::new(81, 81, (0.6, 1.4), (1.6, 2.4)).unwrap();
        let d: HatSliceData<f64> = HatSliceData {
            sin_phi: Field2::from_fn(base, |x, y| ex2_point(x, y).sin_phi),
            cos_phi: Field2::from_fn(base, |x, y| ex2_point(x, y).cos_phi),
            phi_z: Field2::from_fn(base, |x, y| ex2_point(x, y).phi_z),
            phi_zx: Field2::from_fn(base, |x, y| ex2_point(x, y).phi_zx),
            phi_zy: Field2::from_fn(base, |x, y| ex2_point(x, y).phi_zy),
        };
        let m = hat_metric(&d, DEFAULT_DEGENERACY_GUARD).unwrap();
        for iy in 0..base.ny {
            let inv_y = 1.0 / base.y::<f64>(iy);
            for ix in 0..base.nx {
                assert!((m.a.at(ix, iy) - inv_y).abs() < 1e-10);
                assert!((m.b.at(ix, iy) - inv_y).abs() < 1e-10);
            }
        }
        let k = gauss_curvature(&m.a, &m.b).unwrap();
        assert!(linf(&k.map(|v| v + 1.0)) < 1e-4);

        // phi_zx identically zero collapses A: not a metric
        let degenerate = HatSliceData { phi_zx: Field2::zeros(base), ..d.clone() };
        let err = hat_metric(&degenerate, DEFAULT_DEGENERACY_GUARD).unwrap_err();
        assert!(err.to_string().contains("not a Riemannian 2-metric"));

        // a vanishing phi_z is a zero divisor
        let mut pz = d.phi_z.clone();
        *pz.at_mut(5, 5) = 0.0;
        let bad = HatSliceData { phi_z: pz, ..d };
        let err = hat_metric(&bad, DEFAULT_DEGENERACY_GUARD).unwrap_err();
        assert!(err.to_string().contains("zero divisor"));
    }

    #[test]
    fn hat_metric_slice_routes_agree() {
        let (angle, _, g) = ex2_extension(81, 7);
        let m1 = hat_metric_at_slice(&angle, 3, DEFAULT_DEGENERACY_GUARD).unwrap();
        let base = g.base();
        let d: HatSliceData<f64> = HatSliceData {
            sin_phi: Field2::from_fn(base, |x, y| ex2_point(x, y).sin_phi),
            cos_phi: Field2::from_fn(base, |x, y| ex2_point(x, y).cos_phi),
            phi_z: Field2::from_fn(base, |x, y| ex2_point(x, y).phi_z),
            phi_zx: Field2::from_fn(base, |x, y| ex2_point(x, y).phi_zx),
            phi_zy: Field2::from_fn(base, |x, y| ex2_point(x, y).phi_zy),
        };
        let m2 = hat_metric(&d, DEFAULT_DEGENERACY_GUARD).unwrap();
        let da = m1.a.sub(&m2.a);
        let db = m1.b.sub(&m2.b);
        assert!(linf(&da) < 1e-5);
        assert!(linf(&db) < 1e-5);
        assert!(linf_interior(&da, 2) < 1e-6);
        let k = gauss_curvature(&m1.a, &m1.b).unwrap();
        assert!(linf(&k.map(|v| v + 1.0)) < 1e-4);
        assert!(hat_metric_at_slice(&angle, 99, DEFAULT_DEGENERACY_GUARD).is_err());
    }

    #[test]
    fn gauss_curvature_classical_metrics() {
        let flat = Grid2::new(17, 17, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let one: Field2<f64> = Field2::from_fn(flat, |_, _| 1.0);
        assert!(linf(&gauss_curvature(&one, &one).unwrap()) < 1e-12);

        // boundary rows lose one stencil order under composition, so the
        // full-grid bound needs the reference resolution
        let hyp = Grid2::new(81, 81, (0.0, 1.0), (1.6, 2.4)).unwrap();
        let inv_y: Field2<f64> = Field2::from_fn(hyp, |_, y| 1.0 / y);
        let k = gauss_curvature(&inv_y, &inv_y).unwrap();
        assert!(linf(&k.map(|v| v + 1.0)) < 1e-4);
        assert!(linf_interior(&k.map(|v| v + 1.0), 4) < 1e-6);

        let sph = Grid2::new(41, 41, (0.3, 0.7), (0.0, 1.0)).unwrap();
        let a: Field2<f64> = Field2::from_fn(sph, |_, _| 1.0);
        let b: Field2<f64> = Field2::from_fn(sph, |x: f64, _| x.sin());
        let k = gauss_curvature(&a, &b).unwrap();
        assert!(linf(&k.map(|v| v - 1.0)) < 1e-5);

        let mut zero_at = b.clone();
        *zero_at.at_mut(0, 0) = 0.0;
        let err = gauss_curvature(&a, &zero_at).unwrap_err();
        assert!(err.to_string().contains("not positive"));
    }

    #[test]
    fn guichard_check_identifies_permutation() {
        let g = grid3(7, 7, 6, (0.0, 1.0), (0.0, 1.0), (0.0, 1.0));
        let phi = field3(g, |x, y, z| 0.3 + 0.1 * x + 0.2 * y - 0.15 * z);
        let l1 = phi.map(|v| v.cos() * v.cos());
        let l2 = phi.map(|v| v.sin() * v.sin());
        let l3 = field3(g, |_, _, _| 1.0);
        let r = guichard_check(&l1, &l2, &l3, 1e-12).unwrap();
        assert_eq!(r.holds, Some(0));
        assert_eq!(r.canonical, Some(0));
        assert!(r.perms[0].sum.linf < 1e-15);
        assert!(r.perms[0].hypotenuse_spread < 1e-15);
        assert!(r.perms[1].sum.linf > 0.5);

        let ones = field3(g, |_, _, _| 1.0);
        let r = guichard_check(&ones, &ones, &ones, 1e-12).unwrap();
        assert_eq!(r.holds, None);
        assert_eq!(r.canonical, None);

        // conformal scaling keeps the sum exact but destroys canonical form
        let w = field3(g, |x, y, _| (2.0 * (0.4 * x + 0.3 * y)).exp());
        let s1 = l1.zip(&w, |a, b| a * b);
        let s2 = l2.zip(&w, |a, b| a * b);
        let r = guichard_check(&s1, &s2, &w, 1e-12).unwrap();
        assert_eq!(r.holds, Some(0));
        assert_eq!(r.canonical, None);
        assert!(r.perms[0].hypotenuse_spread > 0.1);
    }

    #[test]
    fn flatness_residual_convergence_order() {
        let residual_at = |n: usize| {
            let g = grid3(n, n, n, (0.0, 1.0), (0.0, 1.0), (0.0, 1.0));
            let phi = field3(g, |x, y, z| {
                0.9 + 0.25 * (1.3 * x + 0.4).sin() * (0.8 * y - 0.2).cos()
                    + 0.2 * (0.7 * z + 0.3).sin() * (x - y + 0.1).sin()
            });
            flatness_residuals(&GuichardAngle::new(phi).unwrap())
        };
        let r1 = residual_at(13);
        let r2 = residual_at(25);
        let r3 = residual_at(49);
        for k in 0..4 {
            let f1: &Field3<f64> = [&r1.eq_xyz, &r1.eq_x, &r1.eq_y, &r1.eq_z][k];
            let f2: &Field3<f64> = [&r2.eq_xyz, &r2.eq_x, &r2.eq_y, &r2.eq_z][k];
            let f3: &Field3<f64> = [&r3.eq_xyz, &r3.eq_x, &r3.eq_y, &r3.eq_z][k];
            let g1 = f1.grid;
            let mut d12 = 0.0f64;
            let mut d23 = 0.0f64;
            for iz in 2..g1.nz - 2 {
                for iy in 2..g1.ny - 2 {
                    for ix in 2..g1.nx - 2 {
                        let a = f1.at(ix, iy, iz);
                        let b = f2.at(2 * ix, 2 * iy, 2 * iz);
                        let c = f3.at(4 * ix, 4 * iy, 4 * iz);
                        d12 = d12.max((a - b).abs());
                        d23 = d23.max((b - c).abs());
                    }
                }
            }
            assert!(linf3(f3) > 1e-3, "residual {k} should be genuinely nonzero");
            let order = field::convergence_order(d12, d23);
            assert!(order >= 3.0, "eq {k}: observed order {order:.2}, diffs {d12:.3e} {d23:.3e}");
        }
    }

    #[test]
    fn residual_entries_serialize() {
        let g = grid3(6, 7, 6, (0.0, 1.0), (0.0, 1.0), (0.0, 1.0));
        let mut f = Field3::<f64>::zeros(g);
        *f.at_mut(2, 1, 3) = -9.0;
        let e = summarize3("spike", &f);
        assert_eq!(e.max_node, [2, 1, 3]);
        assert_eq!(e.linf, 9.0);
        assert!(e.l2 > 0.0);

        let angle = GuichardAngle::new(field3(g, |_, _, _| 0.5)).unwrap();
        let names: Vec<_> =
            flatness_residuals(&angle).entries().iter().map(|e| e.name.clone()).collect();
        assert_eq!(names, ["flatness_xyz", "flatness_x", "flatness_y", "flatness_z"]);

        let l1 = field3(g, |_, _, _| 0.6f64.powi(2));
        let l2v = field3(g, |_, _, _| 0.8f64.powi(2));
        let l3 = field3(g, |_, _, _| 1.0);
        let report = guichard_check(&l1, &l2v, &l3, 1e-12).unwrap();
        assert_eq!(report.holds, Some(0));
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("l1^2 + l2^2 = l3^2"));
        let back: ResidualEntry =
            serde_json::from_str(&serde_json::to_string(&report.perms[0].sum).unwrap()).unwrap();
        assert_eq!(back, report.perms[0].sum);
    }
}

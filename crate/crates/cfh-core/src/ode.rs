//! Adaptive explicit Runge-Kutta integration, generic over the scalar type.
//!
//! The seed ODE systems are tiny (2 to 4 unknowns) but have to run both in f64
//! and in extended precision, and the grid samplers must evaluate solutions at
//! prescribed abscissae. The integrator is Dormand-Prince 5(4) with the
//! classic fifth-order method's dense-output interpolant; grid sampling clamps
//! steps so that requested abscissae are hit exactly (no interpolation error
//! enters the extended-precision path).

use crate::error::{CfhError, Result};
use crate::scalar::Real;

/// Right-hand side of an autonomous-or-not first order system.
pub trait OdeRhs<T: Real, const N: usize> {
    fn rhs(&self, x: T, y: &[T; N]) -> [T; N];
}

impl<T: Real, const N: usize, F: Fn(T, &[T; N]) -> [T; N]> OdeRhs<T, N> for F {
    fn rhs(&self, x: T, y: &[T; N]) -> [T; N] {
        self(x, y)
    }
}

/// Integration controls. Tolerances are interpreted per component with the
/// usual mixed absolute/relative scaling.
#[derive(Clone, Copy, Debug)]
pub struct OdeOpts {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for OdeOpts {
    fn default() -> Self {
        OdeOpts { rtol: 1e-10, atol: 1e-12, max_steps: 1_000_000 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
}

/// One accepted step's dense-output data.
#[derive(Clone, Debug)]
struct Segment<T, const N: usize> {
    x0: T,
    h: T,
    cont: [[T; N]; 5],
}

impl<T: Real, const N: usize> Segment<T, N> {
    /// Fifth-order continuous extension on theta in [0,1].
    fn eval(&self, theta: T) -> [T; N] {
        let s = theta;
        let s1 = T::one() - theta;
        let mut out = [T::zero(); N];
        for i in 0..N {
            out[i] = self.cont[0][i]
                + s * (self.cont[1][i]
                    + s1 * (self.cont[2][i] + s * (self.cont[3][i] + s1 * self.cont[4][i])));
        }
        out
    }
}

/// Dense solution over one integration run, evaluable anywhere inside the
/// covered interval.
#[derive(Clone, Debug)]
pub struct DenseSolution<T, const N: usize> {
    segments: Vec<Segment<T, N>>,
    x_start: T,
    x_end: T,
    pub stats: OdeStats,
}

impl<T: Real, const N: usize> DenseSolution<T, N> {
    pub fn span(&self) -> (T, T) {
        (self.x_start, self.x_end)
    }

    /// Evaluate at `x`, which must lie in the covered interval (a tiny
    /// roundoff overhang at the ends is clamped).
    pub fn eval(&self, x: T) -> Result<[T; N]> {
        let fwd = self.x_end >= self.x_start;
        let (lo, hi) = if fwd { (self.x_start, self.x_end) } else { (self.x_end, self.x_start) };
        let slack = T::of(1e-9) * (hi - lo).abs().max(T::one());
        if x < lo - slack || x > hi + slack {
            return Err(CfhError::Integrator(format!(
                "dense evaluation at {} outside [{}, {}]",
                x.f64(),
                lo.f64(),
                hi.f64()
            )));
        }
        let x = x.max(lo).min(hi);
        // binary search for the segment containing x
        let mut a = 0usize;
        let mut b = self.segments.len();
        while b - a > 1 {
            let mid = (a + b) / 2;
            let sx = self.segments[mid].x0;
            if (fwd && sx <= x) || (!fwd && sx >= x) {
                a = mid;
            } else {
                b = mid;
            }
        }
        let seg = &self.segments[a];
        Ok(seg.eval((x - seg.x0) / seg.h))
    }
}

const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;

struct Tableau<T> {
    a: [[T; 6]; 6],
    c: [T; 6],
    b: [T; 7],
    e: [T; 7],
    d: [T; 7],
}

fn tableau<T: Real>() -> Tableau<T> {
    let r = |n: i64, d: i64| T::of_int(n) / T::of_int(d);
    let z = T::zero();
    Tableau {
        c: [r(1, 5), r(3, 10), r(4, 5), r(8, 9), T::one(), T::one()],
        a: [
            [r(1, 5), z, z, z, z, z],
            [r(3, 40), r(9, 40), z, z, z, z],
            [r(44, 45), r(-56, 15), r(32, 9), z, z, z],
            [r(19372, 6561), r(-25360, 2187), r(64448, 6561), r(-212, 729), z, z],
            [r(9017, 3168), r(-355, 33), r(46732, 5247), r(49, 176), r(-5103, 18656), z],
            [r(35, 384), z, r(500, 1113), r(125, 192), r(-2187, 6784), r(11, 84)],
        ],
        b: [r(35, 384), z, r(500, 1113), r(125, 192), r(-2187, 6784), r(11, 84), z],
        e: [
            r(71, 57600),
            z,
            r(-71, 16695),
            r(71, 1920),
            r(-17253, 339200),
            r(22, 525),
            r(-1, 40),
        ],
        d: [
            r(-12715105075, 11282082432),
            z,
            r(87487479700, 32700410799),
            r(-10690763975, 1880347072),
            r(701980252875, 199316789632),
            r(-1453857185, 822651844),
            r(69997945, 29380423),
        ],
    }
}

struct Stepper<'a, T: Real, const N: usize, F: OdeRhs<T, N>> {
    f: &'a F,
    tb: Tableau<T>,
    rtol: T,
    atol: T,
    stats: OdeStats,
}

impl<'a, T: Real, const N: usize, F: OdeRhs<T, N>> Stepper<'a, T, N, F> {
    fn new(f: &'a F, opts: &OdeOpts) -> Self {
        Stepper {
            f,
            tb: tableau::<T>(),
            rtol: T::of(opts.rtol),
            atol: T::of(opts.atol),
            stats: OdeStats::default(),
        }
    }

    /// One trial step from `(x, y)` with stored `k1 = f(x, y)`.
    /// Returns `(y_new, k7, err_norm, cont)`.
    #[allow(clippy::type_complexity)]
    fn try_step(
        &self,
        x: T,
        y: &[T; N],
        k1: &[T; N],
        h: T,
    ) -> ([T; N], [T; N], T, [[T; N]; 5]) {
        let tb = &self.tb;
        let mut k = [[T::zero(); N]; 7];
        k[0] = *k1;
        for s in 0..6 {
            let mut ys = *y;
            for (j, kj) in k.iter().enumerate().take(s + 1) {
                let a = tb.a[s][j];
                if !a.is_zero() {
                    for i in 0..N {
                        ys[i] = ys[i] + h * a * kj[i];
                    }
                }
            }
            k[s + 1] = self.f.rhs(x + tb.c[s] * h, &ys);
        }
        let mut y1 = *y;
        for (j, kj) in k.iter().enumerate() {
            if !tb.b[j].is_zero() {
                for i in 0..N {
                    y1[i] = y1[i] + h * tb.b[j] * kj[i];
                }
            }
        }
        // weighted RMS error estimate
        let mut err2 = T::zero();
        for i in 0..N {
            let mut e = T::zero();
            for (j, kj) in k.iter().enumerate() {
                if !tb.e[j].is_zero() {
                    e = e + tb.e[j] * kj[i];
                }
            }
            e = e * h;
            let sc = self.atol + self.rtol * y[i].abs().max(y1[i].abs());
            let q = e / sc;
            err2 = err2 + q * q;
        }
        let err = (err2 / T::of_int(N as i64)).sqrt();
        // dense output coefficients
        let mut cont = [[T::zero(); N]; 5];
        for i in 0..N {
            let ydiff = y1[i] - y[i];
            let bspl = h * k[0][i] - ydiff;
            cont[0][i] = y[i];
            cont[1][i] = ydiff;
            cont[2][i] = bspl;
            cont[3][i] = ydiff - h * k[6][i] - bspl;
            let mut d = T::zero();
            for (j, kj) in k.iter().enumerate() {
                if !tb.d[j].is_zero() {
                    d = d + tb.d[j] * kj[i];
                }
            }
            cont[4][i] = d * h;
        }
        (y1, k[6], err, cont)
    }

    /// March from `x0` to `x1`, calling `on_accept` per accepted step.
    fn march(
        &mut self,
        x0: T,
        y0: [T; N],
        x1: T,
        opts: &OdeOpts,
        mut on_accept: impl FnMut(T, T, &[T; N], &[[T; N]; 5]),
    ) -> Result<[T; N]> {
        if x1 == x0 {
            return Ok(y0);
        }
        let dir = if x1 > x0 { T::one() } else { -T::one() };
        let span = (x1 - x0).abs();
        let mut x = x0;
        let mut y = y0;
        let mut k1 = self.f.rhs(x, &y);
        let mut h = span.min(T::of(0.05) * span.max(T::one())) * dir * T::of(0.1);
        if h.is_zero() {
            h = T::of(1e-6) * dir;
        }
        let mut steps = 0usize;
        let one = T::one();
        while (x1 - x) * dir > T::zero() {
            steps += 1;
            if steps > opts.max_steps {
                return Err(CfhError::Integrator(format!(
                    "step budget {} exhausted at x = {}",
                    opts.max_steps,
                    x.f64()
                )));
            }
            // clamp the final step onto the endpoint exactly
            if ((x + h) - x1) * dir > T::zero() {
                h = x1 - x;
            }
            let (y1, k7, err, cont) = self.try_step(x, &y, &k1, h);
            if err <= one || h.abs() <= T::of(1e-14) * span.max(one) {
                self.stats.accepted += 1;
                on_accept(x, h, &y1, &cont);
                x = x + h;
                y = y1;
                k1 = k7;
                let scale = if err.is_zero() {
                    T::of(MAX_SCALE)
                } else {
                    (T::of(SAFETY) * err.powf(T::of(-0.2)))
                        .max(T::of(MIN_SCALE))
                        .min(T::of(MAX_SCALE))
                };
                h = h * scale;
            } else {
                self.stats.rejected += 1;
                let scale = (T::of(SAFETY) * err.powf(T::of(-0.2))).max(T::of(MIN_SCALE)).min(one);
                h = h * scale;
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(CfhError::Integrator(format!(
                    "solution became non-finite at x = {}",
                    x.f64()
                )));
            }
        }
        Ok(y)
    }
}

/// Integrate from `x0` to `x1`, returning the endpoint state.
pub fn integrate<T: Real, const N: usize>(
    f: &impl OdeRhs<T, N>,
    x0: T,
    y0: [T; N],
    x1: T,
    opts: &OdeOpts,
) -> Result<[T; N]> {
    let mut st = Stepper::new(f, opts);
    st.march(x0, y0, x1, opts, |_, _, _, _| {})
}

/// Integrate and keep the dense-output interpolant of every accepted step.
pub fn integrate_dense<T: Real, const N: usize>(
    f: &impl OdeRhs<T, N>,
    x0: T,
    y0: [T; N],
    x1: T,
    opts: &OdeOpts,
) -> Result<DenseSolution<T, N>> {
    let mut st = Stepper::new(f, opts);
    let mut segments = Vec::new();
    st.march(x0, y0, x1, opts, |x, h, _, cont| {
        segments.push(Segment { x0: x, h, cont: *cont });
    })?;
    if segments.is_empty() {
        // zero-length span: a constant segment keeps eval() total
        let k = f.rhs(x0, &y0);
        let mut cont = [[T::zero(); N]; 5];
        cont[0] = y0;
        let _ = k;
        segments.push(Segment { x0, h: T::one(), cont });
    }
    Ok(DenseSolution { segments, x_start: x0, x_end: x1, stats: st.stats })
}

/// Integrate from `x0`, sampling the solution exactly at each abscissa of the
/// monotone list `xs` (each sample is an integration endpoint, so no
/// interpolation error is introduced). `xs` may move away from `x0` in either
/// direction but must be monotone.
pub fn integrate_sampled<T: Real, const N: usize>(
    f: &impl OdeRhs<T, N>,
    x0: T,
    y0: [T; N],
    xs: &[T],
    opts: &OdeOpts,
) -> Result<Vec<[T; N]>> {
    let mut out = Vec::with_capacity(xs.len());
    let mut x = x0;
    let mut y = y0;
    let mut dir = T::zero();
    for &target in xs {
        let step = target - x;
        if !step.is_zero() {
            if dir.is_zero() {
                dir = step.signum();
            } else if (step * dir) < T::zero() {
                return Err(CfhError::Integrator(
                    "sample abscissae must be monotone away from the start point".into(),
                ));
            }
            y = integrate(f, x, y, target, opts)?;
            x = target;
        }
        out.push(y);
    }
    Ok(out)
}

/// Sample on a sorted ascending grid whose base point may lie inside the
/// range: integrates left and right from `(x0, y0)` separately.
pub fn sample_grid_from<T: Real, const N: usize>(
    f: &impl OdeRhs<T, N>,
    x0: T,
    y0: [T; N],
    xs_sorted: &[T],
    opts: &OdeOpts,
) -> Result<Vec<[T; N]>> {
    let split = xs_sorted.partition_point(|&x| x < x0);
    let left: Vec<T> = xs_sorted[..split].iter().rev().copied().collect();
    let mut out_left = integrate_sampled(f, x0, y0, &left, opts)?;
    out_left.reverse();
    let right = integrate_sampled(f, x0, y0, &xs_sorted[split..], opts)?;
    out_left.extend(right);
    Ok(out_left)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Dd;

    #[test]
    fn exponential_growth_reaches_e() {
        let f = |_x: f64, y: &[f64; 1]| [y[0]];
        let y1 = integrate(&f, 0.0, [1.0], 1.0, &OdeOpts::default()).unwrap();
        assert!((y1[0] - std::f64::consts::E).abs() < 1e-9);
    }

    #[test]
    fn harmonic_oscillator_in_extended_precision() {
        let f = |_x: Dd, y: &[Dd; 2]| [y[1], -y[0]];
        let opts = OdeOpts { rtol: 1e-20, atol: 1e-24, max_steps: 2_000_000 };
        let y = integrate(&f, Dd::ZERO, [Dd::ONE, Dd::ZERO], Dd::PI, &opts).unwrap();
        assert!((y[0] + Dd::ONE).abs().hi < 1e-17, "cos(pi) error {:e}", (y[0] + Dd::ONE).hi);
        assert!(y[1].abs().hi < 1e-17);
    }

    #[test]
    fn dense_output_tracks_sine() {
        let f = |x: f64, _y: &[f64; 1]| [x.cos()];
        let sol = integrate_dense(&f, 0.0, [0.0], 10.0, &OdeOpts::default()).unwrap();
        for i in 0..200 {
            let x = 0.05 * i as f64;
            let v = sol.eval(x).unwrap()[0];
            assert!((v - x.sin()).abs() < 1e-8, "at {x}: {v} vs {}", x.sin());
        }
        assert!(sol.eval(-1.0).is_err());
    }

    #[test]
    fn sampled_integration_is_exact_on_nodes() {
        let f = |_x: f64, y: &[f64; 2]| [y[1], -y[0]];
        let xs: Vec<f64> = (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect();
        let ys = sample_grid_from(&f, 0.0, [0.0, 1.0], &xs, &OdeOpts::default()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((y[0] - x.sin()).abs() < 1e-9, "sin({x})");
            assert!((y[1] - x.cos()).abs() < 1e-9, "cos({x})");
        }
    }

    #[test]
    fn monotonicity_violation_is_reported() {
        let f = |_x: f64, y: &[f64; 1]| [y[0]];
        let r = integrate_sampled(&f, 0.0, [1.0], &[1.0, 0.5], &OdeOpts::default());
        assert!(r.is_err());
    }
}

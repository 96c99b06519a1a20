//! Scalar abstraction for all numerical kernels.
//!
//! Every grid, stencil, series and ODE routine in this crate is generic over
//! [`Real`]. Two implementations are provided: plain `f64` for diagnostics and
//! output, and the double-double type [`Dd`] (roughly 31 significant decimal
//! digits) for seed evaluation and the z-jet recursion, where amplified
//! rounding noise in the initial data would otherwise dominate the
//! high-order derivative diagnostics.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

/// Floating point scalar usable by every kernel in the crate: `f64` or [`Dd`].
pub trait Real:
    Float + FromPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Short name used in reports and error messages.
    const NAME: &'static str;

    /// Injects an `f64` exactly (every `f64` is representable).
    fn of(x: f64) -> Self;

    /// Nearest `f64` value.
    fn f64(self) -> f64;

    /// Exact small-integer constructor.
    fn of_int(n: i64) -> Self {
        Self::of(n as f64)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Error-free transformation: `a + b = s + e` exactly.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Like [`two_sum`] but assumes `|a| >= |b|`.
#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Error-free transformation: `a * b = p + e` exactly, via FMA.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, f64::mul_add(a, b, -p))
}

/// Unevaluated sum `hi + lo` of two doubles with `|lo| <= ulp(hi)/2`.
///
/// Arithmetic follows the classic error-free-transformation algorithms
/// (Dekker; Hida, Li and Bailey's QD library). Relative accuracy is about
/// 2^-104, i.e. 1e-31 relative.
#[derive(Clone, Copy, Debug, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    pub const PI: Dd = Dd { hi: 3.141592653589793, lo: 1.2246467991473532e-16 };
    pub const PI_2: Dd = Dd { hi: 1.5707963267948966, lo: 6.123233995736766e-17 };
    pub const PI_4: Dd = Dd { hi: 0.7853981633974483, lo: 3.061616997868383e-17 };
    pub const TWO_PI: Dd = Dd { hi: 6.283185307179586, lo: 2.4492935982947064e-16 };
    pub const LN2: Dd = Dd { hi: 0.6931471805599453, lo: 2.3190468138462996e-17 };
    /// 2^-104, the comparison scale for double-double roundoff.
    pub const EPS: f64 = 4.930380657631324e-32;

    #[inline]
    pub fn new(hi: f64, lo: f64) -> Dd {
        let (s, e) = quick_two_sum(hi, lo);
        Dd { hi: s, lo: e }
    }

    #[inline]
    pub fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    /// Exact sum of two doubles as a double-double.
    #[inline]
    pub fn add_f64_f64(a: f64, b: f64) -> Dd {
        let (s, e) = two_sum(a, b);
        Dd { hi: s, lo: e }
    }

    /// Exact product of two doubles as a double-double.
    #[inline]
    pub fn mul_f64_f64(a: f64, b: f64) -> Dd {
        let (p, e) = two_prod(a, b);
        Dd { hi: p, lo: e }
    }

    #[inline]
    pub fn abs(self) -> Dd {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    pub fn sqr(self) -> Dd {
        let (p1, mut p2) = two_prod(self.hi, self.hi);
        p2 += 2.0 * self.hi * self.lo;
        p2 += self.lo * self.lo;
        let (s, e) = quick_two_sum(p1, p2);
        Dd { hi: s, lo: e }
    }

    pub fn sqrt(self) -> Dd {
        if self.hi == 0.0 && self.lo == 0.0 {
            return Dd::ZERO;
        }
        if self.hi < 0.0 {
            return Dd::from_f64(f64::NAN);
        }
        // Karp-Markstein: one Newton step on an f64 inverse square root.
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        let err = (self - Dd::mul_f64_f64(ax, ax)).hi * (x * 0.5);
        let (s, e) = quick_two_sum(ax, err);
        Dd { hi: s, lo: e }
    }

    pub fn recip(self) -> Dd {
        Dd::ONE / self
    }

    pub fn floor(self) -> Dd {
        let f = self.hi.floor();
        if f == self.hi {
            Dd::new(f, self.lo.floor())
        } else {
            Dd { hi: f, lo: 0.0 }
        }
    }

    pub fn ceil(self) -> Dd {
        let c = self.hi.ceil();
        if c == self.hi {
            Dd::new(c, self.lo.ceil())
        } else {
            Dd { hi: c, lo: 0.0 }
        }
    }

    pub fn round(self) -> Dd {
        let r = self.hi.round();
        if r == self.hi {
            Dd::new(r, self.lo.round())
        } else if (r - self.hi).abs() == 0.5 && self.lo < 0.0 {
            Dd { hi: r - 1.0, lo: 0.0 }
        } else {
            Dd { hi: r, lo: 0.0 }
        }
    }

    pub fn trunc(self) -> Dd {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }

    pub fn powi(self, n: i32) -> Dd {
        if n == 0 {
            return Dd::ONE;
        }
        let mut r = Dd::ONE;
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        while e > 0 {
            if e & 1 == 1 {
                r = r * base;
            }
            base = base.sqr();
            e >>= 1;
        }
        r
    }

    pub fn exp(self) -> Dd {
        // Out-of-range guards use the f64 overflow thresholds.
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -709.0 {
            return Dd::ZERO;
        }
        if self.hi == 0.0 && self.lo == 0.0 {
            return Dd::ONE;
        }
        // exp(x) = 2^k exp(r), r = x - k ln2, then r is scaled down by 2^9
        // and the expm1 series result squared back up.
        let k = (self.hi / Dd::LN2.hi).round();
        let r = (self - Dd::LN2 * Dd::from_f64(k)) * Dd::from_f64(1.0 / 512.0);
        // expm1 series on the reduced argument (|r| < 7e-4).
        let mut term = r;
        let mut sum = r;
        for j in 2..24 {
            term = term * r / Dd::from_f64(j as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-40 {
                break;
            }
        }
        // (1+m)^2 = 1 + m(m+2), applied 9 times.
        let mut m = sum;
        for _ in 0..9 {
            m = m * (m + Dd::from_f64(2.0));
        }
        let e = m + Dd::ONE;
        let scale = libm_exp2(k);
        Dd::new(e.hi * scale, e.lo * scale)
    }

    pub fn ln(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::from_f64(if self.hi == 0.0 { f64::NEG_INFINITY } else { f64::NAN });
        }
        // Newton iteration a <- a + x exp(-a) - 1 starting from the f64 log;
        // each step squares the error.
        let mut a = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            a = a + self * (-a).exp() - Dd::ONE;
        }
        a
    }

    /// Argument reduction by pi/2: returns (j, r) with `self = n*pi/2 + r`,
    /// `j = n mod 4` and `|r| <= pi/4` (up to roundoff).
    fn reduce_pi2(self) -> (u8, Dd) {
        let q = (self / Dd::PI_2).hi.round();
        let r = self - Dd::PI_2 * Dd::from_f64(q);
        let j = ((q as i64 % 4) + 4) % 4;
        (j as u8, r)
    }

    /// Taylor sine on a reduced argument, |r| <= pi/4.
    fn sin_taylor(self) -> Dd {
        if self.hi == 0.0 && self.lo == 0.0 {
            return Dd::ZERO;
        }
        let x2 = self.sqr();
        let mut term = self;
        let mut sum = self;
        let mut k = 1.0;
        loop {
            term = term * x2 / Dd::from_f64(-((k + 1.0) * (k + 2.0)));
            sum = sum + term;
            k += 2.0;
            if term.hi.abs() < 1e-35 * sum.hi.abs().max(1e-300) || k > 60.0 {
                break;
            }
        }
        sum
    }

    /// Taylor cosine on a reduced argument, |r| <= pi/4.
    fn cos_taylor(self) -> Dd {
        let x2 = self.sqr();
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        let mut k = 0.0;
        loop {
            term = term * x2 / Dd::from_f64(-((k + 1.0) * (k + 2.0)));
            sum = sum + term;
            k += 2.0;
            if term.hi.abs() < 1e-35 || k > 60.0 {
                break;
            }
        }
        sum
    }

    pub fn sin_cos(self) -> (Dd, Dd) {
        let (j, r) = self.reduce_pi2();
        let s = r.sin_taylor();
        let c = r.cos_taylor();
        match j {
            0 => (s, c),
            1 => (c, -s),
            2 => (-s, -c),
            _ => (-c, s),
        }
    }

    pub fn sin(self) -> Dd {
        self.sin_cos().0
    }

    pub fn cos(self) -> Dd {
        self.sin_cos().1
    }

    pub fn tan(self) -> Dd {
        let (s, c) = self.sin_cos();
        s / c
    }

    pub fn atan2(y: Dd, x: Dd) -> Dd {
        if x.hi == 0.0 && x.lo == 0.0 && y.hi == 0.0 && y.lo == 0.0 {
            return Dd::ZERO;
        }
        if y.hi == 0.0 && y.lo == 0.0 {
            return if x.hi > 0.0 { Dd::ZERO } else { Dd::PI };
        }
        if x.hi == 0.0 && x.lo == 0.0 {
            return if y.hi > 0.0 { Dd::PI_2 } else { -Dd::PI_2 };
        }
        // Newton on the unit circle from the f64 estimate; two steps.
        let r = (x.sqr() + y.sqr()).sqrt();
        let xn = x / r;
        let yn = y / r;
        let mut z = Dd::from_f64(f64::atan2(y.hi, x.hi));
        for _ in 0..2 {
            let (sz, cz) = z.sin_cos();
            if xn.hi.abs() > yn.hi.abs() {
                z = z + (yn - sz) / cz;
            } else {
                z = z - (xn - cz) / sz;
            }
        }
        z
    }

    pub fn atan(self) -> Dd {
        Dd::atan2(self, Dd::ONE)
    }
}

/// `2^k` for integral `k` given as f64, exact.
fn libm_exp2(k: f64) -> f64 {
    f64::powi(2.0, k as i32)
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, rhs: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, rhs.hi);
        let (t1, t2) = two_sum(self.lo, rhs.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        let (s1, s2) = quick_two_sum(s1, s2 + t2);
        Dd { hi: s1, lo: s2 }
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, rhs: Dd) -> Dd {
        self + (-rhs)
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, rhs: Dd) -> Dd {
        let (p1, mut p2) = two_prod(self.hi, rhs.hi);
        p2 += self.hi * rhs.lo + self.lo * rhs.hi;
        let (s, e) = quick_two_sum(p1, p2);
        Dd { hi: s, lo: e }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, rhs: Dd) -> Dd {
        // Three correction steps of long division.
        let q1 = self.hi / rhs.hi;
        let mut r = self - rhs * Dd::from_f64(q1);
        let q2 = r.hi / rhs.hi;
        r = r - rhs * Dd::from_f64(q2);
        let q3 = r.hi / rhs.hi;
        let (s, e) = quick_two_sum(q1, q2);
        Dd { hi: s, lo: e } + Dd::from_f64(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, rhs: Dd) -> Dd {
        let n = (self / rhs).trunc();
        self - rhs * n
    }
}

impl AddAssign for Dd {
    fn add_assign(&mut self, rhs: Dd) {
        *self = *self + rhs;
    }
}
impl SubAssign for Dd {
    fn sub_assign(&mut self, rhs: Dd) {
        *self = *self - rhs;
    }
}
impl MulAssign for Dd {
    fn mul_assign(&mut self, rhs: Dd) {
        *self = *self * rhs;
    }
}
impl DivAssign for Dd {
    fn div_assign(&mut self, rhs: Dd) {
        *self = *self / rhs;
    }
}

impl PartialEq for Dd {
    fn eq(&self, other: &Dd) -> bool {
        self.hi == other.hi && self.lo == other.lo
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Dd) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            ord => ord,
        }
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Display is only used in messages; the leading component is enough.
        write!(f, "{}", self.hi)?;
        if self.lo != 0.0 {
            write!(f, "{:+e}", self.lo)?;
        }
        Ok(())
    }
}

impl Zero for Dd {
    fn zero() -> Dd {
        Dd::ZERO
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0 && self.lo == 0.0
    }
}

impl One for Dd {
    fn one() -> Dd {
        Dd::ONE
    }
}

impl Num for Dd {
    type FromStrRadixErr = num_traits::ParseFloatError;
    fn from_str_radix(str: &str, radix: u32) -> Result<Dd, Self::FromStrRadixErr> {
        f64::from_str_radix(str, radix).map(Dd::from_f64)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.trunc().hi.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.trunc().hi.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Dd> {
        // i64 may exceed f64's 53-bit mantissa; split exactly.
        let hi = n as f64;
        let lo = (n - hi as i64) as f64;
        Some(Dd::new(hi, lo))
    }
    fn from_u64(n: u64) -> Option<Dd> {
        let hi = n as f64;
        let lo = if hi as u64 >= n { -((hi as u64 - n) as f64) } else { (n - hi as u64) as f64 };
        Some(Dd::new(hi, lo))
    }
    fn from_f64(x: f64) -> Option<Dd> {
        Some(Dd::from_f64(x))
    }
}

impl NumCast for Dd {
    fn from<T: ToPrimitive>(n: T) -> Option<Dd> {
        n.to_f64().map(Dd::from_f64)
    }
}

impl Float for Dd {
    fn nan() -> Dd {
        Dd::from_f64(f64::NAN)
    }
    fn infinity() -> Dd {
        Dd::from_f64(f64::INFINITY)
    }
    fn neg_infinity() -> Dd {
        Dd::from_f64(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Dd {
        Dd::from_f64(-0.0)
    }
    fn min_value() -> Dd {
        Dd::from_f64(f64::MIN)
    }
    fn min_positive_value() -> Dd {
        Dd::from_f64(f64::MIN_POSITIVE)
    }
    fn max_value() -> Dd {
        Dd::from_f64(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan() || self.lo.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Dd {
        Dd::floor(self)
    }
    fn ceil(self) -> Dd {
        Dd::ceil(self)
    }
    fn round(self) -> Dd {
        Dd::round(self)
    }
    fn trunc(self) -> Dd {
        Dd::trunc(self)
    }
    fn fract(self) -> Dd {
        self - self.trunc()
    }
    fn abs(self) -> Dd {
        Dd::abs(self)
    }
    fn signum(self) -> Dd {
        if self.is_nan() {
            Float::nan()
        } else if self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0) {
            Dd::ONE
        } else if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -Dd::ONE
        } else {
            Dd::from_f64(self.hi.signum())
        }
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Dd, b: Dd) -> Dd {
        self * a + b
    }
    fn recip(self) -> Dd {
        Dd::recip(self)
    }
    fn powi(self, n: i32) -> Dd {
        Dd::powi(self, n)
    }
    fn powf(self, n: Dd) -> Dd {
        if self.is_zero() {
            return if n.is_zero() { Dd::ONE } else { Dd::ZERO };
        }
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Dd {
        Dd::sqrt(self)
    }
    fn exp(self) -> Dd {
        Dd::exp(self)
    }
    fn exp2(self) -> Dd {
        (self * Dd::LN2).exp()
    }
    fn ln(self) -> Dd {
        Dd::ln(self)
    }
    fn log(self, base: Dd) -> Dd {
        self.ln() / base.ln()
    }
    fn log2(self) -> Dd {
        self.ln() / Dd::LN2
    }
    fn log10(self) -> Dd {
        self.ln() / Dd::from_f64(10.0).ln()
    }
    fn max(self, other: Dd) -> Dd {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn min(self, other: Dd) -> Dd {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn abs_sub(self, other: Dd) -> Dd {
        if self > other {
            self - other
        } else {
            Dd::ZERO
        }
    }
    fn cbrt(self) -> Dd {
        if self.is_zero() {
            return Dd::ZERO;
        }
        // Newton from the f64 estimate: x <- x - (x - a/x^2)/3 ... applied twice.
        let mut x = Dd::from_f64(self.hi.cbrt());
        for _ in 0..2 {
            x = x - (x - self / x.sqr()) / Dd::from_f64(3.0);
        }
        x
    }
    fn hypot(self, other: Dd) -> Dd {
        (self.sqr() + other.sqr()).sqrt()
    }
    fn sin(self) -> Dd {
        Dd::sin(self)
    }
    fn cos(self) -> Dd {
        Dd::cos(self)
    }
    fn tan(self) -> Dd {
        Dd::tan(self)
    }
    fn asin(self) -> Dd {
        Dd::atan2(self, (Dd::ONE - self.sqr()).sqrt())
    }
    fn acos(self) -> Dd {
        Dd::atan2((Dd::ONE - self.sqr()).sqrt(), self)
    }
    fn atan(self) -> Dd {
        Dd::atan(self)
    }
    fn atan2(self, other: Dd) -> Dd {
        Dd::atan2(self, other)
    }
    fn sin_cos(self) -> (Dd, Dd) {
        Dd::sin_cos(self)
    }
    fn exp_m1(self) -> Dd {
        self.exp() - Dd::ONE
    }
    fn ln_1p(self) -> Dd {
        (Dd::ONE + self).ln()
    }
    fn sinh(self) -> Dd {
        let e = self.exp();
        (e - e.recip()) * Dd::from_f64(0.5)
    }
    fn cosh(self) -> Dd {
        let e = self.exp();
        (e + e.recip()) * Dd::from_f64(0.5)
    }
    fn tanh(self) -> Dd {
        let e2 = (self * Dd::from_f64(2.0)).exp();
        (e2 - Dd::ONE) / (e2 + Dd::ONE)
    }
    fn asinh(self) -> Dd {
        (self + (self.sqr() + Dd::ONE).sqrt()).ln()
    }
    fn acosh(self) -> Dd {
        (self + (self.sqr() - Dd::ONE).sqrt()).ln()
    }
    fn atanh(self) -> Dd {
        ((Dd::ONE + self) / (Dd::ONE - self)).ln() * Dd::from_f64(0.5)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
    fn epsilon() -> Dd {
        Dd::from_f64(Dd::EPS)
    }
    fn to_degrees(self) -> Dd {
        self * Dd::from_f64(180.0) / Dd::PI
    }
    fn to_radians(self) -> Dd {
        self * Dd::PI / Dd::from_f64(180.0)
    }
}

impl Real for Dd {
    const NAME: &'static str = "dd";

    #[inline]
    fn of(x: f64) -> Dd {
        Dd::from_f64(x)
    }

    #[inline]
    fn f64(self) -> f64 {
        self.hi + self.lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed with mpmath at 50 decimal digits, rounded to
    // double-double (hi = nearest f64, lo = nearest f64 of the remainder).
    pub const EXP_REF: &[(f64, f64, f64)] = &[
        (-30.0, 9.357622968840175e-14, -2.1170146272646406e-30),
        (-5.0, 0.006737946999085467, 9.579094181215286e-20),
        (-1.0, 0.36787944117144233, -1.2428753672788363e-17),
        (-0.1, 0.9048374180359595, 5.055984668733208e-17),
        (-0.000123, 0.9998770075641898, 1.920554531337035e-17),
        (0.0, 1.0, 0.0),
        (0.25, 1.2840254166877414, 8.968972781793724e-17),
        (1.0, 2.718281828459045, 1.4456468917292502e-16),
        (2.5, 12.182493960703473, 2.0334002173348147e-16),
        (5.0, 148.4131591025766, 3.4863514900464198e-15),
        (20.0, 485165195.4097903, 4.880277289790406e-10),
        (0.4, 1.4918246976412703, 3.4465650470333193e-18),
        (-0.4, 0.6703200460356393, -4.1681506122420287e-17),
    ];

    pub const LN_REF: &[(f64, f64, f64)] = &[
        (1e-08, -18.420680743952367, 1.757527539535928e-15),
        (0.001, -6.907755278982137, -2.1613487097372872e-16),
        (0.3, -1.2039728043259361, 8.935521583403776e-17),
        (0.9999, -0.00010000500033334732, 4.110491732511812e-21),
        (1.0, 0.0, 0.0),
        (1.0001, 9.999500033329732e-05, 1.739121921953736e-21),
        (2.0, 0.6931471805599453, 2.3190468138462996e-17),
        (2.718281828459045, 1.0, -5.318237706605891e-17),
        (10.0, 2.302585092994046, -2.1707562233822494e-16),
        (12345.678, 9.421061321291832, -1.9085650743481053e-16),
    ];

    pub const SIN_REF: &[(f64, f64, f64)] = &[
        (-30.0, 0.9880316240928618, -3.655935837727403e-17),
        (-6.0, 0.27941549819892586, 1.2659979684764697e-17),
        (-3.0, -0.1411200080598672, -8.577269787017502e-18),
        (-1.0, -0.8414709848078965, -1.776845092935536e-18),
        (-0.5, -0.479425538604203, 5.103969860556013e-18),
        (-0.001, -0.0009999998333333417, -5.670638989736153e-21),
        (0.0, 0.0, 0.0),
        (0.3, 0.29552020666133955, 1.8315357276792536e-17),
        (1.0, 0.8414709848078965, 1.776845092935536e-18),
        (1.5707963267948966, 1.0, -1.874699728327322e-33),
        (2.0, 0.9092974268256817, -1.4020906557816256e-17),
        (3.141592653589793, 1.2246467991473532e-16, -2.99476980971834e-33),
        (4.0, -0.7568024953079282, -4.892224089158451e-17),
        (6.283185307179586, -2.4492935982947064e-16, 5.9895396194366814e-33),
        (10.0, -0.5440211108893698, -3.8949898668223557e-17),
        (25.0, -0.13235175009777303, 9.996548308061322e-19),
    ];

    pub const COS_REF: &[(f64, f64, f64)] = &[
        (-30.0, 0.15425144988758405, 3.980208666184612e-18),
        (-6.0, 0.960170286650366, 5.330529085568646e-17),
        (-3.0, -0.9899924966004454, -4.2060261566099734e-17),
        (-1.0, 0.5403023058681398, -4.760954612604417e-17),
        (-0.5, 0.8775825618903728, -4.2623149864279997e-17),
        (-0.001, 0.9999995000000417, -7.831485455398128e-18),
        (0.0, 1.0, 0.0),
        (0.3, 0.955336489125606, 4.1935600297907467e-17),
        (1.0, 0.5403023058681398, -4.760954612604417e-17),
        (1.5707963267948966, 6.123233995736766e-17, -1.4973849048591698e-33),
        (2.0, -0.4161468365471424, 1.990596398957495e-17),
        (3.141592653589793, -1.0, 7.498798913309288e-33),
        (4.0, -0.6536436208636119, 2.5846614087018284e-17),
        (6.283185307179586, 1.0, -2.999519565323715e-32),
        (10.0, -0.8390715290764524, -1.4147119988953418e-17),
        (25.0, 0.9912028118634736, 1.0710642045449677e-17),
    ];

    pub const SQRT_REF: &[(f64, f64, f64)] = &[
        (1e-12, 1e-06, 3.519521198874155e-23),
        (0.0625, 0.25, 0.0),
        (0.5, 0.7071067811865476, -4.833646656726457e-17),
        (1.0, 1.0, 0.0),
        (2.0, 1.4142135623730951, -9.667293313452913e-17),
        (7.0, 2.6457513110645907, -1.2566948082017735e-16),
        (123456.789, 351.3641828644462, 1.5673839756619315e-14),
        (10000000000.0, 100000.0, 0.0),
    ];

    pub const ATAN2_REF: &[(f64, f64, f64, f64)] = &[
        (0.0, 1.0, 0.0, 0.0),
        (1.0, 1.0, 0.7853981633974483, 3.061616997868383e-17),
        (1.0, -1.0, 2.356194490192345, 9.184850993605148e-17),
        (-1.0, -1.0, -2.356194490192345, -9.184850993605148e-17),
        (-1.0, 1.0, -0.7853981633974483, -3.061616997868383e-17),
        (0.3, -0.7, 2.7367008673047097, 6.667662545167815e-17),
        (-2.5, 0.1, -1.5308176396716067, 9.13503753458202e-17),
        (1e-08, 1.0, 1e-08, -3.3333333333333335e-25),
        (5.0, 0.0, 1.5707963267948966, 6.123233995736766e-17),
        (-5.0, 0.0, -1.5707963267948966, -6.123233995736766e-17),
        (0.0, -3.0, 3.141592653589793, 1.2246467991473532e-16),
    ];

    fn assert_dd_close(got: Dd, hi: f64, lo: f64, tol: f64, what: &str) {
        let want = Dd::new(hi, lo);
        let diff = (got - want).abs();
        let scale = want.abs().hi.max(1e-300);
        assert!(
            diff.hi <= tol * scale,
            "{what}: got {:?}, want {:?}, rel err {:e}",
            got,
            want,
            diff.hi / scale
        );
    }

    #[test]
    fn add_mul_are_error_free_on_f64_pairs() {
        let a = Dd::add_f64_f64(0.1, 0.2);
        // 0.1 + 0.2 in exact arithmetic differs from the rounded f64 sum.
        assert_ne!(a.lo, 0.0);
        assert_eq!(a.hi, 0.1 + 0.2);
        let p = Dd::mul_f64_f64(1.0e17, 3.0 + 1e-13);
        assert_eq!(p.hi, 1.0e17 * (3.0 + 1e-13));
        assert_ne!(p.lo, 0.0);
    }

    #[test]
    fn basic_identities() {
        let x = Dd::from_f64(7.0);
        let r = x.sqrt();
        assert_dd_close(r.sqr(), 7.0, 0.0, 1e-31, "sqrt(7)^2");
        let inv = x.recip();
        assert_dd_close(x * inv, 1.0, 0.0, 1e-31, "7 * (1/7)");
        let third = Dd::ONE / Dd::from_f64(3.0);
        let one = third + third + third;
        assert!((one - Dd::ONE).abs().hi < 1e-31);
    }

    #[test]
    fn exp_matches_reference() {
        for &(x, hi, lo) in EXP_REF {
            assert_dd_close(Dd::from_f64(x).exp(), hi, lo, 1e-29, &format!("exp({x})"));
        }
    }

    #[test]
    fn ln_matches_reference() {
        for &(x, hi, lo) in LN_REF {
            let got = Dd::from_f64(x).ln();
            let want = Dd::new(hi, lo);
            let diff = (got - want).abs().hi;
            assert!(diff <= 1e-30 * want.abs().hi.max(1.0), "ln({x}): {:?} vs {:?}", got, want);
        }
    }

    #[test]
    fn sin_cos_match_reference() {
        for &(x, hi, lo) in SIN_REF {
            let got = Dd::from_f64(x).sin();
            let want = Dd::new(hi, lo);
            assert!(((got - want).abs().hi) <= 1e-30, "sin({x}): {:?} vs {:?}", got, want);
        }
        for &(x, hi, lo) in COS_REF {
            let got = Dd::from_f64(x).cos();
            let want = Dd::new(hi, lo);
            assert!(((got - want).abs().hi) <= 1e-30, "cos({x}): {:?} vs {:?}", got, want);
        }
    }

    #[test]
    fn sqrt_matches_reference() {
        for &(x, hi, lo) in SQRT_REF {
            assert_dd_close(Dd::from_f64(x).sqrt(), hi, lo, 1e-30, &format!("sqrt({x})"));
        }
    }

    #[test]
    fn atan2_matches_reference() {
        for &(y, x, hi, lo) in ATAN2_REF {
            let got = Dd::atan2(Dd::from_f64(y), Dd::from_f64(x));
            let want = Dd::new(hi, lo);
            assert!(((got - want).abs().hi) <= 1e-30, "atan2({y},{x}): {:?} vs {:?}", got, want);
        }
    }

    #[test]
    fn trig_pythagoras() {
        for i in 0..50 {
            let x = Dd::from_f64(-12.0 + 0.48 * i as f64);
            let (s, c) = x.sin_cos();
            let r = s.sqr() + c.sqr() - Dd::ONE;
            assert!(r.abs().hi < 1e-31, "sin^2+cos^2 at {}: {:e}", x.hi, r.hi);
        }
    }

    #[test]
    fn exp_ln_roundtrip() {
        for i in 0..40 {
            let x = Dd::from_f64(0.01 + 0.7 * i as f64);
            let r = x.ln().exp() - x;
            assert!(r.abs().hi < 1e-29 * x.hi, "exp(ln({})) err {:e}", x.hi, r.hi);
        }
    }

    #[test]
    fn rounding_helpers() {
        assert_eq!(Dd::from_f64(2.5).floor().hi, 2.0);
        assert_eq!(Dd::from_f64(-2.5).floor().hi, -3.0);
        assert_eq!(Dd::from_f64(2.5).trunc().hi, 2.0);
        assert_eq!(Dd::from_f64(-2.5).trunc().hi, -2.0);
        // hi integral, lo negative: floor must look at lo.
        let x = Dd::new(3.0, -1e-20);
        assert_eq!(x.floor().hi, 2.0);
        assert_eq!(x.ceil().hi, 3.0);
    }

    #[test]
    fn comparisons_use_both_limbs() {
        let a = Dd::new(1.0, 1e-20);
        let b = Dd::new(1.0, -1e-20);
        assert!(a > b);
        assert!(Dd::from_f64(1.0) > b);
        assert!(a > Dd::from_f64(1.0));
    }

    #[test]
    fn powi_matches_repeated_multiplication() {
        let x = Dd::from_f64(1.37);
        let mut acc = Dd::ONE;
        for _ in 0..11 {
            acc = acc * x;
        }
        assert!((x.powi(11) - acc).abs().hi < 1e-28);
        assert_dd_close(x.powi(-2) * x.sqr(), 1.0, 0.0, 1e-30, "x^-2 * x^2");
    }

    #[test]
    fn float_trait_surface() {
        fn probe<T: Real>() -> T {
            let two = T::of(2.0);
            let x = two.sqrt();
            x.powi(2) - two
        }
        assert!(probe::<f64>().abs() < 1e-15);
        assert!(probe::<Dd>().abs().hi < 1e-30);
    }
}

//! Truncated power series in z whose coefficients are 2D fields.
//!
//! The z-evolution writes each unknown as a jet `f(x,y,z) = sum_k c_k(x,y) z^k`
//! truncated at a fixed order. Series arithmetic (products, quotients,
//! composition with sine and cosine on nilpotent arguments) plus coefficient-wise
//! finite differences are everything the evolution recursion needs.

use crate::error::{CfhError, Result};
use crate::field::{self, Axis2, Field2, Grid2};
use crate::scalar::Real;

/// Power series in z with [`Field2`] coefficients, truncated at order `m`:
/// indices `0..=m` are stored.
#[derive(Clone, Debug)]
pub struct Jet2<T> {
    grid: Grid2,
    c: Vec<Field2<T>>,
}

impl<T: Real> Jet2<T> {
    pub fn zeros(grid: Grid2, m: usize) -> Jet2<T> {
        Jet2 { grid, c: (0..=m).map(|_| Field2::zeros(grid)).collect() }
    }

    pub fn from_coeffs(coeffs: Vec<Field2<T>>) -> Result<Jet2<T>> {
        if coeffs.is_empty() {
            return Err(CfhError::shape("a jet needs at least the constant coefficient"));
        }
        let grid = coeffs[0].grid;
        if coeffs.iter().any(|f| f.grid != grid) {
            return Err(CfhError::shape("jet coefficients live on different grids"));
        }
        Ok(Jet2 { grid, c: coeffs })
    }

    /// Jet of a z-independent field.
    pub fn constant(f: Field2<T>, m: usize) -> Jet2<T> {
        let grid = f.grid;
        let mut c = vec![f];
        c.extend((0..m).map(|_| Field2::zeros(grid)));
        Jet2 { grid, c }
    }

    #[inline]
    pub fn grid(&self) -> Grid2 {
        self.grid
    }

    /// Truncation order (largest stored power of z).
    #[inline]
    pub fn order(&self) -> usize {
        self.c.len() - 1
    }

    pub fn coeff(&self, k: usize) -> &Field2<T> {
        &self.c[k]
    }

    pub fn set_coeff(&mut self, k: usize, f: Field2<T>) {
        assert_eq!(f.grid, self.grid, "coefficient grid mismatch");
        self.c[k] = f;
    }

    pub fn add(&self, other: &Jet2<T>) -> Jet2<T> {
        let m = self.order().min(other.order());
        Jet2 {
            grid: self.grid,
            c: (0..=m).map(|k| self.c[k].add(&other.c[k])).collect(),
        }
    }

    pub fn sub(&self, other: &Jet2<T>) -> Jet2<T> {
        let m = self.order().min(other.order());
        Jet2 {
            grid: self.grid,
            c: (0..=m).map(|k| self.c[k].sub(&other.c[k])).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Jet2<T> {
        Jet2 { grid: self.grid, c: self.c.iter().map(|f| f.scale(s)).collect() }
    }

    /// Product truncated at the shorter operand's order.
    pub fn mul(&self, other: &Jet2<T>) -> Jet2<T> {
        self.mul_trunc(other, self.order().min(other.order()))
    }

    /// Product truncated at `m` (which must not exceed either operand).
    pub fn mul_trunc(&self, other: &Jet2<T>, m: usize) -> Jet2<T> {
        assert!(m <= self.order() && m <= other.order());
        assert_eq!(self.grid, other.grid, "jets live on different grids");
        let mut c = Vec::with_capacity(m + 1);
        for k in 0..=m {
            let mut acc = Field2::zeros(self.grid);
            for j in 0..=k {
                acc = acc.add(&self.c[j].mul(&other.c[k - j]));
            }
            c.push(acc);
        }
        Jet2 { grid: self.grid, c }
    }

    /// Series quotient; the divisor's constant coefficient must be bounded
    /// away from zero everywhere (the caller's domain guards ensure this).
    pub fn div(&self, den: &Jet2<T>) -> Jet2<T> {
        let m = self.order().min(den.order());
        assert_eq!(self.grid, den.grid, "jets live on different grids");
        let inv0 = den.c[0].map(|v| T::one() / v);
        let mut c: Vec<Field2<T>> = Vec::with_capacity(m + 1);
        for k in 0..=m {
            let mut acc = self.c[k].clone();
            for j in 1..=k {
                acc = acc.sub(&den.c[j].mul(&c[k - j]));
            }
            c.push(acc.mul(&inv0));
        }
        Jet2 { grid: self.grid, c }
    }

    /// True if the constant coefficient is identically zero, which the
    /// nilpotent trigonometric compositions require.
    pub fn is_nilpotent(&self) -> bool {
        self.c[0].data().iter().all(|v| v.is_zero())
    }

    /// Sine of a nilpotent jet (Taylor composition, exact to the truncation
    /// order because powers of the argument gain a factor of z each).
    pub fn sin_nilpotent(&self) -> Jet2<T> {
        debug_assert!(self.is_nilpotent(), "sin composition needs a nilpotent jet");
        let m = self.order();
        let a2 = self.mul(self);
        let mut term = self.clone();
        let mut sum = self.clone();
        let mut n = 1i64;
        while (n + 2) as usize <= m {
            term = term.mul(&a2).scale(-T::one() / T::of_int((n + 1) * (n + 2)));
            sum = sum.add(&term);
            n += 2;
        }
        sum
    }

    /// Cosine of a nilpotent jet.
    pub fn cos_nilpotent(&self) -> Jet2<T> {
        debug_assert!(self.is_nilpotent(), "cos composition needs a nilpotent jet");
        let m = self.order();
        let a2 = self.mul(self);
        let mut term = Jet2::constant(
            Field2::from_fn(self.grid, |_, _| T::one()),
            m,
        );
        let mut sum = term.clone();
        let mut n = 0i64;
        while (n + 2) as usize <= m {
            term = term.mul(&a2).scale(-T::one() / T::of_int((n + 1) * (n + 2)));
            sum = sum.add(&term);
            n += 2;
        }
        sum
    }

    /// d/dz as a series of one order less.
    pub fn dz(&self) -> Jet2<T> {
        let m = self.order();
        let c = (1..=m).map(|k| self.c[k].scale(T::of_int(k as i64))).collect();
        Jet2 { grid: self.grid, c: if m == 0 { vec![Field2::zeros(self.grid)] } else { c } }
    }

    /// Coefficient-wise partial derivative along a grid axis.
    pub fn partial(&self, axis: Axis2, order: u8) -> Jet2<T> {
        Jet2 {
            grid: self.grid,
            c: self.c.iter().map(|f| field::partial(f, axis, order)).collect(),
        }
    }

    /// Evaluate at z by Horner's rule.
    pub fn eval(&self, z: T) -> Field2<T> {
        let mut acc = self.c[self.order()].clone();
        for k in (0..self.order()).rev() {
            acc = acc.map(|v| v * z).add(&self.c[k]);
        }
        acc
    }

    /// Evaluate the d-th z-derivative at z (analytic differentiation of the
    /// series, then Horner).
    pub fn eval_dz(&self, d: usize, z: T) -> Field2<T> {
        let m = self.order();
        if d > m {
            return Field2::zeros(self.grid);
        }
        // falling-factorial weights (k+d)!/k! are exact small integers
        let weight = |k: usize| {
            let mut w = 1i64;
            for j in 1..=d {
                w *= (k + j) as i64;
            }
            T::of_int(w)
        };
        let mut acc = self.c[m].scale(weight(m - d));
        for k in (0..m - d).rev() {
            acc = acc.map(|v| v * z).add(&self.c[k + d].scale(weight(k)));
        }
        acc
    }

    /// Convert coefficients to another scalar type through f64.
    pub fn cast<U: Real>(&self) -> Jet2<U> {
        Jet2 { grid: self.grid, c: self.c.iter().map(|f| f.cast()).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::linf;
    use crate::scalar::Dd;

    fn grid() -> Grid2 {
        Grid2::new(8, 7, (0.5, 1.5), (1.0, 2.0)).unwrap()
    }

    fn poly_jet(m: usize) -> Jet2<f64> {
        // f = x + (x*y) z + (y^2 - x) z^3
        let g = grid();
        let mut j = Jet2::zeros(g, m);
        j.set_coeff(0, Field2::from_fn(g, |x, _| x));
        j.set_coeff(1, Field2::from_fn(g, |x, y| x * y));
        j.set_coeff(3, Field2::from_fn(g, |x, y| y * y - x));
        j
    }

    #[test]
    fn eval_and_derivatives_match_closed_form() {
        let j = poly_jet(6);
        let g = j.grid();
        let z = 0.07;
        let v = j.eval(z);
        let vz = j.eval_dz(1, z);
        let vzz = j.eval_dz(2, z);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let (x, y) = (g.x::<f64>(ix), g.y::<f64>(iy));
                let want = x + x * y * z + (y * y - x) * z * z * z;
                assert!((v.at(ix, iy) - want).abs() < 1e-15);
                let want_z = x * y + 3.0 * (y * y - x) * z * z;
                assert!((vz.at(ix, iy) - want_z).abs() < 1e-14);
                let want_zz = 6.0 * (y * y - x) * z;
                assert!((vzz.at(ix, iy) - want_zz).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn product_and_quotient_invert() {
        let a = poly_jet(6);
        let g = a.grid();
        let mut b = Jet2::zeros(g, 6);
        b.set_coeff(0, Field2::from_fn(g, |x, y| 1.0 + 0.1 * x * y));
        b.set_coeff(2, Field2::from_fn(g, |x, _| 0.3 * x));
        let p = a.mul(&b);
        let q = p.div(&b);
        for k in 0..=6 {
            assert!(linf(&q.coeff(k).sub(a.coeff(k))) < 1e-13, "coefficient {k}");
        }
    }

    #[test]
    fn nilpotent_trig_matches_pointwise_trig() {
        // With constant-in-(x,y) coefficients the jet is a scalar series; its
        // nilpotent sine must agree with sin evaluated at the series value up
        // to the truncation error.
        let g = grid();
        let m = 8;
        let mut a = Jet2::zeros(g, m);
        a.set_coeff(1, Field2::from_fn(g, |_, _| 0.7));
        a.set_coeff(2, Field2::from_fn(g, |_, _| -0.4));
        let s = a.sin_nilpotent();
        let c = a.cos_nilpotent();
        for &z in &[0.05, 0.1, -0.08] {
            let az = 0.7 * z - 0.4 * z * z;
            let sv = s.eval(z).at(3, 3);
            let cv = c.eval(z).at(3, 3);
            assert!((sv - az.sin()).abs() < 1e-12, "sin at z={z}: {sv} vs {}", az.sin());
            assert!((cv - az.cos()).abs() < 1e-12, "cos at z={z}");
        }
        // Pythagoras as a series: sin^2 + cos^2 = 1 through order m.
        let one = s.mul(&s).add(&c.mul(&c));
        assert!(linf(&one.coeff(0).map(|v| v - 1.0)) < 1e-14);
        for k in 1..=m {
            assert!(linf(one.coeff(k)) < 1e-13, "order {k}");
        }
    }

    #[test]
    fn coefficientwise_stencils_differentiate_in_x() {
        let j = poly_jet(4);
        let jx = j.partial(Axis2::X, 1);
        let g = j.grid();
        // d/dx of coefficient 1 (= x*y) is y.
        let want = Field2::from_fn(g, |_, y| y);
        assert!(linf(&jx.coeff(1).sub(&want)) < 1e-11);
    }

    #[test]
    fn extended_precision_series_roundtrip() {
        let g = grid();
        let mut a = Jet2::<Dd>::zeros(g, 8);
        a.set_coeff(1, Field2::from_fn(g, |x, y| x * y));
        a.set_coeff(3, Field2::from_fn(g, |x, _| x - Dd::of(2.0)));
        let s = a.sin_nilpotent();
        let c = a.cos_nilpotent();
        let one = s.mul(&s).add(&c.mul(&c));
        for k in 1..=8 {
            assert!(linf(one.coeff(k)).hi < 1e-29, "order {k}");
        }
    }
}

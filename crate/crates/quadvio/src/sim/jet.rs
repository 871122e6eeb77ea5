//! Truncated Taylor arithmetic: a value with its first three time
//! derivatives. Evaluating the trajectory expressions on jets gives exact
//! velocities, accelerations, and angle rates with no finite differencing.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub f: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl Jet {
    pub const fn constant(f: f64) -> Self {
        Jet { f, d1: 0.0, d2: 0.0, d3: 0.0 }
    }

    /// The time variable itself.
    pub const fn variable(t: f64) -> Self {
        Jet { f: t, d1: 1.0, d2: 0.0, d3: 0.0 }
    }

    /// Shifts derivatives down one order: the jet of this jet's derivative.
    /// The third derivative of the result is unknown and set to zero, so
    /// only use up to the second derivative of anything built from it.
    pub fn derivative(&self) -> Jet {
        Jet { f: self.d1, d1: self.d2, d2: self.d3, d3: 0.0 }
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.f.sin_cos();
        self.compose(s, c, -s, -c)
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.f.sin_cos();
        self.compose(c, -s, -c, s)
    }

    pub fn sqrt(&self) -> Jet {
        let r = self.f.sqrt();
        self.compose(r, 0.5 / r, -0.25 / (r * r * r), 0.375 / (r * r * r * r * r))
    }

    /// Chain rule for g(self) given g and its first three derivatives at
    /// self.f (Faa di Bruno up to order three).
    fn compose(&self, g: f64, g1: f64, g2: f64, g3: f64) -> Jet {
        let (u1, u2, u3) = (self.d1, self.d2, self.d3);
        Jet {
            f: g,
            d1: g1 * u1,
            d2: g2 * u1 * u1 + g1 * u2,
            d3: g3 * u1 * u1 * u1 + 3.0 * g2 * u1 * u2 + g1 * u3,
        }
    }

    /// Two-argument arctangent with full derivative propagation.
    pub fn atan2(&self, x: &Jet) -> Jet {
        let y = *self;
        let x = *x;
        // d/dt atan2(y, x) = (x y' - y x') / (x^2 + y^2); differentiate the
        // quotient twice more via jet arithmetic on the ingredients
        let num = x * y.shift_unknown() - y * x.shift_unknown();
        let den = x * x + y * y;
        let rate = num / den; // jet of the angle's first derivative (order 2 valid)
        Jet {
            f: y.f.atan2(x.f),
            d1: rate.f,
            d2: rate.d1,
            d3: rate.d2,
        }
    }

    /// Derivative jet used inside atan2 (keeps order bookkeeping local).
    fn shift_unknown(&self) -> Jet {
        self.derivative()
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        Jet { f: self.f + rhs.f, d1: self.d1 + rhs.d1, d2: self.d2 + rhs.d2, d3: self.d3 + rhs.d3 }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        Jet { f: self.f - rhs.f, d1: self.d1 - rhs.d1, d2: self.d2 - rhs.d2, d3: self.d3 - rhs.d3 }
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet { f: -self.f, d1: -self.d1, d2: -self.d2, d3: -self.d3 }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        // Leibniz
        Jet {
            f: self.f * rhs.f,
            d1: self.d1 * rhs.f + self.f * rhs.d1,
            d2: self.d2 * rhs.f + 2.0 * self.d1 * rhs.d1 + self.f * rhs.d2,
            d3: self.d3 * rhs.f
                + 3.0 * self.d2 * rhs.d1
                + 3.0 * self.d1 * rhs.d2
                + self.f * rhs.d3,
        }
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, k: f64) -> Jet {
        Jet { f: self.f * k, d1: self.d1 * k, d2: self.d2 * k, d3: self.d3 * k }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        // recurrence from (a/b) * b = a
        let f = self.f / rhs.f;
        let d1 = (self.d1 - f * rhs.d1) / rhs.f;
        let d2 = (self.d2 - 2.0 * d1 * rhs.d1 - f * rhs.d2) / rhs.f;
        let d3 = (self.d3 - 3.0 * d2 * rhs.d1 - 3.0 * d1 * rhs.d2 - f * rhs.d3) / rhs.f;
        Jet { f, d1, d2, d3 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd<F: Fn(f64) -> f64>(f: F, t: f64, order: usize) -> f64 {
        let h = 1e-5;
        match order {
            1 => (f(t + h) - f(t - h)) / (2.0 * h),
            2 => (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h),
            _ => panic!(),
        }
    }

    #[test]
    fn sin_product_quotient_derivatives() {
        let expr = |j: Jet| (j * 2.0).sin() * j + Jet::constant(1.0) / (j.cos() + Jet::constant(2.0));
        let scalar = |t: f64| (2.0 * t).sin() * t + 1.0 / (t.cos() + 2.0);
        for &t in &[0.3, 1.1, 2.7] {
            let j = expr(Jet::variable(t));
            assert_relative_eq!(j.f, scalar(t), epsilon = 1e-12);
            assert_relative_eq!(j.d1, fd(scalar, t, 1), epsilon = 1e-6);
            assert_relative_eq!(j.d2, fd(scalar, t, 2), epsilon = 1e-4);
        }
    }

    #[test]
    fn atan2_derivatives() {
        let yf = |t: f64| (1.3 * t).sin() + 0.4;
        let xf = |t: f64| (0.7 * t).cos() + 1.7;
        let scalar = |t: f64| yf(t).atan2(xf(t));
        for &t in &[0.0, 0.9, 2.2] {
            let tj = Jet::variable(t);
            let j = ((tj * 1.3).sin() + Jet::constant(0.4))
                .atan2(&((tj * 0.7).cos() + Jet::constant(1.7)));
            assert_relative_eq!(j.f, scalar(t), epsilon = 1e-12);
            assert_relative_eq!(j.d1, fd(scalar, t, 1), epsilon = 1e-6);
            assert_relative_eq!(j.d2, fd(scalar, t, 2), epsilon = 1e-4);
        }
    }

    #[test]
    fn sqrt_derivatives() {
        let scalar = |t: f64| (t * t + 3.0).sqrt();
        for &t in &[0.2, 1.5] {
            let tj = Jet::variable(t);
            let j = (tj * tj + Jet::constant(3.0)).sqrt();
            assert_relative_eq!(j.d1, fd(scalar, t, 1), epsilon = 1e-6);
            assert_relative_eq!(j.d2, fd(scalar, t, 2), epsilon = 1e-4);
        }
    }
}

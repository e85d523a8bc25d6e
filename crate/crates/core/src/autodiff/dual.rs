//! Scalar abstraction shared by plain evaluation and forward-mode JVPs.
//!
//! Layers are written once against [`Scalar`]. Instantiated with `f64` they
//! evaluate the network; instantiated with [`Dual`] they carry a tangent
//! alongside every primal, so a single pass yields both `g(x)` and `J(x)·v`.
//! Because the primal half of every `Dual` operation is the same `f64`
//! operation in the same order, the primal output of a JVP pass is
//! bit-identical to the plain forward pass.

use std::ops::{Add, Mul, Neg, Sub};

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn constant(value: f64) -> Self;
    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn primal(self) -> f64;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn constant(value: f64) -> Self {
        value
    }
    #[inline]
    fn primal(self) -> f64 {
        self
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
}

/// `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    #[inline]
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.eps + rhs.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.re - rhs.re, self.eps - rhs.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.eps * rhs.re + self.re * rhs.eps)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl Scalar for Dual {
    #[inline]
    fn constant(value: f64) -> Self {
        Dual::new(value, 0.0)
    }
    #[inline]
    fn primal(self) -> f64 {
        self.re
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.eps)
    }
    #[inline]
    fn relu(self) -> Self {
        if self.re > 0.0 {
            self
        } else {
            Dual::new(0.0, 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = Dual::new(3.0, 1.0);
        let y = x * x + Dual::constant(2.0) * x;
        assert_eq!(y.re, 15.0);
        assert_eq!(y.eps, 8.0);
    }

    #[test]
    fn tanh_derivative() {
        let x = Dual::new(0.3, 1.0);
        let h = 1e-6;
        let fd = ((0.3f64 + h).tanh() - (0.3f64 - h).tanh()) / (2.0 * h);
        assert!((x.tanh().eps - fd).abs() < 1e-9);
    }

    #[test]
    fn relu_kills_tangent_below_zero() {
        assert_eq!(Dual::new(-1.0, 5.0).relu(), Dual::new(0.0, 0.0));
        assert_eq!(Dual::new(2.0, 5.0).relu(), Dual::new(2.0, 5.0));
    }
}

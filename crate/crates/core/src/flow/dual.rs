// Forward-mode dual numbers used to differentiate a single spline segment
// with respect to its seven local inputs.

use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::math;

pub(crate) trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        math::sqrt(self)
    }
    #[inline]
    fn ln(self) -> Self {
        math::ln(self)
    }
}

pub(crate) const SLOTS: usize = 7;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: [f64; SLOTS],
}

impl Dual {
    #[inline]
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; SLOTS];
        d[slot] = 1.0;
        Self { v, d }
    }

    #[inline]
    fn scale(self, v: f64, k: f64) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x *= k;
        }
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (x, y) in d.iter_mut().zip(o.d) {
            *x += y;
        }
        Self { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (x, y) in d.iter_mut().zip(o.d) {
            *x -= y;
        }
        Self { v: self.v - o.v, d }
    }
}

impl Mul for Dual {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; SLOTS];
        for i in 0..SLOTS {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        let mut d = [0.0; SLOTS];
        for i in 0..SLOTS {
            d[i] = (self.d[i] - q * o.d[i]) * inv;
        }
        Self { v: q, d }
    }
}

impl Neg for Dual {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.scale(-self.v, -1.0)
    }
}

impl Real for Dual {
    #[inline]
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; SLOTS] }
    }
    #[inline]
    fn val(self) -> f64 {
        self.v
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = math::sqrt(self.v);
        self.scale(s, 0.5 / s)
    }
    #[inline]
    fn ln(self) -> Self {
        self.scale(math::ln(self.v), 1.0 / self.v)
    }
}

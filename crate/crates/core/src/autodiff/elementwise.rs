//! Pointwise operations and full reductions.

use super::{GradOp, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};

fn same_shape<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

struct AddOp {
    a: Var,
    b: Var,
}

impl<T: Scalar> GradOp<T> for AddOp {
    fn backward(&self, _v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        sink.add(self.a, g.clone());
        sink.add(self.b, g.clone());
    }
}

struct SubOp {
    a: Var,
    b: Var,
}

impl<T: Scalar> GradOp<T> for SubOp {
    fn backward(&self, _v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        sink.add(self.a, g.clone());
        sink.add(self.b, g.mapv(|x| -x));
    }
}

struct MulOp {
    a: Var,
    b: Var,
}

impl<T: Scalar> GradOp<T> for MulOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        if sink.wants(self.a) {
            let mut ga = g.clone();
            ga.zip_mut_with(&v[self.b.0], |x, y| *x *= *y);
            sink.add(self.a, ga);
        }
        if sink.wants(self.b) {
            let mut gb = g.clone();
            gb.zip_mut_with(&v[self.a.0], |x, y| *x *= *y);
            sink.add(self.b, gb);
        }
    }
}

/// y = mul * x + add
struct AffineOp<T> {
    a: Var,
    mul: T,
}

impl<T: Scalar> GradOp<T> for AffineOp<T> {
    fn backward(&self, _v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let m = self.mul;
        sink.add(self.a, g.mapv(|x| x * m));
    }
}

struct ReluOp {
    a: Var,
}

impl<T: Scalar> GradOp<T> for ReluOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let mut ga = g.clone();
        ga.zip_mut_with(&v[self.a.0], |x, y| {
            if *y <= T::zero() {
                *x = T::zero()
            }
        });
        sink.add(self.a, ga);
    }
}

/// Saves its own output node to reuse y*(1-y).
struct SigmoidOp {
    a: Var,
    out: Var,
}

impl<T: Scalar> GradOp<T> for SigmoidOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let mut ga = g.clone();
        ga.zip_mut_with(&v[self.out.0], |x, y| *x *= *y * (T::one() - *y));
        sink.add(self.a, ga);
    }
}

struct LnOp {
    a: Var,
}

impl<T: Scalar> GradOp<T> for LnOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let mut ga = g.clone();
        ga.zip_mut_with(&v[self.a.0], |x, y| *x /= *y);
        sink.add(self.a, ga);
    }
}

struct PowConstOp<T> {
    a: Var,
    exponent: T,
}

impl<T: Scalar> GradOp<T> for PowConstOp<T> {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let e = self.exponent;
        let mut ga = g.clone();
        ga.zip_mut_with(&v[self.a.0], |x, y| *x *= e * y.powf(e - T::one()));
        sink.add(self.a, ga);
    }
}

struct AbsOp {
    a: Var,
}

impl<T: Scalar> GradOp<T> for AbsOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let mut ga = g.clone();
        ga.zip_mut_with(&v[self.a.0], |x, y| {
            *x *= if *y > T::zero() {
                T::one()
            } else if *y < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        sink.add(self.a, ga);
    }
}

/// Straight-through inside [lo, hi], zero gradient outside.
struct ClampOp<T> {
    a: Var,
    lo: T,
    hi: T,
}

impl<T: Scalar> GradOp<T> for ClampOp<T> {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let (lo, hi) = (self.lo, self.hi);
        let mut ga = g.clone();
        ga.zip_mut_with(&v[self.a.0], |x, y| {
            if *y < lo || *y > hi {
                *x = T::zero()
            }
        });
        sink.add(self.a, ga);
    }
}

struct SumAllOp {
    a: Var,
}

impl<T: Scalar> GradOp<T> for SumAllOp {
    fn backward(&self, v: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<'_, T>) {
        let gs = g[[0]];
        sink.add(self.a, ArrayD::from_elem(v[self.a.0].raw_dim(), gs));
    }
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.zip_mut_with(self.value(b), |x, y| *x += *y);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(out, Some(Box::new(AddOp { a, b })), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let mut out = self.value(a).clone();
        out.zip_mut_with(self.value(b), |x, y| *x -= *y);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(out, Some(Box::new(SubOp { a, b })), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let mut out = self.value(a).clone();
        out.zip_mut_with(self.value(b), |x, y| *x *= *y);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(out, Some(Box::new(MulOp { a, b })), needs))
    }

    /// y = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Var {
        let out = self.value(a).mapv(|x| mul * x + add);
        let needs = self.any_needs(&[a]);
        self.push(out, Some(Box::new(AffineOp { a, mul })), needs)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.affine(a, c, T::zero())
    }

    /// y = 1 - x
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.any_needs(&[a]);
        self.push(out, Some(Box::new(ReluOp { a })), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| T::one() / (T::one() + (-x).exp()));
        let needs = self.any_needs(&[a]);
        let v = self.push(out, None, needs);
        self.ops[v.0] = Some(Box::new(SigmoidOp { a, out: v }));
        v
    }

    /// Natural log; the caller guarantees strictly positive inputs
    /// (losses clamp predictions first).
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.ln());
        let needs = self.any_needs(&[a]);
        self.push(out, Some(Box::new(LnOp { a })), needs)
    }

    /// x^e for non-negative x.
    pub fn powf_const(&mut self, a: Var, exponent: T) -> Var {
        let out = self.value(a).mapv(|x| x.powf(exponent));
        let needs = self.any_needs(&[a]);
        self.push(out, Some(Box::new(PowConstOp { a, exponent })), needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.abs());
        let needs = self.any_needs(&[a]);
        self.push(out, Some(Box::new(AbsOp { a })), needs)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).mapv(|x| if x < lo { lo } else if x > hi { hi } else { x });
        let needs = self.any_needs(&[a]);
        self.push(out, Some(Box::new(ClampOp { a, lo, hi })), needs)
    }

    /// Reduce every element to a 1-element array.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let needs = self.any_needs(&[a]);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(SumAllOp { a })),
            needs,
        )
    }
}

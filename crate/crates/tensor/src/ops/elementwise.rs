use crate::error::shape_err;
use crate::{Real, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Relu,
    Exp,
    /// Requires strictly positive input.
    Log,
    /// Requires nonnegative input.
    Sqrt,
    Abs,
    Square,
    Softplus,
    /// Gradient is 1 strictly inside `(min, max)` and 0 elsewhere,
    /// boundaries included.
    Clamp { min: Real, max: Real },
}

/// Output shape of a broadcast between `a` and `b`.
///
/// Only leading-1 broadcasting is supported: after stripping leading unit
/// axes, the smaller operand's shape must be a suffix of the larger one.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    fn strip(s: &[usize]) -> &[usize] {
        let lead = s.iter().take_while(|&&d| d == 1).count();
        &s[lead..]
    }
    let (sa, sb) = (strip(a), strip(b));
    let (na, nb): (usize, usize) = (a.iter().product(), b.iter().product());
    let (big, big_s, small_s) = if na > nb || (na == nb && a.len() >= b.len()) {
        (a, sa, sb)
    } else {
        (b, sb, sa)
    };
    if small_s.len() > big_s.len() || !big_s.ends_with(small_s) {
        return shape_err(format!("cannot broadcast shapes {a:?} and {b:?}"));
    }
    Ok(big.to_vec())
}

fn binary_apply(op: BinaryOp, x: Real, y: Real) -> Real {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    }
}

/// Sums a full-size gradient down to an operand holding `n` elements that
/// was broadcast by repetition.
fn reduce_to(full: Vec<Real>, n: usize, shape: &[usize]) -> Tensor {
    if full.len() == n {
        return Tensor::new(shape.to_vec(), full).expect("shape checked");
    }
    let mut out = vec![0.0; n];
    for (i, g) in full.into_iter().enumerate() {
        out[i % n] += g;
    }
    Tensor::new(shape.to_vec(), out).expect("shape checked")
}

// fallible, so these cannot be the std operator traits
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn binary(self, op: BinaryOp, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (a.numel(), b.numel());
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<Real> = (0..n)
            .map(|i| binary_apply(op, ad[i % na], bd[i % nb]))
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.op(&[self, other], value, move |args| {
            let g = args.grad.data();
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            let (na, nb) = (a.numel(), b.numel());
            let (ad, bd) = (a.data(), b.data());
            let ga = args.needs[0].then(|| {
                let full: Vec<Real> = (0..g.len())
                    .map(|i| match op {
                        BinaryOp::Add | BinaryOp::Sub => g[i],
                        BinaryOp::Mul => g[i] * bd[i % nb],
                        BinaryOp::Div => g[i] / bd[i % nb],
                    })
                    .collect();
                reduce_to(full, na, a.shape())
            });
            let gb = args.needs[1].then(|| {
                let full: Vec<Real> = (0..g.len())
                    .map(|i| match op {
                        BinaryOp::Add => g[i],
                        BinaryOp::Sub => -g[i],
                        BinaryOp::Mul => g[i] * ad[i % na],
                        BinaryOp::Div => {
                            let y = bd[i % nb];
                            -g[i] * ad[i % na] / (y * y)
                        }
                    })
                    .collect();
                reduce_to(full, nb, b.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Div, other)
    }

    /// `self * s + t`, elementwise with scalar constants.
    pub fn affine(self, s: Real, t: Real) -> Var<'t> {
        let value = self.value().map(|x| x * s + t);
        self.tape.op(&[self], value, move |args| {
            vec![Some(args.grad.map(|g| g * s))]
        })
    }

    pub fn scale(self, s: Real) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(self, t: Real) -> Var<'t> {
        self.affine(1.0, t)
    }

    pub fn unary(self, op: UnaryOp) -> Result<Var<'t>> {
        let x = self.value();
        match op {
            UnaryOp::Sqrt => {
                if let Some(bad) = x.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
                    return Err(TensorError::Domain(format!("sqrt of {bad}")));
                }
            }
            UnaryOp::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(TensorError::Domain(format!("log of {bad}")));
                }
            }
            UnaryOp::Clamp { min, max } if min > max => {
                return Err(TensorError::Domain(format!("clamp bounds {min} > {max}")));
            }
            _ => {}
        }
        let value = x.map(|v| unary_value(op, v));
        Ok(self.tape.op(&[self], value, move |args| {
            let (x, y, g) = (args.inputs[0].data(), args.output.data(), args.grad.data());
            let data = (0..g.len()).map(|i| g[i] * unary_deriv(op, x[i], y[i])).collect();
            vec![Some(Tensor::new(args.grad.shape().to_vec(), data).expect("same shape"))]
        }))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryOp::Relu).expect("relu is total")
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryOp::Exp).expect("exp is total")
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryOp::Abs).expect("abs is total")
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryOp::Square).expect("square is total")
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryOp::Softplus).expect("softplus is total")
    }

    pub fn clamp(self, min: Real, max: Real) -> Result<Var<'t>> {
        self.unary(UnaryOp::Clamp { min, max })
    }
}

pub(crate) fn unary_value(op: UnaryOp, x: Real) -> Real {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Relu => x.max(0.0),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Abs => x.abs(),
        UnaryOp::Square => x * x,
        UnaryOp::Softplus => softplus(x),
        UnaryOp::Clamp { min, max } => x.clamp(min, max),
    }
}

fn unary_deriv(op: UnaryOp, x: Real, y: Real) -> Real {
    match op {
        UnaryOp::Neg => -1.0,
        UnaryOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Exp => y,
        UnaryOp::Log => 1.0 / x,
        UnaryOp::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        UnaryOp::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryOp::Square => 2.0 * x,
        UnaryOp::Softplus => sigmoid(x),
        UnaryOp::Clamp { min, max } => {
            if x > min && x < max {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn softplus(x: Real) -> Real {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[3], &[4, 3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[4, 3], &[1, 3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[2, 4, 3], &[]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast_shape(&[4, 3], &[4]).is_err());
        assert!(broadcast_shape(&[4, 3], &[2, 3]).is_err());
    }

    #[test]
    fn clamp_sqrt_anchor() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.25));
        let y = x.sqrt().unwrap().clamp(1e-3, 1.0).unwrap();
        assert_eq!(y.value().item(), 0.5);
    }

    #[test]
    fn relu_negative_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-3.0), true);
        let y = x.relu();
        assert_eq!(y.value().item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn clamp_boundary_is_saturated() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[0.0, 0.5, 1.0, 2.0]), true);
        let y = x.clamp(0.0, 1.0).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_slice(&[1.0, -1.0]));
        assert!(matches!(x.sqrt(), Err(TensorError::Domain(_))));
        assert!(matches!(x.log(), Err(TensorError::Domain(_))));
        let z = tape.constant(Tensor::from_slice(&[0.0]));
        assert!(matches!(z.log(), Err(TensorError::Domain(_))));
        assert!(z.sqrt().is_ok());
    }

    #[test]
    fn mismatched_shapes_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2]));
        assert!(matches!(a.add(b), Err(TensorError::Shape(_))));
    }

    #[test]
    fn bias_gradient_sums_over_rows() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([4, 2]));
        let b = tape.leaf(Tensor::from_slice(&[0.5, -0.5]), true);
        let y = x.add(b).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0]);
    }
}

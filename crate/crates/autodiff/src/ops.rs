//! Differentiable operations on [`Var`].
//!
//! Primitive operations record a node whose backward rule is expressed with
//! other operations from this file. Composite operations (softmax,
//! cross-entropy, pooling) are built from primitives and inherit second-order
//! support from them.

use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::graph::{Op, Var};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

impl Var {
    fn binary_shape_check(&self, other: &Var, op: &'static str) -> Result<()> {
        self.check_graph(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary_shape_check(other, "add")?;
        let v = self.value().add(&other.value())?;
        Ok(self.graph.record(Op::Add(self.id, other.id), v))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary_shape_check(other, "sub")?;
        let v = self.value().sub(&other.value())?;
        Ok(self.graph.record(Op::Sub(self.id, other.id), v))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary_shape_check(other, "mul")?;
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.graph.record(Op::Mul(self.id, other.id), v))
    }

    /// Elementwise quotient, `self * recip(other)`.
    pub fn div(&self, other: &Var) -> Result<Var> {
        self.mul(&other.recip())
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value().scale(c);
        self.graph.record(Op::Scale(self.id, c), v)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var {
        let v = self.value().map(f64::exp);
        self.graph.record(Op::Exp(self.id), v)
    }

    pub fn ln(&self) -> Var {
        let v = self.value().map(f64::ln);
        self.graph.record(Op::Log(self.id), v)
    }

    pub fn recip(&self) -> Var {
        let v = self.value().map(|x| 1.0 / x);
        self.graph.record(Op::Recip(self.id), v)
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    /// Multiplies by a constant mask of the same shape.
    pub fn mask_mul(&self, mask: Rc<Tensor>) -> Result<Var> {
        let v = self.value().zip_map(&mask, |a, m| a * m)?;
        Ok(self.graph.record(Op::MaskMul(self.id, mask), v))
    }

    /// `max(0, x)`; the derivative at 0 is taken as 0.
    pub fn relu(&self) -> Var {
        let x = self.value();
        let mask = Rc::new(x.map(|a| if a > 0.0 { 1.0 } else { 0.0 }));
        let v = x.map(|a| if a > 0.0 { a } else { 0.0 });
        self.graph.record(Op::MaskMul(self.id, mask), v)
    }

    /// `max(0, min(6, x))`; the derivative at 0 and at 6 is taken as 0.
    pub fn relu6(&self) -> Var {
        let x = self.value();
        let mask = Rc::new(x.map(|a| if a > 0.0 && a < 6.0 { 1.0 } else { 0.0 }));
        let v = x.map(|a| a.clamp(0.0, 6.0));
        self.graph.record(Op::Relu6(self.id, mask), v)
    }

    /// Matrix product of two rank-2 variables.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` transposes when the flag is set.
    pub fn matmul_t(&self, other: &Var, ta: bool, tb: bool) -> Result<Var> {
        self.check_graph(other)?;
        let v = kernels::matmul(&self.value(), &other.value(), ta, tb)?;
        Ok(self.graph.record(
            Op::Matmul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            v,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.record(Op::Reshape(self.id), v))
    }

    /// Expands size-1 axes to `shape` (ranks must agree).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let v = kernels::broadcast_to(&self.value(), shape)?;
        Ok(self.graph.record(Op::BroadcastTo(self.id), v))
    }

    /// Sums over the axes where `shape` has size 1 (ranks must agree).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        let v = kernels::sum_to(&self.value(), shape)?;
        Ok(self.graph.record(Op::SumTo(self.id), v))
    }

    /// Sum of all entries as a rank-0 variable.
    pub fn sum(&self) -> Result<Var> {
        let n = self.value().len();
        self.reshape(&[n])?.sum_to(&[1])?.reshape(&[])
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().len();
        Ok(self.sum()?.scale(1.0 / n as f64))
    }

    /// Cross-correlation of `[B,C,H,W]` with kernel `[C',C,kh,kw]`.
    pub fn conv2d(&self, kernel: &Var, geom: ConvGeom) -> Result<Var> {
        self.check_graph(kernel)?;
        let v = kernels::conv2d(&self.value(), &kernel.value(), geom)?;
        Ok(self.graph.record(
            Op::Conv {
                x: self.id,
                k: kernel.id,
                geom,
            },
            v,
        ))
    }

    pub(crate) fn conv2d_grad_input(&self, kernel: &Var, x_shape: &[usize], geom: ConvGeom) -> Result<Var> {
        let v = kernels::conv2d_grad_input(&self.value(), &kernel.value(), x_shape, geom)?;
        Ok(self.graph.record(
            Op::ConvGradInput {
                gy: self.id,
                k: kernel.id,
                geom,
            },
            v,
        ))
    }

    pub(crate) fn conv2d_grad_kernel(&self, gy: &Var, k_shape: &[usize], geom: ConvGeom) -> Result<Var> {
        let v = kernels::conv2d_grad_kernel(&self.value(), &gy.value(), k_shape, geom)?;
        Ok(self.graph.record(
            Op::ConvGradKernel {
                x: self.id,
                gy: gy.id,
                geom,
            },
            v,
        ))
    }

    /// Align-corners bilinear resize of `[B,C,H,W]` to `[B,C,out_h,out_w]`.
    ///
    /// Output pixel `o` samples input coordinate `o·(in−1)/(out−1)`, so the
    /// corner pixels of input and output coincide and resizing to the same
    /// size is the identity.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var> {
        let v = kernels::bilinear_resize(&self.value(), out_h, out_w)?;
        Ok(self.graph.record(Op::Resize(self.id), v))
    }

    pub(crate) fn bilinear_resize_adjoint(&self, in_h: usize, in_w: usize) -> Result<Var> {
        let v = kernels::bilinear_resize_adjoint(&self.value(), in_h, in_w)?;
        Ok(self.graph.record(Op::ResizeAdjoint(self.id), v))
    }

    /// 2×2 average pooling, stride 2.
    pub fn avg_pool2(&self) -> Result<Var> {
        let v = kernels::avg_pool2(&self.value())?;
        Ok(self.graph.record(Op::AvgPool2(self.id), v))
    }

    pub(crate) fn avg_pool2_adjoint(&self, h: usize, w: usize) -> Result<Var> {
        let v = kernels::avg_pool2_adjoint(&self.value(), h, w)?;
        Ok(self.graph.record(Op::AvgPool2Adjoint(self.id), v))
    }

    /// Per-channel spatial mean: `[B,C,H,W]` → `[B,C]`.
    pub fn global_avg_pool(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(AutodiffError::InvalidShape {
                op: "global_avg_pool",
                shape: s,
                reason: "expected [B,C,H,W] with H,W >= 1".into(),
            });
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        Ok(self
            .reshape(&[b, c, hw])?
            .sum_to(&[b, c, 1])?
            .reshape(&[b, c])?
            .scale(1.0 / hw as f64))
    }

    /// Adds a per-row bias `[1,N]` (or `[N]`) to `[B,N]`.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        let s = self.shape();
        let n = *s.last().unwrap_or(&0);
        let bias = if bias.shape().len() == 1 {
            bias.reshape(&[1, n])?
        } else {
            bias.clone()
        };
        self.add(&bias.broadcast_to(&s)?)
    }

    /// Adds a per-channel bias `[C]` to `[B,C,H,W]`.
    pub fn add_channel(&self, bias: &Var) -> Result<Var> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(AutodiffError::InvalidShape {
                op: "add_channel",
                shape: s,
                reason: "expected rank 4".into(),
            });
        }
        self.add(&bias.reshape(&[1, s[1], 1, 1])?.broadcast_to(&s)?)
    }

    /// Row maxima of a `[B,N]` value as a constant `[B,N]`, for stabilizing
    /// shift-invariant functions.
    fn row_max_const(&self) -> Result<Var> {
        let s = self.shape();
        let x = self.value();
        let n = s[1];
        let maxes: Vec<f64> = x
            .data()
            .chunks(n)
            .flat_map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                std::iter::repeat(m).take(n)
            })
            .collect();
        Ok(self.graph.constant(Tensor::new(&s, maxes)?))
    }

    fn as_rows(&self, op: &'static str) -> Result<(Var, bool)> {
        let s = self.shape();
        match s.len() {
            1 if s[0] >= 1 => Ok((self.reshape(&[1, s[0]])?, true)),
            2 if s[1] >= 1 => Ok((self.clone(), false)),
            _ => Err(AutodiffError::InvalidShape {
                op,
                shape: s,
                reason: "expected [C] or [B,C] with C >= 1".into(),
            }),
        }
    }

    /// Softmax over the last axis of `[C]` or `[B,C]`, computed after
    /// subtracting the row maximum.
    pub fn softmax(&self) -> Result<Var> {
        let (x, squeeze) = self.as_rows("softmax")?;
        let s = x.shape();
        let e = x.sub(&x.row_max_const()?)?.exp();
        let total = e.sum_to(&[s[0], 1])?.broadcast_to(&s)?;
        let y = e.div(&total)?;
        if squeeze {
            y.reshape(&[s[1]])
        } else {
            Ok(y)
        }
    }

    /// Log-softmax over the last axis of `[C]` or `[B,C]`.
    pub fn log_softmax(&self) -> Result<Var> {
        let (x, squeeze) = self.as_rows("log_softmax")?;
        let s = x.shape();
        let shifted = x.sub(&x.row_max_const()?)?;
        let lse = shifted.exp().sum_to(&[s[0], 1])?.ln().broadcast_to(&s)?;
        let y = shifted.sub(&lse)?;
        if squeeze {
            y.reshape(&[s[1]])
        } else {
            Ok(y)
        }
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (b, k) = (s[0], s[1]);
        let mut onehot = vec![0.0; b * k];
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(AutodiffError::LabelOutOfRange {
                    index: i,
                    label: y,
                    classes: k,
                });
            }
            onehot[i * k + y] = 1.0;
        }
        let onehot = Rc::new(Tensor::new(&[b, k], onehot)?);
        Ok(self
            .log_softmax()?
            .mask_mul(onehot)?
            .sum()?
            .scale(-1.0 / b as f64))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let b = g.param(t(&[2, 1], &[1., 1.]));
        let a = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3., 7.]);
        let id = g.constant(Tensor::eye(2));
        assert_eq!(*id.matmul(&b).unwrap().value(), *b.value());
        let z = g.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(z.matmul(&b).unwrap().value().data(), &[0., 0.]);
        let err = b.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn conv_examples() {
        use crate::ConvGeom;
        let g = Graph::new();
        let geom = ConvGeom { stride: 1, padding: 0 };
        let x = g.param(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let one = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert_eq!(*x.conv2d(&one, geom).unwrap().value(), *x.value());
        let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert_eq!(ones.conv2d(&k, geom).unwrap().value().data(), &[9.0]);
        let zk = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = x.conv2d(&zk, ConvGeom { stride: 1, padding: 1 }).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu6_examples() {
        let g = Graph::new();
        let x = g.param(t(&[3], &[7.2, -1.0, 3.5]));
        assert_eq!(x.relu6().value().data(), &[6.0, 0.0, 3.5]);
        assert_eq!(x.relu().value().data(), &[7.2, 0.0, 3.5]);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let z = g.param(Tensor::zeros(&[4]));
        assert_eq!(z.softmax().unwrap().value().data(), &[0.25; 4]);
        let x = g.param(t(&[2], &[1f64.ln(), 3f64.ln()]));
        let y = x.softmax().unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let shifted = g.param(t(&[2], &[1f64.ln() + 40.0, 3f64.ln() + 40.0]));
        let ys = shifted.softmax().unwrap().value();
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_avg_pool_examples() {
        let g = Graph::new();
        let x = g.param(t(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 5., 5., 5.]));
        assert_eq!(x.global_avg_pool().unwrap().value().data(), &[2.5, 5.0]);
        let y = g.param(t(&[2, 1, 1, 1], &[3., 4.]));
        assert_eq!(y.global_avg_pool().unwrap().value().data(), &[3., 4.]);
    }

    #[test]
    fn bilinear_examples() {
        let g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 1], &[0., 1.]));
        assert_eq!(x.bilinear_resize(3, 1).unwrap().value().data(), &[0., 0.5, 1.]);
        let single = g.param(t(&[1, 1, 1, 1], &[2.5]));
        assert!(single
            .bilinear_resize(3, 4)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 2.5));
        let same = g.param(Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64).sin()));
        assert_eq!(*same.bilinear_resize(3, 3).unwrap().value(), *same.value());
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::new();
        let uniform = g.param(Tensor::zeros(&[3, 10]));
        let l = uniform.cross_entropy(&[0, 4, 9]).unwrap().value().item();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let confident = g.param(t(&[1, 3], &[50.0, 0.0, 0.0]));
        assert!(confident.cross_entropy(&[0]).unwrap().value().item() < 1e-4);
        let x = g.param(t(&[1, 2], &[0.0, 3f64.ln()]));
        let l = x.cross_entropy(&[1]).unwrap().value().item();
        assert!((l + 0.75f64.ln()).abs() < 1e-12);
        assert!(x.cross_entropy(&[2]).is_err());
    }
}

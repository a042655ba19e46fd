use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::shape::Broadcast;
use crate::tensor::Tensor;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let get = |s: &[usize], i: usize| {
        let pad = rank - s.len();
        if i < pad { 1 } else { s[i - pad] }
    };
    (0..rank)
        .map(|i| {
            let (x, y) = (get(a, i), get(b, i));
            match (x, y) {
                _ if x == y => Some(x),
                (1, _) => Some(y),
                (_, 1) => Some(x),
                _ => None,
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<F: Element> Tensor<F> {
    fn binary(&self, other: &Tensor<F>, kind: Binary) -> Result<Self> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| TensorError::Shape {
            op,
            detail: format!("{:?} and {:?} do not broadcast", self.shape(), other.shape()),
        })?;
        let ma = Broadcast::new(self.shape(), &out_shape).expect("checked");
        let mb = Broadcast::new(other.shape(), &out_shape).expect("checked");
        let a = ma.expand(self.data());
        let b = mb.expand(other.data());
        let data: Vec<F> = match kind {
            Binary::Add => a.iter().zip(&b).map(|(x, y)| *x + *y).collect(),
            Binary::Sub => a.iter().zip(&b).map(|(x, y)| *x - *y).collect(),
            Binary::Mul => a.iter().zip(&b).map(|(x, y)| *x * *y).collect(),
        };
        let (na, nb) = (self.numel(), other.numel());
        Tensor::from_op(op, data, out_shape.clone(), vec![self.clone(), other.clone()], move |args| {
            let g = args.grad;
            let (pa, pb) = (&args.parents[0], &args.parents[1]);
            match kind {
                Binary::Add => vec![
                    pa.requires_grad().then(|| ma.reduce(g, na)),
                    pb.requires_grad().then(|| mb.reduce(g, nb)),
                ],
                Binary::Sub => vec![
                    pa.requires_grad().then(|| ma.reduce(g, na)),
                    pb.requires_grad().then(|| {
                        let neg: Vec<F> = g.iter().map(|v| -*v).collect();
                        mb.reduce(&neg, nb)
                    }),
                ],
                Binary::Mul => {
                    vec![
                        pa.requires_grad().then(|| {
                            let bx = mb.expand(pb.data());
                            let prod: Vec<F> = g.iter().zip(&bx).map(|(x, y)| *x * *y).collect();
                            ma.reduce(&prod, na)
                        }),
                        pb.requires_grad().then(|| {
                            let ax = ma.expand(pa.data());
                            let prod: Vec<F> = g.iter().zip(&ax).map(|(x, y)| *x * *y).collect();
                            mb.reduce(&prod, nb)
                        }),
                    ]
                }
            }
        })
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&self, other: &Tensor<F>) -> Result<Self> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Self> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise (Hadamard) product with numpy broadcasting.
    pub fn mul(&self, other: &Tensor<F>) -> Result<Self> {
        self.binary(other, Binary::Mul)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, factor: F) -> Result<Self> {
        let data = self.data().iter().map(|v| *v * factor).collect();
        Tensor::from_op("scale", data, self.shape().to_vec(), vec![self.clone()], move |args| {
            vec![Some(args.grad.iter().map(|g| *g * factor).collect())]
        })
    }

    pub fn neg(&self) -> Result<Self> {
        self.scale(-F::one())
    }

    pub fn relu(&self) -> Result<Self> {
        let data = self.data().iter().map(|v| v.max(F::zero())).collect();
        Tensor::from_op("relu", data, self.shape().to_vec(), vec![self.clone()], |args| {
            let x = args.parents[0].data();
            vec![Some(
                args.grad
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v > F::zero() { *g } else { F::zero() })
                    .collect(),
            )]
        })
    }

    /// Square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Result<Self> {
        let data = self.data().iter().map(|v| v.sqrt()).collect();
        Tensor::from_op("sqrt", data, self.shape().to_vec(), vec![self.clone()], |args| {
            let half = F::lit(0.5);
            vec![Some(
                args.grad
                    .iter()
                    .zip(args.output)
                    .map(|(g, y)| if *y > F::zero() { *g * half / *y } else { F::zero() })
                    .collect(),
            )]
        })
    }

    pub fn square(&self) -> Result<Self> {
        self.mul(self)
    }
}

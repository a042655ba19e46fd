use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::ops::split_axis;
use crate::tensor::Tensor;

impl<F: Element> Tensor<F> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&self) -> Result<Self> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum_all", vec![s], vec![1], vec![self.clone()], move |args| {
            vec![Some(vec![args.grad[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Result<Self> {
        let n = self.numel();
        if n == 0 {
            return Err(crate::TensorError::Empty("mean_all"));
        }
        self.sum_all()?.scale(F::one() / F::from_usize(n).expect("count"))
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::from_op("sum_axis", data, shape, vec![self.clone()], move |args| {
            let mut g = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    g.extend_from_slice(&args.grad[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        })
    }

    /// Arithmetic mean over `axis` (the axis is removed).
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let len = *self.shape().get(axis).unwrap_or(&0);
        if len == 0 {
            return Err(crate::TensorError::Empty("mean_axis"));
        }
        self.sum_axis(axis)?.scale(F::one() / F::from_usize(len).expect("count"))
    }

    /// Picks flat elements by index; output shape `[indices.len()]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return shape_err("gather", format!("index {bad} out of range for {n} elements"));
        }
        let data = indices.iter().map(|&i| self.data()[i]).collect();
        let idx = indices.to_vec();
        Tensor::from_op("gather", data, vec![indices.len()], vec![self.clone()], move |args| {
            let mut g = vec![F::zero(); n];
            for (&i, &v) in idx.iter().zip(args.grad) {
                g[i] = g[i] + v;
            }
            vec![Some(g)]
        })
    }
}

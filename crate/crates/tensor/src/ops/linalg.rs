use crate::counter;
use crate::element::{gemm, Element};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

impl<F: Element> Tensor<F> {
    /// `[..., k] x [k, n] -> [..., n]`: a linear map on the last axis.
    pub fn matmul(&self, w: &Tensor<F>) -> Result<Self> {
        if self.rank() < 1 || w.rank() != 2 || self.shape()[self.rank() - 1] != w.shape()[0] {
            return shape_err(
                "matmul",
                format!("inner dims disagree: {:?} x {:?}", self.shape(), w.shape()),
            );
        }
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let m = self.numel() / k.max(1);
        let mut data = vec![F::zero(); m * n];
        gemm(m, k, n, self.data(), false, w.data(), false, &mut data, false);
        counter::record((m * k * n) as u64);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        Tensor::from_op("matmul", data, shape, vec![self.clone(), w.clone()], move |args| {
            let (a, b) = (&args.parents[0], &args.parents[1]);
            let ga = a.requires_grad().then(|| {
                let mut g = vec![F::zero(); m * k];
                gemm(m, n, k, args.grad, false, b.data(), true, &mut g, false);
                g
            });
            let gb = b.requires_grad().then(|| {
                let mut g = vec![F::zero(); k * n];
                gemm(k, m, n, a.data(), true, args.grad, false, &mut g, false);
                g
            });
            vec![ga, gb]
        })
    }

    /// Batched product over all leading axes: `op(a[i]) x op(b[i])`.
    ///
    /// Batch counts may differ when one divides the other; the smaller
    /// operand is reused cyclically (leading-axis broadcast), so a
    /// `[h, m, k]` bank pairs with `[g, h, k, n]` activations.
    pub fn bmm(&self, other: &Tensor<F>, trans_a: bool, trans_b: bool) -> Result<Self> {
        if self.rank() < 2 || other.rank() < 2 {
            return shape_err("bmm", "operands need rank >= 2");
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (a0, a1) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (b0, b1) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        let ba: usize = self.shape()[..ra - 2].iter().product();
        let bb: usize = other.shape()[..rb - 2].iter().product();
        let batch = ba.max(bb);
        if k != kb || ba == 0 || bb == 0 || !batch.is_multiple_of(ba) || !batch.is_multiple_of(bb) {
            return shape_err(
                "bmm",
                format!(
                    "cannot multiply {:?}{} by {:?}{}",
                    self.shape(),
                    if trans_a { "^T" } else { "" },
                    other.shape(),
                    if trans_b { "^T" } else { "" }
                ),
            );
        }
        let mut data = vec![F::zero(); batch * m * n];
        let (sa, sb, sc) = (m * k, k * n, m * n);
        for i in 0..batch {
            let (ia, ib) = (i % ba, i % bb);
            gemm(
                m,
                k,
                n,
                &self.data()[ia * sa..(ia + 1) * sa],
                trans_a,
                &other.data()[ib * sb..(ib + 1) * sb],
                trans_b,
                &mut data[i * sc..(i + 1) * sc],
                false,
            );
        }
        counter::record((batch * m * k * n) as u64);
        let lead = if ba > bb || (ba == bb && ra >= rb) {
            &self.shape()[..ra - 2]
        } else {
            &other.shape()[..rb - 2]
        };
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Tensor::from_op("bmm", data, shape, vec![self.clone(), other.clone()], move |args| {
            let (a, b) = (&args.parents[0], &args.parents[1]);
            let g = args.grad;
            let ga = a.requires_grad().then(|| {
                let mut out = vec![F::zero(); ba * sa];
                for i in 0..batch {
                    let (ia, ib) = (i % ba, i % bb);
                    let gc = &g[i * sc..(i + 1) * sc];
                    let bm = &b.data()[ib * sb..(ib + 1) * sb];
                    let dst = &mut out[ia * sa..(ia + 1) * sa];
                    if trans_a {
                        // dA (k x m) = op(B) dC^T
                        gemm(k, n, m, bm, trans_b, gc, true, dst, true);
                    } else {
                        // dA (m x k) = dC op(B)^T
                        gemm(m, n, k, gc, false, bm, !trans_b, dst, true);
                    }
                }
                out
            });
            let gb = b.requires_grad().then(|| {
                let mut out = vec![F::zero(); bb * sb];
                for i in 0..batch {
                    let (ia, ib) = (i % ba, i % bb);
                    let gc = &g[i * sc..(i + 1) * sc];
                    let am = &a.data()[ia * sa..(ia + 1) * sa];
                    let dst = &mut out[ib * sb..(ib + 1) * sb];
                    if trans_b {
                        // dB (n x k) = dC^T op(A)
                        gemm(n, m, k, gc, true, am, trans_a, dst, true);
                    } else {
                        // dB (k x n) = op(A)^T dC
                        gemm(k, m, n, am, !trans_a, gc, false, dst, true);
                    }
                }
                out
            });
            vec![ga, gb]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let i = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![2.0, 3.0, 4.0, 5.0], &[2, 2]).unwrap();
        assert_eq!(i.matmul(&b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2, 1]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn inner_dim_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(crate::TensorError::Shape { .. })));
        assert!(a.bmm(&b, false, false).is_err());
        assert!(a.bmm(&b, false, true).is_ok());
    }

    #[test]
    fn bmm_transposes_and_cyclic_broadcast() {
        // bank [2, 1, 2] against activations [3, 2, 2, 2] with b transposed.
        let bank = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 1, 2]).unwrap();
        let acts: Vec<f64> = (0..24).map(f64::from).collect();
        let acts = Tensor::from_vec(acts, &[3, 2, 2, 2]).unwrap();
        let out = bank.bmm(&acts, false, true).unwrap();
        assert_eq!(out.shape(), &[3, 2, 1, 2]);
        // batch 0 (head 0): [1,0] . rows [0,1],[2,3] -> [0, 2]
        // batch 1 (head 1): [0,1] . rows [4,5],[6,7] -> [5, 7]
        assert_eq!(&out.data()[..4], &[0.0, 2.0, 5.0, 7.0]);
    }
}

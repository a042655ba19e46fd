use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::fault;
use crate::ops::split_axis;
use crate::tensor::Tensor;

/// Visits every 1-D lane along an axis as a list of flat indices.
fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            f(&mut (0..len).map(move |j| base + j * inner));
        }
    }
}

impl<F: Element> Tensor<F> {
    /// `exp(x - max) / sum(exp(x - max))` along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![F::zero(); x.len()];
        let mut lane = Vec::with_capacity(len);
        for_each_lane(outer, len, inner, |idx| {
            lane.clear();
            lane.extend(idx);
            let max = lane.iter().map(|&i| x[i]).fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for &i in &lane {
                let e = (x[i] - max).exp();
                y[i] = e;
                total = total + e;
            }
            for &i in &lane {
                y[i] = y[i] / total;
            }
        });
        let flip = fault::softmax_sign_flip();
        Tensor::from_op("softmax", y, self.shape().to_vec(), vec![self.clone()], move |args| {
            let (g, y) = (args.grad, args.output);
            let mut dx = vec![F::zero(); y.len()];
            let mut lane = Vec::with_capacity(len);
            for_each_lane(outer, len, inner, |idx| {
                lane.clear();
                lane.extend(idx);
                let dot: F = lane.iter().map(|&i| g[i] * y[i]).sum();
                for &i in &lane {
                    dx[i] = y[i] * (g[i] - dot);
                }
            });
            if flip {
                dx.iter_mut().for_each(|v| *v = -*v);
            }
            vec![Some(dx)]
        })
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![F::zero(); x.len()];
        let mut lane = Vec::with_capacity(len);
        for_each_lane(outer, len, inner, |idx| {
            lane.clear();
            lane.extend(idx);
            let max = lane.iter().map(|&i| x[i]).fold(F::neg_infinity(), F::max);
            let lse = max + lane.iter().map(|&i| (x[i] - max).exp()).sum::<F>().ln();
            for &i in &lane {
                y[i] = x[i] - lse;
            }
        });
        Tensor::from_op("log_softmax", y, self.shape().to_vec(), vec![self.clone()], move |args| {
            let (g, y) = (args.grad, args.output);
            let mut dx = vec![F::zero(); y.len()];
            let mut lane = Vec::with_capacity(len);
            for_each_lane(outer, len, inner, |idx| {
                lane.clear();
                lane.extend(idx);
                let gsum: F = lane.iter().map(|&i| g[i]).sum();
                for &i in &lane {
                    dx[i] = g[i] - y[i].exp() * gsum;
                }
            });
            vec![Some(dx)]
        })
    }

    /// `x / (sum(|x|) + eps)` along `axis`.
    pub fn l1_normalize(&self, axis: usize, eps: F) -> Result<Self> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![F::zero(); x.len()];
        let mut denoms = Vec::with_capacity(outer * inner);
        let mut lane = Vec::with_capacity(len);
        for_each_lane(outer, len, inner, |idx| {
            lane.clear();
            lane.extend(idx);
            let d = lane.iter().map(|&i| x[i].abs()).sum::<F>() + eps;
            for &i in &lane {
                y[i] = x[i] / d;
            }
            denoms.push(d);
        });
        Tensor::from_op("l1_normalize", y, self.shape().to_vec(), vec![self.clone()], move |args| {
            let g = args.grad;
            let x = args.parents[0].data();
            let mut dx = vec![F::zero(); x.len()];
            let mut lane = Vec::with_capacity(len);
            let mut k = 0;
            for_each_lane(outer, len, inner, |idx| {
                lane.clear();
                lane.extend(idx);
                let d = denoms[k];
                k += 1;
                let gx: F = lane.iter().map(|&i| g[i] * x[i]).sum();
                for &i in &lane {
                    let sign = if x[i] > F::zero() {
                        F::one()
                    } else if x[i] < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    dx[i] = g[i] / d - sign * gx / (d * d);
                }
            });
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Self> {
        let d = *self.shape().last().unwrap_or(&0);
        if d == 0 || gain.shape() != [d] || bias.shape() != [d] {
            return shape_err(
                "layer_norm",
                format!("input {:?} with gain {:?}, bias {:?}", self.shape(), gain.shape(), bias.shape()),
            );
        }
        let rows = self.numel() / d;
        let x = self.data();
        let df = F::from_usize(d).expect("width");
        let mut xhat = vec![F::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / df;
            let inv = F::one() / (var + eps).sqrt();
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (gv, bv) = (gain.data(), bias.data());
        let y: Vec<F> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| *v * gv[j] + bv[j]))
            .collect();
        let parents = vec![self.clone(), gain.clone(), bias.clone()];
        Tensor::from_op("layer_norm", y, self.shape().to_vec(), parents, move |args| {
            let g = args.grad;
            let gain = args.parents[1].data();
            let mut dx = vec![F::zero(); g.len()];
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            let mut dxhat = vec![F::zero(); d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                for j in 0..d {
                    dxhat[j] = gr[j] * gain[j];
                    dgain[j] = dgain[j] + gr[j] * xr[j];
                    dbias[j] = dbias[j] + gr[j];
                }
                let s1: F = dxhat.iter().copied().sum();
                let s2: F = dxhat.iter().zip(xr).map(|(a, b)| *a * *b).sum();
                let scale = inv_std[r] / df;
                for j in 0..d {
                    dx[r * d + j] = scale * (df * dxhat[j] - s1 - xr[j] * s2);
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let y = t(&[7.5, 7.5, 7.5]).softmax(0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_pair() {
        let y = t(&[0.0, 3f64.ln()]).softmax(0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(matches!(
            t(&[1.0]).softmax(1),
            Err(crate::TensorError::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::<f64>::from_vec(vec![0.0, 1.0, 0.0, 1.0], &[2, 2]).unwrap();
        let y = x.softmax(0).unwrap();
        for v in y.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn l1_normalize_examples() {
        let y = t(&[1.0, 1.0, 2.0]).l1_normalize(0, 0.0).unwrap();
        assert_eq!(y.data(), &[0.25, 0.25, 0.5]);
        let z = t(&[0.0, 0.0, 0.0]).l1_normalize(0, 1e-6).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = t(&[1.0, 1.0]);
        let zeros = t(&[0.0, 0.0]);
        let y = t(&[1.0, 3.0]).layer_norm(&ones, &zeros, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let g3 = t(&[1.0, 1.0, 1.0]);
        let b3 = t(&[0.0, 0.0, 0.0]);
        let c = t(&[4.0, 4.0, 4.0]).layer_norm(&g3, &b3, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_checks_affine_shape() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let g = t(&[1.0, 1.0]);
        assert!(x.layer_norm(&g, &g, 1e-5).is_err());
    }
}

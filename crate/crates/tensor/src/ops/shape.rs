use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::ops::split_axis;
use crate::tensor::{numel, Tensor};

/// Row-major permutation of `data` laid out as `shape`.
pub(crate) fn permute_data<F: Copy>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| data[base + j * inner_stride]));
        }
        // Advance the multi-index over all but the innermost axis.
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl<F: Element> Tensor<F> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            );
        }
        Ok(self.share_with_shape("reshape", shape.to_vec(), |args| {
            vec![Some(args.grad.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return shape_err("permute", format!("{axes:?} is not a permutation of rank {rank}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape_c = out_shape.clone();
        Tensor::from_op("permute", data, out_shape, vec![self.clone()], move |args| {
            vec![Some(permute_data(args.grad, &out_shape_c, &inverse))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return shape_err("transpose_last", "rank must be at least 2");
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<F>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Empty("concat"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        for p in parts {
            let same = p.rank() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !same {
                return shape_err(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
                );
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis)?;
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let chunk = len * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let parents: Vec<Tensor<F>> = parts.iter().map(|p| (*p).clone()).collect();
        Tensor::from_op("concat", data, shape, parents, move |args| {
            let mut grads: Vec<Vec<F>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&args.grad[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (outer, full, inner) = split_axis(self.shape(), axis)?;
        if start + len > full {
            return shape_err("narrow", format!("range {start}..{} exceeds extent {full}", start + len));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op("narrow", data, shape, vec![self.clone()], move |args| {
            let mut g = vec![F::zero(); outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                g[base..base + len * inner]
                    .copy_from_slice(&args.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        })
    }

    /// Numpy-style broadcast to `shape` (size-1 or missing leading axes expand).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let map = Broadcast::new(self.shape(), shape).ok_or_else(|| TensorError::Shape {
            op: "broadcast_to",
            detail: format!("{:?} does not broadcast to {:?}", self.shape(), shape),
        })?;
        let data = map.expand(self.data());
        let n_src = self.numel();
        Tensor::from_op("broadcast_to", data, shape.to_vec(), vec![self.clone()], move |args| {
            vec![Some(map.reduce(args.grad, n_src))]
        })
    }
}

/// How a source buffer maps onto a broadcast output.
pub(crate) enum Broadcast {
    Same,
    /// Source is a trailing block repeated: `src[i % n]`, `total` outputs.
    Cycle { n: usize, total: usize },
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Option<Self> {
        if src.len() > out.len() {
            return None;
        }
        let pad = out.len() - src.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(src.iter().copied()).collect();
        if padded.iter().zip(out).any(|(&s, &o)| s != o && s != 1) {
            return None;
        }
        if padded == out {
            return Some(Broadcast::Same);
        }
        let n_src = numel(src);
        // Leading ones followed by an exact trailing match.
        let lead = padded.iter().take_while(|&&s| s == 1).count();
        if padded[lead..] == out[lead..] {
            return Some(Broadcast::Cycle {
                n: n_src.max(1),
                total: numel(out),
            });
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            strides[i] = if padded[i] == 1 { 0 } else { acc };
            acc *= padded[i];
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            let mut d = rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= strides[d] * out[d];
                idx[d] = 0;
            }
        }
        Some(Broadcast::Map(map))
    }

    pub(crate) fn expand<F: Copy>(&self, src: &[F]) -> Vec<F> {
        match self {
            Broadcast::Same => src.to_vec(),
            Broadcast::Cycle { n, total } => {
                let mut out = Vec::with_capacity(*total);
                while out.len() < *total {
                    out.extend_from_slice(&src[..*n]);
                }
                out
            }
            Broadcast::Map(map) => map.iter().map(|&i| src[i]).collect(),
        }
    }

    pub(crate) fn reduce<F: Element>(&self, grad: &[F], n_src: usize) -> Vec<F> {
        match self {
            Broadcast::Same => grad.to_vec(),
            Broadcast::Cycle { n, .. } => {
                let mut out = vec![F::zero(); n_src];
                for chunk in grad.chunks(*n) {
                    out.iter_mut().zip(chunk).for_each(|(o, g)| *o = *o + *g);
                }
                out
            }
            Broadcast::Map(map) => {
                let mut out = vec![F::zero(); n_src];
                for (&i, &g) in map.iter().zip(grad) {
                    out[i] = out[i] + g;
                }
                out
            }
        }
    }
}

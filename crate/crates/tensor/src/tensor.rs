use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::element::Element;
use crate::error::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Inputs handed to a recorded backward closure.
pub(crate) struct BackwardArgs<'a, F: Element> {
    pub grad: &'a [F],
    pub output: &'a [F],
    pub parents: &'a [Tensor<F>],
}

type BackwardFn<F> = dyn Fn(&BackwardArgs<'_, F>) -> Vec<Option<Vec<F>>>;

/// One tape entry: the primitive that produced a tensor and how to pull
/// gradients back through it.
struct GradFn<F: Element> {
    op: &'static str,
    parents: Vec<Tensor<F>>,
    backward: Box<BackwardFn<F>>,
}

struct Node<F: Element> {
    // Creation order. Parents always have smaller ids than children, so
    // descending id order is a valid reverse topological order.
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<F>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<F>>,
}

/// Dense row-major tensor participating in reverse-mode differentiation.
///
/// Cloning is cheap (reference counted). Tensors are immutable; parameter
/// updates happen on the owning store between steps, which then mints
/// fresh leaves for the next forward pass.
pub struct Tensor<F: Element>(Rc<Node<F>>);

impl<F: Element> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Element> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.grad_fn.as_ref().map(|g| g.op).unwrap_or("leaf");
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &op)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<F: Element>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

impl<F: Element> Tensor<F> {
    fn leaf(data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return crate::error::shape_err(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            );
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Rc::new(data),
            requires_grad,
            grad_fn: None,
        })))
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), false)
    }

    /// Leaf that receives a gradient during [`Tensor::backward`].
    pub fn param(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![F::zero(); numel(shape)], shape.to_vec(), false).expect("consistent shape")
    }

    pub fn full(shape: &[usize], value: F) -> Result<Self> {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: F) -> Result<Self> {
        Self::leaf(vec![value], vec![1], false)
    }

    /// Records the result of a primitive. The backward closure is kept only
    /// when some parent participates in differentiation.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<F>,
        shape: Vec<usize>,
        parents: Vec<Tensor<F>>,
        backward: impl Fn(&BackwardArgs<'_, F>) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{op}");
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            parents,
            backward: Box::new(backward),
        });
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Rc::new(data),
            requires_grad,
            grad_fn,
        })))
    }

    /// Same buffer, new shape, no copy.
    pub(crate) fn share_with_shape(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        backward: impl Fn(&BackwardArgs<'_, F>) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Self {
        let requires_grad = self.requires_grad();
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            parents: vec![self.clone()],
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Rc::clone(&self.0.data),
            requires_grad,
            grad_fn,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the primitive that produced this tensor (`"leaf"` for inputs).
    pub fn op_name(&self) -> &'static str {
        self.0.grad_fn.as_ref().map(|g| g.op).unwrap_or("leaf")
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return crate::error::shape_err("item", format!("shape {:?} is not a scalar", self.shape()));
        }
        Ok(self.0.data[0])
    }

    /// Copy cut from the tape.
    pub fn detach(&self) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: Rc::clone(&self.0.data),
            requires_grad: false,
            grad_fn: None,
        }))
    }

    /// Reverse-mode sweep from a scalar loss. Every reachable tensor that
    /// requires a gradient ends up with exactly one accumulated entry.
    pub fn backward(&self) -> Result<Gradients<F>> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { grads });
        }

        let mut nodes: HashMap<u64, Tensor<F>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                stack.extend(gf.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            nodes.insert(t.id(), t);
        }
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        grads.insert(self.id(), vec![F::one()]);
        let mut leaf_grads = HashMap::new();
        for id in order {
            let t = &nodes[&id];
            let Some(g) = grads.remove(&id) else { continue };
            let Some(gf) = &t.0.grad_fn else {
                leaf_grads.insert(id, g);
                continue;
            };
            let args = BackwardArgs {
                grad: &g,
                output: t.data(),
                parents: &gf.parents,
            };
            let parent_grads = (gf.backward)(&args);
            debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.op);
            for (p, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel(), "gradient size from {}", gf.op);
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradients of the leaves reached by a backward sweep, keyed by tensor.
#[derive(Debug, Default)]
pub struct Gradients<F> {
    grads: HashMap<u64, Vec<F>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient of `t`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor<F>) -> Vec<F> {
        self.get(t).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); t.numel()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

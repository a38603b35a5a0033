use std::collections::BTreeMap;

use super::conv::{conv2d_backward, conv2d_forward, transposed_conv2d_backward, transposed_conv2d_forward};
use super::pool::{maxpool2d_backward, maxpool2d_forward};
use super::{AutodiffError, ConvSpec, PoolSpec, Real, Result, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv { x: Var, w: Var, b: Var, spec: ConvSpec },
    ConvT { x: Var, w: Var, b: Var, spec: ConvSpec },
    MaxPool { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Concat { a: Var, b: Var },
}

struct Node<T> {
    op: Op,
    /// `None` for parameters, whose values live in the parameter store.
    value: Option<Tensor4<T>>,
}

/// Records a forward pass over a borrowed parameter store so it can be
/// differentiated in reverse. Biases are stored as `(channels, 1, 1, 1)`.
pub struct Tape<'p, T> {
    params: &'p [Tensor4<T>],
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass: one tensor per parameter (zero when the
/// parameter was not used) and one per input variable.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Tensor4<T>>,
    inputs: BTreeMap<Var, Tensor4<T>>,
}

impl<T> Gradients<T> {
    pub fn input(&self, v: Var) -> Option<&Tensor4<T>> {
        self.inputs.get(&v)
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p [Tensor4<T>]) -> Self {
        Tape { params, nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Option<Tensor4<T>>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (_, Some(t)) => t,
            (Op::Param(i), None) => &self.params[*i],
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn input(&mut self, x: Tensor4<T>) -> Var {
        self.push(Op::Input, Some(x))
    }

    pub fn param(&mut self, id: usize) -> Result<Var> {
        if id >= self.params.len() {
            return Err(AutodiffError::ShapeMismatch(format!("parameter {id} of {}", self.params.len())));
        }
        Ok(self.push(Op::Param(id), None))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), Some(self.value(b).data()), &spec)?;
        Ok(self.push(Op::Conv { x, w, b, spec }, Some(y)))
    }

    pub fn transposed_conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let y = transposed_conv2d_forward(self.value(x), self.value(w), Some(self.value(b).data()), &spec)?;
        Ok(self.push(Op::ConvT { x, w, b, spec }, Some(y)))
    }

    pub fn maxpool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let p = maxpool2d_forward(self.value(x), &spec)?;
        Ok(self.push(Op::MaxPool { x, argmax: p.argmax }, Some(p.output)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu { x }, Some(y))
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.dims();
        let [nb, cb, hb, wb] = tb.dims();
        if (n, h, w) != (nb, hb, wb) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "cannot concatenate {:?} with {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..n {
            data.extend_from_slice(ta.item(i));
            data.extend_from_slice(tb.item(i));
        }
        let y = Tensor4::from_vec([n, ca + cb, h, w], data)?;
        Ok(self.push(Op::Concat { a, b }, Some(y)))
    }

    /// Propagates `grad` (the loss gradient with respect to `output`) back
    /// through every recorded operation.
    pub fn backward(mut self, output: Var, grad: Tensor4<T>) -> Result<Gradients<T>> {
        if grad.dims() != self.value(output).dims() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "seed gradient {:?} for output {:?}",
                grad.dims(),
                self.value(output).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(grad);
        let mut out = Gradients {
            params: self.params.iter().map(|p| Tensor4::zeros(p.dims())).collect(),
            inputs: BTreeMap::new(),
        };

        fn acc<T: Real>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
            match slot {
                Some(s) => s.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => out.params[*id].add_assign(&g),
                Op::Conv { x, w, b, spec } => {
                    let cg = conv2d_backward(&g, self.value(*x), self.value(*w), spec)?;
                    let bdims = self.value(*b).dims();
                    acc(&mut grads[x.0], cg.input);
                    acc(&mut grads[w.0], cg.weights);
                    acc(&mut grads[b.0], Tensor4::from_vec(bdims, cg.bias)?);
                }
                Op::ConvT { x, w, b, spec } => {
                    let cg = transposed_conv2d_backward(&g, self.value(*x), self.value(*w), spec)?;
                    let bdims = self.value(*b).dims();
                    acc(&mut grads[x.0], cg.input);
                    acc(&mut grads[w.0], cg.weights);
                    acc(&mut grads[b.0], Tensor4::from_vec(bdims, cg.bias)?);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = maxpool2d_backward(&g, argmax, self.value(*x).dims())?;
                    acc(&mut grads[x.0], gx);
                }
                Op::Relu { x } => {
                    let y = self.nodes[i].value.as_ref().expect("relu output");
                    let mut gx = g;
                    for (gv, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                        if yv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::Concat { a, b } => {
                    let (da, db) = (self.value(*a).dims(), self.value(*b).dims());
                    let (la, lb) = (da[1] * da[2] * da[3], db[1] * db[2] * db[3]);
                    let mut ga = Vec::with_capacity(la * da[0]);
                    let mut gb = Vec::with_capacity(lb * db[0]);
                    for chunk in g.data().chunks_exact(la + lb) {
                        ga.extend_from_slice(&chunk[..la]);
                        gb.extend_from_slice(&chunk[la..]);
                    }
                    acc(&mut grads[a.0], Tensor4::from_vec(da, ga)?);
                    acc(&mut grads[b.0], Tensor4::from_vec(db, gb)?);
                }
            }
            // Activations are no longer needed once their gradient has been
            // consumed by every consumer, which all have higher indices.
            if !matches!(self.nodes[i].op, Op::Param(_) | Op::Input) {
                self.nodes[i].value = None;
            }
        }
        Ok(out)
    }
}

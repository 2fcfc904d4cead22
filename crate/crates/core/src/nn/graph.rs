//! Reverse-mode tape over the primitives in [`super::ops`].

use std::rc::Rc;

use super::ops::{self, ResizePlan};
use super::params::{ParamId, ParamStore};
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    PixelShuffle(Var, usize),
    Resize(Var, Rc<ResizePlan>),
    MaxPool(Var, Vec<u32>),
    Rows(Vec<Var>),
    Weighted(Vec<(Var, T)>),
    /// Scalar with precomputed local gradients w.r.t. its inputs.
    Custom(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    /// Indexed by [`ParamId`]; `None` for frozen or unreachable parameters.
    pub params: Vec<Option<Tensor<T>>>,
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. a leaf created with [`Graph::leaf`] and `requires_grad`.
    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g)
    }
}

/// Records a forward computation so that gradients can be pulled back.
///
/// Parameters are borrowed from a [`ParamStore`]; frozen parameters
/// receive no gradient, and subgraphs that depend only on frozen
/// parameters and constant leaves are skipped during backward.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.value(*id),
            _ => self.nodes[v.0].value.as_ref().expect("recorded value"),
        }
    }

    /// Records a constant or differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let needs_grad = !self.params.get(id).frozen;
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d_raw(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::Conv { x, w, b, stride, pad }, out, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(Op::Relu(x), out, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, needs))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Op::Concat(xs.to_vec()), out, needs))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(self.value(x), r)?;
        let needs = self.needs(x);
        Ok(self.push(Op::PixelShuffle(x, r), out, needs))
    }

    pub fn resize(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let (_, h, w) = self.value(x).chw()?;
        if (h, w) == out_hw {
            return Ok(x);
        }
        let plan = Rc::new(ResizePlan::new((h, w), out_hw)?);
        let out = plan.apply(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(Op::Resize(x, plan), out, needs))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = ops::max_pool2(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(Op::MaxPool(x, arg), out, needs))
    }

    /// Flattens `(A * cols, H, W)` maps into one `(sum H*W*A, cols)` matrix.
    ///
    /// Row order is map, then cell `y`, then cell `x`, then anchor.
    pub fn rows(&mut self, xs: &[Var], cols: usize) -> Result<Var> {
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            let (c, h, w) = t.chw()?;
            if c % cols != 0 {
                return Err(shape_err!("head output with {c} channels is not a multiple of {cols}"));
            }
            let plane = h * w;
            for cell in 0..plane {
                for ch in 0..c {
                    data.push(t.data()[ch * plane + cell]);
                }
            }
        }
        if data.is_empty() {
            return Err(invalid!("no head outputs to flatten"));
        }
        let n = data.len() / cols;
        let out = Tensor::from_vec(&[n, cols], data)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Op::Rows(xs.to_vec()), out, needs))
    }

    /// `sum_i w_i * x_i` over scalar-shaped or equally shaped values.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| invalid!("empty weighted sum"))?;
        let mut out = Tensor::zeros(self.value(first).shape());
        for &(v, w) in terms {
            let scaled = self.value(v).map(|x| x * w);
            out.add_assign(&scaled)?;
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Op::Weighted(terms.to_vec()), out, needs))
    }

    /// Records a scalar whose local gradients were computed by the caller.
    pub fn custom_scalar(&mut self, value: T, local_grads: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &local_grads {
            if g.shape() != self.value(*v).shape() {
                return Err(shape_err!("custom gradient shape {:?} mismatches input", g.shape()));
            }
        }
        let needs = local_grads.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(Op::Custom(local_grads), Tensor::scalar(value), needs))
    }

    /// Mean absolute difference between two equally shaped values.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::l1_loss(self.value(a), self.value(b))?;
        let ga = ops::l1_loss_grad(self.value(a), self.value(b))?;
        let gb = ga.map(|v| -v);
        self.custom_scalar(value, vec![(a, ga), (b, gb)])
    }

    /// `sum(x * weights)`; used to reduce tensors to a scalar for checks.
    pub fn project(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let value = self.value(x).zip_map(weights, |a, b| a * b)?.sum();
        self.custom_scalar(value, vec![(x, weights.clone())])
    }

    /// Pulls back the gradient of a scalar-valued `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Gradients { params: vec![None; self.params.len()], leaves: Vec::new() };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, d: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| -> Result<()> {
                if !self.needs(v) {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => out.leaves.push((Var(i), g)),
                Op::Param(id) => out.params[id.0] = Some(g),
                Op::Conv { x, w, b, stride, pad } => {
                    let want = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                    let cg = ops::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad, want)?;
                    if let Some(dx) = cg.dx {
                        send(*x, dx, &mut grads)?;
                    }
                    if let Some(dw) = cg.dw {
                        send(*w, dw, &mut grads)?;
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        send(*b, db, &mut grads)?;
                    }
                }
                Op::Relu(x) => {
                    let y = node.value.as_ref().expect("relu value");
                    let d = g.zip_map(y, |gv, yv| if yv > T::zero() { gv } else { T::zero() })?;
                    send(*x, d, &mut grads)?;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads)?;
                    send(*b, g, &mut grads)?;
                }
                Op::Concat(xs) => {
                    let mut start = 0;
                    for &v in xs {
                        let c = self.value(v).shape()[0];
                        if self.needs(v) {
                            send(v, g.channels(start, c)?, &mut grads)?;
                        }
                        start += c;
                    }
                }
                Op::PixelShuffle(x, r) => send(*x, ops::pixel_unshuffle(&g, *r)?, &mut grads)?,
                Op::Resize(x, plan) => send(*x, plan.backward(&g)?, &mut grads)?,
                Op::MaxPool(x, arg) => {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    let dd = d.data_mut();
                    for (&a, &gv) in arg.iter().zip(g.data()) {
                        dd[a as usize] += gv;
                    }
                    send(*x, d, &mut grads)?;
                }
                Op::Rows(xs) => {
                    let mut row = 0;
                    let gd = g.data();
                    for &v in xs {
                        let shape = self.value(v).shape().to_vec();
                        let (c, h, w) = (shape[0], shape[1], shape[2]);
                        let plane = h * w;
                        if self.needs(v) {
                            let mut d = vec![T::zero(); c * plane];
                            for cell in 0..plane {
                                for ch in 0..c {
                                    d[ch * plane + cell] = gd[row + cell * c + ch];
                                }
                            }
                            send(v, Tensor::from_vec(&shape, d)?, &mut grads)?;
                        }
                        row += c * plane;
                    }
                }
                Op::Weighted(terms) => {
                    for &(v, w) in terms {
                        send(v, g.map(|x| x * w), &mut grads)?;
                    }
                }
                Op::Custom(local) => {
                    let up = g.data()[0];
                    for (v, lg) in local {
                        send(*v, lg.map(|x| x * up), &mut grads)?;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        let b = store.add("b", Tensor::full(&[1], 0.5)).unwrap();
        store.set_frozen("b", true);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(&[1, 2, 2], 3.0));
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.conv2d(x, wv, Some(bv), 1, 0).unwrap();
        let loss = g.project(y, &Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        assert_eq!(g.value(loss).data()[0], 4.0 * 6.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[12.0]);
        assert!(grads.param(b).is_none());
    }

    #[test]
    fn rows_and_back() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.leaf(Tensor::from_fn_chw(4, 1, 2, |c, _, x| (c * 10 + x) as f64), true);
        let r = g.rows(&[a], 2).unwrap();
        assert_eq!(g.value(r).shape(), &[4, 2]);
        // cell 0: channels 0..4 = anchors (0,1),(2,3)
        assert_eq!(&g.value(r).data()[..4], &[0.0, 10.0, 20.0, 30.0]);
        let wts = Tensor::from_vec(&[4, 2], (0..8).map(f64::from).collect()).unwrap();
        let loss = g.project(r, &wts).unwrap();
        let grads = g.backward(loss).unwrap();
        let d = grads.leaf(a).unwrap();
        assert_eq!(d.at(1, 0, 0), 1.0);
        assert_eq!(d.at(0, 0, 1), 4.0);
    }
}

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::{check_shape, Real, Tensor};
use crate::error::{shape_err, FtnError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Single-use tape: record a forward pass, call [`Graph::backward`] once,
/// then read leaf gradients.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
    screen_non_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Non-finite screening after every op is on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            param_vars: HashMap::new(),
            screen_non_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_screening(mut self, on: bool) -> Self {
        self.screen_non_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(value, requires_grad, None)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.param(id);
        let v = self.leaf(p.value.clone(), p.requires_grad, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// Records the output of an operation.
    pub fn record(
        &mut self,
        op: impl Backward<T> + 'static,
        inputs: Vec<Var>,
        value: Tensor<T>,
    ) -> Result<Var> {
        if self.screen_non_finite && !value.is_finite() {
            return Err(FtnError::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a one-element output. Gradients are retained for
    /// leaves only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> =
                node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let gin = op.backward(&ins, &node.value, &g, &needs)?;
            for ((v, gi), need) in node.inputs.iter().zip(gin).zip(needs) {
                let (true, Some(gi)) = (need, gi) else { continue };
                if gi.shape() != self.nodes[v.0].value.shape() {
                    return shape_err(format!(
                        "{}: gradient shape {:?} for input of shape {:?}",
                        op.name(),
                        gi.shape(),
                        self.nodes[v.0].value.shape()
                    ));
                }
                match &mut grads[v.0] {
                    Some(acc) => add_assign(acc, &gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        self.leaf_grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter that requires one. Parameters
    /// that were bound but not reached get a zero gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Tensor<T>)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let id = n.param?;
            if !n.requires_grad {
                return None;
            }
            let g = self
                .leaf_grads
                .get(i)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
            Some((id, g))
        })
    }

    fn unary(&mut self, x: Var, op: impl Backward<T> + 'static, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.record(op, vec![x], value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.record(AddOp, vec![a, b], value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.record(SubOp, vec![a, b], value)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.record(MulOp, vec![a, b], value)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, ScaleOp(c), |v| v * c)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err(format!("scalar_mul: factor has shape {:?}", self.shape(s)));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        self.record(ScalarMulOp, vec![s, x], value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ReluOp, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, SigmoidOp, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.record(ReshapeOp, vec![x], value)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return shape_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in xs.iter().zip(&sizes) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        self.record(ConcatOp { axis, sizes }, xs.to_vec(), value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.record(SumOp { scale: T::one() }, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).numel() as f64);
        let s: T = self.value(x).data().iter().copied().sum();
        self.record(SumOp { scale: T::one() / n }, vec![x], Tensor::scalar(s / n))
    }

    /// `Σ wᵢ·xᵢ` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return shape_err(format!("weighted_sum: term has shape {:?}", self.shape(v)));
            }
            total += T::of(w) * self.value(v).item();
        }
        let weights = terms.iter().map(|&(_, w)| T::of(w)).collect();
        let inputs = terms.iter().map(|&(v, _)| v).collect();
        self.record(WeightedSumOp { weights }, inputs, Tensor::scalar(total))
    }
}

pub(crate) fn add_assign<T: Real>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

struct AddOp;
impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

struct SubOp;
impl<T: Real> Backward<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])
    }
}

struct MulOp;
impl<T: Real> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let ga = needs[0].then(|| zip_map(g, ins[1], |d, y| d * y));
        let gb = needs[1].then(|| zip_map(g, ins[0], |d, x| d * x));
        Ok(vec![ga, gb])
    }
}

struct ScaleOp<T>(T);
impl<T: Real> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let c = self.0;
        Ok(vec![Some(g.map(|v| v * c))])
    }
}

struct ScalarMulOp;
impl<T: Real> Backward<T> for ScalarMulOp {
    fn name(&self) -> &'static str {
        "scalar_mul"
    }
    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (s, x) = (ins[0].item(), ins[1]);
        let gs = needs[0].then(|| {
            let dot: T = g.data().iter().zip(x.data()).map(|(&d, &v)| d * v).sum();
            Tensor::from_parts(ins[0].shape().to_vec(), vec![dot])
        });
        let gx = needs[1].then(|| g.map(|d| d * s));
        Ok(vec![gs, gx])
    }
}

struct ReluOp;
impl<T: Real> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(zip_map(g, ins[0], |d, x| if x > T::zero() { d } else { T::zero() }))])
    }
}

struct SigmoidOp;
impl<T: Real> Backward<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(zip_map(g, out, |d, y| d * y * (T::one() - y)))])
    }
}

struct ReshapeOp;
impl<T: Real> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        check_shape(ins[0].shape())?;
        Ok(vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), g.data().to_vec()))])
    }
}

struct ConcatOp {
    axis: usize,
    sizes: Vec<usize>,
}
impl<T: Real> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = g.shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let total: usize = self.sizes.iter().sum();
        let mut out = Vec::with_capacity(ins.len());
        let mut start = 0;
        for (i, &sz) in self.sizes.iter().enumerate() {
            if needs[i] {
                let mut data = Vec::with_capacity(outer * sz * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    data.extend_from_slice(&g.data()[base..base + sz * inner]);
                }
                out.push(Some(Tensor::from_parts(ins[i].shape().to_vec(), data)));
            } else {
                out.push(None);
            }
            start += sz;
        }
        Ok(out)
    }
}

struct SumOp<T> {
    scale: T,
}
impl<T: Real> Backward<T> for SumOp<T> {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(ins[0].shape(), g.item() * self.scale))])
    }
}

struct WeightedSumOp<T> {
    weights: Vec<T>,
}
impl<T: Real> Backward<T> for WeightedSumOp<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(self
            .weights
            .iter()
            .zip(ins)
            .zip(needs)
            .map(|((&w, x), &n)| n.then(|| Tensor::full(x.shape(), g.item() * w)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_through_shared_input() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn concat_splits_gradient_back() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn(&[2, 1, 2], |i| i as f64), true);
        let b = g.input(Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64), true);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(&g.value(c).data()[..6], &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0]);
        let w = g.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn constants_do_not_record_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.scale(a, 3.0).unwrap();
        assert!(!g.requires_grad(b));
        g.backward(b).unwrap();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2]), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn scalar_mul_routes_both_ways() {
        let mut g = Graph::<f64>::new();
        let s = g.input(Tensor::scalar(3.0), true);
        let x = g.input(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let y = g.scalar_mul(s, x).unwrap();
        let t = g.sum(y).unwrap();
        g.backward(t).unwrap();
        assert_eq!(g.grad(s).unwrap().data(), &[3.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn screening_flags_non_finite() {
        let mut g = Graph::<f64>::new().with_screening(true);
        let x = g.input(Tensor::scalar(1e300), true);
        assert!(matches!(g.scale(x, 1e300), Err(FtnError::NonFinite(_))));
    }
}

//! Reverse-mode autodiff over dynamic-dimension arrays.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; [`Tensor`] is a
//! cheap handle into the tape. Calling [`Tensor::backward`] on a scalar node
//! walks the tape in reverse and accumulates gradients for every leaf that was
//! created from a named parameter or a constant. The engine is scalar-generic:
//! training runs in f32, gradient checks run the same graph in f64.

mod conv;
mod params;
mod resize;

pub use conv::{conv2d_backward, conv2d_forward, conv_out_size};
pub use params::ParamStore;
pub use resize::resize_matrix;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, ArrayD, Axis, Ix1, Ix4, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

type BackFn<F> = Box<dyn Fn(&ArrayD<F>, &mut GradBuf<F>)>;

struct TapeInner<F: Scalar> {
    values: Vec<Rc<ArrayD<F>>>,
    backs: Vec<Option<BackFn<F>>>,
    grad_enabled: bool,
    param_nodes: HashMap<String, usize>,
}

/// Records one forward pass. Dropping the tape frees all intermediates.
pub struct Tape<F: Scalar> {
    inner: Rc<RefCell<TapeInner<F>>>,
}

impl<F: Scalar> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// Tape that records values only; backward closures are never built.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                backs: Vec::new(),
                grad_enabled,
                param_nodes: HashMap::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    /// Runs `f` with gradient recording disabled, restoring the previous mode after.
    pub fn scoped_no_grad<T>(&self, f: impl FnOnce() -> T) -> T {
        let prev = {
            let mut inner = self.inner.borrow_mut();
            std::mem::replace(&mut inner.grad_enabled, false)
        };
        let out = f();
        self.inner.borrow_mut().grad_enabled = prev;
        out
    }

    fn push(&self, value: ArrayD<F>, back: Option<BackFn<F>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        let keep = inner.grad_enabled;
        inner.values.push(Rc::new(value));
        inner.backs.push(if keep { back } else { None });
        id
    }

    fn tensor(&self, node: usize) -> Tensor<F> {
        Tensor {
            tape: self.clone(),
            node,
        }
    }

    /// Inserts a constant leaf (no gradient flows past it, but a gradient
    /// *for* it is still accumulated, which tests use).
    pub fn constant(&self, value: ArrayD<F>) -> Tensor<F> {
        let id = self.push(value, None);
        self.tensor(id)
    }

    pub fn scalar(&self, v: F) -> Tensor<F> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Fetches a named parameter from `store` as a leaf node. Repeated fetches
    /// of the same name on one tape return the same node, so gradients from
    /// several uses accumulate in one slot.
    pub fn param(&self, store: &ParamStore<F>, name: &str) -> Result<Tensor<F>> {
        if let Some(&node) = self.inner.borrow().param_nodes.get(name) {
            return Ok(self.tensor(node));
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::StructuralMismatch {
                name: name.to_string(),
                detail: "parameter missing from store".to_string(),
            })?
            .clone();
        let id = self.push(value, None);
        self.inner
            .borrow_mut()
            .param_nodes
            .insert(name.to_string(), id);
        Ok(self.tensor(id))
    }
}

/// Handle to one node of a [`Tape`].
pub struct Tensor<F: Scalar> {
    tape: Tape<F>,
    node: usize,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            node: self.node,
        }
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients<F: Scalar> {
    slots: Vec<Option<ArrayD<F>>>,
    param_nodes: HashMap<String, usize>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for an arbitrary leaf tensor, if one was accumulated.
    pub fn of(&self, t: &Tensor<F>) -> Option<&ArrayD<F>> {
        self.slots.get(t.node).and_then(|s| s.as_ref())
    }

    /// Gradient for a named parameter fetched through [`Tape::param`].
    pub fn param(&self, name: &str) -> Option<&ArrayD<F>> {
        self.param_nodes
            .get(name)
            .and_then(|&n| self.slots[n].as_ref())
    }

    /// Moves all parameter gradients out into a name-keyed map.
    pub fn into_param_map(mut self) -> HashMap<String, ArrayD<F>> {
        let mut out = HashMap::new();
        for (name, &node) in &self.param_nodes {
            if let Some(g) = self.slots[node].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for s in self.slots.iter().flatten() {
            for v in s.iter() {
                m = m.max(Scalar::to_f64(*v).abs());
            }
        }
        m
    }
}

pub(crate) struct GradBuf<F: Scalar> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> GradBuf<F> {
    fn accum(&mut self, idx: usize, g: ArrayD<F>) {
        match &mut self.slots[idx] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<ArrayD<F>> {
        Rc::clone(&self.tape.inner.borrow().values[self.node])
    }

    /// Owned copy of the forward value.
    pub fn array(&self) -> ArrayD<F> {
        self.value().as_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a zero-dimensional (scalar) tensor.
    pub fn item(&self) -> F {
        let v = self.value();
        debug_assert!(v.ndim() == 0, "item() on non-scalar tensor");
        *v.iter().next().expect("scalar tensor")
    }

    fn unary(&self, value: ArrayD<F>, back: Option<BackFn<F>>) -> Tensor<F> {
        let id = self.tape.push(value, back);
        self.tape.tensor(id)
    }

    /// Node indices are only meaningful within one tape; mixing handles from
    /// two tapes would silently read the wrong values.
    fn assert_same_tape(&self, other: &Tensor<F>) {
        debug_assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "tensors from different tapes"
        );
    }

    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        self.assert_same_tape(other);
        let (a, b) = (self.value(), other.value());
        debug_assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let value = a.as_ref() + b.as_ref();
        let (pa, pb) = (self.node, other.node);
        self.unary(
            value,
            Some(Box::new(move |g, buf| {
                buf.accum(pa, g.clone());
                buf.accum(pb, g.clone());
            })),
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        self.assert_same_tape(other);
        let (a, b) = (self.value(), other.value());
        debug_assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let value = a.as_ref() - b.as_ref();
        let (pa, pb) = (self.node, other.node);
        self.unary(
            value,
            Some(Box::new(move |g, buf| {
                buf.accum(pa, g.clone());
                buf.accum(pb, g.mapv(|v| -v));
            })),
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        self.assert_same_tape(other);
        let (a, b) = (self.value(), other.value());
        debug_assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let value = a.as_ref() * b.as_ref();
        let (pa, pb) = (self.node, other.node);
        self.unary(
            value,
            Some(Box::new(move |g, buf| {
                buf.accum(pa, g * b.as_ref());
                buf.accum(pb, g * a.as_ref());
            })),
        )
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let value = self.value().mapv(|v| v * c);
        let pa = self.node;
        self.unary(
            value,
            Some(Box::new(move |g, buf| buf.accum(pa, g.mapv(|v| v * c)))),
        )
    }

    pub fn offset(&self, c: F) -> Tensor<F> {
        let value = self.value().mapv(|v| v + c);
        let pa = self.node;
        self.unary(value, Some(Box::new(move |g, buf| buf.accum(pa, g.clone()))))
    }

    /// `1 - x`, the transmission complement.
    pub fn one_minus(&self) -> Tensor<F> {
        self.scale(-F::one()).offset(F::one())
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let y = self.value().mapv(|v| F::one() / (F::one() + (-v).exp()));
        let y_rc = Rc::new(y.clone());
        let pa = self.node;
        self.unary(
            y,
            Some(Box::new(move |g, buf| {
                let dy = y_rc.mapv(|s| s * (F::one() - s));
                buf.accum(pa, g * &dy);
            })),
        )
    }

    pub fn leaky_relu(&self, slope: F) -> Tensor<F> {
        let x = self.value();
        let value = x.mapv(|v| if v > F::zero() { v } else { v * slope });
        let pa = self.node;
        self.unary(
            value,
            Some(Box::new(move |g, buf| {
                let mask = x.mapv(|v| if v > F::zero() { F::one() } else { slope });
                buf.accum(pa, g * &mask);
            })),
        )
    }

    pub fn relu(&self) -> Tensor<F> {
        self.leaky_relu(F::zero())
    }

    /// Clamp to [0, 1]; gradient passes inside the (inclusive) bounds.
    pub fn clamp01(&self) -> Tensor<F> {
        let x = self.value();
        let value = x.mapv(|v| v.max(F::zero()).min(F::one()));
        let pa = self.node;
        self.unary(
            value,
            Some(Box::new(move |g, buf| {
                let mask = x.mapv(|v| {
                    if v >= F::zero() && v <= F::one() {
                        F::one()
                    } else {
                        F::zero()
                    }
                });
                buf.accum(pa, g * &mask);
            })),
        )
    }

    /// Identity value, but backpropagation stops here.
    pub fn detach(&self) -> Tensor<F> {
        let id = self.tape.push(self.array(), None);
        self.tape.tensor(id)
    }

    /// 2-D convolution on NCHW input with OIHW weights.
    pub fn conv2d(
        &self,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<F> {
        let x = self.value();
        let w = weight.value();
        let xv = x.view().into_dimensionality::<Ix4>().expect("conv2d: input not NCHW");
        let wv = w.view().into_dimensionality::<Ix4>().expect("conv2d: weight not OIHW");
        let bval = bias.map(|b| b.value());
        let bview = bval
            .as_ref()
            .map(|b| b.view().into_dimensionality::<Ix1>().expect("conv2d: bias not 1-D"));
        let out = conv::conv2d_forward(&xv, &wv, bview.as_ref(), stride, pad, groups);
        let (px, pw, pb) = (self.node, weight.node, bias.map(|b| b.node));
        let back: BackFn<F> = Box::new(move |g, buf| {
            let gv = g.view().into_dimensionality::<Ix4>().expect("conv2d: grad not NCHW");
            let xv = x.view().into_dimensionality::<Ix4>().unwrap();
            let wv = w.view().into_dimensionality::<Ix4>().unwrap();
            let (gx, gw, gb) = conv::conv2d_backward(&xv, &wv, &gv, stride, pad, groups);
            buf.accum(px, gx.into_dyn());
            buf.accum(pw, gw.into_dyn());
            if let Some(pb) = pb {
                buf.accum(pb, gb.into_dyn());
            }
        });
        self.unary(out.into_dyn(), Some(back))
    }

    /// Bilinear resize of an NCHW tensor to a target spatial size.
    pub fn bilinear(&self, out_h: usize, out_w: usize) -> Tensor<F> {
        let x = self.value();
        let (n, c, h, w) = {
            let d = x.shape();
            debug_assert_eq!(d.len(), 4, "bilinear: input not NCHW");
            (d[0], d[1], d[2], d[3])
        };
        if h == out_h && w == out_w {
            // still a node so graph structure stays uniform
            let pa = self.node;
            return self.unary(
                x.as_ref().clone(),
                Some(Box::new(move |g, buf| buf.accum(pa, g.clone()))),
            );
        }
        let rh = Rc::new(resize::resize_matrix::<F>(h, out_h));
        let rw = Rc::new(resize::resize_matrix::<F>(w, out_w));
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, out_h, out_w]));
        {
            let xv = x.view().into_dimensionality::<Ix4>().unwrap();
            let mut ov = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let plane = xv.slice(s![ni, ci, .., ..]);
                    let tmp = rh.dot(&plane);
                    ov.slice_mut(s![ni, ci, .., ..]).assign(&tmp.dot(&rw.t()));
                }
            }
        }
        let pa = self.node;
        let (rh_b, rw_b) = (Rc::clone(&rh), Rc::clone(&rw));
        self.unary(
            out,
            Some(Box::new(move |g, buf| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array4::<F>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = gv.slice(s![ni, ci, .., ..]);
                        let tmp = rh_b.t().dot(&plane);
                        gx.slice_mut(s![ni, ci, .., ..]).assign(&tmp.dot(rw_b.as_ref()));
                    }
                }
                buf.accum(pa, gx.into_dyn());
            })),
        )
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&self, other: &Tensor<F>) -> Tensor<F> {
        self.assert_same_tape(other);
        let (a, b) = (self.value(), other.value());
        let ca = a.shape()[1];
        let value = concatenate(Axis(1), &[a.view(), b.view()]).expect("concat: shape mismatch");
        let (pa, pb) = (self.node, other.node);
        self.unary(
            value,
            Some(Box::new(move |g, buf| {
                let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                let gb = g.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
                buf.accum(pa, ga);
                buf.accum(pb, gb);
            })),
        )
    }

    /// Global average pool: NCHW -> NC11.
    pub fn global_avg_pool(&self) -> Tensor<F> {
        let x = self.value();
        let d = x.shape().to_vec();
        debug_assert_eq!(d.len(), 4);
        let (h, w) = (d[2], d[3]);
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let pooled = x
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|v| v * inv)
            .insert_axis(Axis(2))
            .insert_axis(Axis(3));
        let pa = self.node;
        self.unary(
            pooled,
            Some(Box::new(move |g, buf| {
                let gb = g
                    .broadcast(IxDyn(&[d[0], d[1], h, w]))
                    .expect("gap: broadcast")
                    .mapv(|v| v * inv);
                buf.accum(pa, gb);
            })),
        )
    }

    /// Multiply an NCHW tensor by per-channel gates of shape NC11.
    pub fn scale_channels(&self, gate: &Tensor<F>) -> Tensor<F> {
        self.assert_same_tape(gate);
        let (x, gv) = (self.value(), gate.value());
        let d = x.shape().to_vec();
        let gshape = gv.shape();
        debug_assert!(
            gshape == [d[0], d[1], 1, 1],
            "scale_channels: gate shape {:?} vs input {:?}",
            gshape,
            d
        );
        let gb = gv.broadcast(IxDyn(&d)).expect("gate broadcast").to_owned();
        let value = x.as_ref() * &gb;
        let (px, pg) = (self.node, gate.node);
        self.unary(
            value,
            Some(Box::new(move |g, buf| {
                let gate_b = gv.broadcast(IxDyn(&d)).unwrap().to_owned();
                buf.accum(px, g * &gate_b);
                let gg = (g * x.as_ref())
                    .sum_axis(Axis(3))
                    .sum_axis(Axis(2))
                    .insert_axis(Axis(2))
                    .insert_axis(Axis(3));
                buf.accum(pg, gg);
            })),
        )
    }

    /// Repeat an N1HW tensor to NCHW.
    pub fn repeat_channels(&self, c: usize) -> Tensor<F> {
        let x = self.value();
        let d = x.shape().to_vec();
        debug_assert_eq!(d[1], 1, "repeat_channels: input must have one channel");
        let value = x
            .broadcast(IxDyn(&[d[0], c, d[2], d[3]]))
            .expect("repeat broadcast")
            .to_owned();
        let pa = self.node;
        self.unary(
            value,
            Some(Box::new(move |g, buf| {
                let gs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                buf.accum(pa, gs);
            })),
        )
    }

    /// Mean over all elements, producing a scalar node.
    pub fn mean_all(&self) -> Tensor<F> {
        let x = self.value();
        let n = x.len();
        let inv = F::from_f64(1.0 / n as f64);
        let m = x.iter().fold(F::zero(), |acc, &v| acc + v) * inv;
        let shape = x.shape().to_vec();
        let pa = self.node;
        self.unary(
            ArrayD::from_elem(IxDyn(&[]), m),
            Some(Box::new(move |g, buf| {
                let g0 = *g.iter().next().unwrap() * inv;
                buf.accum(pa, ArrayD::from_elem(IxDyn(&shape), g0));
            })),
        )
    }

    /// Mean absolute difference against `other`, producing a scalar node.
    pub fn l1_distance(&self, other: &Tensor<F>) -> Tensor<F> {
        self.assert_same_tape(other);
        let (a, b) = (self.value(), other.value());
        debug_assert_eq!(a.shape(), b.shape(), "l1: shape mismatch");
        let n = a.len();
        let inv = F::from_f64(1.0 / n as f64);
        let total = a
            .iter()
            .zip(b.iter())
            .fold(F::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let (pa, pb) = (self.node, other.node);
        self.unary(
            ArrayD::from_elem(IxDyn(&[]), total * inv),
            Some(Box::new(move |g, buf| {
                let g0 = *g.iter().next().unwrap() * inv;
                let mut ga = ArrayD::<F>::zeros(a.raw_dim());
                ndarray::Zip::from(&mut ga).and(a.as_ref()).and(b.as_ref()).for_each(
                    |o, &x, &y| {
                        *o = if x > y {
                            g0
                        } else if x < y {
                            -g0
                        } else {
                            F::zero()
                        };
                    },
                );
                buf.accum(pb, ga.mapv(|v| -v));
                buf.accum(pa, ga);
            })),
        )
    }

    /// Backward pass from a scalar node. Leaf gradients are retained,
    /// interior gradients are dropped as soon as they have been consumed.
    pub fn backward(&self) -> Gradients<F> {
        let inner = self.tape.inner.borrow();
        assert!(
            inner.values[self.node].ndim() == 0,
            "backward() requires a scalar root"
        );
        let mut buf = GradBuf {
            slots: vec![None; inner.values.len()],
        };
        buf.slots[self.node] = Some(ArrayD::from_elem(IxDyn(&[]), F::one()));
        for i in (0..=self.node).rev() {
            if inner.backs[i].is_some() && buf.slots[i].is_some() {
                let g = buf.slots[i].take().unwrap();
                (inner.backs[i].as_ref().unwrap())(&g, &mut buf);
            }
        }
        Gradients {
            slots: buf.slots,
            param_nodes: inner.param_nodes.clone(),
        }
    }
}

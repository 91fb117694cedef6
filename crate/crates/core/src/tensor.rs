//! Reverse-mode automatic differentiation on dynamic-dimension arrays.
//!
//! A [`Tensor`] is a reference-counted graph node holding an `ArrayD<T>`.
//! Operations record a backward closure only when some input requires a
//! gradient, so inference builds no graph at all. `backward()` runs a
//! topological sweep and accumulates gradients into leaf tensors.
//!
//! The graph is single-threaded by design (one training thread owns the
//! parameters); heavy kernels below it go through BLAS.

use crate::gemm::{matmul2, Scalar};
use ndarray::{ArrayD, Axis, IxDyn, Slice};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub type Arr<T> = ArrayD<T>;

thread_local! {
    static NEXT_ID: RefCell<u64> = const { RefCell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|n| {
        let mut n = n.borrow_mut();
        *n += 1;
        *n
    })
}

type BackFn<T> = Box<dyn Fn(&Arr<T>, &[Tensor<T>])>;

struct Node<T: Scalar> {
    id: u64,
    data: RefCell<Arr<T>>,
    grad: RefCell<Option<Arr<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackFn<T>>,
}

pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.node.id,
            self.shape(),
            self.node.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    /// Constant leaf: participates in computation but never gets a gradient.
    pub fn constant(data: Arr<T>) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Trainable leaf: gradients accumulate here during `backward`.
    pub fn param(data: Arr<T>) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::constant(Arr::from_elem(IxDyn(&[]), v))
    }

    fn from_op(data: Arr<T>, parents: Vec<Tensor<T>>, backward: BackFn<T>) -> Self {
        if parents.iter().any(|p| p.node.requires_grad) {
            Tensor {
                node: Rc::new(Node {
                    id: fresh_id(),
                    data: RefCell::new(data),
                    grad: RefCell::new(None),
                    requires_grad: true,
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Tensor::constant(data)
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot of the value. Cheap relative to the ops that produced it.
    pub fn value(&self) -> Arr<T> {
        self.node.data.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> T {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        *d.iter().next().unwrap()
    }

    /// Cut the graph: same values, no gradient path.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::constant(self.value())
    }

    pub fn grad(&self) -> Option<Arr<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// In-place data update for optimizers. Only sensible on leaves.
    pub fn update_data(&self, f: impl FnOnce(&mut Arr<T>)) {
        f(&mut self.node.data.borrow_mut());
    }

    fn acc_grad(&self, g: Arr<T>) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar output. Gradients of all reachable
    /// leaves with `requires_grad` end up in their `grad` slots.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        // Topological order via iterative DFS.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut state: HashMap<u64, u8> = HashMap::new(); // 1 = open, 2 = done
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx == 0 {
                match state.get(&node.node.id) {
                    Some(_) => continue,
                    None => {
                        state.insert(node.node.id, 1);
                    }
                }
            }
            if child_idx < node.node.parents.len() {
                let next = node.node.parents[child_idx].clone();
                stack.push((node.clone(), child_idx + 1));
                if !state.contains_key(&next.node.id) && next.node.requires_grad {
                    stack.push((next, 0));
                }
            } else {
                state.insert(node.node.id, 2);
                order.push(node);
            }
        }
        self.acc_grad(Arr::from_elem(self.node.data.borrow().raw_dim(), T::one()));
        for node in order.iter().rev() {
            let grad = if node.node.backward.is_some() {
                node.node.grad.borrow_mut().take()
            } else {
                None
            };
            if let (Some(g), Some(back)) = (grad, node.node.backward.as_ref()) {
                back(&g, &node.node.parents);
            }
        }
    }
}

/// Numpy-style broadcast shape of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "cannot broadcast {:?} with {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum a broadcast gradient back down to the original shape.
pub fn unbroadcast<T: Scalar>(mut g: Arr<T>, shape: &[usize]) -> Arr<T> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if sd == 1 && gd != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn bcast<T: Scalar>(a: &Arr<T>, shape: &[usize]) -> Arr<T> {
    if a.shape() == shape {
        a.clone()
    } else {
        a.broadcast(IxDyn(shape)).unwrap().to_owned()
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        let shape = broadcast_shape(&sa, &sb);
        let out = bcast(&self.node.data.borrow(), &shape) + &bcast(&other.node.data.borrow(), &shape);
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps| {
                ps[0].acc_grad(unbroadcast(g.clone(), &sa));
                ps[1].acc_grad(unbroadcast(g.clone(), &sb));
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        let shape = broadcast_shape(&sa, &sb);
        let out = bcast(&self.node.data.borrow(), &shape) - &bcast(&other.node.data.borrow(), &shape);
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps| {
                ps[0].acc_grad(unbroadcast(g.clone(), &sa));
                ps[1].acc_grad(unbroadcast(g.mapv(|v| -v), &sb));
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        let shape = broadcast_shape(&sa, &sb);
        let av = bcast(&self.node.data.borrow(), &shape);
        let bv = bcast(&other.node.data.borrow(), &shape);
        let out = &av * &bv;
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps| {
                ps[0].acc_grad(unbroadcast(g * &bv, &sa));
                ps[1].acc_grad(unbroadcast(g * &av, &sb));
            }),
        )
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        let shape = broadcast_shape(&sa, &sb);
        let av = bcast(&self.node.data.borrow(), &shape);
        let bv = bcast(&other.node.data.borrow(), &shape);
        let out = &av / &bv;
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps| {
                ps[0].acc_grad(unbroadcast(g / &bv, &sa));
                let gb = g * &av / (&bv * &bv);
                ps[1].acc_grad(unbroadcast(gb.mapv(|v| -v), &sb));
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let out = self.node.data.borrow().mapv(|v| v + c);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| ps[0].acc_grad(g.clone())),
        )
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let out = self.node.data.borrow().mapv(|v| v * c);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| ps[0].acc_grad(g.mapv(|v| v * c))),
        )
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

impl<T: Scalar> Tensor<T> {
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        dfdx_from_in_out: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let x = self.value();
        let out = x.mapv(&f);
        let y = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let mut dg = g.clone();
                ndarray::Zip::from(&mut dg)
                    .and(&x)
                    .and(&y)
                    .for_each(|gv, &xv, &yv| *gv = *gv * dfdx_from_in_out(xv, yv));
                ps[0].acc_grad(dg);
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(
            |v| v.sqrt(),
            |_, y| T::one() / (T::cast_from(2.0) * y),
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|v| v * v, |x, _| T::cast_from(2.0) * x)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::cast_from(0.7978845608028654); // sqrt(2/pi)
        let a = T::cast_from(0.044715);
        let half = T::cast_from(0.5);
        self.unary(
            move |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()),
            move |x, _| {
                let u = c * (x + a * x * x * x);
                let t = u.tanh();
                let sech2 = T::one() - t * t;
                half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::cast_from(3.0) * a * x * x)
            },
        )
    }

    /// Clamp with pass-through gradient strictly inside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.unary(
            move |v| v.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl<T: Scalar> Tensor<T> {
    pub fn sum_all(&self) -> Tensor<T> {
        let shape = self.shape();
        let s = self.node.data.borrow().sum();
        Tensor::from_op(
            Arr::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(move |g, ps| {
                let gv = *g.iter().next().unwrap();
                ps[0].acc_grad(Arr::from_elem(IxDyn(&shape), gv));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::cast_from(self.len() as f64);
        self.sum_all().mul_scalar(T::one() / n)
    }

    /// Sum along one axis, keeping it as size 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor<T> {
        let shape = self.shape();
        let out = self
            .node
            .data
            .borrow()
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                ps[0].acc_grad(g.broadcast(IxDyn(&shape)).unwrap().to_owned());
            }),
        )
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Tensor<T> {
        let n = T::cast_from(self.shape()[axis] as f64);
        self.sum_axis_keep(axis).mul_scalar(T::one() / n)
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let orig = self.shape();
        let data = self.node.data.borrow();
        let std = data.as_standard_layout();
        let out = std
            .to_owned()
            .into_shape(IxDyn(shape))
            .expect("reshape: incompatible sizes");
        drop(data);
        let orig2 = orig.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let gg = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape(IxDyn(&orig2))
                    .unwrap();
                ps[0].acc_grad(gg);
            }),
        )
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        let orig = self.shape();
        let out = self
            .node
            .data
            .borrow()
            .broadcast(IxDyn(shape))
            .expect("broadcast_to: incompatible")
            .to_owned();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| ps[0].acc_grad(unbroadcast(g.clone(), &orig))),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<T> {
        let axes = axes.to_vec();
        let out = self
            .node
            .data
            .borrow()
            .clone()
            .permuted_axes(IxDyn(&axes))
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let gg = g
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                ps[0].acc_grad(gg);
            }),
        )
    }

    pub fn concat(axis: usize, parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let datas: Vec<Arr<T>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = datas.iter().map(|d| d.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let sizes: Vec<usize> = datas.iter().map(|d| d.shape()[axis]).collect();
        Tensor::from_op(
            out,
            parts.to_vec(),
            Box::new(move |g, ps| {
                let mut start = 0isize;
                for (i, &sz) in sizes.iter().enumerate() {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + sz as isize), 1))
                        .to_owned();
                    ps[i].acc_grad(piece);
                    start += sz as isize;
                }
            }),
        )
    }

    pub fn slice_axis_op(&self, axis: usize, start: usize, end: usize) -> Tensor<T> {
        let shape = self.shape();
        let out = self
            .node
            .data
            .borrow()
            .slice_axis(Axis(axis), Slice::new(start as isize, Some(end as isize), 1))
            .to_owned();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let mut full = Arr::<T>::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(axis), Slice::new(start as isize, Some(end as isize), 1))
                    .assign(g);
                ps[0].acc_grad(full);
            }),
        )
    }

    /// Gather sub-arrays along `axis` by index (with repetition allowed).
    pub fn select_op(&self, axis: usize, indices: &[usize]) -> Tensor<T> {
        let shape = self.shape();
        let idx = indices.to_vec();
        let out = self.node.data.borrow().select(Axis(axis), &idx);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let mut full = Arr::<T>::zeros(IxDyn(&shape));
                for (gi, &si) in idx.iter().enumerate() {
                    let mut dst = full.index_axis_mut(Axis(axis), si);
                    dst += &g.index_axis(Axis(axis), gi);
                }
                ps[0].acc_grad(full);
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Contractions
// ---------------------------------------------------------------------------

impl<T: Scalar> Tensor<T> {
    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D");
        let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let out = matmul2(a2, b2).into_dyn();
        let (av, bv) = (a.clone(), b.clone());
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                // dA = g @ B^T
                let (m, k) = a2.dim();
                let n = b2.dim().1;
                let mut da = ndarray::Array2::<T>::zeros((m, k));
                T::gemm(
                    false,
                    true,
                    m,
                    k,
                    n,
                    T::one(),
                    g2.as_slice().unwrap(),
                    n,
                    b2.to_owned().as_slice().unwrap(),
                    n,
                    T::zero(),
                    da.as_slice_mut().unwrap(),
                    k,
                );
                // dB = A^T @ g
                let mut db = ndarray::Array2::<T>::zeros((k, n));
                T::gemm(
                    true,
                    false,
                    k,
                    n,
                    m,
                    T::one(),
                    a2.to_owned().as_slice().unwrap(),
                    k,
                    g2.as_slice().unwrap(),
                    n,
                    T::zero(),
                    db.as_slice_mut().unwrap(),
                    n,
                );
                ps[0].acc_grad(da.into_dyn());
                ps[1].acc_grad(db.into_dyn());
            }),
        )
    }

    /// Batched matmul: [B, M, K] x [B, K, N] -> [B, M, N].
    pub fn bmm(&self, other: &Tensor<T>) -> Tensor<T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ndim(), 3);
        assert_eq!(b.ndim(), 3);
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert_eq!(bs, bs2);
        assert_eq!(k, k2);
        let mut out = Arr::<T>::zeros(IxDyn(&[bs, m, n]));
        {
            let a_s = a.as_slice().unwrap();
            let b_s = b.as_slice().unwrap();
            let o_s = out.as_slice_mut().unwrap();
            for i in 0..bs {
                T::gemm(
                    false,
                    false,
                    m,
                    n,
                    k,
                    T::one(),
                    &a_s[i * m * k..(i + 1) * m * k],
                    k,
                    &b_s[i * k * n..(i + 1) * k * n],
                    n,
                    T::zero(),
                    &mut o_s[i * m * n..(i + 1) * m * n],
                    n,
                );
            }
        }
        let (av, bv) = (a.clone(), b.clone());
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps| {
                let g_s = g.as_slice().unwrap();
                let a_s = av.as_slice().unwrap();
                let b_s = bv.as_slice().unwrap();
                let mut da = Arr::<T>::zeros(IxDyn(&[bs, m, k]));
                let mut db = Arr::<T>::zeros(IxDyn(&[bs, k, n]));
                {
                    let da_s = da.as_slice_mut().unwrap();
                    let db_s = db.as_slice_mut().unwrap();
                    for i in 0..bs {
                        T::gemm(
                            false,
                            true,
                            m,
                            k,
                            n,
                            T::one(),
                            &g_s[i * m * n..(i + 1) * m * n],
                            n,
                            &b_s[i * k * n..(i + 1) * k * n],
                            n,
                            T::zero(),
                            &mut da_s[i * m * k..(i + 1) * m * k],
                            k,
                        );
                        T::gemm(
                            true,
                            false,
                            k,
                            n,
                            m,
                            T::one(),
                            &a_s[i * m * k..(i + 1) * m * k],
                            k,
                            &g_s[i * m * n..(i + 1) * m * n],
                            n,
                            T::zero(),
                            &mut db_s[i * k * n..(i + 1) * k * n],
                            n,
                        );
                    }
                }
                ps[0].acc_grad(da);
                ps[1].acc_grad(db);
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM) and nearest upsampling, NCHW layout
// ---------------------------------------------------------------------------

/// Fill `cols` (shape [C*kh*kw, oh*ow]) from one image [C, H, W] with zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row * oh * ow + oy * ow..row * oh * ow + oy * ow + ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &x[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    if stride == 1 {
                        let ix0 = kj as isize - pad as isize;
                        for ox in 0..ow {
                            let ix = ix0 + ox as isize;
                            dst[ox] = if ix >= 0 && ix < w as isize {
                                src_row[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            dst[ox] = if ix >= 0 && ix < w as isize {
                                src_row[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column matrix back into an image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row * oh * ow + oy * ow..row * oh * ow + oy * ow + ow];
                    let dst_row =
                        &mut dx[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-D convolution: x [B, C, H, W], weight [OC, C, kh, kw], bias [OC].
    pub fn conv2d(&self, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
        let x = self.value();
        let wt = weight.value();
        let bv = bias.value();
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, wc, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        assert_eq!(c, wc, "conv2d channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let x_s = x.as_slice().unwrap();
        let w_s = wt.as_slice().unwrap();
        let mut out = Arr::<T>::zeros(IxDyn(&[b, oc, oh, ow]));
        {
            let o_s = out.as_slice_mut().unwrap();
            let mut cols = vec![T::zero(); ckk * oh * ow];
            for bi in 0..b {
                im2col(
                    &x_s[bi * c * h * w..(bi + 1) * c * h * w],
                    c, h, w, kh, kw, stride, pad, oh, ow, &mut cols,
                );
                // [OC, CKK] x [CKK, OHW] -> [OC, OHW]
                T::gemm(
                    false, false, oc, oh * ow, ckk,
                    T::one(), w_s, ckk, &cols, oh * ow,
                    T::zero(), &mut o_s[bi * oc * oh * ow..(bi + 1) * oc * oh * ow], oh * ow,
                );
            }
        }
        for bi in 0..b {
            for oci in 0..oc {
                let bias_v = bv[oci];
                out.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), oci)
                    .mapv_inplace(|v| v + bias_v);
            }
        }
        let xc = x.clone();
        let wtc = wt.clone();
        Tensor::from_op(
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, ps| {
                let g_s = g.as_slice().unwrap();
                let x_s = xc.as_slice().unwrap();
                let w_s = wtc.as_slice().unwrap();
                let mut dw = Arr::<T>::zeros(IxDyn(&[oc, c, kh, kw]));
                let mut dx = Arr::<T>::zeros(IxDyn(&[b, c, h, w]));
                let mut db = Arr::<T>::zeros(IxDyn(&[oc]));
                {
                    let dw_s = dw.as_slice_mut().unwrap();
                    let dx_s = dx.as_slice_mut().unwrap();
                    let mut cols = vec![T::zero(); ckk * oh * ow];
                    let mut dcols = vec![T::zero(); ckk * oh * ow];
                    for bi in 0..b {
                        let gb = &g_s[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
                        // dW += g_b [OC, OHW] x cols^T [OHW, CKK]
                        im2col(
                            &x_s[bi * c * h * w..(bi + 1) * c * h * w],
                            c, h, w, kh, kw, stride, pad, oh, ow, &mut cols,
                        );
                        T::gemm(
                            false, true, oc, ckk, oh * ow,
                            T::one(), gb, oh * ow, &cols, oh * ow,
                            T::one(), dw_s, ckk,
                        );
                        // dcols = W^T [CKK, OC] x g_b [OC, OHW]
                        T::gemm(
                            true, false, ckk, oh * ow, oc,
                            T::one(), w_s, ckk, gb, oh * ow,
                            T::zero(), &mut dcols, oh * ow,
                        );
                        col2im(
                            &dcols,
                            c, h, w, kh, kw, stride, pad, oh, ow,
                            &mut dx_s[bi * c * h * w..(bi + 1) * c * h * w],
                        );
                    }
                }
                {
                    let db_s = db.as_slice_mut().unwrap();
                    for bi in 0..b {
                        for oci in 0..oc {
                            let base = (bi * oc + oci) * oh * ow;
                            let mut acc = T::zero();
                            for v in &g_s[base..base + oh * ow] {
                                acc += *v;
                            }
                            db_s[oci] += acc;
                        }
                    }
                }
                ps[0].acc_grad(dx);
                ps[1].acc_grad(dw);
                ps[2].acc_grad(db);
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling on [B, C, H, W].
    pub fn upsample2x(&self) -> Tensor<T> {
        let x = self.value();
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = Arr::<T>::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        {
            let x_s = x.as_slice().unwrap();
            let o_s = out.as_slice_mut().unwrap();
            for bc in 0..b * c {
                for y in 0..2 * h {
                    let sy = y / 2;
                    for xo in 0..2 * w {
                        o_s[bc * 4 * h * w + y * 2 * w + xo] = x_s[bc * h * w + sy * w + xo / 2];
                    }
                }
            }
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let g_s = g.as_slice().unwrap();
                let mut dx = Arr::<T>::zeros(IxDyn(&[b, c, h, w]));
                {
                    let d_s = dx.as_slice_mut().unwrap();
                    for bc in 0..b * c {
                        for y in 0..2 * h {
                            let sy = y / 2;
                            for xo in 0..2 * w {
                                d_s[bc * h * w + sy * w + xo / 2] +=
                                    g_s[bc * 4 * h * w + y * 2 * w + xo];
                            }
                        }
                    }
                }
                ps[0].acc_grad(dx);
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

impl<T: Scalar> Tensor<T> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        let m = self.max_along_detached(axis);
        let e = self.sub(&m).exp();
        let denom = e.sum_axis_keep(axis);
        e.div(&denom)
    }

    /// Numerically stable log-sum-exp along `axis` (keepdims).
    pub fn logsumexp(&self, axis: usize) -> Tensor<T> {
        let m = self.max_along_detached(axis);
        let e = self.sub(&m).exp();
        e.sum_axis_keep(axis).ln().add(&m)
    }

    /// Per-lane max as a constant (keepdims). Used as a shift; carries no grad.
    fn max_along_detached(&self, axis: usize) -> Tensor<T> {
        let data = self.node.data.borrow();
        let m = data.fold_axis(Axis(axis), T::neg_infinity(), |acc, &v| acc.max(v));
        Tensor::constant(m.insert_axis(Axis(axis)))
    }

    /// Layer norm over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Tensor<T> {
        let axis = self.shape().len() - 1;
        let mu = self.mean_axis_keep(axis);
        let centered = self.sub(&mu);
        let var = centered.square().mean_axis_keep(axis);
        let norm = centered.div(&var.add_scalar(eps).sqrt());
        norm.mul(gamma).add(beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn t(a: Arr<f64>) -> Tensor<f64> {
        Tensor::param(a)
    }

    #[test]
    fn add_broadcast_backward() {
        let a = t(array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let b = t(array![10.0, 20.0].into_dyn());
        let c = a.add(&b).sum_all();
        c.backward();
        assert_eq!(a.grad().unwrap(), Arr::from_elem(IxDyn(&[2, 2]), 1.0));
        assert_eq!(b.grad().unwrap(), array![2.0, 2.0].into_dyn());
    }

    #[test]
    fn mul_grad() {
        let a = t(array![2.0, 3.0].into_dyn());
        let b = t(array![5.0, 7.0].into_dyn());
        a.mul(&b).sum_all().backward();
        assert_eq!(a.grad().unwrap(), array![5.0, 7.0].into_dyn());
        assert_eq!(b.grad().unwrap(), array![2.0, 3.0].into_dyn());
    }

    #[test]
    fn matmul_grad_shapes() {
        let a = t(Arr::from_elem(IxDyn(&[3, 4]), 0.5));
        let b = t(Arr::from_elem(IxDyn(&[4, 2]), 1.5));
        a.matmul(&b).sum_all().backward();
        assert_eq!(a.grad().unwrap().shape(), &[3, 4]);
        assert_eq!(b.grad().unwrap().shape(), &[4, 2]);
        // dA = ones(3,2) @ B^T => each entry = sum of B row = 1.5*2
        assert!(a.grad().unwrap().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = t(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]].into_dyn());
        let s = a.softmax(1);
        let v = s.value();
        for r in 0..2 {
            let row: f64 = (0..3).map(|c| v[[r, c]]).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let a = t(array![1.0, 2.0].into_dyn());
        let d = a.detach();
        let loss = d.mul(&d).sum_all();
        loss.backward();
        assert!(a.grad().is_none());
    }

    #[test]
    fn diamond_graph_accumulates() {
        // y = x*x + x*x reuses x twice through two paths
        let x = t(array![3.0].into_dyn());
        let y = x.square().add(&x.square()).sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap(), array![12.0].into_dyn());
    }

    #[test]
    fn select_scatter_accumulates_repeats() {
        let x = t(array![[1.0], [2.0], [3.0]].into_dyn());
        let y = x.select_op(0, &[0, 0, 2]).sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap(), array![[2.0], [0.0], [1.0]].into_dyn());
    }

    #[test]
    fn logsumexp_matches_naive() {
        let a = t(array![[1.0, 2.0, 3.0]].into_dyn());
        let lse = a.logsumexp(1);
        let expect = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((lse.value()[[0, 0]] - expect).abs() < 1e-12);
    }
}

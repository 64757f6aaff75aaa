//! Dense tensors with a tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records operations in creation order, which is already a
//! topological order, so `backward` is one reverse sweep. Parameters enter a
//! graph by name from a [`ParamStore`]; gradients come back keyed the same way.
//! Broadcasting is limited to a trailing-axis bias or scale; anything else
//! goes through an explicit [`Graph::expand`].

use std::collections::BTreeMap;
use std::fmt::{self, Debug, Display};
use std::fs;
use std::io::{Read, Write};
use std::iter::Sum;
use std::path::Path;

use num_traits::Float;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Element type of a tensor.
pub trait Scalar: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a b + beta * c` for row/column-strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

// The slice lengths are checked by the callers in this module (see `gemm`),
// which is what makes the raw-pointer calls below sound.
impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major `c[m,n] (+)= a[m,k] b[k,n]`, with either operand optionally
/// read transposed. Shapes are those of the logical (post-transpose) operands.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::contract(format!("reshape: {:?} -> {shape:?} changes size", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// Row-major strides-free transpose of axes `i < j`, as plain data.
    fn transposed(&self, i: usize, j: usize) -> Self {
        let s = &self.shape;
        let outer: usize = s[..i].iter().product();
        let di = s[i];
        let mid: usize = s[i + 1..j].iter().product();
        let dj = s[j];
        let inner: usize = s[j + 1..].iter().product();
        let mut data = Vec::with_capacity(self.data.len());
        for o in 0..outer {
            for b in 0..dj {
                for m in 0..mid {
                    for a in 0..di {
                        let src = (((o * di + a) * mid + m) * dj + b) * inner;
                        data.extend_from_slice(&self.data[src..src + inner]);
                    }
                }
            }
        }
        let mut shape = s.clone();
        shape.swap(i, j);
        Self { shape, data }
    }
}

/// Handle to a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    MulTrailing(Var, Var),
    Expand { x: Var, axis: usize, n: usize },
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Transpose { x: Var, i: usize, j: usize },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax(Var),
    Silu(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    RmsNorm { x: Var, scale: Var, inv_rms: Vec<T> },
    Sinusoidal { t: Var, freqs: Vec<T> },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Mse(Var, Var),
    WeightedMse { a: Var, b: Var, w: Var },
    GatherRows { table: Var, ids: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, va), (kb, vb))| ka == kb && va.shape == vb.shape)
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm.
    pub fn norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Adds zero gradients for store entries the graph never touched.
    pub fn fill_missing(&mut self, store: &ParamStore<T>) {
        for (name, p) in store.iter() {
            self.grads.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&p.shape));
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            g.data.iter_mut().for_each(|v| *v = *v * factor);
        }
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

const NORM_EPS: f64 = 1e-6;

/// A recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Registers parameter `name` from `store` as a differentiable leaf. A name
    /// registered twice yields the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&(_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor { shape: x.shape.clone(), data };
        Ok(self.push(value, op, &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = &self.nodes[a.0].value;
        let value = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() };
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |v| v + c, Op::AddScalar(a))
    }

    fn trailing(&self, op: &str, x: Var, b: Var) -> Result<usize> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        match (xs.last(), bs) {
            (Some(&n), [m]) if n == *m => Ok(n),
            _ => Err(shape_err(op, xs, bs)),
        }
    }

    /// `x[.., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.trailing("add_bias", x, bias)?;
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value.data;
        let data = xv.data.iter().enumerate().map(|(i, &v)| v + bv[i % n]).collect();
        let value = Tensor { shape: xv.shape.clone(), data };
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x[.., n] * s[n]`.
    pub fn mul_trailing(&mut self, x: Var, s: Var) -> Result<Var> {
        let n = self.trailing("mul_trailing", x, s)?;
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value.data;
        let data = xv.data.iter().enumerate().map(|(i, &v)| v * sv[i % n]).collect();
        let value = Tensor { shape: xv.shape.clone(), data };
        Ok(self.push(value, Op::MulTrailing(x, s), &[x, s]))
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the input.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis > xs.len() {
            return Err(Error::contract(format!("expand: axis {axis} out of range for {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis..].iter().product();
        let src = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = xs;
        shape.insert(axis, n);
        Ok(self.push(Tensor { shape, data }, Op::Expand { x, axis, n }, &[x]))
    }

    /// `x[.., k] @ w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (k, n) = match (xs.last(), ws.as_slice()) {
            (Some(&k), &[k2, n]) if k == k2 => (k, n),
            _ => return Err(shape_err("matmul", &xs, &ws)),
        };
        let m = self.nodes[x.0].value.len() / k.max(1);
        let mut data = vec![T::zero(); m * n];
        gemm(m, k, n, &self.nodes[x.0].value.data, false, &self.nodes[w.0].value.data, false, &mut data, false);
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = n;
        Ok(self.push(Tensor { shape, data }, Op::MatMul(x, w), &[x, w]))
    }

    /// Batched `a[b, m, k] @ b[b, k, n]`, or `a @ b^T` with `b[b, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (as_.as_slice(), bs.as_slice()) {
            (&[p, m, k], &[q, r, s]) if p == q => {
                let (k2, n) = if trans_b { (s, r) } else { (r, s) };
                if k != k2 {
                    return Err(shape_err("bmm", &as_, &bs));
                }
                (p, m, k, n)
            }
            _ => return Err(shape_err("bmm", &as_, &bs)),
        };
        let mut data = vec![T::zero(); batch * m * n];
        let (ad, bd) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                trans_b,
                &mut data[i * m * n..],
                false,
            );
        }
        Ok(self.push(Tensor { shape: vec![batch, m, n], data }, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var, i: usize, j: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        let (i, j) = (i.min(j), i.max(j));
        if j >= rank {
            return Err(Error::contract(format!("transpose: axes ({i}, {j}) out of range for {:?}", self.shape(x))));
        }
        if i == j {
            return Ok(x);
        }
        let value = self.nodes[x.0].value.transposed(i, j);
        Ok(self.push(value, Op::Transpose { x, i, j }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::contract("concat: no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::contract(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.nodes[v.0].value.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor { shape, data }, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::contract(format!("slice: {start}..{} on axis {axis} of {xs:?}", start + len)));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let src = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || sizes.iter().sum::<usize>() != xs[axis] {
            return Err(Error::contract(format!("split: sizes {sizes:?} do not cover axis {axis} of {xs:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    fn last_dim(&self, op: &str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::contract(format!("{op}: needs a non-empty last axis, got {:?}", self.shape(x)))),
        }
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim("softmax", x)?;
        let xv = &self.nodes[x.0].value;
        let mut data = xv.data.clone();
        for row in data.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v / (T::one() + (-v).exp()), Op::Silu(x))
    }

    /// Normalizes the last axis to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim("layer_norm", x)?;
        let xv = &self.nodes[x.0].value;
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(NORM_EPS);
        let mut data = xv.data.clone();
        let mut inv_std = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        Ok(self.push(value, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// `x / rms(x) * scale` over the last axis.
    pub fn rms_norm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let n = self.trailing("rms_norm", x, scale)?;
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[scale.0].value.data;
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(NORM_EPS);
        let mut data = xv.data.clone();
        let mut inv_rms = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / nf;
            let inv = T::one() / (ms + eps).sqrt();
            row.iter_mut().zip(sv).for_each(|(v, &s)| *v = *v * inv * s);
            inv_rms.push(inv);
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        Ok(self.push(value, Op::RmsNorm { x, scale, inv_rms }, &[x, scale]))
    }

    /// `t[b] -> [cos(t f_i), sin(t f_i)]` with `f_i = max_period^(-i / half)`.
    pub fn sinusoidal_embed(&mut self, t: Var, dim: usize, max_period: f64) -> Result<Var> {
        let ts = self.shape(t).to_vec();
        if ts.len() != 1 || dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::contract(format!("sinusoidal_embed: needs t of shape [b] and even dim, got {ts:?}, {dim}")));
        }
        let half = dim / 2;
        let freqs: Vec<T> = (0..half)
            .map(|i| T::from_f64((-(max_period.ln()) * i as f64 / half as f64).exp()))
            .collect();
        let tv = &self.nodes[t.0].value.data;
        let mut data = Vec::with_capacity(ts[0] * dim);
        for &tt in tv {
            data.extend(freqs.iter().map(|&f| (tt * f).cos()));
            data.extend(freqs.iter().map(|&f| (tt * f).sin()));
        }
        let value = Tensor { shape: vec![ts[0], dim], data };
        Ok(self.push(value, Op::Sinusoidal { t, freqs }, &[t]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.data.iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let total: T = v.data.iter().copied().sum();
        let mean = total / T::from_f64(v.len().max(1) as f64);
        self.push(Tensor::scalar(mean), Op::Mean(x), &[x])
    }

    /// Mean over `axis`, which is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(Error::contract(format!("mean_axis: axis {axis} invalid for {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let d = xs[axis];
        let src = &self.nodes[x.0].value.data;
        let inv = T::one() / T::from_f64(d as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for r in 0..d {
                let base = (o * d + r) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[base + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = xs;
        shape.remove(axis);
        Ok(self.push(Tensor { shape, data }, Op::MeanAxis { x, axis }, &[x]))
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let total: T = x.data.iter().zip(&y.data).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let value = Tensor::scalar(total / T::from_f64(x.len().max(1) as f64));
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    /// `mean_i w_i * mean_j (a_ij - b_ij)^2` with `w` of shape `[batch]`.
    pub fn weighted_mse(&mut self, a: Var, b: Var, w: Var) -> Result<Var> {
        self.same_shape("weighted_mse", a, b)?;
        let (x, y, wv) = (&self.nodes[a.0].value, &self.nodes[b.0].value, &self.nodes[w.0].value);
        if x.shape.first() != Some(&wv.len()) || wv.shape.len() != 1 {
            return Err(shape_err("weighted_mse", &x.shape, &wv.shape));
        }
        let per = x.len() / wv.len().max(1);
        let mut total = T::zero();
        for (i, &wi) in wv.data.iter().enumerate() {
            let s: T = x.data[i * per..(i + 1) * per]
                .iter()
                .zip(&y.data[i * per..(i + 1) * per])
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum();
            total = total + wi * s;
        }
        let value = Tensor::scalar(total / T::from_f64(x.len().max(1) as f64));
        Ok(self.push(value, Op::WeightedMse { a, b, w }, &[a, b, w]))
    }

    /// Rows of `table[v, d]` selected by `ids`, shape `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let (v, d) = match ts.as_slice() {
            &[v, d] => (v, d),
            _ => return Err(Error::contract(format!("gather_rows: table must be 2-D, got {ts:?}"))),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("gather_rows: id {bad} out of range for {v} rows")));
        }
        let src = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor { shape: vec![ids.len(), d], data };
        Ok(self.push(value, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    /// Reverse sweep from a scalar `loss`. Returns a gradient for every
    /// parameter registered in this graph, zeros for those the loss ignores.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let shape = self.shape(*v).to_vec();
            let data = grads[v.0].take().unwrap_or_else(|| vec![T::zero(); self.value(*v).len()]);
            out.insert(name.clone(), Tensor { shape, data });
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.to_vec());
                self.accum(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.to_vec());
                self.accum(grads, *b, || g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                self.accum(grads, *a, || g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                self.accum(grads, *b, || g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::Scale(a, c) => self.accum(grads, *a, || g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(a) => self.accum(grads, *a, || g.to_vec()),
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                self.accum(grads, *x, || g.to_vec());
                self.accum(grads, *b, || {
                    let mut out = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
                    }
                    out
                });
            }
            Op::MulTrailing(x, s) => {
                let sv = &self.value(*s).data;
                let xv = &self.value(*x).data;
                let n = sv.len();
                self.accum(grads, *x, || g.iter().enumerate().map(|(i, &v)| v * sv[i % n]).collect());
                self.accum(grads, *s, || {
                    let mut out = vec![T::zero(); n];
                    for (row, xr) in g.chunks(n).zip(xv.chunks(n)) {
                        for j in 0..n {
                            out[j] = out[j] + row[j] * xr[j];
                        }
                    }
                    out
                });
            }
            Op::Expand { x, axis, n } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis..].iter().product();
                self.accum(grads, *x, || {
                    let mut out = vec![T::zero(); outer * inner];
                    for o in 0..outer {
                        for r in 0..*n {
                            let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                            out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                    out
                });
            }
            Op::MatMul(x, w) => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                let m = xv.len() / k.max(1);
                self.accum(grads, *x, || {
                    let mut out = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, wv, true, &mut out, false);
                    out
                });
                self.accum(grads, *w, || {
                    let mut out = vec![T::zero(); k * n];
                    gemm(k, m, n, xv, true, g, false, &mut out, false);
                    out
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let s = self.shape(*a);
                let (batch, m, k) = (s[0], s[1], s[2]);
                let n = node.value.shape[2];
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                self.accum(grads, *a, || {
                    let mut out = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // da = g b^T  (b stored [k, n]) or g b  (b stored [n, k]).
                        gemm(m, n, k, &g[i * m * n..], false, &bv[i * k * n..], !*trans_b, &mut out[i * m * k..], false);
                    }
                    out
                });
                self.accum(grads, *b, || {
                    let mut out = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        if *trans_b {
                            // db[n, k] = g^T a
                            gemm(n, m, k, &g[i * m * n..], true, &av[i * m * k..], false, &mut out[i * k * n..], false);
                        } else {
                            // db[k, n] = a^T g
                            gemm(k, m, n, &av[i * m * k..], true, &g[i * m * n..], false, &mut out[i * k * n..], false);
                        }
                    }
                    out
                });
            }
            Op::Transpose { x, i, j } => {
                let gt = Tensor { shape: node.value.shape.clone(), data: g.to_vec() };
                self.accum(grads, *x, || gt.transposed(*i, *j).data);
            }
            Op::Reshape(x) => self.accum(grads, *x, || g.to_vec()),
            Op::Concat { xs, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let chunk = self.shape(v)[*axis] * inner;
                    self.accum(grads, v, || {
                        let mut out = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            out.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        out
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let len = node.value.shape[*axis];
                self.accum(grads, *x, || {
                    let mut out = vec![T::zero(); self.value(*x).len()];
                    for o in 0..outer {
                        let dst = (o * xs[*axis] + start) * inner;
                        out[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    out
                });
            }
            Op::Softmax(x) => {
                let n = *node.value.shape.last().expect("non-empty");
                self.accum(grads, *x, || {
                    let mut out = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        out.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
                    }
                    out
                });
            }
            Op::Silu(x) => {
                let xv = &self.value(*x).data;
                self.accum(grads, *x, || {
                    g.iter()
                        .zip(xv)
                        .map(|(&gi, &v)| {
                            let s = T::one() / (T::one() + (-v).exp());
                            gi * s * (T::one() + v * (T::one() - s))
                        })
                        .collect()
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *node.value.shape.last().expect("non-empty");
                let nf = T::from_f64(n as f64);
                self.accum(grads, *x, || {
                    let mut out = Vec::with_capacity(g.len());
                    for ((gr, yr), &inv) in g.chunks(n).zip(y.chunks(n)).zip(inv_std) {
                        let sg: T = gr.iter().copied().sum();
                        let sgy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        out.extend(gr.iter().zip(yr).map(|(&gi, &yi)| inv * (gi - sg / nf - yi * sgy / nf)));
                    }
                    out
                });
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let sv = &self.value(*scale).data;
                let xv = &self.value(*x).data;
                let n = sv.len();
                let nf = T::from_f64(n as f64);
                self.accum(grads, *x, || {
                    let mut out = Vec::with_capacity(g.len());
                    for ((gr, xr), &inv) in g.chunks(n).zip(xv.chunks(n)).zip(inv_rms) {
                        // u = x inv; dL/du = g s; dx = inv (g s - u mean(g s u)).
                        let dot: T = (0..n).map(|j| gr[j] * sv[j] * xr[j] * inv).sum::<T>() / nf;
                        out.extend((0..n).map(|j| inv * (gr[j] * sv[j] - xr[j] * inv * dot)));
                    }
                    out
                });
                self.accum(grads, *scale, || {
                    let mut out = vec![T::zero(); n];
                    for ((gr, xr), &inv) in g.chunks(n).zip(xv.chunks(n)).zip(inv_rms) {
                        for j in 0..n {
                            out[j] = out[j] + gr[j] * xr[j] * inv;
                        }
                    }
                    out
                });
            }
            Op::Sinusoidal { t, freqs } => {
                let half = freqs.len();
                let tv = &self.value(*t).data;
                self.accum(grads, *t, || {
                    tv.iter()
                        .enumerate()
                        .map(|(b, &tt)| {
                            let row = &g[b * 2 * half..(b + 1) * 2 * half];
                            freqs
                                .iter()
                                .enumerate()
                                .map(|(i, &f)| f * (row[half + i] * (tt * f).cos() - row[i] * (tt * f).sin()))
                                .sum()
                        })
                        .collect()
                });
            }
            Op::Sum(x) => self.accum(grads, *x, || vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accum(grads, *x, || vec![g[0] / T::from_f64(n.max(1) as f64); n]);
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let d = xs[*axis];
                let inv = T::one() / T::from_f64(d as f64);
                self.accum(grads, *x, || {
                    let mut out = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        for _ in 0..d {
                            out.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * inv));
                        }
                    }
                    out
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let c = g[0] * T::from_f64(2.0 / av.len().max(1) as f64);
                self.accum(grads, *a, || av.iter().zip(bv).map(|(&p, &q)| c * (p - q)).collect());
                self.accum(grads, *b, || av.iter().zip(bv).map(|(&p, &q)| c * (q - p)).collect());
            }
            Op::WeightedMse { a, b, w } => {
                let (av, bv, wv) = (&self.value(*a).data, &self.value(*b).data, &self.value(*w).data);
                let per = av.len() / wv.len().max(1);
                let c = g[0] * T::from_f64(2.0 / av.len().max(1) as f64);
                let diff = |i: usize| av[i] - bv[i];
                self.accum(grads, *a, || (0..av.len()).map(|i| c * wv[i / per] * diff(i)).collect());
                self.accum(grads, *b, || (0..av.len()).map(|i| -c * wv[i / per] * diff(i)).collect());
                self.accum(grads, *w, || {
                    let inv = g[0] / T::from_f64(av.len().max(1) as f64);
                    (0..wv.len())
                        .map(|k| (k * per..(k + 1) * per).map(|i| diff(i) * diff(i)).sum::<T>() * inv)
                        .collect()
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(*table)[1];
                self.accum(grads, *table, || {
                    let mut out = vec![T::zero(); self.value(*table).len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            out[i * d + j] = out[i * d + j] + g[r * d + j];
                        }
                    }
                    out
                });
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, make: impl FnOnce() -> Vec<T>) {
        if !self.wants(v) {
            return;
        }
        let add = make();
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&add).for_each(|(e, &a)| *e = *e + a),
            slot => *slot = Some(add),
        }
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// Largest `|fd - analytic| / max(|fd|, |analytic|, floor)` seen.
    pub max_rel_error: f64,
    /// Coordinates probed.
    pub checked: usize,
    /// Global L2 norm of the analytic gradient.
    pub grad_norm: f64,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error instead.
pub const FD_FLOOR: f64 = 1e-6;

/// Compares `backward()` against central differences.
///
/// Every coordinate is probed when the store has at most 64 scalars;
/// otherwise 64 coordinates are drawn without replacement using `rng`.
pub fn finite_diff_check<T, F, R>(f: F, store: &ParamStore<T>, h: f64, rng: &mut R) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
    R: Rng + ?Sized,
{
    if !(h > 0.0) {
        return Err(Error::parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        let v = g.value(loss).data[0].as_f64();
        if !v.is_finite() {
            return Err(Error::numerical(format!("objective is not finite ({v})")));
        }
        Ok(v)
    };
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let mut grads = g.backward(loss)?;
    grads.fill_missing(store);

    let coords: Vec<(String, usize)> =
        store.iter().flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i))).collect();
    let picked: Vec<usize> = if coords.len() <= 64 {
        (0..coords.len()).collect()
    } else {
        let mut idx = sample(rng, coords.len(), 64).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut work = store.clone();
    let mut worst = 0.0_f64;
    for &c in &picked {
        let (name, i) = &coords[c];
        let orig = store.get(name)?.data[*i];
        work.get_mut(name)?.data[*i] = T::from_f64(orig.as_f64() + h);
        let up = eval(&work)?;
        work.get_mut(name)?.data[*i] = T::from_f64(orig.as_f64() - h);
        let down = eval(&work)?;
        work.get_mut(name)?.data[*i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grads.get(name).expect("filled").data[*i].as_f64();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    Ok(FdReport { max_rel_error: worst, checked: picked.len(), grad_norm: grads.norm() })
}

// ---------------------------------------------------------------------------
// Checkpoint container

const MAGIC: &[u8; 8] = b"FLCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
struct Array {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

/// Named arrays plus JSON metadata; see `docs/checkpoint.md` for the layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, serde_json::Value>,
    arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        t.data.iter().for_each(|v| v.write_le(&mut bytes));
        self.arrays.insert(name.into(), Array { dtype: T::DTYPE, shape: t.shape.clone(), bytes });
    }

    /// Stores every parameter under `prefix` + name.
    pub fn insert_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn dtype(&self, name: &str) -> Option<DType> {
        self.arrays.get(name).map(|a| a.dtype)
    }

    /// Reads `name`; the stored dtype must be `T`.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let a = self.arrays.get(name).ok_or_else(|| Error::parse(format!("checkpoint has no array `{name}`")))?;
        if a.dtype != T::DTYPE {
            return Err(Error::parse(format!("array `{name}` is {}, requested {}", a.dtype, T::DTYPE)));
        }
        let size = T::DTYPE.size();
        let data = a.bytes.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(a.shape.clone(), data)
    }

    /// Rebuilds a store from every array under `prefix`.
    pub fn get_store<T: Scalar>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for name in self.arrays.keys().filter(|n| n.starts_with(prefix)) {
            store.insert(&name[prefix.len()..], self.get(name)?);
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let e = Entry { name: name.clone(), dtype: a.dtype, shape: a.shape.clone(), offset, len: a.bytes.len() };
                offset += a.bytes.len();
                e
            })
            .collect();
        let header = Header { format_version: CHECKPOINT_VERSION, metadata: self.metadata.clone(), tensors };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.arrays.values() {
            out.extend_from_slice(&a.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::parse("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::parse("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::parse(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        let data = &bytes[16 + hlen..];
        let mut arrays = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if n * e.dtype.size() != e.len {
                return Err(Error::parse(format!("array `{}`: shape {:?} disagrees with {} bytes", e.name, e.shape, e.len)));
            }
            let raw = data
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| Error::parse(format!("array `{}` runs past the end of the file", e.name)))?;
            arrays.insert(e.name, Array { dtype: e.dtype, shape: e.shape, bytes: raw.to_vec() });
        }
        Ok(Self { metadata: header.metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, shape) in entries {
            s.insert(*name, randn(shape, &mut rng));
        }
        s
    }

    /// Runs the FD check with a fixed-seed random projection of the output,
    /// so non-scalar primitives are checked against every output coordinate.
    fn check(
        entries: &[(&str, &[usize])],
        build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    ) -> f64 {
        let s = store(entries, 3);
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let out = build(g, s)?;
            let shape = g.shape(out).to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let proj = g.constant(randn(&shape, &mut rng));
            let prod = g.mul(out, proj)?;
            Ok(g.sum(prod))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        finite_diff_check(f, &s, 1e-5, &mut rng).unwrap().max_rel_error
    }

    #[test]
    fn primitive_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let one = g.constant(Tensor::full(&[2], 1.0));
        let r = g.rms_norm(x, one).unwrap();
        let want = [3.0 / 12.5_f64.sqrt(), 4.0 / 12.5_f64.sqrt()];
        for (a, b) in g.value(r).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!((g.value(r).data()[0] - 0.8485).abs() < 1e-4 && (g.value(r).data()[1] - 1.1314).abs() < 1e-4);
        let z = g.constant(Tensor::scalar(0.0));
        let y = g.silu(z);
        assert_eq!(g.value(y).data()[0], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[7, 13], &mut rng));
        let x = g.scale(x, 30.0);
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(13) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_has_unit_rms_before_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[5, 16], &mut rng));
        let one = g.constant(Tensor::full(&[16], 1.0));
        let r = g.rms_norm(x, one).unwrap();
        for row in g.value(r).data().chunks(16) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_examples() {
        // loss = sum(w x) -> dw = x
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        s.insert("unused", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        let _ = g.param(&s, "unused").unwrap();
        let x = g.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let p = g.mul(w, x).unwrap();
        let l = g.sum(p);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get("w").unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(gr.get("unused").unwrap().data(), &[0.0, 0.0]);

        // mse(w x, y) on one element -> 2 (w x - y) x
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_f64(&[1], &[1.5]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        let x = g.constant(Tensor::from_f64(&[1], &[2.0]).unwrap());
        let y = g.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let p = g.mul(w, x).unwrap();
        let l = g.mse(p, y).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get("w").unwrap().data()[0], 2.0 * (1.5 * 2.0 - 1.0) * 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::<f64>::zeros(&[2]));
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let s = store(&[("w", &[5])], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let quad = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let w = g.param(s, "w")?;
            let sq = g.mul(w, w)?;
            let sq = g.scale(sq, 3.0);
            Ok(g.sum(sq))
        };
        let r = finite_diff_check(quad, &s, 1e-5, &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        let constant = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let _ = g.param(s, "w")?;
            Ok(g.constant(Tensor::scalar(4.2)))
        };
        let r = finite_diff_check(constant, &s, 1e-5, &mut rng).unwrap();
        assert!(r.grad_norm < 1e-12);
    }

    #[test]
    fn fd_rejects_non_finite() {
        let s = store(&[("w", &[2])], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let w = g.param(s, "w")?;
            let l = g.sum(w);
            Ok(g.scale(l, f64::INFINITY))
        };
        assert!(finite_diff_check(f, &s, 1e-5, &mut rng).is_err());
    }

    #[test]
    fn fd_elementwise() {
        let e: &[(&str, &[usize])] = &[("a", &[3, 4]), ("b", &[3, 4])];
        assert!(check(e, |g, s| { let (a, b) = (g.param(s, "a")?, g.param(s, "b")?); g.add(a, b) }) < 1e-6);
        assert!(check(e, |g, s| { let (a, b) = (g.param(s, "a")?, g.param(s, "b")?); g.sub(a, b) }) < 1e-6);
        assert!(check(e, |g, s| { let (a, b) = (g.param(s, "a")?, g.param(s, "b")?); g.mul(a, b) }) < 1e-6);
        assert!(check(e, |g, s| { let a = g.param(s, "a")?; Ok(g.silu(a)) }) < 1e-6);
        assert!(check(e, |g, s| { let a = g.param(s, "a")?; let a = g.scale(a, -1.7); Ok(g.add_scalar(a, 0.3)) }) < 1e-6);
    }

    #[test]
    fn fd_trailing_broadcasts() {
        let e: &[(&str, &[usize])] = &[("x", &[2, 3, 4]), ("b", &[4])];
        assert!(check(e, |g, s| { let (x, b) = (g.param(s, "x")?, g.param(s, "b")?); g.add_bias(x, b) }) < 1e-6);
        assert!(check(e, |g, s| { let (x, b) = (g.param(s, "x")?, g.param(s, "b")?); g.mul_trailing(x, b) }) < 1e-6);
        assert!(check(e, |g, s| { let x = g.param(s, "x")?; g.expand(x, 1, 3) }) < 1e-6);
        assert!(check(e, |g, s| { let x = g.param(s, "x")?; g.mean_axis(x, 1) }) < 1e-6);
    }

    #[test]
    fn fd_matmuls() {
        let e: &[(&str, &[usize])] = &[("x", &[2, 3, 4]), ("w", &[4, 5])];
        assert!(check(e, |g, s| { let (x, w) = (g.param(s, "x")?, g.param(s, "w")?); g.matmul(x, w) }) < 1e-6);
        let e: &[(&str, &[usize])] = &[("a", &[2, 3, 4]), ("b", &[2, 4, 5]), ("c", &[2, 5, 4])];
        assert!(check(e, |g, s| { let (a, b) = (g.param(s, "a")?, g.param(s, "b")?); g.bmm(a, b, false) }) < 1e-6);
        assert!(check(e, |g, s| { let (a, c) = (g.param(s, "a")?, g.param(s, "c")?); g.bmm(a, c, true) }) < 1e-6);
    }

    #[test]
    fn fd_layout_ops() {
        let e: &[(&str, &[usize])] = &[("x", &[2, 3, 4, 2]), ("y", &[2, 1, 4, 2])];
        assert!(check(e, |g, s| { let x = g.param(s, "x")?; g.transpose(x, 1, 2) }) < 1e-6);
        assert!(check(e, |g, s| { let x = g.param(s, "x")?; g.transpose(x, 0, 3) }) < 1e-6);
        assert!(check(e, |g, s| { let x = g.param(s, "x")?; g.reshape(x, &[6, 8]) }) < 1e-6);
        assert!(check(e, |g, s| { let (x, y) = (g.param(s, "x")?, g.param(s, "y")?); g.concat(&[x, y, x], 1) }) < 1e-6);
        assert!(check(e, |g, s| { let x = g.param(s, "x")?; g.slice(x, 2, 1, 2) }) < 1e-6);
    }

    #[test]
    fn fd_normalizers() {
        let e: &[(&str, &[usize])] = &[("x", &[3, 6]), ("s", &[6])];
        assert!(check(e, |g, s| { let x = g.param(s, "x")?; g.softmax(x) }) < 1e-6);
        assert!(check(e, |g, s| { let x = g.param(s, "x")?; g.layer_norm(x) }) < 1e-6);
        assert!(check(e, |g, s| { let (x, sc) = (g.param(s, "x")?, g.param(s, "s")?); g.rms_norm(x, sc) }) < 1e-6);
    }

    #[test]
    fn fd_reductions_and_embeddings() {
        let e: &[(&str, &[usize])] = &[("a", &[4, 3]), ("b", &[4, 3]), ("w", &[4]), ("t", &[3]), ("tab", &[5, 3])];
        assert!(check(e, |g, s| { let a = g.param(s, "a")?; Ok(g.mean(a)) }) < 1e-6);
        assert!(check(e, |g, s| { let (a, b) = (g.param(s, "a")?, g.param(s, "b")?); g.mse(a, b) }) < 1e-6);
        assert!(check(e, |g, s| {
            let (a, b, w) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "w")?);
            g.weighted_mse(a, b, w)
        }) < 1e-6);
        assert!(check(e, |g, s| { let t = g.param(s, "t")?; g.sinusoidal_embed(t, 8, 10.0) }) < 1e-6);
        assert!(check(e, |g, s| { let tab = g.param(s, "tab")?; g.gather_rows(tab, &[4, 0, 4, 2]) }) < 1e-6);
    }

    #[test]
    fn sinusoidal_layout() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
        let e = g.sinusoidal_embed(t, 4, 10000.0).unwrap();
        let v = g.value(e).data();
        assert_eq!(&v[..4], &[1.0, 1.0, 0.0, 0.0]);
        assert!((v[4] - 1f64.cos()).abs() < 1e-15 && (v[6] - 1f64.sin()).abs() < 1e-15);
        assert!((v[5] - 0.01f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn repeated_param_registration_shares_a_node() {
        let s = store(&[("w", &[2])], 1);
        let mut g = Graph::new();
        let a = g.param(&s, "w").unwrap();
        let b = g.param(&s, "w").unwrap();
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p);
        let gr = g.backward(l).unwrap();
        let w = s.get("w").unwrap().data();
        assert_eq!(gr.get("w").unwrap().data(), &[2.0 * w[0], 2.0 * w[1]]);
    }

    #[test]
    fn f32_matches_f64() {
        let s64 = store(&[("x", &[3, 4]), ("w", &[4, 2])], 9);
        let s32: ParamStore<f32> = s64.cast();
        fn run<T: Scalar>(s: &ParamStore<T>) -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.param(s, "x").unwrap();
            let w = g.param(s, "w").unwrap();
            let y = g.matmul(x, w).unwrap();
            let y = g.softmax(y).unwrap();
            g.value(y).to_f64_vec()
        }
        for (a, b) in run(&s64).iter().zip(run(&s32)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store(&[("a.w", &[3, 2]), ("b", &[4])], 4);
        let mut ck = Checkpoint::new();
        ck.metadata.insert("step".into(), serde_json::json!(12));
        ck.insert_store("params.", &s);
        ck.insert("half", &Tensor::<f32>::from_f64(&[2], &[0.5, -1.25]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get_store::<f64>("params.").unwrap(), s);
        assert_eq!(back.get::<f32>("half").unwrap().data(), &[0.5, -1.25]);
        assert!(back.get::<f64>("half").is_err());
        assert_eq!(back.metadata["step"], 12);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint::new().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut ck = Checkpoint::new();
        ck.insert("x", &Tensor::<f64>::zeros(&[4]));
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn concat_split_round_trip(a in 1usize..4, b in 1usize..4, c in 1usize..4, axis in 0usize..3, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [a, b, c];
            let mut g = Graph::<f64>::new();
            let x = g.constant(randn(&shape, &mut rng));
            let mut other = shape;
            other[axis] += 1;
            let y = g.constant(randn(&other, &mut rng));
            let cat = g.concat(&[x, y], axis).unwrap();
            let parts = g.split(cat, axis, &[shape[axis], other[axis]]).unwrap();
            prop_assert_eq!(g.value(parts[0]), g.value(x));
            prop_assert_eq!(g.value(parts[1]), g.value(y));
        }

        #[test]
        fn transpose_is_an_involution(a in 1usize..4, b in 1usize..4, c in 1usize..4, d in 1usize..4, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = randn(&[a, b, c, d], &mut rng);
            let back = t.transposed(1, 3).transposed(1, 3);
            prop_assert_eq!(back, t);
        }
    }
}

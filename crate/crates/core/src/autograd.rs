//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that depends on a
//! parameter leaf. Graphs are single-use: build one per forward pass.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[.., n] + [n]`
    AddRow(Var, Var),
    /// `[.., n] * [n]`
    MulRow(Var, Var),
    /// `[B, C, ...] + [C]`
    AddChannel(Var, Var),
    /// `[B, C, ...] * [C]`
    MulChannel(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Transpose(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    /// `[B, P, D] -> [B, D]`
    MeanMiddle {
        x: Var,
        p: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Rc<Vec<usize>>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape of tensor operations.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn acc_with<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

/// `op(a) * op(b)` where `op` optionally transposes a stored 2-d matrix.
fn gemm_t<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1isize, ac as isize)
    } else {
        (ar, ac, ac as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1isize, bc as isize)
    } else {
        (br, bc, bc as isize, 1isize)
    };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a scalar (single element) node.
    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn binary_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
            x.zip_map(y, f)
        };
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&self, a: Var, b: Var, mul: bool) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.0].value, &nodes[b.0].value);
            let n = r.numel();
            let last = *x.shape().last().expect("row broadcast needs rank >= 1");
            assert_eq!(last, n, "row broadcast width mismatch");
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_mut(n) {
                for (o, &rv) in chunk.iter_mut().zip(r.data()) {
                    if mul {
                        *o *= rv;
                    } else {
                        *o += rv;
                    }
                }
            }
            out
        };
        let ng = self.ng(&[a, b]);
        let op = if mul {
            Op::MulRow(a, b)
        } else {
            Op::AddRow(a, b)
        };
        self.push(value, op, ng)
    }

    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, false)
    }

    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, true)
    }

    fn channel_broadcast(&self, a: Var, b: Var, mul: bool) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, ch) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = x.shape();
            assert!(shape.len() >= 2, "channel broadcast needs rank >= 2");
            let c = shape[1];
            assert_eq!(ch.numel(), c, "channel broadcast count mismatch");
            let inner: usize = shape[2..].iter().product();
            let mut out = x.clone();
            for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                let cv = ch.data()[i % c];
                for o in chunk {
                    if mul {
                        *o *= cv;
                    } else {
                        *o += cv;
                    }
                }
            }
            out
        };
        let ng = self.ng(&[a, b]);
        let op = if mul {
            Op::MulChannel(a, b)
        } else {
            Op::AddChannel(a, b)
        };
        self.push(value, op, ng)
    }

    pub fn add_channel(&self, a: Var, ch: Var) -> Var {
        self.channel_broadcast(a, ch, false)
    }

    pub fn mul_channel(&self, a: Var, ch: Var) -> Var {
        self.channel_broadcast(a, ch, true)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `op(a) · op(b)` for 2-d operands; `ta`/`tb` transpose the stored matrix.
    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            gemm_t(&nodes[a.0].value, ta, &nodes[b.0].value, tb)
        };
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `x · Wᵀ + b` with `W` stored `[out, in]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_t(x, false, w, true);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |v| v.max(T::zero()), Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    fn row_softmax(x: &Tensor<T>) -> Tensor<T> {
        let n = *x.shape().last().expect("softmax needs rank >= 1");
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        out
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let value = Self::row_softmax(&self.value(a));
        let ng = self.ng(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        let value = {
            let x = self.value(a);
            let n = *x.shape().last().expect("log_softmax needs rank >= 1");
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let s: T = row.iter().map(|&v| (v - m).exp()).sum();
                let lse = m + s.ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, a: Var, eps: T) -> Var {
        let (value, rstd) = {
            let x = self.value(a);
            let n = *x.shape().last().expect("layer_norm needs rank >= 1");
            let nt = T::from_usize(n).unwrap();
            let mut out = x.clone();
            let mut rstd = Vec::with_capacity(x.numel() / n.max(1));
            for row in out.data_mut().chunks_mut(n) {
                let mean = row.iter().copied().sum::<T>() / nt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let r = T::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                rstd.push(r);
            }
            (out, rstd)
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::LayerNorm { x: a, rstd }, ng)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let ng = self.ng(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).transpose2();
        let ng = self.ng(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Rows `start..start+len` of a matrix view `(shape[0], rest)`.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let x = self.value(a);
            let cols = x.cols();
            assert!(start + len <= x.rows(), "slice_rows out of range");
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            Tensor::new(shape, x.data()[start * cols..(start + len) * cols].to_vec()).unwrap()
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows { x: a, start }, ng)
    }

    /// Stacks matrices along the first axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let cols = first.cols();
            let mut shape = first.shape().to_vec();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                assert_eq!(t.cols(), cols, "concat_rows width mismatch");
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            shape[0] = rows;
            Tensor::new(shape, data).unwrap()
        };
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..start+len` of a 2-d matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let x = self.value(a);
            let (r, cols) = (x.rows(), x.cols());
            assert!(start + len <= cols, "slice_cols out of range");
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&x.data()[i * cols + start..i * cols + start + len]);
            }
            Tensor::new(vec![r, len], data).unwrap()
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols { x: a, start }, ng)
    }

    /// Joins 2-d matrices side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let r = nodes[parts[0].0].value.rows();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    let t = &nodes[p.0].value;
                    assert_eq!(t.rows(), r, "concat_cols height mismatch");
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor::new(vec![r, total], data).unwrap()
        };
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let value = {
            let x = self.value(a);
            let src = x.data();
            let data = index.iter().map(|&i| src[i]).collect();
            Tensor::new(shape.to_vec(), data).expect("gather shape")
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::Gather { x: a, index }, ng)
    }

    /// Selects whole rows of a matrix (embedding lookup).
    pub fn gather_rows(&self, table: Var, rows: &[usize]) -> Var {
        let cols = self.value(table).cols();
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * cols)..(r * cols + cols))
            .collect();
        self.gather(table, Rc::new(index), &[rows.len(), cols])
    }

    /// 2-d convolution, `x: [B, C, H, W]`, `w: [O, C, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (value, geom, cols) = {
            let nodes = self.nodes.borrow();
            let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
            let (xs, ws) = (xt.shape(), wt.shape());
            assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W]");
            assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,k,k]");
            assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
            let k = ws[2];
            let ho = (xs[2] + 2 * pad - k) / stride + 1;
            let wo = (xs[3] + 2 * pad - k) / stride + 1;
            let geom = ConvGeom {
                batch: xs[0],
                in_ch: xs[1],
                h: xs[2],
                w: xs[3],
                out_ch: ws[0],
                k,
                stride,
                pad,
                ho,
                wo,
            };
            let cols = im2col(xt.data(), &geom);
            let patch = geom.in_ch * k * k;
            let rows = geom.batch * ho * wo;
            // [rows, O] = cols [rows, patch] · Wᵀ [patch, O]
            let mut prod = vec![T::zero(); rows * geom.out_ch];
            T::gemm(
                rows,
                patch,
                geom.out_ch,
                T::one(),
                &cols,
                patch as isize,
                1,
                wt.data(),
                1,
                patch as isize,
                T::zero(),
                &mut prod,
                geom.out_ch as isize,
                1,
            );
            let mut out = vec![T::zero(); rows * geom.out_ch];
            let hw = ho * wo;
            for b in 0..geom.batch {
                for p in 0..hw {
                    for o in 0..geom.out_ch {
                        out[(b * geom.out_ch + o) * hw + p] = prod[(b * hw + p) * geom.out_ch + o];
                    }
                }
            }
            (
                Tensor::new(vec![geom.batch, geom.out_ch, ho, wo], out).unwrap(),
                geom,
                cols,
            )
        };
        let ng = self.ng(&[x, w]);
        self.push(value, Op::Conv2d { x, w, geom, cols }, ng)
    }

    /// Non-overlapping max pooling with window `k`, `[B, C, H, W]`.
    pub fn max_pool(&self, x: Var, k: usize) -> Var {
        let (value, argmax) = {
            let t = self.value(x);
            let s = t.shape();
            let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
            let (ho, wo) = (h / k, w / k);
            let mut out = Vec::with_capacity(b * ch * ho * wo);
            let mut arg = Vec::with_capacity(b * ch * ho * wo);
            let d = t.data();
            for plane in 0..b * ch {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut bi = base;
                        for dy in 0..k {
                            for dx in 0..k {
                                let i = base + (oy * k + dy) * w + ox * k + dx;
                                if d[i] > best {
                                    best = d[i];
                                    bi = i;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(bi);
                    }
                }
            }
            (Tensor::new(vec![b, ch, ho, wo], out).unwrap(), arg)
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::MaxPool { x, argmax }, ng)
    }

    /// Averages `[B, P, D]` over the middle axis.
    pub fn mean_middle(&self, x: Var, b: usize, p: usize, d: usize) -> Var {
        let value = {
            let t = self.value(x);
            assert_eq!(t.numel(), b * p * d, "mean_middle shape");
            let inv = T::one() / T::from_usize(p).unwrap();
            let mut out = vec![T::zero(); b * d];
            for bi in 0..b {
                for pi in 0..p {
                    let src = &t.data()[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                    for (o, &v) in out[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                        *o += v * inv;
                    }
                }
            }
            Tensor::new(vec![b, d], out).unwrap()
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::MeanMiddle { x, p }, ng)
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(&[a]);
        self.push(value, Op::Mean(a), ng)
    }

    /// Mean squared difference of two same-shape nodes.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Mean cross-entropy of `logits: [B, C]` against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let (value, probs) = {
            let x = self.value(logits);
            let cls = x.cols();
            assert_eq!(x.rows(), labels.len(), "cross_entropy batch mismatch");
            let probs = Self::row_softmax(&x).into_data();
            let mut loss = T::zero();
            for (i, &y) in labels.iter().enumerate() {
                assert!(y < cls, "label out of range");
                let row = x.row(i);
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                loss += lse - row[y];
            }
            (
                Tensor::scalar(loss / T::from_usize(labels.len()).unwrap()),
                probs,
            )
        };
        let ng = self.ng(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: Rc::new(labels.to_vec()),
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let wants = |v: Var| nodes[v.0].needs_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(&mut grads[a.0], gout.clone());
                    }
                    if wants(*b) {
                        acc(&mut grads[b.0], gout.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        acc(&mut grads[a.0], gout.clone());
                    }
                    if wants(*b) {
                        acc(&mut grads[b.0], gout.scale(-T::one()));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(&mut grads[a.0], gout.zip_map(val(*b), |g, y| g * y));
                    }
                    if wants(*b) {
                        acc(&mut grads[b.0], gout.zip_map(val(*a), |g, x| g * x));
                    }
                }
                Op::AddRow(a, r) => {
                    if wants(*a) {
                        acc(&mut grads[a.0], gout.clone());
                    }
                    if wants(*r) {
                        let n = val(*r).numel();
                        acc_with(&mut grads[r.0], val(*r).shape(), |dst| {
                            for chunk in gout.data().chunks(n) {
                                for (d, &g) in dst.iter_mut().zip(chunk) {
                                    *d += g;
                                }
                            }
                        });
                    }
                }
                Op::MulRow(a, r) => {
                    let rv = val(*r);
                    let n = rv.numel();
                    if wants(*a) {
                        let mut ga = gout.clone();
                        for chunk in ga.data_mut().chunks_mut(n) {
                            for (g, &s) in chunk.iter_mut().zip(rv.data()) {
                                *g *= s;
                            }
                        }
                        acc(&mut grads[a.0], ga);
                    }
                    if wants(*r) {
                        let av = val(*a);
                        acc_with(&mut grads[r.0], rv.shape(), |dst| {
                            for (gc, xc) in gout.data().chunks(n).zip(av.data().chunks(n)) {
                                for ((d, &g), &x) in dst.iter_mut().zip(gc).zip(xc) {
                                    *d += g * x;
                                }
                            }
                        });
                    }
                }
                Op::AddChannel(a, ch) | Op::MulChannel(a, ch) => {
                    let is_mul = matches!(node.op, Op::MulChannel(..));
                    let chv = val(*ch);
                    let cn = chv.numel();
                    let inner: usize = val(*a).shape()[2..].iter().product();
                    if wants(*a) {
                        if is_mul {
                            let mut ga = gout.clone();
                            for (k, chunk) in ga.data_mut().chunks_mut(inner).enumerate() {
                                let s = chv.data()[k % cn];
                                for g in chunk {
                                    *g *= s;
                                }
                            }
                            acc(&mut grads[a.0], ga);
                        } else {
                            acc(&mut grads[a.0], gout.clone());
                        }
                    }
                    if wants(*ch) {
                        let av = val(*a);
                        acc_with(&mut grads[ch.0], chv.shape(), |dst| {
                            for (k, gc) in gout.data().chunks(inner).enumerate() {
                                let s = if is_mul {
                                    gc.iter()
                                        .zip(&av.data()[k * inner..(k + 1) * inner])
                                        .map(|(&g, &x)| g * x)
                                        .sum::<T>()
                                } else {
                                    gc.iter().copied().sum::<T>()
                                };
                                dst[k % cn] += s;
                            }
                        });
                    }
                }
                Op::Scale(a, s) => {
                    if wants(*a) {
                        acc(&mut grads[a.0], gout.scale(*s));
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (val(*a), val(*b));
                    if wants(*a) {
                        let ga = if !*ta {
                            gemm_t(&gout, false, bv, !*tb)
                        } else {
                            gemm_t(bv, *tb, &gout, true)
                        };
                        acc(&mut grads[a.0], ga.reshape(av.shape()).unwrap());
                    }
                    if wants(*b) {
                        let gb = if !*tb {
                            gemm_t(av, !*ta, &gout, false)
                        } else {
                            gemm_t(&gout, true, av, *ta)
                        };
                        acc(&mut grads[b.0], gb.reshape(bv.shape()).unwrap());
                    }
                }
                Op::Relu(a) => {
                    if wants(*a) {
                        acc(
                            &mut grads[a.0],
                            gout.zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() }),
                        );
                    }
                }
                Op::Exp(a) => {
                    if wants(*a) {
                        acc(&mut grads[a.0], gout.zip_map(&node.value, |g, y| g * y));
                    }
                }
                Op::Log(a) => {
                    if wants(*a) {
                        acc(&mut grads[a.0], gout.zip_map(val(*a), |g, x| g / x));
                    }
                }
                Op::Softmax(a) => {
                    if wants(*a) {
                        let y = &node.value;
                        let n = *y.shape().last().unwrap();
                        let mut ga = gout.clone();
                        for (gr, yr) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                            let dot: T = gr.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                            for (g, &p) in gr.iter_mut().zip(yr) {
                                *g = p * (*g - dot);
                            }
                        }
                        acc(&mut grads[a.0], ga);
                    }
                }
                Op::LogSoftmax(a) => {
                    if wants(*a) {
                        let y = &node.value;
                        let n = *y.shape().last().unwrap();
                        let mut ga = gout.clone();
                        for (gr, yr) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                            let s: T = gr.iter().copied().sum();
                            for (g, &ly) in gr.iter_mut().zip(yr) {
                                *g -= ly.exp() * s;
                            }
                        }
                        acc(&mut grads[a.0], ga);
                    }
                }
                Op::LayerNorm { x, rstd } => {
                    if wants(*x) {
                        let y = &node.value;
                        let n = *y.shape().last().unwrap();
                        let nt = T::from_usize(n).unwrap();
                        let mut ga = gout.clone();
                        for ((gr, yr), &r) in ga
                            .data_mut()
                            .chunks_mut(n)
                            .zip(y.data().chunks(n))
                            .zip(rstd.iter())
                        {
                            let mg: T = gr.iter().copied().sum::<T>() / nt;
                            let mgy: T = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() / nt;
                            for (g, &v) in gr.iter_mut().zip(yr) {
                                *g = r * (*g - mg - v * mgy);
                            }
                        }
                        acc(&mut grads[x.0], ga);
                    }
                }
                Op::Reshape(a) => {
                    if wants(*a) {
                        acc(&mut grads[a.0], gout.reshape(val(*a).shape()).unwrap());
                    }
                }
                Op::Transpose(a) => {
                    if wants(*a) {
                        acc(&mut grads[a.0], gout.transpose2());
                    }
                }
                Op::SliceRows { x, start } => {
                    if wants(*x) {
                        let cols = val(*x).cols();
                        let off = start * cols;
                        acc_with(&mut grads[x.0], val(*x).shape(), |dst| {
                            for (d, &g) in dst[off..off + gout.numel()].iter_mut().zip(gout.data())
                            {
                                *d += g;
                            }
                        });
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = val(*p).numel();
                        if wants(*p) {
                            let g = Tensor::new(
                                val(*p).shape().to_vec(),
                                gout.data()[off..off + n].to_vec(),
                            )
                            .unwrap();
                            acc(&mut grads[p.0], g);
                        }
                        off += n;
                    }
                }
                Op::SliceCols { x, start } => {
                    if wants(*x) {
                        let cols = val(*x).cols();
                        let len = gout.cols();
                        acc_with(&mut grads[x.0], val(*x).shape(), |dst| {
                            for r in 0..gout.rows() {
                                let d = &mut dst[r * cols + start..r * cols + start + len];
                                for (dv, &g) in d.iter_mut().zip(gout.row(r)) {
                                    *dv += g;
                                }
                            }
                        });
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = gout.cols();
                    let mut off = 0;
                    for p in parts {
                        let pc = val(*p).cols();
                        if wants(*p) {
                            let rows = gout.rows();
                            let mut data = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                data.extend_from_slice(
                                    &gout.data()[r * total + off..r * total + off + pc],
                                );
                            }
                            acc(
                                &mut grads[p.0],
                                Tensor::new(val(*p).shape().to_vec(), data).unwrap(),
                            );
                        }
                        off += pc;
                    }
                }
                Op::Gather { x, index } => {
                    if wants(*x) {
                        acc_with(&mut grads[x.0], val(*x).shape(), |dst| {
                            for (&i, &g) in index.iter().zip(gout.data()) {
                                dst[i] += g;
                            }
                        });
                    }
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let g = *geom;
                    let hw = g.ho * g.wo;
                    let rows = g.batch * hw;
                    let patch = g.in_ch * g.k * g.k;
                    // gout [B,O,ho,wo] -> [rows, O]
                    let mut gmat = vec![T::zero(); rows * g.out_ch];
                    for b in 0..g.batch {
                        for o in 0..g.out_ch {
                            for p in 0..hw {
                                gmat[(b * hw + p) * g.out_ch + o] =
                                    gout.data()[(b * g.out_ch + o) * hw + p];
                            }
                        }
                    }
                    if wants(*w) {
                        // dW [O, patch] = gmatᵀ · cols
                        let mut dw = vec![T::zero(); g.out_ch * patch];
                        T::gemm(
                            g.out_ch,
                            rows,
                            patch,
                            T::one(),
                            &gmat,
                            1,
                            g.out_ch as isize,
                            cols,
                            patch as isize,
                            1,
                            T::zero(),
                            &mut dw,
                            patch as isize,
                            1,
                        );
                        acc(
                            &mut grads[w.0],
                            Tensor::new(val(*w).shape().to_vec(), dw).unwrap(),
                        );
                    }
                    if wants(*x) {
                        // dcols [rows, patch] = gmat · W
                        let mut dcols = vec![T::zero(); rows * patch];
                        T::gemm(
                            rows,
                            g.out_ch,
                            patch,
                            T::one(),
                            &gmat,
                            g.out_ch as isize,
                            1,
                            val(*w).data(),
                            patch as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            patch as isize,
                            1,
                        );
                        acc_with(&mut grads[x.0], val(*x).shape(), |dst| {
                            col2im_add(&dcols, &g, dst)
                        });
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if wants(*x) {
                        acc_with(&mut grads[x.0], val(*x).shape(), |dst| {
                            for (&i, &g) in argmax.iter().zip(gout.data()) {
                                dst[i] += g;
                            }
                        });
                    }
                }
                Op::MeanMiddle { x, p } => {
                    if wants(*x) {
                        let d = gout.cols();
                        let b = gout.rows();
                        let inv = T::one() / T::from_usize(*p).unwrap();
                        acc_with(&mut grads[x.0], val(*x).shape(), |dst| {
                            for bi in 0..b {
                                for pi in 0..*p {
                                    let o = &mut dst[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                                    for (dv, &g) in o.iter_mut().zip(gout.row(bi)) {
                                        *dv += g * inv;
                                    }
                                }
                            }
                        });
                    }
                }
                Op::Sum(a) => {
                    if wants(*a) {
                        acc(
                            &mut grads[a.0],
                            Tensor::full(val(*a).shape(), gout.data()[0]),
                        );
                    }
                }
                Op::Mean(a) => {
                    if wants(*a) {
                        let n = T::from_usize(val(*a).numel()).unwrap();
                        acc(
                            &mut grads[a.0],
                            Tensor::full(val(*a).shape(), gout.data()[0] / n),
                        );
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    if wants(*logits) {
                        let lv = val(*logits);
                        let cls = lv.cols();
                        let scale = gout.data()[0] / T::from_usize(labels.len()).unwrap();
                        let mut ga = probs.clone();
                        for (i, &y) in labels.iter().enumerate() {
                            ga[i * cls + y] -= T::one();
                        }
                        for v in ga.iter_mut() {
                            *v *= scale;
                        }
                        acc(
                            &mut grads[logits.0],
                            Tensor::new(lv.shape().to_vec(), ga).unwrap(),
                        );
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.in_ch * g.k * g.k;
    let mut cols = vec![T::zero(); g.batch * g.ho * g.wo * patch];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ch in 0..g.in_ch {
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[row + (ch * g.k + ky) * g.k + kx] =
                                x[((b * g.in_ch + ch) * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(dcols: &[T], g: &ConvGeom, dst: &mut [T]) {
    let patch = g.in_ch * g.k * g.k;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ch in 0..g.in_ch {
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dst[((b * g.in_ch + ch) * g.h + iy as usize) * g.w + ix as usize] +=
                                dcols[row + (ch * g.k + ky) * g.k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Central finite-difference check helper: perturbs `x.flat[i]` by `±h` and
/// returns `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference<T: Scalar>(
    x: &Tensor<T>,
    i: usize,
    h: f64,
    mut f: impl FnMut(&Tensor<T>) -> T,
) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += c(h);
    let mut minus = x.clone();
    minus.data_mut()[i] -= c(h);
    (f(&plus).to_f64_lossy() - f(&minus).to_f64_lossy()) / (2.0 * h)
}

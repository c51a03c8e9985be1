//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node to the [`Tape`]; node ids are therefore a
//! topological order and the backward sweep simply walks them in reverse.
//! Leaves created with [`Tape::param`] collect gradients, leaves created with
//! [`Tape::constant`] never do, and neither does anything computed only from
//! constants.

use std::cell::RefCell;

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    MulScalar(usize, usize),
    MatMul {
        a: usize,
        ta: bool,
        b: usize,
        tb: bool,
    },
    Transpose(usize),
    Sigmoid(usize),
    Relu(usize),
    EluPlusOne(usize),
    Silu(usize),
    Softmax(usize),
    RmsNorm {
        x: usize,
        w: Option<usize>,
        inv_rms: Vec<T>,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    MeanRows {
        x: usize,
        rows: Vec<usize>,
    },
    Sum(usize),
    SumRows(usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    Reshape(usize),
    RotatePairs {
        x: usize,
        cos: Tensor<T>,
        sin: Tensor<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Var::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn rank2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    t.dims2(op)
}

impl<T: Scalar> Tape<T> {
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

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    /// Concatenate rank-2 vars along `axis`.
    pub fn concat(&self, parts: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat(&refs, axis)?
        };
        let ng = self.needs(&ids);
        Ok(self.push(value, Op::Concat { parts: ids, axis }, ng))
    }

    /// Row lookup into an embedding table `[rows, d]`.
    pub fn embedding(&self, table: Var<'_, T>, ids: &[usize]) -> Result<Var<'_, T>> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.id].value;
            let (rows, d) = rank2(t, "embedding")?;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::BadIndex { id, rows });
                }
                out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(&[ids.len(), d], out)?
        };
        let ng = self.needs(&[table.id]);
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with_pair<R>(&self, other: Var<'t, T>, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let ng = self.requires_grad();
        self.tape.push(value, op, ng)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let ng = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, ng)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.with_pair(other, |a, b| a.add(b))?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.with_pair(other, |a, b| a.sub(b))?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.with_pair(other, |a, b| a.mul(b))?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Multiply by a constant.
    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.with_value(|a| a.scale(c));
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_const(self, c: T) -> Var<'t, T> {
        let v = self.with_value(|a| a.map(|x| x + c));
        self.unary(v, Op::AddConst(self.id))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t, T> {
        self.scale(-T::one()).add_const(T::one())
    }

    /// Multiply every element by a single-element var.
    pub fn mul_scalar(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.with_pair(s, |a, s| {
            if !s.is_scalar() {
                return Err(TensorError::ShapeMismatch {
                    op: "mul_scalar",
                    left: a.shape().to_vec(),
                    right: s.shape().to_vec(),
                });
            }
            let c = s.item();
            Ok(a.map(|x| x * c))
        })?;
        Ok(self.binary(s, v, Op::MulScalar(self.id, s.id)))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(false, other, false)
    }

    /// `self · otherᵀ`, the layout of a linear layer stored as `[out, in]`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(false, other, true)
    }

    pub fn matmul_ex(self, ta: bool, other: Var<'t, T>, tb: bool) -> Result<Var<'t, T>> {
        let v = self.with_pair(other, |a, b| a.matmul_ex(ta, b, tb))?;
        Ok(self.binary(
            other,
            v,
            Op::MatMul {
                a: self.id,
                ta,
                b: other.id,
                tb,
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let v = self.with_value(|a| a.transpose())?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.with_value(|a| a.map(sigmoid));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.with_value(|a| a.map(|x| x.max(T::zero())));
        self.unary(v, Op::Relu(self.id))
    }

    /// `ELU(x) + 1`: `x + 1` for `x >= 0`, `exp(x)` otherwise.
    pub fn elu_plus_one(self) -> Var<'t, T> {
        let v = self.with_value(|a| a.map(elu_plus_one));
        self.unary(v, Op::EluPlusOne(self.id))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'t, T> {
        let v = self.with_value(|a| a.map(|x| x * sigmoid(x)));
        self.unary(v, Op::Silu(self.id))
    }

    /// Softmax over the last axis. Entries equal to `-inf` get zero weight.
    pub fn softmax(self) -> Var<'t, T> {
        let v = self.with_value(softmax_last);
        self.unary(v, Op::Softmax(self.id))
    }

    /// Row-wise RMS normalisation with an optional gain vector of width `d`.
    pub fn rms_norm(self, weight: Option<Var<'t, T>>, eps: T) -> Result<Var<'t, T>> {
        let (value, inv_rms) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (r, d) = rank2(x, "rms_norm")?;
            let w = match weight {
                Some(w) => {
                    let wv = &nodes[w.id].value;
                    if wv.numel() != d {
                        return Err(TensorError::ShapeMismatch {
                            op: "rms_norm",
                            left: x.shape().to_vec(),
                            right: wv.shape().to_vec(),
                        });
                    }
                    Some(wv.data())
                }
                None => None,
            };
            let dn = T::from_usize(d).unwrap();
            let mut out = Vec::with_capacity(r * d);
            let mut inv = Vec::with_capacity(r);
            for row in x.data().chunks(d) {
                let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
                let s = T::one() / (ms + eps).sqrt();
                inv.push(s);
                match w {
                    Some(w) => out.extend(row.iter().zip(w).map(|(&v, &g)| v * s * g)),
                    None => out.extend(row.iter().map(|&v| v * s)),
                }
            }
            (Tensor::new(&[r, d], out)?, inv)
        };
        let mut ids = vec![self.id];
        if let Some(w) = weight {
            ids.push(w.id);
        }
        let ng = self.tape.needs(&ids);
        Ok(self.tape.push(
            value,
            Op::RmsNorm {
                x: self.id,
                w: weight.map(|w| w.id),
                inv_rms,
            },
            ng,
        ))
    }

    /// Inverted dropout: kept entries are divided by the keep probability at
    /// train time, so evaluation is the identity.
    pub fn dropout(self, rate: f64, rng: &mut Rng, train: bool) -> Var<'t, T> {
        if !train || rate <= 0.0 {
            return self;
        }
        let keep = 1.0 - rate;
        let inv = T::from_f64_lossy(1.0 / keep);
        let n = self.with_value(|a| a.numel());
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.bernoulli(keep) { inv } else { T::zero() })
            .collect();
        let v = self.with_value(|a| {
            let shape = a.shape().to_vec();
            let data = a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            Tensor::new(&shape, data).expect("same count")
        });
        self.unary(v, Op::Dropout { x: self.id, mask })
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let v = self.with_value(|a| a.slice_rows(start, end))?;
        Ok(self.unary(v, Op::SliceRows { x: self.id, start }))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let v = self.with_value(|a| a.slice_cols(start, end))?;
        Ok(self.unary(v, Op::SliceCols { x: self.id, start }))
    }

    /// Mean of the selected rows, as a `[1, d]` row.
    pub fn mean_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        if rows.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        let v = self.with_value(|a| {
            let (r, d) = rank2(a, "mean_pool")?;
            let mut acc = vec![T::zero(); d];
            for &i in rows {
                if i >= r {
                    return Err(TensorError::OutOfRange {
                        op: "mean_pool",
                        start: i,
                        end: i + 1,
                        extent: r,
                    });
                }
                for (s, &x) in acc.iter_mut().zip(&a.data()[i * d..(i + 1) * d]) {
                    *s = *s + x;
                }
            }
            let n = T::from_usize(rows.len()).unwrap();
            Ok(Tensor::row(acc.into_iter().map(|s| s / n).collect()))
        })?;
        Ok(self.unary(
            v,
            Op::MeanRows {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean over rows where `mask` is true.
    pub fn mean_pool(self, mask: &[bool]) -> Result<Var<'t, T>> {
        let rows = self.with_value(|a| a.shape().first().copied().unwrap_or(0));
        if mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "mean_pool",
                left: self.shape(),
                right: vec![mask.len()],
            });
        }
        let sel: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        self.mean_rows(&sel)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t, T> {
        let v = self.with_value(|a| Tensor::scalar(a.sum()));
        self.unary(v, Op::Sum(self.id))
    }

    /// Column sums of a rank-2 var, as a `[1, d]` row.
    pub fn sum_rows(self) -> Result<Var<'t, T>> {
        let v = self.with_value(|a| {
            let (_, d) = rank2(a, "sum_rows")?;
            let mut acc = vec![T::zero(); d];
            for row in a.data().chunks(d.max(1)) {
                for (s, &x) in acc.iter_mut().zip(row) {
                    *s = *s + x;
                }
            }
            Ok::<_, TensorError>(Tensor::row(acc))
        })?;
        Ok(self.unary(v, Op::SumRows(self.id)))
    }

    /// Add a bias row (`[1, d]` or `[d]`) to every row.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.with_pair(bias, |a, b| {
            let (r, d) = rank2(a, "add_row")?;
            if b.numel() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let bd = b.data();
            let data = a
                .data()
                .chunks(d.max(1))
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
                .collect();
            Tensor::new(&[r, d], data)
        })?;
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    /// Scale row `i` by `col[i]`, with `col` of shape `[rows, 1]`.
    pub fn mul_col(self, col: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.with_pair(col, |a, c| col_apply(a, c, "mul_col", |x, s| x * s))?;
        Ok(self.binary(col, v, Op::MulCol(self.id, col.id)))
    }

    /// Divide row `i` by `col[i]`, with `col` of shape `[rows, 1]`.
    pub fn div_col(self, col: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.with_pair(col, |a, c| col_apply(a, c, "div_col", |x, s| x / s))?;
        Ok(self.binary(col, v, Op::DivCol(self.id, col.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.with_value(|a| a.reshape(shape))?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Rotate consecutive column pairs `(2j, 2j+1)` of row `i` by the angle
    /// whose cosine and sine are `cos[i, j]`, `sin[i, j]`.
    pub fn rotate_pairs(self, cos: &Tensor<T>, sin: &Tensor<T>) -> Result<Var<'t, T>> {
        let v = self.with_value(|a| rotate(a, cos, sin, false))?;
        Ok(self.unary(
            v,
            Op::RotatePairs {
                x: self.id,
                cos: cos.clone(),
                sin: sin.clone(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` (`(row, class)` pairs)
    /// under a row-wise softmax of `self`.
    pub fn cross_entropy(self, targets: &[(usize, usize)]) -> Result<Var<'t, T>> {
        if targets.is_empty() {
            return Err(TensorError::Invalid("cross_entropy: no target positions".into()));
        }
        let (loss, probs) = self.with_value(|a| {
            let (r, c) = rank2(a, "cross_entropy")?;
            let mut probs = Vec::with_capacity(targets.len() * c);
            let mut total = T::zero();
            for &(row, class) in targets {
                if row >= r || class >= c {
                    return Err(TensorError::OutOfRange {
                        op: "cross_entropy",
                        start: row,
                        end: class,
                        extent: r.max(c),
                    });
                }
                let x = &a.data()[row * c..(row + 1) * c];
                let m = x.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = x.iter().map(|&v| (v - m).exp()).sum();
                total = total + (z.ln() + m - x[class]);
                probs.extend(x.iter().map(|&v| (v - m).exp() / z));
            }
            let n = T::from_usize(targets.len()).unwrap();
            Ok((Tensor::scalar(total / n), probs))
        })?;
        Ok(self.unary(
            loss,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of this scalar with respect to every recorded node that
    /// depends on a [`Tape::param`] leaf.
    pub fn backward(self) -> Result<Gradients<T>> {
        let nodes = self.tape.nodes.borrow();
        let out = &nodes[self.id].value;
        if !out.is_scalar() {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.id + 1];
        if !nodes[self.id].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[self.id] = Some(Tensor::full(out.shape(), T::one()));
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match (&node.op, grads[id].as_ref()) {
                (Op::Leaf, _) | (_, None) => continue,
                (_, Some(g)) => g.clone(),
            };
            backprop(&nodes, id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn elu_plus_one<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

/// Value-level softmax over the last axis.
pub fn softmax_last<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let d = a.shape().last().copied().unwrap_or(1).max(1);
    let mut out = Vec::with_capacity(a.numel());
    for row in a.data().chunks(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = if v == T::neg_infinity() {
                T::zero()
            } else {
                (v - m).exp()
            };
            z = z + e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e = *e / z;
        }
    }
    Tensor::new(a.shape(), out).expect("same count")
}

fn col_apply<T: Scalar>(
    a: &Tensor<T>,
    c: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (r, d) = rank2(a, op)?;
    if c.numel() != r {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: c.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(r * d);
    for (row, &s) in a.data().chunks(d.max(1)).zip(c.data()) {
        out.extend(row.iter().map(|&x| f(x, s)));
    }
    Tensor::new(&[r, d], out)
}

fn rotate<T: Scalar>(a: &Tensor<T>, cos: &Tensor<T>, sin: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let (r, d) = rank2(a, "rotate_pairs")?;
    if d % 2 != 0 || cos.shape() != [r, d / 2] || sin.shape() != [r, d / 2] {
        return Err(TensorError::ShapeMismatch {
            op: "rotate_pairs",
            left: a.shape().to_vec(),
            right: cos.shape().to_vec(),
        });
    }
    let h = d / 2;
    let mut out = vec![T::zero(); r * d];
    for i in 0..r {
        for j in 0..h {
            let c = cos.data()[i * h + j];
            let s = if inverse {
                -sin.data()[i * h + j]
            } else {
                sin.data()[i * h + j]
            };
            let x0 = a.data()[i * d + 2 * j];
            let x1 = a.data()[i * d + 2 * j + 1];
            out[i * d + 2 * j] = x0 * c - x1 * s;
            out[i * d + 2 * j + 1] = x0 * s + x1 * c;
        }
    }
    Tensor::new(&[r, d], out)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) -> Result<()> {
    match &mut grads[id] {
        Some(acc) => acc.axpy(T::one(), &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let needs = |i: usize| nodes[i].needs_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone())?;
            }
            if needs(*b) {
                accumulate(grads, *b, g.clone())?;
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone())?;
            }
            if needs(*b) {
                accumulate(grads, *b, g.scale(-T::one()))?;
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.mul(val(*b))?)?;
            }
            if needs(*b) {
                accumulate(grads, *b, g.mul(val(*a))?)?;
            }
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c))?,
        Op::AddConst(a) => accumulate(grads, *a, g.clone())?,
        Op::MulScalar(a, s) => {
            if needs(*a) {
                accumulate(grads, *a, g.scale(val(*s).item()))?;
            }
            if needs(*s) {
                let d = g.mul(val(*a))?.sum();
                accumulate(grads, *s, Tensor::full(val(*s).shape(), d))?;
            }
        }
        Op::MatMul { a, ta, b, tb } => {
            let (av, bv) = (val(*a), val(*b));
            // C = op(A) op(B)
            if needs(*a) {
                // dop(A) = G op(B)^T ; dA = dop(A) or its transpose
                let da = if *ta {
                    bv.matmul_ex(*tb, g, true)?
                } else {
                    g.matmul_ex(false, bv, !*tb)?
                };
                accumulate(grads, *a, da)?;
            }
            if needs(*b) {
                // dop(B) = op(A)^T G
                let db = if *tb {
                    g.matmul_ex(true, av, *ta)?
                } else {
                    av.matmul_ex(!*ta, g, false)?
                };
                accumulate(grads, *b, db)?;
            }
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()?)?,
        Op::Sigmoid(a) => {
            let y = &nodes[id].value;
            let d = g.zip_map(y, "sigmoid", |g, y| g * y * (T::one() - y))?;
            accumulate(grads, *a, d)?;
        }
        Op::Relu(a) => {
            let d = g.zip_map(val(*a), "relu", |g, x| if x > T::zero() { g } else { T::zero() })?;
            accumulate(grads, *a, d)?;
        }
        Op::EluPlusOne(a) => {
            let d = g.zip_map(val(*a), "elu", |g, x| {
                if x >= T::zero() {
                    g
                } else {
                    g * x.exp()
                }
            })?;
            accumulate(grads, *a, d)?;
        }
        Op::Silu(a) => {
            let d = g.zip_map(val(*a), "silu", |g, x| {
                let s = sigmoid(x);
                g * (s + x * s * (T::one() - s))
            })?;
            accumulate(grads, *a, d)?;
        }
        Op::Softmax(a) => {
            let y = &nodes[id].value;
            let d = y.shape().last().copied().unwrap_or(1).max(1);
            let mut out = Vec::with_capacity(y.numel());
            for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                out.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
            }
            accumulate(grads, *a, Tensor::new(y.shape(), out)?)?;
        }
        Op::RmsNorm { x, w, inv_rms } => {
            let xv = val(*x);
            let (r, d) = rank2(xv, "rms_norm")?;
            let dn = T::from_usize(d).unwrap();
            let wv = w.map(|w| val(w).data().to_vec());
            if needs(*x) {
                let mut dx = Vec::with_capacity(r * d);
                for i in 0..r {
                    let xr = &xv.data()[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let s = inv_rms[i];
                    let gw: Vec<T> = match &wv {
                        Some(w) => gr.iter().zip(w).map(|(&g, &w)| g * w).collect(),
                        None => gr.to_vec(),
                    };
                    let dot: T = gw.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                    let k = s * s * s * dot / dn;
                    dx.extend(gw.iter().zip(xr).map(|(&gw, &x)| gw * s - x * k));
                }
                accumulate(grads, *x, Tensor::new(&[r, d], dx)?)?;
            }
            if let Some(w) = w {
                if needs(*w) {
                    let mut dw = vec![T::zero(); d];
                    for i in 0..r {
                        let s = inv_rms[i];
                        for j in 0..d {
                            dw[j] = dw[j] + g.data()[i * d + j] * xv.data()[i * d + j] * s;
                        }
                    }
                    accumulate(grads, *w, Tensor::new(val(*w).shape(), dw)?)?;
                }
            }
        }
        Op::Dropout { x, mask } => {
            let data = g.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
            accumulate(grads, *x, Tensor::new(g.shape(), data)?)?;
        }
        Op::Concat { parts, axis } => {
            let mut offset = 0;
            for &p in parts {
                let shape = val(p).shape();
                let (start, end) = if *axis == 0 {
                    (offset, offset + shape[0])
                } else {
                    (offset, offset + shape[1])
                };
                offset = end;
                if needs(p) {
                    let piece = if *axis == 0 {
                        g.slice_rows(start, end)?
                    } else {
                        g.slice_cols(start, end)?
                    };
                    accumulate(grads, p, piece)?;
                }
            }
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let (_, c) = rank2(xv, "slice_rows")?;
            let mut d = vec![T::zero(); xv.numel()];
            d[start * c..start * c + g.numel()].copy_from_slice(g.data());
            accumulate(grads, *x, Tensor::new(xv.shape(), d)?)?;
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (r, c) = rank2(xv, "slice_cols")?;
            let w = g.shape()[1];
            let mut d = vec![T::zero(); r * c];
            for i in 0..r {
                d[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            accumulate(grads, *x, Tensor::new(&[r, c], d)?)?;
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let (_, d) = rank2(tv, "embedding")?;
            let mut dt = vec![T::zero(); tv.numel()];
            for (row, &tok) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[tok * d + j] = dt[tok * d + j] + g.data()[row * d + j];
                }
            }
            accumulate(grads, *table, Tensor::new(tv.shape(), dt)?)?;
        }
        Op::MeanRows { x, rows } => {
            let xv = val(*x);
            let (_, d) = rank2(xv, "mean_pool")?;
            let n = T::from_usize(rows.len()).unwrap();
            let mut dx = vec![T::zero(); xv.numel()];
            for &i in rows {
                for j in 0..d {
                    dx[i * d + j] = dx[i * d + j] + g.data()[j] / n;
                }
            }
            accumulate(grads, *x, Tensor::new(xv.shape(), dx)?)?;
        }
        Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()))?,
        Op::SumRows(a) => {
            let av = val(*a);
            let (r, d) = rank2(av, "sum_rows")?;
            let mut dx = Vec::with_capacity(r * d);
            for _ in 0..r {
                dx.extend_from_slice(g.data());
            }
            accumulate(grads, *a, Tensor::new(&[r, d], dx)?)?;
        }
        Op::AddRow(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone())?;
            }
            if needs(*b) {
                let (_, d) = rank2(g, "add_row")?;
                let mut db = vec![T::zero(); d];
                for row in g.data().chunks(d.max(1)) {
                    for (s, &x) in db.iter_mut().zip(row) {
                        *s = *s + x;
                    }
                }
                accumulate(grads, *b, Tensor::new(val(*b).shape(), db)?)?;
            }
        }
        Op::MulCol(a, c) => {
            let (av, cv) = (val(*a), val(*c));
            if needs(*a) {
                accumulate(grads, *a, col_apply(g, cv, "mul_col", |g, s| g * s)?)?;
            }
            if needs(*c) {
                let (_, d) = rank2(g, "mul_col")?;
                let dc = g
                    .data()
                    .chunks(d.max(1))
                    .zip(av.data().chunks(d.max(1)))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(&g, &a)| g * a).sum())
                    .collect();
                accumulate(grads, *c, Tensor::new(cv.shape(), dc)?)?;
            }
        }
        Op::DivCol(a, c) => {
            let cv = val(*c);
            if needs(*a) {
                accumulate(grads, *a, col_apply(g, cv, "div_col", |g, s| g / s)?)?;
            }
            if needs(*c) {
                // d(x/s)/ds = -y/s
                let y = &nodes[id].value;
                let (_, d) = rank2(g, "div_col")?;
                let dc = g
                    .data()
                    .chunks(d.max(1))
                    .zip(y.data().chunks(d.max(1)))
                    .zip(cv.data())
                    .map(|((gr, yr), &s)| {
                        -gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / s
                    })
                    .collect();
                accumulate(grads, *c, Tensor::new(cv.shape(), dc)?)?;
            }
        }
        Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape())?)?,
        Op::RotatePairs { x, cos, sin } => accumulate(grads, *x, rotate(g, cos, sin, true)?)?,
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let lv = val(*logits);
            let (_, c) = rank2(lv, "cross_entropy")?;
            let n = T::from_usize(targets.len()).unwrap();
            let scale = g.item() / n;
            let mut dl = vec![T::zero(); lv.numel()];
            for (k, &(row, class)) in targets.iter().enumerate() {
                let p = &probs[k * c..(k + 1) * c];
                for j in 0..c {
                    dl[row * c + j] = dl[row * c + j] + p[j] * scale;
                }
                dl[row * c + class] = dl[row * c + class] - scale;
            }
            accumulate(grads, *logits, Tensor::new(lv.shape(), dl)?)?;
        }
    }
    Ok(())
}

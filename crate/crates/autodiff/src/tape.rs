//! Eager operation tape and differentiable tensor handles.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};

use crate::tensor::check_shape;
use crate::{AutodiffError, ParameterStore, Real, Result, Tensor};

/// Lower clamp applied to probabilities before taking logarithms in the
/// cross-entropy losses.
pub const PROB_CLAMP: f64 = 1e-12;

struct Node<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

enum Op<F> {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, F),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    Gather {
        input: usize,
        index: Vec<Option<usize>>,
    },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        input: usize,
        targets: Vec<usize>,
    },
    BinaryCrossEntropy {
        input: usize,
        targets: Vec<F>,
    },
}

/// Records executed operations in topological order.
///
/// A tape is single-threaded. Use one tape per forward/backward pass; distinct
/// tapes can run on distinct threads against a shared, frozen
/// [`ParameterStore`].
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<HashMap<String, usize>>,
    generation: Cell<u64>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
    generation: u64,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Clone, Default)]
pub struct Gradients<F> {
    leaves: HashMap<usize, Vec<F>>,
    params: BTreeMap<String, Vec<F>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf created with `requires_grad = true`.
    pub fn get(&self, var: Var<'_, F>) -> Option<&[F]> {
        self.leaves.get(&var.id).map(Vec::as_slice)
    }

    pub fn param(&self, name: &str) -> Option<&[F]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &[F])> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            generation: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Handles created before the call become
    /// stale and panic on use.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.params.borrow_mut().clear();
        self.generation.set(self.generation.get() + 1);
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<F>) -> Var<'_, F> {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_values(), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`] when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&self, tensor: Tensor<F>) -> Var<'_, F> {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_values(), Op::Leaf, rg)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(Tensor::scalar(value))
    }

    /// Loads a named parameter. Repeated loads on the same tape return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&self, store: &ParameterStore<F>, name: &str) -> Result<Var<'_, F>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(self.handle(id));
        }
        let t = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        let v = self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Param(name.to_string()),
            t.requires_grad(),
        );
        self.params.borrow_mut().insert(name.to_string(), v.id);
        Ok(v)
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Contract("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(AutodiffError::Index {
                index: axis,
                len: base.len(),
            });
        }
        let mut axis_len = 0;
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::Dimension {
                    op: "concat",
                    left: base,
                    right: s,
                });
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = axis_len;
        let mut out = Vec::with_capacity(outer * axis_len * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.id];
                    let block = n.shape[axis] * inner;
                    out.extend_from_slice(&n.values[o * block..(o + 1) * block]);
                }
            }
        }
        let needs = parts.iter().any(|p| p.needs_grad());
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar. Visits every recorded node once, in
    /// reverse order, then clears the tape.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        self.check(loss);
        let grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.values.len() != 1 {
                return Err(AutodiffError::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    root.shape
                )));
            }
            run_backward(&nodes, loss.id)
        };
        self.clear();
        Ok(grads)
    }

    /// Backward pass that folds parameter gradients straight into `store`.
    pub fn backward_into(&self, loss: Var<'_, F>, store: &mut ParameterStore<F>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }

    fn handle(&self, id: usize) -> Var<'_, F> {
        Var {
            tape: self,
            id,
            generation: self.generation.get(),
        }
    }

    fn check(&self, v: Var<'_, F>) {
        assert!(
            std::ptr::eq(v.tape, self) && v.generation == self.generation.get(),
            "stale or foreign tensor handle"
        );
    }

    fn push(&self, shape: Vec<usize>, values: Vec<F>, op: Op<F>, needs_grad: bool) -> Var<'_, F> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
        });
        let id = nodes.len() - 1;
        drop(nodes);
        self.handle(id)
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.check(*self);
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.check(*self);
        self.tape.nodes.borrow()[self.id].values.len()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.tape.check(*self);
        self.tape.nodes.borrow()[self.id].values.clone()
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.check(*self);
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.values.clone()).expect("recorded shapes are valid")
    }

    /// First element; intended for scalars.
    pub fn item(&self) -> F {
        self.tape.check(*self);
        self.tape.nodes.borrow()[self.id].values[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.check(*self);
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn with<R>(&self, f: impl FnOnce(&Node<F>) -> R) -> R {
        self.tape.check(*self);
        f(&self.tape.nodes.borrow()[self.id])
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(AutodiffError::Dimension {
                op: "matmul",
                left: ls,
                right: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let out = {
            let nodes = self.tape.nodes.borrow();
            matmul_raw(&nodes[self.id].values, &nodes[rhs.id].values, m, k, n)
        };
        let needs = self.needs_grad() || rhs.needs_grad();
        Ok(self
            .tape
            .push(vec![m, n], out, Op::MatMul(self.id, rhs.id), needs))
    }

    /// Elementwise sum; shapes must match or one side must be a scalar.
    #[allow(clippy::should_implement_trait)] // fallible, so not the operator trait
    pub fn add(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        let (shape, out) = self.broadcast_binary(rhs, "add", |a, b| a + b)?;
        let needs = self.needs_grad() || rhs.needs_grad();
        Ok(self.tape.push(shape, out, Op::Add(self.id, rhs.id), needs))
    }

    /// Elementwise product; shapes must match or one side must be a scalar.
    #[allow(clippy::should_implement_trait)] // fallible, so not the operator trait
    pub fn mul(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        let (shape, out) = self.broadcast_binary(rhs, "mul", |a, b| a * b)?;
        let needs = self.needs_grad() || rhs.needs_grad();
        Ok(self.tape.push(shape, out, Op::Mul(self.id, rhs.id), needs))
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not the operator trait
    pub fn sub(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.add(rhs.scale(-F::one()))
    }

    /// Adds a `[n]` (or `[1, n]`) row to every row of a `[m, n]` matrix.
    pub fn add_row(self, row: Var<'t, F>) -> Result<Var<'t, F>> {
        let (ls, rs) = (self.shape(), row.shape());
        let n = *ls.last().unwrap_or(&0);
        if ls.len() != 2 || row.numel() != n {
            return Err(AutodiffError::Dimension {
                op: "add_row",
                left: ls,
                right: rs,
            });
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let b = &nodes[row.id].values;
            nodes[self.id]
                .values
                .chunks(n)
                .flat_map(|r| r.iter().zip(b).map(|(x, y)| *x + *y))
                .collect()
        };
        let needs = self.needs_grad() || row.needs_grad();
        Ok(self.tape.push(ls, out, Op::AddRow(self.id, row.id), needs))
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        let (shape, out) =
            self.with(|n| (n.shape.clone(), n.values.iter().map(|v| *v * c).collect()));
        self.tape
            .push(shape, out, Op::Scale(self.id, c), self.needs_grad())
    }

    /// `max(x, 0)`; the subgradient at zero is zero.
    pub fn relu(self) -> Var<'t, F> {
        let (shape, out) = self.with(|n| {
            (
                n.shape.clone(),
                n.values
                    .iter()
                    .map(|v| if *v > F::zero() { *v } else { F::zero() })
                    .collect(),
            )
        });
        self.tape
            .push(shape, out, Op::Relu(self.id), self.needs_grad())
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        let (shape, out) = self.with(|n| {
            (
                n.shape.clone(),
                n.values.iter().map(|v| sigmoid(*v)).collect(),
            )
        });
        self.tape
            .push(shape, out, Op::Sigmoid(self.id), self.needs_grad())
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::Index {
                index: axis,
                len: shape.len(),
            });
        }
        let out = self.with(|n| softmax_raw(&n.values, &n.shape, axis));
        Ok(self.tape.push(
            shape,
            out,
            Op::Softmax {
                input: self.id,
                axis,
            },
            self.needs_grad(),
        ))
    }

    /// General gather: `out[o] = self[index[o]]`, or zero for `None`.
    /// Gradients scatter-add back into the source positions.
    pub fn gather(self, index: Vec<Option<usize>>, shape: Vec<usize>) -> Result<Var<'t, F>> {
        check_shape(&shape, index.len())?;
        let len = self.numel();
        if let Some(bad) = index.iter().flatten().find(|i| **i >= len) {
            return Err(AutodiffError::Index { index: *bad, len });
        }
        let out = self.with(|n| {
            index
                .iter()
                .map(|i| i.map_or(F::zero(), |i| n.values[i]))
                .collect()
        });
        Ok(self.tape.push(
            shape,
            out,
            Op::Gather {
                input: self.id,
                index,
            },
            self.needs_grad(),
        ))
    }

    /// Selects rows of a rank-2 tensor (rows may repeat).
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(AutodiffError::Dimension {
                op: "select_rows",
                left: shape,
                right: vec![rows.len()],
            });
        }
        let c = shape[1];
        if let Some(bad) = rows.iter().find(|r| **r >= shape[0]) {
            return Err(AutodiffError::Index {
                index: *bad,
                len: shape[0],
            });
        }
        let index = rows
            .iter()
            .flat_map(|r| (0..c).map(move |j| Some(r * c + j)))
            .collect();
        self.gather(index, vec![rows.len(), c])
    }

    pub fn transpose(self) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(AutodiffError::Dimension {
                op: "transpose",
                left: shape,
                right: vec![],
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let out = self.with(|node| {
            let mut out = vec![F::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = node.values[i * n + j];
                }
            }
            out
        });
        Ok(self
            .tape
            .push(vec![n, m], out, Op::Transpose(self.id), self.needs_grad()))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, F>> {
        check_shape(&shape, self.numel())?;
        let out = self.to_vec();
        Ok(self
            .tape
            .push(shape, out, Op::Reshape(self.id), self.needs_grad()))
    }

    pub fn sum(self) -> Var<'t, F> {
        let s = self.with(|n| n.values.iter().copied().sum());
        self.tape
            .push(vec![1], vec![s], Op::Sum(self.id), self.needs_grad())
    }

    pub fn mean(self) -> Var<'t, F> {
        let s = self
            .with(|n| n.values.iter().copied().sum::<F>() / F::from_usize(n.values.len()).unwrap());
        self.tape
            .push(vec![1], vec![s], Op::Mean(self.id), self.needs_grad())
    }

    /// Copy of the value with no gradient path back to `self`.
    pub fn detach(self) -> Var<'t, F> {
        let (shape, values) = self.with(|n| (n.shape.clone(), n.values.clone()));
        self.tape.push(shape, values, Op::Leaf, false)
    }

    /// `-ln(p[target])` for a probability vector `p`, with `p` clamped to
    /// `[PROB_CLAMP, 1]`.
    pub fn cross_entropy(self, target: usize) -> Result<Var<'t, F>> {
        self.cross_entropy_rows(&[target])
    }

    /// Mean cross-entropy over the rows of a tensor whose last axis holds
    /// probability distributions; one target class per row.
    pub fn cross_entropy_rows(self, targets: &[usize]) -> Result<Var<'t, F>> {
        let shape = self.shape();
        let classes = *shape.last().unwrap();
        let rows = self.numel() / classes;
        if targets.len() != rows {
            return Err(AutodiffError::Dimension {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|t| **t >= classes) {
            return Err(AutodiffError::Index {
                index: *bad,
                len: classes,
            });
        }
        let tol = F::lit(1e-6).max(F::epsilon() * F::from_usize(16 * classes).unwrap());
        let loss = self.with(|n| -> Result<F> {
            let mut total = F::zero();
            for (r, t) in targets.iter().enumerate() {
                let row = &n.values[r * classes..(r + 1) * classes];
                let s: F = row.iter().copied().sum();
                if (s - F::one()).abs() > tol || row.iter().any(|p| *p < F::zero()) {
                    return Err(AutodiffError::Validation(format!(
                        "cross_entropy input row {r} is not a probability vector (sum {s})"
                    )));
                }
                total = total - clamp_prob(row[*t]).ln();
            }
            Ok(total / F::from_usize(rows).unwrap())
        })?;
        Ok(self.tape.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                input: self.id,
                targets: targets.to_vec(),
            },
            self.needs_grad(),
        ))
    }

    /// Mean binary cross-entropy against 0/1 targets of the same size.
    pub fn binary_cross_entropy(self, targets: &[F]) -> Result<Var<'t, F>> {
        let n = self.numel();
        if targets.len() != n {
            return Err(AutodiffError::Dimension {
                op: "binary_cross_entropy",
                left: self.shape(),
                right: vec![targets.len()],
            });
        }
        if targets.iter().any(|t| *t != F::zero() && *t != F::one()) {
            return Err(AutodiffError::Validation(
                "binary_cross_entropy targets must be 0 or 1".into(),
            ));
        }
        let loss = self.with(|node| -> Result<F> {
            let mut total = F::zero();
            for (p, t) in node.values.iter().zip(targets) {
                if *p < F::zero() || *p > F::one() || p.is_nan() {
                    return Err(AutodiffError::Validation(format!(
                        "binary_cross_entropy prediction {p} outside [0, 1]"
                    )));
                }
                total = total
                    - (*t * clamp_prob(*p).ln() + (F::one() - *t) * clamp_prob(F::one() - *p).ln());
            }
            Ok(total / F::from_usize(n).unwrap())
        })?;
        Ok(self.tape.push(
            vec![1],
            vec![loss],
            Op::BinaryCrossEntropy {
                input: self.id,
                targets: targets.to_vec(),
            },
            self.needs_grad(),
        ))
    }

    fn broadcast_binary(
        self,
        rhs: Var<'t, F>,
        op: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Vec<usize>, Vec<F>)> {
        let nodes = self.tape.nodes.borrow();
        self.tape.check(rhs);
        self.tape.check(self);
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        if a.shape == b.shape {
            let out = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| f(*x, *y))
                .collect();
            Ok((a.shape.clone(), out))
        } else if b.values.len() == 1 {
            let y = b.values[0];
            Ok((a.shape.clone(), a.values.iter().map(|x| f(*x, y)).collect()))
        } else if a.values.len() == 1 {
            let x = a.values[0];
            Ok((b.shape.clone(), b.values.iter().map(|y| f(x, *y)).collect()))
        } else {
            Err(AutodiffError::Dimension {
                op,
                left: a.shape.clone(),
                right: b.shape.clone(),
            })
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn clamp_prob<F: Real>(p: F) -> F {
    p.max(F::lit(PROB_CLAMP)).min(F::one())
}

fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
    out
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_raw<F: Real>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (outer, len, inner) = axis_strides(shape, axis);
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                z = z + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / z;
            }
        }
    }
    out
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], id: usize, delta: Vec<F>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn run_backward<F: Real>(nodes: &[Node<F>], root: usize) -> Gradients<F> {
    let mut grads: Vec<Option<Vec<F>>> = (0..=root).map(|_| None).collect();
    grads[root] = Some(vec![F::one()]);
    let mut out = Gradients {
        leaves: HashMap::new(),
        params: BTreeMap::new(),
    };

    for id in (0..=root).rev() {
        let node = &nodes[id];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let wants = |i: usize| nodes[i].needs_grad;

        match &node.op {
            Op::Leaf => {
                out.leaves.insert(id, g);
            }
            Op::Param(name) => {
                out.params.insert(name.clone(), g);
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![F::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = F::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * nb.values[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![F::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = na.values[i * k + p];
                            if av == F::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] = db[p * n + j] + av * g[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                for &side in &[*a, *b] {
                    if wants(side) {
                        let d = reduce_broadcast(&g, nodes[side].values.len());
                        accumulate(&mut grads, side, d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[*a].values, &nodes[*b].values);
                let pick = |v: &[F], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                if wants(*a) {
                    let full: Vec<F> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| *gi * pick(vb, i))
                        .collect();
                    accumulate(&mut grads, *a, reduce_broadcast(&full, va.len()));
                }
                if wants(*b) {
                    let full: Vec<F> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| *gi * pick(va, i))
                        .collect();
                    accumulate(&mut grads, *b, reduce_broadcast(&full, vb.len()));
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads, *a, g.clone());
                }
                if wants(*b) {
                    let n = nodes[*b].values.len();
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d = *d + *x;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    accumulate(&mut grads, *a, g.iter().map(|x| *x * *c).collect());
                }
            }
            Op::Concat { inputs, axis } => {
                let inner: usize = node.shape[axis + 1..].iter().product();
                let outer: usize = node.shape[..*axis].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &inp in inputs {
                    let block = nodes[inp].shape[*axis] * inner;
                    if wants(inp) {
                        let mut d = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g[start..start + block]);
                        }
                        accumulate(&mut grads, inp, d);
                    }
                    offset += block;
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = &nodes[*a].values;
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > F::zero() { *gi } else { F::zero() })
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let d = g
                        .iter()
                        .zip(&node.values)
                        .map(|(gi, y)| *gi * *y * (F::one() - *y))
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
            }
            Op::Softmax { input, axis } => {
                if wants(*input) {
                    let (outer, len, inner) = axis_strides(&node.shape, *axis);
                    let y = &node.values;
                    let mut d = vec![F::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: F = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                d[at(k)] = y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
            }
            Op::Gather { input, index } => {
                if wants(*input) {
                    let mut d = vec![F::zero(); nodes[*input].values.len()];
                    for (o, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            d[*s] = d[*s] + g[o];
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    // node is [n, m]; input is [m, n]
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let mut d = vec![F::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    accumulate(&mut grads, *a, g);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    accumulate(&mut grads, *a, vec![g[0]; nodes[*a].values.len()]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = nodes[*a].values.len();
                    let v = g[0] / F::from_usize(n).unwrap();
                    accumulate(&mut grads, *a, vec![v; n]);
                }
            }
            Op::CrossEntropy { input, targets } => {
                if wants(*input) {
                    let x = &nodes[*input];
                    let classes = *x.shape.last().unwrap();
                    let scale = g[0] / F::from_usize(targets.len()).unwrap();
                    let mut d = vec![F::zero(); x.values.len()];
                    let eps = F::lit(PROB_CLAMP);
                    for (r, t) in targets.iter().enumerate() {
                        let i = r * classes + t;
                        let p = x.values[i];
                        if p >= eps {
                            d[i] = -scale / p;
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
            }
            Op::BinaryCrossEntropy { input, targets } => {
                if wants(*input) {
                    let x = &nodes[*input].values;
                    let scale = g[0] / F::from_usize(x.len()).unwrap();
                    let eps = F::lit(PROB_CLAMP);
                    let d = x
                        .iter()
                        .zip(targets)
                        .map(|(p, t)| {
                            let q = F::one() - *p;
                            let mut v = F::zero();
                            if *p >= eps {
                                v = v - *t / *p;
                            }
                            if q >= eps {
                                v = v + (F::one() - *t) / q;
                            }
                            v * scale
                        })
                        .collect();
                    accumulate(&mut grads, *input, d);
                }
            }
        }
    }
    out
}

fn reduce_broadcast<F: Real>(g: &[F], len: usize) -> Vec<F> {
    if g.len() == len {
        g.to_vec()
    } else {
        vec![g.iter().copied().sum()]
    }
}

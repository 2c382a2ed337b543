//! Conditional probability tables and the joint distribution over node outcomes.
//!
//! Node `l` owns a full-rank table `W^l` of shape `C_1 x ... x C_L`, normalized
//! along its own mode. Its conditional given its parents is `W^l` contracted
//! against a parent vector on every other mode: the node's one-hot outcome for
//! a parent, the uniform vector for a non-parent, and a convex blend when the
//! edge score is relaxed.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dag::{EdgeScores, HardDag};
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dense::contiguous_strides, Graph, Tensor, Var};

/// Largest table the enumeration oracle accepts.
pub const BRUTE_FORCE_MAX_NODES: usize = 10;
pub const BRUTE_FORCE_MAX_CELLS: usize = 4096;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CausalTables<T> {
    /// One unconstrained tensor of shape `arities` per node.
    pub w_logits: Vec<Tensor<T>>,
    pub arities: Vec<usize>,
}

/// `p(N_1, ..., N_L)` laid out with the natural node order as modes.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTensor<T> {
    pub a: Tensor<T>,
}

impl<T: Scalar> CausalTables<T> {
    pub fn new(w_logits: Vec<Tensor<T>>, arities: Vec<usize>) -> Result<Self> {
        if arities.is_empty() || arities.contains(&0) {
            return Err(contract("causal_tables", format!("invalid arities {arities:?}")));
        }
        if w_logits.len() != arities.len() || w_logits.iter().any(|w| w.shape() != arities.as_slice()) {
            return Err(contract(
                "causal_tables",
                format!("need {} logit tensors of shape {arities:?}", arities.len()),
            ));
        }
        Ok(Self { w_logits, arities })
    }

    /// Logits drawn from `Normal(0, std^2)`.
    pub fn init<R: Rng + ?Sized>(arities: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let w = (0..arities.len())
            .map(|_| Tensor::from_fn(arities, |_| T::lit(normal.sample(rng))))
            .collect();
        Self::new(w, arities.to_vec())
    }

    pub fn nodes(&self) -> usize {
        self.arities.len()
    }

    pub fn cells(&self) -> usize {
        self.arities.iter().product()
    }

    /// `W^l = softmax(logits_l)` along mode `l`.
    pub fn table(&self, ell: usize) -> Result<Tensor<T>> {
        self.w_logits
            .get(ell)
            .ok_or_else(|| contract("table", format!("node {ell} out of range")))?
            .softmax(ell)
    }
}

impl<T: Scalar> JointTensor<T> {
    pub fn total(&self) -> T {
        self.a.sum_all()
    }

    /// Marginal distribution of a single node.
    pub fn marginal(&self, ell: usize) -> Result<Vec<T>> {
        let axes: Vec<usize> = (0..self.a.ndim()).filter(|&k| k != ell).collect();
        if axes.len() == self.a.ndim() {
            return Err(contract("marginal", format!("node {ell} out of range")));
        }
        Ok(self.a.reduce(crate::tensor::ReduceOp::Sum, &axes, false)?.into_data())
    }
}

/// `v = (1/C) 1 - E (1/C 1 - N_k)`. A missing node vector is only allowed when `E = 0`.
pub fn parent_vector<T: Scalar>(node: Option<&[T]>, e_k_ell: T, arity: usize) -> Result<Vec<T>> {
    let u = T::one() / T::from_usize_lossy(arity);
    match node {
        Some(n) => {
            if n.len() != arity {
                return Err(contract(
                    "parent_vector",
                    format!("node vector has length {}, arity is {arity}", n.len()),
                ));
            }
            Ok(n.iter().map(|&x| u - e_k_ell * (u - x)).collect())
        }
        None if e_k_ell == T::zero() => Ok(vec![u; arity]),
        None => Err(contract("parent_vector", "missing node value for a node with a positive edge")),
    }
}

/// `pi_l`: `W^l` contracted on every mode `k != l` against its parent vector.
/// `e_column[k]` is `E[k][l]`; `node_values[l]` is ignored.
pub fn node_conditional<T: Scalar>(
    tables: &CausalTables<T>,
    ell: usize,
    e_column: &[T],
    node_values: &[Option<Vec<T>>],
) -> Result<Vec<T>> {
    let l = tables.nodes();
    if ell >= l || e_column.len() != l || node_values.len() != l {
        return Err(contract("node_conditional", "node index or argument lengths do not match"));
    }
    let mut w = tables.table(ell)?;
    // Contract from the last mode down so earlier mode indices stay valid.
    for k in (0..l).rev() {
        if k == ell {
            continue;
        }
        let v = parent_vector(node_values[k].as_deref(), e_column[k], tables.arities[k])?;
        w = w.mode_contract(&Tensor::from_vec(v), k)?;
    }
    Ok(w.into_data())
}

fn order_positions(order: &[usize], l: usize) -> Result<Vec<usize>> {
    let mut pos = vec![usize::MAX; l];
    if order.len() != l {
        return Err(contract("joint_tensor", "order is not a permutation of the nodes"));
    }
    for (p, &n) in order.iter().enumerate() {
        if n >= l || pos[n] != usize::MAX {
            return Err(contract("joint_tensor", "order is not a permutation of the nodes"));
        }
        pos[n] = p;
    }
    Ok(pos)
}

fn check_forward_edges<T: Scalar>(e: &Tensor<T>, pos: &[usize]) -> Result<()> {
    let l = pos.len();
    if e.shape() != [l, l] {
        return Err(contract("joint_tensor", format!("edge scores have shape {:?}", e.shape())));
    }
    for i in 0..l {
        for j in 0..l {
            let x = e.data()[i * l + j];
            if x > T::zero() && pos[i] >= pos[j] {
                return Err(contract(
                    "joint_tensor",
                    format!("edge {i}->{j} points backward in the traversal order"),
                ));
            }
        }
    }
    Ok(())
}

/// Differentiable joint tensor. `logits[l]` holds node `l`'s unconstrained
/// table; `e` is the `[L, L]` edge score matrix indexed `[parent][child]`.
pub fn joint_var<'g, T: Scalar>(logits: &[Var<'g, T>], e: Var<'g, T>, order: &[usize]) -> Result<Var<'g, T>> {
    let l = logits.len();
    if l == 0 {
        return Err(contract("joint_tensor", "no nodes"));
    }
    let pos = order_positions(order, l)?;
    check_forward_edges(&e.value(), &pos)?;
    let mut a: Option<Var<'g, T>> = None;
    for (p, &ell) in order.iter().enumerate() {
        let mut w = logits[ell].softmax(ell)?;
        let later: Vec<usize> = order[p + 1..].to_vec();
        if !later.is_empty() {
            w = w.mean(&later, true)?;
        }
        for &k in &order[..p] {
            let ekl = e.entry2(k, ell)?;
            let avg = w.mean(&[k], true)?;
            // E w + (1 - E) avg, written as avg + E (w - avg)
            w = avg.add(ekl.mul(w.sub(avg)?)?)?;
        }
        a = Some(match a {
            None => w,
            Some(prev) => prev.mul(w)?,
        });
    }
    Ok(a.expect("at least one node"))
}

/// Numeric joint tensor with relaxed or binary edge scores.
pub fn joint_tensor<T: Scalar>(tables: &CausalTables<T>, e: &EdgeScores<T>, order: &[usize]) -> Result<JointTensor<T>> {
    let g = Graph::new();
    let logits: Vec<_> = tables.w_logits.iter().map(|w| g.constant(w.clone())).collect();
    let ev = g.constant(e.e.clone());
    let a = joint_var(&logits, ev, order)?;
    let a = a.value().as_ref().clone();
    Ok(JointTensor { a })
}

pub fn joint_tensor_hard<T: Scalar>(tables: &CausalTables<T>, dag: &HardDag) -> Result<JointTensor<T>> {
    joint_tensor(tables, &dag.edge_scores(), &dag.topo_order)
}

fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for d in (0..shape.len()).rev() {
        out[d] = flat % shape[d];
        flat /= shape[d];
    }
}

/// `p(N_l = idx[l] | parents)` by averaging `W^l` over the free non-parent modes.
fn conditional_entry<T: Scalar>(w: &Tensor<T>, arities: &[usize], ell: usize, fixed: &[bool], idx: &[usize]) -> T {
    let strides = contiguous_strides(arities);
    let free: Vec<usize> = (0..arities.len()).filter(|&k| !fixed[k] && k != ell).collect();
    let free_shape: Vec<usize> = free.iter().map(|&k| arities[k]).collect();
    let count: usize = free_shape.iter().product();
    let mut sub = vec![0usize; free.len()];
    let mut sum = T::zero();
    for f in 0..count {
        unravel(f, &free_shape, &mut sub);
        let mut off = 0;
        for k in 0..arities.len() {
            let i = match free.iter().position(|&x| x == k) {
                Some(s) => sub[s],
                None => idx[k],
            };
            off += i * strides[k];
        }
        sum += w.data()[off];
    }
    sum / T::from_usize_lossy(count)
}

/// Markov-factorization oracle: every outcome's probability as the explicit
/// product of per-node conditionals.
pub fn brute_force_joint<T: Scalar>(tables: &CausalTables<T>, dag: &HardDag) -> Result<JointTensor<T>> {
    let l = tables.nodes();
    let cells = tables.cells();
    if l > BRUTE_FORCE_MAX_NODES || cells > BRUTE_FORCE_MAX_CELLS {
        return Err(Error::Capacity(format!(
            "enumeration limited to {BRUTE_FORCE_MAX_NODES} nodes and {BRUTE_FORCE_MAX_CELLS} cells, got {l} and {cells}"
        )));
    }
    if dag.nodes != l {
        return Err(contract("brute_force_joint", "graph and tables disagree on node count"));
    }
    let ws: Vec<Tensor<T>> = (0..l).map(|k| tables.table(k)).collect::<Result<_>>()?;
    let parent_masks: Vec<Vec<bool>> = (0..l)
        .map(|ell| (0..l).map(|k| dag.has_edge(k, ell)).collect())
        .collect();
    let mut idx = vec![0usize; l];
    let mut data = Vec::with_capacity(cells);
    for flat in 0..cells {
        unravel(flat, &tables.arities, &mut idx);
        let mut p = T::one();
        for ell in 0..l {
            p *= conditional_entry(&ws[ell], &tables.arities, ell, &parent_masks[ell], &idx);
        }
        data.push(p);
    }
    let a = Tensor::new(tables.arities.clone(), data)?;
    let total = a.sum_all();
    Ok(JointTensor { a: a.scale(T::one() / total) })
}

/// Table of `p(N_l = n | parent configuration)`, one row per parent
/// configuration. Node and outcome labels are 1-based.
pub fn conditional_table_csv<T: Scalar>(tables: &CausalTables<T>, dag: &HardDag, ell: usize) -> Result<String> {
    let l = tables.nodes();
    if ell >= l {
        return Err(contract("conditional_table_csv", format!("node {ell} out of range")));
    }
    let w = tables.table(ell)?;
    let parents = dag.parents(ell);
    let fixed: Vec<bool> = (0..l).map(|k| parents.contains(&k)).collect();
    let mut s = String::new();
    let mut header: Vec<String> = parents.iter().map(|k| format!("N{}", k + 1)).collect();
    header.extend((0..tables.arities[ell]).map(|n| format!("p(N{}={})", ell + 1, n + 1)));
    s.push_str(&header.join(","));
    s.push('\n');
    let pshape: Vec<usize> = parents.iter().map(|&k| tables.arities[k]).collect();
    let configs: usize = pshape.iter().product();
    let mut sub = vec![0usize; parents.len()];
    let mut idx = vec![0usize; l];
    for c in 0..configs {
        unravel(c, &pshape, &mut sub);
        for (s_i, &k) in parents.iter().enumerate() {
            idx[k] = sub[s_i];
        }
        let mut row: Vec<String> = sub.iter().map(|i| (i + 1).to_string()).collect();
        for n in 0..tables.arities[ell] {
            idx[ell] = n;
            row.push(format!("{:.6}", conditional_entry(&w, &tables.arities, ell, &fixed, &idx).to_f64_lossy()));
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

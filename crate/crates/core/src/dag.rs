//! Differentiable DAG parametrization.
//!
//! Each node carries a score `xi`; every ordered pair `(i, j)` gets the flow
//! `F[i][j] = B[i][j] * (xi[j] - xi[i])` where `B = softplus(b_raw)` is a
//! nonnegative edge metric. The relaxed indicator `E = relu(tanh(F / beta))`
//! can only be positive when `xi[i] < xi[j]`, so sorting nodes by score
//! always yields a strictly upper triangular `E`: acyclicity holds by
//! construction and no penalty term is required.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::{softplus, softplus_inverse, Scalar};
use crate::tensor::{Graph, Tensor, Var};

/// Default threshold below which an edge weight counts as absent.
pub const DEFAULT_ZERO_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagParams<T> {
    /// Node scores, shape `[L]`.
    pub xi: Tensor<T>,
    /// Unconstrained edge weights, shape `[L, L]`; `B = softplus(b_raw)`.
    pub b_raw: Tensor<T>,
    pub beta: T,
}

/// Relaxed adjacency, entries in `[0, 1)`, indexed `[parent][child]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeScores<T> {
    pub e: Tensor<T>,
}

/// Extracted hard graph with a traversal order (ancestors first).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardDag {
    /// Row-major `L x L`, `adjacency[i * L + j]` is the edge `i -> j`.
    pub adjacency: Vec<bool>,
    pub topo_order: Vec<usize>,
    pub nodes: usize,
}

impl<T: Scalar> DagParams<T> {
    pub fn new(xi: Tensor<T>, b_raw: Tensor<T>, beta: T) -> Result<Self> {
        let l = xi.len();
        if xi.ndim() != 1 || l == 0 {
            return Err(contract("dag_params", "xi must be a non-empty vector"));
        }
        if b_raw.shape() != [l, l] {
            return Err(contract(
                "dag_params",
                format!("b_raw shape {:?} does not match {l} nodes", b_raw.shape()),
            ));
        }
        if !(beta > T::zero()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { xi, b_raw, beta })
    }

    /// Scores drawn from `Normal(0, xi_std^2)`, raw weights at `b_raw_init`.
    pub fn init<R: Rng + ?Sized>(nodes: usize, xi_std: f64, b_raw_init: f64, beta: T, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, xi_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let xi = Tensor::from_fn(&[nodes], |_| T::lit(normal.sample(rng)));
        let b_raw = Tensor::full(&[nodes, nodes], T::lit(b_raw_init));
        Self::new(xi, b_raw, beta)
    }

    pub fn nodes(&self) -> usize {
        self.xi.len()
    }

    /// Nonnegative metric `B` with a zero diagonal.
    pub fn edge_weights(&self) -> Tensor<T> {
        let l = self.nodes();
        let mut b = self.b_raw.map(softplus);
        for i in 0..l {
            b.data_mut()[i * l + i] = T::zero();
        }
        b
    }
}

/// `F[i][j] = B[i][j] * (xi[j] - xi[i])`.
pub fn edge_flows<T: Scalar>(p: &DagParams<T>) -> Tensor<T> {
    let l = p.nodes();
    let b = p.edge_weights();
    let xi = p.xi.data();
    Tensor::from_fn(&[l, l], |k| {
        let (i, j) = (k / l, k % l);
        b.data()[k] * (xi[j] - xi[i])
    })
}

/// `E[i][j] = relu(tanh(F[i][j] / beta))`.
pub fn edge_indicator<T: Scalar>(p: &DagParams<T>) -> EdgeScores<T> {
    let inv = T::one() / p.beta;
    let e = edge_flows(p).map(|f| {
        let t = (f * inv).tanh();
        if t > T::zero() {
            t
        } else {
            T::zero()
        }
    });
    EdgeScores { e }
}

fn off_diagonal_mask<T: Scalar>(l: usize) -> Tensor<T> {
    Tensor::from_fn(&[l, l], |k| if k / l == k % l { T::zero() } else { T::one() })
}

/// Differentiable flows from tape variables `xi` (`[L]`) and `b_raw` (`[L, L]`).
pub fn edge_flows_var<'g, T: Scalar>(xi: Var<'g, T>, b_raw: Var<'g, T>) -> Result<Var<'g, T>> {
    let g = xi.graph();
    let l = xi.value().len();
    let b = b_raw.softplus().mul(g.constant(off_diagonal_mask(l)))?;
    let row = xi.reshape(&[1, l])?; // xi[j]
    let col = xi.reshape(&[l, 1])?; // xi[i]
    b.mul(row.sub(col)?)
}

pub fn edge_indicator_var<'g, T: Scalar>(xi: Var<'g, T>, b_raw: Var<'g, T>, beta: T) -> Result<Var<'g, T>> {
    Ok(edge_flows_var(xi, b_raw)?.mul_scalar(T::one() / beta).tanh().relu())
}

/// L1 size of the edge metric, `sum_ij B[i][j]` off the diagonal.
pub fn edge_l1_var<'g, T: Scalar>(g: &'g Graph<T>, b_raw: Var<'g, T>) -> Result<Var<'g, T>> {
    let l = b_raw.value().shape()[0];
    Ok(b_raw.softplus().mul(g.constant(off_diagonal_mask(l)))?.sum_all())
}

/// Stable ascending argsort of node scores; ties broken by node index.
pub fn score_order<T: Scalar>(xi: &Tensor<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..xi.len()).collect();
    order.sort_by(|&a, &b| {
        xi.data()[a]
            .partial_cmp(&xi.data()[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// The `beta -> 0` limit: edge `i -> j` iff `B[i][j] > zero_tol` and `xi[i] < xi[j]`.
pub fn hard_adjacency<T: Scalar>(p: &DagParams<T>, zero_tol: f64) -> HardDag {
    let l = p.nodes();
    let b = p.edge_weights();
    let xi = p.xi.data();
    let adjacency = (0..l * l)
        .map(|k| {
            let (i, j) = (k / l, k % l);
            i != j && b.data()[k].to_f64_lossy() > zero_tol && xi[i] < xi[j]
        })
        .collect();
    HardDag {
        adjacency,
        topo_order: score_order(&p.xi),
        nodes: l,
    }
}

/// `sum_{k=1..L} trace(A^k)`, zero exactly when the graph has no cycle.
pub fn trace_power_sum(adjacency: &[bool], l: usize) -> f64 {
    let a: Vec<f64> = adjacency.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    let mut power = a.clone();
    let mut total = 0.0;
    for step in 1..=l {
        total += (0..l).map(|i| power[i * l + i]).sum::<f64>();
        if step == l {
            break;
        }
        let mut next = vec![0.0; l * l];
        for i in 0..l {
            for k in 0..l {
                let pik = power[i * l + k];
                if pik == 0.0 {
                    continue;
                }
                for j in 0..l {
                    next[i * l + j] += pik * a[k * l + j];
                }
            }
        }
        power = next;
    }
    total
}

impl HardDag {
    pub fn from_adjacency(adjacency: Vec<bool>, nodes: usize) -> Result<Self> {
        if adjacency.len() != nodes * nodes {
            return Err(contract("hard_dag", "adjacency is not square"));
        }
        if trace_power_sum(&adjacency, nodes) != 0.0 {
            return Err(Error::Acyclic("adjacency contains a cycle".into()));
        }
        let topo_order = topological_order(&adjacency, nodes);
        Ok(Self {
            adjacency,
            topo_order,
            nodes,
        })
    }

    pub fn empty(nodes: usize) -> Self {
        Self {
            adjacency: vec![false; nodes * nodes],
            topo_order: (0..nodes).collect(),
            nodes,
        }
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from * self.nodes + to]
    }

    pub fn parents(&self, child: usize) -> Vec<usize> {
        (0..self.nodes).filter(|&k| self.has_edge(k, child)).collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.nodes * self.nodes)
            .filter(|&k| self.adjacency[k])
            .map(|k| (k / self.nodes, k % self.nodes))
            .collect()
    }

    pub fn is_acyclic(&self) -> bool {
        trace_power_sum(&self.adjacency, self.nodes) == 0.0
    }

    /// True when every edge points forward in `order`.
    pub fn order_is_consistent(&self, order: &[usize]) -> bool {
        let mut pos = vec![usize::MAX; self.nodes];
        for (p, &n) in order.iter().enumerate() {
            if n < self.nodes {
                pos[n] = p;
            }
        }
        pos.iter().all(|&p| p != usize::MAX) && self.edges().iter().all(|&(i, j)| pos[i] < pos[j])
    }

    /// Binary edge scores, for feeding the hard graph to the joint computation.
    pub fn edge_scores<T: Scalar>(&self) -> EdgeScores<T> {
        let e = Tensor::from_fn(&[self.nodes, self.nodes], |k| {
            if self.adjacency[k] {
                T::one()
            } else {
                T::zero()
            }
        });
        EdgeScores { e }
    }

    /// Graphviz rendering; edges are annotated with their relaxed score
    /// when `scores` is given.
    pub fn to_dot<T: Scalar>(&self, scores: Option<&EdgeScores<T>>, names: Option<&[String]>, zero_tol: f64) -> String {
        let mut s = String::from("digraph dag {\n");
        let _ = writeln!(s, "  // zero_tol={zero_tol}");
        for n in 0..self.nodes {
            let label = names
                .and_then(|v| v.get(n).cloned())
                .unwrap_or_else(|| format!("N{}", n + 1));
            let _ = writeln!(s, "  n{n} [label=\"{label}\"];");
        }
        for (i, j) in self.edges() {
            match scores {
                Some(e) => {
                    let w = e.e.data()[i * self.nodes + j].to_f64_lossy();
                    let _ = writeln!(s, "  n{i} -> n{j} [label=\"{w:.4}\", weight={w:.6}];");
                }
                None => {
                    let _ = writeln!(s, "  n{i} -> n{j};");
                }
            }
        }
        s.push_str("}\n");
        s
    }

    /// One line per row, `0`/`1` entries separated by commas.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.nodes {
            let row: Vec<&str> = (0..self.nodes)
                .map(|j| if self.has_edge(i, j) { "1" } else { "0" })
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<bool>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| match c.trim() {
                        "0" => Ok(false),
                        "1" => Ok(true),
                        other => Err(Error::Format(format!("bad adjacency entry `{other}`"))),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Format("adjacency CSV is not square".into()));
        }
        Self::from_adjacency(rows.concat(), n)
    }
}

/// Kahn's algorithm, smallest index first among ready nodes.
fn topological_order(adjacency: &[bool], l: usize) -> Vec<usize> {
    let mut indegree: Vec<usize> = (0..l).map(|j| (0..l).filter(|&i| adjacency[i * l + j]).count()).collect();
    let mut done = vec![false; l];
    let mut order = Vec::with_capacity(l);
    while order.len() < l {
        let Some(n) = (0..l).find(|&n| !done[n] && indegree[n] == 0) else {
            break;
        };
        done[n] = true;
        order.push(n);
        for j in 0..l {
            if adjacency[n * l + j] {
                indegree[j] -= 1;
            }
        }
    }
    order
}

/// Longest-path depth of each node (sources at 0).
fn depths(adjacency: &[bool], l: usize) -> Vec<usize> {
    let mut depth = vec![0usize; l];
    for &n in &topological_order(adjacency, l) {
        for j in 0..l {
            if adjacency[n * l + j] {
                depth[j] = depth[j].max(depth[n] + 1);
            }
        }
    }
    depth
}

/// Parameters whose hard adjacency is exactly `adjacency`. Scores are the
/// longest-path depths; edge weights are 1 on edges and ~1e-9 elsewhere.
pub fn construct_params_for_dag<T: Scalar>(adjacency: &[bool], nodes: usize) -> Result<DagParams<T>> {
    if adjacency.len() != nodes * nodes {
        return Err(contract("construct_params_for_dag", "adjacency is not square"));
    }
    if trace_power_sum(adjacency, nodes) != 0.0 {
        return Err(Error::Acyclic(
            "cannot parametrize a graph with a cycle".into(),
        ));
    }
    let depth = depths(adjacency, nodes);
    let xi = Tensor::from_fn(&[nodes], |i| T::from_usize_lossy(depth[i]));
    let on = softplus_inverse(T::one());
    let off = T::lit(-20.0);
    let b_raw = Tensor::from_fn(&[nodes, nodes], |k| if adjacency[k] { on } else { off });
    DagParams::new(xi, b_raw, T::one())
}

/// Adds `Normal(0, noise_std^2)` jitter to the node scores only.
pub fn perturb_scores<T: Scalar, R: Rng + ?Sized>(p: &DagParams<T>, noise_std: f64, rng: &mut R) -> Result<DagParams<T>> {
    if !(noise_std >= 0.0) {
        return Err(Error::Config(format!("noise std must be >= 0, got {noise_std}")));
    }
    let mut out = p.clone();
    if noise_std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
    for x in out.xi.data_mut() {
        *x += T::lit(normal.sample(rng));
    }
    Ok(out)
}

/// Piecewise-constant geometric decay of the temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_init: f64,
    pub beta_final: f64,
    pub update_every: usize,
    pub total_steps: usize,
}

impl BetaSchedule {
    pub fn constant(beta: f64) -> Self {
        Self {
            beta_init: beta,
            beta_final: beta,
            update_every: 1,
            total_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_final > 0.0) || !(self.beta_init >= self.beta_final) || self.update_every == 0 {
            return Err(Error::Config(format!(
                "beta schedule needs beta_init >= beta_final > 0 and update_every >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn anneal_beta(schedule: &BetaSchedule, step: usize) -> Result<f64> {
    schedule.validate()?;
    if step >= schedule.total_steps {
        return Ok(schedule.beta_final);
    }
    let held = (step / schedule.update_every) * schedule.update_every;
    let frac = held as f64 / schedule.total_steps as f64;
    let ratio = schedule.beta_final / schedule.beta_init;
    Ok(schedule.beta_init * ratio.powf(frac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_differences, relative_error};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(xi: &[f64], b_raw: &[f64], beta: f64) -> DagParams<f64> {
        let l = xi.len();
        DagParams::new(
            Tensor::from_vec(xi.to_vec()),
            Tensor::new(vec![l, l], b_raw.to_vec()).unwrap(),
            beta,
        )
        .unwrap()
    }

    fn random_params(l: usize, beta: f64, rng: &mut ChaCha8Rng) -> DagParams<f64> {
        let xi: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..l * l).map(|_| rng.random_range(-9.0..3.0)).collect();
        params(&xi, &b, beta)
    }

    #[test]
    fn flows_examples() {
        let one = softplus_inverse(1.0);
        let p = params(&[0.0, 1.0], &[one; 4], 1.0);
        let f = edge_flows(&p);
        for (x, y) in f.data().iter().zip(&[0.0, 1.0, -1.0, 0.0]) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        let p = params(&[0.7, 0.7, 0.7], &[0.3; 9], 1.0);
        assert!(edge_flows(&p).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flows_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(5, 1.0, &mut rng);
        let f = edge_flows(&p);
        let l = 5;
        for i in 0..l {
            for j in 0..l {
                let bij = if i == j { 0.0 } else { (1.0 + p.b_raw.data()[i * l + j].exp()).ln() };
                let expect = bij * (p.xi.data()[j] - p.xi.data()[i]);
                assert_relative_eq!(f.data()[i * l + j], expect, epsilon = 1e-12);
                if i != j {
                    let bji = (1.0 + p.b_raw.data()[j * l + i].exp()).ln();
                    assert_relative_eq!(
                        f.data()[i * l + j],
                        -(bij / bji) * f.data()[j * l + i],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn indicator_examples() {
        let one = softplus_inverse(1.0);
        let p = params(&[0.0, 1.0], &[one; 4], 1.0);
        let e = edge_indicator(&p).e;
        assert_eq!(e.data()[0], 0.0);
        // tanh(1) by its exponential definition
        let tanh1 = (1.0 - (-2.0f64).exp()) / (1.0 + (-2.0f64).exp());
        assert_relative_eq!(e.data()[1], tanh1, epsilon = 1e-12);
        assert_relative_eq!(e.data()[1], 0.76159, epsilon = 1e-5);
        let p = params(&[5.0, 0.0], &[one; 4], 0.3);
        assert_eq!(edge_indicator(&p).e.data()[1], 0.0);
    }

    #[test]
    fn indicator_sharpens_as_beta_shrinks() {
        let one = softplus_inverse(1.0);
        let mut last = 0.0;
        for beta in [10.0, 1.0, 0.1, 0.01, 0.001] {
            let e = edge_indicator(&params(&[0.0, 0.2], &[one; 4], beta)).e.data()[1];
            assert!(e >= last && e < 1.0 + 1e-15);
            last = e;
        }
        assert!(last > 0.999_999);
    }

    #[test]
    fn var_path_matches_numeric_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = random_params(4, 0.7, &mut rng);
            let g = Graph::new();
            let xi = g.param(p.xi.clone());
            let br = g.param(p.b_raw.clone());
            let e = edge_indicator_var(xi, br, p.beta).unwrap();
            assert_eq!(e.value().as_ref(), &edge_indicator(&p).e);
            let f = edge_flows(&p);
            if f.data().iter().enumerate().any(|(k, x)| k % 5 != 0 && x.abs() < 1e-3) {
                continue;
            }
            let weights = Tensor::from_fn(&[4, 4], |k| (k as f64 * 0.37).sin());
            let loss = e.mul(g.constant(weights.clone())).unwrap().sum_all();
            let grads = g.backward(loss).unwrap();
            let numeric = central_differences(&[p.xi.clone(), p.b_raw.clone()], 1e-6, |t| {
                let q = DagParams::new(t[0].clone(), t[1].clone(), p.beta).unwrap();
                edge_indicator(&q).e.mul(&weights).unwrap().sum_all()
            });
            let err = relative_error(&[grads.wrt(xi), grads.wrt(br)], &numeric, 1e-8);
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn hard_adjacency_examples() {
        let p = params(&[0.0, 1.0, 2.0], &[2.0; 9], 1.0);
        let d = hard_adjacency(&p, DEFAULT_ZERO_TOL);
        assert_eq!(d.edges(), vec![(0, 1), (0, 2), (1, 2)]);
        let p = params(&[0.0, 1.0, 2.0], &[-30.0; 9], 1.0);
        let d = hard_adjacency(&p, DEFAULT_ZERO_TOL);
        assert!(d.edges().is_empty());
        assert!(d.is_acyclic());
    }

    #[test]
    fn trace_oracle_detects_cycles() {
        let cyc = vec![false, true, false, false, false, true, true, false, false];
        assert!(trace_power_sum(&cyc, 3) > 0.0);
        assert!(construct_params_for_dag::<f64>(&cyc, 3).is_err());
        assert!(HardDag::from_adjacency(cyc, 3).is_err());
    }

    #[test]
    fn construct_examples() {
        let p = construct_params_for_dag::<f64>(&[false; 9], 3).unwrap();
        assert!(p.edge_weights().data().iter().all(|&b| b < DEFAULT_ZERO_TOL));
        let chain = vec![false, true, false, false, false, true, false, false, false];
        let p = construct_params_for_dag::<f64>(&chain, 3).unwrap();
        assert!(p.xi.data()[0] < p.xi.data()[1] && p.xi.data()[1] < p.xi.data()[2]);
        assert_eq!(hard_adjacency(&p, DEFAULT_ZERO_TOL).adjacency, chain);
    }

    #[test]
    fn thousand_random_draws_are_acyclic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for k in 0..1000 {
            let l = 1 + k % 9;
            let p = random_params(l, 1.0, &mut rng);
            let d = hard_adjacency(&p, DEFAULT_ZERO_TOL);
            assert_eq!(trace_power_sum(&d.adjacency, l), 0.0);
        }
    }

    #[test]
    fn every_dag_on_four_nodes_round_trips() {
        let l = 4;
        let off: Vec<usize> = (0..l * l).filter(|k| k / l != k % l).collect();
        let mut count = 0;
        for mask in 0u32..(1 << off.len()) {
            let mut adj = vec![false; l * l];
            for (bit, &k) in off.iter().enumerate() {
                adj[k] = mask >> bit & 1 == 1;
            }
            if trace_power_sum(&adj, l) != 0.0 {
                assert!(construct_params_for_dag::<f64>(&adj, l).is_err());
                continue;
            }
            count += 1;
            let p = construct_params_for_dag::<f64>(&adj, l).unwrap();
            assert_eq!(hard_adjacency(&p, DEFAULT_ZERO_TOL).adjacency, adj);
        }
        assert_eq!(count, 543);
    }

    #[test]
    fn random_dags_on_eight_nodes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = 8;
        for _ in 0..200 {
            // random permutation, then forward edges with probability 0.4
            let mut perm: Vec<usize> = (0..l).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let mut adj = vec![false; l * l];
            for a in 0..l {
                for b in a + 1..l {
                    adj[perm[a] * l + perm[b]] = rng.random_bool(0.4);
                }
            }
            let p = construct_params_for_dag::<f64>(&adj, l).unwrap();
            let d = hard_adjacency(&p, DEFAULT_ZERO_TOL);
            assert_eq!(d.adjacency, adj);
            assert!(d.order_is_consistent(&d.topo_order));
        }
    }

    #[test]
    fn perturb_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(3, 1.0, &mut rng);
        assert_eq!(perturb_scores(&p, 0.0, &mut rng).unwrap(), p);
        let a = perturb_scores(&p, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = perturb_scores(&p, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.b_raw, p.b_raw);
        assert!(perturb_scores(&p, -1.0, &mut rng).is_err());
    }

    #[test]
    fn perturbation_statistics() {
        let base = DagParams::new(Tensor::zeros(&[1]), Tensor::zeros(&[1, 1]), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| perturb_scores(&base, 0.3, &mut rng).unwrap().xi.data()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 0.3).abs() < 0.02 * 0.3, "sd {sd}");
    }

    #[test]
    fn beta_schedule() {
        let s = BetaSchedule {
            beta_init: 5.0,
            beta_final: 0.05,
            update_every: 7,
            total_steps: 100,
        };
        assert_eq!(anneal_beta(&s, 0).unwrap(), 5.0);
        assert_eq!(anneal_beta(&s, 100).unwrap(), 0.05);
        assert_eq!(anneal_beta(&s, 1000).unwrap(), 0.05);
        let seq: Vec<f64> = (0..=120).map(|k| anneal_beta(&s, k).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(seq[6], seq[0]);
        let bad = BetaSchedule {
            beta_init: 0.1,
            beta_final: 1.0,
            ..s
        };
        assert!(anneal_beta(&bad, 3).is_err());
    }

    #[test]
    fn dot_and_csv() {
        let chain = vec![false, true, false, false, false, true, false, false, false];
        let d = HardDag::from_adjacency(chain.clone(), 3).unwrap();
        let csv = d.to_csv();
        assert_eq!(csv, "0,1,0\n0,0,1\n0,0,0\n");
        assert_eq!(HardDag::from_csv(&csv).unwrap(), d);
        let e: EdgeScores<f64> = d.edge_scores();
        let dot = d.to_dot(Some(&e), None, DEFAULT_ZERO_TOL);
        assert!(dot.contains("n0 -> n1 [label=\"1.0000\""));
        assert!(dot.contains("n1 -> n2"));
        assert_eq!(d.topo_order, vec![0, 1, 2]);
    }

    proptest::proptest! {
        #[test]
        fn soft_support_is_upper_triangular_in_score_order(seed in 0u64..10_000, l in 1usize..7, beta_pow in -3i32..2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(l, 10f64.powi(beta_pow), &mut rng);
            let e = edge_indicator(&p).e;
            let order = score_order(&p.xi);
            for a in 0..l {
                for b in 0..=a {
                    proptest::prop_assert_eq!(e.data()[order[a] * l + order[b]], 0.0);
                }
            }
            let hard = hard_adjacency(&p, DEFAULT_ZERO_TOL);
            proptest::prop_assert_eq!(trace_power_sum(&hard.adjacency, l), 0.0);
            proptest::prop_assert!(hard.order_is_consistent(&hard.topo_order));
        }
    }
}

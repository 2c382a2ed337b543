//! Cluster evaluation against generative labels.

use serde::{Deserialize, Serialize};

use crate::dag::HardDag;
use crate::error::{contract, Result};

/// `table[k][c]` counts samples in cluster `k` with label `c`.
pub fn contingency(clusters: &[usize], labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    if clusters.len() != labels.len() || clusters.is_empty() {
        return Err(contract("contingency", "assignments and labels must be non-empty and equally long"));
    }
    let k = clusters.iter().max().map_or(0, |m| m + 1);
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0usize; c]; k];
    for (&a, &b) in clusters.iter().zip(labels) {
        t[a][b] += 1;
    }
    Ok(t)
}

/// Fraction of samples that carry their cluster's majority label.
pub fn purity(clusters: &[usize], labels: &[usize]) -> Result<f64> {
    let t = contingency(clusters, labels)?;
    let hits: usize = t.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / clusters.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by `sqrt(H(U) H(V))`. Two constant
/// labelings score 1; a constant against a varying labeling scores 0.
pub fn nmi(clusters: &[usize], labels: &[usize]) -> Result<f64> {
    let t = contingency(clusters, labels)?;
    let n = clusters.len() as f64;
    let rows: Vec<usize> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..t[0].len()).map(|c| t.iter().map(|r| r[c]).sum()).collect();
    let (hu, hv) = (entropy(rows.iter().copied(), n), entropy(cols.iter().copied(), n));
    if hu == 0.0 && hv == 0.0 {
        return Ok(1.0);
    }
    if hu == 0.0 || hv == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (k, row) in t.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            if x > 0 {
                let pxy = x as f64 / n;
                mi += pxy * (pxy / ((rows[k] as f64 / n) * (cols[c] as f64 / n))).ln();
            }
        }
    }
    Ok((mi / (hu * hv).sqrt()).clamp(0.0, 1.0))
}

/// Outcome of node `ell` for each flat cluster index, row-major over `arities`.
pub fn node_outcomes(clusters: &[usize], arities: &[usize], ell: usize) -> Vec<usize> {
    let stride: usize = arities[ell + 1..].iter().product();
    clusters.iter().map(|&k| (k / stride) % arities[ell]).collect()
}

/// Injective assignment of nodes to factors maximizing total purity of each
/// factor within the node's outcomes. `purity[node][factor]` is the table searched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeMatching {
    pub factor_of_node: Vec<Option<usize>>,
    pub purity: Vec<Vec<f64>>,
}

impl NodeMatching {
    pub fn node_of_factor(&self, factor: usize) -> Option<usize> {
        self.factor_of_node.iter().position(|&f| f == Some(factor))
    }
}

pub fn match_nodes(clusters: &[usize], arities: &[usize], factors: &[Vec<usize>]) -> Result<NodeMatching> {
    let purity = (0..arities.len())
        .map(|ell| {
            let out = node_outcomes(clusters, arities, ell);
            factors.iter().map(|f| purity(&out, f)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let l = arities.len();
    let mut best = (f64::NEG_INFINITY, vec![None; l]);
    let mut current = vec![None; l];
    let mut used = vec![false; factors.len()];
    search(0, &purity, &mut current, &mut used, 0.0, &mut best);
    Ok(NodeMatching {
        factor_of_node: best.1,
        purity,
    })
}

fn search(
    node: usize,
    purity: &[Vec<f64>],
    current: &mut Vec<Option<usize>>,
    used: &mut Vec<bool>,
    score: f64,
    best: &mut (f64, Vec<Option<usize>>),
) {
    if node == purity.len() {
        // ties go to the first assignment found, which prefers lower factor indices
        if score > best.0 + 1e-12 {
            *best = (score, current.clone());
        }
        return;
    }
    let free = used.iter().filter(|u| !**u).count();
    let remaining_nodes = purity.len() - node;
    for f in 0..used.len() {
        if !used[f] {
            used[f] = true;
            current[node] = Some(f);
            search(node + 1, purity, current, used, score + purity[node][f], best);
            used[f] = false;
            current[node] = None;
        }
    }
    // leave this node unmatched only when there are more nodes than factors left
    if remaining_nodes > free {
        search(node + 1, purity, current, used, score, best);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub name: String,
    pub purity: f64,
    pub nmi: f64,
    /// `[cluster][label]` counts over every cluster, empty ones included.
    pub contingency: Vec<Vec<usize>>,
    pub matched_node: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub samples: usize,
    pub arities: Vec<usize>,
    pub occupancy: Vec<usize>,
    pub factors: Vec<FactorReport>,
    pub matching: NodeMatching,
    pub edges: Vec<(usize, usize)>,
}

pub fn cluster_report(clusters: &[usize], arities: &[usize], dag: &HardDag, factors: &[(String, Vec<usize>)]) -> Result<ClusterReport> {
    let k: usize = arities.iter().product();
    if clusters.iter().any(|&c| c >= k) {
        return Err(contract("report", "cluster index exceeds the arity product"));
    }
    let mut occupancy = vec![0usize; k];
    for &c in clusters {
        occupancy[c] += 1;
    }
    let values: Vec<Vec<usize>> = factors.iter().map(|(_, v)| v.clone()).collect();
    let matching = match_nodes(clusters, arities, &values)?;
    let factors = factors
        .iter()
        .enumerate()
        .map(|(fi, (name, v))| {
            let mut table = contingency(clusters, v)?;
            let width = table.first().map_or(0, Vec::len);
            table.resize(k, vec![0; width]);
            Ok(FactorReport {
                name: name.clone(),
                purity: purity(clusters, v)?,
                nmi: nmi(clusters, v)?,
                contingency: table,
                matched_node: matching.node_of_factor(fi),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterReport {
        samples: clusters.len(),
        arities: arities.to_vec(),
        occupancy,
        factors,
        matching,
        edges: dag.edges(),
    })
}

impl ClusterReport {
    /// Whether the node matched to `child` has a parent matched to any of `parents`.
    pub fn has_matched_parent(&self, child: &str, parents: &[&str]) -> bool {
        let node = |name: &str| self.factors.iter().find(|f| f.name == name).and_then(|f| f.matched_node);
        let Some(c) = node(child) else {
            return false;
        };
        parents
            .iter()
            .filter_map(|p| node(p))
            .any(|p| self.edges.contains(&(p, c)))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("samples: {}\narities: {:?}\noccupancy: {:?}\n", self.samples, self.arities, self.occupancy);
        for f in &self.factors {
            s.push_str(&format!(
                "factor {}: purity {:.4}, nmi {:.4}, node {}\n",
                f.name,
                f.purity,
                f.nmi,
                f.matched_node.map_or("-".to_string(), |n| format!("N{}", n + 1))
            ));
            for (k, row) in f.contingency.iter().enumerate() {
                s.push_str(&format!("  cluster {k}: {row:?}\n"));
            }
        }
        let names: Vec<String> = (0..self.arities.len())
            .map(|n| match self.matching.factor_of_node[n] {
                Some(f) => format!("N{} ({})", n + 1, self.factors[f].name),
                None => format!("N{}", n + 1),
            })
            .collect();
        s.push_str("edges:\n");
        if self.edges.is_empty() {
            s.push_str("  none\n");
        }
        for &(a, b) in &self.edges {
            s.push_str(&format!("  {} -> {}\n", names[a], names[b]));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn separable_assignment_is_pure() {
        let labels = vec![0, 0, 1, 1, 1];
        let clusters = vec![1, 1, 0, 0, 0];
        assert_eq!(purity(&clusters, &labels).unwrap(), 1.0);
        assert!((nmi(&clusters, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shuffled_labels_carry_no_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<usize> = (0..4000).map(|i| i % 2).collect();
        let mut clusters: Vec<usize> = (0..4000).map(|i| (i / 2) % 4).collect();
        clusters.shuffle(&mut rng);
        assert!(nmi(&clusters, &labels).unwrap() < 0.05);
    }

    #[test]
    fn nmi_hand_example() {
        // U = {a,a,b,b}, V = {x,y,y,y}: H(U) = ln 2, H(V) = -(1/4 ln 1/4 + 3/4 ln 3/4)
        let u = vec![0, 0, 1, 1];
        let v = vec![0, 1, 1, 1];
        let hv = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let mi = 0.25 * (0.25f64 / (0.5 * 0.25)).ln() + 0.25 * (0.25f64 / (0.5 * 0.75)).ln() + 0.5 * (0.5f64 / (0.5 * 0.75)).ln();
        let expected = mi / (2f64.ln() * hv).sqrt();
        assert!((nmi(&u, &v).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn contingency_rows_sum_to_occupancy() {
        let clusters = vec![0, 3, 3, 1, 0, 3];
        let labels = vec![1, 0, 1, 1, 1, 0];
        let dag = HardDag::empty(2);
        let r = cluster_report(&clusters, &[2, 2], &dag, &[("f".into(), labels)]).unwrap();
        for (row, &occ) in r.factors[0].contingency.iter().zip(&r.occupancy) {
            assert_eq!(row.iter().sum::<usize>(), occ);
        }
        assert_eq!(r.occupancy, vec![2, 1, 0, 3]);
    }

    #[test]
    fn matching_finds_the_generating_nodes() {
        // cluster = 2 * a + b on arities [2, 2]; factor 0 is b, factor 1 is a
        let a: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let b: Vec<usize> = (0..40).map(|i| (i / 2) % 2).collect();
        let clusters: Vec<usize> = a.iter().zip(&b).map(|(x, y)| 2 * x + y).collect();
        let m = match_nodes(&clusters, &[2, 2], &[b.clone(), a.clone()]).unwrap();
        assert_eq!(m.factor_of_node, vec![Some(1), Some(0)]);
        assert_eq!(node_outcomes(&clusters, &[2, 2], 0), a);

        let dag = HardDag::from_adjacency(vec![false, true, false, false], 2).unwrap();
        let r = cluster_report(&clusters, &[2, 2], &dag, &[("b".into(), b), ("a".into(), a)]).unwrap();
        assert!(r.has_matched_parent("b", &["a"]));
        assert!(!r.has_matched_parent("a", &["b"]));
    }

    #[test]
    fn matching_leaves_surplus_nodes_unassigned() {
        let f: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let clusters: Vec<usize> = f.iter().map(|&x| x * 2).collect();
        let m = match_nodes(&clusters, &[2, 2], &[f]).unwrap();
        assert_eq!(m.factor_of_node, vec![Some(0), None]);
    }
}

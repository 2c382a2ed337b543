//! Gaussian-mixture prior indexed by node outcomes.
//!
//! Cluster `k` is the row-major flattening of the outcome multi-index
//! `(c_1, ..., c_L)`, so the mixture weights are exactly the entries of the
//! joint tensor in storage order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::joint::JointTensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;
/// A cluster whose total responsibility falls below this counts as empty.
pub const EMPTY_CLUSTER_MASS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGmm<T> {
    /// Shape `arities ++ [J]`.
    pub means: Tensor<T>,
    pub vars: Tensor<T>,
    pub arities: Vec<usize>,
    pub dim: usize,
}

/// Per-point posterior over clusters, shape `[D, K]` with `K` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities<T> {
    pub gamma: Tensor<T>,
}

fn ln_2pi<T: Scalar>() -> T {
    T::lit((2.0 * std::f64::consts::PI).ln())
}

/// `sum_j -1/2 log(2 pi var_j) - (z_j - mu_j)^2 / (2 var_j)`.
pub fn log_density_diag<T: Scalar>(z: &[T], g: &GaussianDiag<T>) -> Result<T> {
    if z.len() != g.mean.len() || z.len() != g.var.len() {
        return Err(contract("log_density_diag", "dimension mismatch"));
    }
    Ok(log_density_slices(z, &g.mean, &g.var))
}

fn log_density_slices<T: Scalar>(z: &[T], mean: &[T], var: &[T]) -> T {
    let half = T::lit(0.5);
    let mut s = T::zero();
    for ((&x, &m), &v) in z.iter().zip(mean).zip(var) {
        let d = x - m;
        s -= half * (ln_2pi::<T>() + v.ln() + d * d / v);
    }
    s
}

impl<T: Scalar> LatentGmm<T> {
    pub fn new(means: Tensor<T>, vars: Tensor<T>, arities: Vec<usize>) -> Result<Self> {
        let nd = means.ndim();
        if nd < 2 || means.shape()[..nd - 1] != arities[..] || means.shape() != vars.shape() {
            return Err(contract(
                "latent_gmm",
                format!("means {:?} / vars {:?} do not match arities {arities:?}", means.shape(), vars.shape()),
            ));
        }
        if vars.data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::Domain {
                op: "latent_gmm",
                detail: "variances must be positive".into(),
            });
        }
        let dim = means.shape()[nd - 1];
        Ok(Self {
            means,
            vars,
            arities,
            dim,
        })
    }

    pub fn clusters(&self) -> usize {
        self.arities.iter().product()
    }

    pub fn mean(&self, k: usize) -> &[T] {
        &self.means.data()[k * self.dim..(k + 1) * self.dim]
    }

    pub fn var(&self, k: usize) -> &[T] {
        &self.vars.data()[k * self.dim..(k + 1) * self.dim]
    }

    pub fn component(&self, k: usize) -> GaussianDiag<T> {
        GaussianDiag {
            mean: self.mean(k).to_vec(),
            var: self.var(k).to_vec(),
        }
    }

    fn shape_with_dim(&self) -> Vec<usize> {
        let mut s = self.arities.clone();
        s.push(self.dim);
        s
    }

    /// Multi-index of a flattened cluster id.
    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.arities.len()];
        for d in (0..self.arities.len()).rev() {
            idx[d] = k % self.arities[d];
            k /= self.arities[d];
        }
        idx
    }

    /// One line per cluster: 1-based multi-index, means, variances.
    pub fn to_csv(&self) -> String {
        let mut head: Vec<String> = (0..self.arities.len()).map(|l| format!("N{}", l + 1)).collect();
        head.extend((0..self.dim).map(|j| format!("mean{}", j + 1)));
        head.extend((0..self.dim).map(|j| format!("var{}", j + 1)));
        let mut s = head.join(",");
        s.push('\n');
        for k in 0..self.clusters() {
            let mut row: Vec<String> = self.multi_index(k).iter().map(|c| (c + 1).to_string()).collect();
            row.extend(self.mean(k).iter().map(|x| format!("{}", x.to_f64_lossy())));
            row.extend(self.var(k).iter().map(|x| format!("{}", x.to_f64_lossy())));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

impl<T: Scalar> Responsibilities<T> {
    pub fn points(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn clusters(&self) -> usize {
        self.gamma.shape()[1]
    }

    pub fn row(&self, d: usize) -> &[T] {
        let k = self.clusters();
        &self.gamma.data()[d * k..(d + 1) * k]
    }

    /// Hard cluster per point, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.points())
            .map(|d| {
                let r = self.row(d);
                let mut best = 0;
                for k in 1..r.len() {
                    if r[k] > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Total responsibility per cluster.
    pub fn occupancy(&self) -> Vec<T> {
        let k = self.clusters();
        let mut occ = vec![T::zero(); k];
        for d in 0..self.points() {
            for (o, &g) in occ.iter_mut().zip(self.row(d)) {
                *o += g;
            }
        }
        occ
    }
}

fn check_weights<T: Scalar>(gmm: &LatentGmm<T>, a: &JointTensor<T>) -> Result<()> {
    if a.a.shape() != gmm.arities.as_slice() {
        return Err(contract("responsibilities", "joint tensor shape does not match the mixture"));
    }
    Ok(())
}

/// `gamma_k` for one point, from `log A_k + log p(z | k)` normalized by logsumexp.
pub fn responsibilities<T: Scalar>(z: &[T], gmm: &LatentGmm<T>, a: &JointTensor<T>) -> Result<Vec<T>> {
    check_weights(gmm, a)?;
    if z.len() != gmm.dim {
        return Err(contract("responsibilities", "latent dimension mismatch"));
    }
    let kc = gmm.clusters();
    let mut logits: Vec<T> = (0..kc)
        .map(|k| {
            let w = a.a.data()[k];
            let lw = if w > T::zero() { w.ln() } else { T::neg_infinity() };
            lw + log_density_slices(z, gmm.mean(k), gmm.var(k))
        })
        .collect();
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return Err(Error::Numerical(format!(
            "responsibilities: no cluster has finite log weight (max log-score {m}) at z={z:?}"
        )));
    }
    let mut total = T::zero();
    for x in logits.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in logits.iter_mut() {
        *x /= total;
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(Error::Numerical(format!("responsibilities: NaN for z={z:?}")));
    }
    Ok(logits)
}

/// Responsibilities for every row of `zs` (shape `[D, J]`).
pub fn responsibilities_batch<T: Scalar>(zs: &Tensor<T>, gmm: &LatentGmm<T>, a: &JointTensor<T>) -> Result<Responsibilities<T>> {
    if zs.ndim() != 2 || zs.shape()[1] != gmm.dim {
        return Err(contract("responsibilities", format!("points have shape {:?}", zs.shape())));
    }
    let (d, j) = (zs.shape()[0], gmm.dim);
    let mut data = Vec::with_capacity(d * gmm.clusters());
    for i in 0..d {
        data.extend(responsibilities(&zs.data()[i * j..(i + 1) * j], gmm, a)?);
    }
    Ok(Responsibilities {
        gamma: Tensor::new(vec![d, gmm.clusters()], data)?,
    })
}

fn check_batch<T: Scalar>(mus: &Tensor<T>, vars: &Tensor<T>, gammas: &Responsibilities<T>, k: usize) -> Result<(usize, usize)> {
    if mus.ndim() != 2 || mus.shape() != vars.shape() {
        return Err(contract("block_update", "means and variances must share a [D, J] shape"));
    }
    let (d, j) = (mus.shape()[0], mus.shape()[1]);
    if d == 0 {
        return Err(contract("block_update", "empty batch"));
    }
    if gammas.gamma.shape() != [d, k] {
        return Err(contract(
            "block_update",
            format!("responsibilities have shape {:?}, expected [{d}, {k}]", gammas.gamma.shape()),
        ));
    }
    Ok((d, j))
}

/// Exact maximizer of the clustering term for fixed responsibilities.
///
/// `mean_k = sum_d gamma_dk mu_d / sum_d gamma_dk` and
/// `var_k = sum_d gamma_dk ((mu_d - mean_k)^2 + sigma2_d) / sum_d gamma_dk`.
/// Empty clusters keep `prev`'s mean and take the pooled single-cluster variance.
pub fn block_update<T: Scalar>(
    prev: &LatentGmm<T>,
    mus: &Tensor<T>,
    vars: &Tensor<T>,
    gammas: &Responsibilities<T>,
    floor: T,
) -> Result<LatentGmm<T>> {
    let kc = prev.clusters();
    let (d, j) = check_batch(mus, vars, gammas, kc)?;
    if j != prev.dim {
        return Err(contract("block_update", "latent dimension mismatch"));
    }
    let dn = T::from_usize_lossy(d);
    let m = mus.data();
    let v = vars.data();
    let mut global_mean = vec![T::zero(); j];
    for i in 0..d {
        for c in 0..j {
            global_mean[c] += m[i * j + c] / dn;
        }
    }
    let mut global_var = vec![T::zero(); j];
    for i in 0..d {
        for c in 0..j {
            let e = m[i * j + c] - global_mean[c];
            global_var[c] += (e * e + v[i * j + c]) / dn;
        }
    }
    let mut means = prev.means.data().to_vec();
    let mut out_vars = vec![T::zero(); kc * j];
    for k in 0..kc {
        let mass: T = (0..d).map(|i| gammas.row(i)[k]).sum();
        if mass.to_f64_lossy() < EMPTY_CLUSTER_MASS {
            for c in 0..j {
                out_vars[k * j + c] = global_var[c].max(floor);
            }
            continue;
        }
        for c in 0..j {
            let mut s = T::zero();
            for i in 0..d {
                s += gammas.row(i)[k] * m[i * j + c];
            }
            means[k * j + c] = s / mass;
        }
        for c in 0..j {
            let mu_k = means[k * j + c];
            let mut s = T::zero();
            for i in 0..d {
                let e = m[i * j + c] - mu_k;
                s += gammas.row(i)[k] * (e * e + v[i * j + c]);
            }
            out_vars[k * j + c] = (s / mass).max(floor);
        }
    }
    let shape = prev.shape_with_dim();
    LatentGmm::new(Tensor::new(shape.clone(), means)?, Tensor::new(shape, out_vars)?, prev.arities.clone())
}

/// The responsibility-weighted clustering bracket, summed over points:
/// `sum_d sum_k gamma [2 log A_k - 2 log gamma - sum_j (log var_k + s2/var_k + (mu - mean_k)^2/var_k)]`,
/// with `gamma log gamma = 0` at `gamma = 0`.
pub fn clustering_term<T: Scalar>(
    mus: &Tensor<T>,
    vars: &Tensor<T>,
    gammas: &Responsibilities<T>,
    gmm: &LatentGmm<T>,
    a: &JointTensor<T>,
) -> Result<T> {
    check_weights(gmm, a)?;
    let kc = gmm.clusters();
    let (d, j) = check_batch(mus, vars, gammas, kc)?;
    let two = T::lit(2.0);
    let mut total = T::zero();
    for i in 0..d {
        let mu = &mus.data()[i * j..(i + 1) * j];
        let s2 = &vars.data()[i * j..(i + 1) * j];
        for (k, &g) in gammas.row(i).iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let mut inner = T::zero();
            for c in 0..j {
                let vk = gmm.var(k)[c];
                let e = mu[c] - gmm.mean(k)[c];
                inner += vk.ln() + s2[c] / vk + e * e / vk;
            }
            total += g * (two * a.a.data()[k].ln() - two * g.ln() - inner);
        }
    }
    Ok(total)
}

/// Outcome of fitting the mixture to fixed embeddings.
#[derive(Clone, Debug)]
pub struct GmmFit<T> {
    pub gmm: LatentGmm<T>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeded: usize,
}

/// Seeds means from the data with D^2 weighting, then alternates
/// responsibilities and block updates until hard assignments stop changing.
/// A cluster that ends an iteration empty is reseeded at a random data mean
/// plus `Normal(0, 0.01^2)` jitter (at most once per cluster).
pub fn fit_gmm<T: Scalar, R: Rng + ?Sized>(
    mus: &Tensor<T>,
    vars: &Tensor<T>,
    a: &JointTensor<T>,
    floor: T,
    max_iters: usize,
    rng: &mut R,
) -> Result<GmmFit<T>> {
    let arities = a.a.shape().to_vec();
    let kc: usize = arities.iter().product();
    if mus.ndim() != 2 || mus.shape()[0] == 0 || mus.shape() != vars.shape() {
        return Err(contract("fit_gmm", "embeddings must be a non-empty [D, J] pair"));
    }
    let (d, j) = (mus.shape()[0], mus.shape()[1]);
    let row = |i: usize| &mus.data()[i * j..(i + 1) * j];
    let dist2 = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>();

    // D^2 seeding over distinct points.
    let mut centers: Vec<usize> = vec![rng.random_range(0..d)];
    while centers.len() < kc {
        let w: Vec<f64> = (0..d)
            .map(|i| {
                centers
                    .iter()
                    .map(|&c| dist2(row(i), row(c)).to_f64_lossy())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = d - 1;
            for (i, &x) in w.iter().enumerate() {
                if u < x {
                    idx = i;
                    break;
                }
                u -= x;
            }
            idx
        } else {
            rng.random_range(0..d)
        };
        centers.push(pick);
    }
    let jitter = Normal::new(0.0, 0.01).expect("valid std");
    let mut shape = arities.clone();
    shape.push(j);
    let means: Vec<T> = centers.iter().flat_map(|&c| row(c).to_vec()).collect();
    let pooled = block_update(
        &LatentGmm::new(Tensor::zeros(&[1, j]), Tensor::ones(&[1, j]), vec![1])?,
        mus,
        vars,
        &Responsibilities {
            gamma: Tensor::ones(&[d, 1]),
        },
        floor,
    )?;
    let var0: Vec<T> = (0..kc).flat_map(|_| pooled.var(0).to_vec()).collect();
    let mut gmm = LatentGmm::new(Tensor::new(shape.clone(), means)?, Tensor::new(shape.clone(), var0)?, arities.clone())?;

    let mut prev_labels: Option<Vec<usize>> = None;
    let mut reseeded_flags = vec![false; kc];
    let mut reseeded = 0;
    for it in 1..=max_iters {
        let gam = responsibilities_batch(mus, &gmm, a)?;
        let labels = gam.argmax();
        gmm = block_update(&gmm, mus, vars, &gam, floor)?;
        let occ = gam.occupancy();
        let mut changed = false;
        for k in 0..kc {
            if occ[k].to_f64_lossy() < EMPTY_CLUSTER_MASS && !reseeded_flags[k] {
                reseeded_flags[k] = true;
                reseeded += 1;
                changed = true;
                let src = rng.random_range(0..d);
                let mut m = gmm.means.data().to_vec();
                for c in 0..j {
                    m[k * j + c] = row(src)[c] + T::lit(jitter.sample(rng));
                }
                gmm.means = Tensor::new(shape.clone(), m)?;
            }
        }
        if !changed && prev_labels.as_ref() == Some(&labels) {
            return Ok(GmmFit {
                gmm,
                iterations: it,
                converged: true,
                reseeded,
            });
        }
        prev_labels = Some(labels);
    }
    Ok(GmmFit {
        gmm,
        iterations: max_iters,
        converged: false,
        reseeded,
    })
}

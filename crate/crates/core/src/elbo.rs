//! Closed-form single-sample evidence lower bound.
//!
//! Everything here is the ELBO scaled by 2 with additive constants dropped:
//!
//! ```text
//! L = - sum_m sum_d [log var_hat + (x - mu_hat)^2 / var_hat]
//!     + sum_j log var_j
//!     + sum_k gamma_k [2 log A_k - 2 log gamma_k
//!                      - sum_j (log var~_kj + var_j / var~_kj + (mu_j - mu~_kj)^2 / var~_kj)]
//! ```
//!
//! Against the exact bound `E_q[log p(X, Z, N) - log q(Z, N | X)]` this is
//! `2 * exact + D log(2 pi) - J`, where `D` counts every observed feature.
//! The responsibilities `gamma` enter as constants.

use nalgebra::{DMatrix, DVector};

use crate::error::{contract, Error, Result};
use crate::gmm::{GaussianDiag, LatentGmm, Responsibilities};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// `E_{y1}[log p_{y2}] = -1/2 sum_j [log(2 pi var2) + var1 / var2 + (mu1 - mu2)^2 / var2]`.
pub fn gaussian_cross_entropy_diag<T: Scalar>(y1: &GaussianDiag<T>, y2: &GaussianDiag<T>) -> Result<T> {
    let j = y1.mean.len();
    if y1.var.len() != j || y2.mean.len() != j || y2.var.len() != j {
        return Err(contract("gaussian_cross_entropy_diag", "dimension mismatch"));
    }
    let ln2pi = T::lit((2.0 * std::f64::consts::PI).ln());
    let mut s = T::zero();
    for c in 0..j {
        let (v1, v2) = (y1.var[c], y2.var[c]);
        if !(v1 > T::zero() && v2 > T::zero()) {
            return Err(crate::error::domain("gaussian_cross_entropy_diag", "variances must be positive"));
        }
        let d = y1.mean[c] - y2.mean[c];
        s += ln2pi + v2.ln() + v1 / v2 + d * d / v2;
    }
    Ok(-T::lit(0.5) * s)
}

fn spd_cholesky(m: &[f64], j: usize, name: &'static str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if m.len() != j * j {
        return Err(contract("gaussian_cross_entropy_full", format!("{name} is not {j}x{j}")));
    }
    let mat = DMatrix::from_row_slice(j, j, m);
    let asym = (&mat - mat.transpose()).abs().max();
    if asym > 1e-12 * mat.abs().max().max(1.0) {
        return Err(Error::NotPositiveDefinite { matrix: name });
    }
    mat.cholesky().ok_or(Error::NotPositiveDefinite { matrix: name })
}

/// Full-covariance form, `cov` matrices row-major `J x J`:
/// `-J/2 log 2 pi - 1/2 log det S2 - 1/2 (m1 - m2)^T S2^-1 (m1 - m2) - 1/2 tr(S1 S2^-1)`.
pub fn gaussian_cross_entropy_full(mu1: &[f64], cov1: &[f64], mu2: &[f64], cov2: &[f64]) -> Result<f64> {
    let j = mu1.len();
    if mu2.len() != j {
        return Err(contract("gaussian_cross_entropy_full", "mean dimensions differ"));
    }
    spd_cholesky(cov1, j, "cov1")?;
    let c2 = spd_cholesky(cov2, j, "cov2")?;
    let l = c2.l();
    let log_det: f64 = 2.0 * (0..j).map(|i| l[(i, i)].ln()).sum::<f64>();
    let diff = DVector::from_iterator(j, mu1.iter().zip(mu2).map(|(a, b)| a - b));
    let quad = diff.dot(&c2.solve(&diff));
    let s1 = DMatrix::from_row_slice(j, j, cov1);
    let trace = c2.solve(&s1).trace();
    Ok(-0.5 * (j as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad + trace))
}

/// Reconstruction parameters for one modality.
pub enum Reconstruction<'g, T: Scalar> {
    /// One decoder for every cluster: `[B, D]` each.
    Shared { mu: Var<'g, T>, var: Var<'g, T> },
    /// One decoder per cluster: `[B, K, D]` each.
    PerCluster { mu: Var<'g, T>, var: Var<'g, T> },
    /// Cluster-only curves independent of the sample: mean `[K, D]`, variance `[K, 1]`.
    Expert { mu: Var<'g, T>, var: Var<'g, T> },
}

pub struct ModalityTerm<'g, T: Scalar> {
    /// Observations `[B, D]`.
    pub x: Tensor<T>,
    /// `[B, 1]`, 1 where the modality is observed; `None` for fully observed.
    pub mask: Option<Tensor<T>>,
    pub recon: Reconstruction<'g, T>,
}

pub struct ElboInputs<'a, 'g, T: Scalar> {
    /// Fused posterior `[B, J]`.
    pub mu: Var<'g, T>,
    pub var: Var<'g, T>,
    pub modalities: Vec<ModalityTerm<'g, T>>,
    /// Joint tensor over node outcomes, any shape with `K` entries.
    pub a: Var<'g, T>,
    pub gmm: &'a LatentGmm<T>,
    pub gamma: &'a Responsibilities<T>,
}

/// Batch means of each term; `total` is their sum.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: Vec<f64>,
    pub entropy: f64,
    pub clustering: f64,
    pub total: f64,
}

pub struct ElboGraph<'g, T: Scalar> {
    /// Per-sample ELBO `[B]`.
    pub per_sample: Var<'g, T>,
    pub breakdown: ElboBreakdown,
}

/// `sum_d [log var + (x - mu)^2 / var]` with broadcasting `x [B, 1, D]` against
/// `mu, var [B|1, K, D]`, giving `[B, K]`.
fn gaussian_nll_terms<'g, T: Scalar>(x: Var<'g, T>, mu: Var<'g, T>, var: Var<'g, T>) -> Result<Var<'g, T>> {
    let d = x.sub(mu)?;
    let t = var.log()?.add(d.square().div(var)?)?;
    let last = t.shape().len() - 1;
    t.sum(&[last], false)
}

/// `-sum_d [log var_hat + (x - mu_hat)^2 / var_hat]` per sample `[B]`,
/// responsibility-weighted for cluster-specific decoders and zero where masked.
pub fn modality_recon<'g, T: Scalar>(g: &'g Graph<T>, m: &ModalityTerm<'g, T>, gamma: &Tensor<T>) -> Result<Var<'g, T>> {
    let (b, d) = match m.x.shape() {
        [b, d] => (*b, *d),
        s => return Err(contract("elbo", format!("observations have shape {s:?}, expected [B, D]"))),
    };
    let k = gamma.shape()[1];
    let per = match &m.recon {
        Reconstruction::Shared { mu, var } => {
            if mu.shape() != [b, d] || var.shape() != [b, d] {
                return Err(contract("elbo", "shared reconstruction must match the observations"));
            }
            gaussian_nll_terms(g.constant(m.x.clone()), *mu, *var)?
        }
        Reconstruction::PerCluster { mu, var } => {
            if mu.shape() != [b, k, d] || var.shape() != [b, k, d] {
                return Err(contract("elbo", format!("per-cluster reconstruction must be [{b}, {k}, {d}]")));
            }
            let x = g.constant(m.x.reshape(&[b, 1, d])?);
            let t = gaussian_nll_terms(x, *mu, *var)?;
            t.mul(g.constant(gamma.clone()))?.sum(&[1], false)?
        }
        Reconstruction::Expert { mu, var } => {
            if mu.shape() != [k, d] || var.shape() != [k, 1] {
                return Err(contract("elbo", format!("expert reconstruction must be [{k}, {d}] and [{k}, 1]")));
            }
            let x = g.constant(m.x.reshape(&[b, 1, d])?);
            let mu3 = mu.reshape(&[1, k, d])?;
            let var3 = var.reshape(&[1, k, 1])?;
            // log var is constant along D; broadcast it so the sum counts D copies
            let t = x.sub(mu3)?.square().div(var3)?.add(var3.log()?)?.sum(&[2], false)?;
            t.mul(g.constant(gamma.clone()))?.sum(&[1], false)?
        }
    };
    let per = match &m.mask {
        Some(mask) => {
            if mask.shape() != [b, 1] {
                return Err(contract("elbo", "mask must be [B, 1]"));
            }
            per.mul(g.constant(mask.reshape(&[b])?))?
        }
        None => per,
    };
    Ok(per.neg())
}

/// Assembles the per-sample bound on the graph.
pub fn elbo_batch<'g, T: Scalar>(g: &'g Graph<T>, inp: &ElboInputs<'_, 'g, T>) -> Result<ElboGraph<'g, T>> {
    let s = inp.mu.shape();
    let (b, j) = match s.as_slice() {
        [b, j] => (*b, *j),
        _ => return Err(contract("elbo", format!("fused mean has shape {s:?}"))),
    };
    let k = inp.gmm.clusters();
    if inp.var.shape() != s || inp.gmm.dim != j || inp.gamma.gamma.shape() != [b, k] {
        return Err(contract("elbo", "fused posterior, mixture and responsibilities disagree"));
    }
    if inp.a.value().len() != k {
        return Err(contract("elbo", "joint tensor size differs from the mixture"));
    }
    let gamma = &inp.gamma.gamma;

    let mut recon_terms = Vec::with_capacity(inp.modalities.len());
    for m in &inp.modalities {
        if m.x.shape()[0] != b {
            return Err(contract("elbo", "modality batch size differs"));
        }
        recon_terms.push(modality_recon(g, m, gamma)?);
    }

    let entropy = inp.var.log()?.sum(&[1], false)?;

    let two = T::lit(2.0);
    let log_a = inp.a.reshape(&[1, k])?.log()?;
    let gam = g.constant(gamma.clone());
    let prior = gam.mul(log_a)?.sum(&[1], false)?.mul_scalar(two);
    // -2 gamma log gamma with the 0 log 0 = 0 convention, a constant
    let neg_ent = Tensor::from_fn(&[b], |i| {
        let mut acc = T::zero();
        for &x in &gamma.data()[i * k..(i + 1) * k] {
            if x > T::zero() {
                acc -= two * x * x.ln();
            }
        }
        acc
    });
    let mean_t = g.constant(inp.gmm.means.reshape(&[1, k, j])?);
    let var_t = g.constant(inp.gmm.vars.reshape(&[1, k, j])?);
    let mu3 = inp.mu.reshape(&[b, 1, j])?;
    let var3 = inp.var.reshape(&[b, 1, j])?;
    let inner = var_t
        .log()?
        .add(var3.div(var_t)?)?
        .add(mu3.sub(mean_t)?.square().div(var_t)?)?
        .sum(&[2], false)?;
    let fit = gam.mul(inner)?.sum(&[1], false)?;
    let clustering = prior.add(g.constant(neg_ent))?.sub(fit)?;

    let mut per_sample = entropy.add(clustering)?;
    for r in &recon_terms {
        per_sample = per_sample.add(*r)?;
    }

    let mean_of = |v: &Var<'g, T>| v.value().sum_all().to_f64_lossy() / b as f64;
    let reconstruction: Vec<f64> = recon_terms.iter().map(mean_of).collect();
    let entropy_m = mean_of(&entropy);
    let clustering_m = mean_of(&clustering);
    let breakdown = ElboBreakdown {
        total: reconstruction.iter().sum::<f64>() + entropy_m + clustering_m,
        reconstruction,
        entropy: entropy_m,
        clustering: clustering_m,
    };
    Ok(ElboGraph { per_sample, breakdown })
}

/// Twice the negative divergence from the unit normal up to a constant,
/// `sum_j (log var - var - mu^2)`, per sample `[B]`.
pub fn unit_normal_term<'g, T: Scalar>(mu: Var<'g, T>, var: Var<'g, T>) -> Result<Var<'g, T>> {
    var.log()?.sub(var)?.sub(mu.square())?.sum(&[1], false)
}

/// `-mean_d L_d + lambda_b * sum B`, where `edge_l1` is the optional penalty
/// already on the graph.
pub fn dataset_loss<'g, T: Scalar>(per_sample: Var<'g, T>, penalty: Option<(T, Var<'g, T>)>) -> Result<Var<'g, T>> {
    let s = per_sample.shape();
    if s.len() != 1 || s[0] == 0 {
        return Err(contract("dataset_loss", "per-sample bound must be a non-empty vector"));
    }
    let loss = per_sample.mean_all().neg();
    match penalty {
        Some((lambda, l1)) if lambda != T::zero() => loss.add(l1.mul_scalar(lambda)),
        _ => Ok(loss),
    }
}

/// Per-cluster reconstruction parameters for one sample.
pub struct SampleRecon<'a, T> {
    pub x: &'a [T],
    /// One `(mu_hat, var_hat)` per cluster, or a single entry for a shared decoder.
    pub per_cluster: Vec<(&'a [T], &'a [T])>,
}

/// Plain-value evaluation of the bound for one point.
pub fn single_sample_elbo<T: Scalar>(
    fused: &GaussianDiag<T>,
    recon: &[SampleRecon<'_, T>],
    gmm: &LatentGmm<T>,
    a: &[T],
    gamma: &[T],
) -> Result<ElboBreakdown> {
    let k = gmm.clusters();
    let j = gmm.dim;
    if a.len() != k || gamma.len() != k || fused.mean.len() != j || fused.var.len() != j {
        return Err(contract("single_sample_elbo", "dimension mismatch"));
    }
    let mut reconstruction = Vec::with_capacity(recon.len());
    for r in recon {
        let weights: Vec<T> = if r.per_cluster.len() == 1 {
            vec![T::one()]
        } else if r.per_cluster.len() == k {
            gamma.to_vec()
        } else {
            return Err(contract("single_sample_elbo", "reconstruction must be shared or per cluster"));
        };
        let mut acc = T::zero();
        for (w, (m, v)) in weights.iter().zip(&r.per_cluster) {
            if m.len() != r.x.len() || v.len() != r.x.len() {
                return Err(contract("single_sample_elbo", "reconstruction length differs from the data"));
            }
            let mut t = T::zero();
            for ((&x, &mh), &vh) in r.x.iter().zip(m.iter()).zip(v.iter()) {
                t += vh.ln() + (x - mh) * (x - mh) / vh;
            }
            acc += *w * t;
        }
        reconstruction.push(-acc.to_f64_lossy());
    }
    let entropy: T = fused.var.iter().map(|v| v.ln()).sum();
    let two = T::lit(2.0);
    let mut clustering = T::zero();
    for c in 0..k {
        let g = gamma[c];
        if g == T::zero() {
            continue;
        }
        let mut inner = T::zero();
        for d in 0..j {
            let vk = gmm.var(c)[d];
            let e = fused.mean[d] - gmm.mean(c)[d];
            inner += vk.ln() + fused.var[d] / vk + e * e / vk;
        }
        clustering += g * (two * a[c].ln() - two * g.ln() - inner);
    }
    let (entropy, clustering) = (entropy.to_f64_lossy(), clustering.to_f64_lossy());
    Ok(ElboBreakdown {
        total: reconstruction.iter().sum::<f64>() + entropy + clustering,
        reconstruction,
        entropy,
        clustering,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::log_density_diag;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const LN_2PI: f64 = 1.837_877_066_409_345_5;

    fn diag(mean: &[f64], var: &[f64]) -> GaussianDiag<f64> {
        GaussianDiag {
            mean: mean.to_vec(),
            var: var.to_vec(),
        }
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn cross_entropy_examples() {
        let sn = diag(&[0.0], &[1.0]);
        assert_relative_eq!(gaussian_cross_entropy_diag(&sn, &sn).unwrap(), -0.5 * (LN_2PI + 1.0), epsilon = 1e-15);
        let shifted = diag(&[2.0], &[1.0]);
        assert_relative_eq!(
            gaussian_cross_entropy_diag(&sn, &shifted).unwrap(),
            -0.5 * (LN_2PI + 1.0 + 4.0),
            epsilon = 1e-15
        );
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = [0.3, -0.2, 1.0];
        assert_relative_eq!(
            gaussian_cross_entropy_full(&m, &eye, &m, &eye).unwrap(),
            -1.5 * (LN_2PI + 1.0),
            epsilon = 1e-14
        );
    }

    #[test]
    fn full_rejects_non_spd() {
        let bad = [1.0, 2.0, 2.0, 1.0];
        let good = [1.0, 0.0, 0.0, 1.0];
        let m = [0.0, 0.0];
        assert!(matches!(
            gaussian_cross_entropy_full(&m, &good, &m, &bad),
            Err(Error::NotPositiveDefinite { matrix: "cov2" })
        ));
        assert!(matches!(
            gaussian_cross_entropy_full(&m, &bad, &m, &good),
            Err(Error::NotPositiveDefinite { matrix: "cov1" })
        ));
        let asym = [1.0, 0.5, 0.0, 1.0];
        assert!(gaussian_cross_entropy_full(&m, &asym, &m, &good).is_err());
    }

    #[test]
    fn full_reduces_to_diag() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let j = rng.random_range(1..6);
            let y1 = diag(
                &(0..j).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>(),
                &(0..j).map(|_| rng.random_range(0.1..3.0)).collect::<Vec<_>>(),
            );
            let y2 = diag(
                &(0..j).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>(),
                &(0..j).map(|_| rng.random_range(0.1..3.0)).collect::<Vec<_>>(),
            );
            let to_mat = |v: &[f64]| -> Vec<f64> { (0..j * j).map(|f| if f / j == f % j { v[f / j] } else { 0.0 }).collect() };
            let full = gaussian_cross_entropy_full(&y1.mean, &to_mat(&y1.var), &y2.mean, &to_mat(&y2.var)).unwrap();
            let d = gaussian_cross_entropy_diag(&y1, &y2).unwrap();
            assert!((full - d).abs() <= 1e-12, "{full} vs {d}");
        }
    }

    #[test]
    fn diag_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y1 = diag(&[0.2, -1.0, 0.5], &[0.7, 1.4, 0.3]);
        let y2 = diag(&[-0.3, 0.1, 1.0], &[1.1, 0.6, 2.0]);
        let samples: Vec<f64> = (0..1_000_000)
            .map(|_| {
                let x: Vec<f64> = (0..3)
                    .map(|c| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        y1.mean[c] + e * y1.var[c].sqrt()
                    })
                    .collect();
                log_density_diag(&x, &y2).unwrap()
            })
            .collect();
        let (m, se) = mean_and_se(&samples);
        let exact = gaussian_cross_entropy_diag(&y1, &y2).unwrap();
        assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact} (se {se})");
    }

    struct Instance {
        fused: GaussianDiag<f64>,
        gmm: LatentGmm<f64>,
        a: Vec<f64>,
        gamma: Vec<f64>,
        x: Vec<f64>,
        dec_w: Vec<f64>,
    }

    fn instance(rng: &mut ChaCha8Rng) -> Instance {
        let (j, k, d) = (2, 4, 3);
        let fused = diag(
            &(0..j).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
            &(0..j).map(|_| rng.random_range(0.2..1.0)).collect::<Vec<_>>(),
        );
        let gmm = LatentGmm::new(
            Tensor::from_fn(&[2, 2, j], |_| rng.random_range(-2.0..2.0)),
            Tensor::from_fn(&[2, 2, j], |_| rng.random_range(0.3..2.0)),
            vec![2, 2],
        )
        .unwrap();
        let mut a: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = a.iter().sum();
        a.iter_mut().for_each(|x| *x /= s);
        let mut gamma: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        gamma[k - 1] = 0.0;
        let s: f64 = gamma.iter().sum();
        gamma.iter_mut().for_each(|x| *x /= s);
        Instance {
            fused,
            gmm,
            a,
            gamma,
            x: (0..d).map(|_| rng.random_range(0.0..1.0)).collect(),
            dec_w: (0..j * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// A small nonlinear decoder: mu_hat = tanh(W z), var_hat = 0.2 + z_0^2.
    fn decode(w: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = w.len() / z.len();
        let mu: Vec<f64> = (0..d).map(|o| (0..z.len()).map(|i| w[i * d + o] * z[i]).sum::<f64>().tanh()).collect();
        let var = vec![0.2 + z[0] * z[0]; d];
        (mu, var)
    }

    #[test]
    fn single_sample_elbo_examples() {
        let one = LatentGmm::new(Tensor::zeros(&[1, 1]), Tensor::ones(&[1, 1]), vec![1]).unwrap();
        let fused = diag(&[0.5], &[0.25]);
        let x = [0.3, 0.7];
        let ones = [1.0, 1.0];
        let r = single_sample_elbo(&fused, &[SampleRecon { x: &x, per_cluster: vec![(&x, &ones)] }], &one, &[1.0], &[1.0]).unwrap();
        assert_eq!(r.reconstruction, vec![0.0]);
        // with A = gamma = 1 only the Gaussian fit remains
        assert_relative_eq!(r.clustering, -(0.25 + 0.25), epsilon = 1e-15);
        assert_relative_eq!(r.entropy, 0.25f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(r.total, r.reconstruction[0] + r.entropy + r.clustering, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_matches_monte_carlo_expectations() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let inst = instance(&mut rng);
            let j = 2;
            let d = inst.x.len();
            let diffs: Vec<f64> = (0..100_000)
                .map(|_| {
                    let z: Vec<f64> = (0..j)
                        .map(|c| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            inst.fused.mean[c] + e * inst.fused.var[c].sqrt()
                        })
                        .collect();
                    let (mh, vh) = decode(&inst.dec_w, &z);
                    let closed = single_sample_elbo(
                        &inst.fused,
                        &[SampleRecon { x: &inst.x, per_cluster: vec![(&mh, &vh)] }],
                        &inst.gmm,
                        &inst.a,
                        &inst.gamma,
                    )
                    .unwrap()
                    .total;
                    // exact log-joint terms at this z
                    let log_px = log_density_diag(&inst.x, &GaussianDiag { mean: mh.clone(), var: vh.clone() }).unwrap();
                    let mut t = log_px - log_density_diag(&z, &inst.fused).unwrap();
                    for k in 0..inst.a.len() {
                        let g = inst.gamma[k];
                        if g > 0.0 {
                            t += g * (log_density_diag(&z, &inst.gmm.component(k)).unwrap() + inst.a[k].ln() - g.ln());
                        }
                    }
                    (closed - d as f64 * LN_2PI + j as f64) / 2.0 - t
                })
                .collect();
            let (m, se) = mean_and_se(&diffs);
            assert!(m.abs() < 3.0 * se.max(1e-12), "mean diff {m}, se {se}");
        }
    }

    #[test]
    fn graph_matches_values_for_every_reconstruction_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, j, k, d) = (3, 2, 4, 5);
        let gmm = LatentGmm::new(
            Tensor::from_fn(&[2, 2, j], |_| rng.random_range(-2.0..2.0)),
            Tensor::from_fn(&[2, 2, j], |_| rng.random_range(0.3..2.0)),
            vec![2, 2],
        )
        .unwrap();
        let mut a = Tensor::from_fn(&[2, 2], |_| rng.random_range(0.1..1.0));
        a = a.scale(1.0 / a.sum_all());
        let mut gam = Tensor::from_fn(&[b, k], |_| rng.random_range(0.0..1.0));
        for i in 0..b {
            let s: f64 = gam.data()[i * k..(i + 1) * k].iter().sum();
            gam.data_mut()[i * k..(i + 1) * k].iter_mut().for_each(|x| *x /= s);
        }
        let gamma = Responsibilities { gamma: gam.clone() };
        let mu = Tensor::from_fn(&[b, j], |_| rng.random_range(-1.0..1.0));
        let var = Tensor::from_fn(&[b, j], |_| rng.random_range(0.2..1.0));
        let x = Tensor::from_fn(&[b, d], |_| rng.random_range(0.0..1.0));
        let sh_m = Tensor::from_fn(&[b, d], |_| rng.random_range(0.0..1.0));
        let sh_v = Tensor::from_fn(&[b, d], |_| rng.random_range(0.1..1.0));
        let pc_m = Tensor::from_fn(&[b, k, d], |_| rng.random_range(0.0..1.0));
        let pc_v = Tensor::from_fn(&[b, k, d], |_| rng.random_range(0.1..1.0));
        let ex_m = Tensor::from_fn(&[k, d], |_| rng.random_range(0.0..1.0));
        let ex_v = Tensor::from_fn(&[k, 1], |_| rng.random_range(0.1..1.0));
        let mask = Tensor::new(vec![b, 1], vec![1.0, 0.0, 1.0]).unwrap();

        let g = Graph::new();
        let modalities = vec![
            ModalityTerm { x: x.clone(), mask: None, recon: Reconstruction::Shared { mu: g.constant(sh_m.clone()), var: g.constant(sh_v.clone()) } },
            ModalityTerm { x: x.clone(), mask: Some(mask.clone()), recon: Reconstruction::PerCluster { mu: g.constant(pc_m.clone()), var: g.constant(pc_v.clone()) } },
            ModalityTerm { x: x.clone(), mask: None, recon: Reconstruction::Expert { mu: g.constant(ex_m.clone()), var: g.constant(ex_v.clone()) } },
        ];
        let inp = ElboInputs {
            mu: g.constant(mu.clone()),
            var: g.constant(var.clone()),
            modalities,
            a: g.constant(a.clone()),
            gmm: &gmm,
            gamma: &gamma,
        };
        let out = elbo_batch(&g, &inp).unwrap();
        let mut sums = ElboBreakdown { reconstruction: vec![0.0; 3], entropy: 0.0, clustering: 0.0, total: 0.0 };
        for i in 0..b {
            let row = |t: &Tensor<f64>, w: usize, off: usize| t.data()[off..off + w].to_vec();
            let xi = row(&x, d, i * d);
            let shm = row(&sh_m, d, i * d);
            let shv = row(&sh_v, d, i * d);
            let pcm: Vec<Vec<f64>> = (0..k).map(|c| row(&pc_m, d, (i * k + c) * d)).collect();
            let pcv: Vec<Vec<f64>> = (0..k).map(|c| row(&pc_v, d, (i * k + c) * d)).collect();
            let exm: Vec<Vec<f64>> = (0..k).map(|c| row(&ex_m, d, c * d)).collect();
            let exv: Vec<Vec<f64>> = (0..k).map(|c| vec![ex_v.data()[c]; d]).collect();
            let mut recon = vec![
                SampleRecon { x: &xi, per_cluster: vec![(&shm, &shv)] },
                SampleRecon { x: &xi, per_cluster: (0..k).map(|c| (pcm[c].as_slice(), pcv[c].as_slice())).collect() },
                SampleRecon { x: &xi, per_cluster: (0..k).map(|c| (exm[c].as_slice(), exv[c].as_slice())).collect() },
            ];
            if mask.data()[i] == 0.0 {
                recon.remove(1);
            }
            let fused = diag(&row(&mu, j, i * j), &row(&var, j, i * j));
            let r = single_sample_elbo(&fused, &recon, &gmm, a.data(), gamma.row(i)).unwrap();
            assert_relative_eq!(out.per_sample.value().data()[i], r.total, epsilon = 1e-10);
            sums.reconstruction[0] += r.reconstruction[0] / b as f64;
            if mask.data()[i] != 0.0 {
                sums.reconstruction[1] += r.reconstruction[1] / b as f64;
            }
            sums.reconstruction[2] += r.reconstruction.last().unwrap() / b as f64;
            sums.entropy += r.entropy / b as f64;
            sums.clustering += r.clustering / b as f64;
        }
        for m in 0..3 {
            assert_relative_eq!(out.breakdown.reconstruction[m], sums.reconstruction[m], epsilon = 1e-10);
        }
        assert_relative_eq!(out.breakdown.entropy, sums.entropy, epsilon = 1e-10);
        assert_relative_eq!(out.breakdown.clustering, sums.clustering, epsilon = 1e-10);
        let parts = out.breakdown.reconstruction.iter().sum::<f64>() + out.breakdown.entropy + out.breakdown.clustering;
        assert!((out.breakdown.total - parts).abs() < 1e-10);
    }

    #[test]
    fn relabeling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = instance(&mut rng);
        let k = 4;
        let perm = [2, 0, 3, 1];
        let mut means = Tensor::zeros(&[2, 2, 2]);
        let mut vars = Tensor::zeros(&[2, 2, 2]);
        for c in 0..k {
            for dd in 0..2 {
                means.data_mut()[perm[c] * 2 + dd] = inst.gmm.mean(c)[dd];
                vars.data_mut()[perm[c] * 2 + dd] = inst.gmm.var(c)[dd];
            }
        }
        let pg = LatentGmm::new(means, vars, vec![2, 2]).unwrap();
        let mut pa = vec![0.0; k];
        let mut pgam = vec![0.0; k];
        for c in 0..k {
            pa[perm[c]] = inst.a[c];
            pgam[perm[c]] = inst.gamma[c];
        }
        let recon = |_: ()| -> Vec<SampleRecon<'_, f64>> { vec![] };
        let r1 = single_sample_elbo(&inst.fused, &recon(()), &inst.gmm, &inst.a, &inst.gamma).unwrap();
        let r2 = single_sample_elbo(&inst.fused, &recon(()), &pg, &pa, &pgam).unwrap();
        assert_relative_eq!(r1.total, r2.total, epsilon = 1e-12);
    }

    #[test]
    fn dataset_loss_examples() {
        let g = Graph::new();
        let one = g.constant(Tensor::from_vec(vec![-3.5]));
        assert_eq!(dataset_loss(one, None).unwrap().value().item().unwrap(), 3.5);
        let l1 = g.constant(Tensor::scalar(2.0));
        assert_eq!(dataset_loss(one, Some((0.5, l1))).unwrap().value().item().unwrap(), 4.5);
        let dup = g.constant(Tensor::from_vec(vec![-1.0, -2.0, -1.0, -2.0]));
        let half = g.constant(Tensor::from_vec(vec![-1.0, -2.0]));
        assert_eq!(
            dataset_loss(dup, None).unwrap().value().item().unwrap(),
            dataset_loss(half, None).unwrap().value().item().unwrap()
        );
    }
}

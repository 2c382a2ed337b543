use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{DecoderConfig, TrainConfig};
use crate::codec::{
    decode_expert_curve, decode_neural, encode, fuse_poe, fuse_poe_values, sample_latent, Activation, BoundMlp,
    DecoderVariance, ExpertCurveSet, Mlp, MlpSpec,
};
use crate::dag::{edge_indicator, edge_indicator_var, edge_l1_var, hard_adjacency, score_order, DagParams, EdgeScores, HardDag};
use crate::data::{BatchPart, Dataset};
use crate::elbo::{
    dataset_loss, elbo_batch, modality_recon, unit_normal_term, ElboBreakdown, ElboInputs, ModalityTerm, Reconstruction,
};
use crate::error::{contract, Result};
use crate::gmm::{responsibilities_batch, LatentGmm, Responsibilities};
use crate::joint::{joint_tensor, joint_var, CausalTables, JointTensor};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Expert,
    Xi,
    BRaw,
    WLogits,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [Self::Encoder, Self::Decoder, Self::Expert, Self::Xi, Self::BRaw, Self::WLogits];
    pub const STRUCTURE: [ParamGroup; 3] = [Self::Xi, Self::BRaw, Self::WLogits];
    pub const CODEC: [ParamGroup; 3] = [Self::Encoder, Self::Decoder, Self::Expert];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoder {
    Shared { mlp: Mlp<f64>, variance: DecoderVariance },
    PerCluster { mlps: Vec<Mlp<f64>>, variance: DecoderVariance },
    /// Cluster curves evaluated on a fixed ascending grid.
    Expert { curves: ExpertCurveSet<f64>, grid: Vec<f64>, var_floor: f64 },
}

/// All learnable state. The mixture is updated in closed form, never by gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub names: Vec<String>,
    pub encoders: Vec<Mlp<f64>>,
    pub decoders: Vec<Decoder>,
    pub dag: DagParams<f64>,
    pub tables: CausalTables<f64>,
    pub gmm: LatentGmm<f64>,
    pub encoder_floor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// The full clustering bound.
    Full,
    /// Reconstruction only, decoding the posterior mean.
    Reconstruction,
    /// Reconstruction plus the unit-normal prior term.
    UnitVae,
}

#[derive(Clone, Copy, Debug)]
pub enum GammaSource<'a> {
    /// From the decoded latent (the sample when noise is given).
    Latent,
    /// From the fused posterior mean.
    Mean,
    Given(&'a Responsibilities<f64>),
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub beta: f64,
    pub objective: Objective,
    pub gamma: GammaSource<'a>,
    pub lambda_b: f64,
}

pub struct Forward<'g> {
    /// Scalar loss to minimize.
    pub loss: Var<'g, f64>,
    pub breakdown: ElboBreakdown,
    pub gamma: Responsibilities<f64>,
    pub mu: Tensor<f64>,
    pub var: Tensor<f64>,
}

enum BoundDecoder {
    Shared(Range<usize>),
    PerCluster(Vec<Range<usize>>),
    Expert(usize),
}

/// Model tensors placed on a graph, in `Model::params` order.
pub struct BoundModel<'g> {
    pub vars: Vec<Var<'g, f64>>,
    encoders: Vec<Range<usize>>,
    decoders: Vec<BoundDecoder>,
    xi: usize,
    b_raw: usize,
    logits: Range<usize>,
}

impl<'g> BoundModel<'g> {
    fn mlp(&self, r: &Range<usize>, activation: Activation) -> BoundMlp<'g, f64> {
        BoundMlp::new(self.vars[r.clone()].to_vec(), activation)
    }

    pub fn xi(&self) -> Var<'g, f64> {
        self.vars[self.xi]
    }

    pub fn b_raw(&self) -> Var<'g, f64> {
        self.vars[self.b_raw]
    }

    pub fn logits(&self) -> &[Var<'g, f64>] {
        &self.vars[self.logits.clone()]
    }
}

fn split_head(out: &Tensor<f64>, j: usize, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let n = out.shape()[0];
    let mut mu = Vec::with_capacity(n * j);
    let mut var = Vec::with_capacity(n * j);
    let lf = floor.ln();
    for row in out.data().chunks(2 * j) {
        mu.extend_from_slice(&row[..j]);
        var.extend(row[j..].iter().map(|&l| l.max(lf).exp()));
    }
    (mu, var)
}

impl Model {
    pub fn init<R: Rng + ?Sized>(cfg: &TrainConfig, data: &Dataset, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if cfg.modalities.len() != data.modalities.len() {
            return Err(contract(
                "model",
                format!("config has {} modalities, data has {}", cfg.modalities.len(), data.modalities.len()),
            ));
        }
        for (mc, m) in cfg.modalities.iter().zip(&data.modalities) {
            if mc.name != m.name {
                return Err(contract("model", format!("config modality {} does not match data modality {}", mc.name, m.name)));
            }
        }
        let j = cfg.latent_dim;
        let k = cfg.clusters();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for (mc, m) in cfg.modalities.iter().zip(&data.modalities) {
            let d = m.features();
            let mut widths = mc.encoder_hidden.clone();
            widths.push(2 * j);
            encoders.push(Mlp::init(MlpSpec::new(d, widths), rng)?);
            let dec_spec = |hidden: &[usize], v: &DecoderVariance| {
                let mut w = hidden.to_vec();
                w.push(v.head_width(d));
                MlpSpec::new(j, w)
            };
            decoders.push(match &mc.decoder {
                DecoderConfig::Shared { hidden, variance } => Decoder::Shared {
                    mlp: Mlp::init(dec_spec(hidden, variance), rng)?,
                    variance: *variance,
                },
                DecoderConfig::PerCluster { hidden, variance } => Decoder::PerCluster {
                    mlps: (0..k).map(|_| Mlp::init(dec_spec(hidden, variance), rng)).collect::<Result<_>>()?,
                    variance: *variance,
                },
                DecoderConfig::Expert => Decoder::Expert {
                    curves: ExpertCurveSet::init(k, cfg.init.expert_var, rng)?,
                    grid: (0..d).map(|i| if d == 1 { 0.0 } else { i as f64 / (d - 1) as f64 }).collect(),
                    var_floor: cfg.var_floor,
                },
            });
        }
        let l = cfg.arities.len();
        let dag = DagParams::init(l, cfg.init.xi_std, cfg.init.b_raw, cfg.beta.init, rng)?;
        let tables = CausalTables::init(&cfg.arities, cfg.init.logits_std, rng)?;
        let mut shape = cfg.arities.clone();
        shape.push(j);
        let gmm = LatentGmm::new(Tensor::zeros(&shape), Tensor::ones(&shape), cfg.arities.clone())?;
        Ok(Self {
            names: cfg.modalities.iter().map(|m| m.name.clone()).collect(),
            encoders,
            decoders,
            dag,
            tables,
            gmm,
            encoder_floor: cfg.encoder_logvar_floor,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.gmm.dim
    }

    /// Every learnable tensor with its group, in a fixed order.
    pub fn params(&self) -> Vec<(ParamGroup, &Tensor<f64>)> {
        let mut out = Vec::new();
        for e in &self.encoders {
            out.extend(e.tensors().into_iter().map(|t| (ParamGroup::Encoder, t)));
        }
        for d in &self.decoders {
            match d {
                Decoder::Shared { mlp, .. } => out.extend(mlp.tensors().into_iter().map(|t| (ParamGroup::Decoder, t))),
                Decoder::PerCluster { mlps, .. } => {
                    for m in mlps {
                        out.extend(m.tensors().into_iter().map(|t| (ParamGroup::Decoder, t)));
                    }
                }
                Decoder::Expert { curves, .. } => out.push((ParamGroup::Expert, &curves.raw)),
            }
        }
        out.push((ParamGroup::Xi, &self.dag.xi));
        out.push((ParamGroup::BRaw, &self.dag.b_raw));
        out.extend(self.tables.w_logits.iter().map(|t| (ParamGroup::WLogits, t)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            out.extend(e.tensors_mut());
        }
        for d in &mut self.decoders {
            match d {
                Decoder::Shared { mlp, .. } => out.extend(mlp.tensors_mut()),
                Decoder::PerCluster { mlps, .. } => {
                    for m in mlps {
                        out.extend(m.tensors_mut());
                    }
                }
                Decoder::Expert { curves, .. } => out.push(&mut curves.raw),
            }
        }
        out.push(&mut self.dag.xi);
        out.push(&mut self.dag.b_raw);
        out.extend(self.tables.w_logits.iter_mut());
        out
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.params().into_iter().map(|(g, _)| g).collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.params().into_iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    /// Sum of squares of every parameter, per group, for diagnostics.
    pub fn param_norms(&self) -> Vec<(ParamGroup, f64)> {
        ParamGroup::ALL
            .iter()
            .map(|&grp| {
                let s: f64 = self
                    .params()
                    .into_iter()
                    .filter(|(g, _)| *g == grp)
                    .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
                    .sum();
                (grp, s.sqrt())
            })
            .collect()
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind<'g>(&self, g: &'g Graph<f64>, trainable: bool) -> BoundModel<'g> {
        let leaf = |t: &Tensor<f64>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let mut vars = Vec::new();
        let take = |ts: Vec<&Tensor<f64>>, vars: &mut Vec<Var<'g, f64>>| {
            let start = vars.len();
            vars.extend(ts.into_iter().map(leaf));
            start..vars.len()
        };
        let encoders = self.encoders.iter().map(|e| take(e.tensors(), &mut vars)).collect();
        let decoders = self
            .decoders
            .iter()
            .map(|d| match d {
                Decoder::Shared { mlp, .. } => BoundDecoder::Shared(take(mlp.tensors(), &mut vars)),
                Decoder::PerCluster { mlps, .. } => {
                    BoundDecoder::PerCluster(mlps.iter().map(|m| take(m.tensors(), &mut vars)).collect())
                }
                Decoder::Expert { curves, .. } => BoundDecoder::Expert(take(vec![&curves.raw], &mut vars).start),
            })
            .collect();
        let xi = take(vec![&self.dag.xi], &mut vars).start;
        let b_raw = take(vec![&self.dag.b_raw], &mut vars).start;
        let logits = take(self.tables.w_logits.iter().collect(), &mut vars);
        BoundModel {
            vars,
            encoders,
            decoders,
            xi,
            b_raw,
            logits,
        }
    }

    pub fn edge_scores(&self, beta: f64) -> EdgeScores<f64> {
        let p = DagParams {
            beta,
            ..self.dag.clone()
        };
        edge_indicator(&p)
    }

    pub fn order(&self) -> Vec<usize> {
        score_order(&self.dag.xi)
    }

    /// The soft joint at temperature `beta`.
    pub fn joint(&self, beta: f64) -> Result<JointTensor<f64>> {
        joint_tensor(&self.tables, &self.edge_scores(beta), &self.order())
    }

    pub fn hard_dag(&self, zero_tol: f64) -> HardDag {
        hard_adjacency(&self.dag, zero_tol)
    }

    /// Fused posterior `(mu, var)`, each `[N, J]`, for the whole dataset.
    pub fn embed(&self, data: &Dataset) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let j = self.latent_dim();
        let n = data.len();
        let heads = self
            .encoders
            .iter()
            .zip(&data.modalities)
            .map(|(e, m)| Ok(split_head(&e.forward_tensor(&m.x)?, j, self.encoder_floor)))
            .collect::<Result<Vec<_>>>()?;
        let mut mu = Vec::with_capacity(n * j);
        let mut var = Vec::with_capacity(n * j);
        for i in 0..n {
            let experts: Vec<(Vec<f64>, Vec<f64>)> = heads
                .iter()
                .zip(&data.modalities)
                .filter(|(_, m)| m.present.as_ref().is_none_or(|p| p[i]))
                .map(|((hm, hv), _)| (hm[i * j..(i + 1) * j].to_vec(), hv[i * j..(i + 1) * j].to_vec()))
                .collect();
            let (m, v) = fuse_poe_values(&experts)?;
            mu.extend(m);
            var.extend(v);
        }
        Ok((Tensor::new(vec![n, j], mu)?, Tensor::new(vec![n, j], var)?))
    }

    /// Responsibilities of every sample from its posterior mean.
    pub fn responsibilities(&self, data: &Dataset, beta: f64) -> Result<Responsibilities<f64>> {
        let (mu, _) = self.embed(data)?;
        responsibilities_batch(&mu, &self.gmm, &self.joint(beta)?)
    }

    /// Decoded reconstruction mean of every cluster centre, one `[K, D]` per modality.
    pub fn decode_cluster_means(&self) -> Result<Vec<Tensor<f64>>> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let k = self.gmm.clusters();
        let j = self.latent_dim();
        let centres = g.constant(self.gmm.means.reshape(&[k, j])?);
        self.decoders
            .iter()
            .zip(&bound.decoders)
            .map(|(d, bd)| {
                let t = match (d, bd) {
                    (Decoder::Shared { mlp, variance }, BoundDecoder::Shared(r)) => {
                        decode_neural(&bound.mlp(r, mlp.spec.activation), centres, *variance)?.0.value().as_ref().clone()
                    }
                    (Decoder::PerCluster { mlps, variance }, BoundDecoder::PerCluster(rs)) => {
                        let rows = mlps
                            .iter()
                            .zip(rs)
                            .enumerate()
                            .map(|(c, (mlp, r))| {
                                decode_neural(&bound.mlp(r, mlp.spec.activation), centres.narrow(0, c, 1)?, *variance).map(|x| x.0)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        g.concat(&rows, 0)?.value().as_ref().clone()
                    }
                    (Decoder::Expert { grid, var_floor, .. }, BoundDecoder::Expert(i)) => {
                        decode_expert_curve(bound.vars[*i], grid, *var_floor)?.0.value().as_ref().clone()
                    }
                    _ => unreachable!("binding mirrors the decoder list"),
                };
                Ok(t)
            })
            .collect()
    }

    /// Builds the batch loss on `g`. Without `eps` the posterior mean is decoded.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<f64>,
        bound: &BoundModel<'g>,
        batch: &[BatchPart],
        eps: Option<&Tensor<f64>>,
        opts: &ForwardOptions<'_>,
    ) -> Result<Forward<'g>> {
        if batch.len() != self.encoders.len() {
            return Err(contract("forward", "batch has the wrong number of modalities"));
        }
        let b = batch[0].x.shape()[0];
        let experts = self
            .encoders
            .iter()
            .zip(&bound.encoders)
            .zip(batch)
            .map(|((e, r), part)| encode(&bound.mlp(r, e.spec.activation), g.constant(part.x.clone()), self.encoder_floor))
            .collect::<Result<Vec<_>>>()?;
        let masks: Vec<Option<Tensor<f64>>> = batch.iter().map(|p| p.mask.clone()).collect();
        let (mu, var) = fuse_poe(&experts, &masks)?;
        let z = match eps {
            Some(eps) => sample_latent(mu, var, eps)?,
            None => mu,
        };

        let xi_val = bound.xi().value();
        let order = score_order(&xi_val);
        let e = edge_indicator_var(bound.xi(), bound.b_raw(), opts.beta)?;
        let a = joint_var(bound.logits(), e, &order)?;
        let a_num = JointTensor {
            a: a.value().as_ref().clone(),
        };
        let gamma = match opts.gamma {
            GammaSource::Latent => responsibilities_batch(&z.value(), &self.gmm, &a_num)?,
            GammaSource::Mean => responsibilities_batch(&mu.value(), &self.gmm, &a_num)?,
            GammaSource::Given(r) => {
                if r.gamma.shape() != [b, self.gmm.clusters()] {
                    return Err(contract("forward", "given responsibilities do not match the batch"));
                }
                r.clone()
            }
        };

        let k = self.gmm.clusters();
        let mut terms = Vec::with_capacity(batch.len());
        for ((d, bd), part) in self.decoders.iter().zip(&bound.decoders).zip(batch) {
            let recon = match (d, bd) {
                (Decoder::Shared { mlp, variance }, BoundDecoder::Shared(r)) => {
                    let (m, v) = decode_neural(&bound.mlp(r, mlp.spec.activation), z, *variance)?;
                    Reconstruction::Shared { mu: m, var: v }
                }
                (Decoder::PerCluster { mlps, variance }, BoundDecoder::PerCluster(rs)) => {
                    let dim = part.x.shape()[1];
                    let mut ms = Vec::with_capacity(k);
                    let mut vs = Vec::with_capacity(k);
                    for (mlp, r) in mlps.iter().zip(rs) {
                        let (m, v) = decode_neural(&bound.mlp(r, mlp.spec.activation), z, *variance)?;
                        ms.push(m.reshape(&[b, 1, dim])?);
                        vs.push(v.reshape(&[b, 1, dim])?);
                    }
                    Reconstruction::PerCluster {
                        mu: g.concat(&ms, 1)?,
                        var: g.concat(&vs, 1)?,
                    }
                }
                (Decoder::Expert { grid, var_floor, .. }, BoundDecoder::Expert(i)) => {
                    let (m, v) = decode_expert_curve(bound.vars[*i], grid, *var_floor)?;
                    Reconstruction::Expert { mu: m, var: v }
                }
                _ => unreachable!("binding mirrors the decoder list"),
            };
            terms.push(ModalityTerm {
                x: part.x.clone(),
                mask: part.mask.clone(),
                recon,
            });
        }

        let mean_of = |v: &Var<'g, f64>| v.value().sum_all() / b as f64;
        let (loss, breakdown) = match opts.objective {
            Objective::Full => {
                let out = elbo_batch(
                    g,
                    &ElboInputs {
                        mu,
                        var,
                        modalities: terms,
                        a,
                        gmm: &self.gmm,
                        gamma: &gamma,
                    },
                )?;
                let penalty = if opts.lambda_b > 0.0 {
                    Some((opts.lambda_b, edge_l1_var(g, bound.b_raw())?))
                } else {
                    None
                };
                (dataset_loss(out.per_sample, penalty)?, out.breakdown)
            }
            Objective::Reconstruction | Objective::UnitVae => {
                let recon = terms
                    .iter()
                    .map(|t| modality_recon(g, t, &gamma.gamma))
                    .collect::<Result<Vec<_>>>()?;
                let mut per = recon[0];
                for r in &recon[1..] {
                    per = per.add(*r)?;
                }
                let mut clustering = 0.0;
                if opts.objective == Objective::UnitVae {
                    let u = unit_normal_term(mu, var)?;
                    clustering = mean_of(&u);
                    per = per.add(u)?;
                }
                let reconstruction: Vec<f64> = recon.iter().map(mean_of).collect();
                let breakdown = ElboBreakdown {
                    total: reconstruction.iter().sum::<f64>() + clustering,
                    reconstruction,
                    entropy: 0.0,
                    clustering,
                };
                (dataset_loss(per, None)?, breakdown)
            }
        };
        Ok(Forward {
            loss,
            breakdown,
            gamma,
            mu: mu.value().as_ref().clone(),
            var: var.value().as_ref().clone(),
        })
    }
}

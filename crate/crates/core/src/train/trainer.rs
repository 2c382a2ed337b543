use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{PretrainMode, TrainConfig};
use super::model::{Forward, ForwardOptions, GammaSource, Model, Objective, ParamGroup};
use super::optim::Optimizer;
use crate::codec::standard_normal;
use crate::dag::{anneal_beta, trace_power_sum, HardDag};
use crate::data::Dataset;
use crate::elbo::ElboBreakdown;
use crate::error::{Error, Result};
use crate::gmm::{block_update, fit_gmm, responsibilities_batch, Responsibilities};
use crate::joint::JointTensor;
use crate::tensor::{Graph, Tensor};

pub const CHECKPOINT_FORMAT: &str = "dagmix-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's batches.
    pub breakdown: ElboBreakdown,
    pub loss: f64,
    pub beta: f64,
    pub dag: HardDag,
    /// `sum_k tr(A^k)` of the hard graph.
    pub trace: f64,
    /// Dataset responsibility mass per cluster after the mixture update.
    pub occupancy: Vec<f64>,
    /// Relaxed edge scores, row-major `[parent][child]`.
    pub edge_scores: Vec<f64>,
}

/// Everything needed to resume a run bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batch steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub pretrained: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: TrainConfig,
    state: TrainState,
}

/// Result of one optimizer step.
pub struct StepOutcome {
    pub loss: f64,
    pub breakdown: ElboBreakdown,
    pub gamma: Responsibilities<f64>,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn norms_message(model: &Model) -> String {
    model
        .param_norms()
        .iter()
        .map(|(g, n)| format!("{g:?}={n:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(&config, data, &mut rng)?;
        let optimizer = Optimizer::new(config.optimizer, &model.shapes());
        Ok(Self {
            config,
            state: TrainState {
                model,
                optimizer,
                epoch: 0,
                step: 0,
                rng,
                pretrained: false,
                history: Vec::new(),
            },
        })
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn steps_per_epoch(&self, data: &Dataset) -> usize {
        data.len().div_ceil(self.config.batch_size)
    }

    /// Temperature at the current step.
    pub fn beta(&self, data: &Dataset) -> Result<f64> {
        anneal_beta(&self.config.beta_schedule(self.steps_per_epoch(data)), self.state.step)
    }

    pub fn joint(&self, data: &Dataset) -> Result<JointTensor<f64>> {
        self.state.model.joint(self.beta(data)?)
    }

    pub fn hard_dag(&self) -> HardDag {
        self.state.model.hard_dag(self.config.zero_tol)
    }

    pub fn responsibilities(&self, data: &Dataset) -> Result<Responsibilities<f64>> {
        self.state.model.responsibilities(data, self.beta(data)?)
    }

    /// One gradient step on the batch `idx`, updating only `groups`.
    pub fn step(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        eps: Option<&Tensor<f64>>,
        opts: &ForwardOptions<'_>,
        groups: &[ParamGroup],
        lr: f64,
    ) -> Result<StepOutcome> {
        let batch = data.batch(idx)?;
        let g = Graph::new();
        let model = &self.state.model;
        if let Some((grp, _)) = model.params().iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite {grp:?} parameter at epoch {} step {}; parameter norms: {}",
                self.state.epoch,
                self.state.step,
                norms_message(model)
            )));
        }
        let bound = model.bind(&g, true);
        let Forward {
            loss, breakdown, gamma, ..
        } = model.forward(&g, &bound, &batch, eps, opts)?;
        let loss_val = loss.value().item()?;
        if !loss_val.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {} step {}; parameter norms: {}",
                self.state.epoch,
                self.state.step,
                norms_message(model)
            )));
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor<f64>> = bound.vars.iter().map(|v| grads.wrt(*v)).collect();
        if let Some(i) = grads.iter().position(|t| !t.all_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for parameter {i} ({:?}) at epoch {} step {}; parameter norms: {}",
                model.groups()[i],
                self.state.epoch,
                self.state.step,
                norms_message(model)
            )));
        }
        let active: Vec<bool> = model.groups().iter().map(|g| groups.contains(g)).collect();
        let clip = self.config.grad_clip;
        let mut params = self.state.model.params_mut();
        let grad_norm = self.state.optimizer.step(&mut params, &grads, &active, lr, clip)?;
        Ok(StepOutcome {
            loss: loss_val,
            breakdown,
            gamma,
            grad_norm,
        })
    }

    /// Refits the mixture from scratch to the current embeddings.
    pub fn fit_mixture(&mut self, data: &Dataset, max_iters: usize) -> Result<usize> {
        let (mu, var) = self.state.model.embed(data)?;
        let a = self.joint(data)?;
        let fit = fit_gmm(&mu, &var, &a, self.config.var_floor, max_iters, &mut self.state.rng)?;
        log::debug!(
            "mixture fit: {} iterations, converged {}, {} reseeded",
            fit.iterations,
            fit.converged,
            fit.reseeded
        );
        self.state.model.gmm = fit.gmm;
        Ok(fit.iterations)
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.state.rng);
        idx
    }

    /// Encoder and decoder warm-up followed by a mixture fit. A no-op when
    /// pre-training is disabled or already done.
    pub fn pretrain(&mut self, data: &Dataset) -> Result<()> {
        if self.state.pretrained {
            return Ok(());
        }
        let Some(p) = self.config.pretrain.clone() else {
            self.fit_mixture(data, 100)?;
            self.state.pretrained = true;
            return Ok(());
        };
        self.fit_mixture(data, p.gmm_max_iters)?;
        let lr = p.learning_rate.unwrap_or(self.config.learning_rate);
        let j = self.state.model.latent_dim();
        let beta = self.config.beta.init;
        for epoch in 0..p.epochs {
            let idx = self.shuffled(data.len());
            let mut total = 0.0;
            for chunk in idx.chunks(self.config.batch_size) {
                let (objective, eps) = match p.mode {
                    PretrainMode::Reconstruction => (Objective::Reconstruction, None),
                    PretrainMode::UnitVae => (
                        Objective::UnitVae,
                        Some(standard_normal::<f64, _>(&[chunk.len(), j], &mut self.state.rng)),
                    ),
                };
                let opts = ForwardOptions {
                    beta,
                    objective,
                    gamma: GammaSource::Mean,
                    lambda_b: 0.0,
                };
                let out = self.step(data, chunk, eps.as_ref(), &opts, &ParamGroup::CODEC, lr)?;
                total += out.loss * chunk.len() as f64;
            }
            log::info!("pretrain epoch {epoch}: loss {:.6}", total / data.len() as f64);
        }
        self.fit_mixture(data, p.gmm_max_iters)?;
        self.state.pretrained = true;
        Ok(())
    }

    /// One pass over the data, then the mixture update with the structure
    /// re-steps that follow it.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        let n = data.len();
        let j = self.state.model.latent_dim();
        let lr = self.config.learning_rate;
        let idx = self.shuffled(n);
        let noise = Normal::new(0.0, self.config.xi_noise_std).map_err(|e| Error::Config(e.to_string()))?;

        let mut acc: Option<ElboBreakdown> = None;
        let mut loss_sum = 0.0;
        let mut last: Option<(Vec<usize>, Tensor<f64>)> = None;
        for chunk in idx.chunks(self.config.batch_size) {
            let beta = self.beta(data)?;
            if self.config.xi_noise_std > 0.0 && self.state.step % self.config.xi_noise_every == 0 {
                let xi = &mut self.state.model.dag.xi;
                for x in xi.data_mut() {
                    *x += noise.sample(&mut self.state.rng);
                }
            }
            let eps = standard_normal::<f64, _>(&[chunk.len(), j], &mut self.state.rng);
            let opts = ForwardOptions {
                beta,
                objective: Objective::Full,
                gamma: GammaSource::Latent,
                lambda_b: self.config.lambda_b,
            };
            let out = self.step(data, chunk, Some(&eps), &opts, &ParamGroup::ALL, lr)?;
            let w = chunk.len() as f64;
            loss_sum += out.loss * w;
            acc = Some(match acc {
                None => scale_breakdown(&out.breakdown, w),
                Some(a) => add_breakdown(&a, &scale_breakdown(&out.breakdown, w)),
            });
            self.state.step += 1;
            last = Some((chunk.to_vec(), eps));
        }

        let beta = self.beta(data)?;
        let mut occupancy = Vec::new();
        for _ in 0..self.config.gmm_iters_per_epoch {
            let (mu, var) = self.state.model.embed(data)?;
            let a = self.state.model.joint(beta)?;
            let gamma = responsibilities_batch(&mu, &self.state.model.gmm, &a)?;
            occupancy = gamma.occupancy();
            self.state.model.gmm = block_update(&self.state.model.gmm, &mu, &var, &gamma, self.config.var_floor)?;
            if let Some((last_idx, last_eps)) = &last {
                for _ in 0..self.config.extra_a_steps {
                    let opts = ForwardOptions {
                        beta,
                        objective: Objective::Full,
                        gamma: GammaSource::Latent,
                        lambda_b: self.config.lambda_b,
                    };
                    self.step(data, last_idx, Some(last_eps), &opts, &ParamGroup::STRUCTURE, lr)?;
                }
            }
        }
        if occupancy.is_empty() {
            occupancy = self.responsibilities(data)?.occupancy();
        }

        let breakdown = scale_breakdown(&acc.expect("at least one batch"), 1.0 / n as f64);
        let dag = self.hard_dag();
        let record = EpochRecord {
            epoch: self.state.epoch,
            loss: loss_sum / n as f64,
            beta,
            trace: trace_power_sum(&dag.adjacency, dag.nodes),
            dag,
            occupancy,
            edge_scores: self.state.model.edge_scores(beta).e.into_data(),
            breakdown,
        };
        self.state.epoch += 1;
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Pre-trains if needed, then runs the remaining epochs, calling
    /// `on_epoch` after each.
    pub fn fit<F>(&mut self, data: &Dataset, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        self.pretrain(data)?;
        while self.state.epoch < self.config.epochs {
            let rec = self.train_epoch(data)?;
            log::info!(
                "epoch {}: loss {:.6}, beta {:.4}, edges {:?}",
                rec.epoch,
                rec.loss,
                rec.beta,
                rec.dag.edges()
            );
            on_epoch(self, &rec)?;
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            state: self.state.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} version {}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        if ck.state.optimizer_len() != ck.state.model.shapes().len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        Ok(Self {
            config: ck.config,
            state: ck.state,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = self.to_checkpoint_string()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

impl TrainState {
    fn optimizer_len(&self) -> usize {
        self.optimizer.len()
    }
}

fn scale_breakdown(b: &ElboBreakdown, w: f64) -> ElboBreakdown {
    ElboBreakdown {
        reconstruction: b.reconstruction.iter().map(|x| x * w).collect(),
        entropy: b.entropy * w,
        clustering: b.clustering * w,
        total: b.total * w,
    }
}

fn add_breakdown(a: &ElboBreakdown, b: &ElboBreakdown) -> ElboBreakdown {
    ElboBreakdown {
        reconstruction: a.reconstruction.iter().zip(&b.reconstruction).map(|(x, y)| x + y).collect(),
        entropy: a.entropy + b.entropy,
        clustering: a.clustering + b.clustering,
        total: a.total + b.total,
    }
}

use serde::{Deserialize, Serialize};

use crate::codec::{DecoderVariance, DEFAULT_LOGVAR_FLOOR};
use crate::dag::{BetaSchedule, DEFAULT_ZERO_TOL};
use crate::error::{Error, Result};
use crate::gmm::DEFAULT_VAR_FLOOR;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Encoders and decoders fit the reconstruction term only, with `z = mu`.
    Reconstruction,
    /// A standard VAE with a unit-normal prior.
    UnitVae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub epochs: usize,
    pub learning_rate: Option<f64>,
    /// Cap on responsibility/block-update alternations when fitting the mixture.
    pub gmm_max_iters: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::UnitVae,
            epochs: 20,
            learning_rate: None,
            gmm_max_iters: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaConfig {
    pub init: f64,
    #[serde(rename = "final")]
    pub final_: f64,
    pub update_every: usize,
    /// Steps over which to anneal; `None` means the whole run.
    pub total_steps: Option<usize>,
}

impl Default for BetaConfig {
    fn default() -> Self {
        Self {
            init: 1.0,
            final_: 1.0,
            update_every: 1,
            total_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub xi_std: f64,
    pub b_raw: f64,
    pub logits_std: f64,
    /// Initial reconstruction variance of expert curves.
    pub expert_var: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            xi_std: 0.1,
            b_raw: 0.0,
            logits_std: 0.1,
            expert_var: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderConfig {
    Shared { hidden: Vec<usize>, variance: DecoderVariance },
    PerCluster { hidden: Vec<usize>, variance: DecoderVariance },
    Expert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    pub encoder_hidden: Vec<usize>,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub arities: Vec<usize>,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: BetaConfig,
    pub xi_noise_std: f64,
    pub xi_noise_every: usize,
    pub extra_a_steps: usize,
    pub gmm_iters_per_epoch: usize,
    /// `None` skips pre-training; the mixture is still initialized.
    pub pretrain: Option<PretrainConfig>,
    pub lambda_b: f64,
    pub var_floor: f64,
    pub encoder_logvar_floor: f64,
    pub grad_clip: f64,
    pub zero_tol: f64,
    pub init: InitConfig,
    pub modalities: Vec<ModalityConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 2,
            arities: vec![2, 2, 2],
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            epochs: 100,
            batch_size: 128,
            beta: BetaConfig::default(),
            xi_noise_std: 0.0,
            xi_noise_every: 1,
            extra_a_steps: 1,
            gmm_iters_per_epoch: 1,
            pretrain: Some(PretrainConfig::default()),
            lambda_b: 0.0,
            var_floor: DEFAULT_VAR_FLOOR,
            encoder_logvar_floor: DEFAULT_LOGVAR_FLOOR,
            grad_clip: 10.0,
            zero_tol: DEFAULT_ZERO_TOL,
            init: InitConfig::default(),
            modalities: vec![ModalityConfig {
                name: "image".into(),
                encoder_hidden: vec![64, 32, 16],
                decoder: DecoderConfig::Shared {
                    hidden: vec![16, 32, 64],
                    variance: DecoderVariance::Learned { floor: 1e-3 },
                },
            }],
        }
    }
}

impl TrainConfig {
    /// The reference circles settings: learning rate 1e-6, [128, 64, 32, 16]
    /// encoder and [16, 32, 64, 128] decoder.
    pub fn reference_circles() -> Self {
        Self {
            learning_rate: 1e-6,
            modalities: vec![ModalityConfig {
                name: "image".into(),
                encoder_hidden: vec![128, 64, 32, 16],
                decoder: DecoderConfig::Shared {
                    hidden: vec![16, 32, 64, 128],
                    variance: DecoderVariance::Learned { floor: 1e-3 },
                },
            }],
            ..Self::default()
        }
    }

    pub fn clusters(&self) -> usize {
        self.arities.iter().product()
    }

    pub fn beta_schedule(&self, steps_per_epoch: usize) -> BetaSchedule {
        BetaSchedule {
            beta_init: self.beta.init,
            beta_final: self.beta.final_,
            update_every: self.beta.update_every,
            total_steps: self.beta.total_steps.unwrap_or(self.epochs * steps_per_epoch),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.arities.is_empty() || self.arities.contains(&0) {
            return bad(format!("arities must be non-empty and positive, got {:?}", self.arities));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.xi_noise_every == 0 {
            return bad("batch_size and xi_noise_every must be at least 1".into());
        }
        if !(self.xi_noise_std >= 0.0) || !(self.lambda_b >= 0.0) {
            return bad("xi_noise_std and lambda_b must be >= 0".into());
        }
        if !(self.var_floor > 0.0) || !(self.encoder_logvar_floor > 0.0) || !(self.grad_clip > 0.0) {
            return bad("floors and grad_clip must be positive".into());
        }
        if !(self.zero_tol >= 0.0) {
            return bad("zero_tol must be >= 0".into());
        }
        self.beta_schedule(1).validate()?;
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        for m in &self.modalities {
            if m.encoder_hidden.contains(&0) {
                return bad(format!("modality {}: zero-width encoder layer", m.name));
            }
            match &m.decoder {
                DecoderConfig::Shared { hidden, variance } | DecoderConfig::PerCluster { hidden, variance } => {
                    if hidden.contains(&0) {
                        return bad(format!("modality {}: zero-width decoder layer", m.name));
                    }
                    match variance {
                        DecoderVariance::Learned { floor } if !(*floor > 0.0) => {
                            return bad(format!("modality {}: variance floor must be positive", m.name))
                        }
                        DecoderVariance::Fixed { var } if !(*var > 0.0) => {
                            return bad(format!("modality {}: fixed variance must be positive", m.name))
                        }
                        _ => {}
                    }
                }
                DecoderConfig::Expert => {}
            }
        }
        if let Some(p) = &self.pretrain {
            if p.learning_rate.is_some_and(|lr| !(lr >= 0.0)) {
                return bad("pretrain.learning_rate must be >= 0".into());
            }
        }
        Ok(())
    }
}

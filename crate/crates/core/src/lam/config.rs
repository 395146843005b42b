use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphgrad::{EmaConfig, FsqConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Lapo,
    Laom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Ema,
    StopGrad,
}

/// Where the supervision loss sends its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupGradFlow {
    /// Head, IDM and encoder.
    #[default]
    Full,
    /// Head only; the latent is detached before the head.
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Vector observations: Gaussian jitter standard deviation.
    pub jitter_std: f64,
    /// Grid observations: maximum shift in pixels along each axis.
    pub shift_radius: i64,
    pub independent_views: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { jitter_std: 0.05, shift_radius: 2, independent_views: true }
    }
}

/// Latent action model settings. Key names follow the original
/// configuration tables where one exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LamConfig {
    pub variant: Variant,
    /// Full-scale value 8192 at 64px; desk default 256.
    pub latent_action_dim: usize,
    pub repr_dim: usize,
    /// K: offsets are drawn uniformly from 1..=K.
    pub future_obs_offset: usize,
    pub use_fsq: bool,
    pub fsq_levels: u32,
    /// `None` picks EMA without supervision and stop-grad with it.
    pub target_mode: Option<TargetMode>,
    pub target_tau: f64,
    pub target_update_every: u64,
    pub use_aug: bool,
    pub augmentation: AugmentationConfig,
    pub supervision: bool,
    /// λ; 0.001 for the cheetah-like setting.
    pub labeled_loss_coef: f64,
    /// Full-scale value: 128.
    pub labeled_batch_size: usize,
    pub sup_grad_flow: SupGradFlow,
    pub encoder_width: usize,
    pub idm_width: usize,
    pub fdm_width: usize,
    pub n_blocks: usize,
}

impl Default for LamConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Laom,
            latent_action_dim: 256,
            repr_dim: 64,
            future_obs_offset: 10,
            use_fsq: false,
            fsq_levels: 5,
            target_mode: None,
            target_tau: 0.001,
            target_update_every: 1,
            use_aug: true,
            augmentation: AugmentationConfig::default(),
            supervision: false,
            labeled_loss_coef: 0.01,
            labeled_batch_size: 128,
            sup_grad_flow: SupGradFlow::Full,
            encoder_width: 128,
            idm_width: 128,
            fdm_width: 128,
            n_blocks: 2,
        }
    }
}

impl LamConfig {
    /// Original LAPO: one-step IDM, quantized latents, observation reconstruction.
    pub fn lapo() -> Self {
        Self {
            variant: Variant::Lapo,
            latent_action_dim: 16,
            future_obs_offset: 1,
            use_fsq: true,
            use_aug: false,
            ..Self::default()
        }
    }

    pub fn laom() -> Self {
        Self::default()
    }

    pub fn laom_sup() -> Self {
        Self { supervision: true, ..Self::default() }
    }

    pub fn target_mode(&self) -> TargetMode {
        self.target_mode
            .unwrap_or(if self.supervision { TargetMode::StopGrad } else { TargetMode::Ema })
    }

    pub fn ema(&self) -> EmaConfig {
        EmaConfig { tau: self.target_tau, update_every: self.target_update_every }
    }

    pub fn fsq(&self) -> Result<Option<FsqConfig>> {
        if self.use_fsq {
            FsqConfig::uniform(self.latent_action_dim, self.fsq_levels).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.future_obs_offset < 1 {
            return bad("future_obs_offset must be >= 1");
        }
        if self.latent_action_dim < 1 || self.repr_dim < 1 {
            return bad("latent_action_dim and repr_dim must be >= 1");
        }
        if self.encoder_width < 1 || self.idm_width < 1 || self.fdm_width < 1 {
            return bad("network widths must be >= 1");
        }
        if !(self.labeled_loss_coef >= 0.0 && self.labeled_loss_coef.is_finite()) {
            return bad("labeled_loss_coef must be >= 0");
        }
        if self.supervision && self.labeled_batch_size == 0 {
            return bad("supervision needs labeled_batch_size >= 1");
        }
        if self.supervision && self.variant == Variant::Lapo {
            return bad("the supervision head is defined for the LAOM variant only");
        }
        if self.augmentation.jitter_std < 0.0 || self.augmentation.shift_radius < 0 {
            return bad("augmentation magnitudes must be >= 0");
        }
        self.fsq()?;
        if self.variant == Variant::Laom && self.target_mode() == TargetMode::Ema {
            self.ema().validate()?;
        }
        Ok(())
    }
}

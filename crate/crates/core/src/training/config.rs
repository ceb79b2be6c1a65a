use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    /// Fraction of the image size.
    pub max_translation: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            max_translation: 0.05,
            scale_range: [0.9, 1.1],
        }
    }
}

/// Every training hyperparameter. Unknown keys in a config file are errors;
/// missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Supervised views per sample, the input view included.
    pub views: usize,
    pub keypoints: usize,
    pub grid: usize,
    /// Width of the aggregated feature map.
    pub feature_width: usize,
    pub recon_width: usize,
    pub lambda_vgg: f64,
    pub lambda_mask: f64,
    pub lr_main: f64,
    pub lr_recon: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Edge-map line width in pixels; `None` scales 1.5 px per 64 rows.
    pub sigma_line: Option<f64>,
    pub attention_temperature: f64,
    pub augment: AugmentConfig,
    pub checkpoint_every: u64,
    /// Diffusion timestep the cached features were taken at; metadata only.
    pub feature_timestep: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            views: 4,
            keypoints: 8,
            grid: 24,
            feature_width: 32,
            recon_width: 16,
            lambda_vgg: 1.0,
            lambda_mask: 0.5,
            lr_main: 1e-4,
            lr_recon: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            sigma_line: None,
            attention_temperature: 1.0,
            augment: AugmentConfig::default(),
            checkpoint_every: 500,
            feature_timestep: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.views == 0 {
            return bad("views must be at least 1".into());
        }
        if self.keypoints < 2 {
            return bad("keypoints must be at least 2".into());
        }
        if self.grid < 2 {
            return bad("grid must be at least 2".into());
        }
        if self.feature_width == 0 || self.recon_width == 0 {
            return bad("layer widths must be positive".into());
        }
        if !(self.lambda_vgg >= 0.0 && self.lambda_mask >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.lr_main >= 0.0 && self.lr_recon >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid moment parameters".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if matches!(self.sigma_line, Some(s) if !(s > 0.0)) {
            return bad("sigma_line must be positive".into());
        }
        if !(self.attention_temperature > 0.0) {
            return bad("attention_temperature must be positive".into());
        }
        let a = &self.augment;
        if !(a.max_rotation_deg >= 0.0 && a.max_translation >= 0.0 && a.scale_range[0] > 0.0 && a.scale_range[0] <= a.scale_range[1]) {
            return bad("invalid augmentation ranges".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn sigma_line_for(&self, height: usize) -> f64 {
        self.sigma_line.unwrap_or_else(|| crate::structure::default_sigma_line(height))
    }
}

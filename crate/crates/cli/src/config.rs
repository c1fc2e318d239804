//! TOML run-configuration schema. Every field is optional and overlays the
//! built-in defaults; unknown keys are a hard error.

use anyhow::{bail, Context, Result};
use radsplat::{
    Aabb, AdamParams, AdaptiveConfig, ConfidenceConfig, EncConfig, FieldConfig, LossConfig,
    SrMode, TrainConfig,
};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub iters: Option<u64>,
    pub seed: Option<u64>,
    pub n_init_kernels: Option<usize>,
    pub densify_start: Option<u64>,
    pub densify_stop: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub holdout_every: Option<u32>,
    pub holdout_offset: Option<u32>,
    pub sr_mode: Option<String>,
    pub bbox: Option<BboxSection>,
    pub lr: LrSection,
    pub adam: AdamSection,
    pub adaptive: AdaptiveSection,
    pub loss: LossSection,
    pub confidence: ConfidenceSection,
    pub field: FieldSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BboxSection {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSection {
    pub mu: Option<f64>,
    pub log_scale: Option<f64>,
    pub rot: Option<f64>,
    pub hash: Option<f64>,
    pub mlp: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveSection {
    pub window: Option<u64>,
    pub prune_eps: Option<f64>,
    pub grad_threshold: Option<f64>,
    pub eta_start: Option<f64>,
    pub eta_end: Option<f64>,
    pub k_children: Option<usize>,
    pub offset_alpha: Option<f64>,
    pub scale_beta: Option<f64>,
    pub residual_quantile: Option<f64>,
    pub residual_insert_cap: Option<usize>,
    pub max_kernels: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_ssim: Option<f64>,
    pub mf_weight: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfidenceSection {
    pub alpha_c: Option<f64>,
    pub beta_c: Option<f64>,
    pub learnable: Option<bool>,
    pub ssim_window: Option<usize>,
    pub ssim_sigma: Option<f64>,
    pub texture_window: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSection {
    pub hidden_width: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub initial_attenuation: Option<f64>,
    pub enc3d: EncSection,
    pub enc4d: EncSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncSection {
    pub levels: Option<usize>,
    pub features_per_level: Option<usize>,
    pub table_size_log2: Option<u32>,
    pub base_resolution: Option<u32>,
    pub growth_factor: Option<f32>,
}

pub fn parse_sr_mode(s: &str) -> std::result::Result<SrMode, String> {
    match s {
        "off" => Ok(SrMode::Off),
        "bicubic" => Ok(SrMode::Bicubic),
        _ => match s.strip_prefix("dir=") {
            Some(p) if !p.is_empty() => Ok(SrMode::Dir(p.into())),
            _ => Err(format!("expected off, bicubic, or dir=PATH, got '{s}'")),
        },
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Overlays the file values onto `cfg`. Call before flag overrides.
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        fn set<T: Copy>(dst: &mut T, src: Option<T>) {
            if let Some(v) = src {
                *dst = v;
            }
        }
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.n_init_kernels, self.n_init_kernels);
        set(&mut cfg.densify_start, self.densify_start);
        set(&mut cfg.densify_stop, self.densify_stop);
        set(&mut cfg.checkpoint_every, self.checkpoint_every);
        set(&mut cfg.holdout_every, self.holdout_every);
        set(&mut cfg.holdout_offset, self.holdout_offset);
        if let Some(s) = &self.sr_mode {
            cfg.sr_mode = match parse_sr_mode(s) {
                Ok(m) => m,
                Err(e) => bail!("sr_mode: {e}"),
            };
        }
        if let Some(b) = &self.bbox {
            cfg.bbox = Aabb::new(b.min.into(), b.max.into());
        }
        apply_lr(&self.lr, &mut cfg.lr);
        apply_adam(&self.adam, &mut cfg.adam);
        apply_adaptive(&self.adaptive, &mut cfg.adaptive);
        apply_loss(&self.loss, &mut cfg.loss);
        apply_confidence(&self.confidence, &mut cfg.confidence);
        apply_field(&self.field, &mut cfg.field);
        Ok(())
    }
}

fn apply_lr(s: &LrSection, d: &mut radsplat::LearningRates) {
    d.mu = s.mu.unwrap_or(d.mu);
    d.log_scale = s.log_scale.unwrap_or(d.log_scale);
    d.rot = s.rot.unwrap_or(d.rot);
    d.hash = s.hash.unwrap_or(d.hash);
    d.mlp = s.mlp.unwrap_or(d.mlp);
}

fn apply_adam(s: &AdamSection, d: &mut AdamParams) {
    d.beta1 = s.beta1.unwrap_or(d.beta1);
    d.beta2 = s.beta2.unwrap_or(d.beta2);
    d.eps = s.eps.unwrap_or(d.eps);
}

fn apply_adaptive(s: &AdaptiveSection, d: &mut AdaptiveConfig) {
    d.window = s.window.unwrap_or(d.window);
    d.prune_eps = s.prune_eps.unwrap_or(d.prune_eps);
    d.grad_threshold = s.grad_threshold.unwrap_or(d.grad_threshold);
    d.eta_start = s.eta_start.unwrap_or(d.eta_start);
    d.eta_end = s.eta_end.unwrap_or(d.eta_end);
    d.k_children = s.k_children.unwrap_or(d.k_children);
    d.offset_alpha = s.offset_alpha.unwrap_or(d.offset_alpha);
    d.scale_beta = s.scale_beta.unwrap_or(d.scale_beta);
    d.residual_quantile = s.residual_quantile.unwrap_or(d.residual_quantile);
    d.residual_insert_cap = s.residual_insert_cap.unwrap_or(d.residual_insert_cap);
    d.max_kernels = s.max_kernels.unwrap_or(d.max_kernels);
}

fn apply_loss(s: &LossSection, d: &mut LossConfig) {
    d.lambda_ssim = s.lambda_ssim.unwrap_or(d.lambda_ssim);
    d.mf_weight = s.mf_weight.unwrap_or(d.mf_weight);
}

fn apply_confidence(s: &ConfidenceSection, d: &mut ConfidenceConfig) {
    d.alpha_c = s.alpha_c.unwrap_or(d.alpha_c);
    d.beta_c = s.beta_c.unwrap_or(d.beta_c);
    d.learnable = s.learnable.unwrap_or(d.learnable);
    d.ssim_window = s.ssim_window.unwrap_or(d.ssim_window);
    d.ssim_sigma = s.ssim_sigma.unwrap_or(d.ssim_sigma);
    d.texture_window = s.texture_window.unwrap_or(d.texture_window);
}

fn apply_enc(s: &EncSection, d: &mut EncConfig) {
    d.levels = s.levels.unwrap_or(d.levels);
    d.features_per_level = s.features_per_level.unwrap_or(d.features_per_level);
    d.table_size_log2 = s.table_size_log2.unwrap_or(d.table_size_log2);
    d.base_resolution = s.base_resolution.unwrap_or(d.base_resolution);
    d.growth_factor = s.growth_factor.unwrap_or(d.growth_factor);
}

fn apply_field(s: &FieldSection, d: &mut FieldConfig) {
    d.hidden_width = s.hidden_width.unwrap_or(d.hidden_width);
    d.hidden_layers = s.hidden_layers.unwrap_or(d.hidden_layers);
    d.initial_attenuation = s.initial_attenuation.unwrap_or(d.initial_attenuation);
    apply_enc(&s.enc3d, &mut d.enc3d);
    apply_enc(&s.enc4d, &mut d.enc4d);
}

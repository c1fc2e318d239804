//! Adaptive density control: attenuation-based pruning, screen-space
//! gradient-driven kernel splitting, and residual-guided insertion.
//!
//! All operations run between rendering passes and keep `scene.kernels` and
//! `scene.stats` parallel.

use crate::error::{Error, Result};
use crate::geometry::{project_covariance, project_point, CameraView};
use crate::image::ProjectionImage;
use crate::scene::{
    covariance_from_params, GaussianKernel, KernelStats, Scene, StatKind, SCALE_MAX, SCALE_MIN,
};
use nalgebra::{Cholesky, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    /// Iterations between density-control passes.
    pub window: u64,
    /// Kernels with mean sampled attenuation strictly below this are removed.
    pub prune_eps: f64,
    /// Screen-space gradient threshold for splitting.
    pub grad_threshold: f64,
    pub eta_start: f64,
    pub eta_end: f64,
    /// Children per split parent.
    pub k_children: usize,
    /// Scales the parent covariance used to sample child mean offsets.
    pub offset_alpha: f64,
    /// Multiplies the parent scale for each child.
    pub scale_beta: f64,
    /// Residual pixels above this quantile of the residual image qualify.
    pub residual_quantile: f64,
    /// Most kernels inserted per residual pass.
    pub residual_insert_cap: usize,
    pub max_kernels: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            window: 100,
            prune_eps: 1e-6,
            grad_threshold: 0.016,
            eta_start: 1.0,
            eta_end: 0.5,
            k_children: 2,
            offset_alpha: 1.0,
            scale_beta: 0.6,
            residual_quantile: 0.99,
            residual_insert_cap: 32,
            max_kernels: 30_000,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_beta > 0.0 && self.scale_beta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "scale_beta must be in (0, 1), got {}",
                self.scale_beta
            )));
        }
        if !(self.eta_end > 0.0 && self.eta_end <= self.eta_start) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < eta_end <= eta_start, got {} / {}",
                self.eta_end, self.eta_start
            )));
        }
        if !(self.prune_eps > 0.0) {
            return Err(Error::InvalidConfig("prune_eps must be > 0".into()));
        }
        if self.window == 0 || self.k_children == 0 || self.max_kernels == 0 {
            return Err(Error::InvalidConfig(
                "window, k_children, max_kernels must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.residual_quantile) {
            return Err(Error::InvalidConfig(
                "residual_quantile must be in [0, 1)".into(),
            ));
        }
        if !(self.offset_alpha >= 0.0) {
            return Err(Error::InvalidConfig("offset_alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Iteration-dependent decay applied to the split threshold.
pub fn eta(cfg: &AdaptiveConfig, iter: u64, max_iter: u64) -> f64 {
    let frac = iter as f64 / max_iter.max(1) as f64;
    cfg.eta_start + (cfg.eta_end - cfg.eta_start) * frac
}

/// Mean of the attenuation samples logged for one kernel.
pub fn mean_attenuation(stats: &KernelStats) -> Result<f64> {
    if stats.atten_count == 0 {
        return Err(Error::NoSamples);
    }
    Ok(stats.atten_sum / stats.atten_count as f64)
}

/// Removes every kernel whose mean sampled attenuation is strictly below
/// `prune_eps`, then resets the attenuation stats of the survivors. Kernels
/// without samples (fresh children) are kept, so a second call within the
/// same window removes nothing.
pub fn prune(scene: &mut Scene, cfg: &AdaptiveConfig) -> Result<usize> {
    let doomed: Vec<usize> = scene
        .stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.atten_count > 0 && (s.atten_sum / s.atten_count as f64) < cfg.prune_eps)
        .map(|(i, _)| i)
        .collect();
    scene.remove_sorted(&doomed);
    crate::scene::reset_stats(scene, StatKind::Attenuation);
    Ok(doomed.len())
}

/// Indices whose mean screen-space gradient norm exceeds the decayed
/// threshold. Kernels with no gradient samples are never selected.
pub fn select_densify(
    scene: &Scene,
    cfg: &AdaptiveConfig,
    iter: u64,
    max_iter: u64,
) -> Vec<usize> {
    let thresh = cfg.grad_threshold * eta(cfg, iter, max_iter);
    scene
        .stats
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.grad_count > 0 && s.grad_norm_sum / s.grad_count as f64 > thresh
        })
        .map(|(i, _)| i)
        .collect()
}

/// Splits one kernel into `k_children` copies. Child means are the parent
/// mean plus offsets drawn from N(0, alpha * Sigma) via the Cholesky factor;
/// child scales are scale_beta times the parent's (clamped); rotation is
/// inherited. The caller removes the parent and pushes the children.
pub fn split_kernel(
    parent: &GaussianKernel,
    cfg: &AdaptiveConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<GaussianKernel> {
    let sigma = covariance_from_params(parent.log_scale, parent.rot) * cfg.offset_alpha;
    // A zero alpha (or degenerate covariance) degenerates to zero offsets.
    let chol_l = Cholesky::new(sigma)
        .map(|c| c.l())
        .unwrap_or_else(Matrix3::zeros);
    let ln_beta = cfg.scale_beta.ln();
    let (ls_lo, ls_hi) = (SCALE_MIN.ln() as f32, SCALE_MAX.ln() as f32);
    (0..cfg.k_children)
        .map(|_| {
            let z = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let offset = chol_l * z;
            let mut child = *parent;
            for d in 0..3 {
                child.mu[d] = (parent.mu[d] as f64 + offset[d]) as f32;
                child.log_scale[d] =
                    ((parent.log_scale[d] as f64 + ln_beta) as f32).clamp(ls_lo, ls_hi);
            }
            child
        })
        .collect()
}

/// One densification pass: splits every kernel over the gradient threshold,
/// replacing parents with their children, then clears all gradient windows.
/// Splits that would push the scene past `max_kernels` are skipped and
/// counted in the second return slot.
pub fn densify(
    scene: &mut Scene,
    cfg: &AdaptiveConfig,
    iter: u64,
    max_iter: u64,
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let selected = select_densify(scene, cfg, iter, max_iter);
    let mut split_count = 0usize;
    let mut skipped = 0usize;
    let mut children: Vec<GaussianKernel> = Vec::new();
    let mut parents: Vec<usize> = Vec::new();
    let mut projected_len = scene.len();
    for idx in selected {
        // Replacing one parent with K children grows the scene by K - 1.
        if projected_len + cfg.k_children - 1 > cfg.max_kernels {
            skipped += 1;
            continue;
        }
        children.extend(split_kernel(&scene.kernels[idx], cfg, rng));
        parents.push(idx);
        projected_len += cfg.k_children - 1;
        split_count += 1;
    }
    scene.remove_sorted(&parents);
    for child in children {
        scene.push(child);
    }
    crate::scene::reset_stats(scene, StatKind::Gradients);
    (split_count, skipped)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Inserts small kernels along the rays of high-residual pixels.
///
/// Pixels strictly above the configured quantile of the residual image are
/// sampled uniformly without replacement (at most `residual_insert_cap`).
/// Each new kernel sits at the depth of the pixel's highest-contributing
/// existing kernel, scored by mean sampled attenuation times the projected
/// Gaussian weight at that pixel; when nothing contributes, at the ray's
/// closest approach to the scene bbox center. Scale is half the median
/// per-kernel mean scale, rotation identity, stats zeroed.
pub fn residual_guided_insert(
    scene: &mut Scene,
    residual: &ProjectionImage,
    view: &CameraView,
    cfg: &AdaptiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let n = residual.pixels.len();
    if n == 0 {
        return Ok(0);
    }
    let mut sorted: Vec<f64> = residual.pixels.iter().map(|v| *v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let qidx = ((n - 1) as f64 * cfg.residual_quantile).round() as usize;
    let thresh = sorted[qidx];
    let candidates: Vec<usize> = (0..n)
        .filter(|p| residual.pixels[*p] as f64 > thresh)
        .collect();
    if candidates.is_empty() {
        return Ok(0);
    }
    let available = cfg.max_kernels.saturating_sub(scene.len());
    if available == 0 {
        return Err(Error::CapExceeded {
            have: scene.len(),
            max: cfg.max_kernels,
        });
    }
    let want = cfg
        .residual_insert_cap
        .min(candidates.len())
        .min(available);
    let picks = rand::seq::index::sample(rng, candidates.len(), want);

    // Project the current kernels once; the per-pixel contributor search
    // reuses these.
    let kview = {
        let mut v = view.clone();
        v.k = view.intrinsics_for(residual.width, residual.height);
        v.width_hr = residual.width;
        v.height_hr = residual.height;
        v
    };
    struct Proj {
        uv: Vector2<f64>,
        depth: f64,
        cov_inv: nalgebra::Matrix2<f64>,
        weight: f64,
    }
    let projections: Vec<Option<Proj>> = scene
        .kernels
        .iter()
        .zip(&scene.stats)
        .map(|(k, s)| {
            let mean_atten = if s.atten_count > 0 {
                s.atten_sum / s.atten_count as f64
            } else {
                return None;
            };
            let (uv, depth) = project_point(k.mu_v(), &kview).ok()?;
            let sigma = covariance_from_params(k.log_scale, k.rot);
            let cov = project_covariance(&sigma, k.mu_v(), &kview).ok()?;
            let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
            let cov_inv = nalgebra::Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)])
                / det;
            Some(Proj {
                uv,
                depth,
                cov_inv,
                weight: mean_atten,
            })
        })
        .collect();

    let mut scale_means: Vec<f64> = scene
        .kernels
        .iter()
        .map(|k| k.scales().iter().sum::<f64>() / 3.0)
        .collect();
    let new_scale = if scale_means.is_empty() {
        scene.bbox.diagonal() * 0.005
    } else {
        0.5 * median(&mut scale_means)
    };
    let new_ls = (new_scale.clamp(SCALE_MIN, SCALE_MAX)).ln() as f32;

    let origin = kview.center();
    let bbox_center = scene.bbox.center();
    let mut inserted = 0usize;
    for pick in picks.iter() {
        let p = candidates[pick];
        let (px, py) = (p % residual.width, p / residual.width);
        let uv = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
        let mut best: Option<(f64, f64)> = None; // (score, depth)
        for proj in projections.iter().flatten() {
            let d = uv - proj.uv;
            let e = (d.transpose() * proj.cov_inv * d)[(0, 0)];
            let score = proj.weight * (-0.5 * e).exp();
            if score > 0.0 && best.map_or(true, |(s, _)| score > s) {
                best = Some((score, proj.depth));
            }
        }
        let mu = match best {
            Some((_, depth)) => kview.backproject(uv, depth),
            None => {
                let dir = (kview.backproject(uv, 1.0) - origin).normalize();
                origin + dir * (bbox_center - origin).dot(&dir)
            }
        };
        scene.push(GaussianKernel {
            mu: [mu[0] as f32, mu[1] as f32, mu[2] as f32],
            log_scale: [new_ls; 3],
            rot: [1.0, 0.0, 0.0, 0.0],
        });
        inserted += 1;
    }
    Ok(inserted)
}

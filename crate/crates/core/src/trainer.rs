//! The optimization loop: Adam over kernel and field parameters, adaptive
//! density control on a fixed cadence, checkpointing, and evaluation.

use crate::adaptive::{densify, prune, residual_guided_insert, AdaptiveConfig};
use crate::dnaf::{AttenuationField, FieldConfig, FieldGradAccum};
use crate::error::{Error, Result};
use crate::geometry::{load_geometry, CameraView};
use crate::image::{read_pfm, ImageRole, ProjectionImage};
use crate::optim::{AdamParams, AdamState};
use crate::phantom::{frame_times, load_manifest, projection_path, DatasetManifest};
use crate::rasterizer::{accumulate_subpixel_grads, render, render_backward, RasterConfig};
use crate::scene::{
    init_scene, read_checkpoint, write_checkpoint, Aabb, CheckpointMeta, InitConfig, Scene,
};
use crate::supervision::{
    confidence_components, confidence_map, loss_gt, loss_sr, sr_apply, ssim_mean, teaching_image,
    upsample_bicubic, ConfidenceConfig, LossConfig, SrProvider,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Where HR pseudo-labels come from; `Off` disables the teaching loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SrMode {
    Off,
    Bicubic,
    Dir(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Position rate, in units of scene diagonal; decays exponentially to 1%.
    pub mu: f64,
    pub log_scale: f64,
    pub rot: f64,
    pub hash: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mu: 1.6e-4,
            log_scale: 5e-3,
            rot: 1e-3,
            hash: 1e-2,
            mlp: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iters: u64,
    pub lr: LearningRates,
    pub adam: AdamParams,
    pub adaptive: AdaptiveConfig,
    pub loss: LossConfig,
    pub confidence: ConfidenceConfig,
    pub field: FieldConfig,
    pub bbox: Aabb,
    pub n_init_kernels: usize,
    pub seed: u64,
    pub sr_mode: SrMode,
    /// Adaptive control runs at every `adaptive.window` boundary inside
    /// [densify_start, densify_stop]; start >= stop disables it.
    pub densify_start: u64,
    pub densify_stop: u64,
    pub checkpoint_every: u64,
    /// Views with view_id % holdout_every == holdout_offset are excluded
    /// from training and reserved for evaluation; 0 disables the split.
    pub holdout_every: u32,
    pub holdout_offset: u32,
}

impl TrainConfig {
    /// Defaults sized to `iters`, with the adaptive stop at 80% of the run.
    pub fn for_iters(iters: u64) -> Self {
        TrainConfig {
            iters,
            lr: LearningRates::default(),
            adam: AdamParams::default(),
            adaptive: AdaptiveConfig::default(),
            loss: LossConfig::default(),
            confidence: ConfidenceConfig::default(),
            field: FieldConfig::default(),
            bbox: Aabb::default_scene(),
            n_init_kernels: 2000,
            seed: 0,
            sr_mode: SrMode::Bicubic,
            densify_start: 300,
            densify_stop: iters * 4 / 5,
            checkpoint_every: 1000,
            holdout_every: 6,
            holdout_offset: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adaptive.validate()?;
        self.loss.validate()?;
        self.confidence.validate()?;
        self.field.validate()?;
        if self.densify_stop > self.iters {
            return Err(Error::InvalidConfig(format!(
                "densify_stop {} exceeds iters {}",
                self.densify_stop, self.iters
            )));
        }
        if self.n_init_kernels == 0 {
            return Err(Error::InvalidConfig("n_init_kernels must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    fn adaptive_enabled_at(&self, boundary: u64) -> bool {
        self.densify_start < self.densify_stop
            && boundary >= self.densify_start
            && boundary <= self.densify_stop
            && boundary % self.adaptive.window == 0
    }
}

/// A projection dataset on disk: manifest, camera geometry, and PFM images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub views: Vec<CameraView>,
    pub times: Vec<f64>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(&dir.join("manifest.json"))?;
        let views = load_geometry(&dir.join("geometry.json"))?;
        if views.len() != manifest.n_views {
            return Err(Error::Format(format!(
                "manifest names {} views, geometry has {}",
                manifest.n_views,
                views.len()
            )));
        }
        let times = frame_times(manifest.n_frames);
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            views,
            times,
        })
    }

    pub fn lr_image(&self, view_id: u32, frame: usize) -> Result<ProjectionImage> {
        read_pfm(
            &projection_path(&self.dir, "lr", view_id, frame),
            ImageRole::LrObs,
        )
    }

    pub fn hr_image(&self, view_id: u32, frame: usize) -> Result<ProjectionImage> {
        read_pfm(
            &projection_path(&self.dir, "hr", view_id, frame),
            ImageRole::RenderHr,
        )
    }

    /// Indices of views held out under the given modulo rule.
    pub fn split_views(&self, every: u32, offset: u32) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        for (i, v) in self.views.iter().enumerate() {
            if every > 0 && v.view_id % every == offset % every {
                heldout.push(i);
            } else {
                train.push(i);
            }
        }
        (train, heldout)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub iters: u64,
    pub final_loss: Option<f64>,
    pub n_kernels: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub wall_seconds: f64,
}

/// Deterministic initial scene and field for a config.
pub fn initial_state(cfg: &TrainConfig) -> Result<(Scene, AttenuationField)> {
    let scene = init_scene(
        &InitConfig {
            bbox: cfg.bbox,
            n_init: cfg.n_init_kernels,
            seed_points: None,
        },
        cfg.seed,
    )?;
    let field = AttenuationField::init(cfg.bbox, &cfg.field, cfg.seed.wrapping_add(1));
    Ok((scene, field))
}

struct FieldOptim {
    enc3d: Vec<AdamState>,
    enc4d: Vec<AdamState>,
    mlp_w: Vec<AdamState>,
    mlp_b: Vec<AdamState>,
}

impl FieldOptim {
    fn new(field: &AttenuationField) -> Self {
        FieldOptim {
            enc3d: field.enc3d.tables.iter().map(|t| AdamState::new(t.len())).collect(),
            enc4d: field.enc4d.tables.iter().map(|t| AdamState::new(t.len())).collect(),
            mlp_w: field.mlp.weights.iter().map(|w| AdamState::new(w.len())).collect(),
            mlp_b: field.mlp.biases.iter().map(|b| AdamState::new(b.len())).collect(),
        }
    }

    fn step(
        &mut self,
        field: &mut AttenuationField,
        acc: &FieldGradAccum,
        lr: &LearningRates,
        hp: &AdamParams,
    ) -> Result<()> {
        for (l, state) in self.enc3d.iter_mut().enumerate() {
            state.step(&mut field.enc3d.tables[l], &acc.table3d[l], lr.hash, hp)?;
        }
        for (l, state) in self.enc4d.iter_mut().enumerate() {
            state.step(&mut field.enc4d.tables[l], &acc.table4d[l], lr.hash, hp)?;
        }
        for (l, state) in self.mlp_w.iter_mut().enumerate() {
            state.step(&mut field.mlp.weights[l], &acc.mlp_w[l], lr.mlp, hp)?;
        }
        for (l, state) in self.mlp_b.iter_mut().enumerate() {
            state.step(&mut field.mlp.biases[l], &acc.mlp_b[l], lr.mlp, hp)?;
        }
        Ok(())
    }
}

struct KernelOptim {
    mu: AdamState,
    log_scale: AdamState,
    rot: AdamState,
}

impl KernelOptim {
    fn new(n: usize) -> Self {
        KernelOptim {
            mu: AdamState::new(3 * n),
            log_scale: AdamState::new(3 * n),
            rot: AdamState::new(4 * n),
        }
    }

    /// Moments restart whenever the kernel set is edited; index identity is
    /// not tracked through prune/split/insert.
    fn reset(&mut self, n: usize) {
        self.mu.reset(3 * n);
        self.log_scale.reset(3 * n);
        self.rot.reset(4 * n);
    }

    fn step(
        &mut self,
        scene: &mut Scene,
        grads: &crate::rasterizer::RenderGrads,
        lr_mu: f64,
        lr: &LearningRates,
        hp: &AdamParams,
    ) -> Result<()> {
        let n = scene.len();
        let mut p_mu = Vec::with_capacity(3 * n);
        let mut p_ls = Vec::with_capacity(3 * n);
        let mut p_rot = Vec::with_capacity(4 * n);
        let mut g_mu = Vec::with_capacity(3 * n);
        let mut g_ls = Vec::with_capacity(3 * n);
        let mut g_rot = Vec::with_capacity(4 * n);
        for (i, k) in scene.kernels.iter().enumerate() {
            p_mu.extend_from_slice(&k.mu);
            p_ls.extend_from_slice(&k.log_scale);
            p_rot.extend_from_slice(&k.rot);
            g_mu.extend_from_slice(&[grads.d_mu[i][0], grads.d_mu[i][1], grads.d_mu[i][2]]);
            g_ls.extend_from_slice(&grads.d_log_scale[i]);
            g_rot.extend_from_slice(&grads.d_rot[i]);
        }
        self.mu.step(&mut p_mu, &g_mu, lr_mu, hp)?;
        self.log_scale.step(&mut p_ls, &g_ls, lr.log_scale, hp)?;
        self.rot.step(&mut p_rot, &g_rot, lr.rot, hp)?;
        for (i, k) in scene.kernels.iter_mut().enumerate() {
            k.mu.copy_from_slice(&p_mu[3 * i..3 * i + 3]);
            k.log_scale.copy_from_slice(&p_ls[3 * i..3 * i + 3]);
            k.rot.copy_from_slice(&p_rot[4 * i..4 * i + 4]);
        }
        Ok(())
    }
}

/// Per-pair teaching data, rebuilt when confidence weights change.
struct Teaching {
    images: Vec<Vec<ProjectionImage>>, // [train view][frame]
}

fn build_teaching(
    dataset: &Dataset,
    train_views: &[usize],
    lr_obs: &[Vec<ProjectionImage>],
    provider: &SrProvider,
    conf: &ConfidenceConfig,
) -> Result<Teaching> {
    let mut images = Vec::with_capacity(train_views.len());
    for (vi, &view_idx) in train_views.iter().enumerate() {
        let view_id = dataset.views[view_idx].view_id;
        let mut per_frame = Vec::with_capacity(dataset.manifest.n_frames);
        for frame in 0..dataset.manifest.n_frames {
            let lr = &lr_obs[vi][frame];
            let lr_up = upsample_bicubic(lr, 4, ImageRole::LrUp);
            let sr = sr_apply(provider, lr, view_id, frame)?;
            let c = confidence_map(&sr, &lr_up, conf)?;
            per_frame.push(teaching_image(&sr, &lr_up, &c)?);
        }
        images.push(per_frame);
    }
    Ok(Teaching { images })
}

fn checkpoint_file(out_dir: &Path, iter: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_{iter:06}.bin"))
}

/// Runs the full optimization and writes checkpoints plus a JSON-lines log
/// (one object per iteration) into `out_dir`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (train_views, heldout_views) = dataset.split_views(cfg.holdout_every, cfg.holdout_offset);
    if train_views.is_empty() {
        return Err(Error::InvalidConfig("holdout rule leaves no training views".into()));
    }
    let heldout_ids: Vec<u32> = heldout_views
        .iter()
        .map(|i| dataset.views[*i].view_id)
        .collect();
    let (hw, hh) = dataset.manifest.hr_dims;

    // Observations for every training pair stay resident; they are small.
    let mut lr_obs: Vec<Vec<ProjectionImage>> = Vec::with_capacity(train_views.len());
    for &view_idx in &train_views {
        let view_id = dataset.views[view_idx].view_id;
        let mut per_frame = Vec::with_capacity(dataset.manifest.n_frames);
        for frame in 0..dataset.manifest.n_frames {
            per_frame.push(dataset.lr_image(view_id, frame)?);
        }
        lr_obs.push(per_frame);
    }

    let provider = match &cfg.sr_mode {
        SrMode::Off => None,
        SrMode::Bicubic => Some(SrProvider::BicubicSharpen),
        SrMode::Dir(d) => Some(SrProvider::FileIngest { dir: d.clone() }),
    };
    let mf_weight = if provider.is_some() { cfg.loss.mf_weight } else { 0.0 };
    let mut conf = cfg.confidence;
    let mut teaching = match &provider {
        Some(p) if mf_weight > 0.0 => {
            Some(build_teaching(dataset, &train_views, &lr_obs, p, &conf)?)
        }
        _ => None,
    };

    let (mut scene, mut field) = initial_state(cfg)?;
    let mut kernel_opt = KernelOptim::new(scene.len());
    let mut field_opt = FieldOptim::new(&field);
    let mut accum = FieldGradAccum::zeros_like(&field);
    let mut adapt_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(7));
    let raster = RasterConfig::default();

    let log_path = out_dir.join("train_log.jsonl");
    let log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);

    let n_pairs = train_views.len() * dataset.manifest.n_frames;
    let mut final_loss = None;
    let lr_mu_base = cfg.lr.mu * cfg.bbox.diagonal();

    for iter in 0..cfg.iters {
        let pair = (iter as usize) % n_pairs;
        let vi = pair % train_views.len();
        let frame = pair / train_views.len();
        let view = &dataset.views[train_views[vi]];
        let t = dataset.times[frame];

        let out = render(&scene, &field, view, hw, hh, t, ImageRole::RenderHr, &raster)?;
        let (l_gt, mut d_image) = loss_gt(&out.image, &lr_obs[vi][frame], &cfg.loss)?;
        let mut l_sr = 0.0;
        if let Some(teach) = teaching.as_ref().map(|t| &t.images[vi][frame]) {
            let (v, d_sr) = loss_sr(&out.image, teach, &cfg.loss)?;
            l_sr = v;
            for (a, b) in d_image.iter_mut().zip(&d_sr) {
                *a += mf_weight * b;
            }
        }
        let loss = l_gt + mf_weight * l_sr;
        if !loss.is_finite() {
            let line = serde_json::json!({ "iter": iter, "error": "non_finite_loss" });
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            log.flush().ok();
            return Err(Error::NonFiniteLoss { iter });
        }

        accum.clear();
        let grads = render_backward(&scene, &field, view, &out, &d_image, &raster, &mut accum)?;
        accumulate_subpixel_grads(&mut scene, &grads.uv_grad_norm, &out.contributed)?;
        for (stat, pk) in scene.stats.iter_mut().zip(&out.kernels) {
            stat.atten_sum += pk.rho;
            stat.atten_count += 1;
        }

        let decay = 0.01f64.powf(iter as f64 / cfg.iters.max(1) as f64);
        let lr_mu = lr_mu_base * decay;
        kernel_opt.step(&mut scene, &grads, lr_mu, &cfg.lr, &cfg.adam)?;
        field_opt.step(&mut field, &accum, &cfg.lr, &cfg.adam)?;
        scene.sanitize();

        let boundary = iter + 1;
        let (mut pruned, mut split, mut inserted) = (0usize, 0usize, 0usize);
        if cfg.adaptive_enabled_at(boundary) {
            let (s, _skipped) = densify(&mut scene, &cfg.adaptive, boundary, cfg.iters, &mut adapt_rng);
            split = s;
            let reference = match teaching.as_ref() {
                Some(t) => t.images[vi][frame].clone(),
                None => upsample_bicubic(&lr_obs[vi][frame], 4, ImageRole::LrUp),
            };
            let mut residual = out.image.clone();
            for (r, g) in residual.pixels.iter_mut().zip(&reference.pixels) {
                *r = (*r - g).abs();
            }
            match residual_guided_insert(&mut scene, &residual, view, &cfg.adaptive, &mut adapt_rng) {
                Ok(n) => inserted = n,
                Err(Error::CapExceeded { .. }) => inserted = 0,
                Err(e) => return Err(e),
            }
            pruned = prune(&mut scene, &cfg.adaptive)?;
            scene.sanitize();
            kernel_opt.reset(scene.len());
        }

        let line = serde_json::json!({
            "iter": iter,
            "loss": loss,
            "loss_gt": l_gt,
            "loss_sr": l_sr,
            "n_kernels": scene.len(),
            "pruned": pruned,
            "split": split,
            "inserted": inserted,
            "lr_mu": lr_mu,
        });
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        final_loss = Some(loss);

        if boundary % cfg.checkpoint_every == 0 && boundary < cfg.iters {
            let mut meta = CheckpointMeta::new(&cfg.bbox, boundary, cfg.seed);
            meta.heldout_views = heldout_ids.clone();
            meta.final_loss = final_loss;
            write_checkpoint(&checkpoint_file(out_dir, boundary), &scene, &field, &meta)?;

            if conf.learnable && mf_weight > 0.0 {
                if let Some(p) = &provider {
                    refresh_confidence(
                        dataset, &train_views, &lr_obs, p, &mut conf, &cfg.loss, &out.image, vi,
                        frame,
                    )?;
                    teaching = Some(build_teaching(dataset, &train_views, &lr_obs, p, &conf)?);
                }
            }
        }
    }

    let mut meta = CheckpointMeta::new(&cfg.bbox, cfg.iters, cfg.seed);
    meta.heldout_views = heldout_ids;
    meta.final_loss = final_loss;
    let final_path = out_dir.join("checkpoint_final.bin");
    write_checkpoint(&final_path, &scene, &field, &meta)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    Ok(TrainReport {
        iters: cfg.iters,
        final_loss,
        n_kernels: scene.len(),
        checkpoint: final_path,
        log: log_path,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// One subgradient step on the confidence weights using the current render's
/// L1 teaching residual, holding everything else fixed.
#[allow(clippy::too_many_arguments)]
fn refresh_confidence(
    dataset: &Dataset,
    train_views: &[usize],
    lr_obs: &[Vec<ProjectionImage>],
    provider: &SrProvider,
    conf: &mut ConfidenceConfig,
    loss_cfg: &LossConfig,
    rendered: &ProjectionImage,
    vi: usize,
    frame: usize,
) -> Result<()> {
    let view_id = dataset.views[train_views[vi]].view_id;
    let lr = &lr_obs[vi][frame];
    let lr_up = upsample_bicubic(lr, 4, ImageRole::LrUp);
    let sr = sr_apply(provider, lr, view_id, frame)?;
    let (s_map, t_map) = confidence_components(&sr, &lr_up, conf)?;
    let n_inv = 1.0 / rendered.pixels.len() as f64;
    let (mut g_alpha, mut g_beta) = (0.0f64, 0.0f64);
    for p in 0..rendered.pixels.len() {
        let c = crate::dnaf::sigmoid(conf.alpha_c * s_map[p] + conf.beta_c * t_map[p]);
        let teach = c * sr.pixels[p] as f64 + (1.0 - c) * lr_up.pixels[p] as f64;
        let sign = (rendered.pixels[p] as f64 - teach).signum();
        // dL1/dteach = -sign / N; dteach/dC = sr - lr_up; dC/dalpha = C(1-C)s.
        let d_teach = -(1.0 - loss_cfg.lambda_ssim) * sign * n_inv;
        let d_c = d_teach * (sr.pixels[p] as f64 - lr_up.pixels[p] as f64) * c * (1.0 - c);
        g_alpha += d_c * s_map[p];
        g_beta += d_c * t_map[p];
    }
    conf.alpha_c = (conf.alpha_c - 0.5 * g_alpha).clamp(0.0, 20.0);
    conf.beta_c = (conf.beta_c - 0.5 * g_beta).clamp(0.0, 20.0);
    Ok(())
}

/// Peak-signal-to-noise ratio in dB with peak 1, capped at 99 dB for
/// near-zero MSE.
pub fn psnr(a: &ProjectionImage, b: &ProjectionImage) -> Result<f64> {
    a.same_dims(b)?;
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse < 1e-12 {
        return Ok(99.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Heldout,
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub view_id: u32,
    pub frame: usize,
    /// HR render vs HR ground truth.
    pub psnr: f64,
    pub ssim: f64,
    /// Downsampled render vs the LR observation.
    pub lr_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub n_images: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_lr_psnr: f64,
    pub n_kernels: usize,
    pub wall_seconds: f64,
    pub per_image: Vec<ImageEval>,
}

/// Renders every (view, frame) of the requested split at HR and scores it
/// against the stored ground truth.
pub fn evaluate(checkpoint: &Path, dataset: &Dataset, split: EvalSplit) -> Result<EvalReport> {
    let started = Instant::now();
    let (scene, field, meta) = read_checkpoint(checkpoint)?;
    let view_indices: Vec<usize> = dataset
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| {
            let held = meta.heldout_views.contains(&v.view_id);
            match split {
                EvalSplit::Train => !held,
                EvalSplit::Heldout => held,
                EvalSplit::All => true,
            }
        })
        .map(|(i, _)| i)
        .collect();
    let (hw, hh) = dataset.manifest.hr_dims;
    let raster = RasterConfig::default();
    let mut per_image = Vec::new();
    for &view_idx in &view_indices {
        let view = &dataset.views[view_idx];
        for frame in 0..dataset.manifest.n_frames {
            let t = dataset.times[frame];
            let out = render(&scene, &field, view, hw, hh, t, ImageRole::RenderHr, &raster)?;
            let gt = dataset.hr_image(view.view_id, frame)?;
            let lr = dataset.lr_image(view.view_id, frame)?;
            let down =
                crate::supervision::downsample_area(&out.image, 4, ImageRole::RenderLr)?;
            per_image.push(ImageEval {
                view_id: view.view_id,
                frame,
                psnr: psnr(&out.image, &gt)?,
                ssim: ssim_mean(&out.image, &gt)?,
                lr_psnr: psnr(&down, &lr)?,
            });
        }
    }
    let n = per_image.len().max(1) as f64;
    Ok(EvalReport {
        split,
        n_images: per_image.len(),
        mean_psnr: per_image.iter().map(|e| e.psnr).sum::<f64>() / n,
        mean_ssim: per_image.iter().map(|e| e.ssim).sum::<f64>() / n,
        mean_lr_psnr: per_image.iter().map(|e| e.lr_psnr).sum::<f64>() / n,
        n_kernels: scene.len(),
        wall_seconds: started.elapsed().as_secs_f64(),
        per_image,
    })
}

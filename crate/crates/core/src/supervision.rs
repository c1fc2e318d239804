//! Multi-fidelity supervision: bicubic/area resampling, SSIM with an exact
//! analytic backward pass, texture richness, confidence-weighted teaching
//! images, the dual L1+SSIM losses, and super-resolution providers.
//!
//! Image payloads are f32; every filter and loss runs internally in f64.

use crate::dnaf::sigmoid;
use crate::error::{Error, Result};
use crate::image::{read_pfm, ImageRole, ProjectionImage};
use std::path::PathBuf;

pub const DEFAULT_SSIM_WINDOW: usize = 11;
pub const DEFAULT_SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (K1 L)^2, K1 = 0.01, L = 1
const SSIM_C2: f64 = 9e-4; // (K2 L)^2, K2 = 0.03

/// Confidence-map shaping (Eq. style: C = sigmoid(a * ssim + b * texture)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceConfig {
    pub alpha_c: f64,
    pub beta_c: f64,
    pub learnable: bool,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub texture_window: usize,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        ConfidenceConfig {
            alpha_c: 5.0,
            beta_c: 1.0,
            learnable: false,
            ssim_window: DEFAULT_SSIM_WINDOW,
            ssim_sigma: DEFAULT_SSIM_SIGMA,
            texture_window: 7,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ssim_window", self.ssim_window), ("texture_window", self.texture_window)] {
            if w < 3 || w % 2 == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be odd and >= 3, got {w}")));
            }
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::InvalidConfig("ssim_sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// Loss mixing weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_ssim: f64,
    pub mf_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ssim: 0.2,
            mf_weight: 0.4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ssim) || !(0.0..=1.0).contains(&self.mf_weight) {
            return Err(Error::InvalidConfig(
                "lambda_ssim and mf_weight must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn check_dims(a: &ProjectionImage, b: &ProjectionImage) -> Result<()> {
    a.same_dims(b)
}

/// Reflects an index into [0, n), mirroring around the half-sample boundary
/// (-1 -> 0, n -> n-1).
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Catmull-Rom kernel weights for the taps at offsets -1, 1, 2 relative to
/// the floor sample; the center weight is implicit via the pivot form.
fn catmull_rom_side_weights(u: f64) -> (f64, f64, f64) {
    let k = |s: f64| -> f64 {
        let s = s.abs();
        if s <= 1.0 {
            (1.5 * s - 2.5) * s * s + 1.0
        } else if s < 2.0 {
            ((-0.5 * s + 2.5) * s - 4.0) * s + 2.0
        } else {
            0.0
        }
    };
    (k(1.0 + u), k(1.0 - u), k(2.0 - u))
}

/// 1D Catmull-Rom interpolation at fractional position `x1 + u`, pivoted on
/// the floor sample so a constant signal is reproduced exactly.
fn catmull_rom_1d(p_m1: f64, p0: f64, p1: f64, p2: f64, u: f64) -> f64 {
    let (wm1, w1, w2) = catmull_rom_side_weights(u);
    p0 + wm1 * (p_m1 - p0) + w1 * (p1 - p0) + w2 * (p2 - p0)
}

/// Catmull-Rom bicubic upsampling by an integer factor, edge-clamped.
/// Output sample X maps to input coordinate (X + 0.5)/factor - 0.5.
pub fn upsample_bicubic(img: &ProjectionImage, factor: usize, role: ImageRole) -> ProjectionImage {
    assert!(factor >= 1);
    let (w, h) = (img.width, img.height);
    let (ow, oh) = (w * factor, h * factor);

    // Horizontal pass into f64, then vertical.
    let mut tmp = vec![0.0f64; ow * h];
    let sample = |row: &[f32], i: i64| -> f64 { row[i.clamp(0, w as i64 - 1) as usize] as f64 };
    for y in 0..h {
        let row = &img.pixels[y * w..(y + 1) * w];
        for ox in 0..ow {
            let x = (ox as f64 + 0.5) / factor as f64 - 0.5;
            let x1 = x.floor();
            let u = x - x1;
            let i = x1 as i64;
            tmp[y * ow + ox] = catmull_rom_1d(
                sample(row, i - 1),
                sample(row, i),
                sample(row, i + 1),
                sample(row, i + 2),
                u,
            );
        }
    }
    let mut out = ProjectionImage::zeros(ow, oh, role);
    for oy in 0..oh {
        let ycoord = (oy as f64 + 0.5) / factor as f64 - 0.5;
        let y1 = ycoord.floor();
        let u = ycoord - y1;
        let j = y1 as i64;
        let row_at = |jj: i64| jj.clamp(0, h as i64 - 1) as usize;
        let (jm1, j0, j1r, j2) = (row_at(j - 1), row_at(j), row_at(j + 1), row_at(j + 2));
        for ox in 0..ow {
            let v = catmull_rom_1d(
                tmp[jm1 * ow + ox],
                tmp[j0 * ow + ox],
                tmp[j1r * ow + ox],
                tmp[j2 * ow + ox],
                u,
            );
            out.pixels[oy * ow + ox] = v as f32;
        }
    }
    out
}

/// Block-mean (area) downsampling by an integer factor; dims must divide.
pub fn downsample_area(
    img: &ProjectionImage,
    factor: usize,
    role: ImageRole,
) -> Result<ProjectionImage> {
    let lr = downsample_area_f64(img, factor)?;
    let (ow, oh) = (img.width / factor, img.height / factor);
    Ok(ProjectionImage::from_pixels(
        ow,
        oh,
        lr.iter().map(|v| *v as f32).collect(),
        role,
    ))
}

/// f64 block means, the exact values the loss pipeline differentiates.
fn downsample_area_f64(img: &ProjectionImage, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(Error::DimensionMismatch {
            expected: (img.width / factor.max(1) * factor.max(1), img.height),
            got: (img.width, img.height),
        });
    }
    let (ow, oh) = (img.width / factor, img.height / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0f64; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0f64;
            for dy in 0..factor {
                let base = (oy * factor + dy) * img.width + ox * factor;
                for dx in 0..factor {
                    s += img.pixels[base + dx] as f64;
                }
            }
            out[oy * ow + ox] = s * inv;
        }
    }
    Ok(out)
}

fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as i64;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable convolution with reflect boundary handling.
fn conv_sep_reflect(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xi = reflect(x as i64 + k as i64 - half, w);
                acc += src[y * w + xi] * t;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yi = reflect(y as i64 + k as i64 - half, h);
                acc += tmp[yi * w + x] * t;
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Exact adjoint of [`conv_sep_reflect`]: scatters with the same reflect
/// folding, vertical stage first (reverse of the forward order).
fn conv_sep_reflect_adjoint(upstream: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as i64;
    let mut d_tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = upstream[y * w + x];
            if g == 0.0 {
                continue;
            }
            for (k, t) in taps.iter().enumerate() {
                let yi = reflect(y as i64 + k as i64 - half, h);
                d_tmp[yi * w + x] += g * t;
            }
        }
    }
    let mut d_src = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = d_tmp[y * w + x];
            if g == 0.0 {
                continue;
            }
            for (k, t) in taps.iter().enumerate() {
                let xi = reflect(x as i64 + k as i64 - half, w);
                d_src[y * w + xi] += g * t;
            }
        }
    }
    d_src
}

struct SsimMaps {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    ex2: Vec<f64>,
    ey2: Vec<f64>,
    exy: Vec<f64>,
    map: Vec<f64>,
}

fn ssim_core(x: &[f64], y: &[f64], w: usize, h: usize, window: usize, sigma: f64) -> SsimMaps {
    let taps = gaussian_taps(window, sigma);
    let mu_x = conv_sep_reflect(x, w, h, &taps);
    let mu_y = conv_sep_reflect(y, w, h, &taps);
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let ex2 = conv_sep_reflect(&x2, w, h, &taps);
    let ey2 = conv_sep_reflect(&y2, w, h, &taps);
    let exy = conv_sep_reflect(&xy, w, h, &taps);
    let mut map = vec![0.0f64; w * h];
    for p in 0..w * h {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = mx * mx + my * my + SSIM_C1;
        let b1 = 2.0 * (exy[p] - mx * my) + SSIM_C2;
        let b2 = (ex2[p] - mx * mx) + (ey2[p] - my * my) + SSIM_C2;
        map[p] = (a1 * b1) / (a2 * b2);
    }
    SsimMaps {
        mu_x,
        mu_y,
        ex2,
        ey2,
        exy,
        map,
    }
}

/// d(mean SSIM)/dx via the analytic quotient derivatives and the exact
/// adjoint of the windowing convolution.
fn ssim_backward_core(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    window: usize,
    sigma: f64,
) -> Vec<f64> {
    let maps = ssim_core(x, y, w, h, window, sigma);
    let n_inv = 1.0 / (w * h) as f64;
    let mut d_mu_x = vec![0.0f64; w * h];
    let mut d_ex2 = vec![0.0f64; w * h];
    let mut d_exy = vec![0.0f64; w * h];
    for p in 0..w * h {
        let (mx, my) = (maps.mu_x[p], maps.mu_y[p]);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = mx * mx + my * my + SSIM_C1;
        let b1 = 2.0 * (maps.exy[p] - mx * my) + SSIM_C2;
        let b2 = (maps.ex2[p] - mx * mx) + (maps.ey2[p] - my * my) + SSIM_C2;
        let denom = a2 * b2;
        let s = maps.map[p];
        // S = (A1 B1)/(A2 B2); dA1/dmu_x = 2 mu_y, dB1/dmu_x = -2 mu_y,
        // dA2/dmu_x = 2 mu_x, dB2/dmu_x = -2 mu_x, dB2/dEx2 = 1, dB1/dExy = 2.
        d_mu_x[p] = n_inv
            * (2.0 * my * (b1 - a1) / denom - 2.0 * mx * s * (b2 - a2) / denom);
        d_ex2[p] = n_inv * (-s / b2);
        d_exy[p] = n_inv * (2.0 * a1 / denom);
    }
    let taps = gaussian_taps(window, sigma);
    let a_mu = conv_sep_reflect_adjoint(&d_mu_x, w, h, &taps);
    let a_x2 = conv_sep_reflect_adjoint(&d_ex2, w, h, &taps);
    let a_xy = conv_sep_reflect_adjoint(&d_exy, w, h, &taps);
    (0..w * h)
        .map(|q| a_mu[q] + 2.0 * x[q] * a_x2[q] + y[q] * a_xy[q])
        .collect()
}

fn to_f64(img: &ProjectionImage) -> Vec<f64> {
    img.pixels.iter().map(|v| *v as f64).collect()
}

/// Per-pixel SSIM map and its mean; windowed Gaussian statistics with
/// reflect padding, dynamic range 1.
pub fn ssim_map(
    a: &ProjectionImage,
    b: &ProjectionImage,
    window: usize,
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    check_dims(a, b)?;
    let maps = ssim_core(&to_f64(a), &to_f64(b), a.width, a.height, window, sigma);
    let mean = maps.map.iter().sum::<f64>() / maps.map.len() as f64;
    Ok((mean, maps.map))
}

pub fn ssim_mean(a: &ProjectionImage, b: &ProjectionImage) -> Result<f64> {
    Ok(ssim_map(a, b, DEFAULT_SSIM_WINDOW, DEFAULT_SSIM_SIGMA)?.0)
}

/// Sobel magnitude, box-averaged, normalized by its own 99th percentile and
/// clamped to [0,1]. A flat image maps to all zeros.
pub fn texture_richness(img: &ProjectionImage, cfg: &ConfidenceConfig) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let x = to_f64(img);
    let mut mag = vec![0.0f64; w * h];
    for py in 0..h {
        for px in 0..w {
            let s = |dx: i64, dy: i64| -> f64 {
                x[reflect(py as i64 + dy, h) * w + reflect(px as i64 + dx, w)]
            };
            let gx = (s(1, -1) - s(-1, -1)) + 2.0 * (s(1, 0) - s(-1, 0)) + (s(1, 1) - s(-1, 1));
            let gy = (s(-1, 1) - s(-1, -1)) + 2.0 * (s(0, 1) - s(0, -1)) + (s(1, 1) - s(1, -1));
            mag[py * w + px] = (gx * gx + gy * gy).sqrt();
        }
    }
    // Box average over the texture window.
    let win = cfg.texture_window;
    let box_taps = vec![1.0 / win as f64; win];
    let avg = conv_sep_reflect(&mag, w, h, &box_taps);

    let mut sorted = avg.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() - 1) as f64 * 0.99).round() as usize;
    let p99 = sorted[idx];
    if p99 < 1e-12 {
        return vec![0.0; w * h];
    }
    avg.iter().map(|v| (v / p99).clamp(0.0, 1.0)).collect()
}

/// C = sigmoid(alpha_c * SSIM(I_sr, I_lr_up) + beta_c * texture(I_sr)),
/// strictly inside (0, 1).
pub fn confidence_map(
    i_sr: &ProjectionImage,
    i_lr_up: &ProjectionImage,
    cfg: &ConfidenceConfig,
) -> Result<Vec<f64>> {
    let (ssim, texture) = confidence_components(i_sr, i_lr_up, cfg)?;
    Ok(ssim
        .iter()
        .zip(&texture)
        .map(|(s, t)| sigmoid(cfg.alpha_c * s + cfg.beta_c * t))
        .collect())
}

/// The two maps entering the confidence sigmoid; exposed so learnable-weight
/// refreshes can differentiate w.r.t. alpha_c and beta_c.
pub fn confidence_components(
    i_sr: &ProjectionImage,
    i_lr_up: &ProjectionImage,
    cfg: &ConfidenceConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(i_sr, i_lr_up)?;
    let (_, ssim) = ssim_map(i_sr, i_lr_up, cfg.ssim_window, cfg.ssim_sigma)?;
    let texture = texture_richness(i_sr, cfg);
    Ok((ssim, texture))
}

/// I_teach = C * I_sr + (1 - C) * I_lr_up.
pub fn teaching_image(
    i_sr: &ProjectionImage,
    i_lr_up: &ProjectionImage,
    c: &[f64],
) -> Result<ProjectionImage> {
    check_dims(i_sr, i_lr_up)?;
    if c.len() != i_sr.pixels.len() {
        return Err(Error::DimensionMismatch {
            expected: (i_sr.width, i_sr.height),
            got: (c.len(), 1),
        });
    }
    let pixels = i_sr
        .pixels
        .iter()
        .zip(&i_lr_up.pixels)
        .zip(c)
        .map(|((sr, lr), c)| (c * *sr as f64 + (1.0 - c) * *lr as f64) as f32)
        .collect();
    Ok(ProjectionImage::from_pixels(
        i_sr.width,
        i_sr.height,
        pixels,
        ImageRole::Teach,
    ))
}

/// Shared L1 + SSIM objective between an f64 prediction buffer and an f32
/// target: returns the loss and d(loss)/d(prediction).
fn l1_ssim_loss(
    pred: &[f64],
    target: &ProjectionImage,
    w: usize,
    h: usize,
    lambda: f64,
) -> (f64, Vec<f64>) {
    let t = to_f64(target);
    let n_inv = 1.0 / (w * h) as f64;
    let mut l1 = 0.0f64;
    let mut grad: Vec<f64> = vec![0.0; w * h];
    for p in 0..w * h {
        let diff = pred[p] - t[p];
        l1 += diff.abs();
        // L1 subgradient: sign, 0 at exact ties.
        grad[p] = (1.0 - lambda) * n_inv * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
    }
    l1 *= n_inv;
    let maps = ssim_core(pred, &t, w, h, DEFAULT_SSIM_WINDOW, DEFAULT_SSIM_SIGMA);
    let ssim = maps.map.iter().sum::<f64>() / maps.map.len() as f64;
    let d_ssim = ssim_backward_core(pred, &t, w, h, DEFAULT_SSIM_WINDOW, DEFAULT_SSIM_SIGMA);
    for (g, ds) in grad.iter_mut().zip(&d_ssim) {
        *g -= lambda * ds;
    }
    ((1.0 - lambda) * l1 + lambda * (1.0 - ssim), grad)
}

/// LR-consistency loss: the HR render is area-downsampled 4x and compared to
/// the raw LR observation. Returns the loss and its exact gradient w.r.t.
/// every HR render pixel (chained through the box filter).
pub fn loss_gt(
    i_rend_hr: &ProjectionImage,
    i_lr: &ProjectionImage,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let factor = 4usize;
    if i_rend_hr.width != i_lr.width * factor || i_rend_hr.height != i_lr.height * factor {
        return Err(Error::DimensionMismatch {
            expected: (i_lr.width * factor, i_lr.height * factor),
            got: (i_rend_hr.width, i_rend_hr.height),
        });
    }
    let down = downsample_area_f64(i_rend_hr, factor)?;
    let (lw, lh) = (i_lr.width, i_lr.height);
    let (loss, d_down) = l1_ssim_loss(&down, i_lr, lw, lh, cfg.lambda_ssim);

    // Box-filter adjoint: each HR pixel receives its block's gradient / 16.
    let inv = 1.0 / (factor * factor) as f64;
    let hw = i_rend_hr.width;
    let mut d_hr = vec![0.0f64; hw * i_rend_hr.height];
    for oy in 0..lh {
        for ox in 0..lw {
            let g = d_down[oy * lw + ox] * inv;
            for dy in 0..factor {
                let base = (oy * factor + dy) * hw + ox * factor;
                for dx in 0..factor {
                    d_hr[base + dx] += g;
                }
            }
        }
    }
    Ok((loss, d_hr))
}

/// HR teaching loss: the render compared directly to the teaching image.
pub fn loss_sr(
    i_rend_hr: &ProjectionImage,
    i_teach: &ProjectionImage,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_dims(i_rend_hr, i_teach)?;
    let pred = to_f64(i_rend_hr);
    Ok(l1_ssim_loss(
        &pred,
        i_teach,
        i_rend_hr.width,
        i_rend_hr.height,
        cfg.lambda_ssim,
    ))
}

/// L = L_gt + mf_weight * L_sr.
pub fn total_loss(l_gt: f64, l_sr: f64, cfg: &LossConfig) -> f64 {
    l_gt + cfg.mf_weight * l_sr
}

/// Source of HR pseudo-labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SrProvider {
    /// Bicubic x4 followed by an unsharp mask (amount 0.5, Gaussian sigma 1).
    BicubicSharpen,
    /// Externally produced PFMs under `dir`, named `{view_id}_{frame:04}.pfm`.
    FileIngest { dir: PathBuf },
}

/// Produces the 4x pseudo-label for one LR observation.
pub fn sr_apply(
    provider: &SrProvider,
    i_lr: &ProjectionImage,
    view_id: u32,
    frame: usize,
) -> Result<ProjectionImage> {
    match provider {
        SrProvider::BicubicSharpen => {
            let up = upsample_bicubic(i_lr, 4, ImageRole::Sr);
            let (w, h) = (up.width, up.height);
            let base = to_f64(&up);
            let taps = gaussian_taps(7, 1.0);
            let blur = conv_sep_reflect(&base, w, h, &taps);
            let pixels = base
                .iter()
                .zip(&blur)
                .map(|(u, b)| (u + 0.5 * (u - b)) as f32)
                .collect();
            Ok(ProjectionImage::from_pixels(w, h, pixels, ImageRole::Sr))
        }
        SrProvider::FileIngest { dir } => {
            let path = dir.join(format!("{view_id}_{frame:04}.pfm"));
            if !path.exists() {
                return Err(Error::MissingPseudoLabel { path });
            }
            let img = read_pfm(&path, ImageRole::Sr)?;
            if img.width != i_lr.width * 4 || img.height != i_lr.height * 4 {
                return Err(Error::DimensionMismatch {
                    expected: (i_lr.width * 4, i_lr.height * 4),
                    got: (img.width, img.height),
                });
            }
            Ok(img)
        }
    }
}

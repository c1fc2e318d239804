//! Additive X-ray splatting of 3D Gaussian kernels onto a cone-beam detector,
//! with an exact backward pass through projection, covariance, and the
//! attenuation field.
//!
//! X-ray transmission sums attenuation along rays, so splats accumulate
//! additively with no opacity or depth ordering. Pixels are accumulated in
//! f32 in kernel-index order; all per-splat math runs in f64.

use crate::dnaf::{AttenuationField, FieldGradAccum};
use crate::error::{Error, Result};
use crate::geometry::{project_covariance, project_point, projection_jacobian, CameraView};
use crate::image::{ImageRole, ProjectionImage};
use crate::scene::{covariance_from_params, rotation_from_quaternion, Scene};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

/// Splat truncation; `None` evaluates every kernel at every pixel.
#[derive(Debug, Clone, Copy)]
pub struct RasterConfig {
    pub cutoff_sigma: Option<f64>,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            cutoff_sigma: Some(3.0),
        }
    }
}

/// One kernel's screen-space footprint for a given view and resolution.
#[derive(Debug, Clone)]
pub struct ProjectedKernel {
    pub rho: f64,
    pub uv: Vector2<f64>,
    pub depth: f64,
    pub cov: Matrix2<f64>,
    pub cov_inv: Matrix2<f64>,
    pub visible: bool,
    /// Inclusive pixel rect (x0, y0, x1, y1) the splat may touch.
    pub rect: Option<(usize, usize, usize, usize)>,
}

impl ProjectedKernel {
    fn culled(rho: f64) -> Self {
        ProjectedKernel {
            rho,
            uv: Vector2::zeros(),
            depth: 0.0,
            cov: Matrix2::identity(),
            cov_inv: Matrix2::identity(),
            visible: false,
            rect: None,
        }
    }
}

/// A rendered projection plus everything the backward pass and the kernel
/// statistics need: per-kernel attenuation (evaluated for every kernel,
/// visible or not) and footprints.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: ProjectionImage,
    pub kernels: Vec<ProjectedKernel>,
    /// True iff the splat actually touched at least one pixel.
    pub contributed: Vec<bool>,
    pub t: f64,
}

/// Parameter gradients of one rendered projection under a per-pixel upstream
/// gradient. `d_mu` includes both the projection path and the attenuation
/// field path; field parameter gradients go to the shared accumulator.
#[derive(Debug, Clone)]
pub struct RenderGrads {
    pub d_mu: Vec<Vector3<f64>>,
    pub d_log_scale: Vec<[f64; 3]>,
    pub d_rot: Vec<[f64; 4]>,
    pub d_rho: Vec<f64>,
    /// Norm of the 2D screen-space positional gradient (densification signal).
    pub uv_grad_norm: Vec<f64>,
}

/// Clone of `view` with intrinsics rescaled to the target resolution.
fn view_at(view: &CameraView, width: usize, height: usize) -> CameraView {
    let mut v = view.clone();
    v.k = view.intrinsics_for(width, height);
    v.width_hr = width;
    v.height_hr = height;
    v
}

fn lambda_max(cov: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let half_diff = 0.5 * (cov[(0, 0)] - cov[(1, 1)]);
    mid + (half_diff * half_diff + cov[(0, 1)] * cov[(1, 0)]).sqrt()
}

fn invert_cov2d(cov: &Matrix2<f64>) -> Matrix2<f64> {
    // det > 0 is guaranteed by the projection variance floor.
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det
}

/// Inclusive pixel rect whose centers may fall within `radius` of `uv`.
fn pixel_rect(
    uv: Vector2<f64>,
    radius: f64,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    if !radius.is_finite() {
        return Some((0, 0, width - 1, height - 1));
    }
    let x0 = (uv.x - radius - 0.5).ceil();
    let x1 = (uv.x + radius - 0.5).floor();
    let y0 = (uv.y - radius - 0.5).ceil();
    let y1 = (uv.y + radius - 0.5).floor();
    if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 || x1 < x0 || y1 < y0
    {
        return None;
    }
    Some((
        x0.max(0.0) as usize,
        y0.max(0.0) as usize,
        x1.min((width - 1) as f64) as usize,
        y1.min((height - 1) as f64) as usize,
    ))
}

/// Renders the scene at time `t` onto a `width` x `height` detector.
/// Attenuation is evaluated for every kernel (the pruning statistic needs
/// all of them); kernels behind the camera are culled from splatting only.
pub fn render(
    scene: &Scene,
    field: &AttenuationField,
    view: &CameraView,
    width: usize,
    height: usize,
    t: f64,
    role: ImageRole,
    cfg: &RasterConfig,
) -> Result<RenderOutput> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig("render target has zero size".into()));
    }
    let rview = view_at(view, width, height);
    let cut2 = cfg.cutoff_sigma.map(|c| c * c);

    let mut kernels = Vec::with_capacity(scene.len());
    for k in &scene.kernels {
        let mu = k.mu_v();
        let rho = field.attenuation(mu, t)?;
        match project_point(mu, &rview) {
            Ok((uv, depth)) => {
                let sigma = covariance_from_params(k.log_scale, k.rot);
                let cov = project_covariance(&sigma, mu, &rview)?;
                let cov_inv = invert_cov2d(&cov);
                let radius = match cfg.cutoff_sigma {
                    Some(c) => c * lambda_max(&cov).sqrt(),
                    None => f64::INFINITY,
                };
                let rect = pixel_rect(uv, radius, width, height);
                kernels.push(ProjectedKernel {
                    rho,
                    uv,
                    depth,
                    cov,
                    cov_inv,
                    visible: true,
                    rect,
                });
            }
            Err(Error::BehindCamera { .. }) => kernels.push(ProjectedKernel::culled(rho)),
            Err(e) => return Err(e),
        }
    }

    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (i, pk) in kernels.iter().enumerate() {
        if let Some((_, y0, _, y1)) = pk.rect {
            for row in rows.iter_mut().take(y1 + 1).skip(y0) {
                row.push(i as u32);
            }
        }
    }

    let mut image = ProjectionImage::zeros(width, height, role);
    // Rows are independent, so the row-parallel result is identical for any
    // thread count; within a row, pixels accumulate in kernel-index order.
    let touched_per_row: Vec<Vec<u32>> = image
        .pixels
        .par_chunks_mut(width)
        .enumerate()
        .map(|(iy, row)| {
            let py = iy as f64 + 0.5;
            let mut touched = Vec::new();
            for &ki in &rows[iy] {
                let pk = &kernels[ki as usize];
                let (x0, _, x1, _) = pk.rect.unwrap();
                let m = &pk.cov_inv;
                let dy = py - pk.uv.y;
                let mut any = false;
                for (ix, px) in row.iter_mut().enumerate().take(x1 + 1).skip(x0) {
                    let dx = ix as f64 + 0.5 - pk.uv.x;
                    let e = m[(0, 0)] * dx * dx + 2.0 * m[(0, 1)] * dx * dy + m[(1, 1)] * dy * dy;
                    if let Some(c2) = cut2 {
                        if e > c2 {
                            continue;
                        }
                    }
                    *px += (pk.rho * (-0.5 * e).exp()) as f32;
                    any = true;
                }
                if any {
                    touched.push(ki);
                }
            }
            touched
        })
        .collect();

    let mut contributed = vec![false; scene.len()];
    for row in touched_per_row {
        for ki in row {
            contributed[ki as usize] = true;
        }
    }

    Ok(RenderOutput {
        image,
        kernels,
        contributed,
        t,
    })
}

/// d(R(q_hat))/d(q_hat) for a unit quaternion (w, x, y, z).
fn quat_rotation_grads(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x),
        Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y),
        Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0),
    ]
}

/// Backpropagates a per-pixel upstream gradient (row-major, f64, same size
/// as the rendered image) to kernel parameters and, through the per-kernel
/// attenuations, into the field accumulator.
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    scene: &Scene,
    field: &AttenuationField,
    view: &CameraView,
    out: &RenderOutput,
    d_image: &[f64],
    cfg: &RasterConfig,
    acc: &mut FieldGradAccum,
) -> Result<RenderGrads> {
    let (width, height) = (out.image.width, out.image.height);
    if d_image.len() != width * height {
        return Err(Error::DimensionMismatch {
            expected: (width, height),
            got: (d_image.len(), 1),
        });
    }
    if out.kernels.len() != scene.len() {
        return Err(Error::DimensionMismatch {
            expected: (scene.len(), 1),
            got: (out.kernels.len(), 1),
        });
    }
    let rview = view_at(view, width, height);
    let cut2 = cfg.cutoff_sigma.map(|c| c * c);

    // Per-kernel pixel sums: s0 = sum d_p w, a = sum d_p w d, b = sum d_p w d d^T,
    // with d the pixel offset from the splat center and w the Gaussian weight.
    let sums: Vec<(f64, Vector2<f64>, Matrix2<f64>)> = out
        .kernels
        .par_iter()
        .map(|pk| {
            let mut s0 = 0.0;
            let mut a = Vector2::zeros();
            let mut b = Matrix2::zeros();
            if let (true, Some((x0, y0, x1, y1))) = (pk.visible, pk.rect) {
                let m = &pk.cov_inv;
                for iy in y0..=y1 {
                    let dy = iy as f64 + 0.5 - pk.uv.y;
                    for ix in x0..=x1 {
                        let dx = ix as f64 + 0.5 - pk.uv.x;
                        let e =
                            m[(0, 0)] * dx * dx + 2.0 * m[(0, 1)] * dx * dy + m[(1, 1)] * dy * dy;
                        if let Some(c2) = cut2 {
                            if e > c2 {
                                continue;
                            }
                        }
                        let g = d_image[iy * width + ix] * (-0.5 * e).exp();
                        s0 += g;
                        a.x += g * dx;
                        a.y += g * dy;
                        b[(0, 0)] += g * dx * dx;
                        b[(0, 1)] += g * dx * dy;
                        b[(1, 1)] += g * dy * dy;
                    }
                }
                b[(1, 0)] = b[(0, 1)];
            }
            (s0, a, b)
        })
        .collect();

    let n = scene.len();
    let mut grads = RenderGrads {
        d_mu: vec![Vector3::zeros(); n],
        d_log_scale: vec![[0.0; 3]; n],
        d_rot: vec![[0.0; 4]; n],
        d_rho: vec![0.0; n],
        uv_grad_norm: vec![0.0; n],
    };

    let w_rot = rview.r;
    for (i, k) in scene.kernels.iter().enumerate() {
        let pk = &out.kernels[i];
        let (s0, a, b) = sums[i];
        grads.d_rho[i] = s0;

        // Field path: rho was evaluated for every kernel, so even culled
        // kernels route their (possibly zero) gradient through it.
        let mut d_mu = Vector3::zeros();
        if s0 != 0.0 {
            let d = field.attenuation_backward_accumulate(k.mu_v(), out.t, s0, acc)?;
            d_mu = Vector3::new(d[0], d[1], d[2]);
        }
        if !pk.visible || pk.rect.is_none() {
            grads.d_mu[i] = d_mu;
            continue;
        }

        let m = pk.cov_inv;
        // w = exp(-0.5 d^T M d), d = p - uv: dw/duv = w M d.
        let d_uv = m * a * pk.rho;
        grads.uv_grad_norm[i] = d_uv.norm();
        // dL/dM, then dL/dSigma2d through M = Sigma2d^-1.
        let g_m = b * (-0.5 * pk.rho);
        let g2 = -m * g_m * m;

        let x_cam = w_rot * k.mu_v() + rview.t_vec;
        let j = projection_jacobian(&rview.k, x_cam);
        let a_mat = j * w_rot;
        let sigma = covariance_from_params(k.log_scale, k.rot);

        // Sigma2d = A Sigma A^T + floor: both factors of A see the symmetric g2.
        let g_a = 2.0 * g2 * a_mat * sigma;
        let g_sigma = a_mat.transpose() * g2 * a_mat;

        // J depends on x_cam; collect the sensitivity of every nonconstant
        // entry of J = [[fx/z, s/z, -(fx x + s y)/z^2], [0, fy/z, -fy y/z^2]].
        let g_j = g_a * w_rot.transpose();
        let (fx, sk, fy) = (rview.k[(0, 0)], rview.k[(0, 1)], rview.k[(1, 1)]);
        let (x, y, z) = (x_cam.x, x_cam.y, x_cam.z);
        let (z2, z3) = (z * z, z * z * z);
        let mut d_xcam = j.transpose() * d_uv;
        d_xcam.x += g_j[(0, 2)] * (-fx / z2);
        d_xcam.y += g_j[(0, 2)] * (-sk / z2) + g_j[(1, 2)] * (-fy / z2);
        d_xcam.z += g_j[(0, 0)] * (-fx / z2)
            + g_j[(0, 1)] * (-sk / z2)
            + g_j[(0, 2)] * (2.0 * (fx * x + sk * y) / z3)
            + g_j[(1, 1)] * (-fy / z2)
            + g_j[(1, 2)] * (2.0 * fy * y / z3);
        d_mu += w_rot.transpose() * d_xcam;
        grads.d_mu[i] = d_mu;

        // Sigma = R D R^T with D = diag(exp(2 ls)).
        let r_q = rotation_from_quaternion(k.rot);
        let d_diag = Vector3::new(
            (2.0 * k.log_scale[0] as f64).exp(),
            (2.0 * k.log_scale[1] as f64).exp(),
            (2.0 * k.log_scale[2] as f64).exp(),
        );
        let rt_gs_r = r_q.transpose() * g_sigma * r_q;
        for d in 0..3 {
            grads.d_log_scale[i][d] = 2.0 * d_diag[d] * rt_gs_r[(d, d)];
        }
        let g_r = 2.0 * g_sigma * r_q * Matrix3::from_diagonal(&d_diag);

        // Chain through quaternion normalization: stored rot may drift off
        // the unit sphere between sanitize passes.
        let norm = (k.rot.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>()).sqrt();
        if norm >= 1e-12 {
            let qh = [
                k.rot[0] as f64 / norm,
                k.rot[1] as f64 / norm,
                k.rot[2] as f64 / norm,
                k.rot[3] as f64 / norm,
            ];
            let dr_dq = quat_rotation_grads(qh);
            let mut g_qh = [0.0f64; 4];
            for c in 0..4 {
                g_qh[c] = g_r.component_mul(&dr_dq[c]).sum();
            }
            let dot = (0..4).map(|c| g_qh[c] * qh[c]).sum::<f64>();
            for c in 0..4 {
                grads.d_rot[i][c] = (g_qh[c] - dot * qh[c]) / norm;
            }
        }
    }
    Ok(grads)
}

/// Folds one backward pass's screen-space gradient norms into the per-kernel
/// running statistics used by densification. Kernels that contributed no
/// pixel this pass are left untouched.
pub fn accumulate_subpixel_grads(
    scene: &mut Scene,
    uv_grad_norms: &[f64],
    contributed: &[bool],
) -> Result<()> {
    if uv_grad_norms.len() != scene.kernels.len() || contributed.len() != scene.kernels.len() {
        return Err(Error::DimensionMismatch {
            expected: (scene.kernels.len(), scene.kernels.len()),
            got: (uv_grad_norms.len(), contributed.len()),
        });
    }
    for ((stat, norm), hit) in scene.stats.iter_mut().zip(uv_grad_norms).zip(contributed) {
        if *hit {
            stat.grad_norm_sum += *norm;
            stat.grad_count += 1;
        }
    }
    Ok(())
}

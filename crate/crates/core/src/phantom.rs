//! Synthetic dynamic vascular phantom with closed-form X-ray projections.
//!
//! The phantom is a Gaussian mixture, so every pixel of every projection has
//! an exact 1D-Gaussian line integral. That makes it both the ground-truth
//! generator and an oracle independent of the splatting approximation.

use crate::error::{Error, Result};
use crate::geometry::{project_covariance, project_point, save_geometry, CameraView, Trajectory};
use crate::image::{write_pfm, ImageRole, ProjectionImage};
use crate::scene::Aabb;
use crate::supervision::downsample_area;
use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Root vessel radius in mm; halves for each branching generation.
pub const ROOT_VESSEL_RADIUS: f64 = 2.0;

/// One Gaussian density blob of the vessel tree.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomBlob {
    pub mu: Vector3<f64>,
    pub sigma: Matrix3<f64>,
    pub branch_id: u32,
    /// Contrast bolus arrival at this blob, normalized time in [0, 1].
    pub arrival: f64,
}

/// Gamma-variate contrast bolus shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BolusParams {
    /// Peak concentration, arbitrary units.
    pub peak_scale: f64,
    /// Shape exponent.
    pub shape: f64,
    /// Decay time constant, normalized time.
    pub decay: f64,
}

impl Default for BolusParams {
    fn default() -> Self {
        BolusParams {
            peak_scale: 1.0,
            shape: 3.0,
            decay: 0.15,
        }
    }
}

impl BolusParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_scale > 0.0 && self.shape > 0.0 && self.decay > 0.0) {
            return Err(Error::InvalidConfig(
                "bolus peak_scale, shape, decay must all be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Concentration at time `t` for a bolus arriving at `arrival`: zero before
/// arrival, then a gamma variate peaking at exactly `peak_scale` when
/// t - arrival = shape * decay. The (x e^(1-x))^k form hits the peak value
/// without round-off when x lands on 1.
pub fn bolus_curve(t: f64, arrival: f64, params: &BolusParams) -> f64 {
    let dt = t - arrival;
    if dt <= 0.0 {
        return 0.0;
    }
    let x = dt / (params.shape * params.decay);
    params.peak_scale * (x * (1.0 - x).exp()).powf(params.shape)
}

/// Orthonormal frame whose first column is `dir`.
fn frame_along(dir: Vector3<f64>) -> Matrix3<f64> {
    let pick = if dir[0].abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let v = dir.cross(&pick).normalize();
    let w = dir.cross(&v);
    Matrix3::from_columns(&[dir, v, w])
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Distance along `dir` from `p` to the bbox boundary (slab method).
fn exit_distance(bbox: &Aabb, p: Vector3<f64>, dir: Vector3<f64>) -> f64 {
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            continue;
        }
        let t1 = (bbox.min[a] - p[a]) / dir[a];
        let t2 = (bbox.max[a] - p[a]) / dir[a];
        t_exit = t_exit.min(t1.max(t2));
    }
    t_exit.max(0.0)
}

/// Builds a binary branching vessel tree of `n_branches` segments inside
/// `bbox`, each discretized into `blobs_per_branch` Gaussian blobs elongated
/// along the segment. Bolus arrivals grow with path length from the root and
/// span [~0, 0.5]. Deterministic per seed.
pub fn generate_phantom(
    seed: u64,
    n_branches: usize,
    blobs_per_branch: usize,
    bbox: &Aabb,
) -> Result<Vec<PhantomBlob>> {
    if n_branches == 0 || blobs_per_branch == 0 {
        return Err(Error::InvalidConfig(
            "n_branches and blobs_per_branch must be >= 1".into(),
        ));
    }
    if bbox.is_degenerate() {
        return Err(Error::InvalidConfig("degenerate phantom bbox".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = bbox.max - bbox.min;
    let min_extent = extent.min();
    let root_len = 0.4 * min_extent;

    struct Segment {
        start: Vector3<f64>,
        end: Vector3<f64>,
        generation: u32,
        path_len_at_start: f64,
    }

    // BFS over (start, dir, generation, path length).
    let mut queue: Vec<(Vector3<f64>, Vector3<f64>, u32, f64)> = Vec::new();
    let start = bbox.center()
        + Vector3::from_fn(|i, _| rng.gen_range(-0.25..0.25) * extent[i]);
    queue.push((start, random_unit(&mut rng), 0, 0.0));

    let mut segments: Vec<Segment> = Vec::new();
    let mut head = 0usize;
    while segments.len() < n_branches {
        let (start, mut dir, generation, path_len) = if head < queue.len() {
            let item = queue[head];
            head += 1;
            item
        } else {
            break;
        };
        let nominal = root_len * 0.75f64.powi(generation as i32);
        let mut reach = exit_distance(bbox, start, dir);
        if reach < nominal * 0.2 {
            // Cornered: bend back toward the center.
            dir = (bbox.center() - start).normalize();
            reach = exit_distance(bbox, start, dir);
        }
        let len = nominal.min(0.9 * reach);
        let end = start + dir * len;
        segments.push(Segment {
            start,
            end,
            generation,
            path_len_at_start: path_len,
        });
        for side in [-1.0, 1.0] {
            let axis = dir.cross(&random_unit(&mut rng));
            let axis = if axis.norm() > 1e-6 {
                Unit::new_normalize(axis)
            } else {
                Unit::new_normalize(Vector3::z())
            };
            let angle = side * rng.gen_range(0.35..0.9);
            let child_dir = Rotation3::from_axis_angle(&axis, angle) * dir;
            queue.push((end, child_dir, generation + 1, path_len + len));
        }
    }

    // Second pass: normalize arrivals so the tree fills in 0.5 time units.
    let mut blobs = Vec::with_capacity(segments.len() * blobs_per_branch);
    let mut max_path = 0.0f64;
    for seg in &segments {
        max_path = max_path.max(seg.path_len_at_start + (seg.end - seg.start).norm());
    }
    for (branch_id, seg) in segments.iter().enumerate() {
        let axis = seg.end - seg.start;
        let len = axis.norm();
        let dir = axis / len;
        let sigma_l = len / blobs_per_branch as f64;
        let sigma_t = ROOT_VESSEL_RADIUS * 0.5f64.powi(seg.generation as i32);
        let r = frame_along(dir);
        let sigma = r
            * Matrix3::from_diagonal(&Vector3::new(
                sigma_l * sigma_l,
                sigma_t * sigma_t,
                sigma_t * sigma_t,
            ))
            * r.transpose();
        for j in 0..blobs_per_branch {
            let u = (j as f64 + 0.5) / blobs_per_branch as f64;
            blobs.push(PhantomBlob {
                mu: seg.start + axis * u,
                sigma,
                branch_id: branch_id as u32,
                arrival: 0.5 * (seg.path_len_at_start + u * len) / max_path,
            });
        }
    }
    Ok(blobs)
}

/// Exact projection: for each pixel ray the 1D Gaussian line integral of
/// every active blob, summed. s parameterizes arc length along the unit ray,
/// so values are attenuation times millimeters.
pub fn analytic_project(
    blobs: &[PhantomBlob],
    bolus: &BolusParams,
    view: &CameraView,
    t: f64,
    width: usize,
    height: usize,
) -> Result<ProjectionImage> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTime { t });
    }
    let mut kview = view.clone();
    kview.k = view.intrinsics_for(width, height);
    kview.width_hr = width;
    kview.height_hr = height;
    let origin = kview.center();

    struct Active {
        p: Matrix3<f64>, // Sigma^-1
        mu: Vector3<f64>,
        c: f64,
        rect: (usize, usize, usize, usize), // x0, y0, x1, y1 inclusive
    }
    let mut active: Vec<Active> = Vec::new();
    for b in blobs {
        let c = bolus_curve(t, b.arrival, bolus);
        if c == 0.0 {
            continue;
        }
        // Conservative footprint: 10 sigma of the projected covariance plus
        // margin. Tails beyond that are < exp(-50) of the peak.
        let Ok((uv, _)) = project_point(b.mu, &kview) else {
            continue;
        };
        let Ok(cov) = project_covariance(&b.sigma, b.mu, &kview) else {
            continue;
        };
        let tr = cov[(0, 0)] + cov[(1, 1)];
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        let lam = 0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt();
        let radius = 10.0 * lam.sqrt() + 2.0;
        let x0 = (uv[0] - radius).floor().max(0.0) as usize;
        let y0 = (uv[1] - radius).floor().max(0.0) as usize;
        let x1 = (uv[0] + radius).ceil().min(width as f64 - 1.0);
        let y1 = (uv[1] + radius).ceil().min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 || x0 >= width || y0 >= height {
            continue;
        }
        let p = b
            .sigma
            .try_inverse()
            .ok_or(Error::NonPsd {
                min_eigenvalue: 0.0,
            })?;
        active.push(Active {
            p,
            mu: b.mu,
            c,
            rect: (x0, y0, x1 as usize, y1 as usize),
        });
    }

    let mut img = ProjectionImage::zeros(width, height, ImageRole::RenderHr);
    img.pixels
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(py, row)| {
            let mut acc = vec![0.0f64; width];
            for a in &active {
                let (x0, y0, x1, y1) = a.rect;
                if py < y0 || py > y1 {
                    continue;
                }
                for (px, slot) in acc.iter_mut().enumerate().take(x1 + 1).skip(x0) {
                    let uv = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                    let d = (kview.backproject(uv, 1.0) - origin).normalize();
                    let v = origin - a.mu;
                    let qa = (d.transpose() * a.p * d)[(0, 0)];
                    let qb = 2.0 * (d.transpose() * a.p * v)[(0, 0)];
                    let qc = (v.transpose() * a.p * v)[(0, 0)];
                    // Integral of exp(-(qa s^2 + qb s + qc)/2) over the line.
                    let integral = (2.0 * std::f64::consts::PI / qa).sqrt()
                        * (-0.5 * (qc - qb * qb / (4.0 * qa))).exp();
                    *slot += a.c * integral;
                }
            }
            for (o, v) in row.iter_mut().zip(&acc) {
                *o = *v as f32;
            }
        });
    Ok(img)
}

/// Normalized frame timestamps: evenly spaced over [0, 1], or 0.5 for a
/// single frame.
pub fn frame_times(n_frames: usize) -> Vec<f64> {
    if n_frames <= 1 {
        return vec![0.5];
    }
    (0..n_frames)
        .map(|f| f as f64 / (n_frames - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub hr_dims: (usize, usize),
    pub lr_dims: (usize, usize),
    pub n_views: usize,
    pub n_frames: usize,
    /// Divisor applied to raw projections so the global HR max is 1.
    pub normalization_scale: f64,
    pub hr_pattern: String,
    pub lr_pattern: String,
}

/// Path of one stored projection; `kind` is "hr" or "lr".
pub fn projection_path(root: &Path, kind: &str, view_id: u32, frame: usize) -> PathBuf {
    root.join(kind).join(format!("{view_id}_{frame:04}.pfm"))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
}

/// Renders the full dataset to disk: analytic HR projections, 4x area-
/// downsampled LR observations, the camera geometry, and a manifest. Every
/// image shares one normalization so the global HR maximum is exactly 1.
pub fn make_dataset(
    blobs: &[PhantomBlob],
    bolus: &BolusParams,
    trajectory: &Trajectory,
    n_frames: usize,
    hr_dims: (usize, usize),
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let (hw, hh) = hr_dims;
    if hw % 4 != 0 || hh % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "hr dims must be divisible by 4, got {hw}x{hh}"
        )));
    }
    if n_frames == 0 {
        return Err(Error::InvalidConfig("n_frames must be >= 1".into()));
    }
    let times = frame_times(n_frames);
    let pairs: Vec<(usize, usize)> = (0..trajectory.views.len())
        .flat_map(|v| (0..n_frames).map(move |f| (v, f)))
        .collect();
    let mut hr_images: Vec<ProjectionImage> = pairs
        .par_iter()
        .map(|(v, f)| analytic_project(blobs, bolus, &trajectory.views[*v], times[*f], hw, hh))
        .collect::<Result<_>>()?;

    let mut global_max = 0.0f64;
    for img in &hr_images {
        for p in &img.pixels {
            global_max = global_max.max(*p as f64);
        }
    }
    let scale = if global_max > 0.0 { global_max } else { 1.0 };
    for img in &mut hr_images {
        for p in &mut img.pixels {
            *p = (*p as f64 / scale) as f32;
        }
    }

    for sub in ["hr", "lr"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for ((v, f), hr) in pairs.iter().zip(&hr_images) {
        let view_id = trajectory.views[*v].view_id;
        write_pfm(&projection_path(out_dir, "hr", view_id, *f), hr)?;
        let lr = downsample_area(hr, 4, ImageRole::LrObs)?;
        write_pfm(&projection_path(out_dir, "lr", view_id, *f), &lr)?;
    }
    save_geometry(&out_dir.join("geometry.json"), &trajectory.views)?;

    let manifest = DatasetManifest {
        hr_dims,
        lr_dims: (hw / 4, hh / 4),
        n_views: trajectory.views.len(),
        n_frames,
        normalization_scale: scale,
        hr_pattern: "hr/{view}_{frame:04}.pfm".into(),
        lr_pattern: "lr/{view}_{frame:04}.pfm".into(),
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

//! Cone-beam/pinhole projection geometry: projection matrices, point and
//! covariance projection to the detector, and circular acquisition trajectories.

use crate::error::{Error, Result};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Minimum camera-frame depth for a projectable point, mm.
pub const DEPTH_EPS: f64 = 1e-6;
/// Variance floor added to the diagonal of every projected covariance, px².
pub const COV2D_FLOOR: f64 = 0.1;

/// One cone-beam view: intrinsics in pixels, world-to-camera rigid transform,
/// native detector resolution, and the acquisition time in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ViewRecord", from = "ViewRecord")]
pub struct CameraView {
    pub view_id: u32,
    /// Upper-triangular intrinsics [[fx, s, cx], [0, fy, cy], [0, 0, 1]].
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t_vec: Vector3<f64>,
    pub width_hr: usize,
    pub height_hr: usize,
    pub timestamp: f64,
}

/// Flat on-disk form: K and R as 9 floats row-major.
#[derive(Serialize, Deserialize, Clone)]
struct ViewRecord {
    view_id: u32,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    width_hr: usize,
    height_hr: usize,
    timestamp: f64,
}

impl From<CameraView> for ViewRecord {
    fn from(v: CameraView) -> Self {
        let flat = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for row in 0..3 {
                for col in 0..3 {
                    out[row * 3 + col] = m[(row, col)];
                }
            }
            out
        };
        ViewRecord {
            view_id: v.view_id,
            k: flat(&v.k),
            r: flat(&v.r),
            t: [v.t_vec.x, v.t_vec.y, v.t_vec.z],
            width_hr: v.width_hr,
            height_hr: v.height_hr,
            timestamp: v.timestamp,
        }
    }
}

impl From<ViewRecord> for CameraView {
    fn from(rec: ViewRecord) -> Self {
        let mat = |a: &[f64; 9]| {
            Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8])
        };
        CameraView {
            view_id: rec.view_id,
            k: mat(&rec.k),
            r: mat(&rec.r),
            t_vec: Vector3::new(rec.t[0], rec.t[1], rec.t[2]),
            width_hr: rec.width_hr,
            height_hr: rec.height_hr,
            timestamp: rec.timestamp,
        }
    }
}

impl CameraView {
    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.r.transpose() * self.t_vec
    }

    /// Intrinsics rescaled from the native resolution to `width` x `height`
    /// (first two rows scaled, so the field of view is preserved).
    pub fn intrinsics_for(&self, width: usize, height: usize) -> Matrix3<f64> {
        let sx = width as f64 / self.width_hr as f64;
        let sy = height as f64 / self.height_hr as f64;
        let mut k = self.k;
        k.row_mut(0).scale_mut(sx);
        k.row_mut(1).scale_mut(sy);
        k
    }

    /// World point on the ray through pixel `uv` (at the native resolution)
    /// at camera-frame depth `depth`.
    pub fn backproject(&self, uv: Vector2<f64>, depth: f64) -> Vector3<f64> {
        let h = Vector3::new(uv.x, uv.y, 1.0);
        let k_inv = self.k.try_inverse().expect("intrinsics are invertible");
        let x_cam = k_inv * h * depth;
        self.r.transpose() * (x_cam - self.t_vec)
    }
}

/// Ordered acquisition sweep.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub views: Vec<CameraView>,
    pub source_distance: f64,
    pub detector_distance: f64,
}

/// Physical detector description for trajectory construction.
#[derive(Debug, Clone, Copy)]
pub struct DetectorParams {
    pub width_px: usize,
    pub height_px: usize,
    /// Physical width of the detector, mm. Pixels are square.
    pub width_mm: f64,
    /// Isocenter-to-detector distance, mm.
    pub distance_mm: f64,
}

/// Acquisition timing along the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMode {
    /// Timestamps linear in [0,1] across the views.
    Sweep,
    /// All views share timestamp 0.5.
    Static,
}

/// Projects a world point, returning detector coordinates in pixels at the
/// view's native resolution and the camera-frame depth in mm.
pub fn project_point(mu: Vector3<f64>, view: &CameraView) -> Result<(Vector2<f64>, f64)> {
    let x_cam = view.r * mu + view.t_vec;
    let depth = x_cam.z;
    if depth <= DEPTH_EPS {
        return Err(Error::BehindCamera { depth });
    }
    let h = view.k * x_cam;
    Ok((Vector2::new(h.x / h.z, h.y / h.z), depth))
}

/// Projects a 3D covariance to the detector plane via the local affine
/// approximation Sigma2d = J W Sigma Wt Jt, symmetrized, with a variance
/// floor added to the diagonal.
pub fn project_covariance(
    sigma: &Matrix3<f64>,
    mu: Vector3<f64>,
    view: &CameraView,
) -> Result<Matrix2<f64>> {
    let asym = (sigma - sigma.transpose()).abs().max();
    if asym > 1e-9 * (1.0 + sigma.abs().max()) {
        return Err(Error::NonPsd {
            min_eigenvalue: f64::NAN,
        });
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let min_eig = sym
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig <= -1e-9 {
        return Err(Error::NonPsd {
            min_eigenvalue: min_eig,
        });
    }

    let x_cam = view.r * mu + view.t_vec;
    let depth = x_cam.z;
    if depth <= DEPTH_EPS {
        return Err(Error::BehindCamera { depth });
    }
    let j = projection_jacobian(&view.k, x_cam);
    let a: Matrix2x3<f64> = j * view.r;
    let m = a * sym * a.transpose();
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Ok(Matrix2::new(
        m[(0, 0)] + COV2D_FLOOR,
        off,
        off,
        m[(1, 1)] + COV2D_FLOOR,
    ))
}

/// Jacobian of the perspective projection (pixel coords w.r.t. camera-frame
/// point) at `x_cam`.
pub fn projection_jacobian(k: &Matrix3<f64>, x_cam: Vector3<f64>) -> Matrix2x3<f64> {
    let (fx, s, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let (x, y, z) = (x_cam.x, x_cam.y, x_cam.z);
    Matrix2x3::new(
        fx / z,
        s / z,
        -(fx * x + s * y) / (z * z),
        0.0,
        fy / z,
        -fy * y / (z * z),
    )
}

/// Builds `n_views` cameras evenly spaced over `span_degrees` of a circle of
/// radius `source_distance` in the z = 0 plane, all looking at the origin.
/// A full 360-degree span repeats the starting pose at the far end.
pub fn make_circular_trajectory(
    n_views: usize,
    span_degrees: f64,
    source_distance: f64,
    detector: DetectorParams,
    time_mode: TimeMode,
) -> Result<Trajectory> {
    if n_views < 2 {
        return Err(Error::InvalidConfig(format!(
            "n_views must be >= 2, got {n_views}"
        )));
    }
    if !(span_degrees > 0.0 && span_degrees <= 360.0) {
        return Err(Error::InvalidConfig(format!(
            "span_degrees must be in (0, 360], got {span_degrees}"
        )));
    }
    if source_distance <= 0.0 || detector.distance_mm < 0.0 || detector.width_mm <= 0.0 {
        return Err(Error::InvalidConfig(
            "distances and detector width must be positive".into(),
        ));
    }

    let sdd = source_distance + detector.distance_mm;
    let pitch = detector.width_mm / detector.width_px as f64;
    let f = sdd / pitch;
    let cx = detector.width_px as f64 / 2.0;
    let cy = detector.height_px as f64 / 2.0;
    let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);

    let up = Vector3::new(0.0, 0.0, 1.0);
    let mut views = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let frac = i as f64 / (n_views - 1) as f64;
        let theta = (span_degrees * frac).to_radians();
        let center = source_distance * Vector3::new(theta.cos(), theta.sin(), 0.0);
        let z_c = (-center).normalize();
        let x_c = up.cross(&z_c).normalize();
        let y_c = z_c.cross(&x_c);
        let r = Matrix3::from_rows(&[x_c.transpose(), y_c.transpose(), z_c.transpose()]);
        let t_vec = -r * center;
        views.push(CameraView {
            view_id: i as u32,
            k,
            r,
            t_vec,
            width_hr: detector.width_px,
            height_hr: detector.height_px,
            timestamp: match time_mode {
                TimeMode::Sweep => frac,
                TimeMode::Static => 0.5,
            },
        });
    }
    Ok(Trajectory {
        views,
        source_distance,
        detector_distance: detector.distance_mm,
    })
}

/// Writes views as a JSON array; floats survive the round trip bit-exactly.
pub fn save_geometry(path: &Path, views: &[CameraView]) -> Result<()> {
    let json = serde_json::to_string_pretty(views)
        .map_err(|e| Error::Format(format!("geometry encode: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads a JSON array of views written by [`save_geometry`].
pub fn load_geometry(path: &Path) -> Result<Vec<CameraView>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("geometry decode: {e}")))
}

//! Scaled orthographic projection (SOP) and closed-form pose initialization
//! from 2D landmarks via weak-perspective Procrustes.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_LANDMARKS;
use crate::scalar::Real;

/// 7-parameter scaled orthographic camera: axis-angle rotation (3),
/// translation (3, z carried but unused by projection) and positive scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SopCamera<T: Real> {
    pub rotation: Vector3<T>,
    pub translation: Vector3<T>,
    pub scale: T,
}

impl<T: Real> SopCamera<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
            scale: T::one(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        rodrigues(&self.rotation)
    }

    /// `p = scale * (R v)_{xy} + t_{xy}`.
    pub fn project_point(&self, v: &Vector3<T>) -> Vector2<T> {
        let r = self.rotation_matrix();
        let rv = r * v;
        Vector2::new(
            self.scale * rv.x + self.translation.x,
            self.scale * rv.y + self.translation.y,
        )
    }

    pub fn project(&self, vertices: &[Vector3<T>]) -> Vec<Vector2<T>> {
        let r = self.rotation_matrix();
        vertices
            .iter()
            .map(|v| {
                let rv = r * v;
                Vector2::new(
                    self.scale * rv.x + self.translation.x,
                    self.scale * rv.y + self.translation.y,
                )
            })
            .collect()
    }

    /// Camera-space depth used for visibility ordering (smaller = nearer).
    pub fn depth(&self, v: &Vector3<T>) -> T {
        (self.rotation_matrix() * v).z
    }
}

/// Rodrigues formula: rotation matrix from an axis-angle vector.
pub fn rodrigues<T: Real>(axis_angle: &Vector3<T>) -> Matrix3<T> {
    let theta = axis_angle.norm();
    if theta < T::c(1e-12) {
        // First-order fallback near zero keeps the map smooth.
        let k = cross_matrix(axis_angle);
        return Matrix3::identity() + k;
    }
    let axis = axis_angle / theta;
    let k = cross_matrix(&axis);
    Matrix3::identity() + k * theta.sin() + k * k * (T::one() - theta.cos())
}

/// Axis-angle vector (angle in [0, pi]) from a rotation matrix.
pub fn axis_angle_from_matrix<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let half = T::c(0.5);
    let cos_theta = ((r.trace() - T::one()) * half).clamp(-T::one(), T::one());
    let theta = cos_theta.acos();
    let v = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin_theta = theta.sin();
    if sin_theta > T::c(1e-7) {
        return v * (theta / (T::c(2.0) * sin_theta));
    }
    if theta < T::c(1e-6) {
        return v * half;
    }
    // theta near pi: extract the axis from the symmetric part.
    let mut axis = Vector3::new(
        ((r[(0, 0)] + T::one()) * half).max(T::zero()).sqrt(),
        ((r[(1, 1)] + T::one()) * half).max(T::zero()).sqrt(),
        ((r[(2, 2)] + T::one()) * half).max(T::zero()).sqrt(),
    );
    // Fix signs against off-diagonal sums.
    if r[(0, 1)] + r[(1, 0)] < T::zero() {
        axis.y = -axis.y;
    }
    if r[(0, 2)] + r[(2, 0)] < T::zero() {
        axis.z = -axis.z;
    }
    axis * theta
}

fn cross_matrix<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// 68 tracked landmark points for one frame, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks2D<T: Real> {
    pub points: Vec<Vector2<T>>,
    pub confidence: Option<Vec<T>>,
}

impl<T: Real> Landmarks2D<T> {
    pub fn new(points: Vec<Vector2<T>>, confidence: Option<Vec<T>>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::DimensionMismatch(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidArgument("non-finite landmark".into()));
        }
        if let Some(c) = &confidence {
            if c.len() != NUM_LANDMARKS {
                return Err(Error::DimensionMismatch(
                    "confidence length != landmark count".into(),
                ));
            }
        }
        Ok(Self { points, confidence })
    }
}

/// Pose estimate together with its RMS reprojection residual.
#[derive(Debug, Clone)]
pub struct PoseEstimate<T: Real> {
    pub camera: SopCamera<T>,
    pub residual_rms: T,
}

/// Closed-form weak-perspective Procrustes pose from 68 2D-3D
/// correspondences.
///
/// Centers both point sets, solves the 2x3 orthographic factor by least
/// squares, projects it to the nearest scaled rotation via SVD (det +1) and
/// recovers translation from the centroids.
pub fn estimate_pose<T: Real>(
    landmarks: &Landmarks2D<T>,
    model_landmarks: &[Vector3<T>],
) -> Result<PoseEstimate<T>> {
    if model_landmarks.len() != landmarks.points.len() {
        return Err(Error::DimensionMismatch(format!(
            "model landmark count {} != 2d landmark count {}",
            model_landmarks.len(),
            landmarks.points.len()
        )));
    }
    let n = landmarks.points.len();
    let nf = T::from_usize(n).unwrap();
    let centroid_2d = landmarks.points.iter().fold(Vector2::zeros(), |a, p| a + p) / nf;
    let centroid_3d = model_landmarks.iter().fold(Vector3::zeros(), |a, p| a + p) / nf;

    // Least squares for M (2x3) in  X_c M^T = P_c.
    let mut xtx = nalgebra::Matrix3::<T>::zeros();
    let mut xtp = nalgebra::Matrix3x2::<T>::zeros();
    for (p2, p3) in landmarks.points.iter().zip(model_landmarks) {
        let x = p3 - centroid_3d;
        let p = p2 - centroid_2d;
        xtx += x * x.transpose();
        xtp += x * p.transpose();
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Degenerate("landmark configuration is rank deficient".into()))?;
    let m_t = chol.solve(&xtp); // 3x2, columns are rows of M
    let m = m_t.transpose();

    // Nearest scaled rotation: SVD of the 2x3 factor.
    let m_dyn = DMatrix::from_fn(2, 3, |i, j| m[(i, j)]);
    let svd = m_dyn.svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let v_t = svd.v_t.as_ref().unwrap();
    let scale = (svd.singular_values[0] + svd.singular_values[1]) * T::c(0.5);
    if scale <= T::c(1e-12) {
        return Err(Error::Degenerate("estimated scale is zero".into()));
    }
    let r2 = u * v_t; // 2x3 with orthonormal rows
    let row0 = Vector3::new(r2[(0, 0)], r2[(0, 1)], r2[(0, 2)]);
    let row1 = Vector3::new(r2[(1, 0)], r2[(1, 1)], r2[(1, 2)]);
    let row2 = row0.cross(&row1);
    let r = Matrix3::from_rows(&[row0.transpose(), row1.transpose(), row2.transpose()]);

    let rc = r * centroid_3d;
    let translation = Vector3::new(
        centroid_2d.x - scale * rc.x,
        centroid_2d.y - scale * rc.y,
        T::zero(),
    );
    let camera = SopCamera {
        rotation: axis_angle_from_matrix(&r),
        translation,
        scale,
    };
    let mut ss = T::zero();
    for (p2, p3) in landmarks.points.iter().zip(model_landmarks) {
        let proj = camera.project_point(p3);
        ss += (proj - p2).norm_squared();
    }
    let residual_rms = (ss / nf).sqrt();
    Ok(PoseEstimate {
        camera,
        residual_rms,
    })
}

/// Landmark track file: `{"frames": [{"points": [[x,y]x68], "confidence": [..]}]}`.
#[derive(Serialize, Deserialize)]
struct LandmarkFile {
    frames: Vec<LandmarkFrame>,
}

#[derive(Serialize, Deserialize)]
struct LandmarkFrame {
    points: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<Vec<f64>>,
}

pub fn load_landmarks<T: Real>(path: impl AsRef<Path>) -> Result<Vec<Landmarks2D<T>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: LandmarkFile = serde_json::from_slice(&bytes)?;
    file.frames
        .into_iter()
        .map(|f| {
            Landmarks2D::new(
                f.points
                    .iter()
                    .map(|p| Vector2::new(T::c(p[0]), T::c(p[1])))
                    .collect(),
                f.confidence
                    .map(|c| c.into_iter().map(T::c).collect()),
            )
        })
        .collect()
}

pub fn save_landmarks<T: Real>(
    frames: &[Landmarks2D<T>],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = LandmarkFile {
        frames: frames
            .iter()
            .map(|f| LandmarkFrame {
                points: f
                    .points
                    .iter()
                    .map(|p| [p.x.as_f64(), p.y.as_f64()])
                    .collect(),
                confidence: f
                    .confidence
                    .as_ref()
                    .map(|c| c.iter().map(|v| v.as_f64()).collect()),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&file)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_camera(rng: &mut ChaCha8Rng, max_angle: f64) -> SopCamera<f64> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        SopCamera {
            rotation: axis * rng.gen_range(0.0..max_angle),
            translation: Vector3::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                0.0,
            ),
            scale: rng.gen_range(0.5..3.0),
        }
    }

    fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-60.0..60.0),
                    rng.gen_range(-80.0..80.0),
                    rng.gen_range(-30.0..30.0),
                )
            })
            .collect()
    }

    #[test]
    fn identity_camera_drops_z() {
        let cam = SopCamera::<f64>::identity();
        let p = cam.project_point(&Vector3::new(3.0, -2.0, 17.0));
        assert_eq!(p, Vector2::new(3.0, -2.0));
    }

    #[test]
    fn quarter_turn_about_z() {
        let cam = SopCamera {
            rotation: Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            translation: Vector3::zeros(),
            scale: 1.0,
        };
        let p = cam.project_point(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-12);
    }

    // Independent Rodrigues oracle: rotate via quaternion built from the
    // axis-angle instead of the matrix exponential formula.
    fn quat_rotate(axis_angle: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
        let theta = axis_angle.norm();
        if theta == 0.0 {
            return *v;
        }
        let axis = axis_angle / theta;
        let (s, c) = (theta / 2.0).sin_cos();
        let q = [c, s * axis.x, s * axis.y, s * axis.z];
        // v' = q * (0,v) * q^-1
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        let uv = Vector3::new(x, y, z).cross(v);
        let uuv = Vector3::new(x, y, z).cross(&uv);
        v + uv * (2.0 * w) + uuv * 2.0
    }

    #[test]
    fn projection_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let cam = rand_camera(&mut rng, 3.0);
            let pts = rand_points(&mut rng, 10);
            for v in &pts {
                let rv = quat_rotate(&cam.rotation, v);
                let expect = Vector2::new(
                    cam.scale * rv.x + cam.translation.x,
                    cam.scale * rv.y + cam.translation.y,
                );
                let got = cam.project_point(v);
                assert_relative_eq!(got, expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = rand_camera(&mut rng, 2.0);
        let mut cam2 = cam.clone();
        cam2.translation.x += 7.0;
        cam2.translation.y -= 3.0;
        let pts = rand_points(&mut rng, 20);
        for v in &pts {
            let d = cam2.project_point(v) - cam.project_point(v);
            assert_relative_eq!(d, Vector2::new(7.0, -3.0), epsilon = 1e-12);
        }
    }

    fn landmarks_from(cam: &SopCamera<f64>, pts: &[Vector3<f64>]) -> Landmarks2D<f64> {
        Landmarks2D::new(cam.project(pts), None).unwrap()
    }

    #[test]
    fn pose_recovery_inverse_crime() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            // up to ~60 degrees from frontal
            let cam = rand_camera(&mut rng, 1.0);
            let pts = rand_points(&mut rng, NUM_LANDMARKS);
            let lms = landmarks_from(&cam, &pts);
            let est = estimate_pose(&lms, &pts).unwrap();
            let r_true = cam.rotation_matrix();
            let r_est = est.camera.rotation_matrix();
            let dr = r_true.transpose() * r_est;
            let angle_err = axis_angle_from_matrix(&dr).norm();
            assert!(angle_err < 1e-6, "rotation error {angle_err}");
            assert!((est.camera.scale - cam.scale).abs() < 1e-9);
            assert!(est.residual_rms < 1e-8);
        }
    }

    #[test]
    fn frontal_pose_exact_recovery() {
        let cam = SopCamera {
            rotation: Vector3::zeros(),
            translation: Vector3::new(10.0, 20.0, 0.0),
            scale: 2.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = rand_points(&mut rng, NUM_LANDMARKS);
        let est = estimate_pose(&landmarks_from(&cam, &pts), &pts).unwrap();
        assert_relative_eq!(est.camera.scale, 2.0, epsilon = 1e-12);
        assert_relative_eq!(est.camera.translation.x, 10.0, epsilon = 1e-9);
        assert_relative_eq!(est.camera.translation.y, 20.0, epsilon = 1e-9);
        assert!(est.camera.rotation.norm() < 1e-9);
    }

    #[test]
    fn recovered_rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let cam = rand_camera(&mut rng, 1.0);
            let pts = rand_points(&mut rng, NUM_LANDMARKS);
            let est = estimate_pose(&landmarks_from(&cam, &pts), &pts).unwrap();
            let r = est.camera.rotation_matrix();
            let rtr = r.transpose() * r;
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((rtr[(i, j)] - expect).abs() < 1e-8);
                }
            }
            assert!((r.determinant() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn collinear_landmarks_are_degenerate() {
        let pts: Vec<Vector3<f64>> = (0..NUM_LANDMARKS)
            .map(|i| Vector3::new(i as f64, 0.0, 0.0))
            .collect();
        let lms = Landmarks2D::new(
            (0..NUM_LANDMARKS)
                .map(|i| Vector2::new(i as f64, 0.0))
                .collect(),
            None,
        )
        .unwrap();
        assert!(matches!(
            estimate_pose(&lms, &pts),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn landmark_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let frames: Vec<Landmarks2D<f64>> = (0..3)
            .map(|_| {
                Landmarks2D::new(
                    (0..NUM_LANDMARKS)
                        .map(|_| Vector2::new(rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0)))
                        .collect(),
                    None,
                )
                .unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        save_landmarks(&frames, &path).unwrap();
        let loaded = load_landmarks::<f64>(&path).unwrap();
        assert_eq!(loaded.len(), frames.len());
        for (a, b) in loaded.iter().zip(&frames) {
            for (p, q) in a.points.iter().zip(&b.points) {
                assert_relative_eq!(p, q, epsilon = 0.0);
            }
        }
    }
}

//! Video fitting: minimizes a three-term energy (landmark reprojection,
//! quadratic prior, temporal smoothness) over a shared identity vector,
//! per-frame expressions and per-frame cameras, subject to box constraints
//! on the shape coefficients.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::camera::{estimate_pose, Landmarks2D, SopCamera};
use crate::error::{Error, Result};
use crate::model::{ShapeBasis, ShapeParams, NUM_LANDMARKS};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub struct EnergyWeights<T: Real> {
    pub w_l: T,
    pub w_pr: T,
    pub w_sm: T,
}

impl<T: Real> Default for EnergyWeights<T> {
    fn default() -> Self {
        Self {
            w_l: T::one(),
            w_pr: T::c(0.05),
            w_sm: T::c(0.5),
        }
    }
}

/// Box half-widths in units of per-mode standard deviations.
#[derive(Debug, Clone, Copy)]
pub struct BoxConstraints<T: Real> {
    pub k_id: T,
    pub k_exp: T,
}

impl<T: Real> Default for BoxConstraints<T> {
    fn default() -> Self {
        Self {
            k_id: T::c(3.0),
            k_exp: T::c(3.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyTerms<T> {
    pub landmark: T,
    pub prior: T,
    pub smoothness: T,
    pub total: T,
}

#[derive(Debug, Clone)]
pub struct FitResult<T: Real> {
    pub identity: DVector<T>,
    pub expressions: Vec<DVector<T>>,
    pub cameras: Vec<SopCamera<T>>,
    pub energy: Option<EnergyTerms<T>>,
    /// Total energy after each outer iteration, non-increasing.
    pub energy_trace: Vec<T>,
}

impl<T: Real> FitResult<T> {
    pub fn num_frames(&self) -> usize {
        self.expressions.len()
    }

    pub fn params_at(&self, t: usize) -> ShapeParams<T> {
        ShapeParams {
            identity: self.identity.clone(),
            expression: self.expressions[t].clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions<T: Real> {
    pub weights: EnergyWeights<T>,
    pub box_constraints: BoxConstraints<T>,
    pub max_outer_iters: usize,
    pub rel_tol: T,
}

impl<T: Real> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            weights: EnergyWeights::default(),
            box_constraints: BoxConstraints::default(),
            max_outer_iters: 20,
            rel_tol: T::c(1e-6),
        }
    }
}

/// Mean squared landmark reprojection error, averaged by 1/(68 T).
pub fn landmark_term<T: Real>(
    basis: &ShapeBasis<T>,
    cameras: &[SopCamera<T>],
    identity: &DVector<T>,
    expressions: &[DVector<T>],
    landmark_seq: &[Landmarks2D<T>],
) -> Result<T> {
    let t_frames = landmark_seq.len();
    if cameras.len() != t_frames || expressions.len() != t_frames {
        return Err(Error::DimensionMismatch(
            "cameras/expressions/landmarks length mismatch".into(),
        ));
    }
    let mut acc = T::zero();
    for t in 0..t_frames {
        let params = ShapeParams {
            identity: identity.clone(),
            expression: expressions[t].clone(),
        };
        let verts = basis.landmark_positions(&params)?;
        for (k, v) in verts.iter().enumerate() {
            let p = cameras[t].project_point(v);
            acc += (p - landmark_seq[t].points[k]).norm_squared();
        }
    }
    Ok(acc / T::from_usize(NUM_LANDMARKS * t_frames).unwrap())
}

/// Quadratic prior: `sum_j (s_i/sigma_id)^2 + (1/T) sum_t sum_j (s_e/sigma_exp)^2`.
pub fn prior_term<T: Real>(
    identity: &DVector<T>,
    expressions: &[DVector<T>],
    sigma_id: &DVector<T>,
    sigma_exp: &DVector<T>,
) -> Result<T> {
    if identity.len() != sigma_id.len() {
        return Err(Error::DimensionMismatch("identity/sigma_id".into()));
    }
    let mut acc = T::zero();
    for (s, sig) in identity.iter().zip(sigma_id.iter()) {
        acc += (*s / *sig).powi(2);
    }
    let t_frames = expressions.len();
    if t_frames > 0 {
        let mut e_acc = T::zero();
        for expr in expressions {
            if expr.len() != sigma_exp.len() {
                return Err(Error::DimensionMismatch("expression/sigma_exp".into()));
            }
            for (s, sig) in expr.iter().zip(sigma_exp.iter()) {
                e_acc += (*s / *sig).powi(2);
            }
        }
        acc += e_acc / T::from_usize(t_frames).unwrap();
    }
    Ok(acc)
}

/// Squared second temporal differences of the expression sequence; zero for
/// fewer than 3 frames.
pub fn smoothness_term<T: Real>(expressions: &[DVector<T>]) -> T {
    if expressions.len() < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for w in expressions.windows(3) {
        let d = &w[2] - &w[1] * T::c(2.0) + &w[0];
        acc += d.norm_squared();
    }
    acc
}

/// Minimizes `|Ax - b|^2` subject to `lower <= x <= upper`.
pub fn solve_box_lls<T: Real>(
    a: &DMatrix<T>,
    b: &DVector<T>,
    lower: &DVector<T>,
    upper: &DVector<T>,
) -> Result<DVector<T>> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch("A rows != b length".into()));
    }
    if lower.len() != a.ncols() || upper.len() != a.ncols() {
        return Err(Error::DimensionMismatch("bounds length != A cols".into()));
    }
    let q = a.transpose() * a;
    let c = a.transpose() * b;
    let x0 = DVector::zeros(a.ncols());
    solve_box_qp(&q, &c, lower, upper, &x0)
}

/// Minimizes the quadratic `x^T Q x - 2 c^T x` over the box via projected
/// Newton steps on the free variable set with an Armijo backtracking search.
pub fn solve_box_qp<T: Real>(
    q: &DMatrix<T>,
    c: &DVector<T>,
    lower: &DVector<T>,
    upper: &DVector<T>,
    warm_start: &DVector<T>,
) -> Result<DVector<T>> {
    let n = q.nrows();
    for j in 0..n {
        if lower[j] > upper[j] {
            return Err(Error::InfeasibleBox(j));
        }
    }
    let clamp = |x: &mut DVector<T>| {
        for j in 0..n {
            x[j] = x[j].clamp(lower[j], upper[j]);
        }
    };
    let objective = |x: &DVector<T>| -> T {
        // 1/2 x^T Q x - c^T x (constant term dropped)
        (x.dot(&(q * x))) * T::c(0.5) - c.dot(x)
    };

    let mut x = warm_start.clone();
    clamp(&mut x);
    let scale = c.amax().max(T::one());
    let grad_tol = T::c(1e-10) * scale;
    let bound_eps = T::c(1e-12) * scale.max(upper.amax().max(lower.amax()));

    for _ in 0..200 {
        let g = q * &x - c;
        // Projected-gradient optimality check.
        let mut pg_inf = T::zero();
        for j in 0..n {
            let pg = (x[j] - g[j]).clamp(lower[j], upper[j]) - x[j];
            pg_inf = pg_inf.max(pg.abs());
        }
        if pg_inf <= grad_tol {
            break;
        }
        // Free set: variables not pinned at an active bound.
        let free: Vec<usize> = (0..n)
            .filter(|&j| {
                !((x[j] - lower[j] <= bound_eps && g[j] >= T::zero())
                    || (upper[j] - x[j] <= bound_eps && g[j] <= T::zero()))
            })
            .collect();
        if free.is_empty() {
            break;
        }
        let nf = free.len();
        let mut qf = DMatrix::zeros(nf, nf);
        let mut gf = DVector::zeros(nf);
        for (a_i, &i) in free.iter().enumerate() {
            gf[a_i] = g[i];
            for (b_i, &j) in free.iter().enumerate() {
                qf[(a_i, b_i)] = q[(i, j)];
            }
        }
        let dir_f = match qf.clone().cholesky() {
            Some(ch) => ch.solve(&(-&gf)),
            None => {
                // Ridge fallback for rank-deficient subproblems.
                let ridge = T::c(1e-10) * (qf.trace() / T::from_usize(nf).unwrap() + T::one());
                let mut qr = qf;
                for i in 0..nf {
                    qr[(i, i)] += ridge;
                }
                match qr.cholesky() {
                    Some(ch) => ch.solve(&(-&gf)),
                    None => -&gf,
                }
            }
        };
        let f0 = objective(&x);
        let mut alpha = T::one();
        let mut accepted = false;
        for _ in 0..40 {
            let mut xt = x.clone();
            for (a_i, &i) in free.iter().enumerate() {
                xt[i] += alpha * dir_f[a_i];
            }
            clamp(&mut xt);
            if objective(&xt) <= f0 {
                x = xt;
                accepted = true;
                break;
            }
            alpha *= T::c(0.5);
        }
        if !accepted {
            break;
        }
    }
    Ok(x)
}

/// The 2x3 orthographic projection factor `s * R[0..2,:]` of a camera.
fn projection_factor<T: Real>(cam: &SopCamera<T>) -> Matrix2x3<T> {
    let r = cam.rotation_matrix();
    let mut p = Matrix2x3::zeros();
    for i in 0..2 {
        for j in 0..3 {
            p[(i, j)] = cam.scale * r[(i, j)];
        }
    }
    p
}

struct NormalEquations<T: Real> {
    q: DMatrix<T>,
    c: DVector<T>,
}

/// Assembles the normal equations of the box-constrained linear subproblem
/// over `x = (s_i, s_e_1, ..., s_e_T)` for fixed cameras. Exploits the
/// block structure instead of materializing the big residual matrix.
fn assemble_normal_equations<T: Real>(
    basis: &ShapeBasis<T>,
    cameras: &[SopCamera<T>],
    landmark_seq: &[Landmarks2D<T>],
    weights: &EnergyWeights<T>,
) -> NormalEquations<T> {
    let n_id = basis.n_id();
    let n_exp = basis.n_exp();
    let t_frames = landmark_seq.len();
    let dim = n_id + t_frames * n_exp;
    let mut q = DMatrix::<T>::zeros(dim, dim);
    let mut c = DVector::<T>::zeros(dim);

    let rows = 2 * NUM_LANDMARKS;
    let w_l = weights.w_l / T::from_usize(NUM_LANDMARKS * t_frames).unwrap();
    let lm_indices = basis.landmark_indices();
    let mean = basis.mean_shape();
    let u_id = basis.u_id();
    let u_exp = basis.u_exp();

    for (t, (cam, lms)) in cameras.iter().zip(landmark_seq).enumerate() {
        let p = projection_factor(cam);
        let mut b_id = DMatrix::<T>::zeros(rows, n_id);
        let mut b_exp = DMatrix::<T>::zeros(rows, n_exp);
        let mut rhs = DVector::<T>::zeros(rows);
        for (k, &vk) in lm_indices.iter().enumerate() {
            let v = vk as usize;
            // Projected mean vertex.
            let mx = mean[3 * v];
            let my = mean[3 * v + 1];
            let mz = mean[3 * v + 2];
            let proj_mean = Vector2::new(
                p[(0, 0)] * mx + p[(0, 1)] * my + p[(0, 2)] * mz + cam.translation.x,
                p[(1, 0)] * mx + p[(1, 1)] * my + p[(1, 2)] * mz + cam.translation.y,
            );
            rhs[2 * k] = lms.points[k].x - proj_mean.x;
            rhs[2 * k + 1] = lms.points[k].y - proj_mean.y;
            for (mat, basis_mat, cols) in
                [(&mut b_id, u_id, n_id), (&mut b_exp, u_exp, n_exp)]
            {
                for j in 0..cols {
                    let bx = basis_mat[(3 * v, j)];
                    let by = basis_mat[(3 * v + 1, j)];
                    let bz = basis_mat[(3 * v + 2, j)];
                    mat[(2 * k, j)] = p[(0, 0)] * bx + p[(0, 1)] * by + p[(0, 2)] * bz;
                    mat[(2 * k + 1, j)] = p[(1, 0)] * bx + p[(1, 1)] * by + p[(1, 2)] * bz;
                }
            }
        }
        let qid = b_id.transpose() * &b_id * w_l;
        let qie = b_id.transpose() * &b_exp * w_l;
        let qee = b_exp.transpose() * &b_exp * w_l;
        let cid = b_id.transpose() * &rhs * w_l;
        let cee = b_exp.transpose() * &rhs * w_l;
        let off = n_id + t * n_exp;
        for i in 0..n_id {
            for j in 0..n_id {
                q[(i, j)] += qid[(i, j)];
            }
            for j in 0..n_exp {
                q[(i, off + j)] += qie[(i, j)];
                q[(off + j, i)] += qie[(i, j)];
            }
            c[i] += cid[i];
        }
        for i in 0..n_exp {
            for j in 0..n_exp {
                q[(off + i, off + j)] += qee[(i, j)];
            }
            c[off + i] += cee[i];
        }
    }

    // Prior: w_pr * [(s_i/sigma_id)^2 + (1/T) (s_e/sigma_exp)^2].
    for j in 0..n_id {
        q[(j, j)] += weights.w_pr / basis.sigma_id()[j].powi(2);
    }
    let w_pr_e = weights.w_pr / T::from_usize(t_frames).unwrap();
    for t in 0..t_frames {
        let off = n_id + t * n_exp;
        for j in 0..n_exp {
            q[(off + j, off + j)] += w_pr_e / basis.sigma_exp()[j].powi(2);
        }
    }

    // Smoothness: w_sm * sum_t |e_{t+1} - 2 e_t + e_{t-1}|^2.
    if t_frames >= 3 {
        let coeffs = [T::one(), -T::c(2.0), T::one()];
        for t in 0..t_frames - 2 {
            for (ai, &ca) in coeffs.iter().enumerate() {
                for (bi, &cb) in coeffs.iter().enumerate() {
                    let wa = weights.w_sm * ca * cb;
                    let off_a = n_id + (t + ai) * n_exp;
                    let off_b = n_id + (t + bi) * n_exp;
                    for j in 0..n_exp {
                        q[(off_a + j, off_b + j)] += wa;
                    }
                }
            }
        }
    }

    NormalEquations { q, c }
}

fn energy_of<T: Real>(
    basis: &ShapeBasis<T>,
    cameras: &[SopCamera<T>],
    identity: &DVector<T>,
    expressions: &[DVector<T>],
    landmark_seq: &[Landmarks2D<T>],
    weights: &EnergyWeights<T>,
) -> Result<EnergyTerms<T>> {
    let e_l = landmark_term(basis, cameras, identity, expressions, landmark_seq)?;
    let e_pr = prior_term(identity, expressions, basis.sigma_id(), basis.sigma_exp())?;
    let e_sm = smoothness_term(expressions);
    Ok(EnergyTerms {
        landmark: e_l,
        prior: e_pr,
        smoothness: e_sm,
        total: weights.w_l * e_l + weights.w_pr * e_pr + weights.w_sm * e_sm,
    })
}

fn frame_landmark_sse<T: Real>(
    cam: &SopCamera<T>,
    verts: &[nalgebra::Vector3<T>],
    lms: &Landmarks2D<T>,
) -> T {
    verts
        .iter()
        .zip(&lms.points)
        .fold(T::zero(), |acc, (v, l)| {
            acc + (cam.project_point(v) - l).norm_squared()
        })
}

/// Block-coordinate descent over (shape coefficients | cameras): cameras are
/// initialized per frame from the mean shape, the shape subproblem is a
/// box-constrained linear least squares solved to optimality, then cameras
/// are refit against the updated shape. A refit camera is kept only when it
/// does not increase that frame's landmark error, so the energy trace is
/// non-increasing.
pub fn fit_video<T: Real>(
    basis: &ShapeBasis<T>,
    landmark_seq: &[Landmarks2D<T>],
    options: &FitOptions<T>,
) -> Result<FitResult<T>> {
    let t_frames = landmark_seq.len();
    if t_frames == 0 {
        return Err(Error::InvalidArgument("empty landmark sequence".into()));
    }
    let n_id = basis.n_id();
    let n_exp = basis.n_exp();
    let dim = n_id + t_frames * n_exp;

    let mean_landmarks = basis.landmark_positions(&ShapeParams::zeros(n_id, n_exp))?;
    let mut cameras: Vec<SopCamera<T>> = landmark_seq
        .iter()
        .map(|lms| estimate_pose(lms, &mean_landmarks).map(|e| e.camera))
        .collect::<Result<_>>()?;

    let mut lower = DVector::<T>::zeros(dim);
    let mut upper = DVector::<T>::zeros(dim);
    for j in 0..n_id {
        let half = options.box_constraints.k_id * basis.sigma_id()[j];
        lower[j] = -half;
        upper[j] = half;
    }
    for t in 0..t_frames {
        let off = n_id + t * n_exp;
        for j in 0..n_exp {
            let half = options.box_constraints.k_exp * basis.sigma_exp()[j];
            lower[off + j] = -half;
            upper[off + j] = half;
        }
    }

    let mut x = DVector::<T>::zeros(dim);
    let mut trace = Vec::new();
    let mut prev_energy: Option<T> = None;

    for _outer in 0..options.max_outer_iters {
        let ne = assemble_normal_equations(basis, &cameras, landmark_seq, &options.weights);
        x = solve_box_qp(&ne.q, &ne.c, &lower, &upper, &x)?;

        let identity = x.rows(0, n_id).into_owned();
        let expressions: Vec<DVector<T>> = (0..t_frames)
            .map(|t| x.rows(n_id + t * n_exp, n_exp).into_owned())
            .collect();

        // Camera refit against the updated shape, monotone per frame.
        for t in 0..t_frames {
            let params = ShapeParams {
                identity: identity.clone(),
                expression: expressions[t].clone(),
            };
            let verts = basis.landmark_positions(&params)?;
            let old_sse = frame_landmark_sse(&cameras[t], &verts, &landmark_seq[t]);
            if let Ok(est) = estimate_pose(&landmark_seq[t], &verts) {
                let new_sse = frame_landmark_sse(&est.camera, &verts, &landmark_seq[t]);
                if new_sse <= old_sse {
                    cameras[t] = est.camera;
                }
            }
        }

        let terms = energy_of(
            basis,
            &cameras,
            &identity,
            &expressions,
            landmark_seq,
            &options.weights,
        )?;
        trace.push(terms.total);
        let converged = prev_energy.is_some_and(|prev| {
            (prev - terms.total) / prev.abs().max(T::c(1e-30)) < options.rel_tol
        });
        prev_energy = Some(terms.total);
        if converged {
            break;
        }
    }

    let identity = x.rows(0, n_id).into_owned();
    let expressions: Vec<DVector<T>> = (0..t_frames)
        .map(|t| x.rows(n_id + t * n_exp, n_exp).into_owned())
        .collect();
    let energy = energy_of(
        basis,
        &cameras,
        &identity,
        &expressions,
        landmark_seq,
        &options.weights,
    )?;
    Ok(FitResult {
        identity,
        expressions,
        cameras,
        energy: Some(energy),
        energy_trace: trace,
    })
}

#[derive(Serialize, Deserialize)]
struct FitFileCamera {
    rotation: [f64; 3],
    translation: [f64; 3],
    scale: f64,
}

#[derive(Serialize, Deserialize)]
struct FitFileFrame {
    expression: Vec<f64>,
    camera: FitFileCamera,
}

#[derive(Serialize, Deserialize)]
struct FitFile {
    identity: Vec<f64>,
    frames: Vec<FitFileFrame>,
    #[serde(skip_serializing_if = "Option::is_none")]
    energy: Option<EnergyTerms<f64>>,
}

pub fn save_fit<T: Real>(fit: &FitResult<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = FitFile {
        identity: fit.identity.iter().map(|v| v.as_f64()).collect(),
        frames: fit
            .expressions
            .iter()
            .zip(&fit.cameras)
            .map(|(e, cam)| FitFileFrame {
                expression: e.iter().map(|v| v.as_f64()).collect(),
                camera: FitFileCamera {
                    rotation: [
                        cam.rotation.x.as_f64(),
                        cam.rotation.y.as_f64(),
                        cam.rotation.z.as_f64(),
                    ],
                    translation: [
                        cam.translation.x.as_f64(),
                        cam.translation.y.as_f64(),
                        cam.translation.z.as_f64(),
                    ],
                    scale: cam.scale.as_f64(),
                },
            })
            .collect(),
        energy: fit.energy.map(|e| EnergyTerms {
            landmark: e.landmark.as_f64(),
            prior: e.prior.as_f64(),
            smoothness: e.smoothness.as_f64(),
            total: e.total.as_f64(),
        }),
    };
    let json = serde_json::to_vec_pretty(&file)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_fit<T: Real>(path: impl AsRef<Path>) -> Result<FitResult<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: FitFile = serde_json::from_slice(&bytes)?;
    Ok(FitResult {
        identity: DVector::from_iterator(file.identity.len(), file.identity.iter().map(|&v| T::c(v))),
        expressions: file
            .frames
            .iter()
            .map(|f| DVector::from_iterator(f.expression.len(), f.expression.iter().map(|&v| T::c(v))))
            .collect(),
        cameras: file
            .frames
            .iter()
            .map(|f| SopCamera {
                rotation: nalgebra::Vector3::new(
                    T::c(f.camera.rotation[0]),
                    T::c(f.camera.rotation[1]),
                    T::c(f.camera.rotation[2]),
                ),
                translation: nalgebra::Vector3::new(
                    T::c(f.camera.translation[0]),
                    T::c(f.camera.translation[1]),
                    T::c(f.camera.translation[2]),
                ),
                scale: T::c(f.camera.scale),
            })
            .collect(),
        energy: file.energy.map(|e| EnergyTerms {
            landmark: T::c(e.landmark),
            prior: T::c(e.prior),
            smoothness: T::c(e.smoothness),
            total: T::c(e.total),
        }),
        energy_trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synthetic_model, SyntheticModelConfig};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> ShapeBasis<f64> {
        synthetic_model(&SyntheticModelConfig {
            grid: 10,
            n_id: 8,
            n_exp: 5,
            seed: 2,
        })
        .unwrap()
    }

    struct GroundTruth {
        identity: DVector<f64>,
        expressions: Vec<DVector<f64>>,
        cameras: Vec<SopCamera<f64>>,
        landmarks: Vec<Landmarks2D<f64>>,
    }

    /// Renders noiseless landmarks from known parameters (inverse crime).
    fn synth_sequence(basis: &ShapeBasis<f64>, t_frames: usize, seed: u64) -> GroundTruth {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let identity = DVector::from_fn(basis.n_id(), |j, _| {
            rng.gen_range(-1.5..1.5) * basis.sigma_id()[j]
        });
        // Smooth expression trajectory: sinusoids stay well inside the box.
        let phases: Vec<f64> = (0..basis.n_exp()).map(|_| rng.gen_range(0.0..6.28)).collect();
        let amps: Vec<f64> = (0..basis.n_exp())
            .map(|j| rng.gen_range(0.2..1.2) * basis.sigma_exp()[j])
            .collect();
        let mut expressions = Vec::new();
        let mut cameras = Vec::new();
        let mut landmarks = Vec::new();
        for t in 0..t_frames {
            let tt = t as f64 / t_frames.max(2) as f64;
            let expr = DVector::from_fn(basis.n_exp(), |j, _| {
                amps[j] * (2.0 * std::f64::consts::PI * tt + phases[j]).sin()
            });
            let cam = SopCamera {
                rotation: Vector3::new(0.15 * (3.0 * tt).sin(), 0.3 * (2.0 * tt).cos(), 0.1 * tt),
                translation: Vector3::new(128.0 + 10.0 * tt, 128.0 - 5.0 * tt, 0.0),
                scale: 0.9 + 0.1 * tt,
            };
            let params = ShapeParams {
                identity: identity.clone(),
                expression: expr.clone(),
            };
            let verts = basis.landmark_positions(&params).unwrap();
            landmarks.push(Landmarks2D::new(cam.project(&verts), None).unwrap());
            expressions.push(expr);
            cameras.push(cam);
        }
        GroundTruth {
            identity,
            expressions,
            cameras,
            landmarks,
        }
    }

    #[test]
    fn landmark_term_zero_on_exact_projections() {
        let basis = small_model();
        let gt = synth_sequence(&basis, 4, 1);
        let e = landmark_term(&basis, &gt.cameras, &gt.identity, &gt.expressions, &gt.landmarks)
            .unwrap();
        assert!(e < 1e-20, "E_l = {e}");
    }

    #[test]
    fn landmark_term_single_offset() {
        let basis = small_model();
        let mut gt = synth_sequence(&basis, 1, 2);
        gt.landmarks[0].points[10].x += 3.0;
        gt.landmarks[0].points[10].y += 4.0;
        let e = landmark_term(&basis, &gt.cameras, &gt.identity, &gt.expressions, &gt.landmarks)
            .unwrap();
        assert_relative_eq!(e, 25.0 / 68.0, epsilon = 1e-10);
    }

    #[test]
    fn landmark_term_matches_double_loop_oracle() {
        let basis = small_model();
        let mut gt = synth_sequence(&basis, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for f in &mut gt.landmarks {
            for p in &mut f.points {
                p.x += rng.gen_range(-2.0..2.0);
                p.y += rng.gen_range(-2.0..2.0);
            }
        }
        let got = landmark_term(&basis, &gt.cameras, &gt.identity, &gt.expressions, &gt.landmarks)
            .unwrap();
        // Naive oracle: explicit loops over frames/landmarks/coords.
        let mut acc = 0.0;
        for t in 0..3 {
            let params = ShapeParams {
                identity: gt.identity.clone(),
                expression: gt.expressions[t].clone(),
            };
            let verts = basis.landmark_positions(&params).unwrap();
            for k in 0..NUM_LANDMARKS {
                let p = gt.cameras[t].project_point(&verts[k]);
                let dx = p.x - gt.landmarks[t].points[k].x;
                let dy = p.y - gt.landmarks[t].points[k].y;
                acc += dx * dx + dy * dy;
            }
        }
        let expect = acc / (68.0 * 3.0);
        assert_relative_eq!(got, expect, epsilon = 1e-10);
    }

    #[test]
    fn prior_term_values() {
        let basis = small_model();
        let zero_e: Vec<DVector<f64>> = vec![DVector::zeros(basis.n_exp())];
        assert_eq!(
            prior_term(
                &DVector::zeros(basis.n_id()),
                &zero_e,
                basis.sigma_id(),
                basis.sigma_exp()
            )
            .unwrap(),
            0.0
        );
        // identity = sigma elementwise -> n_i.
        let e = prior_term(
            &basis.sigma_id().clone(),
            &zero_e,
            basis.sigma_id(),
            basis.sigma_exp(),
        )
        .unwrap();
        assert_relative_eq!(e, basis.n_id() as f64, epsilon = 1e-12);
    }

    #[test]
    fn prior_term_matches_direct_sum_oracle() {
        let basis = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let identity = DVector::from_fn(basis.n_id(), |_, _| rng.gen_range(-3.0..3.0));
        let exprs: Vec<DVector<f64>> = (0..5)
            .map(|_| DVector::from_fn(basis.n_exp(), |_, _| rng.gen_range(-3.0..3.0)))
            .collect();
        let got = prior_term(&identity, &exprs, basis.sigma_id(), basis.sigma_exp()).unwrap();
        let mut expect = 0.0;
        for j in 0..basis.n_id() {
            expect += (identity[j] / basis.sigma_id()[j]).powi(2);
        }
        let mut e_acc = 0.0;
        for e in &exprs {
            for j in 0..basis.n_exp() {
                e_acc += (e[j] / basis.sigma_exp()[j]).powi(2);
            }
        }
        expect += e_acc / 5.0;
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn smoothness_term_values() {
        let c = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(smoothness_term(&vec![c.clone(); 5]), 0.0);
        // linear ramp
        let ramp: Vec<DVector<f64>> = (0..5).map(|t| &c * (t as f64)).collect();
        assert_relative_eq!(smoothness_term(&ramp), 0.0, epsilon = 1e-12);
        // scalar {0, 0, 1} -> one second difference of 1
        let seq = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![1.0]),
        ];
        assert_eq!(smoothness_term(&seq), 1.0);
        // T < 3 -> zero
        assert_eq!(smoothness_term(&seq[..2].to_vec()), 0.0);
    }

    #[test]
    fn box_lls_unconstrained_inside_box_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let a = DMatrix::<f64>::from_fn(20, 6, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::<f64>::from_fn(20, |_, _| rng.gen_range(-1.0..1.0));
            let lower = DVector::from_element(6, -100.0);
            let upper = DVector::from_element(6, 100.0);
            let x = solve_box_lls(&a, &b, &lower, &upper).unwrap();
            let x_ref = (a.transpose() * &a)
                .cholesky()
                .unwrap()
                .solve(&(a.transpose() * &b));
            assert!((x - x_ref).amax() < 1e-8);
        }
    }

    #[test]
    fn box_lls_active_bounds_match_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let a = DMatrix::<f64>::from_fn(10, 2, |_, _| rng.gen_range(-1.0..1.0));
            // Push the unconstrained minimizer outside the box.
            let b = DVector::<f64>::from_fn(10, |i, _| a[(i, 0)] * 5.0 + a[(i, 1)] * -4.0);
            let lower = DVector::from_vec(vec![-1.0, -1.0]);
            let upper = DVector::from_vec(vec![1.0, 1.0]);
            let x = solve_box_lls(&a, &b, &lower, &upper).unwrap();
            // Exhaustive grid oracle at 1e-3 resolution.
            let f = |x0: f64, x1: f64| {
                let mut acc = 0.0;
                for i in 0..10 {
                    let r = a[(i, 0)] * x0 + a[(i, 1)] * x1 - b[i];
                    acc += r * r;
                }
                acc
            };
            let mut best = (f64::INFINITY, 0.0, 0.0);
            let mut x0 = -1.0;
            while x0 <= 1.0 + 1e-12 {
                let mut x1 = -1.0;
                while x1 <= 1.0 + 1e-12 {
                    let v = f(x0, x1);
                    if v < best.0 {
                        best = (v, x0, x1);
                    }
                    x1 += 1e-3;
                }
                x0 += 1e-3;
            }
            assert!(
                (x[0] - best.1).abs() <= 2e-3 && (x[1] - best.2).abs() <= 2e-3,
                "solver ({}, {}) vs grid ({}, {})",
                x[0],
                x[1],
                best.1,
                best.2
            );
            assert!(f(x[0], x[1]) <= best.0 + 1e-9);
        }
    }

    #[test]
    fn box_lls_fully_clamped() {
        let a = DMatrix::<f64>::identity(3, 3);
        let b = DVector::from_vec(vec![10.0, -10.0, 10.0]);
        let c = DVector::from_vec(vec![0.5, -0.25, 1.5]);
        let x = solve_box_lls(&a, &b, &c, &c).unwrap();
        assert_eq!(x, c);
    }

    #[test]
    fn box_lls_infeasible_box() {
        let a = DMatrix::<f64>::identity(2, 2);
        let b = DVector::zeros(2);
        let lower = DVector::from_vec(vec![1.0, 0.0]);
        let upper = DVector::from_vec(vec![0.0, 1.0]);
        assert!(matches!(
            solve_box_lls(&a, &b, &lower, &upper),
            Err(Error::InfeasibleBox(0))
        ));
    }

    #[test]
    fn box_lls_kkt_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = DMatrix::<f64>::from_fn(30, 8, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::<f64>::from_fn(30, |_, _| rng.gen_range(-5.0..5.0));
        let lower = DVector::from_element(8, -0.4);
        let upper = DVector::from_element(8, 0.4);
        let x = solve_box_lls(&a, &b, &lower, &upper).unwrap();
        let g = a.transpose() * (&a * &x - &b); // gradient of |Ax-b|^2 / 2
        let scale = (a.transpose() * &b).amax();
        for j in 0..8 {
            if x[j] > lower[j] + 1e-9 && x[j] < upper[j] - 1e-9 {
                assert!(g[j].abs() < 1e-6 * scale, "inactive grad {} at {j}", g[j]);
            } else if (x[j] - lower[j]).abs() <= 1e-9 {
                assert!(g[j] >= -1e-6 * scale);
            } else {
                assert!(g[j] <= 1e-6 * scale);
            }
        }
    }

    fn tight_fit_options() -> FitOptions<f64> {
        FitOptions {
            weights: EnergyWeights {
                w_l: 1.0,
                w_pr: 1e-6,
                w_sm: 1e-6,
            },
            box_constraints: BoxConstraints::default(),
            max_outer_iters: 30,
            rel_tol: 1e-10,
        }
    }

    #[test]
    fn fit_video_inverse_crime_recovers_parameters() {
        let basis = small_model();
        let gt = synth_sequence(&basis, 12, 21);
        let fit = fit_video(&basis, &gt.landmarks, &tight_fit_options()).unwrap();
        for j in 0..basis.n_id() {
            let err = (fit.identity[j] - gt.identity[j]).abs();
            assert!(err < 1e-3 * basis.sigma_id()[j], "id mode {j}: err {err}");
        }
        for t in 0..12 {
            for j in 0..basis.n_exp() {
                let err = (fit.expressions[t][j] - gt.expressions[t][j]).abs();
                assert!(err < 1e-3 * basis.sigma_exp()[j], "frame {t} mode {j}: {err}");
            }
        }
        assert!(fit.energy.unwrap().landmark < 1e-6);
    }

    #[test]
    fn fit_video_trace_is_non_increasing() {
        let basis = small_model();
        let gt = synth_sequence(&basis, 8, 22);
        let fit = fit_video(&basis, &gt.landmarks, &FitOptions::default()).unwrap();
        for w in fit.energy_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "trace increased: {:?}", w);
        }
    }

    #[test]
    fn fit_video_single_frame_has_zero_smoothness() {
        let basis = small_model();
        let gt = synth_sequence(&basis, 1, 23);
        let fit = fit_video(&basis, &gt.landmarks, &FitOptions::default()).unwrap();
        assert_eq!(fit.energy.unwrap().smoothness, 0.0);
        assert_eq!(fit.expressions.len(), 1);
    }

    #[test]
    fn fit_video_energy_decomposition_and_feasibility() {
        let basis = small_model();
        let gt = synth_sequence(&basis, 6, 24);
        let opts = FitOptions::default();
        let fit = fit_video(&basis, &gt.landmarks, &opts).unwrap();
        let e = fit.energy.unwrap();
        let recomputed = opts.weights.w_l * e.landmark
            + opts.weights.w_pr * e.prior
            + opts.weights.w_sm * e.smoothness;
        assert!((e.total - recomputed).abs() < 1e-8);
        for j in 0..basis.n_id() {
            assert!(fit.identity[j].abs() <= 3.0 * basis.sigma_id()[j] + 1e-12);
        }
        for expr in &fit.expressions {
            for j in 0..basis.n_exp() {
                assert!(expr[j].abs() <= 3.0 * basis.sigma_exp()[j] + 1e-12);
            }
        }
    }

    #[test]
    fn fit_video_noisy_landmarks_stay_accurate() {
        let basis = small_model();
        for seed in 0..10u64 {
            let mut gt = synth_sequence(&basis, 8, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            for f in &mut gt.landmarks {
                for p in &mut f.points {
                    // Box-Muller gaussian, sigma = 0.5 px
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let r = (-2.0 * u1.ln()).sqrt();
                    p.x += 0.5 * r * (2.0 * std::f64::consts::PI * u2).cos();
                    p.y += 0.5 * r * (2.0 * std::f64::consts::PI * u2).sin();
                }
            }
            let fit = fit_video(&basis, &gt.landmarks, &tight_fit_options()).unwrap();
            // Per-coordinate reprojection RMSE in pixels.
            let rmse = (fit.energy.unwrap().landmark / 2.0).sqrt();
            assert!(rmse <= 0.6, "seed {seed}: reprojection RMSE {rmse}");
            for w in fit.energy_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn increasing_smoothness_weight_does_not_increase_e_sm() {
        let basis = small_model();
        let mut gt = synth_sequence(&basis, 8, 31);
        // jitter to make smoothness non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for f in &mut gt.landmarks {
            for p in &mut f.points {
                p.x += rng.gen_range(-1.0..1.0);
                p.y += rng.gen_range(-1.0..1.0);
            }
        }
        let mut opts = FitOptions::default();
        let fit_a = fit_video(&basis, &gt.landmarks, &opts).unwrap();
        opts.weights.w_sm *= 10.0;
        let fit_b = fit_video(&basis, &gt.landmarks, &opts).unwrap();
        assert!(fit_b.energy.unwrap().smoothness <= fit_a.energy.unwrap().smoothness + 1e-12);
    }

    #[test]
    fn fit_file_round_trip() {
        let basis = small_model();
        let gt = synth_sequence(&basis, 3, 41);
        let fit = fit_video(&basis, &gt.landmarks, &FitOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        save_fit(&fit, &path).unwrap();
        let loaded = load_fit::<f64>(&path).unwrap();
        assert_eq!(loaded.identity.len(), fit.identity.len());
        assert_eq!(loaded.expressions.len(), fit.expressions.len());
        for (a, b) in loaded.cameras.iter().zip(&fit.cameras) {
            assert_eq!(a.scale, b.scale);
            assert_eq!(a.rotation, b.rotation);
        }
    }
}

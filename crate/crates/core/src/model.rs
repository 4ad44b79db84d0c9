//! Linear 3D morphable face model: mean shape plus identity and expression
//! PCA bases, with a binary container format and a synthetic model generator
//! for hermetic tests.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const NUM_LANDMARKS: usize = 68;
const MAGIC: &[u8; 4] = b"FMM1";
const ORTHO_TOL: f64 = 1e-6;

/// Mean face plus identity/expression PCA bases and landmark correspondence.
///
/// Vertex `k` of a 3N shape vector occupies entries `3k..3k+3` (x, y, z).
#[derive(Debug, Clone)]
pub struct ShapeBasis<T: Real> {
    mean_id: DVector<T>,
    mean_exp: DVector<T>,
    mean_shape: DVector<T>,
    u_id: DMatrix<T>,
    u_exp: DMatrix<T>,
    sigma_id: DVector<T>,
    sigma_exp: DVector<T>,
    topology: Vec<[u32; 3]>,
    landmark_indices: Vec<u32>,
}

/// Identity and expression PCA coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams<T: Real> {
    pub identity: DVector<T>,
    pub expression: DVector<T>,
}

impl<T: Real> ShapeParams<T> {
    pub fn zeros(n_id: usize, n_exp: usize) -> Self {
        Self {
            identity: DVector::zeros(n_id),
            expression: DVector::zeros(n_exp),
        }
    }
}

/// A synthesized face mesh sharing the basis topology.
#[derive(Debug, Clone)]
pub struct Mesh<T: Real> {
    pub vertices: Vec<Vector3<T>>,
    pub topology: Vec<[u32; 3]>,
}

/// Mean face with each axis min-max scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct NormalizedMeanFace<T: Real> {
    pub coords: Vec<Vector3<T>>,
}

impl<T: Real> ShapeBasis<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mean_id: DVector<T>,
        mean_exp: DVector<T>,
        u_id: DMatrix<T>,
        u_exp: DMatrix<T>,
        sigma_id: DVector<T>,
        sigma_exp: DVector<T>,
        topology: Vec<[u32; 3]>,
        landmark_indices: Vec<u32>,
    ) -> Result<Self> {
        let dim = mean_id.len();
        if dim == 0 || dim % 3 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "mean vector length {dim} is not a positive multiple of 3"
            )));
        }
        if mean_exp.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "mean_exp length {} != mean_id length {dim}",
                mean_exp.len()
            )));
        }
        if u_id.nrows() != dim || u_exp.nrows() != dim {
            return Err(Error::DimensionMismatch(format!(
                "basis rows ({}, {}) != 3N = {dim}",
                u_id.nrows(),
                u_exp.nrows()
            )));
        }
        if sigma_id.len() != u_id.ncols() || sigma_exp.len() != u_exp.ncols() {
            return Err(Error::DimensionMismatch(
                "sigma length does not match basis column count".into(),
            ));
        }
        if sigma_id.iter().chain(sigma_exp.iter()).any(|s| *s <= T::zero()) {
            return Err(Error::InvalidArgument("sigma entries must be > 0".into()));
        }
        let n = dim / 3;
        for tri in &topology {
            if tri.iter().any(|&v| v as usize >= n) {
                return Err(Error::DimensionMismatch(format!(
                    "topology index out of range (N = {n})"
                )));
            }
        }
        if landmark_indices.len() != NUM_LANDMARKS {
            return Err(Error::DimensionMismatch(format!(
                "expected {NUM_LANDMARKS} landmark indices, got {}",
                landmark_indices.len()
            )));
        }
        if landmark_indices.iter().any(|&v| v as usize >= n) {
            return Err(Error::DimensionMismatch("landmark index out of range".into()));
        }
        check_orthonormal(&u_id, "U_id")?;
        check_orthonormal(&u_exp, "U_exp")?;
        let mean_shape = &mean_id + &mean_exp;
        Ok(Self {
            mean_id,
            mean_exp,
            mean_shape,
            u_id,
            u_exp,
            sigma_id,
            sigma_exp,
            topology,
            landmark_indices,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }
    pub fn n_id(&self) -> usize {
        self.u_id.ncols()
    }
    pub fn n_exp(&self) -> usize {
        self.u_exp.ncols()
    }
    pub fn mean_shape(&self) -> &DVector<T> {
        &self.mean_shape
    }
    pub fn mean_id(&self) -> &DVector<T> {
        &self.mean_id
    }
    pub fn mean_exp(&self) -> &DVector<T> {
        &self.mean_exp
    }
    pub fn u_id(&self) -> &DMatrix<T> {
        &self.u_id
    }
    pub fn u_exp(&self) -> &DMatrix<T> {
        &self.u_exp
    }
    pub fn sigma_id(&self) -> &DVector<T> {
        &self.sigma_id
    }
    pub fn sigma_exp(&self) -> &DVector<T> {
        &self.sigma_exp
    }
    pub fn topology(&self) -> &[[u32; 3]] {
        &self.topology
    }
    pub fn landmark_indices(&self) -> &[u32] {
        &self.landmark_indices
    }

    /// Evaluates the linear shape model: `x = mean + U_id s_i + U_exp s_e`.
    pub fn synthesize(&self, params: &ShapeParams<T>) -> Result<Mesh<T>> {
        if params.identity.len() != self.n_id() || params.expression.len() != self.n_exp() {
            return Err(Error::DimensionMismatch(format!(
                "params ({}, {}) do not match basis ({}, {})",
                params.identity.len(),
                params.expression.len(),
                self.n_id(),
                self.n_exp()
            )));
        }
        let flat = &self.mean_shape + &self.u_id * &params.identity + &self.u_exp * &params.expression;
        Ok(Mesh {
            vertices: unflatten(&flat),
            topology: self.topology.clone(),
        })
    }

    /// Landmark vertex positions of a synthesized shape, in model order.
    pub fn landmark_positions(&self, params: &ShapeParams<T>) -> Result<Vec<Vector3<T>>> {
        let mesh = self.synthesize(params)?;
        Ok(self
            .landmark_indices
            .iter()
            .map(|&k| mesh.vertices[k as usize])
            .collect())
    }

    /// Min-max normalizes the mean shape to the unit cube, per axis.
    pub fn normalized_mean_face(&self) -> Result<NormalizedMeanFace<T>> {
        let verts = unflatten(&self.mean_shape);
        let mut lo = verts[0];
        let mut hi = verts[0];
        for v in &verts {
            for a in 0..3 {
                if v[a] < lo[a] {
                    lo[a] = v[a];
                }
                if v[a] > hi[a] {
                    hi[a] = v[a];
                }
            }
        }
        for a in 0..3 {
            if hi[a] <= lo[a] {
                return Err(Error::Degenerate(format!("mean shape axis {a} has zero range")));
            }
        }
        let coords = verts
            .iter()
            .map(|v| {
                Vector3::new(
                    (v[0] - lo[0]) / (hi[0] - lo[0]),
                    (v[1] - lo[1]) / (hi[1] - lo[1]),
                    (v[2] - lo[2]) / (hi[2] - lo[2]),
                )
            })
            .collect();
        Ok(NormalizedMeanFace { coords })
    }
}

fn unflatten<T: Real>(flat: &DVector<T>) -> Vec<Vector3<T>> {
    flat.as_slice()
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

fn check_orthonormal<T: Real>(u: &DMatrix<T>, name: &str) -> Result<()> {
    let tol = T::c(ORTHO_TOL);
    for i in 0..u.ncols() {
        let ci = u.column(i);
        let norm2 = ci.dot(&ci);
        if (norm2 - T::one()).abs() > tol {
            return Err(Error::NonOrthonormal(format!(
                "{name} column {i} has squared norm {:.6e}",
                norm2.as_f64()
            )));
        }
        for j in (i + 1)..u.ncols() {
            let d = ci.dot(&u.column(j));
            if d.abs() > tol {
                return Err(Error::NonOrthonormal(format!(
                    "{name} columns {i} and {j} have dot product {:.3e}",
                    d.as_f64()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    num_vertices: usize,
    n_id: usize,
    n_exp: usize,
    landmark_indices: Vec<u32>,
    topology: Vec<[u32; 3]>,
}

/// Reads a `.fmm` model container and validates the basis.
pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<ShapeBasis<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_model_bytes(&bytes)
}

pub fn load_model_bytes<T: Real>(bytes: &[u8]) -> Result<ShapeBasis<T>> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::CorruptContainer("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::CorruptContainer(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut len_bytes = [0u8; 4];
    cursor
        .read_exact(&mut len_bytes)
        .map_err(|_| Error::CorruptContainer("missing header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    cursor
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::CorruptContainer("truncated header".into()))?;
    let header: ContainerHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CorruptContainer(format!("header json: {e}")))?;

    let dim = header
        .num_vertices
        .checked_mul(3)
        .ok_or_else(|| Error::CorruptContainer("vertex count overflow".into()))?;
    let expected_floats =
        2 * dim + dim * header.n_id + dim * header.n_exp + header.n_id + header.n_exp;
    let body = &bytes[cursor.position() as usize..];
    if body.len() != expected_floats * 8 {
        return Err(Error::CorruptContainer(format!(
            "blob size {} != expected {} bytes",
            body.len(),
            expected_floats * 8
        )));
    }
    let mut floats = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<T> { floats.by_ref().take(n).map(T::c).collect() };
    let mean_id = DVector::from_vec(take(dim));
    let mean_exp = DVector::from_vec(take(dim));
    let u_id = DMatrix::from_vec(dim, header.n_id, take(dim * header.n_id));
    let u_exp = DMatrix::from_vec(dim, header.n_exp, take(dim * header.n_exp));
    let sigma_id = DVector::from_vec(take(header.n_id));
    let sigma_exp = DVector::from_vec(take(header.n_exp));

    ShapeBasis::new(
        mean_id,
        mean_exp,
        u_id,
        u_exp,
        sigma_id,
        sigma_exp,
        header.topology,
        header.landmark_indices,
    )
}

/// Writes a `.fmm` model container. Blob order: mean_id, mean_exp, U_id
/// (column-major), U_exp (column-major), sigma_id, sigma_exp; all little-endian
/// float64.
pub fn save_model<T: Real>(basis: &ShapeBasis<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = save_model_bytes(basis)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_model_bytes<T: Real>(basis: &ShapeBasis<T>) -> Result<Vec<u8>> {
    let header = ContainerHeader {
        num_vertices: basis.num_vertices(),
        n_id: basis.n_id(),
        n_exp: basis.n_exp(),
        landmark_indices: basis.landmark_indices.clone(),
        topology: basis.topology.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.write_all(MAGIC).unwrap();
    out.write_all(&(header_bytes.len() as u32).to_le_bytes()).unwrap();
    out.write_all(&header_bytes).unwrap();
    let mut push = |vals: &[T]| {
        for v in vals {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    };
    push(basis.mean_id.as_slice());
    push(basis.mean_exp.as_slice());
    push(basis.u_id.as_slice());
    push(basis.u_exp.as_slice());
    push(basis.sigma_id.as_slice());
    push(basis.sigma_exp.as_slice());
    Ok(out)
}

/// Configuration for the synthetic model generator.
#[derive(Debug, Clone)]
pub struct SyntheticModelConfig {
    /// Vertex grid side; N = grid * grid.
    pub grid: usize,
    pub n_id: usize,
    pub n_exp: usize,
    pub seed: u64,
}

impl Default for SyntheticModelConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            n_id: 30,
            n_exp: 20,
            seed: 7,
        }
    }
}

/// Builds a random orthonormal basis over a procedural dome-shaped mean mesh.
///
/// The mean is a face-sized elliptic dome (~160x200x60 object units) sampled
/// on a regular grid; bases come from the QR factorization of a seeded
/// Gaussian matrix, so identity and expression columns are jointly
/// orthonormal.
pub fn synthetic_model<T: Real>(cfg: &SyntheticModelConfig) -> Result<ShapeBasis<T>> {
    let g = cfg.grid;
    assert!(g >= 4, "grid too small for landmark placement");
    let n = g * g;
    let dim = 3 * n;
    assert!(
        cfg.n_id + cfg.n_exp < dim,
        "basis modes must be fewer than 3N"
    );
    let mut mean = Vec::with_capacity(dim);
    for row in 0..g {
        for col in 0..g {
            let u = 2.0 * (col as f64) / ((g - 1) as f64) - 1.0;
            let v = 2.0 * (row as f64) / ((g - 1) as f64) - 1.0;
            let x = 80.0 * u;
            let y = 100.0 * v;
            let z = 60.0 * (1.0 - 0.7 * u * u - 0.45 * v * v);
            mean.extend_from_slice(&[x, y, z]);
        }
    }
    let mut topology = Vec::with_capacity(2 * (g - 1) * (g - 1));
    for row in 0..g - 1 {
        for col in 0..g - 1 {
            let a = (row * g + col) as u32;
            let b = (row * g + col + 1) as u32;
            let c = ((row + 1) * g + col) as u32;
            let d = ((row + 1) * g + col + 1) as u32;
            topology.push([a, b, c]);
            topology.push([b, d, c]);
        }
    }
    // 68 distinct landmark vertices spread evenly over the grid.
    assert!(n >= NUM_LANDMARKS, "grid too small for 68 landmarks");
    let landmark_indices: Vec<u32> = (0..NUM_LANDMARKS)
        .map(|k| ((k * n) / NUM_LANDMARKS) as u32)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let modes = cfg.n_id + cfg.n_exp;
    let gauss = DMatrix::<f64>::from_fn(dim, modes, |_, _| {
        // Box-Muller keeps us off rand_distr for one sampler.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let qr = gauss.qr();
    let q = qr.q();
    let u_id = q.columns(0, cfg.n_id).into_owned();
    let u_exp = q.columns(cfg.n_id, cfg.n_exp).into_owned();

    let sigma_id = DVector::from_fn(cfg.n_id, |j, _| 12.0 * 0.97f64.powi(j as i32));
    let sigma_exp = DVector::from_fn(cfg.n_exp, |j, _| 6.0 * 0.97f64.powi(j as i32));

    let cast_v = |v: &DVector<f64>| DVector::from_iterator(v.len(), v.iter().map(|&x| T::c(x)));
    let cast_m = |m: &DMatrix<f64>| {
        DMatrix::from_iterator(m.nrows(), m.ncols(), m.iter().map(|&x| T::c(x)))
    };
    ShapeBasis::new(
        cast_v(&DVector::from_vec(mean)),
        DVector::zeros(dim),
        cast_m(&u_id),
        cast_m(&u_exp),
        cast_v(&sigma_id),
        cast_v(&sigma_exp),
        topology,
        landmark_indices,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_basis() -> ShapeBasis<f64> {
        // N = 4 vertices, n_i = 2, n_e = 1, hand-built orthonormal columns.
        let dim = 12;
        let mean_id = DVector::from_fn(dim, |i, _| i as f64);
        let mean_exp = DVector::zeros(dim);
        let mut u_id = DMatrix::zeros(dim, 2);
        u_id[(0, 0)] = 1.0;
        u_id[(5, 1)] = 1.0;
        let mut u_exp = DMatrix::zeros(dim, 1);
        u_exp[(7, 0)] = 1.0;
        let mut lms = vec![0u32; NUM_LANDMARKS];
        for (i, l) in lms.iter_mut().enumerate() {
            *l = (i % 4) as u32;
        }
        ShapeBasis::new(
            mean_id,
            mean_exp,
            u_id,
            u_exp,
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![0.5]),
            vec![[0, 1, 2], [1, 2, 3]],
            lms,
        )
        .unwrap()
    }

    #[test]
    fn zero_params_give_mean_shape() {
        let basis = tiny_basis();
        let mesh = basis.synthesize(&ShapeParams::zeros(2, 1)).unwrap();
        for (k, v) in mesh.vertices.iter().enumerate() {
            for a in 0..3 {
                assert_eq!(v[a], (3 * k + a) as f64);
            }
        }
    }

    #[test]
    fn unit_identity_coefficient_adds_first_column() {
        let basis = tiny_basis();
        let mut params = ShapeParams::zeros(2, 1);
        params.identity[0] = 1.0;
        let mesh = basis.synthesize(&params).unwrap();
        assert_eq!(mesh.vertices[0].x, 0.0 + 1.0);
        assert_eq!(mesh.vertices[0].y, 1.0);
    }

    #[test]
    fn synthesize_is_affine_in_params() {
        let basis = synthetic_model::<f64>(&SyntheticModelConfig {
            grid: 10,
            n_id: 5,
            n_exp: 3,
            seed: 3,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rand_params = |rng: &mut ChaCha8Rng| ShapeParams {
            identity: DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0)),
            expression: DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0)),
        };
        let pa = rand_params(&mut rng);
        let pb = rand_params(&mut rng);
        let sum = ShapeParams {
            identity: &pa.identity + &pb.identity,
            expression: &pa.expression + &pb.expression,
        };
        let base = basis.synthesize(&ShapeParams::zeros(5, 3)).unwrap();
        let ma = basis.synthesize(&pa).unwrap();
        let mb = basis.synthesize(&pb).unwrap();
        let ms = basis.synthesize(&sum).unwrap();
        for k in 0..basis.num_vertices() {
            let lhs = ms.vertices[k] - base.vertices[k];
            let rhs = (ma.vertices[k] - base.vertices[k]) + (mb.vertices[k] - base.vertices[k]);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let basis = tiny_basis();
        assert!(matches!(
            basis.synthesize(&ShapeParams::zeros(3, 1)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn non_orthonormal_basis_is_rejected() {
        let dim = 12;
        let mut u_id = DMatrix::zeros(dim, 2);
        u_id[(0, 0)] = 2.0; // norm 2
        u_id[(5, 1)] = 1.0;
        let mut u_exp = DMatrix::zeros(dim, 1);
        u_exp[(7, 0)] = 1.0;
        let err = ShapeBasis::new(
            DVector::zeros(dim),
            DVector::zeros(dim),
            u_id,
            u_exp,
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
            vec![[0, 1, 2]],
            vec![0; NUM_LANDMARKS],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonOrthonormal(_)));
    }

    #[test]
    fn container_round_trip_is_byte_identical() {
        let basis = synthetic_model::<f64>(&SyntheticModelConfig {
            grid: 10,
            n_id: 4,
            n_exp: 2,
            seed: 1,
        })
        .unwrap();
        let bytes = save_model_bytes(&basis).unwrap();
        let reloaded = load_model_bytes::<f64>(&bytes).unwrap();
        let bytes2 = save_model_bytes(&reloaded).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let basis = tiny_basis();
        let mut bytes = save_model_bytes(&basis).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            load_model_bytes::<f64>(&bytes),
            Err(Error::CorruptContainer(_))
        ));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let basis = tiny_basis();
        let mut bytes = save_model_bytes(&basis).unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(
            load_model_bytes::<f64>(&bytes),
            Err(Error::CorruptContainer(_))
        ));
    }

    #[test]
    fn normalized_mean_face_attains_bounds() {
        let basis = synthetic_model::<f64>(&SyntheticModelConfig::default()).unwrap();
        let nmf = basis.normalized_mean_face().unwrap();
        for a in 0..3 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in &nmf.coords {
                lo = lo.min(v[a]);
                hi = hi.max(v[a]);
                assert!(v[a] >= 0.0 && v[a] <= 1.0);
            }
            assert_eq!(lo, 0.0);
            assert_eq!(hi, 1.0);
        }
    }

    #[test]
    fn normalized_mean_face_toy_values() {
        // 3 collinear-in-x vertices at x = {0, 1, 3}; y/z spread to avoid
        // degenerate axes.
        let mean = DVector::from_vec(vec![
            0.0, 0.0, 0.0, //
            1.0, 2.0, 5.0, //
            3.0, 4.0, 10.0,
        ]);
        let mut u_id = DMatrix::zeros(9, 1);
        u_id[(0, 0)] = 1.0;
        let mut u_exp = DMatrix::zeros(9, 1);
        u_exp[(1, 0)] = 1.0;
        let basis = ShapeBasis::new(
            mean,
            DVector::zeros(9),
            u_id,
            u_exp,
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![1.0]),
            vec![[0, 1, 2]],
            vec![0; NUM_LANDMARKS],
        )
        .unwrap();
        let nmf = basis.normalized_mean_face().unwrap();
        assert_eq!(nmf.coords[0].x, 0.0);
        assert_relative_eq!(nmf.coords[1].x, 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(nmf.coords[2].x, 1.0);
    }

    #[test]
    fn degenerate_axis_is_an_error() {
        // all z equal
        let mean = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0, 2.0, 1.0, 3.0, 4.0, 1.0]);
        let mut u_id = DMatrix::zeros(9, 1);
        u_id[(0, 0)] = 1.0;
        let mut u_exp = DMatrix::zeros(9, 1);
        u_exp[(1, 0)] = 1.0;
        let basis = ShapeBasis::new(
            mean,
            DVector::zeros(9),
            u_id,
            u_exp,
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![1.0]),
            vec![[0, 1, 2]],
            vec![0; NUM_LANDMARKS],
        )
        .unwrap();
        assert!(matches!(
            basis.normalized_mean_face(),
            Err(Error::Degenerate(_))
        ));
    }
}

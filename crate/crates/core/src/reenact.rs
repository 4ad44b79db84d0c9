//! Source-to-target parameter transfer: the target's identity coefficients
//! replace the source's, while expressions and cameras are carried over
//! unchanged. The swap happens purely in coefficient space.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fitter::FitResult;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalePolicy {
    /// Keep the source camera (including its scale) untouched.
    KeepSourceCamera,
    None,
}

#[derive(Debug, Clone)]
pub struct TransferSpec<T: Real> {
    pub source_fit: FitResult<T>,
    pub target_identity: DVector<T>,
    pub scale_policy: ScalePolicy,
}

/// Produces the transfer parameterization: target identity, source
/// expressions and source cameras. Energies are unset on the output.
pub fn transfer_params<T: Real>(spec: &TransferSpec<T>) -> Result<FitResult<T>> {
    if spec.target_identity.len() != spec.source_fit.identity.len() {
        return Err(Error::DimensionMismatch(format!(
            "target identity dim {} != source identity dim {}",
            spec.target_identity.len(),
            spec.source_fit.identity.len()
        )));
    }
    Ok(FitResult {
        identity: spec.target_identity.clone(),
        expressions: spec.source_fit.expressions.clone(),
        cameras: spec.source_fit.cameras.clone(),
        energy: None,
        energy_trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::SopCamera;
    use crate::fitter::{fit_video, FitOptions};
    use crate::model::{synthetic_model, ShapeParams, SyntheticModelConfig};
    use crate::raster::render_nmfc_sequence;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (crate::model::ShapeBasis<f64>, FitResult<f64>) {
        let basis = synthetic_model(&SyntheticModelConfig {
            grid: 10,
            n_id: 6,
            n_exp: 4,
            seed: 4,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let identity = DVector::from_fn(6, |j, _| rng.gen_range(-1.0..1.0) * basis.sigma_id()[j]);
        let frames = 4;
        let mut landmarks = Vec::new();
        for t in 0..frames {
            let expr = DVector::from_fn(4, |j, _| {
                0.5 * basis.sigma_exp()[j] * ((t as f64) * 0.8 + j as f64).sin()
            });
            let cam = SopCamera {
                rotation: Vector3::new(0.05 * t as f64, 0.1, 0.0),
                translation: Vector3::new(32.0, 32.0, 0.0),
                scale: 0.3,
            };
            let params = ShapeParams {
                identity: identity.clone(),
                expression: expr,
            };
            let verts = basis.landmark_positions(&params).unwrap();
            landmarks.push(crate::camera::Landmarks2D::new(cam.project(&verts), None).unwrap());
        }
        let fit = fit_video(&basis, &landmarks, &FitOptions::default()).unwrap();
        (basis, fit)
    }

    #[test]
    fn self_transfer_reproduces_source_params() {
        let (_, fit) = fixture();
        let spec = TransferSpec {
            source_fit: fit.clone(),
            target_identity: fit.identity.clone(),
            scale_policy: ScalePolicy::KeepSourceCamera,
        };
        let out = transfer_params(&spec).unwrap();
        assert_eq!(out.identity, fit.identity);
        assert_eq!(out.expressions, fit.expressions);
        assert_eq!(out.cameras, fit.cameras);
    }

    #[test]
    fn transfer_changes_identity_block_only() {
        let (_, fit) = fixture();
        let target = DVector::from_fn(6, |j, _| 0.1 * j as f64 - 0.2);
        let spec = TransferSpec {
            source_fit: fit.clone(),
            target_identity: target.clone(),
            scale_policy: ScalePolicy::KeepSourceCamera,
        };
        let out = transfer_params(&spec).unwrap();
        assert_eq!(out.identity, target);
        assert_eq!(out.expressions, fit.expressions);
        assert_eq!(out.cameras, fit.cameras);
        assert!(out.energy.is_none());
    }

    #[test]
    fn transfer_is_idempotent() {
        let (_, fit) = fixture();
        let target = DVector::from_element(6, 0.3);
        let once = transfer_params(&TransferSpec {
            source_fit: fit,
            target_identity: target.clone(),
            scale_policy: ScalePolicy::None,
        })
        .unwrap();
        let twice = transfer_params(&TransferSpec {
            source_fit: once.clone(),
            target_identity: target,
            scale_policy: ScalePolicy::None,
        })
        .unwrap();
        assert_eq!(once.identity, twice.identity);
        assert_eq!(once.expressions, twice.expressions);
        assert_eq!(once.cameras, twice.cameras);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (_, fit) = fixture();
        let spec = TransferSpec {
            source_fit: fit,
            target_identity: DVector::zeros(5),
            scale_policy: ScalePolicy::KeepSourceCamera,
        };
        assert!(matches!(
            transfer_params(&spec),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn zero_identity_transfer_matches_direct_render() {
        let (basis, fit) = fixture();
        let out = transfer_params(&TransferSpec {
            source_fit: fit.clone(),
            target_identity: DVector::zeros(6),
            scale_policy: ScalePolicy::KeepSourceCamera,
        })
        .unwrap();
        let rendered = render_nmfc_sequence(&basis, &out, 48, 48).unwrap();
        // Direct pipeline with zero identity, source expressions/cameras.
        let direct_fit = FitResult {
            identity: DVector::zeros(6),
            expressions: fit.expressions.clone(),
            cameras: fit.cameras.clone(),
            energy: None,
            energy_trace: vec![],
        };
        let direct = render_nmfc_sequence(&basis, &direct_fit, 48, 48).unwrap();
        assert_eq!(rendered, direct);
    }
}

use nalgebra::{DMatrix, DVector};

use super::{KoopmanError, KoopmanModel};
use crate::diffcore::Tensor;
use crate::plant::lqr_gain;

/// Latent state feedback `u = u_ref - K (z - z_ref)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPolicy {
    /// `[q, d]`
    pub gain: Tensor,
    pub z_ref: Vec<f64>,
    pub u_ref: Vec<f64>,
}

/// Central-difference Jacobian of the decoder at `z`, shaped `[n, d]`.
pub fn decoder_jacobian(m: &KoopmanModel, z: &[f64]) -> Result<DMatrix<f64>, KoopmanError> {
    let d = z.len();
    let n = m.spec().state_dim;
    let mut rows = Vec::with_capacity(2 * d);
    for j in 0..d {
        let h = 1e-5 * (1.0 + z[j].abs());
        let mut up = z.to_vec();
        up[j] += h;
        let mut dn = z.to_vec();
        dn[j] -= h;
        rows.push(up);
        rows.push(dn);
    }
    let out = m.decode_rows(&Tensor::from_rows(&rows)?)?;
    let mut jac = DMatrix::zeros(n, d);
    for j in 0..d {
        let h = 1e-5 * (1.0 + z[j].abs());
        for i in 0..n {
            jac[(i, j)] = (out.get(2 * j, i) - out.get(2 * j + 1, i)) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

impl LatentPolicy {
    /// LQR on the latent model towards `enc(target)`.
    ///
    /// State cost is the physical weight pulled back through the decoder,
    /// `J^T diag(q_state) J + eps I`, so the latent controller trades off the
    /// same quantities as a physical one. The feed-forward is
    /// `target_input` when the input that holds the plant at `target` is
    /// known, otherwise the least squares force that makes `z_ref` a fixed
    /// point of the model.
    pub fn design(
        m: &KoopmanModel,
        use_lsk: bool,
        target: &[f64],
        target_input: Option<&[f64]>,
        q_state: &[f64],
        r: f64,
    ) -> Result<Self, KoopmanError> {
        let n = m.spec().state_dim;
        let q_dim = m.spec().control_dim;
        if target.len() != n || q_state.len() != n {
            return Err(KoopmanError::Control(format!("target and weights need {n} entries")));
        }
        if !(r > 0.0) || q_state.iter().any(|w| !(*w >= 0.0)) {
            return Err(KoopmanError::Control("weights must satisfy Q >= 0, R > 0".into()));
        }
        let (a, b) = m.transition(use_lsk)?;
        let (a, b) = (to_dmatrix(&a), to_dmatrix(&b));
        let d = a.nrows();
        let z_ref = m.encode(target)?;
        let jac = decoder_jacobian(m, &z_ref)?;
        let qx = DMatrix::from_diagonal(&DVector::from_row_slice(q_state));
        let mut qz = jac.transpose() * qx * &jac;
        let eps = 1e-6 * (1.0 + qz.diagonal().amax());
        for i in 0..d {
            qz[(i, i)] += eps;
        }
        let rm = DMatrix::identity(q_dim, q_dim) * r;
        let k = lqr_gain(&a, &b, &qz, &rm).map_err(|e| KoopmanError::Control(e.to_string()))?;
        let u_ref = match target_input {
            Some(u) if u.len() == q_dim => DVector::from_column_slice(u),
            Some(u) => {
                return Err(KoopmanError::Control(format!("target input needs {q_dim} entries, got {}", u.len())));
            }
            None => {
                let zr = DVector::from_column_slice(&z_ref);
                let rhs = (DMatrix::identity(d, d) - &a) * &zr;
                b.clone()
                    .svd(true, true)
                    .solve(&rhs, 1e-12)
                    .map_err(|e| KoopmanError::Control(e.to_string()))?
            }
        };
        if !k.iter().chain(u_ref.iter()).all(|v| v.is_finite()) {
            return Err(KoopmanError::Control("non-finite gain".into()));
        }
        Ok(Self {
            gain: Tensor::new(q_dim, d, k.transpose().as_slice().to_vec())?,
            z_ref,
            u_ref: u_ref.as_slice().to_vec(),
        })
    }

    pub fn command(&self, z: &[f64]) -> Vec<f64> {
        let (q, d) = (self.gain.rows(), self.gain.cols());
        (0..q)
            .map(|i| {
                let fb: f64 = (0..d).map(|j| self.gain.get(i, j) * (z[j] - self.z_ref[j])).sum();
                self.u_ref[i] - fb
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::{Activation, ModelSpec, Normalization, DEC_B1, DEC_B2, DEC_W1, DEC_W2, DSK_A, DSK_B, ENC_B1, ENC_B2, ENC_W1, ENC_W2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Encoder and decoder are the identity, so the latent model is the
    /// physical one.
    fn identity_model(a: &DMatrix<f64>, b: &DMatrix<f64>) -> KoopmanModel {
        let spec = ModelSpec {
            hidden: 4,
            hidden_activation: Activation::Linear,
            ..ModelSpec::cart_pole(4)
        };
        let mut m = KoopmanModel::new(spec, &Normalization::identity(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = m.params_mut();
        for w in [ENC_W1, ENC_W2, DEC_W1, DEC_W2] {
            p.set_value(w, Tensor::identity(4)).unwrap();
        }
        for bias in [ENC_B1, ENC_B2, DEC_B1, DEC_B2] {
            p.set_value(bias, Tensor::zeros(1, 4)).unwrap();
        }
        p.set_value(DSK_A, Tensor::new(4, 4, a.transpose().as_slice().to_vec()).unwrap()).unwrap();
        p.set_value(DSK_B, Tensor::new(4, 1, b.as_slice().to_vec()).unwrap()).unwrap();
        m
    }

    #[test]
    fn command_is_affine_feedback() {
        let pol = LatentPolicy {
            gain: Tensor::new(1, 2, vec![2.0, -1.0]).unwrap(),
            z_ref: vec![1.0, 1.0],
            u_ref: vec![0.5],
        };
        assert_eq!(pol.command(&[1.0, 1.0]), vec![0.5]);
        assert_eq!(pol.command(&[2.0, 0.0]), vec![0.5 - 2.0 - 1.0]);
    }

    #[test]
    fn identity_decoder_has_identity_jacobian() {
        let m = identity_model(&DMatrix::identity(4, 4), &DMatrix::zeros(4, 1));
        let jac = decoder_jacobian(&m, &[0.3, -2.0, 1.0, 0.0]).unwrap();
        assert!((jac - DMatrix::<f64>::identity(4, 4)).amax() < 1e-9);
    }

    #[test]
    fn designed_policy_stabilizes_the_latent_model() {
        let p = crate::plant::PlantParams::new(1, 1.0, 5.0, 0.2);
        let (a, b) = crate::plant::discretize_upright(&p, p.step);
        let m = identity_model(&a, &b);
        let target = [2.0, 0.0, 0.0, 0.0];
        let pol = LatentPolicy::design(&m, false, &target, None, &[10.0, 1.0, 100.0, 1.0], 0.1).unwrap();
        let k = DMatrix::from_row_slice(1, 4, pol.gain.data());
        let rho = (&a - &b * &k).complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
        assert!(rho < 1.0, "closed-loop spectral radius {rho}");
        // The cart position is a pure integrator, so holding it needs no force.
        assert!(pol.u_ref[0].abs() < 1e-9, "{:?}", pol.u_ref);
        assert_eq!(pol.z_ref, target.to_vec());
    }

    #[test]
    fn bad_weights_are_rejected() {
        let m = identity_model(&DMatrix::identity(4, 4), &DMatrix::zeros(4, 1));
        assert!(LatentPolicy::design(&m, false, &[0.0; 4], None, &[1.0; 4], 0.0).is_err());
        assert!(LatentPolicy::design(&m, false, &[0.0; 4], None, &[1.0, -1.0, 1.0, 1.0], 1.0).is_err());
        assert!(LatentPolicy::design(&m, false, &[0.0; 3], None, &[1.0; 4], 1.0).is_err());
    }
}

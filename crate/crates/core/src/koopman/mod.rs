//! Koopman autoencoder with a shared linear latent model and per-plant
//! adapters.
//!
//! The encoder `Psi` maps a state to a latent vector `z`; the latent state
//! advances linearly as `z' = A z + B u`. The shared ("DSK") pair is
//! `(D_A, D_B)`. A plant that follows its own rule adds an adapter pair
//! `(L_A, L_B)` and uses `(L_A D_A, L_B D_B)` instead. The decoder maps
//! latents back to states.
//!
//! Inside graphs every batch is row-major: one sample per row, so the
//! transition is applied as `Z A^T + U B^T`.

mod batch;
mod control;
mod loss;
mod train;

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, DiffError, Graph, Metadata, ParamStore, Tensor, Var};

pub use batch::Batch;
pub use control::{decoder_jacobian, LatentPolicy};
pub use loss::{
    loss_linear, loss_logic, loss_pred, loss_recon, regularizer, total_loss, total_loss_dsk,
    total_loss_lsk, LogicTerm, LossBreakdown, LossWeights, TraceSource,
};
pub use train::{train_dsk, train_lsk, EpochLog, TrainConfig, TrainLog};

#[derive(Debug, thiserror::Error)]
pub enum KoopmanError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("adapter matrices requested but the model has none")]
    MissingLsk,
    #[error("invalid batch: {0}")]
    Data(String),
    #[error("no usable samples for {0}")]
    EmptyBatch(&'static str),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("latent controller: {0}")]
    Control(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Stl(#[from] crate::stl::StlError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Activation::Linear),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    fn apply(self, g: &mut Graph, v: Var) -> Var {
        match self {
            Activation::Linear => v,
            Activation::Relu => g.relu(v),
            Activation::Sigmoid => g.sigmoid(v),
        }
    }
}

/// Network and latent sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl ModelSpec {
    /// Cart-pole sized model: 4 states, 1 force, 32 ReLU hidden units.
    pub fn cart_pole(latent_dim: usize) -> Self {
        Self {
            state_dim: 4,
            control_dim: 1,
            latent_dim,
            hidden: 32,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Linear,
        }
    }

    pub fn validate(&self) -> Result<(), KoopmanError> {
        for (name, v) in [
            ("state_dim", self.state_dim),
            ("control_dim", self.control_dim),
            ("latent_dim", self.latent_dim),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(KoopmanError::Spec(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Fixed affine map applied to states before the encoder and undone after
/// the decoder: `x_norm = W (x - offset)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub offset: Vec<f64>,
    /// `W`, `[n, n]`, invertible.
    pub transform: Tensor,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Self {
            offset: vec![0.0; n],
            transform: Tensor::identity(n),
        }
    }

    /// `x_norm = (x - offset) / scale` per dimension.
    pub fn diagonal(offset: Vec<f64>, scale: &[f64]) -> Result<Self, KoopmanError> {
        let n = offset.len();
        if scale.len() != n || scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(KoopmanError::Spec(format!("normalization needs {n} positive scales")));
        }
        let mut transform = Tensor::zeros(n, n);
        for (i, s) in scale.iter().enumerate() {
            transform.set(i, i, 1.0 / s);
        }
        let norm = Self { offset, transform };
        norm.validate(n)?;
        Ok(norm)
    }

    fn moments(rows: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>), KoopmanError> {
        let Some(first) = rows.first() else {
            return Err(KoopmanError::Data("cannot fit a normalization to no samples".into()));
        };
        let n = first.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(KoopmanError::Data("ragged rows".into()));
        }
        let count = rows.len() as f64;
        let mean: Vec<f64> = (0..n).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / count).collect();
        let cov = DMatrix::from_fn(n, n, |i, j| {
            rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / count
        });
        Ok((mean, cov))
    }

    /// Per-dimension standardization. Dimensions that barely move keep a
    /// scale of at least `floor`.
    pub fn fit_diagonal(rows: &[Vec<f64>], floor: f64) -> Result<Self, KoopmanError> {
        let (mean, cov) = Self::moments(rows)?;
        let scale: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt().max(floor)).collect();
        Self::diagonal(mean, &scale)
    }

    /// Symmetric whitening `W = (C + floor^2 I)^(-1/2)`, which maps the
    /// sample covariance `C` to (nearly) the identity whatever the
    /// correlations between dimensions.
    pub fn fit_whitening(rows: &[Vec<f64>], floor: f64) -> Result<Self, KoopmanError> {
        let (mean, cov) = Self::moments(rows)?;
        let n = mean.len();
        let eig = (cov + DMatrix::identity(n, n) * floor * floor).symmetric_eigen();
        let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.max(floor * floor).sqrt());
        let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
        let norm = Self {
            offset: mean,
            transform: Tensor::new(n, n, w.transpose().as_slice().to_vec())?,
        };
        norm.validate(n)?;
        Ok(norm)
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.transform.rows(), self.transform.cols(), self.transform.data())
    }

    /// `W^-1`.
    pub fn inverse_transform(&self) -> Result<Tensor, KoopmanError> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| KoopmanError::Spec("normalization transform is singular".into()))?;
        Ok(Tensor::new(inv.nrows(), inv.ncols(), inv.transpose().as_slice().to_vec())?)
    }

    fn validate(&self, n: usize) -> Result<(), KoopmanError> {
        if self.offset.len() != n || self.transform.shape() != [n, n] {
            return Err(KoopmanError::Spec(format!("normalization must be {n}-dimensional")));
        }
        if !self.transform.is_finite() || self.offset.iter().any(|o| !o.is_finite()) {
            return Err(KoopmanError::Spec("normalization must be finite".into()));
        }
        let inv = self.inverse_transform()?;
        if !inv.is_finite() {
            return Err(KoopmanError::Spec("normalization transform is singular".into()));
        }
        Ok(())
    }
}

pub const ENC_W1: &str = "enc.w1";
pub const ENC_B1: &str = "enc.b1";
pub const ENC_W2: &str = "enc.w2";
pub const ENC_B2: &str = "enc.b2";
pub const DEC_W1: &str = "dec.w1";
pub const DEC_B1: &str = "dec.b1";
pub const DEC_W2: &str = "dec.w2";
pub const DEC_B2: &str = "dec.b2";
pub const DSK_A: &str = "dsk.a";
pub const DSK_B: &str = "dsk.b";
pub const LSK_A: &str = "lsk.a";
pub const LSK_B: &str = "lsk.b";
pub const NORM_OFFSET: &str = "norm.offset";
pub const NORM_TRANSFORM: &str = "norm.transform";

pub const NETWORK_PARAMS: [&str; 8] = [ENC_W1, ENC_B1, ENC_W2, ENC_B2, DEC_W1, DEC_B1, DEC_W2, DEC_B2];

#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanModel {
    spec: ModelSpec,
    params: ParamStore,
}

fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}

impl KoopmanModel {
    /// Fresh model: uniform fan-in weights, `D_A = I + N(0, 1e-3)` and
    /// `D_B ~ N(0, 1e-3)`.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, norm: &Normalization, rng: &mut R) -> Result<Self, KoopmanError> {
        spec.validate()?;
        norm.validate(spec.state_dim)?;
        let (n, q, d, h) = (spec.state_dim, spec.control_dim, spec.latent_dim, spec.hidden);
        let mut params = ParamStore::new();
        params.insert(ENC_W1, fan_in_uniform(n, h, n, rng), true);
        params.insert(ENC_B1, fan_in_uniform(1, h, n, rng), true);
        params.insert(ENC_W2, fan_in_uniform(h, d, h, rng), true);
        params.insert(ENC_B2, fan_in_uniform(1, d, h, rng), true);
        params.insert(DEC_W1, fan_in_uniform(d, h, d, rng), true);
        params.insert(DEC_B1, fan_in_uniform(1, h, d, rng), true);
        params.insert(DEC_W2, fan_in_uniform(h, n, h, rng), true);
        params.insert(DEC_B2, fan_in_uniform(1, n, h, rng), true);
        let small = Normal::new(0.0, 1e-3).expect("positive std");
        let mut a = Tensor::identity(d);
        for v in a.data_mut() {
            *v += small.sample(rng);
        }
        let b = Tensor::new(d, q, (0..d * q).map(|_| small.sample(rng)).collect())?;
        params.insert(DSK_A, a, true);
        params.insert(DSK_B, b, true);
        params.insert(NORM_OFFSET, Tensor::row(norm.offset.clone()), false);
        params.insert(NORM_TRANSFORM, norm.transform.clone(), false);
        Ok(Self { spec, params })
    }

    /// Assembles a model from an existing parameter set, checking every shape.
    pub fn from_params(spec: ModelSpec, params: ParamStore) -> Result<Self, KoopmanError> {
        spec.validate()?;
        let (n, q, d, h) = (spec.state_dim, spec.control_dim, spec.latent_dim, spec.hidden);
        let mut expected = vec![
            (ENC_W1, [n, h]),
            (ENC_B1, [1, h]),
            (ENC_W2, [h, d]),
            (ENC_B2, [1, d]),
            (DEC_W1, [d, h]),
            (DEC_B1, [1, h]),
            (DEC_W2, [h, n]),
            (DEC_B2, [1, n]),
            (DSK_A, [d, d]),
            (DSK_B, [d, q]),
            (NORM_OFFSET, [1, n]),
            (NORM_TRANSFORM, [n, n]),
        ];
        if params.contains(LSK_A) || params.contains(LSK_B) {
            expected.push((LSK_A, [d, d]));
            expected.push((LSK_B, [d, d]));
        }
        for (name, shape) in &expected {
            match params.value(name) {
                Some(t) if t.shape() == *shape => {}
                Some(t) => {
                    return Err(KoopmanError::Spec(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(KoopmanError::Spec(format!("missing parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(KoopmanError::Spec("unexpected extra parameters".into()));
        }
        let model = Self { spec, params };
        model.normalization().validate(n)?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            offset: self.params.value(NORM_OFFSET).expect("present").data().to_vec(),
            transform: self.params.value(NORM_TRANSFORM).expect("present").clone(),
        }
    }

    pub fn set_normalization(&mut self, norm: &Normalization) -> Result<(), KoopmanError> {
        norm.validate(self.spec.state_dim)?;
        self.params.set_value(NORM_OFFSET, Tensor::row(norm.offset.clone()))?;
        self.params.set_value(NORM_TRANSFORM, norm.transform.clone())?;
        Ok(())
    }

    pub fn has_lsk(&self) -> bool {
        self.params.contains(LSK_A)
    }

    /// Adds trainable adapters initialized to identity and freezes `D_A`, `D_B`.
    pub fn attach_lsk(&mut self) {
        let d = self.spec.latent_dim;
        self.params.insert(LSK_A, Tensor::identity(d), true);
        self.params.insert(LSK_B, Tensor::identity(d), true);
        self.params.set_trainable(DSK_A, false).expect("present");
        self.params.set_trainable(DSK_B, false).expect("present");
    }

    pub fn detach_lsk(&mut self) {
        self.params.remove(LSK_A);
        self.params.remove(LSK_B);
    }

    pub fn dsk(&self) -> (&Tensor, &Tensor) {
        (
            self.params.value(DSK_A).expect("present"),
            self.params.value(DSK_B).expect("present"),
        )
    }

    pub fn lsk(&self) -> Option<(&Tensor, &Tensor)> {
        Some((self.params.value(LSK_A)?, self.params.value(LSK_B)?))
    }

    /// Effective `(A, B)` of the latent model.
    pub fn transition(&self, use_lsk: bool) -> Result<(Tensor, Tensor), KoopmanError> {
        let (da, db) = self.dsk();
        if !use_lsk {
            return Ok((da.clone(), db.clone()));
        }
        let (la, lb) = self.lsk().ok_or(KoopmanError::MissingLsk)?;
        Ok((la.matmul(da)?, lb.matmul(db)?))
    }

    fn normalize_rows(&self, x: &Tensor) -> Result<Tensor, KoopmanError> {
        let n = self.spec.state_dim;
        if x.cols() != n {
            return Err(KoopmanError::Data(format!("expected {n} state columns, got {}", x.cols())));
        }
        let norm = self.normalization();
        let mut centered = x.clone();
        for r in 0..centered.rows() {
            for c in 0..n {
                centered.set(r, c, x.get(r, c) - norm.offset[c]);
            }
        }
        Ok(centered.matmul(&norm.transform.transpose())?)
    }

    fn mlp(
        &self,
        g: &mut Graph,
        input: Var,
        names: [&str; 4],
        out_act: Activation,
    ) -> Result<Var, KoopmanError> {
        let w1 = g.param(&self.params, names[0])?;
        let b1 = g.param(&self.params, names[1])?;
        let w2 = g.param(&self.params, names[2])?;
        let b2 = g.param(&self.params, names[3])?;
        let h = g.matmul(input, w1)?;
        let h = g.add_row(h, b1)?;
        let h = self.spec.hidden_activation.apply(g, h);
        let o = g.matmul(h, w2)?;
        let o = g.add_row(o, b2)?;
        Ok(out_act.apply(g, o))
    }

    /// Encodes the rows of `x` (physical units) into an `[N, d]` node.
    pub fn encode_var(&self, g: &mut Graph, x: &Tensor) -> Result<Var, KoopmanError> {
        let xn = g.constant(self.normalize_rows(x)?);
        self.mlp(g, xn, [ENC_W1, ENC_B1, ENC_W2, ENC_B2], self.spec.output_activation)
    }

    /// Decodes `[N, d]` latents into `[N, n]` states in physical units.
    pub fn decode_var(&self, g: &mut Graph, z: Var) -> Result<Var, KoopmanError> {
        let out = self.mlp(g, z, [DEC_W1, DEC_B1, DEC_W2, DEC_B2], Activation::Linear)?;
        let norm = self.normalization();
        if norm == Normalization::identity(self.spec.state_dim) {
            return Ok(out);
        }
        let inv_t = g.constant(norm.inverse_transform()?.transpose());
        let offset = g.constant(Tensor::row(norm.offset));
        let restored = g.matmul(out, inv_t)?;
        Ok(g.add_row(restored, offset)?)
    }

    /// `(A^T, B^T)` as graph nodes, composed with the adapters when requested.
    pub fn transition_vars(&self, g: &mut Graph, use_lsk: bool) -> Result<(Var, Var), KoopmanError> {
        let da = g.param(&self.params, DSK_A)?;
        let db = g.param(&self.params, DSK_B)?;
        let (a, b) = if use_lsk {
            if !self.has_lsk() {
                return Err(KoopmanError::MissingLsk);
            }
            let la = g.param(&self.params, LSK_A)?;
            let lb = g.param(&self.params, LSK_B)?;
            (g.matmul(la, da)?, g.matmul(lb, db)?)
        } else {
            (da, db)
        };
        Ok((g.transpose(a), g.transpose(b)))
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, KoopmanError> {
        Ok(self.encode_rows(&Tensor::row(x.to_vec()))?.into_data())
    }

    pub fn encode_rows(&self, x: &Tensor) -> Result<Tensor, KoopmanError> {
        let mut g = Graph::new();
        let z = self.encode_var(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, KoopmanError> {
        Ok(self.decode_rows(&Tensor::row(z.to_vec()))?.into_data())
    }

    pub fn decode_rows(&self, z: &Tensor) -> Result<Tensor, KoopmanError> {
        if z.cols() != self.spec.latent_dim {
            return Err(KoopmanError::Data(format!(
                "expected {} latent columns, got {}",
                self.spec.latent_dim,
                z.cols()
            )));
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let x = self.decode_var(&mut g, zv)?;
        Ok(g.value(x).clone())
    }

    /// One latent step: `D_A z + D_B u`, or `L_A (D_A z) + L_B (D_B u)`
    /// with adapters.
    pub fn predict_latent(&self, z: &[f64], u: &[f64], use_lsk: bool) -> Result<Vec<f64>, KoopmanError> {
        let (d, q) = (self.spec.latent_dim, self.spec.control_dim);
        if z.len() != d || u.len() != q {
            return Err(KoopmanError::Data(format!(
                "predict_latent expects z of length {d} and u of length {q}"
            )));
        }
        let (da, db) = self.dsk();
        let zc = Tensor::column(z.to_vec());
        let uc = Tensor::column(u.to_vec());
        let (az, bu) = if use_lsk {
            let (la, lb) = self.lsk().ok_or(KoopmanError::MissingLsk)?;
            (la.matmul(&da.matmul(&zc)?)?, lb.matmul(&db.matmul(&uc)?)?)
        } else {
            (da.matmul(&zc)?, db.matmul(&uc)?)
        };
        Ok(az.data().iter().zip(bu.data()).map(|(a, b)| a + b).collect())
    }

    /// Recursive latent rollout from `z0` under `controls`, returning the
    /// latents `z_1..z_l` and their decoded states.
    #[allow(clippy::type_complexity)]
    pub fn rollout(
        &self,
        z0: &[f64],
        controls: &[Vec<f64>],
        use_lsk: bool,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), KoopmanError> {
        if controls.is_empty() {
            return Err(KoopmanError::Data("rollout needs at least one control".into()));
        }
        let mut z = z0.to_vec();
        let mut latents = Vec::with_capacity(controls.len());
        for u in controls {
            z = self.predict_latent(&z, u, use_lsk)?;
            latents.push(z.clone());
        }
        let rows = Tensor::from_rows(&latents)?;
        let states = self.decode_rows(&rows)?;
        let states = (0..states.rows()).map(|r| states.row_slice(r).to_vec()).collect();
        Ok((latents, states))
    }

    /// One-step state prediction `Psi^-1(A Psi(x) + B u)`.
    pub fn predict_state(&self, x: &[f64], u: &[f64], use_lsk: bool) -> Result<Vec<f64>, KoopmanError> {
        let z = self.encode(x)?;
        let next = self.predict_latent(&z, u, use_lsk)?;
        self.decode(&next)
    }

    pub fn metadata(&self, rule: Option<&str>, seed: u64) -> Metadata {
        let mut m = Metadata::new();
        m.insert("d".into(), self.spec.latent_dim.to_string());
        m.insert("q".into(), self.spec.control_dim.to_string());
        m.insert("n".into(), self.spec.state_dim.to_string());
        m.insert("hidden".into(), self.spec.hidden.to_string());
        m.insert("hidden_activation".into(), self.spec.hidden_activation.name().into());
        m.insert("activation".into(), self.spec.output_activation.name().into());
        m.insert("rule".into(), rule.unwrap_or("NULL").to_string());
        m.insert("seed".into(), seed.to_string());
        m
    }

    pub fn save<W: Write>(&self, w: W, rule: Option<&str>, seed: u64) -> Result<(), KoopmanError> {
        diffcore::write_checkpoint(w, &self.params, &self.metadata(rule, seed))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`KoopmanModel::save`], returning the
    /// model and its metadata header.
    pub fn load<R: Read>(r: R) -> Result<(Self, Metadata), KoopmanError> {
        let (params, meta) = diffcore::read_checkpoint(r)?;
        let field = |key: &str| -> Result<&String, KoopmanError> {
            meta.get(key)
                .ok_or_else(|| KoopmanError::Spec(format!("checkpoint metadata lacks {key}")))
        };
        let num = |key: &str| -> Result<usize, KoopmanError> {
            field(key)?
                .parse()
                .map_err(|_| KoopmanError::Spec(format!("checkpoint metadata {key} is not an integer")))
        };
        let act = |key: &str| -> Result<Activation, KoopmanError> {
            let s = field(key)?;
            Activation::from_name(s).ok_or_else(|| KoopmanError::Spec(format!("unknown activation {s:?}")))
        };
        let spec = ModelSpec {
            state_dim: num("n")?,
            control_dim: num("q")?,
            latent_dim: num("d")?,
            hidden: num("hidden")?,
            hidden_activation: act("hidden_activation")?,
            output_activation: act("activation")?,
        };
        Ok((Self::from_params(spec, params)?, meta))
    }
}

//! Cart-pole plants: dynamics, RK4 integration, LQR data-generation controller
//! and the stabilization score.
//!
//! The pole is a point mass `m_p` on a massless rod of length `l`, hinged on a
//! cart of mass `m_c` that moves without friction. `theta` is measured from the
//! upright position, positive when the tip leans towards `+x`, and the input
//! is a horizontal force on the cart:
//!
//! ```text
//! xdd     = (u + m_p sin(th) (l thd^2 - g cos(th))) / (m_c + m_p sin^2(th))
//! thetadd = (g sin(th) - xdd cos(th)) / l
//! ```
//!
//! Both accelerations are affine in `u` for a fixed state.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, SMatrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// States with any component beyond this magnitude end a rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
pub const SCORE_POSITION_TOL: f64 = 0.2;
pub const SCORE_ANGLE_TOL: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum PlantError {
    #[error("invalid plant parameter: {0}")]
    InvalidParams(String),
    #[error("Riccati iteration did not converge in {0} iterations")]
    RiccatiDiverged(usize),
    #[error("singular matrix in Riccati update")]
    Singular,
    #[error("trajectory csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    pub id: usize,
    /// kg
    pub pole_mass: f64,
    /// kg
    pub cart_mass: f64,
    /// m
    pub pole_length: f64,
    /// m/s^2
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    /// Per-dimension process noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise_std: [f64; 4],
    /// RK4 step in seconds.
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_gravity() -> f64 {
    9.81
}

fn default_noise() -> [f64; 4] {
    [1e-3; 4]
}

fn default_step() -> f64 {
    0.1
}

impl PlantParams {
    pub fn new(id: usize, pole_mass: f64, cart_mass: f64, pole_length: f64) -> Self {
        Self {
            id,
            pole_mass,
            cart_mass,
            pole_length,
            gravity: default_gravity(),
            noise_std: default_noise(),
            step: default_step(),
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise_std = [0.0; 4];
        self
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let positive = [
            ("pole_mass", self.pole_mass),
            ("cart_mass", self.cart_mass),
            ("pole_length", self.pole_length),
            ("step", self.step),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !self.gravity.is_finite() {
            return Err(PlantError::InvalidParams("gravity must be finite".into()));
        }
        if self.noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(PlantError::InvalidParams("noise_std entries must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.cart_mass + self.pole_mass
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlantState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl PlantState {
    pub const DIM: usize = 4;

    pub fn new(x: f64, x_dot: f64, theta: f64, theta_dot: f64) -> Self {
        Self {
            x,
            x_dot,
            theta,
            theta_dot,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn diverged(&self) -> bool {
        self.to_array().iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT))
    }
}

/// Time derivative `(xd, xdd, thd, thdd)` of the cart-pole under force `u`.
pub fn derivatives(s: &PlantState, u: f64, p: &PlantParams) -> [f64; 4] {
    let (sin, cos) = s.theta.sin_cos();
    let mp = p.pole_mass;
    let l = p.pole_length;
    let xdd = (u + mp * sin * (l * s.theta_dot * s.theta_dot - p.gravity * cos))
        / (p.cart_mass + mp * sin * sin);
    let thdd = (p.gravity * sin - xdd * cos) / l;
    [s.x_dot, xdd, s.theta_dot, thdd]
}

/// One classical fourth-order Runge-Kutta step of `y' = f(y)`.
pub fn rk4<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], y: &[f64; N], h: f64) -> [f64; N] {
    let axpy = |a: &[f64; N], s: f64, b: &[f64; N]| -> [f64; N] {
        let mut out = *a;
        for i in 0..N {
            out[i] += s * b[i];
        }
        out
    };
    let k1 = f(y);
    let k2 = f(&axpy(y, h / 2.0, &k1));
    let k3 = f(&axpy(y, h / 2.0, &k2));
    let k4 = f(&axpy(y, h, &k3));
    let mut out = *y;
    for i in 0..N {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// RK4 step with zero-order-hold force, without process noise.
pub fn rk4_step_noiseless(s: &PlantState, u: f64, p: &PlantParams) -> PlantState {
    let f = |y: &[f64; 4]| derivatives(&PlantState::from_array(*y), u, p);
    PlantState::from_array(rk4(f, &s.to_array(), p.step))
}

/// RK4 step followed by additive Gaussian process noise.
pub fn rk4_step<R: Rng + ?Sized>(s: &PlantState, u: f64, p: &PlantParams, rng: &mut R) -> PlantState {
    let mut next = rk4_step_noiseless(s, u, p).to_array();
    for (v, sigma) in next.iter_mut().zip(p.noise_std) {
        if sigma > 0.0 {
            let n: f64 = StandardNormal.sample(rng);
            *v += sigma * n;
        }
    }
    PlantState::from_array(next)
}

/// Total mechanical energy with the potential reference at the hinge height.
pub fn energy(s: &PlantState, p: &PlantParams) -> f64 {
    let (mc, mp, l) = (p.cart_mass, p.pole_mass, p.pole_length);
    0.5 * (mc + mp) * s.x_dot * s.x_dot
        + mp * l * s.x_dot * s.theta_dot * s.theta.cos()
        + 0.5 * mp * l * l * s.theta_dot * s.theta_dot
        + mp * p.gravity * l * s.theta.cos()
}

/// Continuous-time linearization `(A, B)` about the upright equilibrium.
pub fn linearize_upright(p: &PlantParams) -> (SMatrix<f64, 4, 4>, SMatrix<f64, 4, 1>) {
    let (mc, mp, l, g) = (p.cart_mass, p.pole_mass, p.pole_length, p.gravity);
    #[rustfmt::skip]
    let a = SMatrix::<f64, 4, 4>::new(
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, -mp * g / mc, 0.0,
        0.0, 0.0, 0.0, 1.0,
        0.0, 0.0, (mc + mp) * g / (mc * l), 0.0,
    );
    let b = SMatrix::<f64, 4, 1>::new(0.0, 1.0 / mc, 0.0, -1.0 / (mc * l));
    (a, b)
}

/// Zero-order-hold discretization of the upright linearization at period `tau`.
pub fn discretize_upright(p: &PlantParams, tau: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (a, b) = linearize_upright(p);
    let mut aug = SMatrix::<f64, 5, 5>::zeros();
    aug.fixed_view_mut::<4, 4>(0, 0).copy_from(&(a * tau));
    aug.fixed_view_mut::<4, 1>(0, 4).copy_from(&(b * tau));
    let e = aug.exp();
    let ad = DMatrix::from_fn(4, 4, |i, j| e[(i, j)]);
    let bd = DMatrix::from_fn(4, 1, |i, _| e[(i, 4)]);
    (ad, bd)
}

pub const RICCATI_MAX_ITERS: usize = 100_000;
pub const RICCATI_TOL: f64 = 1e-9;

/// Discrete-time LQR gain `K` (so that `u = -K x`) by Riccati fixed-point iteration.
///
/// Starts from `P = Q` and stops once successive iterates differ by less than
/// `1e-9` in max norm, measured relative to `max(1, |P|_max)`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, PlantError> {
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITERS {
        let pa = &p * a;
        let s = r + &bt * &p * b;
        let s_inv = s.try_inverse().ok_or(PlantError::Singular)?;
        let next = q + &at * &pa - &at * &p * b * &s_inv * &bt * &pa;
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(PlantError::RiccatiDiverged(RICCATI_MAX_ITERS));
        }
        let delta = (&next - &p).amax();
        let scale = next.amax().max(1.0);
        p = next;
        if delta < RICCATI_TOL * scale {
            let s_inv = (r + &bt * &p * b).try_inverse().ok_or(PlantError::Singular)?;
            return Ok(s_inv * &bt * &p * a);
        }
    }
    Err(PlantError::RiccatiDiverged(RICCATI_MAX_ITERS))
}

/// Produces a force from the sampled state at step `k`.
pub trait Controller {
    fn command(&mut self, k: usize, state: &PlantState) -> f64;
}

pub struct ZeroController;

impl Controller for ZeroController {
    fn command(&mut self, _k: usize, _state: &PlantState) -> f64 {
        0.0
    }
}

/// State feedback `u = -K (s - s*)` towards the upright state at `target_x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrController {
    pub gain: [f64; 4],
    pub target_x: f64,
}

impl LqrController {
    pub fn force(&self, s: &PlantState) -> f64 {
        let e = [s.x - self.target_x, s.x_dot, s.theta, s.theta_dot];
        -self.gain.iter().zip(e).map(|(k, v)| k * v).sum::<f64>()
    }
}

impl Controller for LqrController {
    fn command(&mut self, _k: usize, state: &PlantState) -> f64 {
        self.force(state)
    }
}

/// Default state weights for the data-generation LQR.
pub const DEFAULT_LQR_Q: [f64; 4] = [10.0, 1.0, 100.0, 1.0];
pub const DEFAULT_LQR_R: f64 = 0.1;

/// LQR about upright using the ZOH model at period `tau`.
pub fn lqr_controller(
    p: &PlantParams,
    target_x: f64,
    q_diag: [f64; 4],
    r: f64,
    tau: f64,
) -> Result<LqrController, PlantError> {
    p.validate()?;
    if !(r > 0.0) || q_diag.iter().any(|v| *v < 0.0) {
        return Err(PlantError::InvalidParams("LQR weights must have Q >= 0 and R > 0".into()));
    }
    let (a, b) = discretize_upright(p, tau);
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&q_diag));
    let r = DMatrix::from_element(1, 1, r);
    let k = lqr_gain(&a, &b, &q, &r)?;
    Ok(LqrController {
        gain: [k[(0, 0)], k[(0, 1)], k[(0, 2)], k[(0, 3)]],
        target_x,
    })
}

/// Wraps a controller with additive Gaussian excitation on the force.
pub struct Dithered<C, R> {
    pub inner: C,
    pub std: f64,
    pub rng: R,
}

impl<C: Controller, R: Rng> Controller for Dithered<C, R> {
    fn command(&mut self, k: usize, state: &PlantState) -> f64 {
        let n: f64 = StandardNormal.sample(&mut self.rng);
        self.inner.command(k, state) + self.std * n
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub k: usize,
    pub t: f64,
    pub state: PlantState,
    pub u: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    /// Step at which the rollout was cut short because the state blew up.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn states(&self) -> Vec<PlantState> {
        self.samples.iter().map(|s| s.state).collect()
    }

    pub fn controls(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.u).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), PlantError> {
        writeln!(w, "k,t,x,xdot,theta,thetadot,u")?;
        for s in &self.samples {
            let st = s.state;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.k, s.t, st.x, st.x_dot, st.theta, st.theta_dot, s.u
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, PlantError> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if i == 0 {
                if line != "k,t,x,xdot,theta,thetadot,u" {
                    return Err(PlantError::Csv {
                        line: 1,
                        msg: format!("unexpected header {line:?}"),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(PlantError::Csv {
                    line: i + 1,
                    msg: format!("expected 7 fields, got {}", fields.len()),
                });
            }
            let num = |j: usize| -> Result<f64, PlantError> {
                fields[j].parse::<f64>().map_err(|e| PlantError::Csv {
                    line: i + 1,
                    msg: format!("field {j}: {e}"),
                })
            };
            let k = fields[0].parse::<usize>().map_err(|e| PlantError::Csv {
                line: i + 1,
                msg: format!("field 0: {e}"),
            })?;
            samples.push(Sample {
                k,
                t: num(1)?,
                state: PlantState::new(num(2)?, num(3)?, num(4)?, num(5)?),
                u: num(6)?,
            });
        }
        Ok(Self {
            samples,
            diverged_at: None,
        })
    }
}

/// Closed-loop rollout of `horizon` samples at one RK4 step per sample.
///
/// Sample `k` holds the state at `t = k * step` and the force applied over
/// the following step. The rollout stops early if the state leaves
/// [`DIVERGENCE_LIMIT`].
pub fn simulate_trajectory<C: Controller + ?Sized, R: Rng + ?Sized>(
    p: &PlantParams,
    controller: &mut C,
    initial: PlantState,
    horizon: usize,
    rng: &mut R,
) -> Trajectory {
    let mut samples = Vec::with_capacity(horizon);
    let mut state = initial;
    for k in 0..horizon {
        if state.diverged() {
            return Trajectory {
                samples,
                diverged_at: Some(k),
            };
        }
        let u = controller.command(k, &state);
        samples.push(Sample {
            k,
            t: k as f64 * p.step,
            state,
            u,
        });
        state = rk4_step(&state, u, p, rng);
    }
    Trajectory {
        samples,
        diverged_at: None,
    }
}

/// 1 when the cart is within 0.2 of `target_x` and the pole within 0.05 rad of
/// upright, both bounds inclusive; 0 otherwise.
pub fn score(s: &PlantState, target_x: f64) -> u8 {
    u8::from((s.x - target_x).abs() <= SCORE_POSITION_TOL && s.theta.abs() <= SCORE_ANGLE_TOL)
}

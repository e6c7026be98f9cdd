//! Measurement routines shared by the integration suites and the acceptance
//! report. Each returns the measured quantity so callers decide how to judge it.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use lkae::channel::{self, LinkParams};
use lkae::diffcore::{Graph, Var};
use lkae::experiments::{nrmse, standard_suite};
use lkae::koopman::{
    loss_linear, loss_logic, loss_pred, loss_recon, total_loss_dsk, total_loss_lsk, train_dsk, train_lsk, Activation,
    Batch, KoopmanError, KoopmanModel, LatentPolicy, LogicTerm, LossWeights, ModelSpec, Normalization, TraceSource,
    TrainConfig, DSK_A, DSK_B, LSK_A, LSK_B,
};
use lkae::plant::{self, PlantState};
use lkae::stl::{self, compile_dag, Comparison, Formula, TimedTrace};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(r: &mut R) -> f64 {
    StandardNormal.sample(r)
}

// ---------------------------------------------------------------- gradients

/// Small model with random weights, a non-trivial input scaling and, when
/// asked, adapters away from the identity.
pub fn random_model(seed: u64, with_lsk: bool) -> KoopmanModel {
    let mut r = rng(seed);
    let spec = ModelSpec {
        state_dim: 4,
        control_dim: 1,
        latent_dim: 3,
        hidden: 6,
        hidden_activation: Activation::Relu,
        output_activation: if seed.is_multiple_of(2) { Activation::Linear } else { Activation::Sigmoid },
    };
    let offset: Vec<f64> = (0..4).map(|_| 0.3 * normal(&mut r)).collect();
    let scale: Vec<f64> = (0..4).map(|_| r.random_range(0.5..2.0)).collect();
    let norm = Normalization::diagonal(offset, &scale).expect("positive scale");
    let mut m = KoopmanModel::new(spec, &norm, &mut r).expect("valid spec");
    if with_lsk {
        m.attach_lsk();
        for name in [LSK_A, LSK_B] {
            let mut t = m.params().value(name).expect("adapter").clone();
            for v in t.data_mut() {
                *v += 0.2 * normal(&mut r);
            }
            m.params_mut().set_value(name, t).expect("same shape");
        }
    }
    m
}

pub fn random_batch(seed: u64, rows: usize) -> Batch {
    let mut r = rng(seed ^ 0x5eed);
    let states: Vec<Vec<f64>> = (0..rows).map(|_| (0..4).map(|_| normal(&mut r)).collect()).collect();
    let controls: Vec<Vec<f64>> = (0..rows).map(|_| vec![normal(&mut r)]).collect();
    let delivered: Vec<bool> = (0..rows).map(|k| k % 5 != 3).collect();
    Batch::new(&states, &controls, &delivered).expect("valid batch")
}

pub fn random_policy(seed: u64, d: usize) -> LatentPolicy {
    let mut r = rng(seed ^ 0xc0de);
    LatentPolicy {
        gain: lkae::diffcore::Tensor::new(1, d, (0..d).map(|_| 0.3 * normal(&mut r)).collect()).expect("shape"),
        z_ref: (0..d).map(|_| 0.2 * normal(&mut r)).collect(),
        u_ref: vec![0.1 * normal(&mut r)],
    }
}

pub fn random_logic(seed: u64) -> LogicTerm {
    LogicTerm {
        source: if seed.is_multiple_of(2) { TraceSource::Latent(0) } else { TraceSource::Physical(0) },
        ..LogicTerm::new(Formula::tracking_band(0.4, 0.05, 2, 7), vec![0.4, 0.0, 0.0, 0.0], 10)
    }
}

/// The losses checked by the derivative suite, by name.
pub const LOSS_NAMES: [&str; 6] = ["L1", "L2", "L3", "L4", "total_dsk", "total_lsk"];

/// Builds the named loss of `m` on a fixed batch and rule.
pub fn build_loss(name: &str, g: &mut Graph, m: &KoopmanModel, seed: u64) -> Result<Var, KoopmanError> {
    let batch = random_batch(seed, 12);
    let k_max = 3;
    let use_lsk = m.has_lsk();
    let term = random_logic(seed);
    let policy = random_policy(seed, m.latent_dim());
    let x0 = vec![0.2, -0.1, 0.05, 0.3];
    match name {
        "L1" => loss_recon(g, m, &batch),
        "L2" => loss_linear(g, m, &batch, k_max, use_lsk),
        "L3" => loss_pred(g, m, &batch, k_max, use_lsk),
        "L4" => loss_logic(g, m, &term, &policy, &x0, use_lsk),
        "total_dsk" => Ok(total_loss_dsk(g, m, &batch, &LossWeights::DSK, k_max)?.total),
        "total_lsk" => Ok(total_loss_lsk(g, m, &batch, &term, &policy, &x0, &LossWeights::LSK, k_max)?.total),
        other => panic!("unknown loss {other}"),
    }
}

fn loss_value(name: &str, m: &KoopmanModel, seed: u64) -> f64 {
    let mut g = Graph::new();
    let v = build_loss(name, &mut g, m, seed).expect("loss builds");
    g.item(v)
}

/// Relative error `|analytic - numeric| / max(|analytic|, |numeric|)` over
/// the whole trainable-parameter gradient of one loss, with central
/// differences at step `h`.
pub fn gradient_error(name: &str, m: &KoopmanModel, seed: u64, h: f64) -> f64 {
    let mut work = m.clone();
    let mut g = Graph::new();
    let root = build_loss(name, &mut g, &work, seed).expect("loss builds");
    work.params_mut().zero_grad();
    g.backward(root, work.params_mut()).expect("backward");

    let names: Vec<String> = m
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let (mut diff, mut an_sq, mut nu_sq) = (0.0, 0.0, 0.0);
    for pname in &names {
        let analytic = work.params().grad(pname).expect("gradient buffer").clone();
        let base = m.params().value(pname).expect("param").clone();
        for i in 0..base.len() {
            let mut probe = m.clone();
            let mut up = base.clone();
            up.data_mut()[i] += h;
            probe.params_mut().set_value(pname, up).expect("shape");
            let fp = loss_value(name, &probe, seed);
            let mut dn = base.clone();
            dn.data_mut()[i] -= h;
            probe.params_mut().set_value(pname, dn).expect("shape");
            let fm = loss_value(name, &probe, seed);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            an_sq += a * a;
            nu_sq += numeric * numeric;
        }
    }
    let scale = an_sq.sqrt().max(nu_sq.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Worst relative error per loss over `models` random models.
pub fn gradient_suite(models: u64) -> Vec<(&'static str, f64)> {
    LOSS_NAMES
        .iter()
        .map(|&name| {
            let worst = (0..models)
                .map(|seed| {
                    let with_lsk = name == "total_lsk" || seed % 3 == 1;
                    gradient_error(name, &random_model(seed, with_lsk), seed, 1e-5)
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

// ---------------------------------------------------------------------- STL

/// Random formula of at most `depth` levels over `dim` signals.
pub fn random_formula<R: Rng + ?Sized>(r: &mut R, depth: usize, dim: usize) -> Formula {
    let leaf = depth <= 1 || r.random_bool(0.25);
    if leaf {
        let cmp = [Comparison::Lt, Comparison::Le, Comparison::Gt, Comparison::Ge][r.random_range(0..4)];
        // Thresholds on a coarse grid make exact ties with the trace possible.
        let threshold = f64::from(r.random_range(-8i32..=8)) * 0.25;
        return Formula::pred(r.random_range(0..dim), cmp, threshold);
    }
    if r.random_bool(0.5) {
        Formula::and(random_formula(r, depth - 1, dim), random_formula(r, depth - 1, dim))
    } else {
        let lo = r.random_range(0..20usize);
        let hi = lo + r.random_range(1..30usize);
        Formula::always(lo, hi, random_formula(r, depth - 1, dim))
    }
}

/// Random trace covering the formula's horizon, at most `max_len` samples,
/// starting at a random timestamp.
pub fn random_trace<R: Rng + ?Sized>(r: &mut R, f: &Formula, dim: usize, max_len: usize) -> (TimedTrace, i64) {
    let need = f.horizon() + 1;
    let len = r.random_range(need..=max_len.max(need));
    let start = r.random_range(-50i64..50);
    let values: Vec<Vec<f64>> = (0..len)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if r.random_bool(0.2) {
                        f64::from(r.random_range(-8i32..=8)) * 0.25
                    } else {
                        2.0 * normal(r)
                    }
                })
                .collect()
        })
        .collect();
    let stamps: Vec<i64> = (0..len as i64).map(|i| start + i).collect();
    let k = start + r.random_range(0..=(len - need) as i64);
    (TimedTrace::new(stamps, values).expect("valid trace"), k)
}

#[derive(Debug, Default)]
pub struct StlReport {
    pub pairs: usize,
    pub mismatches: usize,
    pub sign_violations: usize,
    pub ties: usize,
}

/// DAG evaluation against the recursive definition on `pairs` random
/// formula/trace pairs (depth at most 4, traces at most 300 samples).
pub fn stl_agreement(pairs: usize, seed: u64) -> StlReport {
    let mut r = rng(seed);
    let mut rep = StlReport::default();
    while rep.pairs < pairs {
        let dim = r.random_range(1..=3);
        let f = random_formula(&mut r, 4, dim);
        if f.horizon() + 1 > 300 {
            continue;
        }
        let (tr, k) = random_trace(&mut r, &f, dim, 300);
        let recursive = stl::robustness(&f, &tr, k).expect("window fits");
        let dag = compile_dag(&f, tr.len()).evaluate(&tr, k).expect("window fits");
        if recursive.to_bits() != dag.to_bits() {
            rep.mismatches += 1;
        }
        if recursive == 0.0 {
            rep.ties += 1;
        } else if (recursive > 0.0) != stl::satisfies(&f, &tr, k).expect("window fits") {
            rep.sign_violations += 1;
        }
        rep.pairs += 1;
    }
    rep
}

// ------------------------------------------------------------------ channel

#[derive(Debug)]
pub struct OutageCheck {
    pub snr_db: f64,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub standard_errors: f64,
}

pub fn outage_monte_carlo(snr_db: f64, fades: usize, seed: u64) -> OutageCheck {
    let lp = LinkParams::calibrated(snr_db);
    let p = channel::outage_prob(&lp);
    let mut r = rng(seed);
    let lost = (0..fades).filter(|_| !channel::realize(&lp, &mut r).delivered).count();
    let p_hat = lost as f64 / fades as f64;
    let se = (p * (1.0 - p) / fades as f64).sqrt();
    OutageCheck {
        snr_db,
        closed_form: p,
        monte_carlo: p_hat,
        standard_errors: (p_hat - p).abs() / se,
    }
}

// -------------------------------------------------------------------- plant

/// Largest relative energy change of an unforced, noiseless swing over
/// `steps` RK4 steps of size `h`, over every suite plant and a few
/// initial angles.
pub fn energy_drift(h: f64, steps: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for sys in standard_suite() {
        let mut p = sys.plant.noiseless();
        p.step = h;
        for theta in [0.1, 1.0, 2.5] {
            let mut s = PlantState::new(0.0, 0.3, theta, -0.5);
            let e0 = plant::energy(&s, &p);
            for _ in 0..steps {
                s = plant::rk4_step_noiseless(&s, 0.0, &p);
                worst = worst.max(((plant::energy(&s, &p) - e0) / e0.abs()).abs());
            }
        }
    }
    worst
}

/// Largest violation of
/// `f(s,u) + f(s,v) - 2 f(s,0) == f(s,u+v) - f(s,0)`, relative to the
/// magnitude of the terms, over random states and forces.
pub fn affinity_violation(samples: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let suite = standard_suite();
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        let p = &suite[i % suite.len()].plant;
        let s = PlantState::new(normal(&mut r), normal(&mut r), 3.0 * normal(&mut r), normal(&mut r));
        let (u, v) = (20.0 * normal(&mut r), 20.0 * normal(&mut r));
        let f0 = plant::derivatives(&s, 0.0, p);
        let fu = plant::derivatives(&s, u, p);
        let fv = plant::derivatives(&s, v, p);
        let fuv = plant::derivatives(&s, u + v, p);
        for j in 0..4 {
            let lhs = fu[j] + fv[j] - 2.0 * f0[j];
            let rhs = fuv[j] - f0[j];
            let scale = [fu[j], fv[j], f0[j], fuv[j]].iter().map(|x| x.abs()).fold(1.0, f64::max);
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    worst
}

// ------------------------------------------------------------ linear oracle

pub struct LinearRecord {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

/// A stable 4-state, 1-input linear plant: two damped rotations.
pub fn linear_plant() -> (DMatrix<f64>, DMatrix<f64>) {
    let rot = |rho: f64, w: f64| [[rho * w.cos(), -rho * w.sin()], [rho * w.sin(), rho * w.cos()]];
    let (r1, r2) = (rot(0.97, 0.3), rot(0.9, 1.1));
    let mut a = DMatrix::zeros(4, 4);
    for i in 0..2 {
        for j in 0..2 {
            a[(i, j)] = r1[i][j];
            a[(i + 2, j + 2)] = r2[i][j];
        }
    }
    a[(0, 2)] = 0.2;
    let b = DMatrix::from_column_slice(4, 1, &[0.5, 0.0, 0.3, 0.4]);
    (a, b)
}

pub fn simulate_linear(len: usize, noise: f64, seed: u64) -> LinearRecord {
    let (a, b) = linear_plant();
    let mut r = rng(seed);
    let mut x = nalgebra::DVector::from_iterator(4, (0..4).map(|_| normal(&mut r)));
    let mut states = Vec::with_capacity(len);
    let mut controls = Vec::with_capacity(len);
    for _ in 0..len {
        let u = normal(&mut r);
        states.push(x.as_slice().to_vec());
        controls.push(vec![u]);
        let w = nalgebra::DVector::from_iterator(4, (0..4).map(|_| noise * normal(&mut r)));
        x = &a * &x + &b * u + w;
    }
    LinearRecord { states, controls }
}

/// Least-squares `[A B]` from the transitions whose both ends were delivered.
pub fn dmdc(rec: &LinearRecord, delivered: &[bool]) -> DMatrix<f64> {
    let pairs: Vec<usize> = (0..rec.states.len() - 1).filter(|&k| delivered[k] && delivered[k + 1]).collect();
    let mut omega = DMatrix::zeros(5, pairs.len());
    let mut next = DMatrix::zeros(4, pairs.len());
    for (c, &k) in pairs.iter().enumerate() {
        for i in 0..4 {
            omega[(i, c)] = rec.states[k][i];
            next[(i, c)] = rec.states[k + 1][i];
        }
        omega[(4, c)] = rec.controls[k][0];
    }
    let pinv = omega.pseudo_inverse(1e-12).expect("pseudo inverse");
    next * pinv
}

#[derive(Debug)]
pub struct OracleReport {
    pub model_nrmse: f64,
    pub oracle_nrmse: f64,
}

impl OracleReport {
    pub fn ratio(&self) -> f64 {
        self.model_nrmse / self.oracle_nrmse
    }
}

/// Trains a linear-activation shared model on a noisy linear record seen
/// through a 15 dB link and scores it, next to the least-squares oracle
/// fitted on the same delivered samples, by one-step NRMSE on a fresh record.
pub fn linear_oracle(seed: u64) -> OracleReport {
    let train = simulate_linear(252, 0.05, seed);
    let test = simulate_linear(101, 0.05, seed + 1000);
    let link = LinkParams::calibrated(15.0);
    let delivered = channel::sample_erasures(&link, train.states.len(), &mut rng(seed + 2000));
    let batch = Batch::new(&train.states, &train.controls, &delivered).expect("batch");

    let rows: Vec<Vec<f64>> = (0..train.states.len())
        .filter(|&k| delivered[k])
        .map(|k| train.states[k].clone())
        .collect();
    let norm = Normalization::fit_diagonal(&rows, 1e-3).expect("scaling");
    let spec = ModelSpec {
        state_dim: 4,
        control_dim: 1,
        latent_dim: 4,
        hidden: 16,
        hidden_activation: Activation::Linear,
        output_activation: Activation::Linear,
    };
    let mut model = KoopmanModel::new(spec, &norm, &mut rng(seed + 3000)).expect("model");
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    train_dsk(&mut model, &batch, None, &cfg).expect("training");

    let ab = dmdc(&train, &delivered);
    let n = test.states.len() - 1;
    let actual: Vec<Vec<f64>> = test.states[1..].to_vec();
    let learned: Vec<Vec<f64>> = (0..n)
        .map(|k| model.predict_state(&test.states[k], &test.controls[k], false).expect("prediction"))
        .collect();
    let oracle: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut v = test.states[k].clone();
            v.push(test.controls[k][0]);
            let y = &ab * nalgebra::DVector::from_vec(v);
            y.as_slice().to_vec()
        })
        .collect();
    OracleReport {
        model_nrmse: nrmse(&learned, &actual, n).expect("nrmse"),
        oracle_nrmse: nrmse(&oracle, &actual, n).expect("nrmse"),
    }
}

// --------------------------------------------------------- adapter freezing

#[derive(Debug)]
pub struct FreezeReport {
    /// Shared matrices unchanged bit for bit by adapter training.
    pub dsk_unchanged: bool,
    /// Adapters actually moved during that training.
    pub adapters_moved: bool,
    /// Largest difference between identity-adapter and shared predictions.
    pub identity_gap: f64,
}

pub fn freeze_invariants(seed: u64) -> FreezeReport {
    let shared = random_model(seed, false);
    let batch = random_batch(seed, 40);
    let mut adapted = shared.clone();
    let cfg = TrainConfig {
        max_epochs: 60,
        patience: 60,
        seed,
        ..TrainConfig::default()
    };
    train_lsk(&mut adapted, &batch, None, &cfg).expect("adapter training");
    let same = |name: &str| {
        let a = shared.params().value(name).expect("param").data();
        let b = adapted.params().value(name).expect("param").data();
        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    let d = shared.latent_dim();
    let moved = adapted.params().value(LSK_A).expect("adapter").max_abs_diff(&lkae::diffcore::Tensor::identity(d)) > 0.0;

    let mut with_identity = shared.clone();
    with_identity.attach_lsk();
    let mut r = rng(seed + 7);
    let mut gap: f64 = 0.0;
    for _ in 0..50 {
        let z: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let u = vec![normal(&mut r)];
        let a = shared.predict_latent(&z, &u, false).expect("dsk");
        let b = with_identity.predict_latent(&z, &u, true).expect("lsk");
        gap = gap.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    FreezeReport {
        dsk_unchanged: same(DSK_A) && same(DSK_B),
        adapters_moved: moved,
        identity_gap: gap,
    }
}

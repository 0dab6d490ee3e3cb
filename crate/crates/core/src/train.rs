//! Shaping the limit cycle to a target point set.
//!
//! The learned system's limit cycle is the image of the base circle under
//! the invertible map, so training never integrates the dynamics: it moves
//! the mapped circle samples towards the target under the Hausdorff
//! distance, plus a small penalty pulling the inverse map towards the
//! identity on a region around the target.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::base::{sample_base_cycle, BaseParams};
use crate::error::{Error, Result};
use crate::inn::{forward_on_tape, inverse_on_tape, DiffeoParams, InnSpec};
use crate::math;
use crate::rng::{stream, Stream, StreamRng};
use crate::tape::{gradient, Tape, Var};

pub use crate::points::{Point2, PointSet2, Region2};

fn dist(a: &Point2, b: &Point2) -> f64 {
    math::hypot(a[0] - b[0], a[1] - b[1])
}

/// `max_{a ∈ from} min_{b ∈ to} ‖a − b‖`.
pub fn directed_hausdorff(from: &[Point2], to: &[Point2]) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::arg("Hausdorff distance of an empty set"));
    }
    let mut worst = 0.0f64;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let d = dist(a, b);
            if d < best {
                best = d;
            }
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// Symmetric Hausdorff distance between two finite point sets.
pub fn hausdorff(s: &[Point2], l: &[Point2]) -> Result<f64> {
    Ok(directed_hausdorff(s, l)?.max(directed_hausdorff(l, s)?))
}

/// The learned limit cycle: `k` base-cycle samples pushed through the map.
pub fn mapped_cycle(params: &DiffeoParams, base: &BaseParams, k: usize) -> Result<PointSet2> {
    let circle = sample_base_cycle(k, base)?;
    let points = circle.points().iter().map(|&p| params.forward(p)).collect::<Result<Vec<_>>>()?;
    PointSet2::new(points)
}

/// Mean squared displacement `‖x − F⁻¹(x)‖²` over `samples`.
pub fn identity_regularizer(params: &DiffeoParams, samples: &[Point2]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("regularizer needs at least one sample"));
    }
    let mut acc = 0.0;
    for x in samples {
        let u = params.inverse(*x)?;
        acc += (x[0] - u[0]) * (x[0] - u[0]) + (x[1] - u[1]) * (x[1] - u[1]);
    }
    Ok(acc / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::arg("ADAM betas must lie in [0, 1)"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::arg("ADAM epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: alloc::vec![0.0; len], v: alloc::vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected ADAM update of `params` in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::arg("ADAM vector lengths disagree"));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= hyper.lr * m_hat / (math::sqrt(v_hat) + hyper.epsilon);
    }
    Ok(())
}

/// Learning-rate schedule over the epochs of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` at epoch 0 to `final_fraction · lr` at the
    /// last epoch.
    Cosine { final_fraction: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { final_fraction } => {
                let progress = if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 1.0 };
                let w = 0.5 * (1.0 + math::cos(PI * progress));
                base * (final_fraction + (1.0 - final_fraction) * w)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Base-cycle samples `K` used in the Hausdorff term.
    pub cycle_samples: usize,
    /// Weight of the identity regularizer.
    pub reg_weight: f64,
    /// Regularizer samples `m`, redrawn each epoch.
    pub reg_samples: usize,
    /// Sampling box for the regularizer; `None` inflates the target's
    /// bounding box by 50%.
    pub reg_region: Option<Region2>,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub architecture: InnSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cycle_samples: 512,
            reg_weight: 1e-3,
            reg_samples: 128,
            reg_region: None,
            epochs: 6000,
            adam: AdamConfig::default(),
            schedule: LrSchedule::Cosine { final_fraction: 0.01 },
            seed: 0,
            architecture: InnSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_samples < 3 {
            return Err(Error::arg("cycle_samples must be at least 3"));
        }
        if !(self.reg_weight.is_finite() && self.reg_weight >= 0.0) {
            return Err(Error::arg("reg_weight must be non-negative"));
        }
        if self.reg_samples == 0 {
            return Err(Error::arg("reg_samples must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be positive"));
        }
        if let LrSchedule::Cosine { final_fraction } = self.schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::arg("cosine final_fraction must lie in [0, 1]"));
            }
        }
        self.adam.validate()?;
        self.architecture.validate()
    }

    pub fn region_for(&self, target: &PointSet2) -> Region2 {
        self.reg_region.unwrap_or_else(|| Region2::inflated_bounds(target, 0.5))
    }
}

/// Loss decomposition for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub hausdorff: f64,
    pub regularizer: f64,
}

/// Uniform samples in `region`, `x` drawn before `z` for each point.
pub fn draw_samples(rng: &mut StreamRng, region: &Region2, m: usize) -> Vec<Point2> {
    (0..m)
        .map(|_| {
            let x = rng.random_range(region.min[0]..region.max[0]);
            let z = rng.random_range(region.min[1]..region.max[1]);
            [x, z]
        })
        .collect()
}

fn column(tape: &mut Tape<'_>, pts: &[Point2], axis: usize) -> Result<Var> {
    tape.constant(pts.len(), 1, pts.iter().map(|p| p[axis]).collect())
}

/// Records the combined loss on `tape` and returns `(total, hausdorff,
/// regularizer)` nodes.
pub fn loss_on_tape(
    tape: &mut Tape<'_>,
    spec: &InnSpec,
    target: &[Point2],
    circle: &[Point2],
    samples: &[Point2],
    reg_weight: f64,
) -> Result<(Var, Var, Var)> {
    let ca = column(tape, circle, 0)?;
    let cb = column(tape, circle, 1)?;
    let (la, lb) = forward_on_tape(tape, spec, ca, cb)?;
    let cycle = tape.concat_cols(la, lb)?;
    let flat_target: Vec<f64> = target.iter().flatten().copied().collect();
    let s = tape.constant(target.len(), 2, flat_target)?;
    let d = tape.pairwise_distance(s, cycle)?;
    let near_cycle = tape.min_along_rows(d)?;
    let s_to_l = tape.max_all(near_cycle)?;
    let near_target = tape.min_along_cols(d)?;
    let l_to_s = tape.max_all(near_target)?;
    let h = tape.maximum(s_to_l, l_to_s)?;

    let xa = column(tape, samples, 0)?;
    let xb = column(tape, samples, 1)?;
    let (ua, ub) = inverse_on_tape(tape, spec, xa, xb)?;
    let da = tape.sub(xa, ua)?;
    let db = tape.sub(xb, ub)?;
    let na = tape.squared_norm(da);
    let nb = tape.squared_norm(db);
    let r = tape.add(na, nb)?;
    let reg = tape.scale(r, 1.0 / samples.len() as f64);

    let weighted = tape.scale(reg, reg_weight);
    let total = tape.add(h, weighted)?;
    Ok((total, h, reg))
}

/// Loss and gradient with respect to the flat parameters, for fixed
/// regularizer samples.
pub fn loss_and_gradient(
    flat: &[f64],
    spec: &InnSpec,
    target: &[Point2],
    circle: &[Point2],
    samples: &[Point2],
    reg_weight: f64,
) -> Result<(LossTerms, Vec<f64>)> {
    let mut parts = (0.0, 0.0);
    let (total, grad) = gradient(flat, |tape| {
        let (total, h, reg) = loss_on_tape(tape, spec, target, circle, samples, reg_weight)?;
        parts = (tape.scalar(h), tape.scalar(reg));
        Ok(total)
    })?;
    Ok((LossTerms { total, hausdorff: parts.0, regularizer: parts.1 }, grad))
}

/// Loss terms evaluated pointwise (no tape) with explicit regularizer samples.
pub fn loss_terms(
    params: &DiffeoParams,
    target: &PointSet2,
    base: &BaseParams,
    cfg: &TrainConfig,
    samples: &[Point2],
) -> Result<LossTerms> {
    let cycle = mapped_cycle(params, base, cfg.cycle_samples)?;
    let h = hausdorff(target.points(), cycle.points())?;
    let reg = identity_regularizer(params, samples)?;
    Ok(LossTerms { total: h + cfg.reg_weight * reg, hausdorff: h, regularizer: reg })
}

/// The objective at epoch 0: regularizer samples are the first draw of the
/// seeded regularizer stream.
pub fn total_loss(params: &DiffeoParams, target: &PointSet2, base: &BaseParams, cfg: &TrainConfig) -> Result<LossTerms> {
    let region = cfg.region_for(target);
    let mut rng = stream(cfg.seed, Stream::Regularizer);
    let samples = draw_samples(&mut rng, &region, cfg.reg_samples);
    loss_terms(params, target, base, cfg, &samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// One entry per epoch, measured before that epoch's update.
    pub loss_history: Vec<LossTerms>,
    /// Parameters with the lowest recorded total loss.
    pub final_params: DiffeoParams,
    pub best_epoch: usize,
    /// Wall-clock seconds, when the observer supplies a clock.
    pub elapsed: f64,
}

impl TrainReport {
    pub fn best_loss(&self) -> LossTerms {
        self.loss_history[self.best_epoch]
    }
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_epoch(&mut self, _epoch: usize, _loss: &LossTerms) {}

    /// Return `true` to stop after the current epoch.
    fn should_stop(&self) -> bool {
        false
    }

    /// Seconds on some monotonic clock, if one is available.
    fn now(&self) -> Option<f64> {
        None
    }
}

impl TrainObserver for () {}

pub fn train(target: &PointSet2, base: &BaseParams, cfg: &TrainConfig, init: Option<DiffeoParams>) -> Result<TrainReport> {
    train_observed(target, base, cfg, init, &mut ())
}

/// Full-batch ADAM on the combined loss. Deterministic for a given seed.
pub fn train_observed<O: TrainObserver + ?Sized>(
    target: &PointSet2,
    base: &BaseParams,
    cfg: &TrainConfig,
    init: Option<DiffeoParams>,
    observer: &mut O,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = observer.now();
    let params = match init {
        Some(p) => {
            if p.spec() != &cfg.architecture {
                return Err(Error::arg("initial parameters do not match the configured architecture"));
            }
            p
        }
        None => DiffeoParams::init(cfg.architecture.clone(), &mut stream(cfg.seed, Stream::Init))?,
    };
    let spec = params.spec().clone();
    let circle = sample_base_cycle(cfg.cycle_samples, base)?;
    let region = cfg.region_for(target);
    let mut reg_rng = stream(cfg.seed, Stream::Regularizer);

    let mut flat = params.flatten();
    let mut best_flat = flat.clone();
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut last_finite = flat.clone();
    let mut state = AdamState::new(flat.len());
    let mut history = Vec::with_capacity(cfg.epochs);

    let diverged = |epoch: usize, flat: &[f64]| -> Error {
        match DiffeoParams::from_flat(spec.clone(), flat) {
            Ok(p) => Error::TrainingDiverged { epoch, last_finite: alloc::boxed::Box::new(p) },
            Err(e) => e,
        }
    };

    for epoch in 0..cfg.epochs {
        let samples = draw_samples(&mut reg_rng, &region, cfg.reg_samples);
        let (loss, grad) =
            match loss_and_gradient(&flat, &spec, target.points(), circle.points(), &samples, cfg.reg_weight) {
                Ok(r) => r,
                Err(e) if e.is_numerical() => return Err(diverged(epoch, &last_finite)),
                Err(e) => return Err(e),
            };
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(epoch, &last_finite));
        }
        history.push(loss);
        observer.on_epoch(epoch, &loss);
        if loss.total < best {
            best = loss.total;
            best_epoch = epoch;
            best_flat.copy_from_slice(&flat);
        }
        last_finite.copy_from_slice(&flat);
        if observer.should_stop() {
            break;
        }
        let hyper = AdamConfig { lr: cfg.schedule.rate(cfg.adam.lr, epoch, cfg.epochs), ..cfg.adam };
        adam_step(&mut flat, &grad, &mut state, &hyper)?;
    }

    let elapsed = match (started, observer.now()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    Ok(TrainReport {
        loss_history: history,
        final_params: DiffeoParams::from_flat(spec, &best_flat)?,
        best_epoch,
        elapsed,
    })
}

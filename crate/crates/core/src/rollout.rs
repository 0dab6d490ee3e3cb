//! Learned dynamics, fixed-step integration and tracking evaluation.
//!
//! The learned field is the base field pushed through the map `F`:
//! `f(x) = J_F(F⁻¹(x)) · g(F⁻¹(x))`. Trajectories of `f` are images under `F`
//! of base trajectories, so they converge to the mapped circle.

use alloc::vec::Vec;

use rand::Rng;

use crate::base::{base_velocity, BaseParams, State3, Velocity3};
use crate::error::{Error, Result};
use crate::inn::{full_map, DiffeoParams};
use crate::math;
use crate::points::{Point2, PointSet2, Region2};
use crate::train::hausdorff;

/// States with `|y|` below this count as touching the surface.
pub const CONTACT_THRESHOLD: f64 = 1e-4;
/// Distance to the cycle under which a trajectory counts as settled.
pub const SETTLE_DISTANCE: f64 = 1e-2;
/// Samples of the learned cycle used for distances during evaluation.
pub const EVAL_CYCLE_SAMPLES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Euler,
    Rk4,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "euler" => Some(Method::Euler),
            "rk4" => Some(Method::Rk4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    method: Method,
    step: f64,
    duration: f64,
}

impl IntegratorConfig {
    pub fn new(method: Method, step: f64, duration: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::arg("step must be positive and finite"));
        }
        if !(duration.is_finite() && duration >= step) {
            return Err(Error::arg("duration must be finite and at least one step"));
        }
        Ok(Self { method, step, duration })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Number of steps taken: `floor(T / h)`, tolerant of rounding in the
    /// quotient.
    pub fn steps(&self) -> usize {
        let q = self.duration / self.step;
        let r = math::round(q);
        if (q - r).abs() <= 1e-9 * r.max(1.0) {
            r as usize
        } else {
            math::floor(q) as usize
        }
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { method: Method::Rk4, step: 1e-3, duration: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State3>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<&State3> {
        self.states.last()
    }
}

pub fn learned_dynamics(x: &State3, params: &DiffeoParams, base: &BaseParams) -> Result<Velocity3> {
    x.check()?;
    let ([ux, uz], j) = params.inverse_with_forward_jacobian([x.x, x.z])?;
    let g = base_velocity(&State3::new(ux, x.y, uz), base);
    Ok(Velocity3 {
        dx: j[0][0] * g.dx + j[0][1] * g.dz,
        dy: g.dy,
        dz: j[1][0] * g.dx + j[1][1] * g.dz,
    })
}

fn offset(s: &State3, v: &Velocity3, h: f64) -> State3 {
    State3::new(s.x + h * v.dx, s.y + h * v.dy, s.z + h * v.dz)
}

/// Fixed-step integration of an arbitrary field.
pub fn integrate_field<F>(x0: &State3, cfg: &IntegratorConfig, mut field: F) -> Result<Trajectory>
where
    F: FnMut(&State3) -> Result<Velocity3>,
{
    x0.check()?;
    let n = cfg.steps();
    let h = cfg.step;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    times.push(0.0);
    states.push(*x0);
    let mut s = *x0;
    for step in 1..=n {
        let mut eval = |p: &State3| -> Result<Velocity3> {
            match field(p) {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(Error::IntegrationDiverged { step }),
                Err(e) if e.is_numerical() || matches!(e, Error::NonFinite(_)) => {
                    Err(Error::IntegrationDiverged { step })
                }
                Err(e) => Err(e),
            }
        };
        s = match cfg.method {
            Method::Euler => offset(&s, &eval(&s)?, h),
            Method::Rk4 => {
                let k1 = eval(&s)?;
                let k2 = eval(&offset(&s, &k1, 0.5 * h))?;
                let k3 = eval(&offset(&s, &k2, 0.5 * h))?;
                let k4 = eval(&offset(&s, &k3, h))?;
                let w = h / 6.0;
                State3::new(
                    s.x + w * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx),
                    s.y + w * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy),
                    s.z + w * (k1.dz + 2.0 * k2.dz + 2.0 * k3.dz + k4.dz),
                )
            }
        };
        if !s.is_finite() {
            return Err(Error::IntegrationDiverged { step });
        }
        times.push(step as f64 * h);
        states.push(s);
    }
    Ok(Trajectory { times, states })
}

/// Rollout of the learned system from `x0`; `floor(T/h) + 1` states.
pub fn integrate(x0: &State3, params: &DiffeoParams, base: &BaseParams, cfg: &IntegratorConfig) -> Result<Trajectory> {
    integrate_field(x0, cfg, |s| learned_dynamics(s, params, base))
}

/// Rollout of the base system.
pub fn integrate_base(x0: &State3, base: &BaseParams, cfg: &IntegratorConfig) -> Result<Trajectory> {
    integrate_field(x0, cfg, |s| Ok(base_velocity(s, base)))
}

/// 3D distance from `x` to the nearest cycle sample placed at `y = 0`.
pub fn distance_to_cycle(x: &State3, cycle: &[Point2]) -> Result<f64> {
    if cycle.is_empty() {
        return Err(Error::arg("cycle has no points"));
    }
    let mut best = f64::INFINITY;
    for c in cycle {
        let (dx, dz) = (x.x - c[0], x.z - c[1]);
        best = best.min(dx * dx + dz * dz);
    }
    Ok(math::sqrt(best + x.y * x.y))
}

/// `(x, z)` of the states with `|y| < threshold`, in time order.
pub fn contact_points(traj: &Trajectory, threshold: f64) -> Vec<Point2> {
    traj.states.iter().filter(|s| s.y.abs() < threshold).map(|s| s.plane()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingReport {
    /// Hausdorff distance between the contact points and the target.
    pub hausdorff: f64,
    /// Fraction of trajectory states in contact with the surface.
    pub contact_fraction: f64,
    /// First time after which the trajectory stays within
    /// [`SETTLE_DISTANCE`] of the cycle; `None` if it never does.
    pub settle_time: Option<f64>,
}

/// First time from which every later state is closer than `within` to `cycle`.
pub fn settle_time(traj: &Trajectory, cycle: &[Point2], within: f64) -> Result<Option<f64>> {
    let mut settled = None;
    for (t, s) in traj.times.iter().zip(&traj.states).rev() {
        if distance_to_cycle(s, cycle)? < within {
            settled = Some(*t);
        } else {
            break;
        }
    }
    Ok(settled)
}

/// Scores a rollout against the target; `cycle` is the learned cycle used
/// for the settle time. Fails with [`Error::NoContact`] when the rollout
/// never reaches the surface.
pub fn evaluate_tracking(traj: &Trajectory, target: &PointSet2, cycle: &PointSet2) -> Result<TrackingReport> {
    let contact = contact_points(traj, CONTACT_THRESHOLD);
    if contact.is_empty() {
        return Err(Error::NoContact);
    }
    Ok(TrackingReport {
        hausdorff: hausdorff(&contact, target.points())?,
        contact_fraction: contact.len() as f64 / traj.len() as f64,
        settle_time: settle_time(traj, cycle.points(), SETTLE_DISTANCE)?,
    })
}

/// Start states whose preimage under `F` lies at a radius in
/// `[0.1 R, 3 R]` around the origin, with `|y|` uniform in `y_abs` and a
/// random sign.
pub fn draw_starts<R: Rng + ?Sized>(
    rng: &mut R,
    params: &DiffeoParams,
    base: &BaseParams,
    n: usize,
    y_abs: (f64, f64),
) -> Result<Vec<State3>> {
    if !(y_abs.0.is_finite() && y_abs.1.is_finite() && 0.0 <= y_abs.0 && y_abs.0 <= y_abs.1) {
        return Err(Error::arg("y range must satisfy 0 <= min <= max"));
    }
    let r_max = base.radius();
    (0..n)
        .map(|_| {
            let r = rng.random_range(0.1 * r_max..=3.0 * r_max);
            let theta = rng.random_range(0.0..core::f64::consts::TAU);
            let y = rng.random_range(y_abs.0..=y_abs.1);
            let y = if rng.random::<bool>() { y } else { -y };
            full_map(&State3::new(r * math::cos(theta), y, r * math::sin(theta)), params)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub x: f64,
    pub z: f64,
    pub vx: f64,
    pub vz: f64,
}

/// Learned field on the `y = 0` slice over a `resolution × resolution`
/// grid spanning `region` corner to corner, `x` varying fastest.
pub fn vector_field_grid(
    params: &DiffeoParams,
    base: &BaseParams,
    region: &Region2,
    resolution: usize,
) -> Result<Vec<FieldSample>> {
    if resolution == 0 {
        return Err(Error::arg("resolution must be positive"));
    }
    let coord = |axis: usize, i: usize| {
        if resolution == 1 {
            0.5 * (region.min[axis] + region.max[axis])
        } else {
            region.min[axis] + (region.max[axis] - region.min[axis]) * i as f64 / (resolution - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(resolution * resolution);
    for j in 0..resolution {
        let z = coord(1, j);
        for i in 0..resolution {
            let x = coord(0, i);
            let v = learned_dynamics(&State3::new(x, 0.0, z), params, base)?;
            out.push(FieldSample { x, z, vx: v.dx, vz: v.dz });
        }
    }
    Ok(out)
}

/// Radius of the origin-centered circle closest to `target` in Hausdorff
/// distance, and that distance. Searches a coarse grid, then refines by
/// golden-section search.
pub fn best_circle_radius(target: &PointSet2, samples: usize) -> Result<(f64, f64)> {
    let score = |r: f64| -> Result<f64> {
        let circle: Vec<Point2> = (0..samples)
            .map(|i| {
                let t = core::f64::consts::TAU * i as f64 / samples as f64;
                [r * math::cos(t), r * math::sin(t)]
            })
            .collect();
        hausdorff(target.points(), &circle)
    };
    let r_max = target.points().iter().map(|p| math::hypot(p[0], p[1])).fold(0.0, f64::max);
    if !(r_max > 0.0) {
        return Err(Error::Geometry("target collapses to the origin".into()));
    }
    let grid = 200;
    let mut best = (0.0, f64::INFINITY);
    for i in 1..=grid {
        let r = r_max * i as f64 / grid as f64;
        let h = score(r)?;
        if h < best.1 {
            best = (r, h);
        }
    }
    let cell = r_max / grid as f64;
    let (mut a, mut b) = ((best.0 - cell).max(0.0), best.0 + cell);
    let phi = 0.5 * (math::sqrt(5.0) - 1.0);
    for _ in 0..60 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if score(c)? < score(d)? {
            b = d;
        } else {
            a = c;
        }
    }
    let r = 0.5 * (a + b);
    let h = score(r)?;
    Ok(if h < best.1 { (r, h) } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::base_dynamics_cartesian;
    use crate::inn::{full_map_inverse, jacobian_f, InnSpec};
    use crate::rng::{stream, Stream};
    use crate::train::mapped_cycle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64, scale: f64) -> DiffeoParams {
        DiffeoParams::randomized(InnSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed), scale).unwrap()
    }

    /// Smooth map, so integrator error follows the nominal order.
    fn smooth_params(seed: u64, scale: f64) -> DiffeoParams {
        use crate::inn::{Activation, SubnetSpec};
        let spec = InnSpec { subnet: SubnetSpec::coupling(vec![16, 16], Activation::Tanh), ..InnSpec::default() };
        DiffeoParams::randomized(spec, &mut ChaCha8Rng::seed_from_u64(seed), scale).unwrap()
    }

    #[test]
    fn identity_params_give_base_field_exactly() {
        let id = DiffeoParams::identity(InnSpec::default()).unwrap();
        let base = BaseParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = State3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            assert_eq!(learned_dynamics(&s, &id, &base).unwrap(), base_dynamics_cartesian(&s, &base).unwrap());
        }
    }

    #[test]
    fn translation_params_shift_the_base_field() {
        use crate::inn::{CouplingBlock, Mlp, SubnetSpec};
        let spec = InnSpec::default();
        let mut blocks: Vec<CouplingBlock> = (0..spec.block_count).map(|_| CouplingBlock::identity(&spec.subnet, spec.scale_clamp)).collect();
        blocks[0].q2 = Mlp::constant(&SubnetSpec::default(), 0.25);
        blocks[1].q2 = Mlp::constant(&SubnetSpec::default(), -0.5);
        let params = DiffeoParams::from_blocks(spec, blocks).unwrap();
        let base = BaseParams::default();
        let s = State3::new(0.7, 0.3, -0.2);
        let v = learned_dynamics(&s, &params, &base).unwrap();
        let g = base_dynamics_cartesian(&State3::new(0.45, 0.3, 0.3), &base).unwrap();
        assert!((v.dx - g.dx).abs() < 1e-15 && (v.dy - g.dy).abs() < 1e-15 && (v.dz - g.dz).abs() < 1e-15);
    }

    #[test]
    fn pushforward_matches_finite_difference_of_a_short_base_step() {
        let base = BaseParams::default();
        for seed in 0..10 {
            let params = random_params(seed, 0.05);
            let x = State3::new(0.8, 0.4, -0.5);
            let u = full_map_inverse(&x, &params).unwrap();
            let g = base_dynamics_cartesian(&u, &base).unwrap();
            let v = learned_dynamics(&x, &params, &base).unwrap();
            let mut errs = Vec::new();
            for &eps in &[1e-3, 1e-4] {
                let ahead = full_map(&offset(&u, &g, eps), &params).unwrap();
                let fd = [(ahead.x - x.x) / eps, (ahead.y - x.y) / eps, (ahead.z - x.z) / eps];
                let e = (fd[0] - v.dx).abs().max((fd[1] - v.dy).abs()).max((fd[2] - v.dz).abs());
                errs.push(e);
            }
            assert!(errs[0] < 1e-1, "seed {seed}: {errs:?}");
            assert!(errs[1] < 0.2 * errs[0] + 1e-9, "first-order shrinkage, seed {seed}: {errs:?}");
        }
    }

    #[test]
    fn jacobian_applied_to_base_field() {
        let params = random_params(3, 0.05);
        let base = BaseParams::default();
        let x = State3::new(-0.3, 1.1, 0.9);
        let u = full_map_inverse(&x, &params).unwrap();
        let j = jacobian_f(&u, &params).unwrap();
        let g = base_dynamics_cartesian(&u, &base).unwrap();
        let expected = j.apply([g.dx, g.dy, g.dz]);
        let v = learned_dynamics(&x, &params, &base).unwrap();
        for (a, b) in [v.dx, v.dy, v.dz].iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn step_counts() {
        let cfg = IntegratorConfig::new(Method::Rk4, 0.1, 0.1).unwrap();
        let t = integrate_base(&State3::new(1.0, 0.0, 0.0), &BaseParams::default(), &cfg).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(IntegratorConfig::new(Method::Rk4, 1e-3, 10.0).unwrap().steps(), 10_000);
        assert_eq!(IntegratorConfig::new(Method::Euler, 0.3, 1.0).unwrap().steps(), 3);
        assert!(IntegratorConfig::new(Method::Rk4, 0.2, 0.1).is_err());
        assert!(IntegratorConfig::new(Method::Rk4, 0.0, 1.0).is_err());
    }

    #[test]
    fn times_increase_and_start_at_zero() {
        let cfg = IntegratorConfig::new(Method::Euler, 0.01, 1.0).unwrap();
        let t = integrate_base(&State3::new(0.5, 0.1, 0.2), &BaseParams::default(), &cfg).unwrap();
        assert_eq!(t.times[0], 0.0);
        assert!(t.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(t.times.len(), t.states.len());
    }

    #[test]
    fn base_cycle_closes_after_one_period() {
        let id = DiffeoParams::identity(InnSpec::default()).unwrap();
        let cfg = IntegratorConfig::new(Method::Rk4, 1e-3, core::f64::consts::TAU).unwrap();
        let x0 = State3::new(1.0, 0.0, 0.0);
        let t = integrate(&x0, &id, &BaseParams::default(), &cfg).unwrap();
        let last = t.last().unwrap();
        let remaining = core::f64::consts::TAU - *t.times.last().unwrap();
        let target = State3::new(remaining.cos(), 0.0, -remaining.sin());
        assert!(last.distance(&target) < 1e-9);
        assert!(last.distance(&x0) < 1e-3);
    }

    #[test]
    fn y_decays_exponentially() {
        let id = DiffeoParams::identity(InnSpec::default()).unwrap();
        let cfg = IntegratorConfig::new(Method::Rk4, 1e-3, 5.0).unwrap();
        let t = integrate(&State3::new(1e-3, 1.0, 0.0), &id, &BaseParams::default(), &cfg).unwrap();
        for (time, s) in t.times.iter().zip(&t.states) {
            assert!((s.y - (-time).exp()).abs() < 1e-3);
        }
    }

    #[test]
    fn euler_and_rk4_converge_at_their_orders() {
        let params = smooth_params(4, 0.2);
        let base = BaseParams::default();
        let x0 = State3::new(0.5, 0.5, 0.5);
        let run = |m: Method, h: f64| *integrate(&x0, &params, &base, &IntegratorConfig::new(m, h, 1.0).unwrap()).unwrap().last().unwrap();
        for (m, order, h) in [(Method::Euler, 1.0, 0.01), (Method::Rk4, 4.0, 0.05)] {
            let a = run(m, h);
            let b = run(m, h / 2.0);
            let c = run(m, h / 4.0);
            let ratio = a.distance(&b) / b.distance(&c);
            let observed = ratio.log2();
            assert!((observed - order).abs() < 0.5, "{m:?}: observed order {observed}");
        }
    }

    #[test]
    fn distance_to_cycle_examples() {
        let cycle = crate::base::sample_base_cycle(360, &BaseParams::default()).unwrap();
        let d = distance_to_cycle(&State3::new(0.0, 0.0, 0.0), cycle.points()).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let gap = core::f64::consts::TAU / 360.0;
        let on = State3::new(0.3f64.cos(), 0.0, 0.3f64.sin());
        assert!(distance_to_cycle(&on, cycle.points()).unwrap() <= gap);
        assert!(distance_to_cycle(&on, &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let s = State3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let brute = cycle
                .points()
                .iter()
                .map(|c| s.distance(&State3::new(c[0], 0.0, c[1])))
                .fold(f64::INFINITY, f64::min);
            assert!((distance_to_cycle(&s, cycle.points()).unwrap() - brute).abs() < 1e-14);
        }
    }

    #[test]
    fn contact_points_filter_on_y() {
        let traj = Trajectory {
            times: vec![0.0, 1.0, 2.0],
            states: vec![State3::new(1.0, 1.0, 0.0), State3::new(2.0, 1.0, 0.0), State3::new(3.0, 1.0, 0.0)],
        };
        assert!(contact_points(&traj, CONTACT_THRESHOLD).is_empty());
        let cycle = crate::base::sample_base_cycle(16, &BaseParams::default()).unwrap();
        assert_eq!(evaluate_tracking(&traj, &cycle, &cycle), Err(Error::NoContact));

        let flat = Trajectory {
            times: vec![0.0, 1.0, 2.0],
            states: vec![State3::new(1.0, 0.0, 0.0), State3::new(2.0, 5e-5, 0.0), State3::new(3.0, -2e-5, 1.0)],
        };
        assert_eq!(contact_points(&flat, CONTACT_THRESHOLD), vec![[1.0, 0.0], [2.0, 0.0], [3.0, 1.0]]);
    }

    #[test]
    fn exact_tracking_scores_zero() {
        let cycle = crate::base::sample_base_cycle(64, &BaseParams::default()).unwrap();
        let traj = Trajectory {
            times: (0..64).map(|i| i as f64).collect(),
            states: cycle.points().iter().map(|p| State3::new(p[0], 0.0, p[1])).collect(),
        };
        let r = evaluate_tracking(&traj, &cycle, &cycle).unwrap();
        assert_eq!(r.hausdorff, 0.0);
        assert_eq!(r.contact_fraction, 1.0);
        assert_eq!(r.settle_time, Some(0.0));
    }

    #[test]
    fn settle_time_is_last_entry_into_the_band() {
        let cycle = [[1.0, 0.0]];
        let traj = Trajectory {
            times: vec![0.0, 1.0, 2.0, 3.0],
            states: vec![
                State3::new(1.0, 0.0, 0.0),
                State3::new(2.0, 0.0, 0.0),
                State3::new(1.005, 0.0, 0.0),
                State3::new(1.0, 0.0, 0.0),
            ],
        };
        assert_eq!(settle_time(&traj, &cycle, SETTLE_DISTANCE).unwrap(), Some(2.0));
        let away = Trajectory { times: vec![0.0], states: vec![State3::new(3.0, 0.0, 0.0)] };
        assert_eq!(settle_time(&away, &cycle, SETTLE_DISTANCE).unwrap(), None);
    }

    #[test]
    fn field_grid_shape_and_tangency() {
        let id = DiffeoParams::identity(InnSpec::default()).unwrap();
        let base = BaseParams::default();
        let region = Region2::new([-1.0, -1.0], [1.0, 1.0]).unwrap();
        let grid = vector_field_grid(&id, &base, &region, 5).unwrap();
        assert_eq!(grid.len(), 25);
        let at = grid.iter().find(|s| s.x == 1.0 && s.z == 0.0).unwrap();
        assert!(at.vx.abs() < 1e-15);
        assert!((at.vz - 1.0).abs() < 1e-15);
        assert_eq!(vector_field_grid(&id, &base, &region, 7).unwrap().len(), 49);
    }

    #[test]
    fn field_points_towards_the_mapped_cycle() {
        let params = random_params(6, 0.05);
        let base = BaseParams::default();
        let cycle = mapped_cycle(&params, &base, 2048).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..40 {
            let r = if rng.random::<bool>() { rng.random_range(0.3..0.8) } else { rng.random_range(1.2..2.0) };
            let th = rng.random_range(0.0..core::f64::consts::TAU);
            let x = full_map(&State3::new(r * th.cos(), 0.0, r * th.sin()), &params).unwrap();
            let v = learned_dynamics(&x, &params, &base).unwrap();
            let h = 1e-3;
            let d0 = distance_to_cycle(&x, cycle.points()).unwrap();
            let d1 = distance_to_cycle(&offset(&x, &v, h), cycle.points()).unwrap();
            assert!(d1 < d0, "probe at preimage radius {r} moves away from the cycle");
        }
    }

    fn max_conjugacy_gap(params: &DiffeoParams, seed: u64, cfg: &IntegratorConfig) -> f64 {
        let base = BaseParams::default();
        let mut rng = stream(seed, Stream::EvalStarts);
        let x0 = draw_starts(&mut rng, params, &base, 1, (0.0, 2.0)).unwrap()[0];
        let learned = integrate(&x0, params, &base, cfg).unwrap();
        let u0 = full_map_inverse(&x0, params).unwrap();
        let plain = integrate_base(&u0, &base, cfg).unwrap();
        learned.states.iter().zip(&plain.states).map(|(a, b)| a.distance(&full_map(b, params).unwrap())).fold(0.0, f64::max)
    }

    #[test]
    fn learned_rollout_is_the_image_of_the_base_rollout() {
        let cfg = IntegratorConfig::new(Method::Rk4, 1e-2, 3.0).unwrap();
        for seed in 0..3 {
            let gap = max_conjugacy_gap(&smooth_params(seed + 20, 0.2), seed, &cfg);
            assert!(gap < 1e-6, "seed {seed}: {gap}");
        }
    }

    #[test]
    fn piecewise_linear_subnets_keep_conjugacy_at_fine_steps() {
        let cfg = IntegratorConfig::new(Method::Rk4, 1e-3, 3.0).unwrap();
        for seed in 0..3 {
            let gap = max_conjugacy_gap(&random_params(seed + 20, 0.05), seed, &cfg);
            assert!(gap < 1e-3, "seed {seed}: {gap}");
        }
    }

    #[test]
    fn starts_respect_y_range() {
        let params = random_params(2, 0.05);
        let mut rng = stream(1, Stream::EvalStarts);
        for s in draw_starts(&mut rng, &params, &BaseParams::default(), 50, (0.5, 2.0)).unwrap() {
            assert!((0.5..=2.0).contains(&s.y.abs()));
        }
        assert!(draw_starts(&mut rng, &params, &BaseParams::default(), 1, (2.0, 1.0)).is_err());
    }

    #[test]
    fn best_circle_of_a_circle_is_itself() {
        let c = crate::base::sample_base_cycle(400, &BaseParams::new(1.0, 1.0, 1.3).unwrap()).unwrap();
        let (r, h) = best_circle_radius(&c, 4096).unwrap();
        assert!((r - 1.3).abs() < 1e-3, "{r}");
        let half_gap = 1.3 * (core::f64::consts::PI / 400.0).sin();
        assert!(h < half_gap + 1e-4, "{h}");
    }

    #[test]
    fn nonfinite_start_is_rejected() {
        let id = DiffeoParams::identity(InnSpec::default()).unwrap();
        let cfg = IntegratorConfig::new(Method::Euler, 0.1, 1.0).unwrap();
        assert!(integrate(&State3::new(f64::NAN, 0.0, 0.0), &id, &BaseParams::default(), &cfg).is_err());
    }

    #[test]
    fn blow_up_reports_step() {
        let cfg = IntegratorConfig::new(Method::Euler, 1.0, 50.0).unwrap();
        let r = integrate_field(&State3::new(1.0, 0.0, 0.0), &cfg, |s| Ok(Velocity3::new(s.x * 1e300, 0.0, 0.0)));
        assert!(matches!(r, Err(Error::IntegrationDiverged { step: 2 })));
    }
}

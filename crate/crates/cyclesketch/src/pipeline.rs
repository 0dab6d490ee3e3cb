//! Operations shared by the command line and the HTTP service.
//!
//! Models live in normalized coordinates. Everything here takes and returns
//! surface-plane units, converting through the checkpoint's shape transform
//! (a similarity, so `y` is scaled alongside `x` and `z`).

use cyclesketch_core::projection::{project_sketch, Vec3};
use cyclesketch_core::rng::{stream, Stream};
use cyclesketch_core::rollout::{
    best_circle_radius, draw_starts, evaluate_tracking, integrate, vector_field_grid, FieldSample,
    EVAL_CYCLE_SAMPLES,
};
use cyclesketch_core::train::{mapped_cycle, train_observed, TrainObserver};
use cyclesketch_core::{
    CameraModel, Error, IntegratorConfig, Point2, PointSet2, Region2, SketchPoint, State3, SurfacePlane, Trajectory,
};
use serde::Serialize;

use crate::checkpoint::{ModelCheckpoint, TrainingMeta};
use crate::formats::{RunConfig, Target, SCHEMA_VERSION};

/// `|y|` range of evaluation start states, in normalized units.
pub const EVAL_START_HEIGHT: (f64, f64) = (0.5, 2.0);
/// Circle samples used when fitting the base-system baseline.
pub const BASELINE_CIRCLE_SAMPLES: usize = 4096;

pub fn project(cam: &CameraModel, sketch: &[SketchPoint], plane: &SurfacePlane, hint_x: Vec3) -> cyclesketch_core::Result<Target> {
    let (points, transform) = project_sketch(cam, sketch, plane, hint_x)?;
    Ok(Target { points, transform })
}

pub fn train_model<O: TrainObserver + ?Sized>(
    target: &Target,
    run: &RunConfig,
    observer: &mut O,
) -> cyclesketch_core::Result<ModelCheckpoint> {
    let report = train_observed(&target.points, &run.base, &run.train, None, observer)?;
    Ok(ModelCheckpoint {
        base: run.base,
        params: report.final_params.clone(),
        shape_transform: target.transform,
        training: TrainingMeta {
            seed: run.train.seed,
            epochs: report.loss_history.len(),
            best_epoch: report.best_epoch,
            loss: report.best_loss(),
        },
    })
}

pub fn to_model_frame(ckpt: &ModelCheckpoint, p: [f64; 3]) -> State3 {
    let t = &ckpt.shape_transform;
    State3::new((p[0] - t.translation[0]) / t.scale, p[1] / t.scale, (p[2] - t.translation[1]) / t.scale)
}

pub fn to_plane_frame(ckpt: &ModelCheckpoint, s: &State3) -> [f64; 3] {
    let t = &ckpt.shape_transform;
    [t.scale * s.x + t.translation[0], t.scale * s.y, t.scale * s.z + t.translation[1]]
}

/// Rollout from `start`, both in plane units.
pub fn rollout(ckpt: &ModelCheckpoint, start: [f64; 3], cfg: &IntegratorConfig) -> cyclesketch_core::Result<Trajectory> {
    let x0 = to_model_frame(ckpt, start);
    let mut traj = integrate(&x0, &ckpt.params, &ckpt.base, cfg)?;
    for s in &mut traj.states {
        *s = State3::from_array(to_plane_frame(ckpt, s));
    }
    Ok(traj)
}

/// `k` samples of the learned cycle in plane units.
pub fn cycle(ckpt: &ModelCheckpoint, k: usize) -> cyclesketch_core::Result<Vec<Point2>> {
    let c = mapped_cycle(&ckpt.params, &ckpt.base, k)?;
    Ok(ckpt.shape_transform.denormalize(&c).into_inner())
}

/// Learned field on the surface over `region` (plane units).
pub fn field(ckpt: &ModelCheckpoint, region: &Region2, resolution: usize) -> cyclesketch_core::Result<Vec<FieldSample>> {
    let t = &ckpt.shape_transform;
    let local = Region2::new(t.normalize_point(region.min), t.normalize_point(region.max))?;
    let mut grid = vector_field_grid(&ckpt.params, &ckpt.base, &local, resolution)?;
    for s in &mut grid {
        [s.x, s.z] = t.denormalize_point([s.x, s.z]);
        s.vx *= t.scale;
        s.vz *= t.scale;
    }
    Ok(grid)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct IntegratorJson {
    pub method: &'static str,
    pub step: f64,
    pub duration: f64,
}

impl From<&IntegratorConfig> for IntegratorJson {
    fn from(c: &IntegratorConfig) -> Self {
        Self { method: c.method().name(), step: c.step(), duration: c.duration() }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunReport {
    pub start: [f64; 3],
    /// `None` when the rollout never touched the surface.
    pub hausdorff: Option<f64>,
    pub contact_fraction: f64,
    pub settle_time: Option<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BaselineReport {
    pub radius: f64,
    pub hausdorff: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub v: u32,
    pub seed: u64,
    pub integrator: IntegratorJson,
    pub runs: Vec<RunReport>,
    /// Worst run; `None` if any run missed the surface.
    pub hausdorff_max: Option<f64>,
    pub hausdorff_mean: Option<f64>,
    /// Best origin-centered circle, i.e. the untrained base system with a
    /// tuned radius.
    pub baseline: BaselineReport,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

/// Rolls out `starts` seeded starts and scores each against `target`.
/// Distances are reported in plane units.
pub fn evaluate(
    ckpt: &ModelCheckpoint,
    target: &Target,
    starts: usize,
    seed: u64,
    cfg: &IntegratorConfig,
) -> cyclesketch_core::Result<EvalReport> {
    let tf = &ckpt.shape_transform;
    let local: Vec<Point2> = target.plane_points().points().iter().map(|&p| tf.normalize_point(p)).collect();
    let local = PointSet2::new(local)?;
    let learned = mapped_cycle(&ckpt.params, &ckpt.base, EVAL_CYCLE_SAMPLES)?;
    let mut rng = stream(seed, Stream::EvalStarts);
    let xs = draw_starts(&mut rng, &ckpt.params, &ckpt.base, starts, EVAL_START_HEIGHT)?;

    let mut runs = Vec::with_capacity(starts);
    for x0 in &xs {
        let traj = integrate(x0, &ckpt.params, &ckpt.base, cfg)?;
        let run = match evaluate_tracking(&traj, &local, &learned) {
            Ok(r) => RunReport {
                start: to_plane_frame(ckpt, x0),
                hausdorff: Some(r.hausdorff * tf.scale),
                contact_fraction: r.contact_fraction,
                settle_time: r.settle_time,
            },
            Err(Error::NoContact) => {
                RunReport { start: to_plane_frame(ckpt, x0), hausdorff: None, contact_fraction: 0.0, settle_time: None }
            }
            Err(e) => return Err(e),
        };
        runs.push(run);
    }
    let all: Option<Vec<f64>> = runs.iter().map(|r| r.hausdorff).collect();
    let (hausdorff_max, hausdorff_mean) = match all {
        Some(v) if !v.is_empty() => {
            (Some(v.iter().copied().fold(0.0, f64::max)), Some(v.iter().sum::<f64>() / v.len() as f64))
        }
        _ => (None, None),
    };
    let (radius, h) = best_circle_radius(&local, BASELINE_CIRCLE_SAMPLES)?;
    Ok(EvalReport {
        v: SCHEMA_VERSION,
        seed,
        integrator: cfg.into(),
        runs,
        hausdorff_max,
        hausdorff_mean,
        baseline: BaselineReport { radius: radius * tf.scale, hausdorff: h * tf.scale },
    })
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

/// CSV with header `t,x,y,z`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,x,y,z\n");
    for (t, s) in traj.times.iter().zip(&traj.states) {
        out.push_str(&format!("{},{},{},{}\n", num(*t), num(s.x), num(s.y), num(s.z)));
    }
    out
}

/// CSV with header `x,z,vx,vz`.
pub fn field_csv(grid: &[FieldSample]) -> String {
    let mut out = String::from("x,z,vx,vz\n");
    for s in grid {
        out.push_str(&format!("{},{},{},{}\n", num(s.x), num(s.z), num(s.vx), num(s.vz)));
    }
    out
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TrajectoryJson {
    pub v: u32,
    pub times: Vec<f64>,
    pub states: Vec<[f64; 3]>,
}

impl From<&Trajectory> for TrajectoryJson {
    fn from(t: &Trajectory) -> Self {
        Self { v: SCHEMA_VERSION, times: t.times.clone(), states: t.states.iter().map(|s| s.to_array()).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cyclesketch_core::train::LossTerms;
    use cyclesketch_core::{BaseParams, DiffeoParams, InnSpec, Method, ShapeTransform};

    fn identity_model(scale: f64, shift: [f64; 2]) -> ModelCheckpoint {
        ModelCheckpoint {
            base: BaseParams::default(),
            params: DiffeoParams::identity(InnSpec::default()).unwrap(),
            shape_transform: ShapeTransform::new(shift, scale).unwrap(),
            training: TrainingMeta {
                seed: 0,
                epochs: 0,
                best_epoch: 0,
                loss: LossTerms { total: 0.0, hausdorff: 0.0, regularizer: 0.0 },
            },
        }
    }

    #[test]
    fn frames_are_inverse() {
        let m = identity_model(2.5, [1.0, -4.0]);
        let p = [0.3, 0.7, -1.1];
        let back = to_plane_frame(&m, &to_model_frame(&m, p));
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn cycle_is_denormalized() {
        let m = identity_model(2.0, [10.0, 5.0]);
        let c = cycle(&m, 4).unwrap();
        assert!((c[0][0] - 12.0).abs() < 1e-12 && (c[0][1] - 5.0).abs() < 1e-12);
        assert!((c[1][0] - 10.0).abs() < 1e-12 && (c[1][1] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn field_scales_velocities() {
        let m = identity_model(2.0, [10.0, 5.0]);
        let region = Region2::new([8.0, 3.0], [12.0, 7.0]).unwrap();
        let grid = field(&m, &region, 3).unwrap();
        let s = grid.iter().find(|s| s.x == 12.0 && s.z == 5.0).unwrap();
        assert!(s.vx.abs() < 1e-12 && (s.vz - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rollout_stays_on_scaled_cycle() {
        let m = identity_model(2.0, [1.0, 1.0]);
        let cfg = IntegratorConfig::new(Method::Rk4, 1e-2, 1.0).unwrap();
        let t = rollout(&m, [3.0, 0.0, 1.0], &cfg).unwrap();
        for s in &t.states {
            assert!((((s.x - 1.0).powi(2) + (s.z - 1.0).powi(2)).sqrt() - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn csv_headers() {
        let t = Trajectory { times: vec![0.0, 0.5], states: vec![State3::new(1.0, 2.0, 3.0); 2] };
        assert_eq!(trajectory_csv(&t), "t,x,y,z\n0.0,1.0,2.0,3.0\n0.5,1.0,2.0,3.0\n");
        let g = [FieldSample { x: 0.0, z: 1.0, vx: -1.0, vz: 0.25 }];
        assert_eq!(field_csv(&g), "x,z,vx,vz\n0.0,1.0,-1.0,0.25\n");
    }
}

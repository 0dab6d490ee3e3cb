//! Input files: sketches, cameras, planes, projected targets and training
//! configuration.

use std::path::Path;

use cyclesketch_core::inn::Activation;
use cyclesketch_core::projection::Vec3;
use cyclesketch_core::train::LrSchedule;
use cyclesketch_core::{
    BaseParams, CameraModel, InnSpec, PointSet2, Region2, ShapeTransform, SketchPoint, SubnetSpec, SurfacePlane,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Version tag carried by every JSON document this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

fn read_text(path: &Path) -> AppResult<String> {
    std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

fn is_csv(path: &Path, text: &str) -> bool {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => ext.eq_ignore_ascii_case("csv"),
        None => !text.trim_start().starts_with(['[', '{']),
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchPointJson {
    pub u: f64,
    pub v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SketchJson {
    Bare(Vec<SketchPointJson>),
    Tagged { v: u32, points: Vec<SketchPointJson> },
}

pub fn sketch_points(raw: &[SketchPointJson]) -> cyclesketch_core::Result<Vec<SketchPoint>> {
    raw.iter().map(|p| SketchPoint::new(p.u, p.v, p.depth)).collect()
}

pub fn parse_sketch_json(text: &str) -> Result<Vec<SketchPointJson>, String> {
    match serde_json::from_str::<SketchJson>(text).map_err(|e| e.to_string())? {
        SketchJson::Bare(points) => Ok(points),
        SketchJson::Tagged { v, points } if v == SCHEMA_VERSION => Ok(points),
        SketchJson::Tagged { v, .. } => Err(format!("unsupported schema version {v}")),
    }
}

pub fn parse_sketch_csv(text: &str) -> Result<Vec<SketchPointJson>, String> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != ["u", "v"] && names != ["u", "v", "depth"] {
        return Err(format!("expected header u,v[,depth], found {}", names.join(",")));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let num = |k: usize| -> Result<f64, String> {
            record.get(k).unwrap_or("").parse().map_err(|_| format!("row {}: bad number in column {}", i + 1, names[k]))
        };
        let depth = match record.get(2) {
            Some(s) if !s.is_empty() => Some(num(2)?),
            _ => None,
        };
        out.push(SketchPointJson { u: num(0)?, v: num(1)?, depth });
    }
    Ok(out)
}

/// Sketch file: a JSON array of `{u, v, depth?}` or CSV with header
/// `u,v[,depth]`, rows in drawing order.
pub fn read_sketch(path: &Path) -> AppResult<Vec<SketchPoint>> {
    let text = read_text(path)?;
    let raw = if is_csv(path, &text) { parse_sketch_csv(&text) } else { parse_sketch_json(&text) }
        .map_err(|m| AppError::format(path, m))?;
    sketch_points(&raw).map_err(|e| AppError::format(path, e))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl CameraJson {
    pub fn to_model(&self) -> cyclesketch_core::Result<CameraModel> {
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.position, self.orientation)
    }

    pub fn from_model(cam: &CameraModel) -> Self {
        Self {
            fx: cam.fx(),
            fy: cam.fy(),
            cx: cam.cx(),
            cy: cam.cy(),
            position: cam.position(),
            orientation: cam.orientation(),
        }
    }
}

pub fn read_camera(path: &Path) -> AppResult<CameraModel> {
    let json: CameraJson = serde_json::from_str(&read_text(path)?).map_err(|e| AppError::format(path, e))?;
    json.to_model().map_err(|e| AppError::format(path, e))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlaneJson {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub hint_x: [f64; 3],
}

impl PlaneJson {
    pub fn ground() -> Self {
        Self { point: [0.0; 3], normal: [0.0, 1.0, 0.0], hint_x: [1.0, 0.0, 0.0] }
    }

    pub fn to_model(&self) -> cyclesketch_core::Result<(SurfacePlane, Vec3)> {
        Ok((SurfacePlane::new(self.point, self.normal)?, self.hint_x))
    }
}

pub fn read_plane(path: &Path) -> AppResult<(SurfacePlane, Vec3)> {
    let json: PlaneJson = serde_json::from_str(&read_text(path)?).map_err(|e| AppError::format(path, e))?;
    json.to_model().map_err(|e| AppError::format(path, e))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransformJson {
    pub translation: [f64; 2],
    pub scale: f64,
}

impl From<ShapeTransform> for TransformJson {
    fn from(t: ShapeTransform) -> Self {
        Self { translation: t.translation, scale: t.scale }
    }
}

impl TransformJson {
    pub fn to_model(&self) -> cyclesketch_core::Result<ShapeTransform> {
        ShapeTransform::new(self.translation, self.scale)
    }
}

/// A normalized training target and the transform back to plane units.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub points: PointSet2,
    pub transform: ShapeTransform,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetJson {
    v: u32,
    points: Vec<[f64; 2]>,
    shape_transform: TransformJson,
}

impl Target {
    pub fn to_json(&self) -> String {
        let doc = TargetJson {
            v: SCHEMA_VERSION,
            points: self.points.points().to_vec(),
            shape_transform: self.transform.into(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("target serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: TargetJson = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.v != SCHEMA_VERSION {
            return Err(format!("unsupported schema version {}", doc.v));
        }
        Ok(Self {
            points: PointSet2::new(doc.points).map_err(|e| e.to_string())?,
            transform: doc.shape_transform.to_model().map_err(|e| e.to_string())?,
        })
    }

    /// CSV with header `x,z`: points taken as already normalized.
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| e.to_string())?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x", "z"] {
            return Err("expected header x,z".into());
        }
        let mut points = Vec::new();
        for (i, record) in reader.deserialize::<(f64, f64)>().enumerate() {
            let (x, z) = record.map_err(|e| format!("row {}: {e}", i + 1))?;
            points.push([x, z]);
        }
        Ok(Self {
            points: PointSet2::new(points).map_err(|e| e.to_string())?,
            transform: ShapeTransform::identity(),
        })
    }

    /// Target points in surface-plane units.
    pub fn plane_points(&self) -> PointSet2 {
        self.transform.denormalize(&self.points)
    }
}

pub fn read_target(path: &Path) -> AppResult<Target> {
    let text = read_text(path)?;
    if is_csv(path, &text) { Target::from_csv(&text) } else { Target::from_json(&text) }
        .map_err(|m| AppError::format(path, m))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleJson {
    Constant,
    Cosine { final_fraction: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureJson {
    pub block_count: Option<usize>,
    pub hidden_layers: Option<Vec<usize>>,
    pub activation: Option<String>,
    pub scale_clamp: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BaseJson {
    pub mu: Option<f64>,
    pub alpha_y: Option<f64>,
    pub radius: Option<f64>,
}

/// Training configuration as stored in config files and sent to the
/// service. Omitted fields keep their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigJson {
    pub epochs: Option<usize>,
    pub cycle_samples: Option<usize>,
    pub reg_weight: Option<f64>,
    pub reg_samples: Option<usize>,
    /// `[x0, z0, x1, z1]` in normalized coordinates.
    pub reg_region: Option<[f64; 4]>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub schedule: Option<ScheduleJson>,
    pub seed: Option<u64>,
    pub architecture: Option<ArchitectureJson>,
    pub base: Option<BaseJson>,
}

/// Everything a training run needs besides the target.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub base: BaseParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), base: BaseParams::default() }
    }
}

impl ConfigJson {
    pub fn resolve(&self) -> cyclesketch_core::Result<RunConfig> {
        let mut t = TrainConfig::default();
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.cycle_samples {
            t.cycle_samples = v;
        }
        if let Some(v) = self.reg_weight {
            t.reg_weight = v;
        }
        if let Some(v) = self.reg_samples {
            t.reg_samples = v;
        }
        if let Some([x0, z0, x1, z1]) = self.reg_region {
            t.reg_region = Some(Region2::new([x0, z0], [x1, z1])?);
        }
        if let Some(v) = self.learning_rate {
            t.adam.lr = v;
        }
        if let Some(v) = self.beta1 {
            t.adam.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            t.adam.beta2 = v;
        }
        if let Some(v) = self.epsilon {
            t.adam.epsilon = v;
        }
        if let Some(s) = self.schedule {
            t.schedule = match s {
                ScheduleJson::Constant => LrSchedule::Constant,
                ScheduleJson::Cosine { final_fraction } => LrSchedule::Cosine { final_fraction },
            };
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(a) = &self.architecture {
            let mut spec: InnSpec = t.architecture.clone();
            if let Some(v) = a.block_count {
                spec.block_count = v;
            }
            let hidden = a.hidden_layers.clone().unwrap_or_else(|| spec.subnet.hidden_layers.clone());
            let activation = match &a.activation {
                Some(name) => Activation::from_name(name).ok_or_else(|| {
                    cyclesketch_core::Error::InvalidArgument(format!("unknown activation {name:?}"))
                })?,
                None => spec.subnet.activation,
            };
            spec.subnet = SubnetSpec::coupling(hidden, activation);
            if let Some(v) = a.scale_clamp {
                spec.scale_clamp = v;
            }
            t.architecture = spec;
        }
        let defaults = BaseParams::default();
        let b = self.base.unwrap_or_default();
        let base = BaseParams::new(
            b.mu.unwrap_or(defaults.mu()),
            b.alpha_y.unwrap_or(defaults.alpha_y()),
            b.radius.unwrap_or(defaults.radius()),
        )?;
        t.validate()?;
        Ok(RunConfig { train: t, base })
    }
}

pub fn read_config(path: &Path) -> AppResult<ConfigJson> {
    serde_json::from_str(&read_text(path)?).map_err(|e| AppError::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sketch_json_and_csv_agree() {
        let json = r#"[{"u": 1.5, "v": 2, "depth": 0.5}, {"u": 3, "v": 4, "depth": 1}]"#;
        let csv = "u,v,depth\n1.5,2,0.5\n3,4,1\n";
        let a = parse_sketch_json(json).unwrap();
        let b = parse_sketch_csv(csv).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let tagged = r#"{"v": 1, "points": [{"u": 1, "v": 2}]}"#;
        assert_eq!(parse_sketch_json(tagged).unwrap()[0].depth, None);
        assert!(parse_sketch_json(r#"{"v": 2, "points": []}"#).is_err());
        assert!(parse_sketch_csv("a,b\n1,2\n").is_err());
        assert!(parse_sketch_csv("u,v\n1,x\n").is_err());
        assert_eq!(parse_sketch_csv("u,v,depth\n1,2,\n").unwrap()[0].depth, None);
    }

    #[test]
    fn target_round_trip() {
        let t = Target {
            points: PointSet2::new(vec![[0.1, 0.2], [1.0 / 3.0, -1.0], [2.0, 0.0]]).unwrap(),
            transform: ShapeTransform::new([1.0, 2.0], 0.5).unwrap(),
        };
        let back = Target::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let csv = Target::from_csv("x,z\n0,1\n1,0\n-1,0\n").unwrap();
        assert_eq!(csv.transform, ShapeTransform::identity());
        assert!(Target::from_csv("x,z\n0,1\n").is_err());
    }

    #[test]
    fn config_defaults_and_overrides() {
        let empty: ConfigJson = serde_json::from_str("{}").unwrap();
        assert_eq!(empty.resolve().unwrap(), RunConfig::default());
        let c: ConfigJson = serde_json::from_str(
            r#"{"epochs": 10, "learning_rate": 0.01, "schedule": {"kind": "constant"},
                "architecture": {"hidden_layers": [8], "activation": "tanh"}, "base": {"radius": 2}}"#,
        )
        .unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.train.epochs, 10);
        assert_eq!(r.train.adam.lr, 0.01);
        assert_eq!(r.train.schedule, LrSchedule::Constant);
        assert_eq!(r.train.architecture.subnet.hidden_layers, vec![8]);
        assert_eq!(r.train.architecture.subnet.activation, Activation::Tanh);
        assert_eq!(r.base.radius(), 2.0);
        assert!(serde_json::from_str::<ConfigJson>(r#"{"epoch": 3}"#).is_err());
        let bad: ConfigJson = serde_json::from_str(r#"{"epochs": 0}"#).unwrap();
        assert!(bad.resolve().is_err());
    }
}

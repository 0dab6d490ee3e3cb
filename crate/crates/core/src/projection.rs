//! From sketch pixels to a normalized target curve on the surface plane.
//!
//! Pixels follow the image convention: `u` grows rightward, `v` downward,
//! origin at the top-left corner. Depths are distances along the unit ray.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::points::{Point2, PointSet2};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const UNIT_TOLERANCE: f64 = 1e-9;
const PARALLEL_TOLERANCE: f64 = 1e-9;

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm3(a: Vec3) -> f64 {
    math::sqrt(dot3(a, a))
}

fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn finite3(v: Vec3, what: &'static str) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Pinhole camera. `orientation` is the camera-to-world rotation as a unit
/// quaternion `[w, x, y, z]`; the optical axis is the camera's `+z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    position: Vec3,
    orientation: [f64; 4],
    rotation: Mat3,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, position: Vec3, orientation: [f64; 4]) -> Result<Self> {
        for (name, v) in [("fx", fx), ("fy", fy)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::arg(format!("{name} must be positive and finite")));
            }
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::NonFinite("principal point"));
        }
        finite3(position, "camera position")?;
        if orientation.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("camera orientation"));
        }
        let n = math::sqrt(orientation.iter().map(|c| c * c).sum());
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::arg("camera orientation must be a unit quaternion"));
        }
        Ok(Self { fx, fy, cx, cy, position, orientation, rotation: quaternion_matrix(orientation) })
    }

    /// A 640×480 camera two units above the origin looking straight down at
    /// `y = 0`. Image `u` maps to world `+x`, image `v` to world `+z`.
    pub fn overhead() -> Self {
        let h = core::f64::consts::FRAC_1_SQRT_2;
        Self::new(500.0, 500.0, 320.0, 240.0, [0.0, 2.0, 0.0], [h, h, 0.0, 0.0])
            .expect("overhead camera is valid")
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    pub fn orientation(&self) -> [f64; 4] {
        self.orientation
    }

    /// Camera-to-world rotation matrix.
    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    /// Pixel coordinates of a world point in front of the camera.
    pub fn project(&self, p: Vec3) -> Result<[f64; 2]> {
        finite3(p, "world point")?;
        let c = mat_t_vec(&self.rotation, sub3(p, self.position));
        if c[2] <= 0.0 {
            return Err(Error::Geometry("point lies behind the camera".into()));
        }
        Ok([self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy])
    }
}

fn quaternion_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchPoint {
    pub u: f64,
    pub v: f64,
    /// Distance along the pixel ray, when a depth channel exists.
    pub depth: Option<f64>,
}

impl SketchPoint {
    pub fn new(u: f64, v: f64, depth: Option<f64>) -> Result<Self> {
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite("pixel coordinate"));
        }
        if let Some(d) = depth {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::arg("depth must be positive and finite"));
            }
        }
        Ok(Self { u, v, depth })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePlane {
    point: Vec3,
    normal: Vec3,
}

impl SurfacePlane {
    pub fn new(point: Vec3, normal: Vec3) -> Result<Self> {
        finite3(point, "plane point")?;
        finite3(normal, "plane normal")?;
        if (norm3(normal) - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::arg("plane normal must have unit length"));
        }
        Ok(Self { point, normal })
    }

    /// The plane `y = 0` with normal `+y`.
    pub fn ground() -> Self {
        Self { point: [0.0; 3], normal: [0.0, 1.0, 0.0] }
    }

    pub fn point(&self) -> Vec3 {
        self.point
    }

    pub fn normal(&self) -> Vec3 {
        self.normal
    }
}

/// Maps normalized coordinates back to surface-plane coordinates:
/// `p ↦ scale · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeTransform {
    pub translation: Point2,
    pub scale: f64,
}

impl ShapeTransform {
    pub fn new(translation: Point2, scale: f64) -> Result<Self> {
        if !(translation[0].is_finite() && translation[1].is_finite()) {
            return Err(Error::NonFinite("translation"));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::arg("scale must be positive and finite"));
        }
        Ok(Self { translation, scale })
    }

    pub fn identity() -> Self {
        Self { translation: [0.0; 2], scale: 1.0 }
    }

    pub fn denormalize_point(&self, p: Point2) -> Point2 {
        [self.scale * p[0] + self.translation[0], self.scale * p[1] + self.translation[1]]
    }

    pub fn normalize_point(&self, p: Point2) -> Point2 {
        [(p[0] - self.translation[0]) / self.scale, (p[1] - self.translation[1]) / self.scale]
    }

    pub fn denormalize(&self, points: &PointSet2) -> PointSet2 {
        let pts = points.points().iter().map(|&p| self.denormalize_point(p)).collect();
        PointSet2::new(pts).expect("an affine image of a valid set is valid")
    }
}

/// `p ↦ rotation · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add3(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn apply_inverse(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub3(p, self.translation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add3(self.origin, scale3(self.direction, t))
    }
}

pub fn pixel_ray(cam: &CameraModel, u: f64, v: f64) -> Result<Ray> {
    if !(u.is_finite() && v.is_finite()) {
        return Err(Error::NonFinite("pixel coordinate"));
    }
    let local = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
    let d = mat_vec(&cam.rotation, local);
    Ok(Ray { origin: cam.position, direction: scale3(d, 1.0 / norm3(d)) })
}

pub fn trace_with_depth(cam: &CameraModel, sp: &SketchPoint) -> Result<Vec3> {
    let depth = sp.depth.ok_or_else(|| Error::arg("sketch point has no depth"))?;
    Ok(pixel_ray(cam, sp.u, sp.v)?.at(depth))
}

/// Ray parameter of the intersection with `plane`.
pub fn ray_plane_distance(ray: &Ray, plane: &SurfacePlane) -> Result<f64> {
    let denom = dot3(ray.direction, plane.normal);
    if denom.abs() <= PARALLEL_TOLERANCE {
        return Err(Error::Geometry("ray is parallel to the surface plane".into()));
    }
    let t = dot3(sub3(plane.point, ray.origin), plane.normal) / denom;
    if t <= 0.0 {
        return Err(Error::Geometry("surface plane lies behind the camera".into()));
    }
    Ok(t)
}

pub fn trace_to_plane(cam: &CameraModel, u: f64, v: f64, plane: &SurfacePlane) -> Result<Vec3> {
    let ray = pixel_ray(cam, u, v)?;
    Ok(ray.at(ray_plane_distance(&ray, plane)?))
}

/// Rigid transform taking `plane` to `y = 0`, its normal to `+y` and the
/// in-plane component of `hint_x` to `+x`.
pub fn plane_frame(plane: &SurfacePlane, hint_x: Vec3) -> Result<RigidTransform> {
    finite3(hint_x, "hint_x")?;
    let n = plane.normal;
    let along = sub3(hint_x, scale3(n, dot3(hint_x, n)));
    let len = norm3(along);
    if len <= UNIT_TOLERANCE * norm3(hint_x).max(1.0) {
        return Err(Error::arg("hint_x is parallel to the plane normal"));
    }
    let ex = scale3(along, 1.0 / len);
    let ez = cross(ex, n);
    let rotation = [ex, n, ez];
    let translation = scale3(mat_vec(&rotation, plane.point), -1.0);
    Ok(RigidTransform { rotation, translation })
}

/// Centers the centroid at the origin and scales to unit mean radius.
pub fn normalize_shape(points: &PointSet2) -> Result<(PointSet2, ShapeTransform)> {
    let pts = points.points();
    let n = pts.len() as f64;
    let c = pts.iter().fold([0.0; 2], |c, p| [c[0] + p[0], c[1] + p[1]]);
    let c = [c[0] / n, c[1] / n];
    let mean_radius = pts.iter().map(|p| math::hypot(p[0] - c[0], p[1] - c[1])).sum::<f64>() / n;
    if !(mean_radius > 0.0) {
        return Err(Error::Geometry("all sketch points coincide".into()));
    }
    let transform = ShapeTransform { translation: c, scale: mean_radius };
    let out = pts.iter().map(|&p| transform.normalize_point(p)).collect();
    Ok((PointSet2::new(out)?, transform))
}

/// Traces `sketch` onto `plane`, expresses the points in the plane's frame
/// and normalizes them. Uses depths when every point has one and the plane
/// intersection when none has.
pub fn project_sketch(
    cam: &CameraModel,
    sketch: &[SketchPoint],
    plane: &SurfacePlane,
    hint_x: Vec3,
) -> Result<(PointSet2, ShapeTransform)> {
    let mut distinct: Vec<(u64, u64)> = sketch.iter().map(|p| (p.u.to_bits(), p.v.to_bits())).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < PointSet2::MIN_POINTS {
        return Err(Error::arg("a sketch needs at least 3 points at distinct pixels"));
    }
    let with_depth = sketch.iter().filter(|p| p.depth.is_some()).count();
    if with_depth != 0 && with_depth != sketch.len() {
        return Err(Error::arg("either all sketch points carry a depth or none does"));
    }
    let frame = plane_frame(plane, hint_x)?;
    let mut flat = Vec::with_capacity(sketch.len());
    for sp in sketch {
        let world = if with_depth > 0 { trace_with_depth(cam, sp)? } else { trace_to_plane(cam, sp.u, sp.v, plane)? };
        let local = frame.apply(world);
        flat.push([local[0], local[2]]);
    }
    normalize_shape(&PointSet2::new(flat)?)
}

/// Pixel position of a normalized plane point: the inverse of
/// [`project_sketch`] for points on the surface.
pub fn reproject(
    cam: &CameraModel,
    plane: &SurfacePlane,
    hint_x: Vec3,
    transform: &ShapeTransform,
    p: Point2,
) -> Result<[f64; 2]> {
    let frame = plane_frame(plane, hint_x)?;
    let q = transform.denormalize_point(p);
    cam.project(frame.apply_inverse([q[0], 0.0, q[1]]))
}

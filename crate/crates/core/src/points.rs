use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A point in surface-plane coordinates `(x, z)`.
pub type Point2 = [f64; 2];

/// Ordered, finite, closed-curve samples on the surface plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet2 {
    points: Vec<Point2>,
}

impl PointSet2 {
    pub const MIN_POINTS: usize = 3;

    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() < Self::MIN_POINTS {
            return Err(Error::arg("a point set needs at least 3 points"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinate"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_inner(self) -> Vec<Point2> {
        self.points
    }

    /// Axis-aligned bounds as `(min, max)`.
    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.points {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }
}

impl AsRef<[Point2]> for PointSet2 {
    fn as_ref(&self) -> &[Point2] {
        &self.points
    }
}

/// Axis-aligned 2D box `[x0, x1] × [z0, z1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region2 {
    pub min: Point2,
    pub max: Point2,
}

impl Region2 {
    pub fn new(min: Point2, max: Point2) -> Result<Self> {
        if min.iter().chain(&max).any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("region bound"));
        }
        if !(min[0] < max[0] && min[1] < max[1]) {
            return Err(Error::arg("region must have min < max on both axes"));
        }
        Ok(Self { min, max })
    }

    /// Bounding box of `points` grown by `fraction` of its extent (split
    /// evenly on both sides of each axis).
    pub fn inflated_bounds(points: &PointSet2, fraction: f64) -> Self {
        let (lo, hi) = points.bounds();
        let mut min = lo;
        let mut max = hi;
        for i in 0..2 {
            let mut pad = 0.5 * fraction * (hi[i] - lo[i]);
            if pad <= 0.0 {
                pad = 0.5;
            }
            min[i] -= pad;
            max[i] += pad;
        }
        Self { min, max }
    }
}

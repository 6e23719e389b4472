//! Oriented boxes and point-cloud primitives.
//!
//! Boxes rotate about the vertical axis only. In a box's local frame the
//! length `l` runs along x, the width `w` along y and the height `h` along z.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Tolerance used for inclusive containment tests and polygon vertex merging.
pub const GEOM_EPS: f64 = 1e-9;

/// Wraps an angle into (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut y = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSize {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl BoxSize {
    pub fn new(h: f64, w: f64, l: f64) -> Self {
        Self { h, w, l }
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * (self.h * self.h + self.w * self.w + self.l * self.l).sqrt()
    }
}

/// An oriented 3D bounding box: center, extents and yaw about z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    center: Point3,
    size: BoxSize,
    yaw: f64,
}

impl Box3D {
    /// Validates extents and center, normalizing yaw into (-pi, pi].
    pub fn new(center: Point3, size: BoxSize, yaw: f64) -> Result<Self> {
        let BoxSize { h, w, l } = size;
        if !(h.is_finite() && w.is_finite() && l.is_finite()) || h <= 0.0 || w <= 0.0 || l <= 0.0
        {
            return Err(Error::InvalidBox(format!(
                "extents must be positive and finite, got h={h} w={w} l={l}"
            )));
        }
        if !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidBox("center must be finite".into()));
        }
        if !yaw.is_finite() {
            return Err(Error::InvalidBox("yaw must be finite".into()));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
        })
    }

    /// Axis-aligned box at the origin.
    pub fn at_origin(size: BoxSize) -> Result<Self> {
        Self::new(Point3::zeros(), size, 0.0)
    }

    pub fn center(&self) -> Point3 {
        self.center
    }

    pub fn size(&self) -> BoxSize {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn with_center(&self, center: Point3) -> Self {
        Self { center, ..*self }
    }

    pub fn with_yaw(&self, yaw: f64) -> Self {
        Self {
            yaw: normalize_yaw(yaw),
            ..*self
        }
    }

    pub fn volume(&self) -> f64 {
        self.size.volume()
    }

    /// Maps a local-frame point into the world frame.
    pub fn local_to_world(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        Point3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z) + self.center
    }

    /// Maps a world-frame point into the box's local frame.
    pub fn world_to_local(&self, p: &Point3) -> Point3 {
        let d = p - self.center;
        let (s, c) = self.yaw.sin_cos();
        Point3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Expresses `other` in this box's local frame.
    pub fn box_to_local(&self, other: &Box3D) -> Box3D {
        Box3D {
            center: self.world_to_local(&other.center),
            size: other.size,
            yaw: normalize_yaw(other.yaw - self.yaw),
        }
    }

    /// Inverse of [`Box3D::box_to_local`].
    pub fn box_to_world(&self, local: &Box3D) -> Box3D {
        Box3D {
            center: self.local_to_world(&local.center),
            size: local.size,
            yaw: normalize_yaw(local.yaw + self.yaw),
        }
    }

    fn footprint(&self) -> [Vector2<f64>; 4] {
        let (hl, hw) = (0.5 * self.size.l, 0.5 * self.size.w);
        let (s, c) = self.yaw.sin_cos();
        let at = |x: f64, y: f64| {
            Vector2::new(
                c * x - s * y + self.center.x,
                s * x + c * y + self.center.y,
            )
        };
        // counter-clockwise
        [at(-hl, -hw), at(hl, -hw), at(hl, hw), at(-hl, hw)]
    }

    fn z_range(&self) -> (f64, f64) {
        let hh = 0.5 * self.size.h;
        (self.center.z - hh, self.center.z + hh)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Point3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    /// Keeps the points whose mask entry is set.
    pub fn select(&self, mask: &[bool]) -> PointCloud {
        PointCloud::new(
            self.points
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|(p, _)| *p)
                .collect(),
        )
    }

    pub fn gather(&self, indices: &[usize]) -> PointCloud {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud::new(points)
    }

    pub fn translated(&self, offset: &Point3) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| p + offset).collect())
    }
}

impl FromIterator<Point3> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point3>>(iter: I) -> Self {
        PointCloud::new(iter.into_iter().collect())
    }
}

/// Per-point distances to the 8 corners and the center of a box.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoxCloudCoords {
    pub rows: Vec<[f64; 9]>,
}

impl BoxCloudCoords {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> BoxCloudCoords {
        BoxCloudCoords {
            rows: indices.iter().map(|&i| self.rows[i]).collect(),
        }
    }
}

/// The 8 corners of `b`. Corner `i` sits at local
/// `(±l/2, ±w/2, ±h/2)` where bit 0 of `i` selects the sign of x, bit 1 the
/// sign of y and bit 2 the sign of z (a clear bit means negative).
pub fn corners(b: &Box3D) -> [Point3; 8] {
    let half = Point3::new(0.5 * b.size.l, 0.5 * b.size.w, 0.5 * b.size.h);
    std::array::from_fn(|i| {
        let sign = |bit: usize| if i & (1 << bit) != 0 { 1.0 } else { -1.0 };
        let local = Point3::new(sign(0) * half.x, sign(1) * half.y, sign(2) * half.z);
        b.local_to_world(&local)
    })
}

pub fn box_cloud(cloud: &PointCloud, b: &Box3D) -> BoxCloudCoords {
    let cs = corners(b);
    let rows = cloud
        .iter()
        .map(|p| {
            let mut row = [0.0; 9];
            for (j, c) in cs.iter().enumerate() {
                row[j] = (p - c).norm();
            }
            row[8] = (p - b.center).norm();
            row
        })
        .collect();
    BoxCloudCoords { rows }
}

/// Inclusive containment test in the box's local frame.
pub fn points_in_box(cloud: &PointCloud, b: &Box3D) -> Vec<bool> {
    let (hl, hw, hh) = (
        0.5 * b.size.l + GEOM_EPS,
        0.5 * b.size.w + GEOM_EPS,
        0.5 * b.size.h + GEOM_EPS,
    );
    cloud
        .iter()
        .map(|p| {
            let q = b.world_to_local(p);
            q.x.abs() <= hl && q.y.abs() <= hw && q.z.abs() <= hh
        })
        .collect()
}

pub fn crop(cloud: &PointCloud, b: &Box3D) -> PointCloud {
    cloud.select(&points_in_box(cloud, b))
}

pub fn to_box_frame(cloud: &PointCloud, b: &Box3D) -> PointCloud {
    cloud.iter().map(|p| b.world_to_local(p)).collect()
}

pub fn from_box_frame(cloud: &PointCloud, b: &Box3D) -> PointCloud {
    cloud.iter().map(|p| b.local_to_world(p)).collect()
}

/// Grows every extent by `2 * margin`, keeping center and yaw.
pub fn enlarge(b: &Box3D, margin: f64) -> Box3D {
    Box3D {
        size: BoxSize {
            h: b.size.h + 2.0 * margin,
            w: b.size.w + 2.0 * margin,
            l: b.size.l + 2.0 * margin,
        },
        ..*b
    }
}

/// Draws exactly `n` points: without replacement when the cloud is large
/// enough, with replacement otherwise.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cloud.len();
    let indices: Vec<usize> = if len >= n {
        index::sample(&mut rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    };
    Ok(cloud.gather(&indices))
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        twice += cross2(&poly[i], &poly[(i + 1) % poly.len()]);
    }
    0.5 * twice.abs()
}

fn push_merged(out: &mut Vec<Vector2<f64>>, p: Vector2<f64>) {
    if out.last().is_none_or(|q| (q - p).norm() > GEOM_EPS) {
        out.push(p);
    }
}

/// Sutherland-Hodgman clip of a polygon against a convex CCW clip polygon.
fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b - a;
        let side = |p: &Vector2<f64>| cross2(&edge, &(p - a));
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(&cur), side(&prev));
            let cur_in = sc >= -GEOM_EPS;
            let prev_in = sp >= -GEOM_EPS;
            if cur_in {
                if !prev_in {
                    let t = sp / (sp - sc);
                    push_merged(&mut output, prev + (cur - prev) * t);
                }
                push_merged(&mut output, cur);
            } else if prev_in {
                let t = sp / (sp - sc);
                push_merged(&mut output, prev + (cur - prev) * t);
            }
        }
        if output.len() > 1 && (output[0] - output[output.len() - 1]).norm() <= GEOM_EPS {
            output.pop();
        }
    }
    output
}

/// Area of the intersection of the two boxes' footprints in the XY plane.
pub fn footprint_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let clipped = clip_convex(&a.footprint(), &b.footprint());
    if clipped.len() < 3 {
        0.0
    } else {
        polygon_area(&clipped)
    }
}

/// Rotated 3D IoU for yaw-only boxes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a_lo, a_hi) = a.z_range();
    let (b_lo, b_hi) = b.z_range();
    let dz = (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0);
    let inter = if dz > 0.0 {
        footprint_intersection_area(a, b) * dz
    } else {
        0.0
    };
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn unit_cube() -> Box3D {
        Box3D::at_origin(BoxSize::new(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn yaw_normalization_range() {
        assert_eq!(normalize_yaw(PI), PI);
        assert_eq!(normalize_yaw(-PI), PI);
        assert!(close(normalize_yaw(3.0 * PI / 2.0), -PI / 2.0, 1e-12));
        assert!(close(normalize_yaw(0.25), 0.25, 0.0));
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(Box3D::new(Point3::zeros(), BoxSize::new(0.0, 1.0, 1.0), 0.0).is_err());
        assert!(Box3D::new(Point3::zeros(), BoxSize::new(1.0, -1.0, 1.0), 0.0).is_err());
        assert!(Box3D::new(Point3::new(f64::NAN, 0.0, 0.0), BoxSize::new(1.0, 1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn unit_cube_corners() {
        let cs = corners(&unit_cube());
        for (i, c) in cs.iter().enumerate() {
            let expect = |bit: usize| if i & (1 << bit) != 0 { 0.5 } else { -0.5 };
            assert_eq!(*c, Point3::new(expect(0), expect(1), expect(2)));
        }
    }

    #[test]
    fn rotated_cube_has_same_corner_set() {
        let rotated = unit_cube().with_yaw(PI / 2.0);
        let base = corners(&unit_cube());
        for c in corners(&rotated) {
            assert!(base.iter().any(|b| (b - c).norm() < 1e-12));
        }
    }

    #[test]
    fn corner_zero_of_offset_box() {
        let b = Box3D::new(Point3::new(1.0, 0.0, 0.0), BoxSize::new(2.0, 1.0, 4.0), 0.0).unwrap();
        assert_eq!(corners(&b)[0], Point3::new(-1.0, -0.5, -1.0));
    }

    #[test]
    fn corners_are_stable() {
        let b = Box3D::new(Point3::new(0.3, -2.0, 1.1), BoxSize::new(1.5, 1.7, 4.2), 0.77).unwrap();
        let a = corners(&b);
        let c = corners(&b);
        for (x, y) in a.iter().zip(c.iter()) {
            for k in 0..3 {
                assert_eq!(x[k].to_bits(), y[k].to_bits());
            }
        }
    }

    #[test]
    fn box_cloud_at_center() {
        let b = Box3D::new(Point3::new(2.0, 1.0, 0.5), BoxSize::new(1.0, 2.0, 3.0), 0.4).unwrap();
        let rows = box_cloud(&PointCloud::new(vec![b.center()]), &b).rows;
        let d = b.size().half_diagonal();
        for j in 0..8 {
            assert!(close(rows[0][j], d, 1e-12));
        }
        assert_eq!(rows[0][8], 0.0);
    }

    #[test]
    fn box_cloud_at_corner_zero() {
        let b = unit_cube();
        let rows = box_cloud(&PointCloud::new(vec![corners(&b)[0]]), &b).rows;
        assert_eq!(rows[0][0], 0.0);
        assert!(close(rows[0][8], 3f64.sqrt() / 2.0, 1e-12));
    }

    #[test]
    fn box_cloud_empty_cloud() {
        assert!(box_cloud(&PointCloud::default(), &unit_cube()).is_empty());
    }

    #[test]
    fn box_cloud_matches_direct_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let b = random_box(&mut rng);
            let p = Point3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let row = box_cloud(&PointCloud::new(vec![p]), &b).rows[0];
            // direct recomputation of each corner from the bit rule
            let (s, c) = b.yaw().sin_cos();
            for j in 0..8 {
                let sx = if j & 1 != 0 { 0.5 } else { -0.5 } * b.size().l;
                let sy = if j & 2 != 0 { 0.5 } else { -0.5 } * b.size().w;
                let sz = if j & 4 != 0 { 0.5 } else { -0.5 } * b.size().h;
                let q = Point3::new(c * sx - s * sy, s * sx + c * sy, sz) + b.center();
                assert!(close(row[j], (p - q).norm(), 1e-12));
            }
            assert!(close(row[8], (p - b.center()).norm(), 1e-12));
        }
    }

    #[test]
    fn iou_identical_is_one() {
        let b = Box3D::new(Point3::new(3.0, 1.0, 0.0), BoxSize::new(1.5, 1.6, 3.9), 1.1).unwrap();
        assert!(close(iou_3d(&b, &b), 1.0, 1e-12));
    }

    #[test]
    fn iou_shifted_unit_cubes() {
        let a = unit_cube();
        let b = a.with_center(Point3::new(0.5, 0.0, 0.0));
        assert!(close(iou_3d(&a, &b), 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn iou_rotated_unit_cube_octagon() {
        let a = unit_cube();
        let b = a.with_yaw(PI / 4.0);
        // regular octagon area: 2(sqrt2 - 1); IoU = A / (2 - A)
        let area = 2.0 * (2f64.sqrt() - 1.0);
        let expect = area / (2.0 - area);
        assert!(close(iou_3d(&a, &b), expect, 1e-9));
        assert!(close(expect, 0.7071, 1e-3));
    }

    #[test]
    fn iou_disjoint_and_touching() {
        let a = unit_cube();
        assert_eq!(iou_3d(&a, &a.with_center(Point3::new(5.0, 0.0, 0.0))), 0.0);
        assert_eq!(iou_3d(&a, &a.with_center(Point3::new(1.0, 0.0, 0.0))), 0.0);
        assert_eq!(iou_3d(&a, &a.with_center(Point3::new(0.0, 0.0, 1.0))), 0.0);
    }

    #[test]
    fn containment_edges() {
        let b = Box3D::new(Point3::new(1.0, 2.0, 0.0), BoxSize::new(1.0, 2.0, 3.0), 0.3).unwrap();
        let inside = b.center();
        let outside = b.local_to_world(&Point3::new(1.5 + 1e-6, 0.0, 0.0));
        let on_face = b.local_to_world(&Point3::new(1.5, 0.0, 0.0));
        let mask = points_in_box(&PointCloud::new(vec![inside, outside, on_face]), &b);
        assert_eq!(mask, vec![true, false, true]);
    }

    #[test]
    fn frame_transform_landmarks() {
        let b = Box3D::new(Point3::new(1.0, -1.0, 0.5), BoxSize::new(2.0, 1.0, 4.0), 0.9).unwrap();
        let local = to_box_frame(&PointCloud::new(vec![b.center(), corners(&b)[0]]), &b);
        assert!(local.points[0].norm() < 1e-12);
        assert!((local.points[1] - Point3::new(-2.0, -0.5, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn enlarge_examples() {
        let e = enlarge(&unit_cube(), 2.0);
        assert_eq!(e.size(), BoxSize::new(5.0, 5.0, 5.0));
        assert_eq!(enlarge(&unit_cube(), 0.0), unit_cube());
        let b = Box3D::new(Point3::new(1.0, 2.0, 3.0), BoxSize::new(2.0, 1.0, 4.0), 0.2).unwrap();
        let e = enlarge(&b, 0.5);
        assert_eq!(e.size(), BoxSize::new(3.0, 2.0, 5.0));
        assert_eq!(e.center(), b.center());
        assert_eq!(e.yaw(), b.yaw());
    }

    #[test]
    fn resample_contract() {
        let cloud: PointCloud = (0..6).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let perm = resample(&cloud, 6, 3).unwrap();
        let mut xs: Vec<f64> = perm.iter().map(|p| p.x).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);

        let single = PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0)]);
        let rep = resample(&single, 4, 0).unwrap();
        assert_eq!(rep.points, vec![Point3::new(1.0, 2.0, 3.0); 4]);

        assert_eq!(resample(&cloud, 4, 11).unwrap(), resample(&cloud, 4, 11).unwrap());
        assert!(matches!(resample(&PointCloud::default(), 4, 0), Err(Error::EmptyCloud)));
    }

    fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
        Box3D::new(
            Point3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
            ),
            BoxSize::new(
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..5.0),
            ),
            rng.random_range(-PI..PI),
        )
        .unwrap()
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -5.0..5.0f64,
            -5.0..5.0f64,
            -2.0..2.0f64,
            0.2..4.0f64,
            0.2..4.0f64,
            0.2..6.0f64,
            -4.0..4.0f64,
        )
            .prop_map(|(x, y, z, h, w, l, yaw)| {
                Box3D::new(Point3::new(x, y, z), BoxSize::new(h, w, l), yaw).unwrap()
            })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou_3d(&a, &b);
            let ba = iou_3d(&b, &a);
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn box_cloud_rigid_invariance(
            b in arb_box(),
            pts in proptest::collection::vec((-6.0..6.0f64, -6.0..6.0f64, -3.0..3.0f64), 1..20),
            angle in -PI..PI,
            tx in -10.0..10.0f64,
            ty in -10.0..10.0f64,
            tz in -3.0..3.0f64,
        ) {
            let cloud: PointCloud = pts.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
            let motion = Box3D::new(Point3::new(tx, ty, tz), BoxSize::new(1.0, 1.0, 1.0), angle).unwrap();
            let moved_cloud = from_box_frame(&cloud, &motion);
            let moved_box = motion.box_to_world(&b);
            let before = box_cloud(&cloud, &b);
            let after = box_cloud(&moved_cloud, &moved_box);
            for (r0, r1) in before.rows.iter().zip(after.rows.iter()) {
                for j in 0..9 {
                    prop_assert!((r0[j] - r1[j]).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn frame_round_trip(
            b in arb_box(),
            pts in proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -3.0..3.0f64), 0..30),
        ) {
            let cloud: PointCloud = pts.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
            let back = from_box_frame(&to_box_frame(&cloud, &b), &b);
            for (p, q) in cloud.iter().zip(back.iter()) {
                prop_assert!((p - q).norm() <= 1e-9);
            }
        }

        #[test]
        fn mask_matches_local_interval_test(
            b in arb_box(),
            pts in proptest::collection::vec((-6.0..6.0f64, -6.0..6.0f64, -3.0..3.0f64), 0..40),
        ) {
            let cloud: PointCloud = pts.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
            let mask = points_in_box(&cloud, &b);
            let local = to_box_frame(&cloud, &b);
            let s = b.size();
            for (m, q) in mask.iter().zip(local.iter()) {
                let expect = (-s.l / 2.0 - GEOM_EPS..=s.l / 2.0 + GEOM_EPS).contains(&q.x)
                    && (-s.w / 2.0 - GEOM_EPS..=s.w / 2.0 + GEOM_EPS).contains(&q.y)
                    && (-s.h / 2.0 - GEOM_EPS..=s.h / 2.0 + GEOM_EPS).contains(&q.z);
                prop_assert_eq!(*m, expect);
            }
        }
    }
}

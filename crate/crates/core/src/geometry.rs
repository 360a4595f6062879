//! Pinhole camera model, rigid transforms and spherical virtual-view sampling.
//!
//! Conventions: right-handed camera frames, optical axis `+z`, image `u` to
//! the right and `v` down, all metric quantities in millimeters.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Depth values at or beyond this range are rejected unless configured otherwise.
pub const DEFAULT_MAX_RANGE_MM: f32 = 2000.0;

const ORTHO_TOL: f64 = 1e-9;

/// Label of the camera frame a quantity is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameId {
    Original,
    View(usize),
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameId::Original => write!(f, "original"),
            FrameId::View(id) => write!(f, "view/{id}"),
        }
    }
}

pub(crate) fn check_frame(expected: FrameId, got: FrameId) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::FrameMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(Error::Invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Continuous pixel coordinates of a camera-frame point. `z` must be positive.
    #[inline]
    pub fn project_point(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    #[inline]
    pub fn unproject_pixel(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }
}

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_proper(ORTHO_TOL) {
            return Err(Error::Invalid("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(t)
    }

    /// Rotation by `angle` radians about `axis` (through the origin).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation: Vec3::zeros(),
        }
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        let ortho = (rtr - Matrix3::identity()).iter().all(|e| e.abs() <= tol);
        ortho && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Metric depth map; `0` marks a hole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub intrinsics: Intrinsics,
    pub frame_id: FrameId,
}

impl DepthImage {
    pub fn new(
        values: Vec<f32>,
        intrinsics: Intrinsics,
        frame_id: FrameId,
        max_range_mm: f32,
    ) -> Result<Self> {
        let (width, height) = (intrinsics.width, intrinsics.height);
        if values.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values ({width}x{height})", width * height),
                got: values.len().to_string(),
            });
        }
        if let Some(bad) = values
            .iter()
            .position(|&d| d != 0.0 && !(d > 0.0 && d < max_range_mm))
        {
            return Err(Error::Invalid(format!(
                "depth {} at index {bad} outside (0, {max_range_mm})",
                values[bad]
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            intrinsics,
            frame_id,
        })
    }

    pub fn zeros(intrinsics: Intrinsics, frame_id: FrameId) -> Self {
        Self {
            width: intrinsics.width,
            height: intrinsics.height,
            values: vec![0.0; intrinsics.width * intrinsics.height],
            intrinsics,
            frame_id,
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame_id: FrameId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub joints: Vec<Vec3>,
    pub frame_id: FrameId,
}

impl HandPose {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualView {
    pub id: usize,
    pub zenith: f64,
    pub azimuth: f64,
    /// View frame -> original camera frame.
    pub to_original: RigidTransform,
    /// Original camera frame -> view frame.
    pub from_original: RigidTransform,
}

impl VirtualView {
    pub fn frame_id(&self) -> FrameId {
        FrameId::View(self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualViewSet {
    pub views: Vec<VirtualView>,
    pub center_mm: Vec3,
    pub radius_mm: f64,
    /// `(rows, cols)` of the angle lattice, absent for randomly sampled sets.
    pub grid: Option<(usize, usize)>,
}

impl VirtualViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Id of the view whose angles are both zero, if any.
    pub fn center_id(&self) -> Option<usize> {
        self.views
            .iter()
            .find(|v| v.zenith == 0.0 && v.azimuth == 0.0)
            .map(|v| v.id)
    }
}

pub fn unproject(depth: &DepthImage) -> Result<PointCloud> {
    let intr = &depth.intrinsics;
    let mut points = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.height {
        let row = &depth.values[v * depth.width..(v + 1) * depth.width];
        for (u, &d) in row.iter().enumerate() {
            if d > 0.0 {
                points.push(intr.unproject_pixel(u as f64, v as f64, d as f64));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::AllPixelsInvalid);
    }
    Ok(PointCloud {
        points,
        frame_id: depth.frame_id,
    })
}

/// Projects every point to continuous `(u, v, z)`; no rounding or bounds check.
pub fn project(cloud: &PointCloud, intr: &Intrinsics) -> Result<Vec<(f64, f64, f64)>> {
    let bad: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| !(p.z > 0.0))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonPositiveDepth(bad));
    }
    Ok(cloud
        .points
        .iter()
        .map(|p| {
            let (u, v) = intr.project_point(p);
            (u, v, p.z)
        })
        .collect())
}

pub fn centroid(cloud: &PointCloud) -> Result<Vec3> {
    if cloud.points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sum = cloud.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    Ok(sum / cloud.points.len() as f64)
}

fn check_range(range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    let ok = lo.is_finite()
        && hi.is_finite()
        && lo <= hi
        && lo > -FRAC_PI_2
        && hi < FRAC_PI_2
        && (lo + hi).abs() <= 1e-12;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidRange(range))
    }
}

/// `count` endpoint-inclusive samples of `[-half, half]`; the middle sample is exactly zero.
fn lattice(half: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    let span = (count - 1) as f64;
    (0..count)
        .map(|i| half * (2.0 * i as f64 - span) / span)
        .collect()
}

/// Roll-free camera orientation whose optical axis has spherical angles
/// `(zenith, azimuth)` relative to the original camera.
///
/// Columns are the view camera's x, y, z axes in the original frame. Equal
/// to `Ry(azimuth) * Rx(zenith)`.
pub fn view_rotation(zenith: f64, azimuth: f64) -> Matrix3<f64> {
    let axis = Vec3::new(
        zenith.cos() * azimuth.sin(),
        -zenith.sin(),
        zenith.cos() * azimuth.cos(),
    );
    let project_out = |v: Vec3| v - axis * v.dot(&axis);
    let mut up = project_out(Vec3::new(0.0, -1.0, 0.0));
    if up.norm() < 1e-9 {
        up = project_out(Vec3::new(0.0, 0.0, -1.0));
    }
    let y = -up.normalize();
    let x = y.cross(&axis);
    Matrix3::from_columns(&[x, y, axis])
}

/// Builds a virtual view by rotating the original camera rigidly about
/// `center` and placing it at `radius` from the center.
pub fn make_view(id: usize, zenith: f64, azimuth: f64, center: &Vec3, radius: f64) -> VirtualView {
    let rotation = view_rotation(zenith, azimuth);
    let norm = center.norm();
    // direction from the center back to the original camera
    let back = if norm > 0.0 {
        -center / norm
    } else {
        Vec3::new(0.0, 0.0, -1.0)
    };
    let position = if radius == norm {
        center - rotation * center
    } else {
        center + rotation * (back * radius)
    };
    let to_original = RigidTransform {
        rotation,
        translation: position,
    };
    VirtualView {
        id,
        zenith,
        azimuth,
        to_original,
        from_original: to_original.inverse(),
    }
}

/// Samples a `grid_rows x grid_cols` lattice of virtual cameras on the sphere
/// of `radius_mm` around `center_mm`. Row index follows zenith, column index
/// follows azimuth; ids are row-major.
pub fn sample_virtual_views(
    center_mm: Vec3,
    radius_mm: f64,
    grid_rows: usize,
    grid_cols: usize,
    zenith_range: (f64, f64),
    azimuth_range: (f64, f64),
) -> Result<VirtualViewSet> {
    check_range(zenith_range)?;
    check_range(azimuth_range)?;
    if grid_rows == 0 || grid_cols == 0 || grid_rows % 2 == 0 || grid_cols % 2 == 0 {
        return Err(Error::Invalid(format!(
            "view grid must have odd positive dimensions, got {grid_rows}x{grid_cols}"
        )));
    }
    if !(radius_mm > 0.0) {
        return Err(Error::Invalid(format!("sphere radius must be positive, got {radius_mm}")));
    }
    let zeniths = lattice(zenith_range.1, grid_rows);
    let azimuths = lattice(azimuth_range.1, grid_cols);
    let mut views = Vec::with_capacity(grid_rows * grid_cols);
    for &zenith in &zeniths {
        for &azimuth in &azimuths {
            views.push(make_view(views.len(), zenith, azimuth, &center_mm, radius_mm));
        }
    }
    Ok(VirtualViewSet {
        views,
        center_mm,
        radius_mm,
        grid: Some((grid_rows, grid_cols)),
    })
}

/// Default 5x5 lattice masks, row-major ids.
fn default_mask(n: usize) -> Option<Vec<usize>> {
    let nine = [0, 2, 4, 10, 12, 14, 20, 22, 24];
    match n {
        1 => Some(vec![12]),
        3 => Some(vec![10, 12, 14]),
        9 => Some(nine.to_vec()),
        15 => {
            let mut ids: Vec<usize> = nine.iter().chain(&[6, 8, 11, 13, 16, 18]).copied().collect();
            ids.sort_unstable();
            Some(ids)
        }
        25 => Some((0..25).collect()),
        _ => None,
    }
}

/// Deterministic uniformly spread subset of view ids, ascending.
pub fn uniform_subset(set: &VirtualViewSet, n: usize, mask: Option<&[usize]>) -> Result<Vec<usize>> {
    let m = set.len();
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: mask.len(),
            });
        }
        if let Some(&bad) = mask.iter().find(|&&id| id >= m) {
            return Err(Error::Invalid(format!("mask id {bad} outside 0..{m}")));
        }
        let mut ids = mask.to_vec();
        ids.sort_unstable();
        return Ok(ids);
    }
    if n == m {
        return Ok((0..m).collect());
    }
    if n == 1 {
        if let Some(c) = set.center_id() {
            return Ok(vec![c]);
        }
    }
    if set.grid == Some((5, 5)) {
        if let Some(ids) = default_mask(n) {
            return Ok(ids);
        }
    }
    Err(Error::UnknownSubset(n))
}

pub fn transform_pose(pose: &HandPose, t: &RigidTransform, frame_id: FrameId) -> HandPose {
    HandPose {
        joints: pose.joints.iter().map(|j| t.apply(j)).collect(),
        frame_id,
    }
}

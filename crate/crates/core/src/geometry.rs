//! Pinhole cameras, depth-tested back-projection, farthest point sampling
//! and localisation labels.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];

/// Depth agreement required for a point to count as seen by a view.
pub const DEFAULT_DEPTH_TOL: f64 = 0.1;
/// Radius within which a candidate counts as on a reference object.
pub const LOC_RADIUS: f64 = 0.3;
/// Minimum camera-space depth for a projection.
const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rigid {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let mut ti = [0.0; 3];
        for i in 0..3 {
            ti[i] = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Self { rotation: rt, translation: ti }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self { rotation: r, translation: self.apply(other.translation) }
    }

    /// Rotation about the vertical axis followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self { rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation }
    }

    /// World→camera transform for a camera at `eye` looking at `target`.
    /// Camera axes: x right, y down, z forward.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let f = normalize(sub(target, eye))?;
        let r = normalize(cross(f, up))?;
        let d = cross(f, r);
        let rotation = [r, d, f];
        let mut translation = [0.0; 3];
        for i in 0..3 {
            translation[i] = -dot(rotation[i], eye);
        }
        Ok(Self { rotation, translation })
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2], //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            bail!(Argument, "extrinsics bottom row must be [0, 0, 0, 1]");
        }
        let rigid = Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        };
        rigid.validate()?;
        Ok(rigid)
    }

    /// Checks orthonormality within 1e-9 and a determinant of +1.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-9 {
                    bail!(Argument, "extrinsic rotation is not orthonormal");
                }
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        if (det - 1.0).abs() > 1e-9 {
            bail!(Argument, "extrinsic rotation has determinant {det}");
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            bail!(Argument, "non-finite extrinsic translation");
        }
        Ok(())
    }
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

fn normalize(a: Vec3) -> Result<Vec3> {
    let n = norm(a);
    if n < 1e-12 {
        bail!(Argument, "degenerate direction");
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

/// Intrinsics, world→camera extrinsics and image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Rigid,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, extrinsics: Rigid, width: usize, height: usize) -> Result<Self> {
        let cam = Self { intrinsics, extrinsics, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let Intrinsics { fx, fy, cx, cy } = self.intrinsics;
        if !(fx > 0.0 && fy > 0.0) {
            bail!(Argument, "focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            bail!(Argument, "empty image");
        }
        if !(0.0..self.width as f64).contains(&cx) || !(0.0..self.height as f64).contains(&cy) {
            bail!(Argument, "principal point ({cx}, {cy}) outside the image");
        }
        self.extrinsics.validate()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.extrinsics.inverse().translation
    }
}

/// Pixel hit by a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

impl Projection {
    /// Row-major pixel index `v·W + u`.
    pub fn pixel(&self, width: usize) -> usize {
        self.v * width + self.u
    }
}

/// Projects a world point to its nearest pixel (round half up). `None`
/// when the point is behind the camera or outside the image.
pub fn project(point: Vec3, camera: &Camera) -> Option<Projection> {
    let [x, y, z] = camera.extrinsics.apply(point);
    if !(z > MIN_DEPTH) {
        return None;
    }
    let Intrinsics { fx, fy, cx, cy } = camera.intrinsics;
    let u = (fx * x / z + cx + 0.5).floor();
    let v = (fy * y / z + cy + 0.5).floor();
    if !(u >= 0.0 && u < camera.width as f64 && v >= 0.0 && v < camera.height as f64) {
        return None;
    }
    Some(Projection { u: u as usize, v: v as usize, depth: z })
}

/// A camera with its rendered depth and per-pixel features.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: Camera,
    /// `H×W×D_i`.
    pub features: Tensor,
    /// `H×W`, metres, 0 where nothing was observed.
    pub depth: Tensor,
}

impl CameraView {
    pub fn new(camera: Camera, features: Tensor, depth: Tensor) -> Result<Self> {
        camera.validate()?;
        let (h, w) = (camera.height, camera.width);
        if depth.shape() != [h, w] {
            bail!(Dimension, "depth map {:?} for a {h}×{w} image", depth.shape());
        }
        if features.rank() != 3 || features.shape()[..2] != [h, w] {
            bail!(Dimension, "feature map {:?} for a {h}×{w} image", features.shape());
        }
        if depth.data().iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            bail!(Argument, "depth values must be finite and non-negative");
        }
        Ok(Self { camera, features, depth })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Point-to-pixel correspondences for `n_points × n_views` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences {
    pub n_points: usize,
    pub n_views: usize,
    /// Row-major `[point][view]`: the matched pixel when the pair is valid.
    pub pixel: Vec<Option<usize>>,
}

impl Correspondences {
    pub fn get(&self, point: usize, view: usize) -> Option<usize> {
        self.pixel[point * self.n_views + view]
    }

    pub fn valid(&self) -> Vec<bool> {
        self.pixel.iter().map(Option::is_some).collect()
    }

    /// Matched pixels of one view for every point.
    pub fn view_column(&self, view: usize) -> Vec<Option<usize>> {
        (0..self.n_points).map(|p| self.get(p, view)).collect()
    }

    pub fn valid_count_per_view(&self) -> Vec<usize> {
        (0..self.n_views)
            .map(|m| (0..self.n_points).filter(|&p| self.get(p, m).is_some()).count())
            .collect()
    }
}

fn point_at(points: &Tensor, i: usize) -> Vec3 {
    let row = points.row_slice(i);
    [row[0], row[1], row[2]]
}

fn check_points(points: &Tensor) -> Result<()> {
    if points.rank() != 2 || points.cols() < 3 {
        bail!(Dimension, "points must be N×3 (or wider), got {:?}", points.shape());
    }
    Ok(())
}

/// Finds, for each point and view, the pixel whose rendered depth agrees
/// with the point's camera depth to within `depth_tol`.
pub fn correspondences(
    points: &Tensor,
    views: &[(&Camera, &Tensor)],
    depth_tol: f64,
) -> Result<Correspondences> {
    check_points(points)?;
    if !(depth_tol > 0.0) {
        bail!(Argument, "depth tolerance must be positive");
    }
    let n = points.rows();
    let mut pixel = vec![None; n * views.len()];
    for p in 0..n {
        let x = point_at(points, p);
        for (m, (camera, depth)) in views.iter().enumerate() {
            let Some(proj) = project(x, camera) else { continue };
            let idx = proj.pixel(camera.width);
            let d = depth.data()[idx];
            if d > 0.0 && (proj.depth - d).abs() <= depth_tol {
                pixel[p * views.len() + m] = Some(idx);
            }
        }
    }
    Ok(Correspondences { n_points: n, n_views: views.len(), pixel })
}

/// Multi-view features gathered onto points, with their validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BackProjectionResult {
    /// `N_p×M×D_i`; all-zero rows where invalid.
    pub features: Tensor,
    /// Row-major `N_p×M`.
    pub valid: Vec<bool>,
}

pub fn back_project(points: &Tensor, views: &[CameraView], depth_tol: f64) -> Result<BackProjectionResult> {
    let d = views.first().map_or(0, CameraView::feature_dim);
    if let Some(v) = views.iter().find(|v| v.feature_dim() != d) {
        bail!(Dimension, "views disagree on feature width: {} and {d}", v.feature_dim());
    }
    let pairs: Vec<(&Camera, &Tensor)> = views.iter().map(|v| (&v.camera, &v.depth)).collect();
    let corr = correspondences(points, &pairs, depth_tol)?;
    let (n, m) = (corr.n_points, corr.n_views);
    let mut features = vec![0.0; n * m * d];
    for p in 0..n {
        for (vi, view) in views.iter().enumerate() {
            if let Some(px) = corr.get(p, vi) {
                let src = &view.features.data()[px * d..(px + 1) * d];
                features[(p * m + vi) * d..(p * m + vi + 1) * d].copy_from_slice(src);
            }
        }
    }
    Ok(BackProjectionResult { features: Tensor::new(&[n, m, d], features)?, valid: corr.valid() })
}

fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// Greedy farthest point sampling from `start`. Ties go to the lowest
/// index; indices are returned in selection order.
pub fn fps(points: &Tensor, k: usize, start: usize) -> Result<Vec<usize>> {
    check_points(points)?;
    let n = points.rows();
    if k == 0 || k > n {
        bail!(Argument, "cannot sample {k} of {n} points");
    }
    if start >= n {
        bail!(Argument, "start index {start} out of {n} points");
    }
    let coords: Vec<Vec3> = (0..n).map(|i| point_at(points, i)).collect();
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(k);
    let mut current = start;
    loop {
        order.push(current);
        taken[current] = true;
        if order.len() == k {
            break;
        }
        let c = coords[current];
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            let d = dist2(coords[i], c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && best.map_or(true, |(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        current = best.expect("k <= n leaves an untaken point").0;
    }
    Ok(order)
}

/// Marks candidates within `radius` (inclusive) of any reference centre.
pub fn assign_loc_labels(candidates: &Tensor, centers: &Tensor, radius: f64) -> Result<Vec<bool>> {
    check_points(candidates)?;
    if !(radius > 0.0) {
        bail!(Argument, "radius must be positive");
    }
    let g = if centers.numel() == 0 { 0 } else {
        check_points(centers)?;
        centers.rows()
    };
    let r2 = radius * radius;
    Ok((0..candidates.rows())
        .map(|i| {
            let c = point_at(candidates, i);
            (0..g).any(|j| dist2(c, point_at(centers, j)) <= r2)
        })
        .collect())
}

//! Virtual camera rigs, pinhole projection of skeleton windows and torso-plane
//! self-occlusion.
//!
//! World frame: `y` is up and the subject stands near the vertical axis
//! through the origin. Camera frame: `x` right, `y` down, `z` along the
//! optical axis, so a point is in front of the camera when `z > 0`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type Vec3<S> = [S; 3];

fn sub<S: Real>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add<S: Real>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale<S: Real>(a: Vec3<S>, k: S) -> Vec3<S> {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn dot<S: Real>(a: Vec3<S>, b: Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross<S: Real>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm<S: Real>(a: Vec3<S>) -> S {
    dot(a, a).sqrt()
}

fn normalize<S: Real>(a: Vec3<S>) -> Vec3<S> {
    scale(a, S::one() / norm(a))
}

/// Rotates `p` about the world vertical axis by `angle` radians, using the
/// same handedness as camera yaw (yaw θ puts a camera at `(sin θ, ·, cos θ)`).
pub fn rotate_about_vertical<S: Real>(p: Vec3<S>, angle: S) -> Vec3<S> {
    let (s, c) = angle.sin_cos();
    [p[0] * c + p[2] * s, p[1], -p[0] * s + p[2] * c]
}

/// Pinhole camera with world-to-camera rotation rows and centre `position`.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualCamera<S> {
    pub rotation: [[S; 3]; 3],
    pub position: Vec3<S>,
    pub focal: S,
    pub principal_point: [S; 2],
}

impl<S: Real> VirtualCamera<S> {
    /// Camera at `position` looking at `target` with world `y` up.
    pub fn look_at(position: Vec3<S>, target: Vec3<S>, focal: S) -> Result<Self> {
        if focal <= S::zero() {
            return Err(Error::InvalidArgument("focal length must be positive".into()));
        }
        let forward = sub(target, position);
        if norm(forward) <= S::epsilon() {
            return Err(Error::InvalidArgument("camera coincides with its target".into()));
        }
        let forward = normalize(forward);
        let up = [S::zero(), S::one(), S::zero()];
        let right = cross(forward, up);
        if norm(right) <= S::lit(1e-9) {
            return Err(Error::InvalidArgument("camera looks straight up or down".into()));
        }
        let right = normalize(right);
        let down = cross(forward, right);
        Ok(Self {
            rotation: [right, down, forward],
            position,
            focal,
            principal_point: [S::zero(), S::zero()],
        })
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p: Vec3<S>) -> Vec3<S> {
        let d = sub(p, self.position);
        [
            dot(self.rotation[0], d),
            dot(self.rotation[1], d),
            dot(self.rotation[2], d),
        ]
    }

    /// Pinhole projection; `None` when the point is not in front of the camera.
    pub fn project(&self, p: Vec3<S>) -> Option<[S; 2]> {
        let c = self.to_camera(p);
        if c[2] <= S::zero() {
            return None;
        }
        Some([
            self.focal * c[0] / c[2] + self.principal_point[0],
            self.focal * c[1] / c[2] + self.principal_point[1],
        ])
    }

    /// Inverse of [`project`](Self::project) for a known camera depth.
    pub fn back_project(&self, uv: [S; 2], depth: S) -> Vec3<S> {
        let xc = (uv[0] - self.principal_point[0]) * depth / self.focal;
        let yc = (uv[1] - self.principal_point[1]) * depth / self.focal;
        let r = &self.rotation;
        // Rᵀ · x_c + position
        let world = [
            r[0][0] * xc + r[1][0] * yc + r[2][0] * depth,
            r[0][1] * xc + r[1][1] * yc + r[2][1] * depth,
            r[0][2] * xc + r[1][2] * yc + r[2][2] * depth,
        ];
        add(world, self.position)
    }

    /// Yaw of the camera position around the vertical axis, in degrees in [0, 360).
    pub fn yaw_degrees(&self, center: Vec3<S>) -> S {
        let d = sub(self.position, center);
        let deg = d[0].atan2(d[2]).to_degrees();
        if deg < S::zero() {
            deg + S::lit(360.0)
        } else {
            deg
        }
    }

    /// Largest deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> S {
        let r = &self.rotation;
        let mut worst = S::zero();
        for i in 0..3 {
            for j in 0..3 {
                let v = (0..3).map(|k| r[k][i] * r[k][j]).sum::<S>();
                let target = if i == j { S::one() } else { S::zero() };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// Parameters of the circular virtual camera rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub views: usize,
    pub spacing_deg: f64,
    pub radius: f64,
    /// Camera height; also the height of the look-at point (skeleton root).
    pub height: f64,
    pub focal: f64,
    /// Elevation above the look-at point, degrees. Yaw-only rigs use 0.
    #[serde(default)]
    pub elevation_deg: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            views: 12,
            spacing_deg: 30.0,
            radius: 3.0,
            height: 1.0,
            focal: 1.0,
            elevation_deg: 0.0,
        }
    }
}

impl RigConfig {
    pub fn with_views(views: usize) -> Self {
        Self {
            views,
            ..Self::default()
        }
    }

    pub fn target<S: Real>(&self) -> Vec3<S> {
        [S::zero(), S::lit(self.height), S::zero()]
    }
}

/// Camera `i` sits at yaw `i · spacing` on a circle around the root and looks at it.
pub fn make_virtual_cameras<S: Real>(rig: &RigConfig) -> Result<Vec<VirtualCamera<S>>> {
    if rig.views == 0 {
        return Err(Error::InvalidArgument("camera rig needs at least one view".into()));
    }
    if !(rig.spacing_deg > 0.0) || !(rig.radius > 0.0) {
        return Err(Error::InvalidArgument(
            "camera spacing and radius must be positive".into(),
        ));
    }
    let target = rig.target::<S>();
    let elev = S::lit(rig.elevation_deg).to_radians();
    let radius = S::lit(rig.radius);
    (0..rig.views)
        .map(|i| {
            let yaw = (S::from_usize_lossy(i) * S::lit(rig.spacing_deg)).to_radians();
            let horizontal = radius * elev.cos();
            let pos = [
                target[0] + horizontal * yaw.sin(),
                target[1] + radius * elev.sin(),
                target[2] + horizontal * yaw.cos(),
            ];
            VirtualCamera::look_at(pos, target, S::lit(rig.focal))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    rotation: [f64; 9],
    position: [f64; 3],
    focal: f64,
    principal_point: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    cameras: Vec<CameraRecord>,
}

pub fn rig_to_json<S: Real>(cams: &[VirtualCamera<S>]) -> Result<String> {
    let f = |x: S| x.to_f64_lossy();
    let file = RigFile {
        cameras: cams
            .iter()
            .map(|c| {
                let mut rotation = [0.0; 9];
                for (k, v) in c.rotation.iter().flatten().enumerate() {
                    rotation[k] = f(*v);
                }
                CameraRecord {
                    rotation,
                    position: c.position.map(f),
                    focal: f(c.focal),
                    principal_point: c.principal_point.map(f),
                }
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn rig_from_json<S: Real>(json: &str) -> Result<Vec<VirtualCamera<S>>> {
    let file: RigFile = serde_json::from_str(json)?;
    file.cameras
        .into_iter()
        .map(|c| {
            let r = c.rotation.map(S::lit);
            let cam = VirtualCamera {
                rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
                position: c.position.map(S::lit),
                focal: S::lit(c.focal),
                principal_point: c.principal_point.map(S::lit),
            };
            if !(c.focal > 0.0) {
                return Err(Error::Format("camera focal must be positive".into()));
            }
            if cam.orthonormality_error() > S::lit(1e-6) {
                return Err(Error::Format("camera rotation is not orthonormal".into()));
            }
            Ok(cam)
        })
        .collect()
}

pub fn save_rig<S: Real>(path: impl AsRef<Path>, cams: &[VirtualCamera<S>]) -> Result<()> {
    std::fs::write(path, rig_to_json(cams)?)?;
    Ok(())
}

pub fn load_rig<S: Real>(path: impl AsRef<Path>) -> Result<Vec<VirtualCamera<S>>> {
    rig_from_json(&std::fs::read_to_string(path)?)
}

/// `frames × joints` world positions, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonWindow3D<S> {
    pub frames: usize,
    pub joints: usize,
    pub positions: Vec<Vec3<S>>,
}

impl<S: Real> SkeletonWindow3D<S> {
    pub fn new(frames: usize, joints: usize, positions: Vec<Vec3<S>>) -> Result<Self> {
        if positions.len() != frames * joints {
            return Err(Error::InvalidArgument(format!(
                "{} positions for {frames}×{joints} window",
                positions.len()
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "SkeletonWindow3D" });
        }
        Ok(Self {
            frames,
            joints,
            positions,
        })
    }

    pub fn joint(&self, frame: usize, joint: usize) -> Vec3<S> {
        self.positions[frame * self.joints + joint]
    }

    pub fn frame(&self, frame: usize) -> &[Vec3<S>] {
        &self.positions[frame * self.joints..(frame + 1) * self.joints]
    }

    /// Applies `f` to every joint position.
    pub fn map_positions(&self, f: impl Fn(Vec3<S>) -> Vec3<S>) -> Self {
        Self {
            frames: self.frames,
            joints: self.joints,
            positions: self.positions.iter().map(|&p| f(p)).collect(),
        }
    }
}

/// One view of a window: image coordinates plus a visibility mask.
/// Invisible joints carry zero coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedWindow<S> {
    pub frames: usize,
    pub joints: usize,
    pub coords: Vec<[S; 2]>,
    pub visible: Vec<bool>,
    pub view: usize,
}

impl<S: Real> ProjectedWindow<S> {
    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Coordinates shifted to zero mean and scaled to unit RMS over visible
    /// joints; invisible joints stay at zero.
    pub fn normalized(&self) -> Self {
        let n = self.visible_count();
        let mut out = self.clone();
        if n == 0 {
            return out;
        }
        let nf = S::from_usize_lossy(n);
        let mut mean = [S::zero(); 2];
        for (c, _) in self.coords.iter().zip(&self.visible).filter(|(_, &v)| v) {
            mean[0] = mean[0] + c[0] / nf;
            mean[1] = mean[1] + c[1] / nf;
        }
        let ms = self
            .coords
            .iter()
            .zip(&self.visible)
            .filter(|(_, &v)| v)
            .map(|(c, _)| {
                let (dx, dy) = (c[0] - mean[0], c[1] - mean[1]);
                dx * dx + dy * dy
            })
            .sum::<S>()
            / nf;
        let inv = if ms > S::zero() {
            S::one() / ms.sqrt()
        } else {
            S::one()
        };
        for (c, &v) in out.coords.iter_mut().zip(&self.visible) {
            *c = if v {
                [(c[0] - mean[0]) * inv, (c[1] - mean[1]) * inv]
            } else {
                [S::zero(), S::zero()]
            };
        }
        out
    }
}

/// Projects every joint; joints at non-positive depth are marked invisible.
pub fn project_window<S: Real>(
    w: &SkeletonWindow3D<S>,
    cam: &VirtualCamera<S>,
    view: usize,
) -> ProjectedWindow<S> {
    let mut coords = Vec::with_capacity(w.positions.len());
    let mut visible = Vec::with_capacity(w.positions.len());
    for &p in &w.positions {
        match cam.project(p) {
            Some(uv) => {
                coords.push(uv);
                visible.push(true);
            }
            None => {
                coords.push([S::zero(), S::zero()]);
                visible.push(false);
            }
        }
    }
    ProjectedWindow {
        frames: w.frames,
        joints: w.joints,
        coords,
        visible,
        view,
    }
}

/// Indices of the four torso joints, in polygon order around the torso.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorsoJoints {
    pub left_shoulder: usize,
    pub right_shoulder: usize,
    pub right_hip: usize,
    pub left_hip: usize,
}

impl TorsoJoints {
    pub fn as_array(&self) -> [usize; 4] {
        [
            self.left_shoulder,
            self.right_shoulder,
            self.right_hip,
            self.left_hip,
        ]
    }

    pub fn contains(&self, joint: usize) -> bool {
        self.as_array().contains(&joint)
    }
}

/// Least-squares plane through the torso with the torso quadrilateral
/// expressed in in-plane coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TorsoPlane<S> {
    pub anchor: Vec3<S>,
    pub normal: Vec3<S>,
    pub basis: [Vec3<S>; 2],
    pub polygon: [[S; 2]; 4],
}

impl<S: Real> TorsoPlane<S> {
    pub fn to_plane_coords(&self, p: Vec3<S>) -> [S; 2] {
        let d = sub(p, self.anchor);
        [dot(d, self.basis[0]), dot(d, self.basis[1])]
    }

    pub fn signed_distance(&self, p: Vec3<S>) -> S {
        dot(sub(p, self.anchor), self.normal)
    }

    pub fn polygon_area(&self) -> S {
        let p = &self.polygon;
        let mut a = S::zero();
        for i in 0..4 {
            let (x0, y0) = (p[i][0], p[i][1]);
            let (x1, y1) = (p[(i + 1) % 4][0], p[(i + 1) % 4][1]);
            a = a + x0 * y1 - x1 * y0;
        }
        (a / S::lit(2.0)).abs()
    }

    /// Inside the polygon, or within `margin` of its boundary.
    pub fn covers(&self, q: [S; 2], margin: S) -> bool {
        point_in_polygon(q, &self.polygon)
            || (margin > S::zero() && distance_to_polygon(q, &self.polygon) <= margin)
    }
}

fn point_in_polygon<S: Real>(q: [S; 2], poly: &[[S; 2]]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > q[1]) != (b[1] > q[1]) {
            let x = a[0] + (q[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if q[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn distance_to_polygon<S: Real>(q: [S; 2], poly: &[[S; 2]]) -> S {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > S::zero() {
                (((q[0] - a[0]) * dx + (q[1] - a[1]) * dy) / len2)
                    .max(S::zero())
                    .min(S::one())
            } else {
                S::zero()
            };
            let (px, py) = (a[0] + t * dx - q[0], a[1] + t * dy - q[1]);
            (px * px + py * py).sqrt()
        })
        .fold(S::infinity(), S::min)
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching eigenvectors (as columns of `v`).
fn symmetric_eigen3<S: Real>(mut a: [[S; 3]; 3]) -> ([S; 3], [[S; 3]; 3]) {
    let mut v = [[S::zero(); 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = S::one();
    }
    for _ in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off <= S::epsilon() * S::epsilon() {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == S::zero() {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (S::lit(2.0) * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
            let c = S::one() / (t * t + S::one()).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

/// Fits the torso plane to four torso points (given in polygon order).
pub fn fit_torso_plane<S: Real>(points: &[Vec3<S>; 4]) -> Result<TorsoPlane<S>> {
    let quarter = S::lit(0.25);
    let anchor = points
        .iter()
        .fold([S::zero(); 3], |acc, &p| add(acc, scale(p, quarter)));
    let mut cov = [[S::zero(); 3]; 3];
    for &p in points {
        let d = sub(p, anchor);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] = cov[i][j] + d[i] * d[j];
            }
        }
    }
    let scale2 = cov[0][0] + cov[1][1] + cov[2][2];
    if scale2 <= S::zero() {
        return Err(Error::InvalidArgument("torso joints coincide".into()));
    }
    let (vals, vecs) = symmetric_eigen3(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    let column = |k: usize| normalize([vecs[0][k], vecs[1][k], vecs[2][k]]);
    let normal = column(order[0]);
    let e1 = column(order[2]);
    let e2 = cross(normal, e1);
    let mut plane = TorsoPlane {
        anchor,
        normal,
        basis: [e1, e2],
        polygon: [[S::zero(); 2]; 4],
    };
    plane.polygon = points.map(|p| plane.to_plane_coords(p));
    if plane.polygon_area() <= S::lit(1e-9) * scale2 {
        return Err(Error::InvalidArgument("torso joints are collinear".into()));
    }
    Ok(plane)
}

/// Whether the open segment from `camera` to `joint` crosses the torso plane
/// inside the (margin-expanded) torso polygon.
pub fn segment_hits_torso<S: Real>(
    camera: Vec3<S>,
    joint: Vec3<S>,
    plane: &TorsoPlane<S>,
    margin: S,
) -> bool {
    let dir = sub(joint, camera);
    let denom = dot(plane.normal, dir);
    if denom.abs() <= S::epsilon() * norm(dir) {
        return false;
    }
    let s = dot(plane.normal, sub(plane.anchor, camera)) / denom;
    if s <= S::zero() || s >= S::one() {
        return false;
    }
    let hit = add(camera, scale(dir, s));
    plane.covers(plane.to_plane_coords(hit), margin)
}

/// Marks joints hidden behind the torso as invisible (and zeroes them).
/// `planes[f]` is the torso plane for frame `f`; `None` leaves the frame untouched.
pub fn occlusion_mask<S: Real>(
    pw: &mut ProjectedWindow<S>,
    w3d: &SkeletonWindow3D<S>,
    cam: &VirtualCamera<S>,
    planes: &[Option<TorsoPlane<S>>],
    torso: &TorsoJoints,
    margin: S,
) {
    for f in 0..w3d.frames {
        let Some(plane) = planes.get(f).and_then(Option::as_ref) else {
            continue;
        };
        for j in 0..w3d.joints {
            if torso.contains(j) {
                continue;
            }
            let idx = f * w3d.joints + j;
            if pw.visible[idx] && segment_hits_torso(cam.position, w3d.joint(f, j), plane, margin) {
                pw.visible[idx] = false;
                pw.coords[idx] = [S::zero(), S::zero()];
            }
        }
    }
}

/// Per-frame torso planes; degenerate frames yield `None`.
pub fn torso_planes<S: Real>(
    w: &SkeletonWindow3D<S>,
    torso: &TorsoJoints,
) -> Vec<Option<TorsoPlane<S>>> {
    (0..w.frames)
        .map(|f| {
            let pts = torso.as_array().map(|j| w.joint(f, j));
            match fit_torso_plane(&pts) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::debug!("frame {f}: torso plane unavailable ({e}); all joints visible");
                    None
                }
            }
        })
        .collect()
}

/// Projection plus torso occlusion for every camera of the rig.
pub fn render_views<S: Real>(
    w: &SkeletonWindow3D<S>,
    cams: &[VirtualCamera<S>],
    torso: &TorsoJoints,
    margin: S,
) -> Result<Vec<ProjectedWindow<S>>> {
    if torso.as_array().iter().any(|&j| j >= w.joints) {
        return Err(Error::InvalidArgument(format!(
            "torso joints {:?} outside a {}-joint skeleton",
            torso.as_array(),
            w.joints
        )));
    }
    let planes = torso_planes(w, torso);
    Ok(cams
        .iter()
        .enumerate()
        .map(|(v, cam)| {
            let mut pw = project_window(w, cam, v);
            occlusion_mask(&mut pw, w, cam, &planes, torso, margin);
            pw
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera(focal: f64) -> VirtualCamera<f64> {
        // at the origin looking along +z
        VirtualCamera {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            position: [0.0; 3],
            focal,
            principal_point: [0.0, 0.0],
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(axis_camera(1.0).project([0.0, 0.0, 5.0]), Some([0.0, 0.0]));
        assert_eq!(axis_camera(2.0).project([1.0, 2.0, 4.0]), Some([0.5, 1.0]));
        assert_eq!(axis_camera(1.0).project([1.0, 0.0, 0.0]), None);
        let w = SkeletonWindow3D::new(1, 2, vec![[0.0, 0.0, 5.0], [1.0, 1.0, -2.0]]).unwrap();
        let pw = project_window(&w, &axis_camera(1.0), 0);
        assert_eq!(pw.visible, vec![true, false]);
        assert_eq!(pw.coords[1], [0.0, 0.0]);
    }

    #[test]
    fn rig_yaws() {
        let cams = make_virtual_cameras::<f64>(&RigConfig::default()).unwrap();
        assert_eq!(cams.len(), 12);
        let center = RigConfig::default().target();
        for (i, c) in cams.iter().enumerate() {
            let yaw = c.yaw_degrees(center);
            assert!((yaw - 30.0 * i as f64).abs() < 1e-9, "camera {i}: {yaw}");
            assert!(c.orthonormality_error() < 1e-12);
            // the root projects onto the principal point
            let uv = c.project(center).unwrap();
            assert!(uv[0].abs() < 1e-12 && uv[1].abs() < 1e-12);
        }
        let one = make_virtual_cameras::<f64>(&RigConfig::with_views(1)).unwrap();
        assert!(one[0].yaw_degrees(center).abs() < 1e-12);
        let three = make_virtual_cameras::<f64>(&RigConfig::with_views(3)).unwrap();
        let yaws: Vec<f64> = three.iter().map(|c| c.yaw_degrees(center)).collect();
        for (y, e) in yaws.iter().zip([0.0, 30.0, 60.0]) {
            assert!((y - e).abs() < 1e-9);
        }
        assert!(make_virtual_cameras::<f64>(&RigConfig::with_views(0)).is_err());
    }

    #[test]
    fn image_axes_are_right_and_down() {
        // camera 0 sits on +z looking toward -z; world +x is to its right.
        let cam = &make_virtual_cameras::<f64>(&RigConfig::default()).unwrap()[0];
        let uv = cam.project([0.5, 1.0, 0.0]).unwrap();
        assert!(uv[0] < 0.0 || uv[0] > 0.0);
        let right = cam.project([0.5, 1.0, 0.0]).unwrap()[0];
        let left = cam.project([-0.5, 1.0, 0.0]).unwrap()[0];
        assert!((right + left).abs() < 1e-12);
        let above = cam.project([0.0, 1.5, 0.0]).unwrap()[1];
        assert!(above < 0.0, "higher points have smaller image v");
        let det = {
            let r = cam.rotation;
            r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
        };
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rig_json_round_trip() {
        let cams = make_virtual_cameras::<f64>(&RigConfig::with_views(4)).unwrap();
        let json = rig_to_json(&cams).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["cameras"][0]["rotation"].as_array().unwrap().len(), 9);
        let back: Vec<VirtualCamera<f64>> = rig_from_json(&json).unwrap();
        assert_eq!(back, cams);
        let bad = json.replace("\"focal\": 1.0", "\"focal\": -1.0");
        assert!(rig_from_json::<f64>(&bad).is_err());
    }

    #[test]
    fn torso_plane_fits() {
        let square: [Vec3<f64>; 4] = [
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ];
        let plane = fit_torso_plane(&square).unwrap();
        assert!((plane.normal[2].abs() - 1.0).abs() < 1e-12);
        for p in square {
            assert!(plane.signed_distance(p).abs() < 1e-12);
        }
        assert!((plane.polygon_area() - 1.0).abs() < 1e-12);

        let tilted: [Vec3<f64>; 4] = [
            [0.0, 1.0, 0.0],
            [1.0, 2.0, 1.0],
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
        ];
        let plane = fit_torso_plane(&tilted).unwrap();
        for p in tilted {
            assert!(plane.signed_distance(p).abs() < 1e-12);
        }

        let collinear = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert!(fit_torso_plane(&collinear).is_err());
    }

    #[test]
    fn perturbed_square_normal_tracks_least_squares_oracle() {
        for &delta in &[1e-1, 1e-2, 1e-3] {
            let pts: [Vec3<f64>; 4] = [
                [0.0, 1.0, 0.0],
                [1.0, 1.0, delta],
                [1.0, 0.0, 0.0],
                [0.0, 0.0, 0.0],
            ];
            let plane = fit_torso_plane(&pts).unwrap();
            // ordinary least squares z = a·x + b·y + c through the same points
            // (closed form for the unit-square design): a = b = δ/2.
            let oracle = normalize([-delta / 2.0, -delta / 2.0, 1.0]);
            let n = if plane.normal[2] < 0.0 {
                scale(plane.normal, -1.0)
            } else {
                plane.normal
            };
            let tilt = dot(n, [0.0, 0.0, 1.0f64]).acos();
            assert!(tilt <= delta, "tilt {tilt} for δ={delta}");
            assert!(norm(sub(n, oracle)) < delta * delta, "δ={delta}");
        }
    }

    fn centered_square_plane() -> TorsoPlane<f64> {
        fit_torso_plane(&[
            [-0.5, 0.5, 0.0],
            [0.5, 0.5, 0.0],
            [0.5, -0.5, 0.0],
            [-0.5, -0.5, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn occlusion_examples() {
        let plane = centered_square_plane();
        let cam = [0.0, 0.0, 5.0];
        assert!(segment_hits_torso(cam, [0.0, 0.0, -1.0], &plane, 0.0));
        assert!(!segment_hits_torso(cam, [0.0, 0.0, 2.0], &plane, 0.0));
        // crosses z = 0 at x = 10·5/6 ≈ 8.33, far outside the square
        assert!(!segment_hits_torso(cam, [10.0, 0.0, -1.0], &plane, 0.0));
        assert!(segment_hits_torso(cam, [10.0, 0.0, -1.0], &plane, 8.0));
    }

    #[test]
    fn back_projection_recovers_joint() {
        let cams = make_virtual_cameras::<f64>(&RigConfig::default()).unwrap();
        let p = [0.3, 1.4, -0.2];
        for cam in &cams {
            let uv = cam.project(p).unwrap();
            let depth = cam.to_camera(p)[2];
            let q = cam.back_project(uv, depth);
            assert!(norm(sub(p, q)) < 1e-9);
        }
    }

    #[test]
    fn normalization_is_zero_mean_unit_rms() {
        let pw: ProjectedWindow<f64> = ProjectedWindow {
            frames: 1,
            joints: 3,
            coords: vec![[1.0, 2.0], [3.0, 6.0], [0.0, 0.0]],
            visible: vec![true, true, false],
            view: 0,
        };
        let n = pw.normalized();
        assert!((n.coords[0][0] + n.coords[1][0]).abs() < 1e-15);
        let rms = ((n.coords[0][0].powi(2)
            + n.coords[0][1].powi(2)
            + n.coords[1][0].powi(2)
            + n.coords[1][1].powi(2))
            / 2.0)
            .sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        assert_eq!(n.coords[2], [0.0, 0.0]);
    }

    #[test]
    fn generic_over_f32() {
        let cams = make_virtual_cameras::<f32>(&RigConfig::with_views(2)).unwrap();
        assert!(cams[1].orthonormality_error() < 1e-5);
        let uv = cams[0].project([0.0f32, 1.0, 0.0]).unwrap();
        assert!(uv[0].abs() < 1e-6);
    }
}

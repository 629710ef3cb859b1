//! Rigid poses, pinhole cameras and differentiable feature gathering.
//!
//! Ego poses are stored as ego-frame → world-frame transforms. Temporal
//! alignment composes them as `E_a · E_b⁻¹` exactly as the alignment rule is
//! written (see [`transform_to_frame`]); callers that need to move points
//! from the current ego frame into a past ego frame pass the inverted
//! (world → ego) matrices, which turns the same composition into
//! `E_past⁻¹ · E_cur`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::numerics::{BackwardCtx, Op, Scalar, Tape, Tensor, Var};

/// Near clipping depth for projection validity, meters.
pub const Z_NEAR: f64 = 0.1;

const RIGID_TOL: f64 = 1e-9;

/// 4x4 rigid transform, ego frame → world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoPose {
    matrix: Matrix4<f64>,
}

fn check_rigid(m: &Matrix4<f64>) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Pose("non-finite entry".into()));
    }
    let last = m.row(3);
    if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > RIGID_TOL {
        return Err(Error::Pose(format!("last row must be [0,0,0,1], got {last}")));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    if ortho > RIGID_TOL {
        return Err(Error::Pose(format!("rotation not orthonormal (max |RᵀR - I| = {ortho:e})")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > RIGID_TOL {
        return Err(Error::Pose(format!("rotation determinant {det} != +1")));
    }
    Ok(())
}

impl EgoPose {
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        check_rigid(&matrix)?;
        Ok(EgoPose { matrix })
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        Self::new(Matrix4::from_fn(|i, j| rows[i][j]))
    }

    pub fn identity() -> Self {
        EgoPose { matrix: Matrix4::identity() }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_yaw_translation(0.0, [x, y, z])
    }

    /// Rotation by `yaw` radians about +z followed by a translation.
    pub fn from_yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let matrix = Matrix4::new(
            c, -s, 0.0, t[0],
            s, c, 0.0, t[1],
            0.0, 0.0, 1.0, t[2],
            0.0, 0.0, 0.0, 1.0,
        );
        EgoPose { matrix }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.matrix[(i, j)]))
    }

    /// Closed-form rigid inverse `[Rᵀ, -Rᵀt]`.
    pub fn inverse(&self) -> EgoPose {
        let r: Matrix3<f64> = self.matrix.fixed_view::<3, 3>(0, 0).into();
        let t: Vector3<f64> = self.matrix.fixed_view::<3, 1>(0, 3).into();
        let rt = r.transpose();
        let ti = -(rt * t);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&ti);
        EgoPose { matrix: m }
    }

    /// `self · other`.
    pub fn compose(&self, other: &EgoPose) -> EgoPose {
        EgoPose { matrix: self.matrix * other.matrix }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let h = self.matrix * Vector4::new(p[0], p[1], p[2], 1.0);
        [h[0], h[1], h[2]]
    }

    pub fn apply_vector(&self, d: [f64; 3]) -> [f64; 3] {
        let h = self.matrix * Vector4::new(d[0], d[1], d[2], 0.0);
        [h[0], h[1], h[2]]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.matrix[(0, 3)], self.matrix[(1, 3)], self.matrix[(2, 3)]]
    }
}

/// Coordinate frame a [`Point3Set`] is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    CurrentEgo,
    PastEgo,
    Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point3Set {
    pub points: Vec<[f64; 3]>,
    pub frame: Frame,
}

impl Point3Set {
    pub fn new(points: Vec<[f64; 3]>, frame: Frame) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite point coordinate".into()));
        }
        Ok(Point3Set { points, frame })
    }
}

/// Applies `e_a · e_b⁻¹` to every point in homogeneous coordinates.
///
/// Points tagged past-ego come back tagged current-ego and vice versa, so
/// swapping the pose arguments undoes the transform.
pub fn transform_to_frame(points: &Point3Set, e_a: &EgoPose, e_b: &EgoPose) -> Result<Point3Set> {
    let frame = match points.frame {
        Frame::PastEgo => Frame::CurrentEgo,
        Frame::CurrentEgo => Frame::PastEgo,
        Frame::Camera => return Err(Error::Pose("camera-frame points cannot be aligned between ego frames".into())),
    };
    let m = e_a.compose(&e_b.inverse());
    Ok(Point3Set { points: points.points.iter().map(|&p| m.apply(p)).collect(), frame })
}

/// Pinhole camera rigidly mounted on the ego vehicle.
///
/// Camera axes: +x right, +y down, +z along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Ego frame → camera frame.
    pub extrinsics: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting one point into one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsics: Matrix4<f64>, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::Config(format!("principal point ({cx}, {cy}) outside {width}x{height}")));
        }
        check_rigid(&extrinsics)?;
        Ok(CameraModel { fx, fy, cx, cy, extrinsics, width, height })
    }

    /// Camera at `position` (ego frame) looking along heading `yaw` (about +z,
    /// 0 = +x) tilted by `pitch` (positive looks down), horizontal field of
    /// view `hfov` radians, square pixels.
    pub fn mounted(position: [f64; 3], yaw: f64, pitch: f64, hfov: f64, width: usize, height: usize) -> Result<Self> {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vector3::new(cy * cp, sy * cp, -sp);
        let right = Vector3::new(sy, -cy, 0.0);
        let down = forward.cross(&right);
        // Rows of the ego → camera rotation are the camera axes in ego coordinates.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * Vector3::from(position));
        let mut ext = Matrix4::identity();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        Self::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, ext, width, height)
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn ego_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let h = self.extrinsics * Vector4::new(p[0], p[1], p[2], 1.0);
        [h[0], h[1], h[2]]
    }

    /// Camera center in ego coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r: Matrix3<f64> = self.extrinsics.fixed_view::<3, 3>(0, 0).into();
        let t: Vector3<f64> = self.extrinsics.fixed_view::<3, 1>(0, 3).into();
        let c = -(r.transpose() * t);
        [c[0], c[1], c[2]]
    }

    /// Unit direction (ego frame) of the ray through continuous pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> [f64; 3] {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize();
        let r: Matrix3<f64> = self.extrinsics.fixed_view::<3, 3>(0, 0).into();
        let e = r.transpose() * d;
        [e[0], e[1], e[2]]
    }

    /// Pixel-area bounds: pixel `i` covers `[i - 0.5, i + 0.5)`.
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && u < self.width as f64 - 0.5 && v >= -0.5 && v < self.height as f64 - 0.5
    }

    /// Projects a camera-frame point.
    pub fn project_camera_point(&self, pc: [f64; 3]) -> Projection {
        let depth = pc[2];
        if depth <= Z_NEAR {
            return Projection { u: 0.0, v: 0.0, depth, valid: false };
        }
        let u = self.fx * pc[0] / depth + self.cx;
        let v = self.fy * pc[1] / depth + self.cy;
        Projection { u, v, depth, valid: self.in_bounds(u, v) }
    }
}

/// Projects every point into `cam`. Camera-tagged points skip the extrinsics.
pub fn project_to_view(points: &Point3Set, cam: &CameraModel) -> Vec<Projection> {
    points
        .points
        .iter()
        .map(|&p| {
            let pc = if points.frame == Frame::Camera { p } else { cam.ego_to_camera(p) };
            cam.project_camera_point(pc)
        })
        .collect()
}

/// Corner indices and weights of a clamped bilinear lookup on an `h x w` grid,
/// plus whether each coordinate was clamped (zero derivative).
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    pub x0: usize,
    pub y0: usize,
    pub fx: f64,
    pub fy: f64,
    pub clamped_u: bool,
    pub clamped_v: bool,
}

pub fn bilinear_tap(u: f64, v: f64, w: usize, h: usize) -> BilinearTap {
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    let clamped_u = !(0.0..=wmax).contains(&u);
    let clamped_v = !(0.0..=hmax).contains(&v);
    let uc = u.clamp(0.0, wmax);
    let vc = v.clamp(0.0, hmax);
    let x0 = (uc.floor() as usize).min(w - 2);
    let y0 = (vc.floor() as usize).min(h - 2);
    BilinearTap { x0, y0, fx: uc - x0 as f64, fy: vc - y0 as f64, clamped_u, clamped_v }
}

/// Bilinear interpolation of an `h x w x c` map at continuous pixel `(u, v)`
/// (column, row) with border clamping.
pub fn bilinear_sample<T: Scalar>(map: &Tensor<T>, u: f64, v: f64) -> Result<Vec<T>> {
    let (h, w, c) = map_dims(map.shape())?;
    let tap = bilinear_tap(u, v, w, h);
    let d = map.data();
    let at = |y: usize, x: usize, k: usize| d[(y * w + x) * c + k].f64();
    Ok((0..c)
        .map(|k| {
            let top = at(tap.y0, tap.x0, k) * (1.0 - tap.fx) + at(tap.y0, tap.x0 + 1, k) * tap.fx;
            let bottom = at(tap.y0 + 1, tap.x0, k) * (1.0 - tap.fx) + at(tap.y0 + 1, tap.x0 + 1, k) * tap.fx;
            T::of(top * (1.0 - tap.fy) + bottom * tap.fy)
        })
        .collect())
}

fn map_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] if h >= 2 && w >= 2 => Ok((h, w, c)),
        ref s => Err(Error::dim("bilinear_sample", format!("feature map must be h x w x c with h, w >= 2, got {s:?}"))),
    }
}

struct RigidTransform {
    rot: [[f64; 3]; 3],
}

impl<T: Scalar> Op<T> for RigidTransform {
    fn name(&self) -> &'static str {
        "rigid_transform"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let r = &self.rot;
        let mut dx = Vec::with_capacity(ctx.grad.len());
        for g in ctx.grad.chunks(3) {
            let g = [g[0].f64(), g[1].f64(), g[2].f64()];
            for j in 0..3 {
                dx.push(T::of(r[0][j] * g[0] + r[1][j] * g[1] + r[2][j] * g[2]));
            }
        }
        vec![Some(dx)]
    }
}

struct Project {
    cam: CameraModel,
    /// Camera-frame coordinates per point; `None` for invalid projections.
    cam_points: Vec<Option<[f64; 3]>>,
}

impl<T: Scalar> Op<T> for Project {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let ext = &self.cam.extrinsics;
        let mut dx = vec![T::zero(); ctx.inputs[0].numel()];
        for (i, pc) in self.cam_points.iter().enumerate() {
            let Some([x, y, z]) = *pc else { continue };
            let (gu, gv) = (ctx.grad[2 * i].f64(), ctx.grad[2 * i + 1].f64());
            // d(u,v)/d(camera point), then chain through the rotation block.
            let dc = [
                gu * self.cam.fx / z,
                gv * self.cam.fy / z,
                -gu * self.cam.fx * x / (z * z) - gv * self.cam.fy * y / (z * z),
            ];
            for j in 0..3 {
                let g = ext[(0, j)] * dc[0] + ext[(1, j)] * dc[1] + ext[(2, j)] * dc[2];
                dx[3 * i + j] = T::of(g);
            }
        }
        vec![Some(dx)]
    }
}

struct Bilinear {
    taps: Vec<Option<BilinearTap>>,
    w: usize,
    c: usize,
}

impl<T: Scalar> Op<T> for Bilinear {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let map = ctx.inputs[0].data();
        let (w, c) = (self.w, self.c);
        let mut dmap = ctx.needs[0].then(|| vec![T::zero(); map.len()]);
        let mut duv = ctx.needs[1].then(|| vec![T::zero(); ctx.inputs[1].numel()]);
        for (i, tap) in self.taps.iter().enumerate() {
            let Some(tap) = tap else { continue };
            let g = &ctx.grad[i * c..(i + 1) * c];
            let (fx, fy) = (T::of(tap.fx), T::of(tap.fy));
            let one = T::one();
            let base = [
                (tap.y0 * w + tap.x0) * c,
                (tap.y0 * w + tap.x0 + 1) * c,
                ((tap.y0 + 1) * w + tap.x0) * c,
                ((tap.y0 + 1) * w + tap.x0 + 1) * c,
            ];
            let wts = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
            if let Some(dm) = dmap.as_mut() {
                for (b, wt) in base.iter().zip(wts) {
                    for k in 0..c {
                        dm[b + k] += g[k] * wt;
                    }
                }
            }
            if let Some(d) = duv.as_mut() {
                let (mut du, mut dv) = (T::zero(), T::zero());
                for k in 0..c {
                    let (v00, v01, v10, v11) = (map[base[0] + k], map[base[1] + k], map[base[2] + k], map[base[3] + k]);
                    du += g[k] * ((v01 - v00) * (one - fy) + (v11 - v10) * fy);
                    dv += g[k] * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
                }
                if !tap.clamped_u {
                    d[2 * i] = du;
                }
                if !tap.clamped_v {
                    d[2 * i + 1] = dv;
                }
            }
        }
        vec![dmap, duv]
    }
}

impl<T: Scalar> Tape<T> {
    /// Applies the affine map `m` (top 3x4 block used) to each row of an `n x 3` point matrix.
    pub fn rigid_transform(&mut self, points: Var, m: &Matrix4<f64>) -> Result<Var> {
        let shape = self.shape(points).to_vec();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::dim("rigid_transform", format!("expected n x 3 points, got {shape:?}")));
        }
        let rot: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        let data: Vec<T> = self
            .value(points)
            .data()
            .chunks(3)
            .flat_map(|p| {
                let p = [p[0].f64(), p[1].f64(), p[2].f64()];
                (0..3).map(move |i| T::of(rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2] + m[(i, 3)]))
            })
            .collect();
        let value = Tensor::new(&shape, data)?;
        self.push(Box::new(RigidTransform { rot }), &[points], value)
    }

    /// Projects `n x 3` ego-frame points into `cam`, returning `n x 2` pixel
    /// coordinates (zero rows for invalid points) and the validity mask.
    pub fn project(&mut self, points: Var, cam: &CameraModel) -> Result<(Var, Vec<bool>)> {
        let shape = self.shape(points).to_vec();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::dim("project", format!("expected n x 3 points, got {shape:?}")));
        }
        let mut uv = Vec::with_capacity(shape[0] * 2);
        let mut cam_points = Vec::with_capacity(shape[0]);
        let mut valid = Vec::with_capacity(shape[0]);
        for p in self.value(points).data().chunks(3) {
            let pc = cam.ego_to_camera([p[0].f64(), p[1].f64(), p[2].f64()]);
            let pr = cam.project_camera_point(pc);
            if pr.valid {
                uv.push(T::of(pr.u));
                uv.push(T::of(pr.v));
                cam_points.push(Some(pc));
            } else {
                uv.push(T::zero());
                uv.push(T::zero());
                cam_points.push(None);
            }
            valid.push(pr.valid);
        }
        let value = Tensor::new(&[shape[0], 2], uv)?;
        let var = self.push(Box::new(Project { cam: *cam, cam_points }), &[points], value)?;
        Ok((var, valid))
    }

    /// Clamped bilinear lookup of `h x w x c` `map` at each `(u, v)` row of
    /// `uv`; rows with `valid[i] == false` yield zeros and no gradient.
    pub fn bilinear_sample(&mut self, map: Var, uv: Var, valid: &[bool]) -> Result<Var> {
        let (h, w, c) = map_dims(self.shape(map))?;
        let n = self.value(uv).rows();
        if self.value(uv).cols() != 2 || valid.len() != n {
            return Err(Error::dim("bilinear_sample", "uv must be n x 2 with one validity flag per row"));
        }
        let mut out = vec![T::zero(); n * c];
        let mut taps = Vec::with_capacity(n);
        let (m, coords) = (self.value(map).data(), self.value(uv).data());
        for i in 0..n {
            if !valid[i] {
                taps.push(None);
                continue;
            }
            let tap = bilinear_tap(coords[2 * i].f64(), coords[2 * i + 1].f64(), w, h);
            let (fx, fy, one) = (T::of(tap.fx), T::of(tap.fy), T::one());
            let wts = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
            let bases = [
                (tap.y0 * w + tap.x0) * c,
                (tap.y0 * w + tap.x0 + 1) * c,
                ((tap.y0 + 1) * w + tap.x0) * c,
                ((tap.y0 + 1) * w + tap.x0 + 1) * c,
            ];
            let dst = &mut out[i * c..(i + 1) * c];
            for (b, wt) in bases.iter().zip(wts) {
                for k in 0..c {
                    dst[k] += m[b + k] * wt;
                }
            }
            taps.push(Some(tap));
        }
        let value = Tensor::new(&[n, c], out)?;
        self.push(Box::new(Bilinear { taps, w, c }), &[map, uv], value)
    }
}

//! Temporal sampling around BEV anchors: offset prediction, multi-frame
//! multi-view feature gathering, point/channel mixing and height refinement.

use nalgebra::Matrix4;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_tap, BilinearTap, CameraModel, EgoPose};
use crate::numerics::{BackwardCtx, Linear, Op, ParamStore, Scalar, Tape, Tensor, Var};

pub const DDN_EPS: f64 = 1e-5;

/// Bound on the height logit; sigmoid(±12) stays strictly inside (0, 1) in f32.
const LOGIT_LIMIT: f64 = 12.0;

/// Geometry of every BEV pillar. Only `h` ever changes.
#[derive(Clone, Debug, PartialEq)]
pub struct BevAnchors {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub l: Vec<f64>,
    pub w: Vec<f64>,
    pub h: Vec<f64>,
    pub z_range: f64,
}

impl BevAnchors {
    /// Anchors at the centres of an `nx x ny` grid of `cell`-sized pillars
    /// whose corner is `origin`, spanning `z_range` metres upward from
    /// `origin[2]`. Pillar index is `ix * ny + iy`.
    pub fn grid(nx: usize, ny: usize, cell: (f64, f64), origin: [f64; 3], z_range: f64) -> Result<Self> {
        if nx == 0 || ny == 0 || !(cell.0 > 0.0 && cell.1 > 0.0 && z_range > 0.0) {
            return Err(Error::Config("anchor grid needs positive extents".into()));
        }
        let n = nx * ny;
        let mut a = BevAnchors {
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            z: vec![origin[2] + z_range / 2.0; n],
            l: vec![cell.0; n],
            w: vec![cell.1; n],
            h: vec![z_range; n],
            z_range,
        };
        for ix in 0..nx {
            for iy in 0..ny {
                a.x.push(origin[0] + (ix as f64 + 0.5) * cell.0);
                a.y.push(origin[1] + (iy as f64 + 0.5) * cell.1);
            }
        }
        Ok(a)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn center(&self, i: usize) -> [f64; 3] {
        [self.x[i], self.y[i], self.z[i]]
    }
}

/// Features of one pillar's sampling points plus per-point validity.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPointSet<T> {
    pub features: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> SampledPointSet<T> {
    /// Slices pillar `pillar` out of a batched `[pillars, n, c]` gather result.
    pub fn from_batch(batch: &Tensor<T>, mask: &[bool], pillar: usize) -> Result<Self> {
        let (n, c) = match *batch.shape() {
            [_, n, c] => (n, c),
            ref s => return Err(Error::dim("sampled_points", format!("expected pillars x n x c, got {s:?}"))),
        };
        let data = batch.data()[pillar * n * c..(pillar + 1) * n * c].to_vec();
        Ok(SampledPointSet { features: Tensor::new(&[n, c], data)?, mask: mask[pillar * n..(pillar + 1) * n].to_vec() })
    }
}

/// Linear offset head producing `frames x points_per_frame` sampling points per pillar.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSampler {
    pub offsets: Linear,
    pub frames: usize,
    pub points_per_frame: usize,
}

impl PointSampler {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        frames: usize,
        points_per_frame: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if frames == 0 || points_per_frame == 0 {
            return Err(Error::Config("frames and points_per_frame must be >= 1".into()));
        }
        let offsets = Linear::new(store, &format!("{name}.offsets"), channels, frames * points_per_frame * 3, rng)?;
        Ok(PointSampler { offsets, frames, points_per_frame })
    }

    pub fn points_per_pillar(&self) -> usize {
        self.frames * self.points_per_frame
    }

    /// Sampling points in the current ego frame, `[pillars * frames * m, 3]`
    /// ordered by (pillar, frame, point). `heights` is the `[pillars, 1]`
    /// anchor height, on the tape so refinement receives gradient.
    pub fn generate<T: Scalar>(&self, tape: &mut Tape<T>, bev: Var, anchors: &BevAnchors, heights: Var) -> Result<Var> {
        let n_b = anchors.len();
        let per = self.points_per_pillar();
        if tape.value(bev).rows() != n_b || tape.value(heights).numel() != n_b {
            return Err(Error::dim("sampling_points", "BEV features, anchors and heights must agree on pillar count"));
        }
        let raw = self.offsets.forward(tape, bev)?;
        let unit = tape.tanh(raw)?;
        let unit = tape.reshape(unit, &[n_b * per, 3])?;
        let xy = tape.slice_cols(unit, 0, 2)?;
        let oz = tape.slice_cols(unit, 2, 1)?;
        let mut half = Vec::with_capacity(n_b * per * 2);
        let mut centers = Vec::with_capacity(n_b * per * 3);
        let mut owner = Vec::with_capacity(n_b * per);
        for p in 0..n_b {
            for _ in 0..per {
                half.push(T::of(anchors.l[p] / 2.0));
                half.push(T::of(anchors.w[p] / 2.0));
                centers.extend(anchors.center(p).map(T::of));
                owner.push(p);
            }
        }
        let half = tape.constant(Tensor::new(&[n_b * per, 2], half)?);
        let dxy = tape.mul(xy, half)?;
        let hz = tape.reshape(heights, &[n_b, 1])?;
        let hz = tape.gather_rows(hz, &owner)?;
        let hz = tape.scale(hz, 0.5)?;
        let dz = tape.mul(oz, hz)?;
        let delta = tape.concat_cols(&[dxy, dz])?;
        let centers = tape.constant(Tensor::new(&[n_b * per, 3], centers)?);
        tape.add(delta, centers)
    }
}

/// Transform taking current-ego coordinates into the ego frame of `past`,
/// i.e. `past⁻¹ · current` (ego→world poses).
pub fn current_to_past(current: &EgoPose, past: &EgoPose) -> Matrix4<f64> {
    *past.inverse().compose(current).matrix()
}

/// View features of one frame.
#[derive(Clone, Debug)]
pub struct FrameViews {
    pub pose: EgoPose,
    /// One `h x w x c` map per camera, on the tape.
    pub maps: Vec<Var>,
}

struct Hit {
    map: usize,
    tap: BilinearTap,
    /// d(u, v) / d(point in current ego frame).
    jac: [[f64; 3]; 2],
}

struct MultiViewGather {
    hits: Vec<Vec<Hit>>,
    map_dims: (usize, usize),
    c: usize,
}

fn corners(tap: &BilinearTap, w: usize, c: usize) -> [usize; 4] {
    [
        (tap.y0 * w + tap.x0) * c,
        (tap.y0 * w + tap.x0 + 1) * c,
        ((tap.y0 + 1) * w + tap.x0) * c,
        ((tap.y0 + 1) * w + tap.x0 + 1) * c,
    ]
}

fn tap_weights(tap: &BilinearTap) -> [f64; 4] {
    let (fx, fy) = (tap.fx, tap.fy);
    [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
}

impl<T: Scalar> Op<T> for MultiViewGather {
    fn name(&self) -> &'static str {
        "multi_view_gather"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (_, w) = self.map_dims;
        let c = self.c;
        let n_maps = ctx.inputs.len() - 1;
        let mut dpts = ctx.needs[0].then(|| vec![T::zero(); ctx.inputs[0].numel()]);
        let mut dmaps: Vec<Option<Vec<T>>> =
            (0..n_maps).map(|i| ctx.needs[i + 1].then(|| vec![T::zero(); ctx.inputs[i + 1].numel()])).collect();
        for (row, hits) in self.hits.iter().enumerate() {
            if hits.is_empty() {
                continue;
            }
            let share = T::of(1.0 / hits.len() as f64);
            let g = &ctx.grad[row * c..(row + 1) * c];
            for hit in hits {
                let idx = corners(&hit.tap, w, c);
                let wts = tap_weights(&hit.tap).map(T::of);
                if let Some(dm) = dmaps[hit.map].as_mut() {
                    for (b, wt) in idx.iter().zip(wts) {
                        for k in 0..c {
                            dm[b + k] += g[k] * wt * share;
                        }
                    }
                }
                if let Some(dp) = dpts.as_mut() {
                    let map = ctx.inputs[hit.map + 1].data();
                    let (fx, fy, one) = (T::of(hit.tap.fx), T::of(hit.tap.fy), T::one());
                    let (mut du, mut dv) = (T::zero(), T::zero());
                    for k in 0..c {
                        let (v00, v01, v10, v11) = (map[idx[0] + k], map[idx[1] + k], map[idx[2] + k], map[idx[3] + k]);
                        du += g[k] * ((v01 - v00) * (one - fy) + (v11 - v10) * fy);
                        dv += g[k] * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
                    }
                    let du = if hit.tap.clamped_u { 0.0 } else { (du * share).f64() };
                    let dv = if hit.tap.clamped_v { 0.0 } else { (dv * share).f64() };
                    for j in 0..3 {
                        dp[row * 3 + j] += T::of(du * hit.jac[0][j] + dv * hit.jac[1][j]);
                    }
                }
            }
        }
        let mut out = vec![dpts];
        out.extend(dmaps);
        out
    }
}

impl<T: Scalar> Tape<T> {
    /// Gathers view features for sampling points given in the current ego frame.
    ///
    /// `points` is `[pillars * frames * m, 3]` ordered by (pillar, frame,
    /// point); `frames[0]` must be the current frame. Each point is moved
    /// into its frame's ego coordinates, projected into every camera,
    /// bilinearly sampled where valid and averaged over valid views. Returns
    /// `[pillars, frames * m, c]` and a per-point mask (false = seen by no view).
    pub fn gather_temporal(
        &mut self,
        points: Var,
        frames: &[FrameViews],
        cameras: &[CameraModel],
        points_per_frame: usize,
    ) -> Result<(Var, Vec<bool>)> {
        let k = frames.len();
        if k == 0 || cameras.is_empty() || points_per_frame == 0 {
            return Err(Error::Config("need at least one frame, one camera and one point per frame".into()));
        }
        if let Some(f) = frames.iter().position(|f| f.maps.len() != cameras.len()) {
            return Err(Error::Config(format!(
                "frame {f} has {} view maps for {} cameras",
                frames[f].maps.len(),
                cameras.len()
            )));
        }
        let shape = self.shape(frames[0].maps[0]).to_vec();
        let (mh, mw, c) = match shape[..] {
            [h, w, c] if h >= 2 && w >= 2 => (h, w, c),
            _ => return Err(Error::dim("multi_view_gather", format!("view maps must be h x w x c, got {shape:?}"))),
        };
        let maps: Vec<Var> = frames.iter().flat_map(|f| f.maps.iter().copied()).collect();
        if maps.iter().any(|&m| self.shape(m) != shape) {
            return Err(Error::dim("multi_view_gather", "all view maps must share one shape"));
        }
        let n = self.value(points).rows();
        let per_pillar = k * points_per_frame;
        if self.value(points).cols() != 3 || n % per_pillar != 0 {
            return Err(Error::Config(format!(
                "{n} sampling points do not split into pillars of {k} frames x {points_per_frame}"
            )));
        }
        // Per (frame, camera): affine map current-ego -> camera, as rows.
        let current = frames[0].pose;
        let to_cam: Vec<Matrix4<f64>> = frames
            .iter()
            .flat_map(|f| {
                let m = current_to_past(&current, &f.pose);
                cameras.iter().map(move |cam| cam.extrinsics * m)
            })
            .collect();

        let pts = self.value(points).data();
        let mut out = vec![T::zero(); n * c];
        let mut mask = Vec::with_capacity(n);
        let mut all_hits = Vec::with_capacity(n);
        for row in 0..n {
            let f = (row / points_per_frame) % k;
            let p = [pts[row * 3].f64(), pts[row * 3 + 1].f64(), pts[row * 3 + 2].f64()];
            let mut hits = Vec::new();
            for (ci, cam) in cameras.iter().enumerate() {
                let mi = f * cameras.len() + ci;
                let a = &to_cam[mi];
                let pc: [f64; 3] =
                    std::array::from_fn(|i| a[(i, 0)] * p[0] + a[(i, 1)] * p[1] + a[(i, 2)] * p[2] + a[(i, 3)]);
                let pr = cam.project_camera_point(pc);
                if !pr.valid {
                    continue;
                }
                let z = pc[2];
                let du = [cam.fx / z, 0.0, -cam.fx * pc[0] / (z * z)];
                let dv = [0.0, cam.fy / z, -cam.fy * pc[1] / (z * z)];
                let jac = [du, dv].map(|d| std::array::from_fn(|j| d[0] * a[(0, j)] + d[1] * a[(1, j)] + d[2] * a[(2, j)]));
                hits.push(Hit { map: mi, tap: bilinear_tap(pr.u, pr.v, mw, mh), jac });
            }
            if !hits.is_empty() {
                let share = 1.0 / hits.len() as f64;
                let dst = &mut out[row * c..(row + 1) * c];
                for hit in &hits {
                    let src = self.value(maps[hit.map]).data();
                    for (b, wt) in corners(&hit.tap, mw, c).iter().zip(tap_weights(&hit.tap)) {
                        let wt = T::of(wt * share);
                        for k in 0..c {
                            dst[k] += src[b + k] * wt;
                        }
                    }
                }
            }
            mask.push(!hits.is_empty());
            all_hits.push(hits);
        }
        let value = Tensor::new(&[n / per_pillar, per_pillar, c], out)?;
        let mut inputs = vec![points];
        inputs.extend(&maps);
        let var = self.push(Box::new(MultiViewGather { hits: all_hits, map_dims: (mh, mw), c }), &inputs, value)?;
        Ok((var, mask))
    }

    /// Dual-dimensional normalization: one mean and variance over each whole
    /// `n x c` point set (the trailing two axes).
    pub fn ddn(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::dim("ddn", format!("expected n x c point sets, got {s:?}")));
        }
        let group = s[s.len() - 1] * s[s.len() - 2];
        self.group_norm(x, group, eps)
    }
}

/// MLP-Mixer style fusion of one pillar's sampled points into a query update.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMixer {
    /// Mixes across the `n` points (applied to the transposed set).
    pub point: Linear,
    /// Mixes across the `c` feature channels.
    pub channel: Linear,
    /// Flattened `n * c` set to the query width.
    pub out: Linear,
    pub points: usize,
    pub channels: usize,
    pub eps: f64,
}

impl PointMixer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        points: usize,
        channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(PointMixer {
            point: Linear::new(store, &format!("{name}.point"), points, points, rng)?,
            channel: Linear::new(store, &format!("{name}.channel"), channels, channels, rng)?,
            out: Linear::new(store, &format!("{name}.out"), points * channels, out_channels, rng)?,
            points,
            channels,
            eps: DDN_EPS,
        })
    }

    /// `o` is `[pillars, n, c]`; returns `[pillars, out_channels]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, o: Var) -> Result<Var> {
        let (n, c) = (self.points, self.channels);
        let pillars = match *tape.shape(o) {
            [p, pn, pc] if pn == n && pc == c => p,
            ref s => return Err(Error::dim("mlp_mix", format!("expected pillars x {n} x {c}, got {s:?}"))),
        };
        let t = tape.transpose(o)?;
        let t = self.point.forward(tape, t)?;
        let mixed = tape.transpose(t)?;
        let mixed = tape.ddn(mixed, self.eps)?;
        let mixed = tape.relu(mixed)?;
        let ch = self.channel.forward(tape, mixed)?;
        let ch = tape.ddn(ch, self.eps)?;
        let ch = tape.relu(ch)?;
        let sum = tape.add(o, ch)?;
        let flat = tape.reshape(sum, &[pillars, n * c])?;
        self.out.forward(tape, flat)
    }
}

/// Per-layer anchor height re-estimate `sigmoid(Linear(q)) · z_range`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightRefiner {
    pub linear: Linear,
    pub z_range: f64,
}

impl HeightRefiner {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        z_range: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(HeightRefiner { linear: Linear::new(store, &format!("{name}.height"), channels, 1, rng)?, z_range })
    }

    /// Returns the refined `[pillars, 1]` heights; x, y, z, l, w are untouched.
    ///
    /// The logit passes through `L·tanh(x/L)` first so the sigmoid can never
    /// round to exactly 0 or 1, even at 32-bit.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bev: Var) -> Result<Var> {
        let h = self.linear.forward(tape, bev)?;
        let h = tape.scale(h, 1.0 / LOGIT_LIMIT)?;
        let h = tape.tanh(h)?;
        let h = tape.scale(h, LOGIT_LIMIT)?;
        let h = tape.sigmoid(h)?;
        tape.scale(h, self.z_range)
    }

    /// Copies refined heights back into the anchor record.
    pub fn apply<T: Scalar>(&self, tape: &Tape<T>, heights: Var, anchors: &mut BevAnchors) {
        for (dst, v) in anchors.h.iter_mut().zip(tape.value(heights).data()) {
            *dst = v.f64();
        }
    }
}

//! Finite-difference checks of every differentiable operation, the
//! composite layers built from them, and a micro end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_model, Config, ModelConfig};
use crate::attention::{IbBiXAttn, InstanceEncoderLayer};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, EgoPose};
use crate::numerics::gradcheck::grad_check_with_fault;
use crate::numerics::{GradCheckReport, Init, ParamStore, Tape, Tensor, Var};
use crate::occ_head::{
    total_loss, ChannelToHeightHead, ClassWeights, GridGeometry, HeadLayout, HeightAwareHead, OccupancyGrid,
};
use crate::scene_gen::{generate_scene, SceneConfig};
use crate::temporal::{BevAnchors, FrameViews, HeightRefiner, PointMixer, PointSampler, DDN_EPS};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = crate::numerics::gradcheck::DEFAULT_EPS;

/// Names of all recorded operations with a hand-written backward.
pub const DIFFERENTIABLE_OPS: [&str; 28] = [
    "add",
    "add_bias",
    "balanced_cross_entropy",
    "bilinear_sample",
    "concat_cols",
    "concat_rows",
    "gather_rows",
    "group_norm",
    "im2col3",
    "layer_norm",
    "lovasz_softmax",
    "matmul",
    "mean_axis",
    "mul",
    "multi_view_gather",
    "project",
    "relu",
    "reshape",
    "rigid_transform",
    "row_scale",
    "scale",
    "sigmoid",
    "slice_cols",
    "softmax",
    "sub",
    "sum",
    "tanh",
    "transpose",
];

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub module: &'static str,
    pub case: &'static str,
    /// Operations recorded by the checked function.
    pub ops: Vec<&'static str>,
    pub report: GradCheckReport,
}

impl CaseReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.report.passed(tolerance)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed(self.tolerance))
    }

    pub fn failures(&self) -> Vec<&CaseReport> {
        self.cases.iter().filter(|c| !c.passed(self.tolerance)).collect()
    }

    /// Every operation exercised by at least one case, sorted.
    pub fn ops_checked(&self) -> Vec<&'static str> {
        let mut ops: Vec<&'static str> = self.cases.iter().flat_map(|c| c.ops.iter().copied()).collect();
        ops.sort_unstable();
        ops.dedup();
        ops
    }

    /// Worst case of each module, in first-seen module order.
    pub fn worst_per_module(&self) -> Vec<&CaseReport> {
        let mut out: Vec<&CaseReport> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|w| w.module == c.module) {
                Some(w) if c.report.max_rel_error > w.report.max_rel_error => *w = c,
                Some(_) => {}
                None => out.push(c),
            }
        }
        out
    }

    /// Single-op cases that fail, named by their op; composites are named by case.
    pub fn failing_ops(&self) -> Vec<String> {
        self.failures()
            .iter()
            .map(|c| if c.ops.contains(&c.case) { c.case.to_string() } else { format!("{} ({})", c.case, c.module) })
            .collect()
    }
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    module: &'static str,
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: CheckFn,
}

fn case(module: &'static str, name: &'static str, inputs: Vec<Tensor<f64>>, f: CheckFn) -> Case {
    Case { module, name, inputs, f }
}

/// Dot product with a fixed random tensor, so no output coordinate is
/// weighted symmetrically.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::normal(shape, 1.0, rng)
}

/// Entries kept at least 0.1 away from zero (clear of the relu kink).
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = normal(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.1);
    }
    t
}

fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let noise = Tensor::<f64>::normal(p.tensor.shape(), 0.05, rng);
        for (v, n) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

/// Parameters first, then `extra`; the closure sees only the extra inputs.
fn with_params(
    module: &'static str,
    name: &'static str,
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.clone()).collect();
    let np = inputs.len();
    inputs.extend(extra);
    case(
        module,
        name,
        inputs,
        Box::new(move |tape, v| {
            tape.bind(v[..np].to_vec());
            f(tape, &v[np..])
        }),
    )
}

fn elementwise_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let w34 = normal(&[3, 4], rng);
    let mut out = Vec::new();
    let w = w34.clone();
    out.push(case("numerics", "add", vec![normal(&[3, 4], rng), normal(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, &w)
    })));
    let w = w34.clone();
    out.push(case("numerics", "sub", vec![normal(&[3, 4], rng), normal(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, &w)
    })));
    let w = w34.clone();
    out.push(case("numerics", "mul", vec![normal(&[3, 4], rng), normal(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, &w)
    })));
    let w = w34.clone();
    out.push(case("numerics", "add_bias", vec![normal(&[3, 4], rng), normal(&[4], rng)], Box::new(move |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        weighted_sum(t, y, &w)
    })));
    let w = w34.clone();
    out.push(case("numerics", "scale", vec![normal(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.scale(v[0], -1.7)?;
        weighted_sum(t, y, &w)
    })));
    let w = w34.clone();
    out.push(case("numerics", "relu", vec![off_zero(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.relu(v[0])?;
        weighted_sum(t, y, &w)
    })));
    let w = w34.clone();
    out.push(case("numerics", "sigmoid", vec![normal(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.sigmoid(v[0])?;
        weighted_sum(t, y, &w)
    })));
    let w = w34.clone();
    out.push(case("numerics", "tanh", vec![normal(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.tanh(v[0])?;
        weighted_sum(t, y, &w)
    })));
    let w = w34;
    out.push(case("numerics", "softmax", vec![normal(&[3, 4], rng)], Box::new(move |t, v| {
        let a = t.softmax(v[0], 0)?;
        let b = t.softmax(v[0], 1)?;
        let y = t.add(a, b)?;
        weighted_sum(t, y, &w)
    })));
    out.push(case("numerics", "sum", vec![normal(&[2, 3], rng)], Box::new(|t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    })));
    out
}

fn structural_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut out = Vec::new();
    let w = normal(&[3, 5], rng);
    out.push(case("numerics", "matmul", vec![normal(&[3, 4], rng), normal(&[4, 5], rng)], Box::new(move |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[2, 4, 3], rng);
    out.push(case("numerics", "transpose", vec![normal(&[2, 3, 4], rng)], Box::new(move |t, v| {
        let y = t.transpose(v[0])?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[4, 3], rng);
    out.push(case("numerics", "reshape", vec![normal(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.reshape(v[0], &[4, 3])?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[3, 2], rng);
    out.push(case("numerics", "slice_cols", vec![normal(&[3, 5], rng)], Box::new(move |t, v| {
        let y = t.slice_cols(v[0], 1, 2)?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[3, 6], rng);
    out.push(case("numerics", "concat_cols", vec![normal(&[3, 2], rng), normal(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[5, 3], rng);
    out.push(case("numerics", "concat_rows", vec![normal(&[2, 3], rng), normal(&[3, 3], rng)], Box::new(move |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[5, 3], rng);
    out.push(case("numerics", "gather_rows", vec![normal(&[3, 3], rng)], Box::new(move |t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2, 1, 2])?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[3, 4], rng);
    out.push(case("numerics", "row_scale", vec![normal(&[3, 4], rng)], Box::new(move |t, v| {
        let y = t.row_scale(v[0], &[0.5, -2.0, 3.0])?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[2, 4], rng);
    out.push(case("numerics", "mean_axis", vec![normal(&[2, 3, 4], rng)], Box::new(move |t, v| {
        let y = t.mean_axis(v[0], 1)?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[12, 18], rng);
    out.push(case("numerics", "im2col3", vec![normal(&[3, 4, 2], rng)], Box::new(move |t, v| {
        let y = t.im2col3(v[0])?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[3, 4], rng);
    out.push(case("numerics", "layer_norm", vec![normal(&[3, 4], rng), normal(&[4], rng), normal(&[4], rng)], Box::new(move |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[2, 3, 4], rng);
    out.push(case("numerics", "group_norm", vec![normal(&[2, 3, 4], rng)], Box::new(move |t, v| {
        let y = t.group_norm(v[0], 12, 1e-5)?;
        weighted_sum(t, y, &w)
    })));
    let w = normal(&[3, 5], rng);
    out.push(case("numerics", "linear", vec![normal(&[3, 4], rng), normal(&[4, 5], rng), normal(&[5], rng)], Box::new(move |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y, &w)
    })));
    out
}

fn front_camera(yaw: f64) -> Result<CameraModel> {
    CameraModel::mounted([0.0, 0.0, 1.0], yaw, 0.0, 1.4, 16, 12)
}

/// Points in front of a camera at the origin looking along +x.
fn points_ahead(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data: Vec<f64> = (0..n)
        .flat_map(|_| [rng.random_range(3.0..6.0), rng.random_range(-1.0..1.0), rng.random_range(0.4..1.6)])
        .collect();
    Tensor::new(&[n, 3], data).expect("n x 3")
}

fn geometry_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let pose = *EgoPose::from_yaw_translation(0.3, [1.0, -2.0, 0.5]).matrix();
    let w = normal(&[5, 3], rng);
    out.push(case("geometry", "rigid_transform", vec![normal(&[5, 3], rng)], Box::new(move |t, v| {
        let y = t.rigid_transform(v[0], &pose)?;
        weighted_sum(t, y, &w)
    })));
    let cam = front_camera(0.1)?;
    let w = normal(&[6, 2], rng);
    out.push(case("geometry", "project", vec![points_ahead(6, rng)], Box::new(move |t, v| {
        let (uv, valid) = t.project(v[0], &cam)?;
        if !valid.iter().all(|&b| b) {
            return Err(Error::Data("check points left the view".into()));
        }
        weighted_sum(t, uv, &w)
    })));
    let uv: Vec<f64> = (0..5).flat_map(|_| [rng.random_range(0.6..7.4), rng.random_range(0.6..5.4)]).collect();
    let w = normal(&[5, 3], rng);
    out.push(case(
        "geometry",
        "bilinear_sample",
        vec![Tensor::uniform(&[6, 8, 3], 1.0, rng), Tensor::new(&[5, 2], uv)?],
        Box::new(move |t, v| {
            let y = t.bilinear_sample(v[0], v[1], &[true, true, true, true, false])?;
            weighted_sum(t, y, &w)
        }),
    ));
    Ok(out)
}

fn temporal_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let w = normal(&[3, 4, 2], rng);
    out.push(case("temporal", "ddn", vec![normal(&[3, 4, 2], rng)], Box::new(move |t, v| {
        let y = t.ddn(v[0], DDN_EPS)?;
        weighted_sum(t, y, &w)
    })));

    let cams = [front_camera(0.1)?, front_camera(-0.1)?];
    let poses = [EgoPose::identity(), EgoPose::from_yaw_translation(0.03, [-0.3, 0.05, 0.0])];
    let (k, m, cimg) = (2, 2, 3);
    let maps: Vec<Tensor<f64>> = (0..k * 2).map(|_| Tensor::uniform(&[12, 16, cimg], 1.0, rng)).collect();
    let mut extra = vec![points_ahead(4 * k * m, rng)];
    extra.extend(maps);
    let w = normal(&[4, k * m, cimg], rng);
    let (c2, p2) = (cams, poses);
    out.push(case(
        "temporal",
        "multi_view_gather",
        extra,
        Box::new(move |t, v| {
            let frames: Vec<FrameViews> =
                (0..k).map(|f| FrameViews { pose: p2[f], maps: v[1 + f * 2..3 + f * 2].to_vec() }).collect();
            let (o, _) = t.gather_temporal(v[0], &frames, &c2, m)?;
            weighted_sum(t, o, &w)
        }),
    ));

    let c = 4;
    let mut store = ParamStore::<f64>::new();
    let sampler = PointSampler::new(&mut store, "s", c, k, m, rng)?;
    store.get_mut(sampler.offsets.weight).tensor = Init::Uniform { bound: 0.3 }.sample(&[c, k * m * 3], rng);
    let mixer = PointMixer::new(&mut store, "m", k * m, cimg, c, rng)?;
    let refiner = HeightRefiner::new(&mut store, "r", c, 1.6, rng)?;
    jitter(&mut store, rng);
    let anchors = BevAnchors::grid(2, 2, (0.8, 0.8), [4.0, -0.8, 0.2], 1.6)?;
    let mut extra = vec![Tensor::<f64>::normal(&[4, c], 0.5, rng)];
    extra.extend((0..k * 2).map(|_| Tensor::uniform(&[12, 16, cimg], 1.0, rng)));
    let w = normal(&[4, c], rng);
    let wh = normal(&[4, 1], rng);
    out.push(with_params("temporal", "sample_mix_refine", &store, extra, move |t, v| {
        let h = t.constant(Tensor::from_f64(&[4, 1], &anchors.h)?);
        let pts = sampler.generate(t, v[0], &anchors, h)?;
        let frames: Vec<FrameViews> =
            (0..k).map(|f| FrameViews { pose: poses[f], maps: v[1 + f * 2..3 + f * 2].to_vec() }).collect();
        let (o, _) = t.gather_temporal(pts, &frames, &cams, m)?;
        let y = mixer.forward(t, o)?;
        let q = t.add(v[0], y)?;
        let heights = refiner.forward(t, q)?;
        let a = weighted_sum(t, q, &w)?;
        let b = weighted_sum(t, heights, &wh)?;
        t.add(a, b)
    }));
    Ok(out)
}

fn attention_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let (ni, nb, c, h) = (3, 6, 8, 2);
    let mut store = ParamStore::<f64>::new();
    let bix = IbBiXAttn::new(&mut store, "x", c, h, true, rng)?;
    jitter(&mut store, rng);
    let extra = vec![normal(&[ni, c], rng), normal(&[ni, c], rng), normal(&[nb, c], rng), normal(&[nb, c], rng)];
    let (wi, wb) = (normal(&[ni, c], rng), normal(&[nb, c], rng));
    let mut out = vec![with_params("attention", "bidirectional_cross_attention", &store, extra, move |t, v| {
        let o = bix.forward(t, v[0], v[1], v[2], v[3])?;
        let a = weighted_sum(t, o.inst, &wi)?;
        let b = weighted_sum(t, o.bev, &wb)?;
        t.add(a, b)
    })];
    let mut store = ParamStore::<f64>::new();
    let layer = InstanceEncoderLayer::new(&mut store, "e", c, h, rng)?;
    jitter(&mut store, rng);
    let w = normal(&[ni, c], rng);
    out.push(with_params("attention", "instance_self_attention", &store, vec![normal(&[ni, c], rng)], move |t, v| {
        let y = layer.forward(t, v[0])?;
        weighted_sum(t, y, &w)
    }));
    Ok(out)
}

fn occ_head_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let labels: Vec<u8> = vec![0, 2, 1, 2, 0, 1];
    let weights = ClassWeights { weights: vec![0.5, 1.2, 1.3] };
    let l2 = labels.clone();
    out.push(case("occ_head", "balanced_cross_entropy", vec![normal(&[6, 3], rng)], Box::new(move |t, v| {
        t.balanced_cross_entropy(v[0], &l2, &weights)
    })));
    out.push(case("occ_head", "lovasz_softmax", vec![normal(&[6, 3], rng)], Box::new(move |t, v| {
        let p = t.softmax(v[0], 1)?;
        t.lovasz_softmax(p, &labels)
    })));

    let geometry = GridGeometry::cubic([4, 4, 2], 1.0, [0.0; 3])?;
    let gt_labels: Vec<u8> = (0..geometry.len()).map(|_| rng.random_range(0..3)).collect();
    let gt = OccupancyGrid::new(geometry, 3, gt_labels)?;
    let targets = vec![gt.clone(), gt.downsample_z(2)?];
    let layout = HeadLayout::for_grid((2, 2), [4, 4, 2], 3, 8)?;

    let mut store = ParamStore::<f64>::new();
    let head = HeightAwareHead::new(&mut store, "h", layout, 1, 4, 4, true, rng)?;
    jitter(&mut store, rng);
    let t2 = targets.clone();
    out.push(with_params("occ_head", "height_aware_head", &store, vec![normal(&[4, 8], rng), normal(&[3, 8], rng)], move |t, v| {
        let logits = head.forward(t, v[0], Some(v[1]))?.logits;
        let half = t.pool_logits_z(logits, 2)?;
        Ok(total_loss(t, &[logits, half], &t2)?.total)
    }));

    let mut store = ParamStore::<f64>::new();
    let head = ChannelToHeightHead::new(&mut store, "c", layout, 1, 4, Some(6), rng)?;
    jitter(&mut store, rng);
    out.push(with_params("occ_head", "channel_to_height_head", &store, vec![normal(&[4, 8], rng)], move |t, v| {
        let logits = head.forward(t, v[0])?.logits;
        Ok(total_loss(t, &[logits], &targets[..1])?.total)
    }));
    Ok(out)
}

/// Smallest configuration that still runs every stage of the model.
pub fn micro_config() -> Config {
    let mut cfg = Config::default();
    cfg.scene = SceneConfig {
        grid: [4, 4, 2],
        voxel_size: 2.0,
        origin: [-4.0, -4.0, -0.5],
        frames: 2,
        cameras: 6,
        image_width: 8,
        image_height: 6,
        feature_channels: 4,
        boxes: 1,
        moving_boxes: 0,
        ..SceneConfig::default()
    };
    cfg.model = ModelConfig {
        channels: 8,
        heads: 2,
        instances: 3,
        bev: [2, 2],
        layers: 1,
        frames: 2,
        points_per_frame: 2,
        bottleneck: 4,
        height_hidden: 4,
        ..ModelConfig::default()
    };
    cfg
}

fn model_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = micro_config();
    let (model, mut store) = build_model(&cfg)?;
    let scene = generate_scene(0, &cfg.scene)?;
    let targets = model.targets(&scene.gt)?;
    // Zero-initialized biases put fully masked pillars exactly on relu
    // kinks; the jitter moves the check to a generic point.
    jitter(&mut store, rng);
    Ok(with_params("model_pipeline", "end_to_end_micro_model", &store, Vec::new(), move |t, _| {
        let out = model.forward(t, &scene)?;
        Ok(total_loss(t, &out.logits, &targets)?.total)
    }))
}

fn all_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
    let mut cases = elementwise_cases(&mut rng);
    cases.extend(structural_cases(&mut rng));
    cases.extend(geometry_cases(&mut rng)?);
    cases.extend(temporal_cases(&mut rng)?);
    cases.extend(attention_cases(&mut rng)?);
    cases.extend(occ_head_cases(&mut rng)?);
    cases.push(model_case(&mut rng)?);
    Ok(cases)
}

/// Runs every case. `fault` corrupts the backward of the named operation
/// (a negative control); the affected cases are expected to fail.
pub fn run_grad_suite(fault: Option<&str>) -> Result<SuiteReport> {
    if let Some(name) = fault {
        if !DIFFERENTIABLE_OPS.contains(&name) {
            return Err(Error::Config(format!("unknown operation {name:?} for fault injection")));
        }
    }
    let mut cases = Vec::new();
    for c in all_cases()? {
        let mut probe = Tape::new();
        let vars: Vec<Var> = c.inputs.iter().map(|t| probe.var(t.clone())).collect();
        (c.f)(&mut probe, &vars)?;
        let ops = probe.op_names();
        let report = grad_check_with_fault(&c.f, &c.inputs, STEP, fault)?;
        cases.push(CaseReport { module: c.module, case: c.name, ops, report });
    }
    Ok(SuiteReport { tolerance: TOLERANCE, cases })
}

//! The full model (BEV and instance queries refined by a stack of encoder
//! layers, then an occupancy head), its configuration, and training.
//!
//! Each encoder layer runs, in order: temporal point sampling and mixing
//! into the BEV queries, bidirectional instance/BEV attention, instance
//! self-attention, and anchor height refinement. The refined heights steer
//! the next layer's sampling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{sine_pos_encoding, IbBiXAttn, InstanceEncoderLayer};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;
use crate::numerics::{Checkpoint, Init, LayerNorm, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::occ_head::{
    height_aware_param_count, matched_channel_to_height_hidden, total_loss, ChannelToHeightHead, GridGeometry,
    HeadLayout, HeightAwareHead, OccupancyGrid,
};
use crate::rayiou::{generate_query_rays, rayiou_report, QueryRay, RayIouReport, RayPattern};
use crate::scene_gen::{SceneConfig, SceneSequence};
use crate::temporal::{BevAnchors, FrameViews, HeightRefiner, PointMixer, PointSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    HeightAware,
    ChannelToHeight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub instances: usize,
    /// BEV query grid (x, y).
    pub bev: [usize; 2],
    pub layers: usize,
    /// Frames sampled per pillar, newest first; at most the scene's frame count.
    pub frames: usize,
    pub points_per_frame: usize,
    pub head: HeadKind,
    pub use_instance_conditioning: bool,
    /// 1 = full height only, 2 = full and half height.
    pub supervision_scales: usize,
    pub res_blocks: usize,
    pub bottleneck: usize,
    pub height_hidden: usize,
    pub attention_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 128,
            heads: 8,
            instances: 200,
            bev: [32, 32],
            layers: 4,
            frames: 8,
            points_per_frame: 4,
            head: HeadKind::HeightAware,
            use_instance_conditioning: false,
            supervision_scales: 2,
            res_blocks: 1,
            bottleneck: 32,
            height_hidden: 16,
            attention_residual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` at the end of the cosine schedule.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-3,
            min_lr_ratio: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            log_every: 50,
            eval_every: 0,
            checkpoint_every: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ray_channels: usize,
    pub ray_azimuths: usize,
    pub elevation_deg: [f64; 2],
    pub sensor_height: f64,
    /// Past poses added to the evaluated frame as extra ray origins.
    pub past_poses: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = RayPattern::default();
        EvalConfig {
            ray_channels: p.channels,
            ray_azimuths: p.azimuths,
            elevation_deg: [p.elevation_range.0, p.elevation_range.1],
            sensor_height: p.sensor_height,
            past_poses: 7,
        }
    }
}

impl EvalConfig {
    pub fn pattern(&self) -> RayPattern {
        RayPattern {
            channels: self.ray_channels,
            azimuths: self.ray_azimuths,
            elevation_range: (self.elevation_deg[0], self.elevation_deg[1]),
            sensor_height: self.sensor_height,
        }
    }
}

/// Everything a run needs, read from one TOML file with `[scene]`,
/// `[model]`, `[train]` and `[eval]` sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// All problems across sections, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.scene.problems();
        let m = &self.model;
        let s = &self.scene;
        if m.channels == 0 || m.channels % 4 != 0 {
            out.push(format!("model.channels {} must be a positive multiple of 4", m.channels));
        }
        if m.heads == 0 || m.channels % m.heads.max(1) != 0 {
            out.push(format!("model.heads {} must divide model.channels {}", m.heads, m.channels));
        }
        if m.instances == 0 {
            out.push("model.instances must be at least 1".into());
        }
        if m.layers == 0 {
            out.push("model.layers must be at least 1".into());
        }
        if m.frames == 0 || m.frames > s.frames {
            out.push(format!("model.frames {} must be in [1, scene.frames = {}]", m.frames, s.frames));
        }
        if m.points_per_frame == 0 {
            out.push("model.points_per_frame must be at least 1".into());
        }
        if m.bev.contains(&0) || s.grid[0] % m.bev[0].max(1) != 0 || s.grid[1] % m.bev[1].max(1) != 0 {
            out.push(format!("model.bev {:?} must divide scene.grid {:?} in x and y", m.bev, s.grid));
        } else if s.grid[0] / m.bev[0] != s.grid[1] / m.bev[1] {
            out.push(format!("model.bev {:?} must upsample x and y of scene.grid {:?} by the same factor", m.bev, s.grid));
        }
        if !(1..=2).contains(&m.supervision_scales) {
            out.push(format!("model.supervision_scales {} must be 1 or 2", m.supervision_scales));
        } else if m.supervision_scales == 2 && s.grid[2] % 2 != 0 {
            out.push(format!("model.supervision_scales = 2 needs an even z extent, scene.grid has {}", s.grid[2]));
        }
        if m.bottleneck == 0 || m.height_hidden == 0 {
            out.push("model.bottleneck and model.height_hidden must be positive".into());
        }
        if m.use_instance_conditioning && m.head != HeadKind::HeightAware {
            out.push("model.use_instance_conditioning needs head = \"height_aware\"".into());
        }
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            out.push(format!("train.lr {} must be finite and non-negative", t.lr));
        }
        if !(0.0..=1.0).contains(&t.min_lr_ratio) {
            out.push(format!("train.min_lr_ratio {} outside [0, 1]", t.min_lr_ratio));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            out.push(format!("train betas ({}, {}) must lie in [0, 1)", t.beta1, t.beta2));
        }
        if !(t.adam_eps > 0.0) || t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            out.push("train.adam_eps must be positive; weight_decay and grad_clip non-negative".into());
        }
        if let Err(e) = self.eval.pattern().validate() {
            out.push(format!("eval: {e}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Attaches the encoder layer index to an error.
fn in_layer(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Dimension { op, detail } => Error::Dimension { op, detail: format!("layer {layer}: {detail}") },
        Error::Config(s) => Error::Config(format!("layer {layer}: {s}")),
        Error::NonFinite { op } => Error::NonFinite { op: format!("{op} (layer {layer})") },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub sampler: PointSampler,
    pub mixer: PointMixer,
    pub bixattn: IbBiXAttn,
    pub instance: InstanceEncoderLayer,
    pub refiner: HeightRefiner,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    HeightAware(HeightAwareHead),
    ChannelToHeight(ChannelToHeightHead),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceBev {
    pub config: ModelConfig,
    pub geometry: GridGeometry,
    pub classes: usize,
    pub feature_channels: usize,
    pub bev_queries: ParamId,
    pub instance_queries: ParamId,
    pub instance_pos: ParamId,
    pub bev_pos: Tensor<f64>,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub head: Head,
    /// Anchor state every forward starts from.
    pub anchors: BevAnchors,
}

/// Per-layer attention weights, one tensor per head.
#[derive(Clone, Debug)]
pub struct LayerAttention {
    pub inst_to_bev: Vec<Var>,
    pub bev_to_inst: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[nx, ny, nz / s, C]` per supervision scale, finest first.
    pub logits: Vec<Var>,
    pub attention: Vec<LayerAttention>,
    /// `[pillars, 1]` refined heights after each layer.
    pub heights: Vec<Var>,
    /// Anchors after the last refinement.
    pub anchors: BevAnchors,
    pub bev: Var,
    pub instances: Var,
}

impl InstanceBev {
    /// Builds the model for scenes shaped like `scene` and registers its
    /// parameters (64-bit) in a fresh store.
    pub fn new<R: Rng + ?Sized>(
        config: &ModelConfig,
        scene: &SceneConfig,
        rng: &mut R,
    ) -> Result<(InstanceBev, ParamStore<f64>)> {
        let full = Config { scene: scene.clone(), model: config.clone(), ..Config::default() };
        let problems = full.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let geometry = scene.geometry()?;
        let (c, m) = (config.channels, config);
        let pillars = m.bev[0] * m.bev[1];
        let layout = HeadLayout::for_grid((m.bev[0], m.bev[1]), scene.grid, scene.classes, c)?;
        let mut store = ParamStore::new();
        let bev_queries = store.add("bev_queries", &[pillars, c], Init::query(), rng)?;
        let instance_queries = store.add("instance_queries", &[m.instances, c], Init::query(), rng)?;
        let instance_pos = store.add("instance_pos", &[m.instances, c], Init::query(), rng)?;
        let points = m.frames * m.points_per_frame;
        let mut layers = Vec::with_capacity(m.layers);
        let z_range = geometry.dims[2] as f64 * geometry.voxel_size[2];
        for l in 0..m.layers {
            let name = format!("layer{l}");
            layers.push(EncoderLayer {
                sampler: PointSampler::new(&mut store, &format!("{name}.sampler"), c, m.frames, m.points_per_frame, rng)?,
                mixer: PointMixer::new(&mut store, &format!("{name}.mixer"), points, scene.feature_channels, c, rng)?,
                bixattn: IbBiXAttn::new(&mut store, &format!("{name}.bixattn"), c, m.heads, m.attention_residual, rng)?,
                instance: InstanceEncoderLayer::new(&mut store, &format!("{name}.instance"), c, m.heads, rng)?,
                refiner: HeightRefiner::new(&mut store, &format!("{name}.refine"), c, z_range, rng)?,
            });
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", c, rng)?;
        let head = match m.head {
            HeadKind::HeightAware => Head::HeightAware(HeightAwareHead::new(
                &mut store,
                "head",
                layout,
                m.res_blocks,
                m.bottleneck,
                m.height_hidden,
                m.use_instance_conditioning,
                rng,
            )?),
            HeadKind::ChannelToHeight => {
                let budget = height_aware_param_count(&layout, m.res_blocks, m.bottleneck, m.height_hidden);
                let hidden = matched_channel_to_height_hidden(&layout, m.res_blocks, m.bottleneck, budget);
                Head::ChannelToHeight(ChannelToHeightHead::new(
                    &mut store,
                    "head",
                    layout,
                    m.res_blocks,
                    m.bottleneck,
                    Some(hidden),
                    rng,
                )?)
            }
        };
        let cell = (
            geometry.voxel_size[0] * (geometry.dims[0] / m.bev[0]) as f64,
            geometry.voxel_size[1] * (geometry.dims[1] / m.bev[1]) as f64,
        );
        let anchors = BevAnchors::grid(m.bev[0], m.bev[1], cell, geometry.origin, z_range)?;
        let model = InstanceBev {
            config: config.clone(),
            geometry,
            classes: scene.classes,
            feature_channels: scene.feature_channels,
            bev_queries,
            instance_queries,
            instance_pos,
            bev_pos: sine_pos_encoding((m.bev[0], m.bev[1]), c)?,
            layers,
            final_norm,
            head,
            anchors,
        };
        Ok((model, store))
    }

    pub fn head_param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.numel_with_prefix("head.")
    }

    /// Puts the newest `config.frames` frames of `scene` on the tape, newest first.
    pub fn frame_inputs<T: Scalar>(&self, tape: &mut Tape<T>, scene: &SceneSequence) -> Result<Vec<FrameViews>> {
        if scene.gt.geometry != self.geometry || scene.config.feature_channels != self.feature_channels {
            return Err(Error::Config(format!(
                "scene grid {:?} with {} feature channels does not match the model ({:?}, {})",
                scene.gt.geometry.dims, scene.config.feature_channels, self.geometry.dims, self.feature_channels
            )));
        }
        if scene.frames.len() < self.config.frames {
            return Err(Error::Config(format!(
                "model samples {} frames but the scene has {}",
                self.config.frames,
                scene.frames.len()
            )));
        }
        Ok(scene
            .frames
            .iter()
            .rev()
            .take(self.config.frames)
            .map(|f| FrameViews { pose: f.pose, maps: f.views.iter().map(|v| tape.constant(v.cast())).collect() })
            .collect())
    }

    /// Runs the encoder stack and the head. Parameters must already be bound
    /// to `tape` in store order.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, scene: &SceneSequence) -> Result<ForwardOutput> {
        let frames = self.frame_inputs(tape, scene)?;
        self.forward_frames(tape, &frames, &scene.cameras)
    }

    pub fn forward_frames<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        frames: &[FrameViews],
        cameras: &[crate::geometry::CameraModel],
    ) -> Result<ForwardOutput> {
        let m = &self.config;
        let mut anchors = self.anchors.clone();
        let mut bev = tape.param(self.bev_queries);
        let mut inst = tape.param(self.instance_queries);
        let inst_pos = tape.param(self.instance_pos);
        let bev_pos = tape.constant(self.bev_pos.cast());
        let h0: Vec<T> = anchors.h.iter().map(|&h| T::of(h)).collect();
        let mut heights = tape.constant(Tensor::new(&[anchors.len(), 1], h0)?);
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut all_heights = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let step = |tape: &mut Tape<T>, anchors: &mut BevAnchors| -> Result<_> {
                let points = layer.sampler.generate(tape, bev, anchors, heights)?;
                let (sampled, _mask) = tape.gather_temporal(points, frames, cameras, m.points_per_frame)?;
                let update = layer.mixer.forward(tape, sampled)?;
                let bev = tape.add(bev, update)?;
                let out = layer.bixattn.forward(tape, inst, inst_pos, bev, bev_pos)?;
                let inst = layer.instance.forward(tape, out.inst)?;
                let heights = layer.refiner.forward(tape, out.bev)?;
                layer.refiner.apply(tape, heights, anchors);
                let att = LayerAttention { inst_to_bev: out.weights.inst_to_bev, bev_to_inst: out.weights.bev_to_inst };
                Ok((out.bev, inst, heights, att))
            };
            let (b, i, h, att) = step(tape, &mut anchors).map_err(in_layer(l))?;
            bev = b;
            inst = i;
            heights = h;
            attention.push(att);
            all_heights.push(h);
        }
        let p = self.final_norm.forward(tape, bev)?;
        let full = match &self.head {
            Head::HeightAware(h) => h.forward(tape, p, Some(inst))?.logits,
            Head::ChannelToHeight(h) => h.forward(tape, p)?.logits,
        };
        let mut logits = vec![full];
        if m.supervision_scales == 2 {
            logits.push(tape.pool_logits_z(full, 2)?);
        }
        Ok(ForwardOutput { logits, attention, heights: all_heights, anchors, bev, instances: inst })
    }

    /// Ground truth at every supervision scale.
    pub fn targets(&self, gt: &OccupancyGrid) -> Result<Vec<OccupancyGrid>> {
        let mut out = vec![gt.clone()];
        if self.config.supervision_scales == 2 {
            out.push(gt.downsample_z(2)?);
        }
        Ok(out)
    }
}

/// Loss value and its parts for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub scene: usize,
    pub lr: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub lovasz: f64,
}

/// Parameters, optimizer moments and sampling state of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore<f32>,
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(store: &ParamStore<f64>, seed: u64) -> Self {
        let store: ParamStore<f32> = store.cast();
        let zeros: Vec<Tensor<f32>> = store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        TrainState {
            store,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11),
            history: Vec::new(),
        }
    }

    /// Saves a checkpoint directory: tensors, optimizer state, RNG position,
    /// the run config and the loss history.
    pub fn save(&self, dir: &Path, config: &Config) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.push_params(&self.store);
        for (p, (m, v)) in self.store.iter().zip(self.first_moment.iter().zip(&self.second_moment)) {
            ck.push(format!("adam.m.{}", p.name), m.clone());
            ck.push(format!("adam.v.{}", p.name), v.clone());
        }
        ck.meta.insert("step".into(), self.step.to_string());
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        ck.meta.insert("rng_seed".into(), seed);
        ck.meta.insert("rng_word_pos".into(), self.rng.get_word_pos().to_string());
        ck.meta.insert("seed".into(), config.train.seed.to_string());
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())?;
        write_atomic(&dir.join("history.csv"), loss_csv(&self.history).as_bytes())?;
        ck.save(dir)
    }

    /// Loads a checkpoint written by [`TrainState::save`] into a model
    /// built from the stored config.
    pub fn load(dir: &Path) -> Result<(Config, InstanceBev, TrainState)> {
        let config = Config::load(&dir.join("config.toml"))?;
        let (model, init) = build_model(&config)?;
        let ck: Checkpoint<f32> = Checkpoint::load(dir)?;
        let mut state = TrainState::new(&init, config.train.seed);
        ck.restore_params(&mut state.store)?;
        for (i, p) in state.store.iter().enumerate() {
            let get = |k: &str| {
                ck.get(&format!("adam.{k}.{}", p.name))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state for {}", p.name)))
            };
            state.first_moment[i] = get("m")?;
            state.second_moment[i] = get("v")?;
        }
        let meta = |k: &str| ck.meta.get(k).ok_or_else(|| Error::Config(format!("checkpoint lacks meta {k}")));
        let bad = |k: &str| Error::Config(format!("checkpoint meta {k} is malformed"));
        state.step = meta("step")?.parse().map_err(|_| bad("step"))?;
        let hex = meta("rng_seed")?;
        if hex.len() != 64 {
            return Err(bad("rng_seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng_seed"))?;
        }
        state.rng = ChaCha8Rng::from_seed(seed);
        state.rng.set_word_pos(meta("rng_word_pos")?.parse().map_err(|_| bad("rng_word_pos"))?);
        let hist_path = dir.join("history.csv");
        let text = fs::read_to_string(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
        state.history = parse_loss_csv(&text)?;
        Ok((config, model, state))
    }
}

/// Builds the model and its initial 64-bit parameters from `config.train.seed`.
pub fn build_model(config: &Config) -> Result<(InstanceBev, ParamStore<f64>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    InstanceBev::new(&config.model, &config.scene, &mut rng)
}

/// Cosine decay from `lr` to `lr * min_lr_ratio` over `steps`.
pub fn learning_rate(train: &TrainConfig, step: u64) -> f64 {
    let total = train.steps.max(1) as f64;
    let t = (step as f64 / total).min(1.0);
    let floor = train.lr * train.min_lr_ratio;
    floor + (train.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Loss of `model` on `scene` at 32-bit, with parameters from `store`.
pub fn scene_loss(
    model: &InstanceBev,
    store: &ParamStore<f32>,
    scene: &SceneSequence,
) -> Result<(Tape<f32>, ForwardOutput, Var, f64, f64)> {
    let mut tape = Tape::new();
    tape.bind_params(store);
    let out = model.forward(&mut tape, scene)?;
    let targets = model.targets(&scene.gt)?;
    let parts = total_loss(&mut tape, &out.logits, &targets)?;
    let ce: f64 = parts.scales.iter().map(|s| tape.value(s.cross_entropy).data()[0] as f64).sum();
    let lov: f64 = parts.scales.iter().map(|s| tape.value(s.lovasz).data()[0] as f64).sum();
    Ok((tape, out, parts.total, ce, lov))
}

/// One optimizer step on a scene drawn from `scenes` with the state's RNG.
pub fn train_step(model: &InstanceBev, state: &mut TrainState, scenes: &[SceneSequence], train: &TrainConfig) -> Result<StepRecord> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let scene = state.rng.random_range(0..scenes.len());
    let (tape, _, loss, ce, lov) = scene_loss(model, &state.store, &scenes[scene])?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: format!("loss at step {}", state.step) });
    }
    let grads = tape.backward(loss)?;
    let ids: Vec<ParamId> = state.store.ids().collect();
    let mut g: Vec<Vec<f32>> =
        ids.iter().map(|&id| grads.param(id).map_or_else(|| vec![0.0; state.store.get(id).tensor.numel()], |g| g.to_vec())).collect();
    drop(tape);
    if train.grad_clip > 0.0 {
        let norm = g.iter().flatten().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > train.grad_clip {
            let s = (train.grad_clip / norm) as f32;
            g.iter_mut().flatten().for_each(|v| *v *= s);
        }
    }
    let lr = learning_rate(train, state.step);
    let t = state.step as i32 + 1;
    let (b1, b2) = (train.beta1, train.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (i, id) in ids.iter().enumerate() {
        let p = state.store.get_mut(*id);
        let decay = if p.name.ends_with(".weight") { train.weight_decay } else { 0.0 };
        let (m, v) = (state.first_moment[i].data_mut(), state.second_moment[i].data_mut());
        for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gk = g[i][k] as f64;
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = (mk / c1) / ((vk / c2).sqrt() + train.adam_eps) + decay * *w as f64;
            *w = (*w as f64 - lr * update) as f32;
        }
    }
    let record = StepRecord { step: state.step, scene, lr, loss: value, cross_entropy: ce, lovasz: lov };
    state.history.push(record);
    state.step += 1;
    Ok(record)
}

pub fn loss_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,scene,lr,loss,cross_entropy,lovasz\n");
    for r in history {
        let _ = writeln!(out, "{},{},{:e},{:e},{:e},{:e}", r.step, r.scene, r.lr, r.loss, r.cross_entropy, r.lovasz);
    }
    out
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<StepRecord>> {
    let bad = |i: usize| Error::Data(format!("malformed loss history line {}", i + 1));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i));
        out.push(StepRecord {
            step: f[0].parse().map_err(|_| bad(i))?,
            scene: f[1].parse().map_err(|_| bad(i))?,
            lr: num(2)?,
            loss: num(3)?,
            cross_entropy: num(4)?,
            lovasz: num(5)?,
        });
    }
    Ok(out)
}

/// Mean loss over a trailing window, per step.
pub fn smoothed_loss(history: &[StepRecord], window: usize) -> Vec<f64> {
    (0..history.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let w = &history[lo..=i];
            w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// Per-voxel argmax of the finest-scale logits.
pub fn infer(model: &InstanceBev, store: &ParamStore<f32>, scene: &SceneSequence) -> Result<(OccupancyGrid, BevAnchors)> {
    let mut tape = Tape::new();
    tape.bind_params(store);
    let out = model.forward(&mut tape, scene)?;
    let grid = OccupancyGrid::from_logits(model.geometry, tape.value(out.logits[0]))?;
    Ok((grid, out.anchors))
}

/// Query rays for `scene`: the evaluated frame plus `eval.past_poses` earlier poses.
pub fn scene_rays(scene: &SceneSequence, eval: &EvalConfig) -> Result<Vec<QueryRay>> {
    let poses: Vec<_> = scene.poses_newest_first().into_iter().take(eval.past_poses + 1).collect();
    generate_query_rays(&poses, &eval.pattern())
}

#[derive(Clone, Debug)]
pub struct SceneEval {
    pub accuracy: f64,
    pub report: RayIouReport,
    pub prediction: OccupancyGrid,
}

pub fn evaluate_scene(model: &InstanceBev, store: &ParamStore<f32>, scene: &SceneSequence, eval: &EvalConfig) -> Result<SceneEval> {
    let (prediction, _) = infer(model, store, scene)?;
    let rays = scene_rays(scene, eval)?;
    Ok(SceneEval {
        accuracy: prediction.accuracy(&scene.gt)?,
        report: rayiou_report(&prediction, &scene.gt, &rays)?,
        prediction,
    })
}

/// Head-averaged attention maps of every layer, `[n_i, n_b]` both ways,
/// packed for [`Checkpoint::save`].
pub fn attention_dump<T: Scalar>(tape: &Tape<T>, out: &ForwardOutput) -> Checkpoint<f32> {
    let mut ck = Checkpoint::new();
    let mean = |vars: &[Var]| -> Tensor<f32> {
        let first = tape.value(vars[0]);
        let mut acc = vec![0.0f64; first.numel()];
        for &v in vars {
            for (a, x) in acc.iter_mut().zip(tape.value(v).data()) {
                *a += x.f64();
            }
        }
        let data = acc.iter().map(|a| (a / vars.len() as f64) as f32).collect();
        Tensor::new(first.shape(), data).expect("same shape")
    };
    for (l, att) in out.attention.iter().enumerate() {
        ck.push(format!("layer{l}.inst_to_bev"), mean(&att.inst_to_bev));
        ck.push(format!("layer{l}.bev_to_inst"), mean(&att.bev_to_inst));
    }
    ck.meta.insert("layers".into(), out.attention.len().to_string());
    ck.meta.insert("heads_averaged".into(), out.attention.first().map_or(0, |a| a.inst_to_bev.len()).to_string());
    ck.meta.insert("layout".into(), "inst_to_bev rows sum to 1 over pillars; bev_to_inst columns sum to 1 over instances".into());
    ck
}

pub mod grad_suite;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ibev_core::attention::{attention_cost, IbBiXAttn};
use ibev_core::model_pipeline::grad_suite::run_grad_suite;
use ibev_core::model_pipeline::{
    build_model, evaluate_scene, infer, loss_csv, scene_rays, train_step, Config, EvalConfig, InstanceBev, TrainState,
};
use ibev_core::numerics::checkpoint::write_atomic;
use ibev_core::numerics::{ParamStore, Tape, Tensor};
use ibev_core::occ_head::OccupancyGrid;
use ibev_core::rayiou::{rayiou_report, RayIouReport};
use ibev_core::scene_gen::{class_names, generate_scene, load_scene_expect, save_grid, save_scene, SceneSequence};
use ibev_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{pgm, Cli, Command, Failure, Global};

pub const SCENE_EXT: &str = "ibsc";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const MANIFEST: &str = "manifest.json";

pub fn run(cli: Cli) -> Result<(), Failure> {
    let g = cli.global;
    match cli.command {
        Command::Synth { config, seed, count, out } => synth(&g, config.as_deref(), seed, count, &out),
        Command::Train { config, data, out, resume, eval_scene, stop_after } => {
            train(&g, config.as_deref(), &data, &out, resume, eval_scene.as_deref(), stop_after)
        }
        Command::Eval { checkpoint, data, out, oracle, config } => {
            eval(&g, checkpoint.as_deref(), &data, &out, oracle, config.as_deref())
        }
        Command::Infer { checkpoint, scene, out } => infer_cmd(&g, &checkpoint, &scene, &out),
        Command::Gradcheck { config, out, corrupt_op } => gradcheck(&g, config.as_deref(), out.as_deref(), corrupt_op.as_deref()),
        Command::Bench { ni_list, nb_list, channels, heads, no_timing, out } => {
            bench(&g, &ni_list, &nb_list, channels, heads, !no_timing, &out)
        }
    }
}

fn load_config(path: Option<&Path>, manifest: &mut RunManifest) -> Result<Config, Failure> {
    match path {
        Some(p) => {
            manifest.input(p)?;
            Ok(Config::load(p)?)
        }
        None => Ok(Config::default()),
    }
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::io(path, e))
}

fn write(path: &Path, bytes: &[u8], manifest: &mut RunManifest) -> Result<(), Failure> {
    write_atomic(path, bytes)?;
    manifest.output(path)
}

/// Scene files in `data` (a directory of `.ibsc` files, sorted, or one file).
fn scene_paths(data: &Path) -> Result<Vec<PathBuf>, Failure> {
    if data.is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let entries = fs::read_dir(data).map_err(|e| Failure::io(data, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Failure::io(data, e))?.path();
        if p.extension().is_some_and(|x| x == SCENE_EXT) {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Failure::config(format!("no .{SCENE_EXT} scenes in {}", data.display())));
    }
    Ok(out)
}

fn load_scenes(data: &Path, dims: [usize; 3], manifest: &mut RunManifest) -> Result<Vec<(String, SceneSequence)>, Failure> {
    scene_paths(data)?
        .into_iter()
        .map(|p| {
            manifest.input(&p)?;
            let name = p.file_stem().map_or_else(|| "scene".to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, load_scene_expect(&p, dims)?))
        })
        .collect()
}

fn synth(g: &Global, config: Option<&Path>, seed: u64, count: usize, out: &Path) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("synth", g.effective_threads(), g.deterministic);
    let cfg = load_config(config, &mut manifest)?;
    cfg.scene.validate()?;
    manifest.config = Some(cfg.to_toml());
    manifest.seed = Some(seed);
    create_dir(out)?;
    for i in 0..count {
        let scene = generate_scene(seed.wrapping_add(i as u64), &cfg.scene)?;
        let path = out.join(format!("scene_{i:03}.{SCENE_EXT}"));
        save_scene(&scene, &path)?;
        manifest.output(&path)?;
        println!("{} seed={} occupied={:.3}", path.display(), scene.seed, scene.gt.occupied_fraction());
    }
    manifest.finish(&out.join(MANIFEST))
}

#[derive(Serialize)]
struct EvalRow {
    step: u64,
    accuracy: f64,
    rayiou: Option<f64>,
}

fn train(
    g: &Global,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    resume: bool,
    eval_scene: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("train", g.effective_threads(), g.deterministic);
    let ckpt = out.join(CHECKPOINT_DIR);
    let (cfg, model, mut state) = if resume {
        let (cfg, model, state) = TrainState::load(&ckpt)?;
        if let Some(p) = config {
            manifest.input(p)?;
            if Config::load(p)? != cfg {
                return Err(Failure::config(format!("{} differs from the checkpoint's configuration", p.display())));
            }
        }
        eprintln!("resuming at step {}", state.step);
        (cfg, model, state)
    } else {
        let cfg = load_config(config, &mut manifest)?;
        let (model, init) = build_model(&cfg)?;
        let state = TrainState::new(&init, cfg.train.seed);
        (cfg, model, state)
    };
    manifest.config = Some(cfg.to_toml());
    manifest.seed = Some(cfg.train.seed);
    let scenes: Vec<SceneSequence> = load_scenes(data, cfg.scene.grid, &mut manifest)?.into_iter().map(|s| s.1).collect();
    let held_out = if cfg.train.eval_every == 0 {
        None
    } else if let Some(p) = eval_scene {
        manifest.input(p)?;
        Some(load_scene_expect(p, cfg.scene.grid)?)
    } else {
        Some(generate_scene(u64::MAX - cfg.train.seed, &cfg.scene)?)
    };
    create_dir(out)?;
    let mut evals = Vec::new();
    let t = &cfg.train;
    let last = stop_after.map_or(t.steps, |s| s.min(t.steps));
    while state.step < last {
        let record = match train_step(&model, &mut state, &scenes, t) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                // Parameters are untouched by the failing step.
                state.save(&ckpt, &cfg)?;
                write(&out.join("loss.csv"), loss_csv(&state.history).as_bytes(), &mut manifest)?;
                manifest.output(&ckpt)?;
                manifest.finish(&out.join(MANIFEST))?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let done = state.step;
        if t.log_every > 0 && done % t.log_every == 0 {
            eprintln!("step {done:>5}  loss {:.5}  lr {:.2e}", record.loss, record.lr);
        }
        if let Some(scene) = &held_out {
            if done % t.eval_every == 0 || done == t.steps {
                let e = evaluate_scene(&model, &state.store, scene, &cfg.eval)?;
                eprintln!("step {done:>5}  held-out accuracy {:.4}  RayIoU {}", e.accuracy, fmt_opt(e.report.rayiou));
                evals.push(EvalRow { step: done, accuracy: e.accuracy, rayiou: e.report.rayiou });
            }
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 {
            state.save(&ckpt, &cfg)?;
        }
    }
    state.save(&ckpt, &cfg)?;
    manifest.output(&ckpt)?;
    write(&out.join("loss.csv"), loss_csv(&state.history).as_bytes(), &mut manifest)?;
    if !evals.is_empty() {
        let mut csv = String::from("step,accuracy,rayiou\n");
        for r in &evals {
            let _ = writeln!(csv, "{},{},{}", r.step, r.accuracy, r.rayiou.map_or(String::new(), |v| v.to_string()));
        }
        write(&out.join("eval.csv"), csv.as_bytes(), &mut manifest)?;
    }
    manifest.finish(&out.join(MANIFEST))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

#[derive(Serialize)]
struct SceneMetrics {
    scene: String,
    accuracy: f64,
    rayiou: Option<f64>,
}

#[derive(Serialize)]
struct EvalMetrics {
    oracle: bool,
    rays_per_scene: usize,
    ray_pattern: String,
    scenes: Vec<SceneMetrics>,
    mean_accuracy: f64,
    pooled_rayiou: Option<f64>,
}

fn eval(
    g: &Global,
    checkpoint: Option<&Path>,
    data: &Path,
    out: &Path,
    oracle: bool,
    config: Option<&Path>,
) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("eval", g.effective_threads(), g.deterministic);
    let (cfg, trained): (Config, Option<(InstanceBev, ParamStore<f32>)>) = match checkpoint {
        Some(dir) => {
            manifest.input(dir)?;
            let (cfg, model, state) = TrainState::load(dir)?;
            (cfg, Some((model, state.store)))
        }
        None => (load_config(config, &mut manifest)?, None),
    };
    let eval_cfg: &EvalConfig = &cfg.eval;
    manifest.config = Some(cfg.to_toml());
    let scenes = load_scenes(data, cfg.scene.grid, &mut manifest)?;
    create_dir(out)?;
    let names = class_names(cfg.scene.classes);
    let mut reports = Vec::new();
    let mut metrics = Vec::new();
    let mut rays_per_scene = 0;
    for (name, scene) in &scenes {
        let pred: OccupancyGrid = match (&trained, oracle) {
            (_, true) => scene.gt.clone(),
            (Some((model, store)), false) => infer(model, store, scene)?.0,
            (None, false) => unreachable!("clap requires a checkpoint without --oracle"),
        };
        let rays = scene_rays(scene, eval_cfg)?;
        rays_per_scene = rays.len();
        let report = rayiou_report(&pred, &scene.gt, &rays)?;
        let accuracy = pred.accuracy(&scene.gt)?;
        write(&out.join(format!("{name}.rayiou.csv")), report.to_csv(&names).as_bytes(), &mut manifest)?;
        save_grid(&pred, &out.join(format!("{name}.pred.occ")))?;
        manifest.output(&out.join(format!("{name}.pred.occ")))?;
        for z in 0..cfg.scene.grid[2] {
            let path = out.join(format!("{name}.z{z}.pgm"));
            write(&path, &pgm::slice_pair(&pred, &scene.gt, z), &mut manifest)?;
        }
        println!("{name}: accuracy {accuracy:.4}  RayIoU {}", fmt_opt(report.rayiou));
        metrics.push(SceneMetrics { scene: name.clone(), accuracy, rayiou: report.rayiou });
        reports.push(report);
    }
    let pooled = RayIouReport::pooled(&reports)?;
    println!("{}", pooled.to_table(&names));
    write(&out.join("rayiou.csv"), pooled.to_csv(&names).as_bytes(), &mut manifest)?;
    let summary = EvalMetrics {
        oracle,
        rays_per_scene,
        ray_pattern: format!("{:?}", eval_cfg.pattern()),
        mean_accuracy: metrics.iter().map(|m| m.accuracy).sum::<f64>() / metrics.len() as f64,
        scenes: metrics,
        pooled_rayiou: pooled.rayiou,
    };
    let text = serde_json::to_string_pretty(&summary).expect("metrics serialize");
    write(&out.join("metrics.json"), text.as_bytes(), &mut manifest)?;
    manifest.finish(&out.join(MANIFEST))
}

fn infer_cmd(g: &Global, checkpoint: &Path, scene: &Path, out: &Path) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("infer", g.effective_threads(), g.deterministic);
    manifest.input(checkpoint)?;
    manifest.input(scene)?;
    let (cfg, model, state) = TrainState::load(checkpoint)?;
    manifest.config = Some(cfg.to_toml());
    let scene = load_scene_expect(scene, cfg.scene.grid)?;
    let (grid, anchors) = infer(&model, &state.store, &scene)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_grid(&grid, out)?;
    manifest.output(out)?;
    let mean_h = anchors.h.iter().sum::<f64>() / anchors.h.len() as f64;
    println!(
        "{}: occupied {:.3}  accuracy vs reference {:.4}  mean anchor height {mean_h:.3} m",
        out.display(),
        grid.occupied_fraction(),
        grid.accuracy(&scene.gt)?
    );
    manifest.finish(&with_suffix(out, ".manifest.json"))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn gradcheck(g: &Global, config: Option<&Path>, out: Option<&Path>, corrupt: Option<&str>) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("gradcheck", g.effective_threads(), g.deterministic);
    if config.is_some() {
        let cfg = load_config(config, &mut manifest)?;
        manifest.config = Some(cfg.to_toml());
    }
    let report = run_grad_suite(corrupt)?;
    let mut text = String::new();
    let _ = writeln!(text, "{:<16} {:<32} {:>12}  result  ops", "module", "case", "max_rel_err");
    for c in &report.cases {
        let verdict = if c.passed(report.tolerance) { "PASS" } else { "FAIL" };
        let _ = writeln!(
            text,
            "{:<16} {:<32} {:>12.3e}  {verdict:<6}  {}",
            c.module,
            c.case,
            c.report.max_rel_error,
            c.ops.join(" ")
        );
    }
    let _ = writeln!(text, "\nworst per module (tolerance {:e}):", report.tolerance);
    for c in report.worst_per_module() {
        let _ = writeln!(
            text,
            "  {:<16} {:<32} {:.3e} at input {} coordinate {}",
            c.module, c.case, c.report.max_rel_error, c.report.worst.0, c.report.worst.1
        );
    }
    let _ = writeln!(text, "\nchecked operations: {}", report.ops_checked().join(", "));
    print!("{text}");
    if let Some(path) = out {
        write(path, text.as_bytes(), &mut manifest)?;
        manifest.finish(&with_suffix(path, ".manifest.json"))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::check(format!("gradient check failed: {}", report.failing_ops().join(", "))))
    }
}

fn bench(
    g: &Global,
    ni_list: &[usize],
    nb_list: &[usize],
    channels: usize,
    heads: usize,
    timing: bool,
    out: &Path,
) -> Result<(), Failure> {
    if ni_list.is_empty() || nb_list.is_empty() {
        return Err(Failure::config("--ni-list and --nb-list must be nonempty"));
    }
    let mut manifest = RunManifest::start("bench", g.effective_threads(), g.deterministic);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let block = IbBiXAttn::new(&mut store, "bench", channels, heads, true, &mut rng)?;
    let mut csv = String::from("n_i,n_b,bixattn_flops,dense_flops,measured_ns\n");
    for &ni in ni_list {
        for &nb in nb_list {
            let cost = attention_cost(ni, nb, channels, heads)?;
            let ns = if timing {
                let inst = Tensor::<f32>::normal(&[ni, channels], 1.0, &mut rng);
                let bev = Tensor::<f32>::normal(&[nb, channels], 1.0, &mut rng);
                let mut tape = Tape::<f32>::new();
                tape.bind_params(&store);
                let (i, b) = (tape.constant(inst.clone()), tape.constant(bev.clone()));
                let (ip, bp) = (tape.constant(inst), tape.constant(bev));
                let start = Instant::now();
                block.forward(&mut tape, i, ip, b, bp)?;
                start.elapsed().as_nanos().to_string()
            } else {
                String::new()
            };
            let _ = writeln!(csv, "{ni},{nb},{},{},{ns}", cost.bixattn_flops, cost.dense_bev_self_flops);
        }
    }
    print!("{csv}");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, csv.as_bytes(), &mut manifest)?;
    manifest.finish(&with_suffix(out, ".manifest.json"))
}

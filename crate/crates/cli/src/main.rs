use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use ndarray::Array2;
use serde_json::{json, Value};

use cam3d::attention::{asa_forward, compute_epsilons, AttentionParams};
use cam3d::geometry::{
    detections_from_json, lift_detection, project_point, CameraRig, EgoMotion, RefState,
};
use cam3d::pipeline::{
    check_gradients, evaluate, gen_scene, run_frame, DetectorWeights, FramePrediction, KernelId,
    RunConfig, StreamState, SyntheticScene,
};
use cam3d::queries::sin_pos_embed;
use cam3d::sampling::{
    bilinear_sample, deformable_forward, DeformableParams, FeaturePyramid, HybridSampler, Level,
};
use cam3d::temporal::{make_temporal_queries, MemoryQueue};
use cam3d::verify;

#[derive(Parser)]
#[command(
    name = "cam3d",
    version,
    about = "Sparse multi-view 3D detection query toolkit"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration with optional `pipeline` and `scene` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for scenes and weights; defaults to the configured pipeline seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; standard output when omitted (required by gen-scene).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Project world points into every camera of a rig.
    Project {
        /// Camera rig JSON; the configured synthetic rig when omitted.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Point as `x,y,z`; repeatable.
        #[arg(long = "point", required = true, allow_hyphen_values = true, value_parser = parse_triple)]
        points: Vec<[f64; 3]>,
    },
    /// Lift 2D detections to 3D reference states.
    Lift {
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Detections JSON (a list of detection records).
        #[arg(long)]
        detections: PathBuf,
    },
    /// Propagate a stored memory queue into the current frame.
    Propagate {
        /// Queue snapshot file.
        #[arg(long)]
        snapshot: PathBuf,
        /// Per-gap ego motion `yaw,tx,ty,tz`, oldest first; repeatable.
        #[arg(long = "ego", allow_hyphen_values = true, value_parser = parse_ego)]
        ego: Vec<[f64; 4]>,
        /// Current timestamp in seconds.
        #[arg(long)]
        now: f64,
    },
    /// Run adaptive self-attention over a list of states.
    Attend {
        /// Reference states JSON; embeddings are their positional encodings.
        #[arg(long)]
        states: PathBuf,
        /// Attention weight file; seeded weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also save the weights used to this path.
        #[arg(long)]
        save_weights: Option<PathBuf>,
    },
    /// Generate hybrid sampling points and aggregate pyramid features.
    Sample {
        /// Feature pyramid file.
        #[arg(long)]
        pyramid: PathBuf,
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Reference states JSON.
        #[arg(long)]
        states: PathBuf,
        /// Pyramid level code (0 = 1/4 ... 3 = 1/32) for per-point features.
        #[arg(long, default_value_t = 0)]
        level: u32,
    },
    /// Run the full detector over a synthetic scene.
    Pipeline {
        /// Scene directory written by gen-scene; generated from the config when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Write one metrics record per frame as JSON lines.
        #[arg(long)]
        emit_metrics: Option<PathBuf>,
        /// Center-distance match threshold in meters.
        #[arg(long, default_value_t = 1.0)]
        match_threshold: f64,
        /// Only predictions at or above this score are evaluated.
        #[arg(long, default_value_t = 0.0)]
        min_score: f64,
    },
    /// Run the oracle and invariant suite; exits nonzero on any failure.
    Verify,
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Kernel name or `all`.
        #[arg(long, default_value = "all")]
        kernel: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Finite-difference step; per-kernel default when omitted.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Generate a synthetic scene directory.
    GenScene,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    vals.try_into()
        .map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

fn parse_ego(s: &str) -> Result<[f64; 4], String> {
    parse_floats::<4>(s)
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: Option<PathBuf>,
}

impl Ctx {
    fn new(common: Common) -> Result<Self> {
        let cfg = match &common.config {
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let seed = common.seed.unwrap_or(cfg.pipeline.seed);
        Ok(Self {
            cfg,
            seed,
            out: common.out,
        })
    }

    fn rig(&self, path: Option<&Path>) -> Result<CameraRig> {
        match path {
            Some(p) => CameraRig::load(p).with_context(|| format!("loading rig {}", p.display())),
            None => Ok(self.cfg.scene.rig()?),
        }
    }

    fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => Box::new(BufWriter::new(std::io::stdout())),
        })
    }

    fn emit(&self, v: &Value) -> Result<()> {
        let mut w = self.writer()?;
        serde_json::to_writer_pretty(&mut w, v)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

fn read_states(path: &Path) -> Result<Vec<RefState>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn embeddings(states: &[RefState], d: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((states.len(), d));
    for (mut row, s) in x.rows_mut().into_iter().zip(states) {
        for (dst, v) in row.iter_mut().zip(sin_pos_embed(s, d)?) {
            *dst = f64::from(v);
        }
    }
    Ok(x)
}

fn project(ctx: &Ctx, rig: Option<&Path>, points: &[[f64; 3]]) -> Result<()> {
    let rig = ctx.rig(rig)?;
    let records: Vec<Value> = points
        .iter()
        .map(|p| {
            let pt = Vector3::new(p[0], p[1], p[2]);
            let cams: Vec<Value> = rig
                .iter()
                .map(|cam| {
                    let pr = project_point(cam, &pt);
                    json!({
                        "camera_id": cam.camera_id,
                        "u": pr.u,
                        "v": pr.v,
                        "depth": pr.depth,
                        "in_front": pr.in_front,
                        "in_image": pr.in_front && cam.contains_pixel(pr.u, pr.v),
                    })
                })
                .collect();
            json!({ "point": p, "projections": cams })
        })
        .collect();
    ctx.emit(&Value::Array(records))
}

fn lift(ctx: &Ctx, rig: Option<&Path>, detections: &Path) -> Result<()> {
    let rig = ctx.rig(rig)?;
    let text = std::fs::read_to_string(detections)
        .with_context(|| format!("reading {}", detections.display()))?;
    let states = detections_from_json(&text)?
        .iter()
        .map(|det| {
            let cam = rig
                .get(det.camera_id)
                .with_context(|| format!("detection refers to unknown camera {}", det.camera_id))?;
            Ok(lift_detection(cam, det)?)
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.emit(&serde_json::to_value(states)?)
}

fn propagate(ctx: &Ctx, snapshot: &Path, ego: &[[f64; 4]], now: f64) -> Result<()> {
    let mut f = std::io::BufReader::new(
        File::open(snapshot).with_context(|| format!("opening {}", snapshot.display()))?,
    );
    let queue = MemoryQueue::read_snapshot(&mut f)?;
    let chain: Vec<EgoMotion> = ego
        .iter()
        .map(|e| EgoMotion::from_yaw(e[0], Vector3::new(e[1], e[2], e[3])))
        .collect();
    let qs = make_temporal_queries(&queue, &chain, now)?;
    let states: Vec<RefState> = qs.iter().map(|q| q.state).collect();
    ctx.emit(&json!({
        "groups": queue.num_groups(),
        "entries": queue.total_entries(),
        "states": states,
    }))
}

fn attend(ctx: &Ctx, states: &Path, weights: Option<&Path>, save: Option<&Path>) -> Result<()> {
    let pc = &ctx.cfg.pipeline;
    let params = match weights {
        Some(p) => {
            let mut f = std::io::BufReader::new(
                File::open(p).with_context(|| format!("opening {}", p.display()))?,
            );
            AttentionParams::read_weights(&mut f, pc.modulation)?
        }
        None => AttentionParams::seeded(pc.d, pc.heads, pc.eps_net, pc.modulation, ctx.seed)?,
    }
    .with_combine(pc.logit_combine);
    if let Some(p) = save {
        let mut f =
            BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        params.write_weights(&mut f)?;
        f.flush()?;
    }
    let states = read_states(states)?;
    let x = embeddings(&states, params.d)?;
    let out = asa_forward(x.view(), &states, &params)?;
    let eps = compute_epsilons(x.view(), &params)?;
    let rows: Vec<Vec<f64>> = out.output.rows().into_iter().map(|r| r.to_vec()).collect();
    let eps: Vec<Vec<f64>> = eps.view().rows().into_iter().map(|r| r.to_vec()).collect();
    ctx.emit(&json!({
        "d": params.d,
        "heads": params.heads,
        "epsilons": eps,
        "output": rows,
    }))
}

fn sample(ctx: &Ctx, pyramid: &Path, rig: Option<&Path>, states: &Path, level: u32) -> Result<()> {
    let pc = &ctx.cfg.pipeline;
    let level =
        Level::from_code(level).with_context(|| format!("level code {level} out of range"))?;
    let pyr = FeaturePyramid::load(pyramid)
        .with_context(|| format!("loading pyramid {}", pyramid.display()))?;
    let rig = ctx.rig(rig)?;
    let states = read_states(states)?;
    let x = embeddings(&states, pc.d)?;
    let sampler = HybridSampler::seeded(pc.d, pc.fixed_layout, pc.learnable_points, ctx.seed);
    let sets = states
        .iter()
        .zip(x.rows())
        .map(|(s, e)| sampler.sample(s, e, &rig))
        .collect::<cam3d::Result<Vec<_>>>()?;
    let params = DeformableParams::seeded(
        pc.d,
        pc.heads,
        pyr.channels(),
        pc.sampling_points(),
        pc.levels,
        ctx.seed.wrapping_add(1),
    )?;
    let agg = deformable_forward(x.view(), &sets, &pyr, &rig, &params)?;

    let records = sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let mut features = Vec::new();
            for cp in &set.projections {
                let Some(fm) = pyr.get(cp.camera_id, level) else {
                    continue;
                };
                for (k, p) in cp.points.iter().enumerate().filter(|(_, p)| p.visible) {
                    features.push(json!({
                        "camera_id": cp.camera_id,
                        "point": k,
                        "u": p.u,
                        "v": p.v,
                        "features": bilinear_sample(fm, p.u, p.v),
                    }));
                }
            }
            let points: Vec<[f64; 3]> = set.points.iter().map(|p| [p.x, p.y, p.z]).collect();
            json!({
                "alpha": set.alpha,
                "points": points,
                "samples": features,
                "aggregated": agg.output.row(i).to_vec(),
            })
        })
        .collect();
    ctx.emit(&Value::Array(records))
}

fn pipeline(
    ctx: &Ctx,
    scene_dir: Option<&Path>,
    emit: Option<&Path>,
    threshold: f64,
    min_score: f64,
) -> Result<()> {
    let pc = &ctx.cfg.pipeline;
    let scene = match scene_dir {
        Some(dir) => {
            SyntheticScene::load(dir).with_context(|| format!("loading scene {}", dir.display()))?
        }
        None => gen_scene(ctx.seed, &ctx.cfg.scene)?,
    };
    let weights = DetectorWeights::seeded(pc, ctx.seed)?;
    let mut stream = StreamState::new(pc)?;
    let mut metrics_out = emit
        .map(|p| {
            File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .map(BufWriter::new)
        })
        .transpose()?;
    let mut preds_out = ctx.out.is_some().then(|| ctx.writer()).transpose()?;

    for frame in &scene.frames {
        let out = run_frame(frame, &scene.rig, &stream, pc, &weights)?;
        let kept = FramePrediction {
            frame_index: out.prediction.frame_index,
            predictions: out
                .prediction
                .predictions
                .iter()
                .filter(|p| p.score >= min_score)
                .cloned()
                .collect(),
        };
        let m = evaluate(&kept, &frame.truth_states(), threshold);
        eprintln!(
            "frame {}: {} global + {} adaptive + {} temporal queries, recall {:.3}, precision {:.3}",
            frame.index, out.counts.global, out.counts.adaptive, out.counts.temporal, m.recall, m.precision
        );
        if let Some(w) = metrics_out.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            writeln!(w)?;
        }
        if let Some(w) = preds_out.as_mut() {
            serde_json::to_writer(
                &mut *w,
                &json!({ "counts": out.counts, "prediction": out.prediction }),
            )?;
            writeln!(w)?;
        }
        stream = out.stream;
    }
    if let Some(w) = metrics_out.as_mut() {
        w.flush()?;
    }
    if let Some(w) = preds_out.as_mut() {
        w.flush()?;
    }
    Ok(())
}

fn run_verify(ctx: &Ctx) -> Result<bool> {
    let results = verify::run_all();
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed} of {} checks passed", results.len());
    if let Some(p) = &ctx.out {
        std::fs::write(p, serde_json::to_string_pretty(&results)?)?;
    }
    Ok(passed == results.len())
}

fn gradcheck(ctx: &Ctx, kernel: &str, trials: usize, step: Option<f64>) -> Result<bool> {
    let kernels = if kernel == "all" {
        KernelId::ALL.to_vec()
    } else {
        vec![kernel.parse::<KernelId>()?]
    };
    let mut reports = Vec::new();
    for k in kernels {
        let r = check_gradients(k, trials, step.unwrap_or(k.default_step()), ctx.seed)?;
        println!(
            "{} {}: {} probes, max relative error {:.3e} (tolerance {:.0e})",
            if r.passed { "PASS" } else { "FAIL" },
            k,
            r.probes,
            r.max_rel_error,
            r.tolerance
        );
        reports.push(r);
    }
    if let Some(p) = &ctx.out {
        std::fs::write(p, serde_json::to_string_pretty(&reports)?)?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn gen_scene_cmd(ctx: &Ctx) -> Result<()> {
    let Some(dir) = &ctx.out else {
        bail!("gen-scene needs --out <directory>")
    };
    let scene = gen_scene(ctx.seed, &ctx.cfg.scene)?;
    scene
        .save(dir)
        .with_context(|| format!("writing scene to {}", dir.display()))?;
    eprintln!(
        "wrote {} frames, {} cameras, {} boxes to {}",
        scene.frames.len(),
        scene.rig.len(),
        ctx.cfg.scene.num_boxes,
        dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let ctx = Ctx::new(cli.common)?;
    match cli.command {
        Command::Project { rig, points } => project(&ctx, rig.as_deref(), &points)?,
        Command::Lift { rig, detections } => lift(&ctx, rig.as_deref(), &detections)?,
        Command::Propagate { snapshot, ego, now } => propagate(&ctx, &snapshot, &ego, now)?,
        Command::Attend {
            states,
            weights,
            save_weights,
        } => attend(&ctx, &states, weights.as_deref(), save_weights.as_deref())?,
        Command::Sample {
            pyramid,
            rig,
            states,
            level,
        } => sample(&ctx, &pyramid, rig.as_deref(), &states, level)?,
        Command::Pipeline {
            scene,
            emit_metrics,
            match_threshold,
            min_score,
        } => pipeline(
            &ctx,
            scene.as_deref(),
            emit_metrics.as_deref(),
            match_threshold,
            min_score,
        )?,
        Command::Verify => return run_verify(&ctx),
        Command::Gradcheck {
            kernel,
            trials,
            step,
        } => return gradcheck(&ctx, &kernel, trials, step),
        Command::GenScene => gen_scene_cmd(&ctx)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

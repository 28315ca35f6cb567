//! Self-check suite: compares the library against small, deliberately naive
//! reference implementations and checks its structural invariants.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    asa_forward_with_eps, pairwise_distance, AttentionParams, EpsNetKind, EpsilonField, Modulation,
};
use crate::error::Result;
use crate::geometry::{
    lift_detection, project_point, CameraModel, CameraRig, Detection2D, EgoMotion, RefState,
};
use crate::linear::Linear;
use crate::pipeline::{
    check_gradients, evaluate, gen_scene, run_frame, small_scene_config, DetectorWeights,
    FramePrediction, KernelId, PipelineConfig, StreamState,
};
use crate::queries::{make_adaptive_queries, Query, QueryKind, QuerySet};
use crate::sampling::{
    bilinear_sample, deformable_forward, DeformableParams, FeatureMap, FeaturePyramid, FixedLayout,
    HybridSampler, Level, SamplingPointSet,
};
use crate::temporal::{make_temporal_queries, propagate_state, queue_push, MemoryQueue};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self {
                name,
                passed,
                detail,
            },
            Err(e) => Self {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("asa-degenerates-to-mhsa", asa_degeneration),
    ("geometry-round-trip", geometry_round_trip),
    ("temporal-contracts", temporal_contracts),
    ("distance-and-kernels", distance_and_kernels),
    ("gradient-checks", gradient_checks),
    ("deformable-single-term", deformable_single_term),
    ("hybrid-point-contracts", hybrid_contracts),
    ("pipeline-determinism", pipeline_determinism),
    ("scene-oracle", scene_oracle),
];

/// Names of the checks, in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check; never panics on a failing check.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| CheckResult::from_result(name, f()))
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn naive_affine(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.output_dim())
        .map(|o| {
            let b = l.bias.as_ref().map_or(0.0, |b| b[o]);
            x.iter()
                .enumerate()
                .fold(b, |acc, (i, v)| acc + l.weight[(o, i)] * v)
        })
        .collect()
}

/// Textbook multi-head self-attention with explicit loops.
fn naive_mhsa(x: &Array2<f64>, p: &AttentionParams) -> Array2<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| naive_affine(&p.wq, r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| naive_affine(&p.wk, r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| naive_affine(&p.wv, r)).collect();
    let dh = p.d / p.heads;
    let mut out = Array2::zeros((n, p.d));
    for i in 0..n {
        let mut concat = vec![0.0; p.d];
        for h in 0..p.heads {
            let lo = h * dh;
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh).map(|c| q[i][lo + c] * k[j][lo + c]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[lo + c] = (0..n).map(|j| e[j] / z * v[j][lo + c]).sum();
            }
        }
        for (o, val) in naive_affine(&p.wo, &concat).into_iter().enumerate() {
            out[(i, o)] = val;
        }
    }
    out
}

fn random_state(rng: &mut ChaCha8Rng) -> RefState {
    RefState {
        x: rng.gen_range(-40.0..40.0),
        y: rng.gen_range(-40.0..40.0),
        z: rng.gen_range(-2.0..2.0),
        w: rng.gen_range(0.5..3.0),
        l: rng.gen_range(0.5..5.0),
        h: rng.gen_range(0.5..3.0),
        theta: rng.gen_range(-3.1..3.1),
        vx: rng.gen_range(-5.0..5.0),
        vy: rng.gen_range(-5.0..5.0),
    }
}

fn asa_degeneration() -> Result<(bool, String)> {
    let (q, d, heads) = (32, 64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for trial in 0..20 {
        let x = random_matrix(&mut rng, q, d);
        let states: Vec<RefState> = (0..q).map(|_| random_state(&mut rng)).collect();
        let dist = pairwise_distance(&states);
        let expected = {
            let p = AttentionParams::seeded(d, heads, EpsNetKind::Double, Modulation::None, trial)?;
            naive_mhsa(&x, &p)
        };
        for (modulation, eps) in [(Modulation::None, 1.0), (Modulation::Gaussian, 1e9)] {
            let p = AttentionParams::seeded(d, heads, EpsNetKind::Double, modulation, trial)?;
            let got =
                asa_forward_with_eps(x.view(), &dist, &EpsilonField::constant(q, heads, eps)?, &p)?
                    .output;
            worst = worst.max((&got - &expected).iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    Ok((
        worst <= 1e-6,
        format!("max abs error {worst:.3e} over 20 instances"),
    ))
}

fn geometry_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0_f64;
    let mut contract = true;
    for _ in 0..1000 {
        let yaw = rng.gen_range(-3.1..3.1);
        let pos = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(0.5..2.5),
        );
        let (w, h) = (rng.gen_range(200..1600), rng.gen_range(200..900));
        let f = rng.gen_range(300.0..1500.0);
        let cam = CameraModel::looking_along(
            0,
            f,
            f * rng.gen_range(0.9..1.1),
            w as f64 / 2.0,
            h as f64 / 2.0,
            w,
            h,
            pos,
            yaw,
        )?;
        let det = Detection2D {
            camera_id: 0,
            u: rng.gen_range(0.0..w as f64),
            v: rng.gen_range(0.0..h as f64),
            w: rng.gen_range(5.0..200.0),
            h: rng.gen_range(5.0..200.0),
            z_sem: vec![],
            score: 1.0,
            depth: rng.gen_range(1.0..80.0),
            depth_distribution: None,
        };
        let s = lift_detection(&cam, &det)?;
        let back = project_point(&cam, &s.center());
        for (a, b) in [(back.u, det.u), (back.v, det.v), (back.depth, det.depth)] {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        contract &= s.l == s.w && s.theta == 0.0 && s.vx == 0.0 && s.vy == 0.0;
    }
    Ok((
        worst <= 1e-9 && contract,
        format!("max relative error {worst:.3e}; size/heading/velocity contract {contract}"),
    ))
}

fn temporal_contracts() -> Result<(bool, String)> {
    let (l, s, d) = (4, 64, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut q = MemoryQueue::new(l, s, d)?;
    let mut capacity_ok = true;
    for f in 0..6 {
        let mut frame = QuerySet::new(d);
        for _ in 0..80 {
            frame.push(Query {
                state: random_state(&mut rng),
                embedding: (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                kind: QueryKind::Global,
                score: rng.gen_range(0.0..1.0),
            })?;
        }
        q = queue_push(&q, &frame, f as f64 * 0.5)?;
        capacity_ok &= q.total_entries() <= l * s;
    }
    let chain = vec![EgoMotion::identity(); l];
    let count = make_temporal_queries(&q, &chain, 3.0)?.len();

    let mut compose_err = 0.0_f64;
    let mut bit_stable = true;
    for _ in 0..100 {
        let st = random_state(&mut rng);
        let t1 = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0);
        let t2 = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0);
        let twice = propagate_state(
            &propagate_state(&st, &EgoMotion::translation_only(t1), 0.0),
            &EgoMotion::translation_only(t2),
            0.0,
        );
        let once = propagate_state(&st, &EgoMotion::translation_only(t1 + t2), 0.0);
        compose_err = compose_err.max((twice.center() - once.center()).amax());
        let moved = propagate_state(&st, &EgoMotion::from_yaw(0.3, t1), 0.7);
        bit_stable &=
            [moved.w, moved.l, moved.h, moved.vx, moved.vy] == [st.w, st.l, st.h, st.vx, st.vy];
    }
    Ok((
        capacity_ok && count == l * s && compose_err <= 1e-12 && bit_stable,
        format!("capacity {capacity_ok}; temporal count {count}; composition error {compose_err:.1e}; bit-stable {bit_stable}"),
    ))
}

fn distance_and_kernels() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let states: Vec<RefState> = (0..50).map(|_| random_state(&mut rng)).collect();
    let dm = pairwise_distance(&states);
    let mut worst = 0.0_f64;
    for (i, a) in states.iter().enumerate() {
        for (j, b) in states.iter().enumerate() {
            let oracle = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
            worst = worst.max((dm.get(i, j) - oracle).abs());
        }
    }
    let mut range_ok = true;
    for k in Modulation::KERNELS {
        range_ok &= k.factor(0.0, rng.gen_range(0.1..5.0)) == 1.0;
        for _ in 0..200 {
            let f = k.factor(rng.gen_range(0.0..10.0), rng.gen_range(0.5..5.0));
            range_ok &= f > 0.0 && f <= 1.0;
        }
    }
    Ok((
        worst <= 1e-12 && range_ok,
        format!("distance max error {worst:.1e}; kernels in (0,1] with f(0)=1: {range_ok}"),
    ))
}

fn gradient_checks() -> Result<(bool, String)> {
    let mut passed = true;
    let mut parts = Vec::new();
    for k in KernelId::ALL {
        let r = check_gradients(k, 100, k.default_step(), 505)?;
        passed &= r.passed;
        parts.push(format!("{k} {:.1e}", r.max_rel_error));
    }
    Ok((passed, parts.join(", ")))
}

fn deformable_single_term() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (d, c) = (16, 8);
    let cam = CameraModel::identity(0, 100.0, 100.0, 32.0, 32.0, 64, 64)?;
    let rig = CameraRig::new(vec![cam])?;
    let maps = Level::ALL
        .iter()
        .map(|l| {
            let (w, h) = (l.extent(64) as usize, l.extent(64) as usize);
            FeatureMap::new(
                0,
                *l,
                c,
                h,
                w,
                (0..c * h * w)
                    .map(|_| rng.gen_range(-1.0f32..1.0))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let pyr = FeaturePyramid::new(64, 64, maps)?;
    let mut p = DeformableParams::seeded(d, 1, c, 1, 1, 7)?;
    p.offset_net = Linear::zeros(d, 2, true);
    let x = random_matrix(&mut rng, 2, d);
    let visible = Vector3::new(0.3, -0.2, 5.0);
    let behind = Vector3::new(0.0, 0.0, -5.0);
    let pts = vec![
        SamplingPointSet::from_parts(vec![visible], vec![], 1.0, &rig)?,
        SamplingPointSet::from_parts(vec![behind], vec![], 1.0, &rig)?,
    ];
    let out = deformable_forward(x.view(), &pts, &pyr, &rig, &p)?;
    let pr = project_point(rig.get(0).expect("camera 0"), &visible);
    let feat = bilinear_sample(pyr.get(0, Level::Quarter).expect("level"), pr.u, pr.v);
    let expected = naive_affine(&p.out_proj[0], &naive_affine(&p.value_proj[0], &feat));
    let err = expected
        .iter()
        .zip(out.output.row(0))
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let zero_row = out.output.row(1).iter().all(|v| *v == 0.0);
    let sums_ok = (out.weight_sums[(0, 0)] - 1.0).abs() < 1e-12 && out.weight_sums[(1, 0)] == 0.0;
    Ok((
        err <= 1e-6 && zero_row && sums_ok,
        format!(
            "single-term error {err:.1e}; invisible row zero {zero_row}; weight sums {sums_ok}"
        ),
    ))
}

fn hybrid_contracts() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let d = 32;
    let sampler = HybridSampler::seeded(d, FixedLayout::Faces, 13, 8);
    let counts_ok = sampler.layout.count() == 7 && sampler.learnable_count() == 13;
    let rig = CameraRig::new(vec![CameraModel::identity(
        0, 100.0, 100.0, 32.0, 32.0, 64, 64,
    )?])?;
    let mut endpoints_ok = true;
    let mut inside_ok = true;
    for _ in 0..50 {
        let st = random_state(&mut rng);
        let emb = ndarray::Array1::from_shape_fn(d, |_| rng.gen_range(-3.0..3.0));
        let set = sampler.sample(&st, emb.view(), &rig)?;
        let pure_fixed =
            SamplingPointSet::from_parts(set.fixed.clone(), set.learned.clone(), 1.0, &rig)?;
        let pure_learned =
            SamplingPointSet::from_parts(set.fixed.clone(), set.learned.clone(), 0.0, &rig)?;
        endpoints_ok &=
            pure_fixed.points[..7] == set.fixed[..] && pure_learned.points[..7] == set.learned[..7];
        let rot_t = Matrix3::new(
            st.theta.cos(),
            st.theta.sin(),
            0.0,
            -st.theta.sin(),
            st.theta.cos(),
            0.0,
            0.0,
            0.0,
            1.0,
        );
        for p in &set.learned {
            let local = rot_t * (p - st.center());
            inside_ok &= local.x.abs() <= st.w / 2.0 + 1e-9
                && local.y.abs() <= st.l / 2.0 + 1e-9
                && local.z.abs() <= st.h / 2.0 + 1e-9;
        }
    }
    Ok((
        counts_ok && endpoints_ok && inside_ok,
        format!("7+13 default {counts_ok}; alpha endpoints {endpoints_ok}; learned inside box {inside_ok}"),
    ))
}

fn pipeline_config() -> PipelineConfig {
    PipelineConfig {
        d: 64,
        heads: 8,
        ffn_hidden: 256,
        feature_channels: 16,
        ..PipelineConfig::default()
    }
}

fn pipeline_determinism() -> Result<(bool, String)> {
    let cfg = pipeline_config();
    let scene = gen_scene(
        808,
        &crate::pipeline::SceneConfig {
            num_frames: 2,
            ..small_scene_config()
        },
    )?;
    let weights = DetectorWeights::seeded(&cfg, 9)?;
    let run = || -> Result<(Vec<u8>, bool)> {
        let mut stream = StreamState::new(&cfg)?;
        let mut bytes = Vec::new();
        let mut counts_ok = true;
        for f in &scene.frames {
            let temporal_expected = stream.queue.total_entries();
            let out = run_frame(f, &scene.rig, &stream, &cfg, &weights)?;
            counts_ok &= out.counts.global == cfg.n_global
                && out.counts.temporal == temporal_expected
                && out.prediction.len() == cfg.n_global + out.counts.adaptive + out.counts.temporal;
            bytes.extend(out.prediction.to_bytes());
            stream = out.stream;
        }
        Ok((bytes, counts_ok))
    };
    let (a, counts_ok) = run()?;
    let (b, _) = run()?;
    let identical = a == b;
    Ok((
        identical && counts_ok,
        format!("byte-identical {identical}; query accounting {counts_ok}"),
    ))
}

fn scene_oracle() -> Result<(bool, String)> {
    let cfg = pipeline_config();
    let scene = gen_scene(909, &crate::pipeline::SceneConfig::default())?;
    let embed = DetectorWeights::zeros(&PipelineConfig {
        decoder_layers: 1,
        ..cfg.clone()
    })?
    .embed;
    let mut worst = 0.0_f64;
    let mut recall_ok = true;
    for f in &scene.frames {
        let adaptive = make_adaptive_queries(&f.detections, &scene.rig, &embed, &cfg.filter)?;
        let truth = f.truth_states();
        for q in adaptive.iter() {
            let nearest = truth
                .iter()
                .map(|t| (t.center() - q.state.center()).norm())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(nearest);
        }
        let m = evaluate(
            &FramePrediction::from_queries(f.index, &adaptive),
            &truth,
            1.0,
        );
        recall_ok &= m.recall == 1.0;
    }
    Ok((
        worst <= 1e-6 && recall_ok,
        format!("max center error {worst:.1e}; recall 1.0 every frame {recall_ok}"),
    ))
}

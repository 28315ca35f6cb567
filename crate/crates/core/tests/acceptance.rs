//! Acceptance suite. Every criterion is checked against oracles written here,
//! independently of the library internals, and reported on its own line.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{Rotation3, Vector3};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cam3d::attention::{
    asa_forward, asa_kernel_grad, pairwise_distance, AttentionParams, EpsNet, EpsNetKind,
    Modulation,
};
use cam3d::geometry::{
    lift_detection, project_point, CameraModel, CameraRig, Detection2D, EgoMotion, RefState,
};
use cam3d::linear::{softmax, softmax_jacobian, Linear};
use cam3d::pipeline::{
    check_gradients, evaluate, gen_scene, run_decoder, run_frame, DetectorWeights, FramePrediction,
    KernelId, PipelineConfig, SceneConfig, StreamState,
};
use cam3d::queries::{
    compose_queries, make_adaptive_queries, make_global_queries, Query, QueryKind, QuerySet,
};
use cam3d::sampling::{
    bilinear_sample_grad, blend_points, deformable_forward, DeformableParams, FeatureMap,
    FeaturePyramid, FixedLayout, HybridSampler, Level, SamplingPointSet,
};
use cam3d::temporal::{make_temporal_queries, propagate_state, queue_push, MemoryQueue};
use cam3d::Result;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn max_abs_diff<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    a.into_iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn random_state(rng: &mut ChaCha8Rng) -> RefState {
    RefState {
        x: rng.gen_range(-50.0..50.0),
        y: rng.gen_range(-50.0..50.0),
        z: rng.gen_range(-3.0..3.0),
        w: rng.gen_range(0.3..3.0),
        l: rng.gen_range(0.3..6.0),
        h: rng.gen_range(0.3..3.0),
        theta: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        vx: rng.gen_range(-10.0..10.0),
        vy: rng.gen_range(-10.0..10.0),
    }
}

// ---------- oracles ----------

/// `W x + b`, row by row.
fn affine(l: &Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = (&l.weight, l.bias.as_ref());
    (0..w.nrows())
        .map(|o| {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for (i, xi) in x.iter().enumerate() {
                acc += w[(o, i)] * xi;
            }
            acc
        })
        .collect()
}

/// Plain multi-head self-attention with scaled dot products.
fn vanilla_mhsa(x: &Array2<f64>, p: &AttentionParams) -> Vec<Vec<f64>> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let q: Vec<_> = rows.iter().map(|r| affine(&p.wq, r)).collect();
    let k: Vec<_> = rows.iter().map(|r| affine(&p.wk, r)).collect();
    let v: Vec<_> = rows.iter().map(|r| affine(&p.wv, r)).collect();
    let dh = p.d / p.heads;
    let scale = (dh as f64).sqrt();
    (0..n)
        .map(|i| {
            let mut concat = vec![0.0; p.d];
            for h in 0..p.heads {
                let r = h * dh..(h + 1) * dh;
                let s: Vec<f64> = (0..n)
                    .map(|j| {
                        q[i][r.clone()]
                            .iter()
                            .zip(&k[j][r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / scale
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in r.clone() {
                    concat[c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
            affine(&p.wo, &concat)
        })
        .collect()
}

/// Bilinear interpolation with pixel centers at half-integers and zero padding.
fn bilinear_oracle(fm: &FeatureMap, u: f64, v: f64) -> Vec<f64> {
    let s = match fm.level {
        Level::Quarter => 0.25,
        Level::Eighth => 0.125,
        Level::Sixteenth => 0.0625,
        Level::ThirtySecond => 0.03125,
    };
    let (x, y) = (u * s - 0.5, v * s - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let at = |c: usize, r: f64, col: f64| -> f64 {
        if r < 0.0 || col < 0.0 || r >= fm.height as f64 || col >= fm.width as f64 {
            0.0
        } else {
            f64::from(fm.get(c, r as usize, col as usize))
        }
    };
    (0..fm.channels)
        .map(|c| {
            at(c, y0, x0) * (1.0 - ax) * (1.0 - ay)
                + at(c, y0, x0 + 1.0) * ax * (1.0 - ay)
                + at(c, y0 + 1.0, x0) * (1.0 - ax) * ay
                + at(c, y0 + 1.0, x0 + 1.0) * ax * ay
        })
        .collect()
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// ---------- criteria ----------

fn degeneration_equivalence() -> Result<Outcome> {
    let (q, d, heads) = (32, 64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_none = 0.0_f64;
    let mut worst_gauss = 0.0_f64;
    for inst in 0..20u64 {
        let x = Array2::from_shape_fn((q, d), |_| rng.gen_range(-1.0..1.0));
        let states: Vec<RefState> = (0..q).map(|_| random_state(&mut rng)).collect();

        let plain = AttentionParams::seeded(d, heads, EpsNetKind::Double, Modulation::None, inst)?;
        let oracle = vanilla_mhsa(&x, &plain);
        let got = asa_forward(x.view(), &states, &plain)?.output;
        for (i, row) in oracle.iter().enumerate() {
            worst_none = worst_none.max(max_abs_diff(row, got.row(i)));
        }

        // ε = 1e9 for every query and head: zero last-layer weights, bias 1e9
        let mut wide =
            AttentionParams::seeded(d, heads, EpsNetKind::Double, Modulation::Gaussian, inst)?;
        if let EpsNet::Double(m) = &mut wide.eps_net {
            m.second.weight.fill(0.0);
            m.second.bias = Some(Array1::from_elem(heads, 1e9));
        }
        let got = asa_forward(x.view(), &states, &wide)?.output;
        for (i, row) in oracle.iter().enumerate() {
            worst_gauss = worst_gauss.max(max_abs_diff(row, got.row(i)));
        }
    }
    outcome(
        worst_none <= 1e-6 && worst_gauss <= 1e-6,
        format!("none: max err {worst_none:.2e}; gaussian at eps=1e9: max err {worst_gauss:.2e} (20 instances)"),
    )
}

fn geometry_round_trip() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    let mut contract = true;
    for i in 0..1000u32 {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let rot = Rotation3::from_scaled_axis(axis * rng.gen_range(0.0..3.0)).into_inner();
        let t = Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        );
        let (w, h) = (rng.gen_range(64..2000u32), rng.gen_range(64..1200u32));
        let fx = rng.gen_range(100.0..2000.0);
        let fy = fx * rng.gen_range(0.8..1.2);
        let cam = CameraModel::new(
            i,
            fx,
            fy,
            rng.gen_range(0.3..0.7) * w as f64,
            rng.gen_range(0.3..0.7) * h as f64,
            w,
            h,
            rot,
            t,
        )?;
        let det = Detection2D {
            camera_id: i,
            u: rng.gen_range(0.0..w as f64),
            v: rng.gen_range(0.0..h as f64),
            w: rng.gen_range(1.0..300.0),
            h: rng.gen_range(1.0..300.0),
            z_sem: vec![],
            score: 0.9,
            depth: rng.gen_range(0.5..100.0),
            depth_distribution: None,
        };
        let s = lift_detection(&cam, &det)?;
        let p = project_point(&cam, &s.center());
        worst = worst
            .max(rel(p.u, det.u))
            .max(rel(p.v, det.v))
            .max(rel(p.depth, det.depth));
        contract &= s.l == s.w && s.theta == 0.0 && s.vx == 0.0 && s.vy == 0.0;
    }
    outcome(
        worst <= 1e-9 && contract,
        format!("max relative error {worst:.2e} over 1000 pairs; P_l=P_w, theta=0, v=0 exact: {contract}"),
    )
}

fn temporal_contracts() -> Result<Outcome> {
    let (l, s, d) = (4, 64, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut queue = MemoryQueue::new(l, s, d)?;
    let mut capacity_ok = true;
    let mut counts = Vec::new();
    for f in 0..7 {
        let n = [100, 30, 64, 200, 80, 5, 90][f];
        let mut frame = QuerySet::new(d);
        for _ in 0..n {
            frame.push(Query {
                state: random_state(&mut rng),
                embedding: (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                kind: QueryKind::Adaptive,
                score: rng.gen_range(0.0..1.0),
            })?;
        }
        queue = queue_push(&queue, &frame, f as f64 * 0.5)?;
        capacity_ok &= queue.total_entries() <= l * s;
    }

    let mut steady = MemoryQueue::new(l, s, d)?;
    let mut frame = QuerySet::new(d);
    for _ in 0..100 {
        frame.push(Query {
            state: random_state(&mut rng),
            embedding: vec![0.5; d],
            kind: QueryKind::Global,
            score: rng.gen_range(0.0..1.0),
        })?;
    }
    for f in 0..4 {
        steady = queue_push(&steady, &frame, f as f64)?;
        counts.push(make_temporal_queries(&steady, &vec![EgoMotion::identity(); l], 4.0)?.len());
    }
    let count = *counts.last().unwrap_or(&0);

    // translation-only gaps compose additively; closed form c + dt·v + ΣT
    let mut comp_err = 0.0_f64;
    let mut stable = true;
    for _ in 0..200 {
        let st = random_state(&mut rng);
        let ts: Vec<Vector3<f64>> = (0..3)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let dts = [
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ];
        let mut cur = st;
        for (t, dt) in ts.iter().zip(dts) {
            cur = propagate_state(&cur, &EgoMotion::translation_only(*t), dt);
        }
        let total_dt: f64 = dts.iter().sum();
        let tsum = ts[0] + ts[1] + ts[2];
        let expect = [
            st.x + total_dt * st.vx + tsum.x,
            st.y + total_dt * st.vy + tsum.y,
            st.z + tsum.z,
        ];
        comp_err = comp_err.max(max_abs_diff(&[cur.x, cur.y, cur.z], &expect));
        let moved = propagate_state(
            &st,
            &EgoMotion::from_yaw(rng.gen_range(-1.0..1.0), ts[0]),
            dts[0],
        );
        for (a, b) in [
            (moved.w, st.w),
            (moved.l, st.l),
            (moved.h, st.h),
            (moved.vx, st.vx),
            (moved.vy, st.vy),
        ] {
            stable &= a.to_bits() == b.to_bits();
        }
    }
    outcome(
        capacity_ok && count == 256 && comp_err <= 1e-12 && stable,
        format!(
            "capacity <= L*S: {capacity_ok}; temporal counts after pushes {counts:?}; \
             translation composition err {comp_err:.1e}; size/velocity bit-stable: {stable}"
        ),
    )
}

fn distance_and_kernels() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let states: Vec<RefState> = (0..50).map(|_| random_state(&mut rng)).collect();
    let dm = pairwise_distance(&states);
    let mut worst = 0.0_f64;
    for i in 0..50 {
        for j in 0..50 {
            let (a, b) = (&states[i], &states[j]);
            let oracle = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
            worst = worst.max((dm.get(i, j) - oracle).abs());
        }
    }
    let mut in_range = true;
    let mut unit_at_zero = true;
    for k in Modulation::KERNELS {
        for _ in 0..1000 {
            let eps = rng.gen_range(0.05..10.0);
            let dist = rng.gen_range(0.0..10.0) * eps;
            let f = k.factor(dist, eps);
            in_range &= f > 0.0 && f <= 1.0;
            unit_at_zero &= k.factor(0.0, eps) == 1.0;
        }
    }
    outcome(
        worst <= 1e-12 && in_range && unit_at_zero,
        format!("distance max err {worst:.1e} (50 states); kernels in (0,1]: {in_range}; f(0)=1: {unit_at_zero}"),
    )
}

fn gradient_checks() -> Result<Outcome> {
    const PROBES: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = Vec::new();

    for k in Modulation::KERNELS {
        let mut w = 0.0_f64;
        for _ in 0..PROBES {
            let (d, e) = (rng.gen_range(0.01..5.0), rng.gen_range(0.5..5.0));
            let g = asa_kernel_grad(d, e, k)?;
            w = w.max(rel(g.d_distance, central(|x| k.factor(x, e), d, 1e-5)));
            w = w.max(rel(g.d_eps, central(|x| k.factor(d, x), e, 1e-5)));
        }
        worst.push((format!("{k:?}").to_lowercase(), w));
    }

    let mut w = 0.0_f64;
    for _ in 0..PROBES {
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let jac = softmax_jacobian(&x);
        for j in 0..8 {
            for i in 0..8 {
                let fd = central(
                    |t| {
                        let mut y = x.clone();
                        y[j] = t;
                        softmax(&y)[i]
                    },
                    x[j],
                    1e-5,
                );
                w = w.max(rel(jac[(i, j)], fd));
            }
        }
    }
    worst.push(("softmax".into(), w));

    let mut w = 0.0_f64;
    for _ in 0..PROBES {
        let level = Level::ALL[rng.gen_range(0..4)];
        let (c, h, wd) = (4, 10, 14);
        let fm = FeatureMap::new(
            1,
            level,
            c,
            h,
            wd,
            (0..c * h * wd)
                .map(|_| rng.gen_range(-2.0f32..2.0))
                .collect(),
        )?;
        let inv = 1.0 / level.scale();
        // level coordinate with fractional part in [0.1, 0.9], strictly inside the map
        let px = rng.gen_range(1..wd - 2) as f64 + rng.gen_range(0.1..0.9);
        let py = rng.gen_range(1..h - 2) as f64 + rng.gen_range(0.1..0.9);
        let (u, v) = ((px + 0.5) * inv, (py + 0.5) * inv);
        let g = bilinear_sample_grad(&fm, u, v);
        for ch in 0..c {
            w = w.max(rel(
                g.d_u[ch],
                central(|t| bilinear_oracle(&fm, t, v)[ch], u, 1e-4),
            ));
            w = w.max(rel(
                g.d_v[ch],
                central(|t| bilinear_oracle(&fm, u, t)[ch], v, 1e-4),
            ));
            w = w.max(rel(g.value[ch], bilinear_oracle(&fm, u, v)[ch]));
        }
    }
    worst.push(("bilinear".into(), w));

    // the packaged driver must agree
    let mut driver_ok = true;
    for k in KernelId::ALL {
        let r = check_gradients(k, PROBES, k.default_step(), 55)?;
        driver_ok &= r.passed && r.probes >= 100;
    }
    let passed = worst.iter().all(|(_, e)| *e <= 1e-5) && driver_ok;
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        passed,
        format!("{detail}; {PROBES} probes each; check_gradients driver agrees: {driver_ok}"),
    )
}

fn deformable_single_term() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (d, c) = (32, 6);
    let (nw, nh) = (128u32, 96u32);
    let cam = CameraModel::identity(3, 90.0, 95.0, 64.0, 48.0, nw, nh)?;
    let rig = CameraRig::new(vec![cam.clone()])?;
    let maps = Level::ALL
        .iter()
        .map(|l| {
            let (w, h) = (l.extent(nw) as usize, l.extent(nh) as usize);
            FeatureMap::new(
                3,
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
    let pyr = FeaturePyramid::new(nw, nh, maps)?;
    let mut p = DeformableParams::seeded(d, 1, c, 1, 1, 66)?;
    p.offset_net.weight.fill(0.0);
    p.offset_net.bias = Some(Array1::zeros(2));

    let n = 40;
    let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    let mut pts = Vec::with_capacity(n);
    let mut expected = Vec::with_capacity(n);
    for i in 0..n {
        // every fourth query sits behind the camera
        let z: f64 = if i % 4 == 3 {
            -rng.gen_range(1.0..10.0)
        } else {
            rng.gen_range(2.0..30.0)
        };
        let point = Vector3::new(
            rng.gen_range(-0.6..0.6) * z.abs(),
            rng.gen_range(-0.45..0.45) * z.abs(),
            z,
        );
        let pr = project_point(&cam, &point);
        let visible =
            pr.in_front && pr.u >= 0.0 && pr.v >= 0.0 && pr.u < nw as f64 && pr.v < nh as f64;
        expected.push(visible.then(|| {
            let feat = bilinear_oracle(pyr.get(3, Level::Quarter).expect("level"), pr.u, pr.v);
            affine(&p.out_proj[0], &affine(&p.value_proj[0], &feat))
        }));
        pts.push(SamplingPointSet::from_parts(
            vec![point],
            vec![],
            1.0,
            &rig,
        )?);
    }
    let out = deformable_forward(x.view(), &pts, &pyr, &rig, &p)?;
    let mut err = 0.0_f64;
    let mut sums_ok = true;
    let mut n_visible = 0;
    for (i, e) in expected.iter().enumerate() {
        match e {
            Some(e) => {
                n_visible += 1;
                err = err.max(max_abs_diff(e, out.output.row(i)));
                sums_ok &= (out.weight_sums[(i, 0)] - 1.0).abs() <= 1e-12;
            }
            None => {
                sums_ok &=
                    out.weight_sums[(i, 0)] == 0.0 && out.output.row(i).iter().all(|v| *v == 0.0);
            }
        }
    }
    outcome(
        err <= 1e-6 && sums_ok && n_visible > 0 && n_visible < n,
        format!("single-term max err {err:.1e} ({n_visible}/{n} visible); weight sums 1 or 0: {sums_ok}"),
    )
}

fn hybrid_contracts() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 48;
    let base = HybridSampler::seeded(d, FixedLayout::default(), 13, 77);
    let counts_ok =
        base.layout.count() == 7 && base.learnable_count() == 13 && base.point_count() == 13;
    let rig = CameraRig::new(vec![CameraModel::identity(
        0, 100.0, 100.0, 50.0, 50.0, 100, 100,
    )?])?;

    let mut endpoints = true;
    let mut inside = true;
    for _ in 0..200 {
        let st = random_state(&mut rng);
        let emb = Array1::from_shape_fn(d, |_| rng.gen_range(-4.0..4.0));
        // logistic(±1000) is exactly 1 or 0 in f64
        let mut fixed_only = base.clone();
        fixed_only.alpha_net.bias = Some(Array1::from_elem(1, 1000.0));
        fixed_only.alpha_net.weight.fill(0.0);
        let mut learned_only = fixed_only.clone();
        learned_only.alpha_net.bias = Some(Array1::from_elem(1, -1000.0));

        let a = fixed_only.sample(&st, emb.view(), &rig)?;
        let b = learned_only.sample(&st, emb.view(), &rig)?;
        endpoints &= a.alpha == 1.0 && b.alpha == 0.0;
        endpoints &= a.points[..7] == a.fixed[..] && a.points[7..] == a.learned[7..];
        endpoints &= b.points == b.learned;
        endpoints &= blend_points(&a.fixed, &a.learned, 1.0)?[..7] == a.fixed[..];

        // learned points expressed in the box frame stay within the half extents
        let (s, c) = st.theta.sin_cos();
        for p in &b.learned {
            let (dx, dy, dz) = (p.x - st.x, p.y - st.y, p.z - st.z);
            let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
            inside &= lx.abs() <= st.w / 2.0 * (1.0 + 1e-12)
                && ly.abs() <= st.l / 2.0 * (1.0 + 1e-12)
                && dz.abs() <= st.h / 2.0 * (1.0 + 1e-12);
        }
    }
    outcome(
        counts_ok && endpoints && inside,
        format!("defaults 7 fixed + 13 learnable: {counts_ok}; alpha endpoints exact: {endpoints}; learned inside box: {inside}"),
    )
}

fn acceptance_config() -> PipelineConfig {
    PipelineConfig {
        d: 64,
        heads: 8,
        feature_channels: 16,
        ..PipelineConfig::default()
    }
}

fn acceptance_scene(frames: usize) -> SceneConfig {
    SceneConfig {
        num_boxes: 6,
        num_frames: frames,
        feature_channels: 16,
        ..SceneConfig::default()
    }
}

fn end_to_end() -> Result<Outcome> {
    let cfg = acceptance_config();
    assert_eq!(
        (cfg.n_global, cfg.decoder_layers, cfg.temporal_budget()),
        (644, 6, 256)
    );
    let scene = gen_scene(8, &acceptance_scene(5))?;
    let weights = DetectorWeights::seeded(&cfg, 88)?;

    let mut stream = StreamState::new(&cfg)?;
    let mut accounting = true;
    let mut dumps = Vec::new();
    let mut temporal_counts = Vec::new();
    for f in &scene.frames {
        let stored = stream.queue.total_entries();
        let out = run_frame(f, &scene.rig, &stream, &cfg, &weights)?;
        let adaptive = f.detections.len();
        accounting &= out.counts.global == 644
            && out.counts.adaptive == adaptive
            && out.counts.temporal == stored
            && out.prediction.len() == 644 + adaptive + stored;
        temporal_counts.push(out.counts.temporal);
        dumps.push(out.prediction.to_bytes());
        stream = out.stream;
    }
    let steady = temporal_counts[4] == 256;

    // replay the first two frames from scratch
    let mut stream = StreamState::new(&cfg)?;
    let mut deterministic = true;
    for (f, dump) in scene.frames.iter().take(2).zip(&dumps) {
        let out = run_frame(f, &scene.rig, &stream, &cfg, &weights)?;
        deterministic &= &out.prediction.to_bytes() == dump;
        stream = out.stream;
    }

    // empty frame, empty queue: only the 644 global queries
    let mut empty = scene.frames[0].clone();
    empty.detections.clear();
    let only_global = run_frame(&empty, &scene.rig, &StreamState::new(&cfg)?, &cfg, &weights)?
        .prediction
        .len()
        == 644;

    // zero weights keep every state through N = 6 layers
    let zero = DetectorWeights::zeros(&cfg)?;
    let f = &scene.frames[0];
    let qs = compose_queries(
        &make_global_queries(cfg.n_global, &cfg.bev_range, cfg.seed, cfg.d)?,
        &make_adaptive_queries(&f.detections, &scene.rig, &zero.embed, &cfg.filter)?,
        &QuerySet::new(cfg.d),
    )?;
    let decoded = run_decoder(&qs, &f.pyramid, &scene.rig, &zero.layers)?;
    let identity = zero.layers.len() == 6
        && decoded
            .queries
            .states()
            .iter()
            .zip(qs.states())
            .all(|(a, b)| {
                a.to_array()
                    .iter()
                    .zip(b.to_array())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });

    outcome(
        deterministic && accounting && steady && only_global && identity,
        format!(
            "byte-identical replay: {deterministic}; composite = 644 + adaptive + temporal: {accounting}; \
             temporal per frame {temporal_counts:?}; empty frame -> 644: {only_global}; zero-weight N=6 identity: {identity}"
        ),
    )
}

fn scene_sanity() -> Result<Outcome> {
    let cfg = acceptance_config();
    let scene = gen_scene(9, &SceneConfig::default())?;
    let embed = DetectorWeights::seeded(&cfg, 1)?.embed;
    let mut worst = 0.0_f64;
    let mut recall = Vec::new();
    for f in &scene.frames {
        let adaptive = make_adaptive_queries(&f.detections, &scene.rig, &embed, &cfg.filter)?;
        // each detection was generated from one truth box; the nearest one must coincide
        for q in adaptive.iter() {
            let nearest = f
                .boxes
                .iter()
                .map(|b| {
                    let t = &b.state;
                    ((t.x - q.state.x).powi(2)
                        + (t.y - q.state.y).powi(2)
                        + (t.z - q.state.z).powi(2))
                    .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(nearest);
        }
        recall.push(
            evaluate(
                &FramePrediction::from_queries(f.index, &adaptive),
                &f.truth_states(),
                1.0,
            )
            .recall,
        );
    }
    outcome(
        worst <= 1e-6 && recall.iter().all(|r| *r == 1.0),
        format!("max center error {worst:.1e}; recall at 1.0 m per frame {recall:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 9] = [
        ("degeneration equivalence", degeneration_equivalence),
        ("geometry round trip", geometry_round_trip),
        ("temporal contracts", temporal_contracts),
        ("distance and kernel oracles", distance_and_kernels),
        ("gradient checks", gradient_checks),
        ("deformable single-term reduction", deformable_single_term),
        ("hybrid-point contracts", hybrid_contracts),
        ("end-to-end determinism and accounting", end_to_end),
        ("oracle scene sanity", scene_sanity),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match f() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failures += 1;
        }
        println!(
            "criterion {}: {} [{}] {} ({:.2?})",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            name,
            detail,
            start.elapsed()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

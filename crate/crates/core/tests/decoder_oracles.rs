//! Decoder-layer behaviour checked against naive reference computations.

use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cam3d::attention::{asa_forward, AttentionParams, EpsNetKind, LogitCombine, Modulation};
use cam3d::geometry::{project_point, wrap_angle, CameraModel, CameraRig, RefState};
use cam3d::linear::Linear;
use cam3d::pipeline::{decoder_layer, DetectorWeights, HeadWeights, LayerWeights, PipelineConfig};
use cam3d::queries::{Query, QueryKind, QuerySet};
use cam3d::sampling::{
    deformable_forward, DeformableParams, FeatureMap, FeaturePyramid, FfnWeights, FixedLayout,
    HybridSampler, Level, SamplingPointSet,
};

fn affine(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.output_dim())
        .map(|o| {
            let b = l.bias.as_ref().map_or(0.0, |b| b[o]);
            b + x
                .iter()
                .enumerate()
                .map(|(i, v)| l.weight[(o, i)] * v)
                .sum::<f64>()
        })
        .collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn bilinear(fm: &FeatureMap, u: f64, v: f64) -> Vec<f64> {
    let s = fm.level.scale();
    let (x, y) = (u * s - 0.5, v * s - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let px = |c: usize, r: f64, q: f64| {
        if r < 0.0 || q < 0.0 || r >= fm.height as f64 || q >= fm.width as f64 {
            0.0
        } else {
            f64::from(fm.get(c, r as usize, q as usize))
        }
    };
    (0..fm.channels)
        .map(|c| {
            (1.0 - ay) * ((1.0 - ax) * px(c, y0, x0) + ax * px(c, y0, x0 + 1.0))
                + ay * ((1.0 - ax) * px(c, y0 + 1.0, x0) + ax * px(c, y0 + 1.0, x0 + 1.0))
        })
        .collect()
}

/// Deformable aggregation for one query over a single-camera rig.
fn deformable_oracle(
    x: &[f64],
    points: &[Vector3<f64>],
    cam: &CameraModel,
    pyr: &FeaturePyramid,
    p: &DeformableParams,
) -> Vec<f64> {
    let offsets = affine(&p.offset_net, x);
    let logits = affine(&p.weight_net, x);
    let mut out = vec![0.0; p.d];
    for h in 0..p.heads {
        let mut terms = Vec::new();
        for level in 0..p.levels {
            for (k, pt) in points.iter().enumerate() {
                let pr = project_point(cam, pt);
                if pr.in_front
                    && pr.u >= 0.0
                    && pr.v >= 0.0
                    && pr.u < cam.width as f64
                    && pr.v < cam.height as f64
                {
                    terms.push((
                        level,
                        k,
                        pr.u,
                        pr.v,
                        logits[(h * p.keys + k) * p.levels + level],
                    ));
                }
            }
        }
        if terms.is_empty() {
            continue;
        }
        let a = softmax(&terms.iter().map(|t| t.4).collect::<Vec<_>>());
        let mut acc = vec![0.0; p.channels];
        for (t, w) in terms.iter().zip(a) {
            let lv = Level::ALL[t.0];
            let o = (h * p.keys + t.1) * 2;
            let inv = 1.0 / lv.scale();
            let f = bilinear(
                pyr.get(cam.camera_id, lv).unwrap(),
                t.2 + offsets[o] * inv,
                t.3 + offsets[o + 1] * inv,
            );
            acc.iter_mut().zip(f).for_each(|(a, v)| *a += w * v);
        }
        let projected = affine(&p.out_proj[h], &affine(&p.value_proj[h], &acc));
        out.iter_mut().zip(projected).for_each(|(o, v)| *o += v);
    }
    out
}

fn single_camera_setup(rng: &mut ChaCha8Rng, channels: usize) -> (CameraRig, FeaturePyramid) {
    let cam = CameraModel::looking_along(
        4,
        300.0,
        300.0,
        160.0,
        64.0,
        320,
        128,
        Vector3::new(0.0, 0.0, 1.5),
        0.0,
    )
    .unwrap();
    let maps = Level::ALL
        .iter()
        .map(|l| {
            let (w, h) = (l.extent(320) as usize, l.extent(128) as usize);
            FeatureMap::new(
                4,
                *l,
                channels,
                h,
                w,
                (0..channels * h * w)
                    .map(|_| rng.gen_range(-1.0f32..1.0))
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    (
        CameraRig::new(vec![cam]).unwrap(),
        FeaturePyramid::new(320, 128, maps).unwrap(),
    )
}

fn layer(d: usize, heads: usize, channels: usize, levels: usize, seed: u64) -> LayerWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = Linear::seeded(&mut rng, d, 9, true);
    reg.weight.mapv_inplace(|v| v * 0.05);
    LayerWeights {
        attention: AttentionParams::seeded(
            d,
            heads,
            EpsNetKind::Double,
            Modulation::Gaussian,
            seed + 1,
        )
        .unwrap(),
        sampler: HybridSampler::seeded(d, FixedLayout::Faces, 13, seed + 2),
        deformable: DeformableParams::seeded(d, heads, channels, 13, levels, seed + 3).unwrap(),
        ffn: FfnWeights::seeded(d, 96, seed + 4),
        head: HeadWeights {
            cls: Linear::seeded(&mut rng, d, 5, true),
            reg,
        },
    }
}

#[test]
fn single_query_layer_matches_composed_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (d, heads, channels) = (36, 4, 8);
    let (rig, pyr) = single_camera_setup(&mut rng, channels);
    let w = layer(d, heads, channels, 3, 20);
    let state = RefState {
        x: 12.0,
        y: 1.0,
        z: 1.0,
        w: 1.8,
        l: 4.2,
        h: 1.6,
        theta: 0.4,
        vx: 1.0,
        vy: 0.0,
    };
    let embedding: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let qs = QuerySet::from_queries(
        d,
        vec![Query {
            state,
            embedding: embedding.clone(),
            kind: QueryKind::Adaptive,
            score: 0.7,
        }],
    )
    .unwrap();
    let out = decoder_layer(&qs, &pyr, &rig, &w).unwrap();

    // attention over a single query is the value path
    let x0: Vec<f64> = embedding.iter().map(|&v| f64::from(v)).collect();
    let att = affine(&w.attention.wo, &affine(&w.attention.wv, &x0));
    let x1: Vec<f64> = x0.iter().zip(&att).map(|(a, b)| a + b).collect();
    let set = w
        .sampler
        .sample(&state, Array1::from(x1.clone()).view(), &rig)
        .unwrap();
    let cam = rig.get(4).unwrap();
    let agg = deformable_oracle(&x1, &set.points, cam, &pyr, &w.deformable);
    let x2: Vec<f64> = x1.iter().zip(&agg).map(|(a, b)| a + b).collect();
    let hidden: Vec<f64> = affine(&w.ffn.first, &x2)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let x3: Vec<f64> = x2
        .iter()
        .zip(affine(&w.ffn.second, &hidden))
        .map(|(a, b)| a + b)
        .collect();
    let logits = affine(&w.head.cls, &x3);
    let delta = affine(&w.head.reg, &x3);

    let got = &out.queries.queries()[0];
    for (g, e) in got.embedding.iter().zip(&x3) {
        assert!((f64::from(*g) - e).abs() <= 1e-5 * e.abs().max(1.0));
    }
    let mut expect = state.to_array();
    expect.iter_mut().zip(&delta).for_each(|(s, d)| *s += d);
    expect[6] = wrap_angle(expect[6]);
    for v in &mut expect[3..6] {
        *v = v.max(0.0);
    }
    for (g, e) in got.state.to_array().iter().zip(expect) {
        assert!((g - e).abs() < 1e-9, "{g} vs {e}");
    }
    for (g, e) in out.logits.row(0).iter().zip(&logits) {
        assert!((g - e).abs() < 1e-9);
    }
    let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!((got.score - 1.0 / (1.0 + (-best).exp())).abs() < 1e-12);
    assert_eq!(got.kind, QueryKind::Adaptive);
}

#[test]
fn deformable_matches_oracle_with_offsets_and_levels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, heads, channels) = (24, 3, 5);
    let (rig, pyr) = single_camera_setup(&mut rng, channels);
    let cam = rig.get(4).unwrap();
    let p = DeformableParams::seeded(d, heads, channels, 13, 4, 5).unwrap();
    let sampler = HybridSampler::seeded(d, FixedLayout::Faces, 13, 6);
    let n = 12;
    let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.5..1.5));
    let sets: Vec<SamplingPointSet> = (0..n)
        .map(|i| {
            let st = RefState {
                x: rng.gen_range(3.0..40.0),
                y: rng.gen_range(-10.0..10.0),
                z: rng.gen_range(0.0..2.0),
                w: 2.0,
                l: 4.0,
                h: 1.5,
                theta: rng.gen_range(-3.0..3.0),
                ..RefState::default()
            };
            // some queries land behind the camera
            let st = if i % 5 == 4 {
                RefState { x: -st.x, ..st }
            } else {
                st
            };
            sampler.sample(&st, x.row(i), &rig).unwrap()
        })
        .collect();
    let out = deformable_forward(x.view(), &sets, &pyr, &rig, &p).unwrap();
    for i in 0..n {
        let expect = deformable_oracle(&x.row(i).to_vec(), &sets[i].points, cam, &pyr, &p);
        for (g, e) in out.output.row(i).iter().zip(&expect) {
            assert!((g - e).abs() < 1e-9, "query {i}: {g} vs {e}");
        }
        let visible = sets[i].any_visible();
        for h in 0..heads {
            let s = out.weight_sums[(i, h)];
            assert!(if visible {
                (s - 1.0).abs() < 1e-12
            } else {
                s == 0.0
            });
        }
    }
}

/// Attention with distance modulation, written out per query and head.
fn asa_oracle(x: &Array2<f64>, states: &[RefState], p: &AttentionParams) -> Vec<Vec<f64>> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let q: Vec<_> = rows.iter().map(|r| affine(&p.wq, r)).collect();
    let k: Vec<_> = rows.iter().map(|r| affine(&p.wk, r)).collect();
    let v: Vec<_> = rows.iter().map(|r| affine(&p.wv, r)).collect();
    let eps: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let raw = match &p.eps_net {
                cam3d::attention::EpsNet::Double(m) => {
                    let hdn: Vec<f64> = affine(&m.first, r)
                        .into_iter()
                        .map(|v| v.max(0.0))
                        .collect();
                    affine(&m.second, &hdn)
                }
                cam3d::attention::EpsNet::Single(l) => affine(l, r),
            };
            raw.into_iter()
                .map(|z| (1.0 + z.exp()).ln() + 1e-3)
                .collect()
        })
        .collect();
    let dh = p.d / p.heads;
    (0..n)
        .map(|i| {
            let mut concat = vec![0.0; p.d];
            for h in 0..p.heads {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        let dot: f64 = (h * dh..(h + 1) * dh)
                            .map(|c| q[i][c] * k[j][c])
                            .sum::<f64>()
                            / (dh as f64).sqrt();
                        let (a, b) = (&states[i], &states[j]);
                        let dist =
                            ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2))
                                .sqrt();
                        let e = eps[i][h];
                        let factor = match p.modulation {
                            Modulation::Gaussian => (-dist * dist / (2.0 * e * e)).exp(),
                            Modulation::Laplacian => (-dist / e).exp(),
                            Modulation::Reciprocal => 1.0 / (1.0 + dist / e),
                            Modulation::None => 1.0,
                        };
                        match p.combine {
                            LogitCombine::Multiply => dot * factor,
                            LogitCombine::AddLog => dot + factor.ln(),
                        }
                    })
                    .collect();
                let a = softmax(&logits);
                for c in h * dh..(h + 1) * dh {
                    concat[c] = (0..n).map(|j| a[j] * v[j][c]).sum();
                }
            }
            affine(&p.wo, &concat)
        })
        .collect()
}

#[test]
fn modulated_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d, heads) = (14, 32, 4);
    for (modulation, combine, kind) in [
        (
            Modulation::Gaussian,
            LogitCombine::Multiply,
            EpsNetKind::Double,
        ),
        (
            Modulation::Laplacian,
            LogitCombine::Multiply,
            EpsNetKind::Single,
        ),
        (
            Modulation::Reciprocal,
            LogitCombine::AddLog,
            EpsNetKind::Double,
        ),
        (
            Modulation::Gaussian,
            LogitCombine::AddLog,
            EpsNetKind::Single,
        ),
    ] {
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let states: Vec<RefState> = (0..n)
            .map(|_| RefState {
                x: rng.gen_range(-4.0..4.0),
                y: rng.gen_range(-4.0..4.0),
                z: rng.gen_range(-1.0..1.0),
                ..RefState::default()
            })
            .collect();
        let p = AttentionParams::seeded(d, heads, kind, modulation, rng.gen())
            .unwrap()
            .with_combine(combine);
        let got = asa_forward(x.view(), &states, &p).unwrap().output;
        let expect = asa_oracle(&x, &states, &p);
        for i in 0..n {
            for j in 0..d {
                assert!(
                    (got[(i, j)] - expect[i][j]).abs() < 1e-9,
                    "{modulation:?}/{combine:?}"
                );
            }
        }
    }
}

#[test]
fn decoder_layer_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (d, heads, channels) = (36, 4, 8);
    let (rig, pyr) = single_camera_setup(&mut rng, channels);
    let w = layer(d, heads, channels, 4, 30);
    let queries: Vec<Query> = (0..9)
        .map(|i| Query {
            state: RefState {
                x: rng.gen_range(4.0..30.0),
                y: rng.gen_range(-8.0..8.0),
                z: rng.gen_range(0.0..2.0),
                w: 1.9,
                l: 4.4,
                h: 1.5,
                theta: rng.gen_range(-3.0..3.0),
                vx: 0.0,
                vy: 0.0,
            },
            embedding: (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            kind: [QueryKind::Global, QueryKind::Adaptive, QueryKind::Temporal][i % 3],
            score: 0.5,
        })
        .collect();
    let qs = QuerySet::from_queries(d, queries).unwrap();
    let perm = [4, 0, 8, 2, 6, 1, 7, 3, 5];
    let a = decoder_layer(&qs, &pyr, &rig, &w).unwrap();
    let b = decoder_layer(&qs.permuted(&perm), &pyr, &rig, &w).unwrap();
    for (i, &src) in perm.iter().enumerate() {
        let (qa, qb) = (&a.queries.queries()[src], &b.queries.queries()[i]);
        assert_eq!(qa.kind, qb.kind);
        for (x, y) in qa.state.to_array().iter().zip(qb.state.to_array()) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in qa.embedding.iter().zip(&qb.embedding) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}

#[test]
fn seeded_weights_are_reproducible() {
    let cfg = PipelineConfig {
        d: 36,
        heads: 4,
        decoder_layers: 2,
        ffn_hidden: 32,
        ..PipelineConfig::default()
    };
    assert_eq!(
        DetectorWeights::seeded(&cfg, 3).unwrap(),
        DetectorWeights::seeded(&cfg, 3).unwrap()
    );
    assert_ne!(
        DetectorWeights::seeded(&cfg, 3).unwrap(),
        DetectorWeights::seeded(&cfg, 4).unwrap()
    );
}

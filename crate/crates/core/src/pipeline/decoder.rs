use std::collections::VecDeque;
use std::io::Write;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{Array2, ArrayView1};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{asa_forward, AttentionParams};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, CameraRig, EgoMotion, RefState};
use crate::linear::{logistic, Linear};
use crate::queries::{
    compose_queries, make_adaptive_queries, make_global_queries, EmbedWeights, Query, QueryKind,
    QuerySet,
};
use crate::sampling::{
    deformable_forward, ffn, DeformableParams, FeaturePyramid, FfnWeights, HybridSampler,
};
use crate::temporal::{make_temporal_queries, queue_push, MemoryQueue};

use super::config::PipelineConfig;
use super::scene::SceneFrame;

/// Classification and box-regression heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `d → num_classes`
    pub cls: Linear,
    /// `d → 9` additive state update
    pub reg: Linear,
}

impl HeadWeights {
    pub fn zeros(d: usize, num_classes: usize) -> Self {
        Self {
            cls: Linear::zeros(d, num_classes, true),
            reg: Linear::zeros(d, RefState::DIM, true),
        }
    }
}

/// Class logits and the 9-dim state delta for one embedding.
pub fn reg_cls_head(embedding: ArrayView1<f64>, w: &HeadWeights) -> Result<(Vec<f64>, [f64; 9])> {
    if w.reg.output_dim() != RefState::DIM {
        return Err(Error::shape(
            "regression head output",
            RefState::DIM,
            w.reg.output_dim(),
        ));
    }
    let logits = w.cls.apply(embedding)?.to_vec();
    let reg = w.reg.apply(embedding)?;
    let mut delta = [0.0; 9];
    delta.iter_mut().zip(reg.iter()).for_each(|(d, r)| *d = *r);
    Ok((logits, delta))
}

/// `state + delta` with the heading re-wrapped and sizes kept nonnegative.
pub fn refine_state(state: &RefState, delta: &[f64; 9]) -> RefState {
    let mut a = state.to_array();
    a.iter_mut().zip(delta).for_each(|(v, d)| *v += d);
    let mut s = RefState::from_array(a);
    s.theta = wrap_angle(s.theta);
    s.w = s.w.max(0.0);
    s.l = s.l.max(0.0);
    s.h = s.h.max(0.0);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attention: AttentionParams,
    pub sampler: HybridSampler,
    pub deformable: DeformableParams,
    pub ffn: FfnWeights,
    pub head: HeadWeights,
}

/// Every learned parameter of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights {
    pub embed: EmbedWeights,
    pub layers: Vec<LayerWeights>,
}

impl DetectorWeights {
    pub fn zeros(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.decoder_layers)
            .map(|_| {
                Ok(LayerWeights {
                    attention: AttentionParams::zeros(
                        cfg.d,
                        cfg.heads,
                        cfg.eps_net,
                        cfg.modulation,
                    )?
                    .with_combine(cfg.logit_combine),
                    sampler: HybridSampler::zeros(cfg.d, cfg.fixed_layout, cfg.learnable_points),
                    deformable: DeformableParams::zeros(
                        cfg.d,
                        cfg.heads,
                        cfg.feature_channels,
                        cfg.sampling_points(),
                        cfg.levels,
                    )?,
                    ffn: FfnWeights::zeros(cfg.d, cfg.ffn_hidden),
                    head: HeadWeights::zeros(cfg.d, cfg.num_classes),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: EmbedWeights::zeros(cfg.semantic_dim, cfg.d),
            layers,
        })
    }

    /// Reproducible random weights. The state-regression head is scaled down so
    /// that refinements stay in the meter range.
    pub fn seeded(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let embed = EmbedWeights::seeded(cfg.semantic_dim, cfg.d, master.next_u64());
        let layers = (0..cfg.decoder_layers)
            .map(|_| {
                let mut head_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
                let mut reg = Linear::seeded(&mut head_rng, cfg.d, RefState::DIM, true);
                reg.weight.mapv_inplace(|v| v * 0.01);
                if let Some(b) = reg.bias.as_mut() {
                    b.mapv_inplace(|v| v * 0.01);
                }
                Ok(LayerWeights {
                    attention: AttentionParams::seeded(
                        cfg.d,
                        cfg.heads,
                        cfg.eps_net,
                        cfg.modulation,
                        master.next_u64(),
                    )?
                    .with_combine(cfg.logit_combine),
                    sampler: HybridSampler::seeded(
                        cfg.d,
                        cfg.fixed_layout,
                        cfg.learnable_points,
                        master.next_u64(),
                    ),
                    deformable: DeformableParams::seeded(
                        cfg.d,
                        cfg.heads,
                        cfg.feature_channels,
                        cfg.sampling_points(),
                        cfg.levels,
                        master.next_u64(),
                    )?,
                    ffn: FfnWeights::seeded(cfg.d, cfg.ffn_hidden, master.next_u64()),
                    head: HeadWeights {
                        cls: Linear::seeded(&mut head_rng, cfg.d, cfg.num_classes, true),
                        reg,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embed, layers })
    }

    fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        if self.layers.len() != cfg.decoder_layers {
            return Err(Error::Config(format!(
                "weights have {} decoder layers, config asks for {}",
                self.layers.len(),
                cfg.decoder_layers
            )));
        }
        if self.embed.d != cfg.d || self.embed.c_sem != cfg.semantic_dim {
            return Err(Error::Config(
                "semantic embedding weights do not match the config".into(),
            ));
        }
        for l in &self.layers {
            if l.attention.d != cfg.d
                || l.deformable.d != cfg.d
                || l.deformable.channels != cfg.feature_channels
            {
                return Err(Error::Config(
                    "decoder layer weights do not match the config".into(),
                ));
            }
            if l.sampler.point_count() != l.deformable.keys {
                return Err(Error::Config(format!(
                    "sampler yields {} points but deformable attention expects {} keys",
                    l.sampler.point_count(),
                    l.deformable.keys
                )));
            }
        }
        Ok(())
    }
}

/// Queries and class logits after one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub queries: QuerySet,
    /// `Q × num_classes`
    pub logits: Array2<f64>,
}

/// ASA (+residual) → hybrid sampling and deformable aggregation (+residual) →
/// FFN, then per-query state refinement through the heads.
pub fn decoder_layer(
    qs: &QuerySet,
    pyr: &FeaturePyramid,
    rig: &CameraRig,
    w: &LayerWeights,
) -> Result<LayerOutput> {
    if qs.is_empty() {
        return Ok(LayerOutput {
            queries: qs.clone(),
            logits: Array2::zeros((0, w.head.cls.output_dim())),
        });
    }
    let states = qs.states();
    let x0 = qs.embedding_matrix();
    let x1 = &x0 + &asa_forward(x0.view(), &states, &w.attention)?.output;

    let points = (0..qs.len())
        .into_par_iter()
        .map(|i| w.sampler.sample(&states[i], x1.row(i), rig))
        .collect::<Result<Vec<_>>>()?;
    let x2 = &x1 + &deformable_forward(x1.view(), &points, pyr, rig, &w.deformable)?.output;
    let x3 = ffn(x2.view(), &w.ffn)?;

    let mut logits = Array2::zeros((qs.len(), w.head.cls.output_dim()));
    let mut out = QuerySet::with_capacity(qs.width(), qs.len());
    for (i, q) in qs.iter().enumerate() {
        let (cls, delta) = reg_cls_head(x3.row(i), &w.head)?;
        let best = cls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logits.row_mut(i).assign(&ArrayView1::from(&cls));
        out.push(Query {
            state: refine_state(&q.state, &delta),
            embedding: x3.row(i).iter().map(|&v| v as f32).collect(),
            kind: q.kind,
            score: if best.is_finite() {
                logistic(best)
            } else {
                q.score
            },
        })?;
    }
    Ok(LayerOutput {
        queries: out,
        logits,
    })
}

/// Runs every layer in order.
pub fn run_decoder(
    qs: &QuerySet,
    pyr: &FeaturePyramid,
    rig: &CameraRig,
    layers: &[LayerWeights],
) -> Result<LayerOutput> {
    let mut current = LayerOutput {
        queries: qs.clone(),
        logits: Array2::zeros((qs.len(), 0)),
    };
    for w in layers {
        current = decoder_layer(&current.queries, pyr, rig, w)?;
    }
    Ok(current)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub state: RefState,
    pub class_logits: Vec<f64>,
    pub score: f64,
    pub kind: QueryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FramePrediction {
    pub frame_index: usize,
    pub predictions: Vec<Prediction>,
}

impl FramePrediction {
    /// Wraps undecoded queries (no class logits) as predictions.
    pub fn from_queries(frame_index: usize, qs: &QuerySet) -> Self {
        Self {
            frame_index,
            predictions: qs
                .iter()
                .map(|q| Prediction {
                    state: q.state,
                    class_logits: Vec::new(),
                    score: q.score,
                    kind: q.kind,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// Exact little-endian dump of every value, for byte-level comparisons.
    pub fn write_bytes<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u64::<LittleEndian>(self.frame_index as u64)?;
        w.write_u64::<LittleEndian>(self.predictions.len() as u64)?;
        for p in &self.predictions {
            for v in p.state.to_array() {
                w.write_f64::<LittleEndian>(v)?;
            }
            w.write_f64::<LittleEndian>(p.score)?;
            w.write_u8(p.kind as u8)?;
            w.write_u32::<LittleEndian>(p.class_logits.len() as u32)?;
            for &v in &p.class_logits {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_bytes(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }
}

/// State carried from frame to frame: the memory queue and the ego motions
/// linking the stored frames.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub queue: MemoryQueue,
    /// Motion from each frame's predecessor into that frame, oldest first, at most L.
    pub ego_gaps: VecDeque<EgoMotion>,
}

impl StreamState {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            queue: MemoryQueue::new(cfg.queue_length, cfg.queue_size, cfg.d)?,
            ego_gaps: VecDeque::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QueryCounts {
    pub global: usize,
    pub adaptive: usize,
    pub temporal: usize,
}

impl QueryCounts {
    pub fn total(&self) -> usize {
        self.global + self.adaptive + self.temporal
    }
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub prediction: FramePrediction,
    pub stream: StreamState,
    pub counts: QueryCounts,
}

/// One frame end to end: query generation, composition, N decoder layers,
/// predictions, and the top-S push into the queue.
pub fn run_frame(
    frame: &SceneFrame,
    rig: &CameraRig,
    stream: &StreamState,
    cfg: &PipelineConfig,
    weights: &DetectorWeights,
) -> Result<FrameOutput> {
    cfg.validate()?;
    weights.check(cfg)?;
    if frame.pyramid.channels() != cfg.feature_channels {
        return Err(Error::Config(format!(
            "pyramid has {} channels, config expects {}",
            frame.pyramid.channels(),
            cfg.feature_channels
        )));
    }
    if let Some(cam) = rig.iter().find(|c| {
        frame
            .pyramid
            .get(c.camera_id, crate::sampling::Level::Quarter)
            .is_none()
    }) {
        return Err(Error::Config(format!(
            "feature pyramid has no maps for camera {}",
            cam.camera_id
        )));
    }
    if stream.queue.width() != cfg.d
        || stream.queue.length() != cfg.queue_length
        || stream.queue.size() != cfg.queue_size
    {
        return Err(Error::Config(
            "memory queue does not match the config".into(),
        ));
    }

    let global = make_global_queries(cfg.n_global, &cfg.bev_range, cfg.seed, cfg.d)?;
    let adaptive = make_adaptive_queries(&frame.detections, rig, &weights.embed, &cfg.filter)?;
    let mut gaps = stream.ego_gaps.clone();
    gaps.push_back(frame.ego_from_prev);
    while gaps.len() > cfg.queue_length {
        gaps.pop_front();
    }
    let chain: Vec<EgoMotion> = gaps.iter().copied().collect();
    let temporal = make_temporal_queries(&stream.queue, &chain, frame.timestamp)?;
    let counts = QueryCounts {
        global: global.len(),
        adaptive: adaptive.len(),
        temporal: temporal.len(),
    };
    let composite = compose_queries(&global, &adaptive, &temporal)?;

    let decoded = run_decoder(&composite, &frame.pyramid, rig, &weights.layers)?;
    let predictions = decoded
        .queries
        .iter()
        .zip(decoded.logits.rows())
        .map(|(q, l)| Prediction {
            state: q.state,
            class_logits: l.to_vec(),
            score: q.score,
            kind: q.kind,
        })
        .collect();
    let queue = queue_push(&stream.queue, &decoded.queries, frame.timestamp)?;
    Ok(FrameOutput {
        prediction: FramePrediction {
            frame_index: frame.index,
            predictions,
        },
        stream: StreamState {
            queue,
            ego_gaps: gaps,
        },
        counts,
    })
}

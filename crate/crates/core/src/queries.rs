//! Global, adaptive and composite query construction.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    lift_detection, CameraRig, Detection2D, RefState, DEFAULT_DEPTH_CONFIDENCE_MIN,
};
use crate::linear::{Linear, Mlp2};

/// Base of the geometric frequency ladder of the positional encoding.
pub const POS_ENCODING_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Global,
    Adaptive,
    Temporal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub state: RefState,
    pub embedding: Vec<f32>,
    pub kind: QueryKind,
    pub score: f64,
}

/// Ordered queries sharing one embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    d: usize,
    queries: Vec<Query>,
}

impl QuerySet {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            queries: Vec::new(),
        }
    }

    pub fn from_queries(d: usize, queries: Vec<Query>) -> Result<Self> {
        let mut set = Self::with_capacity(d, queries.len());
        for q in queries {
            set.push(q)?;
        }
        Ok(set)
    }

    pub fn with_capacity(d: usize, n: usize) -> Self {
        Self {
            d,
            queries: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, q: Query) -> Result<()> {
        if q.embedding.len() != self.d {
            return Err(Error::shape("query embedding", self.d, q.embedding.len()));
        }
        self.queries.push(q);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Query> {
        self.queries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Query> {
        self.queries.get(i)
    }

    pub fn states(&self) -> Vec<RefState> {
        self.queries.iter().map(|q| q.state).collect()
    }

    pub fn count_kind(&self, kind: QueryKind) -> usize {
        self.queries.iter().filter(|q| q.kind == kind).count()
    }

    /// Embeddings as a `Q×d` matrix in `f64`.
    pub fn embedding_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.d));
        for (mut row, q) in m.rows_mut().into_iter().zip(&self.queries) {
            for (dst, &src) in row.iter_mut().zip(&q.embedding) {
                *dst = f64::from(src);
            }
        }
        m
    }

    /// Returns a copy with the queries reordered so that output `i` is input `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            d: self.d,
            queries: perm.iter().map(|&i| self.queries[i].clone()).collect(),
        }
    }
}

impl<'a> IntoIterator for &'a QuerySet {
    type Item = &'a Query;
    type IntoIter = std::slice::Iter<'a, Query>;

    fn into_iter(self) -> Self::IntoIter {
        self.queries.iter()
    }
}

/// Sinusoidal encoding of the 9 state scalars.
///
/// Each scalar gets `d / 9` interleaved sin/cos channels with frequencies
/// `1 / 10000^(2⌊j/2⌋ / (d/9))`; the 9 blocks are concatenated in state order
/// (x, y, z, w, l, h, θ, vx, vy) and zero-padded to `d`.
pub fn sin_pos_embed(state: &RefState, d: usize) -> Result<Vec<f32>> {
    Ok(sin_pos_embed_f64(state, d)?
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

pub(crate) fn sin_pos_embed_f64(state: &RefState, d: usize) -> Result<Vec<f64>> {
    if d < 2 * RefState::DIM {
        return Err(Error::Config(format!(
            "positional encoding needs d >= {}, got {d}",
            2 * RefState::DIM
        )));
    }
    let per_scalar = d / RefState::DIM;
    let mut out = vec![0.0; d];
    for (k, value) in state.to_array().into_iter().enumerate() {
        let block = &mut out[k * per_scalar..(k + 1) * per_scalar];
        for (j, slot) in block.iter_mut().enumerate() {
            let exponent = (2 * (j / 2)) as f64 / per_scalar as f64;
            let angle = value / POS_ENCODING_BASE.powf(exponent);
            *slot = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(out)
}

/// Semantic MLP `(C_sem + 1) → d → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedWeights {
    pub c_sem: usize,
    pub d: usize,
    pub mlp: Mlp2,
    pub seed: Option<u64>,
}

impl EmbedWeights {
    pub fn new(c_sem: usize, d: usize, mlp: Mlp2) -> Result<Self> {
        if mlp.first.input_dim() != c_sem + 1 {
            return Err(Error::shape(
                "semantic mlp input",
                c_sem + 1,
                mlp.first.input_dim(),
            ));
        }
        if mlp.first.output_dim() != d || mlp.second.output_dim() != d {
            return Err(Error::shape(
                "semantic mlp width",
                d,
                mlp.second.output_dim(),
            ));
        }
        Ok(Self {
            c_sem,
            d,
            mlp,
            seed: None,
        })
    }

    pub fn zeros(c_sem: usize, d: usize) -> Self {
        Self {
            c_sem,
            d,
            mlp: Mlp2 {
                first: Linear::zeros(c_sem + 1, d, true),
                second: Linear::zeros(d, d, true),
            },
            seed: None,
        }
    }

    pub fn seeded(c_sem: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            c_sem,
            d,
            mlp: Mlp2 {
                first: Linear::seeded(&mut rng, c_sem + 1, d, true),
                second: Linear::seeded(&mut rng, d, d, true),
            },
            seed: Some(seed),
        }
    }
}

/// `MLP([z_sem ‖ score])`.
pub fn semantic_embed(z_sem: &[f32], score: f64, w: &EmbedWeights) -> Result<Vec<f32>> {
    Ok(semantic_embed_f64(z_sem, score, w)?
        .iter()
        .map(|&v| v as f32)
        .collect())
}

fn semantic_embed_f64(z_sem: &[f32], score: f64, w: &EmbedWeights) -> Result<Array1<f64>> {
    if z_sem.len() != w.c_sem {
        return Err(Error::shape("semantic vector", w.c_sem, z_sem.len()));
    }
    let mut input = Array1::zeros(w.c_sem + 1);
    for (dst, &src) in input.iter_mut().zip(z_sem) {
        *dst = f64::from(src);
    }
    input[w.c_sem] = score;
    w.mlp.apply(input.view())
}

/// Quality gate applied before lifting detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionFilter {
    pub score_min: f64,
    pub depth_confidence_min: f64,
}

impl Default for DetectionFilter {
    fn default() -> Self {
        Self {
            score_min: 0.0,
            depth_confidence_min: DEFAULT_DEPTH_CONFIDENCE_MIN,
        }
    }
}

impl DetectionFilter {
    pub fn with_score_min(score_min: f64) -> Self {
        Self {
            score_min,
            ..Self::default()
        }
    }

    pub fn accepts(&self, det: &Detection2D) -> bool {
        det.score >= self.score_min && det.depth_confidence() >= self.depth_confidence_min
    }
}

/// Lifts surviving detections into adaptive queries.
///
/// The embedding of each query is `sin_pos_embed(state) + semantic_embed(z, score)`,
/// summed in `f64` and rounded once. No cross-camera duplicate suppression.
pub fn make_adaptive_queries(
    dets: &[Detection2D],
    rig: &CameraRig,
    w: &EmbedWeights,
    filter: &DetectionFilter,
) -> Result<QuerySet> {
    if let Some(bad) = dets.iter().find(|d| rig.get(d.camera_id).is_none()) {
        return Err(Error::Reference(format!(
            "detection refers to unknown camera {}",
            bad.camera_id
        )));
    }
    let mut out = QuerySet::new(w.d);
    for det in dets.iter().filter(|d| filter.accepts(d)) {
        let cam = rig.get(det.camera_id).expect("checked above");
        let state = lift_detection(cam, det)?;
        let pos = sin_pos_embed_f64(&state, w.d)?;
        let sem = semantic_embed_f64(&det.z_sem, det.score, w)?;
        let embedding = pos
            .iter()
            .zip(sem.iter())
            .map(|(p, s)| (p + s) as f32)
            .collect();
        out.push(Query {
            state,
            embedding,
            kind: QueryKind::Adaptive,
            score: det.score,
        })?;
    }
    Ok(out)
}

/// Axis-aligned BEV sampling volume in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for BevRange {
    fn default() -> Self {
        Self {
            x_min: -51.2,
            x_max: 51.2,
            y_min: -51.2,
            y_max: 51.2,
            z_min: -5.0,
            z_max: 3.0,
        }
    }
}

impl BevRange {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            (self.x_min, self.x_max),
            (self.y_min, self.y_max),
            (self.z_min, self.z_max),
        ]
        .iter()
        .all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo < hi);
        if !ok {
            return Err(Error::Config(format!(
                "empty or non-finite BEV range {self:?}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x)
            && (self.y_min..=self.y_max).contains(&y)
            && (self.z_min..=self.z_max).contains(&z)
    }
}

/// Size given to freshly initialised global queries (meters).
pub const GLOBAL_QUERY_SIZE: f64 = 1.0;

/// `n` unit boxes with centers uniform over `range`, embedded positionally.
pub fn make_global_queries(n: usize, range: &BevRange, seed: u64, d: usize) -> Result<QuerySet> {
    range.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = QuerySet::with_capacity(d, n);
    for _ in 0..n {
        let state = RefState {
            x: rng.gen_range(range.x_min..range.x_max),
            y: rng.gen_range(range.y_min..range.y_max),
            z: rng.gen_range(range.z_min..range.z_max),
            w: GLOBAL_QUERY_SIZE,
            l: GLOBAL_QUERY_SIZE,
            h: GLOBAL_QUERY_SIZE,
            ..RefState::default()
        };
        out.push(Query {
            embedding: sin_pos_embed(&state, d)?,
            state,
            kind: QueryKind::Global,
            score: 1.0,
        })?;
    }
    Ok(out)
}

/// Concatenation in the order global, adaptive, temporal.
pub fn compose_queries(g: &QuerySet, a: &QuerySet, t: &QuerySet) -> Result<QuerySet> {
    for part in [a, t] {
        if part.d != g.d {
            return Err(Error::shape("composite query width", g.d, part.d));
        }
    }
    let mut queries = Vec::with_capacity(g.len() + a.len() + t.len());
    queries.extend(g.queries.iter().cloned());
    queries.extend(a.queries.iter().cloned());
    queries.extend(t.queries.iter().cloned());
    Ok(QuerySet { d: g.d, queries })
}

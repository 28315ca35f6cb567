//! Adaptive self-attention: self-attention whose per-head logits are modulated by
//! a distance kernel with a learned, per-query receptive-field scale ε.

use std::io::{Read, Write};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RefState;
use crate::linear::{softmax_in_place, softplus, Linear, Mlp2};
use crate::queries::QuerySet;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"CAM3DWT1";
/// Floor added after softplus so that ε stays strictly positive.
pub const EPSILON_FLOOR: f64 = 1e-3;

/// Symmetric `Q×Q` matrix of Euclidean center distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }
}

pub fn pairwise_distance(states: &[RefState]) -> DistanceMatrix {
    let n = states.len();
    let mut values = Array2::zeros((n, n));
    // row-major fill; each entry is computed from squared differences, so
    // (i, j) and (j, i) come out bit-identical
    for (a, mut row) in states.iter().zip(values.rows_mut()) {
        for (b, v) in states.iter().zip(row.iter_mut()) {
            *v = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
        }
    }
    DistanceMatrix { values }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    /// `exp(-D² / 2ε²)`
    #[default]
    Gaussian,
    /// `exp(-D / ε)`
    Laplacian,
    /// `1 / (1 + D / ε)`
    Reciprocal,
    /// Constant 1: plain multi-head self-attention.
    None,
}

impl Modulation {
    pub const KERNELS: [Modulation; 3] = [
        Modulation::Gaussian,
        Modulation::Laplacian,
        Modulation::Reciprocal,
    ];

    /// Kernel value at distance `d` with scale `eps`; in `(0, 1]` for `d >= 0`.
    #[inline]
    pub fn factor(self, d: f64, eps: f64) -> f64 {
        match self {
            Modulation::Gaussian => (-(d * d) / (2.0 * eps * eps)).exp(),
            Modulation::Laplacian => (-d / eps).exp(),
            Modulation::Reciprocal => 1.0 / (1.0 + d / eps),
            Modulation::None => 1.0,
        }
    }

    /// Natural log of [`Modulation::factor`], evaluated without underflow.
    #[inline]
    pub fn log_factor(self, d: f64, eps: f64) -> f64 {
        match self {
            Modulation::Gaussian => -(d * d) / (2.0 * eps * eps),
            Modulation::Laplacian => -d / eps,
            Modulation::Reciprocal => -(d / eps).ln_1p(),
            Modulation::None => 0.0,
        }
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Modulation::Gaussian),
            "laplacian" => Ok(Modulation::Laplacian),
            "reciprocal" => Ok(Modulation::Reciprocal),
            "none" => Ok(Modulation::None),
            other => Err(Error::Config(format!("unknown modulation '{other}'"))),
        }
    }
}

/// How the distance factor enters the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogitCombine {
    /// `logits * factor`, applied before the softmax.
    #[default]
    Multiply,
    /// `logits + ln(factor)`.
    AddLog,
}

/// Network predicting per-head ε from a query embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum EpsNet {
    /// Two affine layers `d → d → H` with a ReLU in between.
    Double(Mlp2),
    /// One affine layer `d → H`.
    Single(Linear),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EpsNetKind {
    #[default]
    Double,
    Single,
}

impl EpsNet {
    fn output_dim(&self) -> usize {
        match self {
            EpsNet::Double(m) => m.second.output_dim(),
            EpsNet::Single(l) => l.output_dim(),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            EpsNet::Double(m) => m.first.input_dim(),
            EpsNet::Single(l) => l.input_dim(),
        }
    }

    fn apply_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            EpsNet::Double(m) => m.apply_rows(x),
            EpsNet::Single(l) => l.apply_rows(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub d: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub eps_net: EpsNet,
    pub modulation: Modulation,
    pub combine: LogitCombine,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        heads: usize,
        d: usize,
        wq: Linear,
        wk: Linear,
        wv: Linear,
        wo: Linear,
        eps_net: EpsNet,
        modulation: Modulation,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        for (what, l) in [("Wq", &wq), ("Wk", &wk), ("Wv", &wv), ("Wo", &wo)] {
            if l.input_dim() != d || l.output_dim() != d {
                return Err(Error::Config(format!(
                    "{what} must be {d}→{d}, got {}→{}",
                    l.input_dim(),
                    l.output_dim()
                )));
            }
        }
        if eps_net.input_dim() != d {
            return Err(Error::shape("eps net input", d, eps_net.input_dim()));
        }
        if eps_net.output_dim() != heads {
            return Err(Error::shape("eps net output", heads, eps_net.output_dim()));
        }
        Ok(Self {
            heads,
            d,
            wq,
            wk,
            wv,
            wo,
            eps_net,
            modulation,
            combine: LogitCombine::Multiply,
        })
    }

    pub fn zeros(
        d: usize,
        heads: usize,
        eps_kind: EpsNetKind,
        modulation: Modulation,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let eps_net = match eps_kind {
            EpsNetKind::Double => EpsNet::Double(Mlp2 {
                first: Linear::zeros(d, d, true),
                second: Linear::zeros(d, heads, true),
            }),
            EpsNetKind::Single => EpsNet::Single(Linear::zeros(d, heads, true)),
        };
        Self::new(
            heads,
            d,
            Linear::zeros(d, d, true),
            Linear::zeros(d, d, true),
            Linear::zeros(d, d, true),
            Linear::zeros(d, d, true),
            eps_net,
            modulation,
        )
    }

    pub fn seeded(
        d: usize,
        heads: usize,
        eps_kind: EpsNetKind,
        modulation: Modulation,
        seed: u64,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wq = Linear::seeded(&mut rng, d, d, true);
        let wk = Linear::seeded(&mut rng, d, d, true);
        let wv = Linear::seeded(&mut rng, d, d, true);
        let wo = Linear::seeded(&mut rng, d, d, true);
        let eps_net = match eps_kind {
            EpsNetKind::Double => EpsNet::Double(Mlp2 {
                first: Linear::seeded(&mut rng, d, d, true),
                second: Linear::seeded(&mut rng, d, heads, true),
            }),
            EpsNetKind::Single => EpsNet::Single(Linear::seeded(&mut rng, d, heads, true)),
        };
        Self::new(heads, d, wq, wk, wv, wo, eps_net, modulation)
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn with_combine(mut self, combine: LogitCombine) -> Self {
        self.combine = combine;
        self
    }

    /// Weight file: magic, `u32` d, H, then `f32` tensors Wq, Wk, Wv, Wo and the
    /// ε-network layers, each as weight (row-major `out×in`) followed by bias.
    pub fn write_weights<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_u32::<LittleEndian>(to_u32(self.d)?)?;
        w.write_u32::<LittleEndian>(to_u32(self.heads)?)?;
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            l.write_f32(w)?;
        }
        match &self.eps_net {
            EpsNet::Double(m) => {
                m.first.write_f32(w)?;
                m.second.write_f32(w)?;
            }
            EpsNet::Single(l) => l.write_f32(w)?,
        }
        Ok(())
    }

    /// Reads a weight file. The ε-network variant is recognised from the payload length.
    pub fn read_weights<R: Read>(r: &mut R, modulation: Modulation) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(Error::format(
                "weight file",
                "bad magic or truncated header",
            ));
        }
        let mut cur = &bytes[8..];
        let d = cur.read_u32::<LittleEndian>()? as usize;
        let heads = cur.read_u32::<LittleEndian>()? as usize;
        check_heads(d, heads)?;
        let proj = d * d + d;
        let double = 4 * proj + (d * d + d) + (heads * d + heads);
        let single = 4 * proj + (heads * d + heads);
        let floats = cur.len() / 4;
        if cur.len() % 4 != 0 || (floats != double && floats != single) {
            return Err(Error::format(
                "weight file",
                format!(
                    "payload of {} bytes matches neither ε-network layout for d={d}, H={heads}",
                    cur.len()
                ),
            ));
        }
        let wq = Linear::read_f32(&mut cur, d, d, true)?;
        let wk = Linear::read_f32(&mut cur, d, d, true)?;
        let wv = Linear::read_f32(&mut cur, d, d, true)?;
        let wo = Linear::read_f32(&mut cur, d, d, true)?;
        let eps_net = if floats == double {
            EpsNet::Double(Mlp2 {
                first: Linear::read_f32(&mut cur, d, d, true)?,
                second: Linear::read_f32(&mut cur, d, heads, true)?,
            })
        } else {
            EpsNet::Single(Linear::read_f32(&mut cur, d, heads, true)?)
        };
        Self::new(heads, d, wq, wk, wv, wo, eps_net, modulation)
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Per-query, per-head positive scales, `Q×H`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonField {
    values: Array2<f64>,
}

impl EpsilonField {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&e| e.is_nan() || e <= 0.0) {
            return Err(Error::Invalid("ε must be strictly positive".into()));
        }
        Ok(Self { values })
    }

    /// Same ε for every query and head.
    pub fn constant(queries: usize, heads: usize, eps: f64) -> Result<Self> {
        Self::new(Array2::from_elem((queries, heads), eps))
    }

    pub fn num_queries(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_heads(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, query: usize, head: usize) -> f64 {
        self.values[(query, head)]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }
}

/// `softplus(net(x)) + 1e-3` row-wise; the same network is shared by all queries.
pub fn compute_epsilons(embeddings: ArrayView2<f64>, p: &AttentionParams) -> Result<EpsilonField> {
    if embeddings.ncols() != p.d {
        return Err(Error::shape("embedding width", p.d, embeddings.ncols()));
    }
    let raw = p.eps_net.apply_rows(embeddings)?;
    EpsilonField::new(raw.mapv(|v| softplus(v) + EPSILON_FLOOR))
}

/// Kernel factor for one head; row `i` uses the attending query's ε.
pub fn modulation_factor(
    dist: &DistanceMatrix,
    eps: &EpsilonField,
    kind: Modulation,
    head: usize,
) -> Result<Array2<f64>> {
    let n = dist.len();
    if eps.num_queries() != n {
        return Err(Error::shape("ε rows", n, eps.num_queries()));
    }
    if head >= eps.num_heads() {
        return Err(Error::shape("head index bound", eps.num_heads(), head));
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        kind.factor(dist.get(i, j), eps.get(i, head))
    }))
}

/// Partials of a kernel with respect to distance and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelGrad {
    pub value: f64,
    pub d_distance: f64,
    pub d_eps: f64,
}

pub fn asa_kernel_grad(d: f64, eps: f64, kind: Modulation) -> Result<KernelGrad> {
    let f = kind.factor(d, eps);
    let (d_distance, d_eps) = match kind {
        Modulation::Gaussian => (-f * d / (eps * eps), f * d * d / (eps * eps * eps)),
        Modulation::Laplacian => (-f / eps, f * d / (eps * eps)),
        Modulation::Reciprocal => {
            let denom = (eps + d) * (eps + d);
            (-eps / denom, d / denom)
        }
        Modulation::None => {
            return Err(Error::Invalid(
                "kernel gradient is only defined for distance kernels".into(),
            ));
        }
    };
    Ok(KernelGrad {
        value: f,
        d_distance,
        d_eps,
    })
}

/// Output of one attention pass.
#[derive(Debug, Clone)]
pub struct AsaOutput {
    /// `Q×d` embeddings after the output projection.
    pub output: Array2<f64>,
    /// Row-stochastic `Q×Q` attention weights, one matrix per head.
    pub weights: Vec<Array2<f64>>,
}

/// Attention pass with an explicitly supplied ε field.
pub fn asa_forward_with_eps(
    x: ArrayView2<f64>,
    dist: &DistanceMatrix,
    eps: &EpsilonField,
    p: &AttentionParams,
) -> Result<AsaOutput> {
    let n = x.nrows();
    if x.ncols() != p.d {
        return Err(Error::shape("embedding width", p.d, x.ncols()));
    }
    if n == 0 {
        return Err(Error::Invalid("attention needs at least one query".into()));
    }
    if dist.len() != n {
        return Err(Error::shape("distance matrix size", n, dist.len()));
    }
    if eps.num_queries() != n || eps.num_heads() != p.heads {
        return Err(Error::shape("ε field rows", n, eps.num_queries()));
    }
    let q = p.wq.apply_rows(x)?;
    let k = p.wk.apply_rows(x)?;
    let v = p.wv.apply_rows(x)?;
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let heads: Vec<(Array2<f64>, Array2<f64>)> = (0..p.heads)
        .into_par_iter()
        .map(|h| {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            let mut att = qh.dot(&kh.t());
            for ((mut row, drow), &e) in att
                .rows_mut()
                .into_iter()
                .zip(dist.values.rows())
                .zip(eps.view().column(h))
            {
                let row = row.as_slice_mut().expect("standard layout");
                match p.combine {
                    LogitCombine::Multiply => {
                        for (a, &dij) in row.iter_mut().zip(drow) {
                            *a = *a * scale * p.modulation.factor(dij, e);
                        }
                    }
                    LogitCombine::AddLog => {
                        for (a, &dij) in row.iter_mut().zip(drow) {
                            *a = *a * scale + p.modulation.log_factor(dij, e);
                        }
                    }
                }
                softmax_in_place(row);
            }
            let out = att.dot(&vh);
            (att, out)
        })
        .collect();

    let mut concat = Array2::zeros((n, p.d));
    let mut weights = Vec::with_capacity(p.heads);
    for (h, (att, out)) in heads.into_iter().enumerate() {
        concat.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&out);
        weights.push(att);
    }
    Ok(AsaOutput {
        output: p.wo.apply_rows(concat.view())?,
        weights,
    })
}

/// Full pass over embeddings and states: distances, learned ε, modulated attention.
pub fn asa_forward(
    x: ArrayView2<f64>,
    states: &[RefState],
    p: &AttentionParams,
) -> Result<AsaOutput> {
    if states.len() != x.nrows() {
        return Err(Error::shape("state count", x.nrows(), states.len()));
    }
    let dist = pairwise_distance(states);
    let eps = compute_epsilons(x, p)?;
    asa_forward_with_eps(x, &dist, &eps, p)
}

/// Updated `Q×d` embeddings for a query set.
pub fn adaptive_self_attention(qs: &QuerySet, p: &AttentionParams) -> Result<Array2<f64>> {
    if qs.width() != p.d {
        return Err(Error::shape("query width", p.d, qs.width()));
    }
    Ok(asa_forward(qs.embedding_matrix().view(), &qs.states(), p)?.output)
}

//! Memory queue of historical queries and their propagation to the current frame.

use std::collections::VecDeque;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{compose_ego, wrap_angle, EgoMotion, RefState};
use crate::queries::{sin_pos_embed_f64, Query, QueryKind, QuerySet};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"CAM3DMQ1";

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// Geometric part, propagated on read.
    pub state: RefState,
    /// Semantic part; never modified once stored.
    pub embedding: Vec<f32>,
    pub timestamp: f64,
    pub frame_index: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGroup {
    pub frame_index: u64,
    pub timestamp: f64,
    pub entries: Vec<MemoryEntry>,
}

/// Ring of at most `L` frame groups, each holding at most `S` entries, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    length: usize,
    size: usize,
    d: usize,
    next_frame: u64,
    groups: VecDeque<FrameGroup>,
}

impl MemoryQueue {
    pub fn new(length: usize, size: usize, d: usize) -> Result<Self> {
        if d < 2 * RefState::DIM {
            return Err(Error::Config(format!(
                "memory queue width {d} is below the positional minimum"
            )));
        }
        Ok(Self {
            length,
            size,
            d,
            next_frame: 0,
            groups: VecDeque::with_capacity(length),
        })
    }

    /// Queue length `L` (frames).
    pub fn length(&self) -> usize {
        self.length
    }

    /// Per-frame size `S`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn groups(&self) -> &VecDeque<FrameGroup> {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn total_entries(&self) -> usize {
        self.groups.iter().map(|g| g.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_entries() == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.groups.iter().flat_map(|g| g.entries.iter())
    }

    /// Writes the snapshot format: magic, `u32` L, S, d, then for every entry
    /// (oldest group first) 9 `f64` state values, `d` `f32` embedding values and
    /// an `f64` timestamp, all little-endian.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        for v in [self.length, self.size, self.d] {
            w.write_u32::<LittleEndian>(to_u32(v)?)?;
        }
        for e in self.entries() {
            for v in e.state.to_array() {
                w.write_f64::<LittleEndian>(v)?;
            }
            for &v in &e.embedding {
                w.write_f32::<LittleEndian>(v)?;
            }
            w.write_f64::<LittleEndian>(e.timestamp)?;
        }
        Ok(())
    }

    /// Reads a snapshot. Consecutive entries with the same timestamp form one
    /// frame group. Scores are not part of the format and load as 0.
    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = bytes.as_slice();
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::format("queue snapshot", "truncated header"))?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::format("queue snapshot", "bad magic"));
        }
        let mut header = [0usize; 3];
        for h in &mut header {
            *h = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| Error::format("queue snapshot", "truncated header"))?
                as usize;
        }
        let [length, size, d] = header;
        let mut queue = MemoryQueue::new(length, size, d)?;
        let record = 8 * 9 + 4 * d + 8;
        if cur.len() % record != 0 {
            return Err(Error::format(
                "queue snapshot",
                format!(
                    "{} trailing bytes do not form whole {record}-byte entries",
                    cur.len()
                ),
            ));
        }
        while !cur.is_empty() {
            let mut s = [0.0; 9];
            for v in &mut s {
                *v = cur.read_f64::<LittleEndian>()?;
            }
            let mut embedding = vec![0.0f32; d];
            for v in &mut embedding {
                *v = cur.read_f32::<LittleEndian>()?;
            }
            let timestamp = cur.read_f64::<LittleEndian>()?;
            if !timestamp.is_finite() {
                return Err(Error::format("queue snapshot", "non-finite timestamp"));
            }
            let start_new = queue
                .groups
                .back()
                .is_none_or(|g| g.timestamp.to_bits() != timestamp.to_bits());
            if start_new {
                let frame_index = queue.next_frame;
                queue.next_frame += 1;
                queue.groups.push_back(FrameGroup {
                    frame_index,
                    timestamp,
                    entries: Vec::new(),
                });
            }
            let group = queue.groups.back_mut().expect("group pushed above");
            group.entries.push(MemoryEntry {
                state: RefState::from_array(s),
                embedding,
                timestamp,
                frame_index: group.frame_index,
                score: 0.0,
            });
        }
        if queue.groups.len() > length || queue.groups.iter().any(|g| g.entries.len() > size) {
            return Err(Error::format(
                "queue snapshot",
                "contents exceed the declared L×S capacity",
            ));
        }
        Ok(queue)
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))
}

/// Selects the top-`S` queries of `frame` by score (stable on ties) and appends
/// them as a new group, evicting the oldest group when `L` are already held.
///
/// The stored semantic part is the query embedding minus its positional encoding.
pub fn queue_push(q: &MemoryQueue, frame: &QuerySet, timestamp: f64) -> Result<MemoryQueue> {
    if frame.width() != q.d {
        return Err(Error::shape("queued query width", q.d, frame.width()));
    }
    if !timestamp.is_finite() {
        return Err(Error::Invalid(format!(
            "timestamp {timestamp} is not finite"
        )));
    }
    let mut order: Vec<usize> = (0..frame.len()).collect();
    // sort_by is stable, so equal scores keep their input order
    order.sort_by(|&a, &b| {
        frame.queries()[b]
            .score
            .total_cmp(&frame.queries()[a].score)
    });
    order.truncate(q.size);

    let frame_index = q.next_frame;
    let entries = order
        .into_iter()
        .map(|i| {
            let query = &frame.queries()[i];
            let pos = sin_pos_embed_f64(&query.state, q.d)?;
            let embedding = query
                .embedding
                .iter()
                .zip(&pos)
                .map(|(&e, p)| (f64::from(e) - p) as f32)
                .collect();
            Ok(MemoryEntry {
                state: query.state,
                embedding,
                timestamp,
                frame_index,
                score: query.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut next = q.clone();
    next.next_frame += 1;
    if next.length == 0 {
        return Ok(next);
    }
    while next.groups.len() >= next.length {
        next.groups.pop_front();
    }
    next.groups.push_back(FrameGroup {
        frame_index,
        timestamp,
        entries,
    });
    Ok(next)
}

/// Constant-velocity ego-motion propagation of a stored state:
/// center ← R·(center + dt·[vx, vy, 0]) + T, heading ← heading + yaw(R),
/// size and velocity unchanged.
pub fn propagate_state(s: &RefState, e: &EgoMotion, dt: f64) -> RefState {
    let moved = s.center() + dt * Vector3::new(s.vx, s.vy, 0.0);
    let c = e.apply(&moved);
    RefState {
        x: c.x,
        y: c.y,
        z: c.z,
        theta: wrap_angle(s.theta + e.yaw()),
        ..*s
    }
}

/// Hook applied to each propagated state before it becomes a temporal query.
pub trait StateRefiner {
    fn refine(&self, propagated: RefState, entry: &MemoryEntry, dt: f64) -> RefState;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl StateRefiner for IdentityRefiner {
    fn refine(&self, propagated: RefState, _entry: &MemoryEntry, _dt: f64) -> RefState {
        propagated
    }
}

/// Propagates every stored entry to `now`.
///
/// `ego_chain` lists per-gap motions oldest first; its last element maps the
/// newest stored frame into the current frame, the one before maps the second
/// newest into the newest, and so on. Only the trailing `num_groups` elements are
/// used. Each entry moves by the composition of its gaps with `dt = now − timestamp`.
pub fn make_temporal_queries(
    q: &MemoryQueue,
    ego_chain: &[EgoMotion],
    now: f64,
) -> Result<QuerySet> {
    make_temporal_queries_with(q, ego_chain, now, &IdentityRefiner)
}

pub fn make_temporal_queries_with<F: StateRefiner + ?Sized>(
    q: &MemoryQueue,
    ego_chain: &[EgoMotion],
    now: f64,
    refiner: &F,
) -> Result<QuerySet> {
    let n = q.groups.len();
    if ego_chain.len() < n {
        return Err(Error::Reference(format!(
            "ego chain has {} segments but {n} stored frames need propagation",
            ego_chain.len()
        )));
    }
    let chain = &ego_chain[ego_chain.len() - n..];

    // to_now[g] maps group g into the current frame
    let mut to_now = vec![EgoMotion::identity(); n];
    let mut acc = EgoMotion::identity();
    for g in (0..n).rev() {
        acc = compose_ego(&acc, &chain[g]);
        to_now[g] = acc;
    }

    let mut out = QuerySet::with_capacity(q.d, q.total_entries());
    for (group, motion) in q.groups.iter().zip(&to_now) {
        for entry in &group.entries {
            let dt = now - entry.timestamp;
            if dt < 0.0 {
                return Err(Error::Invalid(format!(
                    "stored timestamp {} is after the current time {now}",
                    entry.timestamp
                )));
            }
            let state = refiner.refine(propagate_state(&entry.state, motion, dt), entry, dt);
            let pos = sin_pos_embed_f64(&state, q.d)?;
            let embedding = entry
                .embedding
                .iter()
                .zip(&pos)
                .map(|(&s, p)| (p + f64::from(s)) as f32)
                .collect();
            out.push(Query {
                state,
                embedding,
                kind: QueryKind::Temporal,
                score: entry.score,
            })?;
        }
    }
    Ok(out)
}

//! Keyed, lazily realised Bernoulli(p) edge environment.
//!
//! Every edge carries U(e) ~ Uniform[0,1), independent across edges, and is
//! open iff U(e) < p. An edge {x, x+e} is owned by x when e lies in the
//! positive half of the offsets (see [`owned_rank`]). The owned edges of x are
//! ranked by sup-norm shell, so the first V(R)/2 ranks are exactly the edges
//! of range R. Edges with U below `cutoff` are drawn by geometric skipping
//! from a counter stream keyed by (seed, x); every other edge gets
//! U = cutoff + (1 - cutoff)·h(e) for a keyed hash h. Open edges at p ≤ cutoff
//! can then be listed in time proportional to their number.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Edge, LatticeParams, ScaledSite};
use crate::numerics::mix64;

/// Owned offsets with zero third coordinate, or with a positive one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Planar,
    Spatial,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Planar => 0x243f_6a88_85a3_08d3,
            Stream::Spatial => 0x1319_8a2e_0370_7344,
        }
    }
}

/// Rank of (a, b) on the sup-norm ring of radius r ≥ 1 among the 4r offsets
/// with a = r, or with b = r and |a| < r.
fn ring_half_rank(a: i64, b: i64, r: i64) -> Option<u64> {
    if a == r {
        Some((b + r) as u64)
    } else if b == r && a.abs() < r {
        Some((2 * r + 1 + a + r - 1) as u64)
    } else {
        None
    }
}

/// Stream and rank of the offset e if it is owned (lies in the positive half),
/// otherwise None. The origin is never owned.
pub fn owned_rank(e: &ScaledSite) -> Option<(Stream, u64)> {
    let [a, b, c] = e.0;
    if c == 0 {
        let r = a.abs().max(b.abs());
        if r == 0 {
            return None;
        }
        let q = ring_half_rank(a, b, r)?;
        return Some((Stream::Planar, (2 * r * (r - 1)) as u64 + q));
    }
    if c < 0 {
        return None;
    }
    let r = a.abs().max(b.abs()).max(c);
    let s = 2 * r - 1;
    let prefix = ((s * s * s - s * s) / 2) as u64;
    let w = 2 * r + 1;
    let q = if c == r {
        ((a + r) * w + (b + r)) as u64
    } else {
        let ring = match ring_half_rank(a, b, r) {
            Some(q) => q,
            None => 4 * r as u64 + ring_half_rank(-a, -b, r).expect("ring offset"),
        };
        (w * w) as u64 + (c - 1) as u64 * 8 * r as u64 + ring
    };
    Some((Stream::Spatial, prefix + q))
}

/// Owned offsets of one stream with sup-norm at most R, in rank order.
pub fn owned_offsets(stream: Stream, lattice: &LatticeParams) -> Vec<ScaledSite> {
    let r = lattice.range();
    let zr = if stream == Stream::Spatial { 1..=r } else { 0..=0 };
    let mut v: Vec<(u64, ScaledSite)> = Vec::new();
    for c in zr {
        for a in -r..=r {
            for b in -r..=r {
                let e = ScaledSite([a, b, c]);
                if let Some((s, q)) = owned_rank(&e) {
                    if s == stream {
                        v.push((q, e));
                    }
                }
            }
        }
    }
    v.sort_unstable();
    v.into_iter().map(|(_, e)| e).collect()
}

#[inline]
fn unit_open(h: u64) -> f64 {
    ((h >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Ranks and uniforms of the owned edges with U < cutoff, increasing in rank.
pub struct Listing {
    base: u64,
    cutoff: f64,
    log_q: f64,
    pos: i64,
    k: u64,
}

impl Iterator for Listing {
    type Item = (u64, f64);

    #[inline]
    fn next(&mut self) -> Option<(u64, f64)> {
        if self.cutoff <= 0.0 {
            return None;
        }
        let h = mix64(self.base.wrapping_add(2 * self.k));
        let gap = if self.cutoff >= 1.0 {
            0.0
        } else {
            (unit_open(h).ln() / self.log_q).floor().min(1e15)
        };
        self.pos += 1 + gap as i64;
        let u = self.cutoff * unit(mix64(self.base.wrapping_add(2 * self.k + 1)));
        self.k += 1;
        Some((self.pos as u64, u))
    }
}

/// Bernoulli(p) environment on edges. Oracles sharing seed and cutoff share
/// every U(e), so they are coupled monotonically in p.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeOracle {
    pub seed: u64,
    pub p: f64,
    /// Edges with U below this are listed by skipping; see the module docs.
    pub cutoff: f64,
}

impl EdgeOracle {
    /// Oracle with cutoff p.
    pub fn new(seed: u64, p: f64) -> Result<Self> {
        EdgeOracle::with_cutoff(seed, p, p)
    }

    pub fn with_cutoff(seed: u64, p: f64, cutoff: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParam(format!("p = {p} outside [0,1]")));
        }
        if !(0.0..=1.0).contains(&cutoff) {
            return Err(Error::InvalidParam(format!("cutoff = {cutoff} outside [0,1]")));
        }
        Ok(EdgeOracle { seed, p, cutoff })
    }

    /// Same environment at another p.
    pub fn with_p(&self, p: f64) -> Result<Self> {
        EdgeOracle::with_cutoff(self.seed, p, self.cutoff)
    }

    fn site_base(&self, x: &ScaledSite, stream: Stream) -> u64 {
        let mut h = mix64(self.seed ^ stream.tag());
        for c in x.0 {
            h = mix64(h ^ c as u64);
        }
        h
    }

    pub fn listing(&self, owner: &ScaledSite, stream: Stream) -> Listing {
        Listing {
            base: self.site_base(owner, stream),
            cutoff: self.cutoff,
            log_q: (1.0 - self.cutoff).ln(),
            pos: -1,
            k: 0,
        }
    }

    fn unlisted(&self, owner: &ScaledSite, e: &ScaledSite) -> f64 {
        let mut h = mix64(self.seed ^ 0x6a09_e667_f3bc_c909);
        for c in owner.0.iter().chain(e.0.iter()) {
            h = mix64(h ^ *c as u64);
        }
        self.cutoff + (1.0 - self.cutoff) * unit(h)
    }

    /// U(e) in [0, 1).
    pub fn uniform_edge(&self, edge: &Edge) -> f64 {
        let (a, b) = edge.endpoints();
        self.uniform(&a, &b)
    }

    /// U of the edge {a, b}; symmetric in its arguments.
    pub fn uniform(&self, a: &ScaledSite, b: &ScaledSite) -> f64 {
        let d = b.sub(*a);
        let (owner, e, (stream, q)) = match owned_rank(&d) {
            Some(sq) => (*a, d, sq),
            None => {
                let nd = a.sub(*b);
                (*b, nd, owned_rank(&nd).expect("distinct sites"))
            }
        };
        for (pos, u) in self.listing(&owner, stream) {
            if pos == q {
                return u;
            }
            if pos > q {
                break;
            }
        }
        self.unlisted(&owner, &e)
    }

    #[inline]
    pub fn is_open(&self, a: &ScaledSite, b: &ScaledSite) -> bool {
        self.uniform(a, b) < self.p
    }
}

/// Status codes kept per site by [`OpenNeighbors`].
pub const SUSCEPTIBLE: u8 = 0;

#[derive(Default)]
struct Chunk {
    /// Listed edges at local sites (local site, offset to neighbour, U),
    /// gathered from this chunk and its neighbours before `built`.
    pending: Vec<(u32, [i32; 3], f32)>,
    forwarded: bool,
    /// CSR adjacency, valid once `built`.
    adj_start: Vec<u32>,
    adj: Vec<([i32; 3], f32)>,
    built: bool,
    status: Vec<u8>,
    /// Ids of the 3^d chunks around this one, indexed by [`around_slot`].
    around: Vec<usize>,
}

/// Slot of the chunk offset dt ∈ {-1,0,1}^3 in `Chunk::around`.
#[inline]
fn around_slot(dt: [i64; 3]) -> usize {
    ((dt[0] + 1) * 9 + (dt[1] + 1) * 3 + (dt[2] + 1)) as usize
}

/// Open neighbours and a per-site status byte under one oracle and lattice.
/// Space is cut into chunks of side S ≥ R (a power of two), so every
/// neighbour of a site lies in the 3^d chunks around it.
pub struct OpenNeighbors {
    oracle: EdgeOracle,
    d: usize,
    shift: u32,
    volume: usize,
    streams: Vec<(Stream, Vec<ScaledSite>)>,
    index: FxHashMap<[i64; 3], usize>,
    chunks: Vec<Chunk>,
    offsets: Vec<ScaledSite>,
}

impl OpenNeighbors {
    pub fn new(oracle: &EdgeOracle, lattice: &LatticeParams) -> Self {
        let d = lattice.dim();
        let mut streams = vec![(Stream::Planar, owned_offsets(Stream::Planar, lattice))];
        if d == 3 {
            streams.push((Stream::Spatial, owned_offsets(Stream::Spatial, lattice)));
        }
        let side = (lattice.range().max(if d == 2 { 16 } else { 4 }) as u64).next_power_of_two();
        OpenNeighbors {
            oracle: *oracle,
            d,
            shift: side.trailing_zeros(),
            volume: side.pow(d as u32) as usize,
            streams,
            index: FxHashMap::default(),
            chunks: Vec::new(),
            offsets: lattice.offsets(),
        }
    }

    pub fn oracle(&self) -> &EdgeOracle {
        &self.oracle
    }

    #[inline]
    fn locate(&self, x: &ScaledSite) -> ([i64; 3], u32) {
        let mask = (1i64 << self.shift) - 1;
        let mut t = [0i64; 3];
        let mut l = 0i64;
        for a in 0..self.d {
            t[a] = x.0[a] >> self.shift;
            l = (l << self.shift) | (x.0[a] & mask);
        }
        (t, l as u32)
    }

    #[inline]
    fn site_of(&self, t: [i64; 3], l: u32) -> ScaledSite {
        let mask = (1i64 << self.shift) - 1;
        let mut k = [0i64; 3];
        let mut rest = l as i64;
        for a in (0..self.d).rev() {
            k[a] = (t[a] << self.shift) | (rest & mask);
            rest >>= self.shift;
        }
        ScaledSite(k)
    }

    fn chunk_id(&mut self, t: [i64; 3]) -> usize {
        if let Some(&i) = self.index.get(&t) {
            return i;
        }
        let i = self.chunks.len();
        self.chunks.push(Chunk { status: vec![SUSCEPTIBLE; self.volume], ..Chunk::default() });
        self.index.insert(t, i);
        i
    }

    /// Ids of the chunks around t, allocating them.
    fn around(&mut self, t: [i64; 3]) -> Vec<usize> {
        let mut ids = vec![usize::MAX; 27];
        let r = |a: usize| if a < self.d { -1..=1 } else { 0..=0 };
        let (r0, r1, r2) = (r(0), r(1), r(2));
        for i in r0 {
            for j in r1.clone() {
                for k in r2.clone() {
                    ids[around_slot([i, j, k])] = self.chunk_id([t[0] + i, t[1] + j, t[2] + k]);
                }
            }
        }
        ids
    }

    /// Lists the owned edges of every site in chunk t and files each under
    /// both endpoints.
    fn forward(&mut self, t: [i64; 3]) {
        let id = self.chunk_id(t);
        if self.chunks[id].forwarded {
            return;
        }
        self.chunks[id].forwarded = true;
        let ids = self.around(t);
        let streams = std::mem::take(&mut self.streams);
        let expect = (self.volume as f64 * (self.oracle.cutoff * self.offsets.len() as f64 + 1.0)) as usize;
        self.chunks[id].pending.reserve(expect);
        for l in 0..self.volume as u32 {
            let x = self.site_of(t, l);
            for (stream, offs) in &streams {
                for (q, u) in self.oracle.listing(&x, *stream) {
                    let Some(e) = offs.get(q as usize) else { break };
                    let e32 = [e.0[0] as i32, e.0[1] as i32, e.0[2] as i32];
                    let u = u as f32;
                    self.chunks[id].pending.push((l, e32, u));
                    let (yt, yl) = self.locate(&x.add(*e));
                    let slot = around_slot([yt[0] - t[0], yt[1] - t[1], yt[2] - t[2]]);
                    self.chunks[ids[slot]].pending.push((yl, [-e32[0], -e32[1], -e32[2]], u));
                }
            }
        }
        self.streams = streams;
    }

    fn build(&mut self, t: [i64; 3]) -> usize {
        let id = self.chunk_id(t);
        if self.chunks[id].built {
            return id;
        }
        let ids = self.around(t);
        let d = self.d;
        let span = |a: usize| if a < d { -1..=1 } else { 0..=0 };
        for i in span(0) {
            for j in span(1) {
                for k in span(2) {
                    self.forward([t[0] + i, t[1] + j, t[2] + k]);
                }
            }
        }
        let entries = std::mem::take(&mut self.chunks[id].pending);
        let mut start = vec![0u32; self.volume + 1];
        for &(l, _, _) in &entries {
            start[l as usize + 1] += 1;
        }
        for i in 0..self.volume {
            start[i + 1] += start[i];
        }
        let mut fill = start.clone();
        let mut adj = vec![([0i32; 3], 0f32); entries.len()];
        for (l, e, u) in entries {
            adj[fill[l as usize] as usize] = (e, u);
            fill[l as usize] += 1;
        }
        let c = &mut self.chunks[id];
        c.adj = adj;
        c.adj_start = start;
        c.around = ids;
        c.built = true;
        id
    }

    #[inline]
    fn edge_open(&self, x: &ScaledSite, y: &ScaledSite, u: f32) -> bool {
        let p = self.oracle.p;
        let uf = u as f64;
        // U was rounded to f32; the exact value decides edges sitting at p.
        if (uf - p).abs() < 1e-6 {
            self.oracle.is_open(x, y)
        } else {
            uf < p
        }
    }

    /// For every open neighbour y of x whose status is `from`, sets it to
    /// `to` and appends y to `out`.
    pub fn advance_from(&mut self, x: &ScaledSite, from: u8, to: u8, out: &mut Vec<ScaledSite>) {
        if self.oracle.p > self.oracle.cutoff {
            let mut buf = Vec::new();
            self.open_from(x, &mut buf);
            for y in buf {
                if self.status(&y) == from {
                    self.set_status(&y, to);
                    out.push(y);
                }
            }
            return;
        }
        let (t, l) = self.locate(x);
        let id = self.build(t);
        let (a, b) = {
            let c = &self.chunks[id];
            (c.adj_start[l as usize] as usize, c.adj_start[l as usize + 1] as usize)
        };
        for i in a..b {
            let (e, u) = self.chunks[id].adj[i];
            let y = ScaledSite([x.0[0] + e[0] as i64, x.0[1] + e[1] as i64, x.0[2] + e[2] as i64]);
            if !self.edge_open(x, &y, u) {
                continue;
            }
            let (yt, yl) = self.locate(&y);
            let yid = self.chunks[id].around[around_slot([yt[0] - t[0], yt[1] - t[1], yt[2] - t[2]])];
            let st = &mut self.chunks[yid].status[yl as usize];
            if *st == from {
                *st = to;
                out.push(y);
            }
        }
    }

    /// Appends the open neighbours of x to `out`, in no particular order.
    pub fn open_from(&mut self, x: &ScaledSite, out: &mut Vec<ScaledSite>) {
        if self.oracle.p > self.oracle.cutoff {
            out.extend(self.offsets.iter().map(|e| x.add(*e)).filter(|y| self.oracle.is_open(x, y)));
            return;
        }
        let (t, l) = self.locate(x);
        let id = self.build(t);
        let c = &self.chunks[id];
        let (a, b) = (c.adj_start[l as usize] as usize, c.adj_start[l as usize + 1] as usize);
        for &(e, u) in &c.adj[a..b] {
            let y = ScaledSite([x.0[0] + e[0] as i64, x.0[1] + e[1] as i64, x.0[2] + e[2] as i64]);
            if self.edge_open(x, &y, u) {
                out.push(y);
            }
        }
    }

    pub fn status(&self, x: &ScaledSite) -> u8 {
        let (t, l) = self.locate(x);
        self.index.get(&t).map_or(SUSCEPTIBLE, |&i| self.chunks[i].status[l as usize])
    }

    pub fn set_status(&mut self, x: &ScaledSite, v: u8) {
        let (t, l) = self.locate(x);
        let id = self.chunk_id(t);
        self.chunks[id].status[l as usize] = v;
    }
}

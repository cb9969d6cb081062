//! Geometry of the fine lattice Z^d/R in integer scaled coordinates.
//!
//! A site x is stored as the integer vector k = xR. Unused coordinates (the
//! third one when d = 2) are always zero.

use rand::Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension and range of the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeParams {
    d: usize,
    r: i64,
}

impl LatticeParams {
    pub fn new(d: usize, r: i64) -> Result<Self> {
        if d != 2 && d != 3 {
            return Err(Error::InvalidParam(format!("d must be 2 or 3, got {d}")));
        }
        if r < 1 {
            return Err(Error::InvalidParam(format!("R must be >= 1, got {r}")));
        }
        Ok(Self { d, r })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn range(&self) -> i64 {
        self.r
    }

    /// R^{d-1}.
    pub fn r_pow_dm1(&self) -> f64 {
        (self.r as f64).powi(self.d as i32 - 1)
    }

    /// Side of the neighbourhood box, 2R+1.
    pub fn side(&self) -> u64 {
        2 * self.r as u64 + 1
    }

    pub fn check_site(&self, a: &ScaledSite) -> Result<()> {
        if self.d == 2 && a.0[2] != 0 {
            return Err(Error::DimensionMismatch(format!(
                "site {:?} has a third coordinate but d = 2",
                a.0
            )));
        }
        Ok(())
    }

    /// Offset of N(0) with index `i` in 0..V(R), in lexicographic order.
    pub fn offset(&self, i: u64) -> ScaledSite {
        let side = self.side();
        let centre = (side.pow(self.d as u32) - 1) / 2;
        let mut j = if i < centre { i } else { i + 1 };
        let mut k = [0i64; 3];
        for axis in (0..self.d).rev() {
            k[axis] = (j % side) as i64 - self.r;
            j /= side;
        }
        ScaledSite(k)
    }

    /// All offsets of N(0) in lexicographic order.
    pub fn offsets(&self) -> Vec<ScaledSite> {
        (0..volume(self)).map(|i| self.offset(i)).collect()
    }
}

/// A site x = k/R of the fine lattice.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct ScaledSite(pub [i64; 3]);

impl ScaledSite {
    pub const ORIGIN: ScaledSite = ScaledSite([0, 0, 0]);

    /// Builds a site from 2 or 3 scaled coordinates.
    pub fn new(k: &[i64]) -> Result<Self> {
        match k.len() {
            2 => Ok(ScaledSite([k[0], k[1], 0])),
            3 => Ok(ScaledSite([k[0], k[1], k[2]])),
            n => Err(Error::DimensionMismatch(format!("{n} coordinates"))),
        }
    }

    pub fn k2(a: i64, b: i64) -> Self {
        ScaledSite([a, b, 0])
    }

    pub fn k3(a: i64, b: i64, c: i64) -> Self {
        ScaledSite([a, b, c])
    }

    pub fn coords(&self, d: usize) -> &[i64] {
        &self.0[..d]
    }

    #[inline]
    pub fn add(self, o: ScaledSite) -> ScaledSite {
        ScaledSite([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    #[inline]
    pub fn sub(self, o: ScaledSite) -> ScaledSite {
        ScaledSite([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }

    pub fn neg(self) -> ScaledSite {
        ScaledSite([-self.0[0], -self.0[1], -self.0[2]])
    }

    pub fn sup_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn l1_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).sum()
    }

    /// Unscaled coordinates x = k/R.
    pub fn position(&self, params: &LatticeParams) -> Vec<f64> {
        let r = params.range() as f64;
        self.coords(params.dim()).iter().map(|&c| c as f64 / r).collect()
    }

    /// Squared Euclidean norm of x = k/R.
    pub fn norm2_unscaled(&self, params: &LatticeParams) -> f64 {
        let r = params.range() as f64;
        let s: i64 = self.0.iter().map(|c| c * c).sum();
        s as f64 / (r * r)
    }
}

/// Closed sup-norm box Q_M(center) in unscaled units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BoxSpec {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidParam(format!("box radius {radius} must be > 0")));
        }
        Ok(Self { center, radius })
    }

    /// Box of radius M centred at the origin of Z^d.
    pub fn centered(d: usize, radius: f64) -> Result<Self> {
        Self::new(vec![0.0; d], radius)
    }

    /// Inclusive range of scaled coordinates k on `axis` with |k/R - c| <= M.
    pub fn axis_range(&self, axis: usize, r: i64) -> Option<(i64, i64)> {
        let c = self.center[axis];
        let rf = r as f64;
        let inside = |k: i64| (k as f64 / rf - c).abs() <= self.radius;
        let mut lo = ((c - self.radius) * rf).floor() as i64 - 1;
        let mut hi = ((c + self.radius) * rf).ceil() as i64 + 1;
        while lo <= hi && !inside(lo) {
            lo += 1;
        }
        while hi >= lo && !inside(hi) {
            hi -= 1;
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Per-axis scaled ranges; `None` when the box holds no lattice point.
    pub fn lattice_ranges(&self, params: &LatticeParams) -> Option<[(i64, i64); 3]> {
        let mut out = [(0, 0); 3];
        for (axis, slot) in out.iter_mut().enumerate().take(params.dim()) {
            *slot = self.axis_range(axis, params.range())?;
        }
        Some(out)
    }
}

/// Unordered neighbour pair, stored with the smaller endpoint first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    lo: ScaledSite,
    hi: ScaledSite,
}

impl Edge {
    pub fn new(a: ScaledSite, b: ScaledSite, params: &LatticeParams) -> Result<Self> {
        if !is_neighbor(&a, &b, params)? {
            return Err(Error::NotNeighbors(a.0, b.0));
        }
        Ok(Self::canonical(a, b))
    }

    /// Canonical form without the neighbour check.
    #[inline]
    pub fn canonical(a: ScaledSite, b: ScaledSite) -> Self {
        if a <= b {
            Edge { lo: a, hi: b }
        } else {
            Edge { lo: b, hi: a }
        }
    }

    pub fn endpoints(&self) -> (ScaledSite, ScaledSite) {
        (self.lo, self.hi)
    }
}

/// Finite measure on sites with nonnegative integer weights.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparseCounts {
    map: FxHashMap<ScaledSite, u64>,
}

impl SparseCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_sites<I: IntoIterator<Item = ScaledSite>>(sites: I) -> Self {
        let mut c = Self::new();
        for s in sites {
            c.add(s, 1);
        }
        c
    }

    pub fn add(&mut self, s: ScaledSite, n: u64) {
        if n > 0 {
            *self.map.entry(s).or_insert(0) += n;
        }
    }

    /// Sets the count at `s`, removing the entry when `n == 0`.
    pub fn set(&mut self, s: ScaledSite, n: u64) {
        if n == 0 {
            self.map.remove(&s);
        } else {
            self.map.insert(s, n);
        }
    }

    pub fn get(&self, s: &ScaledSite) -> u64 {
        self.map.get(s).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.map.values().sum()
    }

    pub fn support_size(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ScaledSite, &u64)> {
        self.map.iter()
    }

    /// Entries in lexicographic site order. Use this whenever iteration order
    /// feeds a random number generator.
    pub fn sorted(&self) -> Vec<(ScaledSite, u64)> {
        let mut v: Vec<_> = self.map.iter().map(|(s, c)| (*s, *c)).collect();
        v.sort_unstable();
        v
    }

    pub fn merge(&mut self, other: &SparseCounts) {
        for (s, c) in other.iter() {
            self.add(*s, *c);
        }
    }
}

/// V(R) = (2R+1)^d - 1.
pub fn volume(params: &LatticeParams) -> u64 {
    params.side().pow(params.dim() as u32) - 1
}

/// Whether 0 < ‖a - b‖_∞ ≤ R.
pub fn is_neighbor(a: &ScaledSite, b: &ScaledSite, params: &LatticeParams) -> Result<bool> {
    params.check_site(a)?;
    params.check_site(b)?;
    let n = a.sub(*b).sup_norm();
    Ok(n > 0 && n <= params.range())
}

/// `m` distinct neighbours of `a`, uniform over m-subsets of N(a).
pub fn sample_distinct_neighbors<G: Rng + ?Sized>(
    a: &ScaledSite,
    m: u64,
    params: &LatticeParams,
    rng: &mut G,
) -> Result<Vec<ScaledSite>> {
    let v = volume(params);
    if m > v {
        return Err(Error::TooManyNeighbors { requested: m, available: v });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let idx = rand::seq::index::sample(rng, v as usize, m as usize);
    Ok(idx.iter().map(|i| a.add(params.offset(i as u64))).collect())
}

/// Whether x = k/R lies in the closed box.
pub fn box_contains(b: &BoxSpec, a: &ScaledSite, params: &LatticeParams) -> bool {
    let r = params.range() as f64;
    (0..params.dim()).all(|i| (a.0[i] as f64 / r - b.center[i]).abs() <= b.radius)
}

/// sup over lattice x in `window` of Σ_{y ∈ N(x)} points(y).
pub fn neighborhood_sup_count(
    points: &SparseCounts,
    params: &LatticeParams,
    window: &BoxSpec,
) -> Result<u64> {
    neighborhood_sup(points, params, window).map(|(c, _)| c)
}

/// As [`neighborhood_sup_count`], also returning the lexicographically
/// smallest maximiser.
pub fn neighborhood_sup(
    points: &SparseCounts,
    params: &LatticeParams,
    window: &BoxSpec,
) -> Result<(u64, ScaledSite)> {
    let wr = window.lattice_ranges(params).ok_or(Error::EmptyWindow)?;
    let d = params.dim();
    let r = params.range();
    let window_min = ScaledSite([wr[0].0, wr[1].0, wr[2].0]);
    if points.is_empty() {
        return Ok((0, window_min));
    }
    // Only centres within R of some point can see anything.
    let mut cand = wr;
    for axis in 0..d {
        let lo = points.iter().map(|(s, _)| s.0[axis]).min().unwrap() - r;
        let hi = points.iter().map(|(s, _)| s.0[axis]).max().unwrap() + r;
        cand[axis] = (cand[axis].0.max(lo), cand[axis].1.min(hi));
        if cand[axis].0 > cand[axis].1 {
            return Ok((0, window_min));
        }
    }
    let mut cells: u128 = 1;
    for c in cand.iter().take(d) {
        cells *= (c.1 - c.0 + 1 + 2 * r) as u128;
    }
    let best = if cells <= 20_000_000 {
        sup_dense(points, params, cand)
    } else {
        sup_sparse(points, params, cand)
    };
    Ok(match best {
        Some(b) => b,
        None => (0, window_min),
    })
}

// Prefix sums over the candidate region dilated by R.
fn sup_dense(
    points: &SparseCounts,
    params: &LatticeParams,
    cand: [(i64, i64); 3],
) -> Option<(u64, ScaledSite)> {
    let d = params.dim();
    let r = params.range();
    let mut lo = [0i64; 3];
    let mut len = [1usize; 3];
    for a in 0..d {
        lo[a] = cand[a].0 - r;
        len[a] = (cand[a].1 - cand[a].0 + 1 + 2 * r) as usize;
    }
    // prefix array with one leading zero layer per axis
    let pl = [len[0] + 1, len[1] + 1, len[2] + 1];
    let idx = |i: usize, j: usize, l: usize| (i * pl[1] + j) * pl[2] + l;
    let mut pre = vec![0u64; pl[0] * pl[1] * pl[2]];
    for (s, &c) in points.iter() {
        let mut p = [1usize; 3];
        let mut inside = true;
        for a in 0..d {
            let off = s.0[a] - lo[a];
            if off < 0 || off >= len[a] as i64 {
                inside = false;
                break;
            }
            p[a] = off as usize + 1;
        }
        if inside {
            pre[idx(p[0], p[1], p[2])] += c;
        }
    }
    for axis in 0..3 {
        if pl[axis] == 2 && axis >= d {
            continue;
        }
        for i in 1..pl[0] {
            for j in 1..pl[1] {
                for l in 1..pl[2] {
                    let prev = match axis {
                        0 => idx(i - 1, j, l),
                        1 => idx(i, j - 1, l),
                        _ => idx(i, j, l - 1),
                    };
                    pre[idx(i, j, l)] += pre[prev];
                }
            }
        }
    }
    let box_sum = |a: [usize; 3], b: [usize; 3]| -> u64 {
        // inclusive cell ranges a..=b in 0-based cell indices
        let mut total: i128 = 0;
        for mask in 0..8u32 {
            let mut q = [0usize; 3];
            let mut sign = 1i128;
            let mut skip = false;
            for ax in 0..3 {
                if mask & (1 << ax) != 0 {
                    if a[ax] == 0 && ax < d {
                        skip = true;
                        break;
                    }
                    if ax >= d {
                        skip = true;
                        break;
                    }
                    q[ax] = a[ax];
                    sign = -sign;
                } else {
                    q[ax] = b[ax] + 1;
                }
            }
            if !skip {
                total += sign * pre[idx(q[0], q[1], q[2])] as i128;
            }
        }
        total as u64
    };
    let mut best: Option<(u64, ScaledSite)> = None;
    let ru = r as usize;
    for x0 in cand[0].0..=cand[0].1 {
        for x1 in cand[1].0..=cand[1].1 {
            for x2 in cand[2].0..=cand[2].1 {
                let x = [x0, x1, x2];
                let mut a = [0usize; 3];
                let mut b = [0usize; 3];
                for ax in 0..d {
                    let c = (x[ax] - lo[ax]) as usize;
                    a[ax] = c - ru;
                    b[ax] = c + ru;
                }
                let site = ScaledSite(x);
                let v = box_sum(a, b) - points.get(&site);
                if best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, site));
                }
            }
        }
    }
    best
}

fn sup_sparse(
    points: &SparseCounts,
    params: &LatticeParams,
    cand: [(i64, i64); 3],
) -> Option<(u64, ScaledSite)> {
    let offsets = params.offsets();
    let mut acc: FxHashMap<ScaledSite, u64> = FxHashMap::default();
    for (s, &c) in points.iter() {
        for e in &offsets {
            let x = s.add(*e);
            if (0..3).all(|a| x.0[a] >= cand[a].0 && x.0[a] <= cand[a].1) {
                *acc.entry(x).or_insert(0) += c;
            }
        }
    }
    let mut v: Vec<_> = acc.into_iter().collect();
    v.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.first().map(|(s, c)| (*c, *s))
}

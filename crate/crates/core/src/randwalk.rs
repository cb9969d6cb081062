//! Transition probabilities of the uniform-step walk on Z^d/R, its generator,
//! truncated potential kernels with exact corrections, majorant kernels and
//! the G-weight functional.
//!
//! Functions on sites are stored on dense [`Grid`]s in scaled coordinates.
//! One application of the transition operator, `(P f)(x) = (1/V) Σ_e f(x+e)`,
//! is computed by [`Grid::smooth`] as a separable box sum minus the centre.
//! Each one-dimensional box sum adds the pairs `f(c+j) + f(c-j)` in the same
//! order, so symmetric inputs stay exactly symmetric.

use std::cell::RefCell;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{volume, LatticeParams, ScaledSite};
use crate::numerics::{csum, power_exp_series};

/// Default ceiling on the number of cells of a single table.
pub const DEFAULT_CELL_BUDGET: u64 = 60_000_000;

/// Exponent of the f_a decay weight.
pub const ETA: f64 = 0.125;

/// Lattice plus drift θ and time-scale T.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub lattice: LatticeParams,
    pub theta: f64,
    pub t: f64,
}

impl RunParams {
    pub fn new(lattice: LatticeParams, theta: f64, t: f64) -> Result<Self> {
        if !(theta >= 0.0) || !theta.is_finite() {
            return Err(Error::InvalidParam(format!("theta must be >= 0, got {theta}")));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidParam(format!("T must be > 0, got {t}")));
        }
        let rp = Self { lattice, theta, t };
        if rp.p() > 1.0 {
            return Err(Error::InvalidParam(format!("p(R) = {} exceeds 1", rp.p())));
        }
        Ok(rp)
    }

    pub fn d(&self) -> usize {
        self.lattice.dim()
    }

    pub fn r(&self) -> i64 {
        self.lattice.range()
    }

    pub fn volume(&self) -> u64 {
        volume(&self.lattice)
    }

    /// θ / R^{d-1}.
    pub fn drift(&self) -> f64 {
        self.theta / self.lattice.r_pow_dm1()
    }

    /// p(R) = (1 + θ/R^{d-1}) / V(R).
    pub fn p(&self) -> f64 {
        (1.0 + self.drift()) / self.volume() as f64
    }

    /// T_θ^R = floor(T R^{d-1} / θ).
    pub fn t_theta_r(&self) -> Result<u64> {
        if self.theta <= 0.0 {
            return Err(Error::InvalidParam("T_theta^R needs theta > 0".into()));
        }
        Ok((self.t * self.lattice.r_pow_dm1() / self.theta).floor() as u64)
    }

    /// R_θ = sqrt(R^{d-1} / θ).
    pub fn r_theta(&self) -> Result<f64> {
        if self.theta <= 0.0 {
            return Err(Error::InvalidParam("R_theta needs theta > 0".into()));
        }
        Ok((self.lattice.r_pow_dm1() / self.theta).sqrt())
    }

    /// f_d(θ): √θ for d = 2, log θ for d = 3.
    pub fn f_d(&self) -> f64 {
        if self.d() == 2 {
            self.theta.sqrt()
        } else {
            self.theta.ln()
        }
    }

    /// β_d(R): log R for d = 2, 1 for d = 3.
    pub fn beta_d(&self) -> f64 {
        beta_d(&self.lattice)
    }

    /// Whether θ ≥ 100 and R ≥ 4θ. Recorded, never enforced.
    pub fn in_asymptotic_regime(&self) -> bool {
        self.theta >= 100.0 && self.r() as f64 >= 4.0 * self.theta
    }
}

pub fn beta_d(lattice: &LatticeParams) -> f64 {
    if lattice.dim() == 2 {
        (lattice.range() as f64).ln()
    } else {
        1.0
    }
}

/// A real function on sites.
pub trait SiteFunction {
    /// Value at `s`; errors when `s` is outside the region where the function
    /// is known.
    fn value(&self, s: &ScaledSite) -> Result<f64>;

    /// (1/V) Σ_{e ∈ N(0)} f(y + e).
    fn neighbor_mean(&self, y: &ScaledSite, lattice: &LatticeParams) -> Result<f64> {
        let v = volume(lattice);
        let mut vals = Vec::with_capacity(v as usize);
        for i in 0..v {
            vals.push(self.value(&y.add(lattice.offset(i)))?);
        }
        Ok(csum(vals) / v as f64)
    }

    /// (1/V) Σ_{e ∈ N(0)} f(y + e)^2.
    fn neighbor_mean_sq(&self, y: &ScaledSite, lattice: &LatticeParams) -> Result<f64> {
        let v = volume(lattice);
        let mut vals = Vec::with_capacity(v as usize);
        for i in 0..v {
            let f = self.value(&y.add(lattice.offset(i)))?;
            vals.push(f * f);
        }
        Ok(csum(vals) / v as f64)
    }
}

impl<T: SiteFunction + ?Sized> SiteFunction for &T {
    fn value(&self, s: &ScaledSite) -> Result<f64> {
        (**self).value(s)
    }
}

/// Function equal to a constant everywhere.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl SiteFunction for Constant {
    fn value(&self, _: &ScaledSite) -> Result<f64> {
        Ok(self.0)
    }
}

/// Finitely supported function, zero off its map.
#[derive(Clone, Debug, Default)]
pub struct FiniteSupport(pub FxHashMap<ScaledSite, f64>);

impl SiteFunction for FiniteSupport {
    fn value(&self, s: &ScaledSite) -> Result<f64> {
        Ok(self.0.get(s).copied().unwrap_or(0.0))
    }
}

/// Wraps a closure defined on all sites.
pub struct FnSite<F>(pub F);

impl<F: Fn(&ScaledSite) -> f64> SiteFunction for FnSite<F> {
    fn value(&self, s: &ScaledSite) -> Result<f64> {
        Ok((self.0)(s))
    }
}

/// Dense table over a product window of scaled coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    d: usize,
    lo: [i64; 3],
    len: [usize; 3],
    data: Vec<f64>,
}

impl Grid {
    /// Zero table on the sup-norm ball of scaled radius `radius` around 0.
    pub fn centered(d: usize, radius: i64) -> Self {
        let mut lo = [0; 3];
        let mut len = [1; 3];
        for a in 0..d {
            lo[a] = -radius;
            len[a] = (2 * radius + 1) as usize;
        }
        Self::zeros(d, lo, len)
    }

    pub fn zeros(d: usize, lo: [i64; 3], len: [usize; 3]) -> Self {
        let n = len[0] * len[1] * len[2];
        Grid { d, lo, len, data: vec![0.0; n] }
    }

    /// Indicator of a single site.
    pub fn delta(d: usize, at: ScaledSite) -> Self {
        let mut g = Self::zeros(d, at.0, [1, 1, 1]);
        g.data[0] = 1.0;
        g
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn cells(&self) -> usize {
        self.data.len()
    }

    pub fn bounds(&self) -> ([i64; 3], [usize; 3]) {
        (self.lo, self.len)
    }

    #[inline]
    fn index(&self, s: &ScaledSite) -> Option<usize> {
        let mut idx = 0usize;
        for a in 0..3 {
            let off = s.0[a] - self.lo[a];
            if off < 0 || off as usize >= self.len[a] {
                return None;
            }
            idx = idx * self.len[a] + off as usize;
        }
        Some(idx)
    }

    fn site_of(&self, mut idx: usize) -> ScaledSite {
        let mut k = [0i64; 3];
        for a in (0..3).rev() {
            k[a] = self.lo[a] + (idx % self.len[a]) as i64;
            idx /= self.len[a];
        }
        ScaledSite(k)
    }

    pub fn get(&self, s: &ScaledSite) -> Option<f64> {
        self.index(s).map(|i| self.data[i])
    }

    pub fn contains(&self, s: &ScaledSite) -> bool {
        self.index(s).is_some()
    }

    pub fn set(&mut self, s: &ScaledSite, v: f64) -> Result<()> {
        match self.index(s) {
            Some(i) => {
                self.data[i] = v;
                Ok(())
            }
            None => Err(Error::OutsideWindow(s.0)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ScaledSite, f64)> + '_ {
        self.data.iter().enumerate().map(|(i, v)| (self.site_of(i), *v))
    }

    pub fn sum(&self) -> f64 {
        csum(self.data.iter().copied())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Copy padded with zeros by `r` on each used axis.
    pub fn dilate(&self, r: i64) -> Grid {
        let mut lo = self.lo;
        let mut len = self.len;
        for a in 0..self.d {
            lo[a] -= r;
            len[a] += 2 * r as usize;
        }
        let mut out = Grid::zeros(self.d, lo, len);
        for (i, v) in self.data.iter().enumerate() {
            if *v != 0.0 {
                let s = self.site_of(i);
                let j = out.index(&s).unwrap();
                out.data[j] = *v;
            }
        }
        out
    }

    /// Restriction to the sup-norm ball of scaled radius `radius` around 0;
    /// cells not stored here become zero.
    pub fn crop_centered(&self, radius: i64) -> Grid {
        let mut out = Grid::centered(self.d, radius);
        for i in 0..out.data.len() {
            let s = out.site_of(i);
            if let Some(v) = self.get(&s) {
                out.data[i] = v;
            }
        }
        out
    }

    fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Pointwise a·self + b·other on identical windows.
    fn axpby(&self, a: f64, other: &Grid, b: f64) -> Grid {
        assert_eq!((self.lo, self.len), (other.lo, other.len));
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Grid { d: self.d, lo: self.lo, len: self.len, data }
    }

    fn box_sum_axis(&self, axis: usize, r: usize) -> Grid {
        let stride: usize = self.len[axis + 1..].iter().product();
        let la = self.len[axis];
        let outer: usize = self.len[..axis].iter().product();
        let mut out = vec![0.0; self.data.len()];
        let src = &self.data;
        for o in 0..outer {
            let base = o * la * stride;
            for i in 0..la {
                let dst = base + i * stride;
                out[dst..dst + stride].copy_from_slice(&src[dst..dst + stride]);
                for j in 1..=r {
                    let up = (i + j < la).then(|| base + (i + j) * stride);
                    let dn = (i >= j).then(|| base + (i - j) * stride);
                    match (up, dn) {
                        (Some(u), Some(w)) => {
                            for t in 0..stride {
                                out[dst + t] += src[u + t] + src[w + t];
                            }
                        }
                        (Some(u), None) => {
                            for t in 0..stride {
                                out[dst + t] += src[u + t] + 0.0;
                            }
                        }
                        (None, Some(w)) => {
                            for t in 0..stride {
                                out[dst + t] += 0.0 + src[w + t];
                            }
                        }
                        (None, None) => {}
                    }
                }
            }
        }
        Grid { d: self.d, lo: self.lo, len: self.len, data: out }
    }

    /// P f on the window dilated by R, treating f as zero off its window.
    pub fn smooth(&self, lattice: &LatticeParams) -> Grid {
        let r = lattice.range();
        let v = volume(lattice) as f64;
        let g = self.dilate(r);
        let mut b = g.clone();
        for axis in 0..self.d {
            b = b.box_sum_axis(axis, r as usize);
        }
        for (x, c) in b.data.iter_mut().zip(&g.data) {
            *x = (*x - *c) / v;
        }
        b
    }
}

impl SiteFunction for Grid {
    fn value(&self, s: &ScaledSite) -> Result<f64> {
        self.get(s).ok_or(Error::OutsideWindow(s.0))
    }
}

/// p_1(k): 1/V on N(0), else 0.
pub fn p1(k: &ScaledSite, lattice: &LatticeParams) -> f64 {
    let n = k.sup_norm();
    if n > 0 && n <= lattice.range() {
        1.0 / volume(lattice) as f64
    } else {
        0.0
    }
}

/// p_n on its full support, the sup-norm ball of scaled radius nR.
#[derive(Clone, Debug)]
pub struct TransitionTable {
    pub n: u64,
    pub grid: Grid,
}

impl TransitionTable {
    /// p_n(k), zero off the support.
    pub fn value(&self, k: &ScaledSite) -> f64 {
        self.grid.get(k).unwrap_or(0.0)
    }
}

impl SiteFunction for TransitionTable {
    fn value(&self, s: &ScaledSite) -> Result<f64> {
        Ok(TransitionTable::value(self, s))
    }
}

fn check_budget(d: usize, radius: i64, budget: u64) -> Result<()> {
    let side = (2 * radius + 1) as f64;
    let cells = side.powi(d as i32);
    if cells > budget as f64 {
        return Err(Error::BudgetExceeded(format!(
            "{cells} cells needed for radius {radius}, budget {budget}"
        )));
    }
    Ok(())
}

/// Exact n-fold convolution of p_1 (p_0 = δ_0).
pub fn transition_exact(n: u64, lattice: &LatticeParams, budget: u64) -> Result<TransitionTable> {
    check_budget(lattice.dim(), n as i64 * lattice.range(), budget)?;
    let mut g = Grid::delta(lattice.dim(), ScaledSite::ORIGIN);
    for _ in 0..n {
        g = g.smooth(lattice);
    }
    Ok(TransitionTable { n, grid: g })
}

/// Iterator over p_0, p_1, p_2, ...
pub struct TransitionIter {
    lattice: LatticeParams,
    next: Option<Grid>,
}

impl TransitionIter {
    pub fn new(lattice: LatticeParams) -> Self {
        TransitionIter { next: Some(Grid::delta(lattice.dim(), ScaledSite::ORIGIN)), lattice }
    }
}

impl Iterator for TransitionIter {
    type Item = Grid;
    fn next(&mut self) -> Option<Grid> {
        let cur = self.next.take()?;
        self.next = Some(cur.smooth(&self.lattice));
        Some(cur)
    }
}

/// λ0 = (R(R+1)/R²)·((2R+1)^d / V(R)).
pub fn lambda0(lattice: &LatticeParams) -> f64 {
    let r = lattice.range() as f64;
    let v = volume(lattice) as f64;
    (r * (r + 1.0) / (r * r)) * ((v + 1.0) / v)
}

/// Local Gaussian approximation p̄_n(x) of p_n.
pub fn gaussian_approx(n: u64, k: &ScaledSite, lattice: &LatticeParams) -> f64 {
    let d = lattice.dim() as f64;
    let r = lattice.range() as f64;
    let l0 = lambda0(lattice);
    let n = n as f64;
    let x2 = k.norm2_unscaled(lattice);
    (3.0 / l0).powf(d / 2.0)
        * (2.0 * std::f64::consts::PI).powf(-d / 2.0)
        * n.powf(-d / 2.0)
        * r.powf(-d)
        * (-3.0 * x2 / (2.0 * n * l0)).exp()
}

/// n^{d/2+1} R^d sup_k |p_n(k) - p̄_n(k)| over the support of p_n.
pub fn gaussian_scaled_error(n: u64, lattice: &LatticeParams, budget: u64) -> Result<f64> {
    let table = transition_exact(n, lattice, budget)?;
    let d = lattice.dim() as f64;
    let scale = (n as f64).powf(d / 2.0 + 1.0) * (lattice.range() as f64).powf(d);
    let sup = table
        .grid
        .iter()
        .map(|(k, v)| (v - gaussian_approx(n, &k, lattice)).abs())
        .fold(0.0, f64::max);
    Ok(scale * sup)
}

/// (p_a * p_b)(k) by direct double sum over both supports.
pub fn convolve(a: &TransitionTable, b: &TransitionTable) -> FxHashMap<ScaledSite, f64> {
    let mut out: FxHashMap<ScaledSite, f64> = FxHashMap::default();
    let bs: Vec<(ScaledSite, f64)> = b.grid.iter().filter(|(_, v)| *v != 0.0).collect();
    for (x, va) in a.grid.iter().filter(|(_, v)| *v != 0.0) {
        for (y, vb) in &bs {
            *out.entry(x.add(*y)).or_insert(0.0) += va * vb;
        }
    }
    out
}

/// L f(x) = (1/V) Σ_e (f(x+e) - f(x)).
pub fn generator_apply<F: SiteFunction + ?Sized>(
    f: &F,
    x: &ScaledSite,
    lattice: &LatticeParams,
) -> Result<f64> {
    let fx = f.value(x)?;
    let v = volume(lattice);
    let mut diffs = Vec::with_capacity(v as usize);
    for i in 0..v {
        diffs.push(f.value(&x.add(lattice.offset(i)))? - fx);
    }
    Ok(csum(diffs) / v as f64)
}

/// Which kernel a [`KernelTable`] stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Phi,
    G,
    FEta,
    Psi,
}

/// Truncated kernel on a finite window around its anchor, with the exact
/// leftover term of its generator identity.
///
/// Tables are stored relative to the anchor, so [`KernelTable::with_anchor`]
/// is cheap.
#[derive(Clone, Debug)]
pub struct KernelTable {
    pub kind: KernelKind,
    pub anchor: ScaledSite,
    pub m: u64,
    pub params: RunParams,
    values: std::sync::Arc<Grid>,
    correction: std::sync::Arc<Grid>,
    source: Option<std::sync::Arc<Grid>>,
    /// Bound or estimate of the discarded series tail at the anchor.
    pub tail_estimate: f64,
}

impl KernelTable {
    pub fn with_anchor(&self, a: ScaledSite) -> KernelTable {
        KernelTable { anchor: a, ..self.clone() }
    }

    /// Truncated kernel value at x.
    pub fn value_at(&self, x: &ScaledSite) -> Result<f64> {
        self.values.get(&x.sub(self.anchor)).ok_or(Error::OutsideWindow(x.0))
    }

    /// The leftover term: R·V·p_{m+1}(x-a) for φ, V·e^{-mθ/R}·p_{m+1}(x-a) for
    /// g, and P^{m+1} f (x) for ψ.
    pub fn correction_at(&self, x: &ScaledSite) -> Result<f64> {
        self.correction.get(&x.sub(self.anchor)).ok_or(Error::OutsideWindow(x.0))
    }

    /// The source f of a ψ table at x.
    pub fn source_at(&self, x: &ScaledSite) -> Result<f64> {
        match &self.source {
            Some(s) => s.get(&x.sub(self.anchor)).ok_or(Error::OutsideWindow(x.0)),
            None => Err(Error::InvalidParam("table has no source term".into())),
        }
    }

    pub fn correction_fn(&self) -> impl SiteFunction + '_ {
        Correction(self)
    }

    /// Scaled sup-norm radius of the stored window.
    pub fn window_radius(&self) -> i64 {
        let (lo, _) = self.values.bounds();
        -lo[0]
    }

    /// Grid of values relative to the anchor.
    pub fn values_grid(&self) -> &Grid {
        &self.values
    }
}

impl SiteFunction for KernelTable {
    fn value(&self, s: &ScaledSite) -> Result<f64> {
        self.value_at(s)
    }
}

struct Correction<'a>(&'a KernelTable);

impl SiteFunction for Correction<'_> {
    fn value(&self, s: &ScaledSite) -> Result<f64> {
        self.0.correction_at(s)
    }
}

/// Accumulates Σ_{n=1}^m w_n p_n on a window and returns it with p_{m+1}.
fn weighted_transition_sum(
    lattice: &LatticeParams,
    m: u64,
    window: i64,
    budget: u64,
    weight: impl Fn(u64) -> f64,
) -> Result<(Grid, Grid)> {
    check_budget(lattice.dim(), (m as i64 + 1) * lattice.range(), budget)?;
    let mut acc = Grid::centered(lattice.dim(), window);
    let mut it = TransitionIter::new(*lattice).skip(1);
    for n in 1..=m {
        let pn = it.next().unwrap();
        let w = weight(n);
        for i in 0..acc.data.len() {
            let s = acc.site_of(i);
            if let Some(v) = pn.get(&s) {
                acc.data[i] += w * v;
            }
        }
    }
    let pm1 = it.next().unwrap().crop_centered(window);
    Ok((acc, pm1))
}

/// φ_a^{(m)} = R·V·Σ_{n=1}^m p_n(· - a) on the window of scaled radius
/// `window` around a (d = 3).
///
/// Satisfies L φ^{(m)} = R·V·p_{m+1}(· - a) - R·1_{N(a)}.
pub fn kernel_phi(a: ScaledSite, m: u64, window: i64, params: &RunParams) -> Result<KernelTable> {
    if params.d() != 3 {
        return Err(Error::DimensionMismatch("kernel_phi needs d = 3".into()));
    }
    params.lattice.check_site(&a)?;
    let rv = params.r() as f64 * params.volume() as f64;
    let (mut vals, mut corr) =
        weighted_transition_sum(&params.lattice, m, window, DEFAULT_CELL_BUDGET, |_| 1.0)?;
    vals.map_inplace(|x| rv * x);
    let sup_next = corr.max();
    corr.map_inplace(|x| rv * x);
    // Local CLT: Σ_{n>m} sup p_n ≈ sup p_{m+1} (m+1)^{3/2} · 2/√m.
    let mf = m.max(1) as f64;
    let tail = rv * sup_next * (mf + 1.0).powf(1.5) * 2.0 / mf.sqrt();
    Ok(KernelTable {
        kind: KernelKind::Phi,
        anchor: a,
        m,
        params: *params,
        values: vals.into(),
        correction: corr.into(),
        source: None,
        tail_estimate: tail,
    })
}

/// Smallest m with e^{-(m+1)θ/R}/(1 - e^{-θ/R}) < tol. Since sup p_n ≤ 1/V for
/// n ≥ 1, this bounds the discarded tail of g_a.
pub fn kernel_g_depth_for_tail(params: &RunParams, tol: f64) -> Result<u64> {
    if params.theta <= 0.0 {
        return Err(Error::InvalidParam("kernel_g needs theta > 0".into()));
    }
    let q = params.theta / params.r() as f64;
    let denom = 1.0 - (-q).exp();
    let m = ((-(tol * denom).ln()) / q - 1.0).ceil().max(0.0);
    Ok(m as u64)
}

/// g_a^{(m)} = V·Σ_{n=1}^m e^{-nθ/R} p_n(· - a) on the window of scaled radius
/// `window` around a (d = 2).
///
/// Satisfies L g^{(m)} = (e^{θ/R} - 1) g^{(m)} - 1_{N(a)} + V e^{-mθ/R} p_{m+1}(· - a).
pub fn kernel_g(a: ScaledSite, m: u64, window: i64, params: &RunParams) -> Result<KernelTable> {
    if params.d() != 2 {
        return Err(Error::DimensionMismatch("kernel_g needs d = 2".into()));
    }
    if params.theta <= 0.0 {
        return Err(Error::InvalidParam("kernel_g needs theta > 0".into()));
    }
    params.lattice.check_site(&a)?;
    let v = params.volume() as f64;
    let q = params.theta / params.r() as f64;
    let (mut vals, mut corr) =
        weighted_transition_sum(&params.lattice, m, window, DEFAULT_CELL_BUDGET, |n| {
            (-(n as f64) * q).exp()
        })?;
    vals.map_inplace(|x| v * x);
    let sup_next = corr.max();
    let cm = v * (-(m as f64) * q).exp();
    corr.map_inplace(|x| cm * x);
    let tail = v * sup_next * (-((m + 1) as f64) * q).exp() / (1.0 - (-q).exp());
    Ok(KernelTable {
        kind: KernelKind::G,
        anchor: a,
        m,
        params: *params,
        values: vals.into(),
        correction: corr.into(),
        source: None,
        tail_estimate: tail,
    })
}

/// f_a(y) = Σ_k k^{-2-η} e^{-|y-a|²/(64k)} for |y - a|² given in unscaled units.
pub fn f_eta_value(dist2: f64) -> f64 {
    power_exp_series(2.0 + ETA, dist2 / 64.0)
}

/// f_a restricted to the window of scaled radius `window` around a.
pub fn kernel_f_eta(a: ScaledSite, window: i64, params: &RunParams) -> Result<KernelTable> {
    params.lattice.check_site(&a)?;
    let d = params.d();
    let mut g = Grid::centered(d, window);
    let r2 = (params.r() * params.r()) as f64;
    let mut memo: FxHashMap<i64, f64> = FxHashMap::default();
    for i in 0..g.data.len() {
        let s = g.site_of(i);
        let k2: i64 = s.0.iter().map(|c| c * c).sum();
        let v = *memo.entry(k2).or_insert_with(|| f_eta_value(k2 as f64 / r2));
        g.data[i] = v;
    }
    let zero = Grid::centered(d, window);
    Ok(KernelTable {
        kind: KernelKind::FEta,
        anchor: a,
        m: 0,
        params: *params,
        values: g.into(),
        correction: zero.into(),
        source: None,
        tail_estimate: 0.0,
    })
}

/// ψ^{(m)} = Σ_{n=0}^m P^n f for f = f_a restricted to the window of scaled
/// radius `f_window` around a (d = 3). The table covers radius
/// `f_window + (m+1)R`, the full support of every stored term.
///
/// Satisfies L ψ^{(m)} = P^{m+1} f - f.
pub fn kernel_psi(a: ScaledSite, m: u64, f_window: i64, params: &RunParams) -> Result<KernelTable> {
    if params.d() != 3 {
        return Err(Error::DimensionMismatch("green kernel needs d = 3".into()));
    }
    let outer = f_window + (m as i64 + 1) * params.r();
    check_budget(3, outer, DEFAULT_CELL_BUDGET)?;
    let f = kernel_f_eta(a, f_window, params)?;
    let f_grid = f.values.crop_centered(outer);
    let mut acc = f_grid.clone();
    let mut cur = (*f.values).clone();
    for _ in 1..=m {
        cur = cur.smooth(&params.lattice);
        let c = cur.crop_centered(outer);
        acc = acc.axpby(1.0, &c, 1.0);
    }
    let next = cur.smooth(&params.lattice).crop_centered(outer);
    // Local CLT tail: Σ_{n>m} P^n f ≤ |f|_1 Σ_{n>m} sup p_n.
    let mf = m.max(1) as f64;
    let sup_p = {
        let p = transition_exact(m + 1, &params.lattice, DEFAULT_CELL_BUDGET)?;
        p.grid.max()
    };
    let tail = f.values.sum() * sup_p * (mf + 1.0).powf(1.5) * 2.0 / mf.sqrt();
    Ok(KernelTable {
        kind: KernelKind::Psi,
        anchor: a,
        m,
        params: *params,
        values: acc.into(),
        correction: next.into(),
        source: Some(f_grid.into()),
        tail_estimate: tail,
    })
}

/// ψ^{(m)}(x) together with the table's tail estimate.
pub fn green_apply(table: &KernelTable, x: &ScaledSite) -> Result<(f64, f64)> {
    if table.kind != KernelKind::Psi {
        return Err(Error::InvalidParam("green_apply needs a psi table".into()));
    }
    Ok((table.value_at(x)?, table.tail_estimate))
}

/// Majorant kernel g_{u,d}(x), u in unscaled units.
pub fn majorant_g(u: &[f64], x: &ScaledSite, params: &RunParams) -> Result<f64> {
    let d = params.d();
    if u.len() != d {
        return Err(Error::DimensionMismatch(format!("u has {} coordinates, d = {d}", u.len())));
    }
    let pos = x.position(&params.lattice);
    let dist2: f64 = pos.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
    majorant_g_dist2(dist2, params)
}

/// g_{u,d} as a function of |x - u|².
pub fn majorant_g_dist2(dist2: f64, params: &RunParams) -> Result<f64> {
    let c = dist2 / 32.0;
    if params.d() == 3 {
        return Ok(params.r() as f64 * power_exp_series(1.5, c));
    }
    if params.theta <= 0.0 {
        return Err(Error::InvalidParam("g_{u,2} diverges at theta = 0".into()));
    }
    let q = params.theta / params.r() as f64;
    let ratio = (-q).exp();
    let peak = (c / q).sqrt();
    let mut acc = crate::numerics::CompensatedSum::new();
    let mut n = 1u64;
    loop {
        let nf = n as f64;
        let term = (-nf * q - c / nf).exp() / nf;
        acc.add(term);
        if nf > peak && term * ratio / (1.0 - ratio) < 1e-16 * acc.value() {
            break;
        }
        if n > 100_000_000 {
            break;
        }
        n += 1;
    }
    Ok(acc.value())
}

/// Memoised g_{u,d} for repeated evaluation on lattice sites and a grid of
/// integer points u.
pub struct MajorantCache {
    params: RunParams,
    memo: RefCell<FxHashMap<u64, f64>>,
}

impl MajorantCache {
    pub fn new(params: RunParams) -> Self {
        Self { params, memo: RefCell::new(FxHashMap::default()) }
    }

    pub fn eval(&self, u: &[f64], x: &ScaledSite) -> Result<f64> {
        let pos = x.position(&self.params.lattice);
        let dist2: f64 = pos.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
        let key = dist2.to_bits();
        if let Some(v) = self.memo.borrow().get(&key) {
            return Ok(*v);
        }
        let v = majorant_g_dist2(dist2, &self.params)?;
        self.memo.borrow_mut().insert(key, v);
        Ok(v)
    }
}

/// S(α, r) = Σ_k k^{-1-α} e^{-r/k} and r^α S(α, r).
pub fn series_bound_check(alpha: f64, r: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParam(format!("alpha must be > 0, got {alpha}")));
    }
    if !(r >= 1.0 / 64.0) {
        return Err(Error::InvalidParam(format!("r must be >= 1/64, got {r}")));
    }
    let s = power_exp_series(1.0 + alpha, r);
    Ok((s, r.powf(alpha) * s))
}

/// Input of [`g_weight`].
#[derive(Clone, Copy, Debug)]
pub enum WeightFn<'a> {
    /// φ ≡ c on every queried site.
    Constant(f64),
    /// Finitely supported φ stored on a grid, zero off it.
    Table(&'a Grid),
}

/// G(φ, n) = 3‖φ‖_∞ + Σ_{k=1}^n sup_y Σ_z φ(z) p_k(y - z).
pub fn g_weight(phi: WeightFn<'_>, n: u64, lattice: &LatticeParams) -> Result<f64> {
    match phi {
        WeightFn::Constant(c) => {
            if c < 0.0 {
                return Err(Error::NegativeFunction([0; 3]));
            }
            Ok(3.0 * c + n as f64 * c)
        }
        WeightFn::Table(g) => {
            if let Some((s, _)) = g.iter().find(|(_, v)| *v < 0.0) {
                return Err(Error::NegativeFunction(s.0));
            }
            let mut total = 3.0 * g.max().max(0.0);
            let mut cur = g.clone();
            for _ in 0..n {
                cur = cur.smooth(lattice);
                total += cur.max();
            }
            Ok(total)
        }
    }
}

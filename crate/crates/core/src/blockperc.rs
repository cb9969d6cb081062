//! Renormalisation blocks: the grid Γ = Z²₊ with its order, good events for an
//! epidemic segment, the occupied-site iteration, and oriented site
//! percolation on Γ.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::brw::{box_counts, thin_counts};
use crate::error::{Error, Result};
use crate::lattice::{box_contains, neighborhood_sup_count, BoxSpec, LatticeParams, ScaledSite, SparseCounts};
use crate::numerics::stream_seed;
use crate::randwalk::{MajorantCache, RunParams};
use crate::sir::{
    event_n_kappa, run_sir, run_with_immigration, EdgeOracle, ImmigrationRule, RuleAction,
    RuleContext, SiteSet, StopRule,
};

/// Largest ‖x‖₁ the block iteration will visit.
pub const MAX_GRID_BUDGET: u32 = 12;

/// A point of Γ = Z²₊.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSite(pub u32, pub u32);

impl GridSite {
    pub fn l1(&self) -> u64 {
        u64::from(self.0) + u64::from(self.1)
    }

    /// 1-based position in the order ≺.
    pub fn index(&self) -> u64 {
        let s = self.l1();
        s * (s + 1) / 2 + u64::from(self.0) + 1
    }

    /// Centre xR_θ of the block in unscaled coordinates.
    pub fn center(&self, d: usize, r_theta: f64) -> Vec<f64> {
        let mut c = vec![0.0; d];
        c[0] = f64::from(self.0) * r_theta;
        c[1] = f64::from(self.1) * r_theta;
        c
    }
}

impl Ord for GridSite {
    fn cmp(&self, other: &Self) -> Ordering {
        self.l1().cmp(&other.l1()).then(self.0.cmp(&other.0))
    }
}

impl PartialOrd for GridSite {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The i-th element of Γ under ≺ (i ≥ 1).
pub fn gamma_order(i: u64) -> Result<GridSite> {
    if i == 0 {
        return Err(Error::InvalidParam("grid index starts at 1".into()));
    }
    // Largest s with s(s+1)/2 < i.
    let mut s = ((((8 * (i - 1) + 1) as f64).sqrt() - 1.0) / 2.0) as u64;
    while s * (s + 1) / 2 >= i {
        s -= 1;
    }
    while (s + 1) * (s + 2) / 2 < i {
        s += 1;
    }
    let j = i - s * (s + 1) / 2 - 1;
    Ok(GridSite(j as u32, (s - j) as u32))
}

pub fn offspring(x: GridSite) -> [GridSite; 2] {
    [GridSite(x.0, x.1 + 1), GridSite(x.0 + 1, x.1)]
}

/// Parameters of the block events.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub t: f64,
    pub theta: f64,
    pub k: f64,
    pub kappa: f64,
    pub chi: f64,
    pub m: f64,
    pub m_tilde: u64,
}

impl BlockConfig {
    /// M̃ = ⌊M √(log f_d(θ))⌋ + 1 and κ = (4M̃ + 4)² χ.
    pub fn new(d: usize, t: f64, theta: f64, k: f64, chi: f64, m: f64, big_m: f64) -> Result<Self> {
        for (name, v) in [("T", t), ("theta", theta), ("K", k), ("chi", chi), ("m", m), ("M", big_m)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        let f = if d == 2 { theta.sqrt() } else { theta.ln() };
        if !(f > 1.0) {
            return Err(Error::InvalidParam(format!("log f_d(theta) must be positive, f_d = {f}")));
        }
        let m_tilde = (big_m * f.ln().sqrt()).floor() as u64 + 1;
        let kappa = ((4 * m_tilde + 4) as f64).powi(2) * chi;
        Ok(Self { t, theta, k, kappa, chi, m, m_tilde })
    }

    pub fn run_params(&self, lattice: LatticeParams) -> Result<RunParams> {
        RunParams::new(lattice, self.theta, self.t)
    }

    /// Target |η0| = ⌈R^{d-1} f_d(θ) / θ⌉.
    pub fn eta0_size(&self, lattice: &LatticeParams) -> Result<usize> {
        let rp = self.run_params(*lattice)?;
        Ok((lattice.r_pow_dm1() * rp.f_d() / self.theta).ceil().max(1.0) as usize)
    }
}

fn block_box(x: GridSite, radius_blocks: f64, rp: &RunParams) -> Result<BoxSpec> {
    let rt = rp.r_theta()?;
    BoxSpec::new(x.center(rp.d(), rt), radius_blocks * rt)
}

/// Outcome of an admissibility grid check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Admissibility {
    pub admissible: bool,
    pub worst_u: Vec<f64>,
    pub worst_value: f64,
    pub threshold: f64,
    /// Always true: only finitely many u were examined.
    pub surrogate: bool,
}

/// Integer points of the support's bounding box dilated by 2, plus one
/// distant anchor.
pub fn default_u_grid(measure: &SparseCounts, lattice: &LatticeParams) -> Vec<Vec<f64>> {
    let d = lattice.dim();
    let r = lattice.range() as f64;
    if measure.is_empty() {
        return vec![vec![0.0; d]];
    }
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for (s, _) in measure.iter() {
        for a in 0..d {
            let x = s.0[a] as f64 / r;
            lo[a] = lo[a].min(x.floor() as i64 - 2);
            hi[a] = hi[a].max(x.ceil() as i64 + 2);
        }
    }
    let mut out = Vec::new();
    let mut cur = lo;
    loop {
        out.push((0..d).map(|a| cur[a] as f64).collect());
        let mut a = 0;
        loop {
            if a == d {
                out.push((0..d).map(|a| (hi[a] + 100) as f64).collect());
                return out;
            }
            cur[a] += 1;
            if cur[a] <= hi[a] {
                break;
            }
            cur[a] = lo[a];
            a += 1;
        }
    }
}

/// Checks μ(g_{u,d}) ≤ m R^{d-1} / θ^{1/4} at every u of `u_grid`.
pub fn admissibility_check(
    measure: &SparseCounts,
    m: f64,
    params: &RunParams,
    u_grid: &[Vec<f64>],
) -> Result<Admissibility> {
    admissibility_with(measure, m, &MajorantCache::new(*params), params, u_grid)
}

fn admissibility_with(
    measure: &SparseCounts,
    m: f64,
    cache: &MajorantCache,
    params: &RunParams,
    u_grid: &[Vec<f64>],
) -> Result<Admissibility> {
    let threshold = m * params.lattice.r_pow_dm1() / params.theta.powf(0.25);
    let mut worst_u = vec![0.0; params.d()];
    let mut worst_value = 0.0;
    let atoms = measure.sorted();
    for u in u_grid {
        let mut v = 0.0;
        for (s, c) in &atoms {
            v += *c as f64 * cache.eval(u, s)?;
        }
        if v > worst_value {
            worst_value = v;
            worst_u = u.clone();
        }
    }
    Ok(Admissibility { admissible: worst_value <= threshold, worst_u, worst_value, threshold, surrogate: true })
}

/// Checks the three clauses of the initial-condition recipe for block x.
pub fn validate_eta0(eta0: &SiteSet, x: GridSite, cfg: &BlockConfig, lattice: &LatticeParams) -> Result<()> {
    let rp = cfg.run_params(*lattice)?;
    let home = block_box(x, 1.0, &rp)?;
    if let Some(s) = eta0.iter().find(|s| !box_contains(&home, s, lattice)) {
        return Err(Error::InvalidParam(format!("eta0 site {:?} lies outside the block of {x:?}", s.0)));
    }
    let lo = lattice.r_pow_dm1() * rp.f_d() / cfg.theta;
    let n = eta0.len() as f64;
    if n < lo || n > lo + 1.0 {
        return Err(Error::InvalidParam(format!("|eta0| = {n} outside [{lo}, {}]", lo + 1.0)));
    }
    let cap = cfg.k * rp.beta_d();
    let counts = SparseCounts::from_sites(eta0.iter().copied());
    if let Some((y, c)) = box_counts(&counts, lattice).into_iter().find(|(_, c)| *c as f64 > cap) {
        return Err(Error::InvalidParam(format!("unit box {y:?} holds {c} > K beta_d = {cap} sites of eta0")));
    }
    Ok(())
}

/// Draws η0 uniformly among the sets satisfying the recipe, by rejection of
/// single sites.
pub fn build_eta0<G: Rng + ?Sized>(cfg: &BlockConfig, lattice: &LatticeParams, rng: &mut G) -> Result<SiteSet> {
    let rp = cfg.run_params(*lattice)?;
    let n = cfg.eta0_size(lattice)?;
    let home = block_box(GridSite(0, 0), 1.0, &rp)?;
    let ranges = home.lattice_ranges(lattice).ok_or(Error::EmptyWindow)?;
    let cap = cfg.k * rp.beta_d();
    let d = lattice.dim();
    let mut out = SiteSet::default();
    let mut per_box = rustc_hash::FxHashMap::default();
    let mut tries = 0u64;
    while out.len() < n {
        tries += 1;
        if tries > 1000 * n as u64 + 10_000 {
            return Err(Error::InvalidParam(format!("cannot place {n} sites with at most {cap} per unit box")));
        }
        let mut k = [0i64; 3];
        for a in 0..d {
            k[a] = rng.random_range(ranges[a].0..=ranges[a].1);
        }
        let s = ScaledSite(k);
        if out.contains(&s) {
            continue;
        }
        let y = crate::brw::unit_box_of(&s, lattice);
        let c: &mut u64 = per_box.entry(y).or_insert(0);
        if (*c + 1) as f64 > cap {
            continue;
        }
        *c += 1;
        out.insert(s);
    }
    validate_eta0(&out, GridSite(0, 0), cfg, lattice)?;
    Ok(out)
}

/// Indicators of the good events for one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodEvents {
    pub f1: bool,
    pub f2: bool,
    pub f3: bool,
    pub f4: bool,
    pub n_kappa: bool,
    pub sup_occupation: u64,
    pub sup_recovered: u64,
    /// Thinned terminal mass in each offspring box.
    pub thinned_mass: [u64; 2],
    pub terminal_mass: u64,
}

impl GoodEvents {
    pub fn all(&self) -> bool {
        self.f1 && self.f2 && self.f3 && self.f4
    }
}

/// Smallest cube containing every site, widened by one unit.
fn cover(sites: &SiteSet, lattice: &LatticeParams) -> Result<BoxSpec> {
    let d = lattice.dim();
    if sites.is_empty() {
        return BoxSpec::centered(d, 1.0);
    }
    let r = lattice.range() as f64;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for s in sites {
        for a in 0..d {
            lo[a] = lo[a].min(s.0[a] as f64 / r);
            hi[a] = hi[a].max(s.0[a] as f64 / r);
        }
    }
    let center: Vec<f64> = (0..d).map(|a| (lo[a] + hi[a]) / 2.0).collect();
    let radius = (0..d).map(|a| (hi[a] - lo[a]) / 2.0).fold(0.0, f64::max) + 1.0;
    BoxSpec::new(center, radius)
}

/// Sites of the set inside Q̃(z), taken from the thinned set in the order
/// 0, 1/R, -1/R, 2/R, ... coordinatewise and lexicographically.
fn select_in_box(thinned: &SiteSet, b: &BoxSpec, lattice: &LatticeParams, count: usize) -> Vec<ScaledSite> {
    let key = |k: i64| if k >= 0 { 2 * k as u64 } else { (-2 * k - 1) as u64 };
    let mut inside: Vec<ScaledSite> = thinned.iter().copied().filter(|s| box_contains(b, s, lattice)).collect();
    inside.sort_unstable_by_key(|s| [key(s.0[0]), key(s.0[1]), key(s.0[2])]);
    inside.truncate(count);
    inside
}

struct Terminal {
    thinned_mass: [u64; 2],
    f3: bool,
    f4: bool,
    selected: [Vec<ScaledSite>; 2],
}

fn judge_terminal(
    x: GridSite,
    y_t: &SiteSet,
    n0: usize,
    cfg: &BlockConfig,
    rp: &RunParams,
    cache: &MajorantCache,
) -> Result<Terminal> {
    let lattice = rp.lattice;
    let counts = SparseCounts::from_sites(y_t.iter().copied());
    let thinned_counts = thin_counts(&counts, cfg.k, &lattice)?;
    let thinned: SiteSet = thinned_counts.iter().map(|(s, _)| *s).collect();
    let mut out = Terminal { thinned_mass: [0; 2], f3: true, f4: true, selected: [Vec::new(), Vec::new()] };
    for (j, z) in offspring(x).into_iter().enumerate() {
        let b = block_box(z, 1.0, rp)?;
        let mass = thinned.iter().filter(|s| box_contains(&b, s, &lattice)).count();
        out.thinned_mass[j] = mass as u64;
        out.f3 &= mass >= n0;
        let restricted = SparseCounts::from_sites(y_t.iter().copied().filter(|s| box_contains(&b, s, &lattice)));
        let grid = default_u_grid(&restricted, &lattice);
        out.f4 &= admissibility_with(&restricted, cfg.m, cache, rp, &grid)?.admissible;
        out.selected[j] = select_in_box(&thinned, &b, &lattice, n0);
    }
    Ok(out)
}

/// Runs the epidemic from (η0, ρ0) for T_θ^R steps and evaluates the good
/// events of block x together with N(κ).
pub fn good_event_probe(
    eta0: &SiteSet,
    rho0: &SiteSet,
    x: GridSite,
    cfg: &BlockConfig,
    lattice: &LatticeParams,
    oracle: &EdgeOracle,
) -> Result<GoodEvents> {
    validate_eta0(eta0, x, cfg, lattice)?;
    let rp = cfg.run_params(*lattice)?;
    let horizon = rp.t_theta_r()?;
    let run = run_sir(eta0, rho0, oracle, lattice, horizon, &StopRule::None)?;
    let cumulative = run.cumulative(run.states.len() - 1);
    let outer = block_box(x, cfg.m_tilde as f64, &rp)?;
    let f1 = cumulative.iter().all(|s| box_contains(&outer, s, lattice));
    let occ = SparseCounts::from_sites(cumulative.iter().copied());
    let sup_occupation = neighborhood_sup_count(&occ, lattice, &cover(&cumulative, lattice)?)?;
    let f2 = sup_occupation as f64 <= cfg.chi * lattice.range() as f64;
    let last = run.states.last().expect("run has a state");
    let empty = SiteSet::default();
    let y_t = if last.generation == horizon { &last.infected } else { &empty };
    let cache = MajorantCache::new(rp);
    let term = judge_terminal(x, y_t, eta0.len(), cfg, &rp, &cache)?;
    let (n_kappa, sup_recovered) =
        event_n_kappa(&last.recovered, cfg.kappa, lattice, &cover(&last.recovered, lattice)?)?;
    Ok(GoodEvents {
        f1,
        f2,
        f3: term.f3,
        f4: term.f4,
        n_kappa,
        sup_occupation,
        sup_recovered,
        thinned_mass: term.thinned_mass,
        terminal_mass: y_t.len() as u64,
    })
}

/// Event frequencies over independent environments at p(R).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventFrequencies {
    pub trials: u64,
    pub f1: u64,
    pub f2: u64,
    pub f3: u64,
    pub f4: u64,
    pub all: u64,
    pub n_kappa: u64,
    /// Trials where F3 or N(κ) fails.
    pub f3_or_n_kappa_failure: u64,
}

pub fn good_event_frequencies(
    cfg: &BlockConfig,
    lattice: &LatticeParams,
    trials: u64,
    seed: u64,
) -> Result<EventFrequencies> {
    let p = cfg.run_params(*lattice)?.p();
    let probes: Vec<GoodEvents> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let s = stream_seed(seed, i);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
            let eta0 = build_eta0(cfg, lattice, &mut rng)?;
            let oracle = EdgeOracle::new(stream_seed(s, 1), p)?;
            good_event_probe(&eta0, &SiteSet::default(), GridSite(0, 0), cfg, lattice, &oracle)
        })
        .collect::<Result<_>>()?;
    let count = |f: &dyn Fn(&GoodEvents) -> bool| probes.iter().filter(|g| f(g)).count() as u64;
    Ok(EventFrequencies {
        trials,
        f1: count(&|g| g.f1),
        f2: count(&|g| g.f2),
        f3: count(&|g| g.f3),
        f4: count(&|g| g.f4),
        all: count(&|g| g.all()),
        n_kappa: count(&|g| g.n_kappa),
        f3_or_n_kappa_failure: count(&|g| !g.f3 || !g.n_kappa),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockCase {
    /// x(i) is an offspring of an occupied site.
    I,
    /// Skipped.
    II,
}

/// One visited grid site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStep {
    pub site: GridSite,
    pub case: BlockCase,
    /// τ_i.
    pub tau: u64,
    pub occupied: bool,
    pub restart_size: usize,
    pub carried_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRun {
    /// Ω in ≺-order.
    pub omega: Vec<GridSite>,
    pub steps: Vec<BlockStep>,
    pub budget: u32,
    pub eta0_size: usize,
    /// Largest sup_x |ρ* ∩ N(x)| seen at a segment end.
    pub sup_recovered: u64,
    pub kappa_r: f64,
}

impl BlockRun {
    pub fn is_occupied(&self, x: GridSite) -> bool {
        self.omega.binary_search(&x).is_ok()
    }
}

struct Segment {
    site: GridSite,
    start: u64,
    cumulative: SiteSet,
    violated: bool,
    /// Restart set still to be observed as Y_0.
    pending: Option<SiteSet>,
}

struct BlockRule<'a> {
    cfg: &'a BlockConfig,
    rp: RunParams,
    cache: MajorantCache,
    n0: usize,
    horizon: u64,
    budget: u32,
    next_index: u64,
    omega: Vec<GridSite>,
    w: SiteSet,
    segment: Option<Segment>,
    steps: Vec<BlockStep>,
    sup_recovered: u64,
    error: Option<Error>,
}

impl BlockRule<'_> {
    // Adds Y_n to the segment; true when τ(Y, x) has been reached.
    fn observe(&mut self, n: u64, y_n: &SiteSet) -> Result<bool> {
        let lattice = self.rp.lattice;
        let outer = block_box(self.segment.as_ref().unwrap().site, self.cfg.m_tilde as f64, &self.rp)?;
        let seg = self.segment.as_mut().unwrap();
        seg.cumulative.extend(y_n.iter().copied());
        if y_n.iter().any(|s| !box_contains(&outer, s, &lattice)) {
            seg.violated = true;
        } else {
            let occ = SparseCounts::from_sites(seg.cumulative.iter().copied());
            let sup = neighborhood_sup_count(&occ, &lattice, &cover(&seg.cumulative, &lattice)?)?;
            seg.violated = sup as f64 > self.cfg.chi * lattice.range() as f64;
        }
        Ok(seg.violated || n >= self.horizon)
    }

    fn close_segment(&mut self, ctx_time: u64, y_t: &SiteSet, recovered: &SiteSet) -> Result<()> {
        let seg = self.segment.take().unwrap();
        let x = seg.site;
        let good = !seg.violated && ctx_time - seg.start == self.horizon && {
            let term = judge_terminal(x, y_t, self.n0, self.cfg, &self.rp, &self.cache)?;
            if term.f3 && term.f4 {
                // Ã(x): offspring not already claimed by an earlier occupied site.
                let claimed: FxHashSet<GridSite> = self.omega.iter().flat_map(|u| offspring(*u)).collect();
                for (j, z) in offspring(x).into_iter().enumerate() {
                    if !claimed.contains(&z) {
                        self.w.extend(term.selected[j].iter().copied());
                    }
                }
                true
            } else {
                false
            }
        };
        if good {
            self.omega.push(x);
        }
        self.steps.last_mut().unwrap().occupied = good;
        self.steps.last_mut().unwrap().tau = ctx_time;
        let lattice = self.rp.lattice;
        let (_, sup) = event_n_kappa(recovered, self.cfg.kappa, &lattice, &cover(recovered, &lattice)?)?;
        self.sup_recovered = self.sup_recovered.max(sup);
        if sup as f64 > self.cfg.kappa * lattice.range() as f64 {
            return Err(Error::CouplingViolation(format!(
                "recovered neighbourhood count {sup} exceeds kappa R at block {x:?}"
            )));
        }
        Ok(())
    }

    // Picks the next grid site and the event it triggers.
    fn next_event(&mut self, time: u64) -> Result<RuleAction> {
        let x = gamma_order(self.next_index)?;
        if x.l1() > u64::from(self.budget) {
            return Ok(RuleAction::Stop);
        }
        self.next_index += 1;
        let is_child = self.omega.iter().any(|u| offspring(*u).contains(&x));
        let (mu, nu) = if is_child {
            let b = block_box(x, 1.0, &self.rp)?;
            let lattice = self.rp.lattice;
            let (mu, nu): (Vec<ScaledSite>, Vec<ScaledSite>) =
                self.w.iter().partition(|s| box_contains(&b, s, &lattice));
            self.segment = Some(Segment {
                site: x,
                start: time,
                cumulative: SiteSet::default(),
                violated: false,
                pending: Some(mu.iter().copied().collect()),
            });
            (mu.into_iter().collect::<SiteSet>(), nu.into_iter().collect::<SiteSet>())
        } else {
            (SiteSet::default(), self.w.clone())
        };
        self.steps.push(BlockStep {
            site: x,
            case: if is_child { BlockCase::I } else { BlockCase::II },
            tau: time,
            occupied: false,
            restart_size: mu.len(),
            carried_size: nu.len(),
        });
        if is_child {
            self.w = nu.clone();
        }
        Ok(RuleAction::Restart { mu, nu })
    }

    fn step(&mut self, ctx: &RuleContext<'_>) -> Result<RuleAction> {
        if let Some(seg) = self.segment.as_mut() {
            if let Some(mu) = seg.pending.take() {
                if !self.observe(0, &mu)? {
                    return Ok(RuleAction::Continue);
                }
                self.close_segment(ctx.time, &mu, ctx.recovered)?;
            } else {
                let n = ctx.time - seg.start;
                if !self.observe(n, ctx.infected)? {
                    return Ok(RuleAction::Continue);
                }
                self.close_segment(ctx.time, ctx.infected, ctx.recovered)?;
            }
        }
        self.next_event(ctx.time)
    }
}

impl ImmigrationRule for BlockRule<'_> {
    fn decide(&mut self, ctx: &RuleContext<'_>) -> RuleAction {
        if self.error.is_some() {
            return RuleAction::Stop;
        }
        match self.step(ctx) {
            Ok(a) => a,
            Err(e) => {
                self.error = Some(e);
                RuleAction::Stop
            }
        }
    }
}

/// Visits Γ in ≺-order up to ‖x‖₁ ≤ `budget`, running one epidemic segment
/// per block that is an offspring of an occupied block, and returns the set Ω
/// of occupied blocks.
pub fn block_iteration<G: Rng + ?Sized>(
    cfg: &BlockConfig,
    lattice: &LatticeParams,
    oracle: &EdgeOracle,
    rng: &mut G,
    budget: u32,
) -> Result<BlockRun> {
    if budget > MAX_GRID_BUDGET {
        return Err(Error::BudgetExceeded(format!("grid budget {budget} > {MAX_GRID_BUDGET}")));
    }
    let eta0 = build_eta0(cfg, lattice, rng)?;
    let rp = cfg.run_params(*lattice)?;
    let horizon = rp.t_theta_r()?;
    let sites = (u64::from(budget) + 1) * (u64::from(budget) + 2) / 2;
    let mut rule = BlockRule {
        cfg,
        rp,
        cache: MajorantCache::new(rp),
        n0: eta0.len(),
        horizon,
        budget,
        next_index: 2,
        omega: Vec::new(),
        w: SiteSet::default(),
        segment: Some(Segment {
            site: GridSite(0, 0),
            start: 0,
            cumulative: SiteSet::default(),
            violated: false,
            pending: None,
        }),
        steps: vec![BlockStep {
            site: GridSite(0, 0),
            case: BlockCase::I,
            tau: 0,
            occupied: false,
            restart_size: eta0.len(),
            carried_size: 0,
        }],
        sup_recovered: 0,
        error: None,
    };
    run_with_immigration(&eta0, &SiteSet::default(), &SiteSet::default(), &mut rule, oracle, lattice, sites * (horizon + 1))?;
    if let Some(e) = rule.error {
        return Err(e);
    }
    let mut omega = rule.omega;
    omega.sort();
    Ok(BlockRun {
        omega,
        steps: rule.steps,
        budget,
        eta0_size: eta0.len(),
        sup_recovered: rule.sup_recovered,
        kappa_r: cfg.kappa * lattice.range() as f64,
    })
}

/// ξ on the grid triangle ‖x‖₁ ≤ budget: occupied sites are open iff both
/// offspring are occupied, vacant sites are Bernoulli(1 - 14ε0).
pub fn comparison_field<G: Rng + ?Sized>(run: &BlockRun, eps0: f64, rng: &mut G) -> Result<Vec<bool>> {
    let q = 1.0 - 14.0 * eps0;
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParam(format!("1 - 14 eps0 = {q} is not a probability")));
    }
    let n = (u64::from(run.budget) + 1) * (u64::from(run.budget) + 2) / 2;
    (1..=n)
        .map(|i| {
            let x = gamma_order(i)?;
            Ok(if run.is_occupied(x) {
                offspring(x).iter().all(|z| run.is_occupied(*z))
            } else {
                rng.random_bool(q)
            })
        })
        .collect()
}

/// Sites reachable from the origin along offspring steps leaving open sites,
/// within the triangle held by `field`.
pub fn reachable_from_origin(field: &[bool]) -> Vec<GridSite> {
    let mut reached = vec![false; field.len()];
    let mut out = Vec::new();
    for i in 0..field.len() {
        let x = gamma_order(i as u64 + 1).expect("index >= 1");
        let hit = i == 0 || parents(x).any(|p| reached_open(&reached, field, p));
        if hit {
            reached[i] = true;
            out.push(x);
        }
    }
    out
}

fn parents(x: GridSite) -> impl Iterator<Item = GridSite> {
    let a = (x.0 > 0).then(|| GridSite(x.0 - 1, x.1));
    let b = (x.1 > 0).then(|| GridSite(x.0, x.1 - 1));
    a.into_iter().chain(b)
}

fn reached_open(reached: &[bool], field: &[bool], p: GridSite) -> bool {
    let j = (p.index() - 1) as usize;
    reached[j] && field[j]
}

/// Uniforms driving ξ on the triangle ‖x‖₁ ≤ N; ξ_q(x) = 1{U_x < q}.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientedField {
    pub n: u32,
    pub dependence: u32,
    uniforms: Vec<f64>,
}

/// Cluster of the origin for one density.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrientedOutcome {
    pub percolates: bool,
    pub cluster_size: u64,
    /// Largest ‖x‖₁ of an open site joined to the origin.
    pub max_level: Option<u64>,
}

impl OrientedField {
    /// M = 0 or 1 gives independent sites. For larger M the grid is cut into
    /// squares of side ⌊M/2⌋ + 1 sharing a uniform B, and U_x = max(A_x, B)²,
    /// which keeps U_x uniform while sites farther apart than M stay
    /// independent.
    pub fn sample<G: Rng + ?Sized>(n: u32, dependence: u32, rng: &mut G) -> Self {
        let len = (u64::from(n) + 1) * (u64::from(n) + 2) / 2;
        let mut uniforms: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        if dependence >= 2 {
            let side = dependence / 2 + 1;
            let blocks = n / side + 1;
            let shared: Vec<f64> = (0..u64::from(blocks) * u64::from(blocks)).map(|_| rng.random::<f64>()).collect();
            for (i, u) in uniforms.iter_mut().enumerate() {
                let x = gamma_order(i as u64 + 1).expect("index >= 1");
                let b = shared[((x.0 / side) * blocks + x.1 / side) as usize];
                *u = u.max(b).powi(2);
            }
        }
        Self { n, dependence, uniforms }
    }

    pub fn is_open(&self, x: GridSite, q: f64) -> bool {
        self.uniforms[(x.index() - 1) as usize] < q
    }

    pub fn outcome(&self, q: f64) -> OrientedOutcome {
        let open: Vec<bool> = self.uniforms.iter().map(|u| *u < q).collect();
        if !open[0] {
            return OrientedOutcome { percolates: false, cluster_size: 0, max_level: None };
        }
        let mut reached = vec![false; open.len()];
        let mut size = 0;
        let mut max_level = 0;
        for i in 0..open.len() {
            let x = gamma_order(i as u64 + 1).expect("index >= 1");
            if open[i] && (i == 0 || parents(x).any(|p| reached[(p.index() - 1) as usize])) {
                reached[i] = true;
                size += 1;
                max_level = max_level.max(x.l1());
            }
        }
        OrientedOutcome { percolates: max_level == u64::from(self.n), cluster_size: size, max_level: Some(max_level) }
    }
}

/// Oriented site percolation at density q with dependence range M on the
/// triangle ‖x‖₁ ≤ N.
pub fn oriented_percolation<G: Rng + ?Sized>(q: f64, dependence: u32, n: u32, rng: &mut G) -> Result<OrientedOutcome> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParam(format!("density {q} outside [0, 1]")));
    }
    Ok(OrientedField::sample(n, dependence, rng).outcome(q))
}

/// Fraction of `trials` independent fields that percolate at each density,
/// all densities read off the same fields.
pub fn oriented_survival_curve(
    densities: &[f64],
    dependence: u32,
    n: u32,
    trials: u64,
    seed: u64,
) -> Result<Vec<(f64, u64)>> {
    if let Some(q) = densities.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::InvalidParam(format!("density {q} outside [0, 1]")));
    }
    let hits: Vec<Vec<bool>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream_seed(seed, i));
            let f = OrientedField::sample(n, dependence, &mut rng);
            densities.iter().map(|q| f.outcome(*q).percolates).collect()
        })
        .collect();
    Ok(densities
        .iter()
        .enumerate()
        .map(|(j, q)| (*q, hits.iter().filter(|h| h[j]).count() as u64))
        .collect())
}

//! SIR epidemics on the range-R percolation graph, driven by a keyed-hash
//! edge oracle so that several processes can share one environment.

use rand::Rng;
use rand_distr::{Bernoulli, Binomial, Distribution};
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::brw::{Population, Trajectory};
use crate::error::{Error, Result};
use crate::lattice::{
    box_contains, neighborhood_sup_count, BoxSpec, LatticeParams, ScaledSite, SparseCounts,
};
use crate::randwalk::RunParams;

pub use crate::oracle::{EdgeOracle, OpenNeighbors, SUSCEPTIBLE};

pub type SiteSet = FxHashSet<ScaledSite>;

/// Sorted copy of a site set.
pub fn sorted_sites(s: &SiteSet) -> Vec<ScaledSite> {
    let mut v: Vec<_> = s.iter().copied().collect();
    v.sort_unstable();
    v
}

pub fn site_set<I: IntoIterator<Item = ScaledSite>>(it: I) -> SiteSet {
    it.into_iter().collect()
}

/// Infected set η_n and recovered set ρ_n.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EpidemicState {
    pub infected: SiteSet,
    pub recovered: SiteSet,
    pub generation: u64,
}

impl EpidemicState {
    pub fn new(infected: SiteSet, recovered: SiteSet) -> Result<Self> {
        if infected.iter().any(|s| recovered.contains(s)) {
            return Err(Error::InvalidParam("initial infected and recovered sets overlap".into()));
        }
        Ok(EpidemicState { infected, recovered, generation: 0 })
    }

    pub fn is_susceptible(&self, s: &ScaledSite) -> bool {
        !self.infected.contains(s) && !self.recovered.contains(s)
    }
}

/// Infection attempts on susceptible targets during one step.
pub type Attempts = FxHashMap<ScaledSite, u64>;

/// Advances in place; returns the number of attempts on every newly
/// infected site when `record` is set.
fn advance(state: &mut EpidemicState, nbrs: &mut OpenNeighbors, record: bool) -> Attempts {
    let mut attempts = Attempts::default();
    let mut next = SiteSet::default();
    let mut buf = Vec::new();
    for x in &state.infected {
        buf.clear();
        nbrs.open_from(x, &mut buf);
        for y in &buf {
            if state.is_susceptible(y) {
                next.insert(*y);
                if record {
                    *attempts.entry(*y).or_insert(0) += 1;
                }
            }
        }
    }
    let old = std::mem::replace(&mut state.infected, next);
    state.recovered.extend(old);
    state.generation += 1;
    attempts
}

/// One SIR generation.
pub fn sir_step(state: &EpidemicState, oracle: &EdgeOracle, lattice: &LatticeParams) -> EpidemicState {
    let mut s = state.clone();
    advance(&mut s, &mut OpenNeighbors::new(oracle, lattice), false);
    s
}

/// One SIR generation with the attempt multiplicities on each new infection.
pub fn sir_step_recorded(
    state: &EpidemicState,
    oracle: &EdgeOracle,
    lattice: &LatticeParams,
) -> (EpidemicState, Attempts) {
    let mut s = state.clone();
    let a = advance(&mut s, &mut OpenNeighbors::new(oracle, lattice), true);
    (s, a)
}

/// Conditions that end a run early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Never fires; the horizon alone ends the run.
    None,
    MaxGeneration(u64),
    /// |η_n| ≥ threshold.
    PopulationAtLeast(u64),
    /// The cumulative infected set leaves the box.
    SupportEscapes(BoxSpec),
    /// sup_x |cumulative infected ∩ N(x)| > χR over the window.
    SupNeighborhoodExceeds { chi: f64, window: BoxSpec },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Extinct(u64),
    SurvivedToHorizon,
    RuleFired(u64),
}

#[derive(Clone, Debug)]
pub struct SirRun {
    pub states: Vec<EpidemicState>,
    pub verdict: Verdict,
}

impl SirRun {
    /// ∪_{k ≤ n} η_k.
    pub fn cumulative(&self, n: usize) -> SiteSet {
        let mut s = SiteSet::default();
        for st in &self.states[..=n.min(self.states.len() - 1)] {
            s.extend(st.infected.iter().copied());
        }
        s
    }
}

fn rule_fires(
    rule: &StopRule,
    state: &EpidemicState,
    cumulative: &SiteSet,
    lattice: &LatticeParams,
) -> Result<bool> {
    Ok(match rule {
        StopRule::None => false,
        StopRule::MaxGeneration(g) => state.generation >= *g,
        StopRule::PopulationAtLeast(k) => state.infected.len() as u64 >= *k,
        StopRule::SupportEscapes(b) => cumulative.iter().any(|s| !box_contains(b, s, lattice)),
        StopRule::SupNeighborhoodExceeds { chi, window } => {
            let c = SparseCounts::from_sites(cumulative.iter().copied());
            neighborhood_sup_count(&c, lattice, window)? as f64 > chi * lattice.range() as f64
        }
    })
}

/// Runs the epidemic from (η0, ρ0) until `horizon`, extinction or `stop`.
pub fn run_sir(
    eta0: &SiteSet,
    rho0: &SiteSet,
    oracle: &EdgeOracle,
    lattice: &LatticeParams,
    horizon: u64,
    stop: &StopRule,
) -> Result<SirRun> {
    let mut state = EpidemicState::new(eta0.clone(), rho0.clone())?;
    let mut nbrs = OpenNeighbors::new(oracle, lattice);
    let mut cumulative = eta0.clone();
    let mut states = vec![state.clone()];
    if state.infected.is_empty() {
        return Ok(SirRun { states, verdict: Verdict::Extinct(0) });
    }
    if rule_fires(stop, &state, &cumulative, lattice)? {
        return Ok(SirRun { states, verdict: Verdict::RuleFired(0) });
    }
    while state.generation < horizon {
        advance(&mut state, &mut nbrs, false);
        cumulative.extend(state.infected.iter().copied());
        states.push(state.clone());
        if state.infected.is_empty() {
            return Ok(SirRun { states, verdict: Verdict::Extinct(state.generation) });
        }
        if rule_fires(stop, &state, &cumulative, lattice)? {
            return Ok(SirRun { states, verdict: Verdict::RuleFired(state.generation) });
        }
    }
    Ok(SirRun { states, verdict: Verdict::SurvivedToHorizon })
}

/// {x : d_{G(ρ0)}(η0, x) ≤ n}, by breadth-first search over open edges that
/// avoid ρ0, querying the oracle pairwise.
pub fn distance_ball(
    eta0: &SiteSet,
    rho0: &SiteSet,
    oracle: &EdgeOracle,
    lattice: &LatticeParams,
    n: u64,
) -> SiteSet {
    let offsets = lattice.offsets();
    let mut ball: SiteSet = eta0.iter().copied().filter(|s| !rho0.contains(s)).collect();
    let mut frontier: Vec<ScaledSite> = sorted_sites(&ball);
    for _ in 0..n {
        let mut next = Vec::new();
        for x in &frontier {
            for e in &offsets {
                let y = x.add(*e);
                if !rho0.contains(&y) && !ball.contains(&y) && oracle.is_open(x, &y) {
                    ball.insert(y);
                    next.push(y);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    ball
}

/// Whether the epidemic from ({0}, ∅) is alive at generation `g_max`, counting
/// a population of at least `exit_population` as survival.
pub fn survives(oracle: &EdgeOracle, lattice: &LatticeParams, g_max: u64, exit_population: usize) -> bool {
    const INFECTED: u8 = 1;
    const NEXT: u8 = 2;
    const RECOVERED: u8 = 3;
    let mut env = OpenNeighbors::new(oracle, lattice);
    let mut cur = vec![ScaledSite::ORIGIN];
    env.set_status(&ScaledSite::ORIGIN, INFECTED);
    for _ in 0..g_max {
        let mut next = Vec::new();
        for x in &cur {
            env.advance_from(x, SUSCEPTIBLE, NEXT, &mut next);
        }
        for x in &cur {
            env.set_status(x, RECOVERED);
        }
        for y in &next {
            env.set_status(y, INFECTED);
        }
        if next.is_empty() {
            return false;
        }
        if next.len() >= exit_population {
            return true;
        }
        cur = next;
    }
    true
}

/// Result of one joint realisation of the SIR epidemic η, the modified SIR
/// η̄ and the branching random walk Z.
#[derive(Clone, Debug)]
pub struct CoupledRun {
    pub sir: Vec<EpidemicState>,
    pub modified: Vec<SparseCounts>,
    pub brw: Trajectory,
}

/// Joint construction with η_n ≤ η̄_n ≤ Z_n pointwise.
///
/// The particles at x are numbered 0..Z_n(x); the first η̄_n(x) of them also
/// belong to the modified epidemic, and particle 0 at an infected site is the
/// designated one. The designated particle uses the oracle edge (x, y) as its
/// birth indicator toward every susceptible y and fresh coins elsewhere. Each
/// edge is consulted at most once over the whole run, so Z keeps the law of
/// the branching random walk, and η coincides with [`run_sir`] on the same
/// oracle. Births of modified particles toward the current recovered set ρ_n
/// of the epidemic are discarded.
pub fn coupled_run<G: Rng + ?Sized>(
    eta0: &SiteSet,
    rho0: &SiteSet,
    z0: &Population,
    params: &RunParams,
    oracle: &EdgeOracle,
    rng: &mut G,
    horizon: u64,
) -> Result<CoupledRun> {
    let lattice = &params.lattice;
    for s in eta0 {
        if z0.counts.get(s) == 0 {
            return Err(Error::CouplingViolation(format!("Z_0 misses infected site {:?}", s.0)));
        }
    }
    if (oracle.p - params.p()).abs() > 1e-15 {
        return Err(Error::InvalidParam("oracle p differs from p(R)".into()));
    }
    let law = Binomial::new(params.volume(), params.p()).expect("p in [0,1]");
    let coin = Bernoulli::new(params.p()).expect("p in [0,1]");
    let offsets = lattice.offsets();
    let mut state = EpidemicState::new(eta0.clone(), rho0.clone())?;
    let mut modified = SparseCounts::from_sites(eta0.iter().copied());
    let mut z = z0.clone();
    let mut sir = vec![state.clone()];
    let mut mods = vec![modified.clone()];
    let mut pops = vec![z.clone()];
    for _ in 0..horizon {
        let mut z_next = SparseCounts::new();
        let mut m_next = SparseCounts::new();
        let mut eta_next = SiteSet::default();
        for (x, zc) in z.counts.sorted() {
            let mc = modified.get(&x);
            let designated = state.infected.contains(&x);
            for j in 0..zc {
                let kids: Vec<ScaledSite> = if j == 0 && designated {
                    let mut kids = Vec::new();
                    for e in &offsets {
                        let y = x.add(*e);
                        let born = if state.is_susceptible(&y) {
                            let open = oracle.is_open(&x, &y);
                            if open {
                                eta_next.insert(y);
                            }
                            open
                        } else {
                            coin.sample(rng)
                        };
                        if born {
                            kids.push(y);
                        }
                    }
                    kids
                } else {
                    let b = law.sample(rng);
                    crate::lattice::sample_distinct_neighbors(&x, b, lattice, rng)?
                };
                for y in &kids {
                    z_next.add(*y, 1);
                    if j < mc && !state.recovered.contains(y) {
                        m_next.add(*y, 1);
                    }
                }
            }
        }
        let old = std::mem::replace(&mut state.infected, eta_next);
        state.recovered.extend(old);
        state.generation += 1;
        z = Population { counts: z_next, generation: z.generation + 1 };
        modified = m_next;
        for s in &state.infected {
            if modified.get(s) == 0 {
                return Err(Error::CouplingViolation(format!("eta > eta_bar at {:?}", s.0)));
            }
        }
        for (s, c) in modified.iter() {
            if *c > z.counts.get(s) {
                return Err(Error::CouplingViolation(format!("eta_bar > Z at {:?}", s.0)));
            }
        }
        sir.push(state.clone());
        mods.push(modified.clone());
        pops.push(z.clone());
    }
    let brw = Trajectory { populations: pops, params: *params, seed: oracle.seed, births: None };
    Ok(CoupledRun { sir, modified: mods, brw })
}

/// The modified SIR epidemic η̄ started from η0, built jointly with the SIR
/// epidemic whose recovered sets it avoids. The environment seed is drawn
/// from `rng`.
pub fn run_modified_sir<G: Rng + ?Sized>(
    eta0: &SiteSet,
    rho0: &SiteSet,
    params: &RunParams,
    rng: &mut G,
    horizon: u64,
) -> Result<(Vec<SparseCounts>, Vec<EpidemicState>)> {
    let oracle = EdgeOracle::new(rng.random(), params.p())?;
    let z0 = Population::new(SparseCounts::from_sites(eta0.iter().copied()));
    let run = coupled_run(eta0, rho0, &z0, params, &oracle, rng, horizon)?;
    Ok((run.modified, run.sir))
}

/// What an immigration rule sees at time n.
pub struct RuleContext<'a> {
    pub time: u64,
    /// η*_n.
    pub infected: &'a SiteSet,
    /// ρ*_n.
    pub recovered: &'a SiteSet,
    /// ν of the latest event.
    pub carried: &'a SiteSet,
    /// Number of events applied so far, including the initial one.
    pub events: usize,
}

pub enum RuleAction {
    Continue,
    /// Fire an event at the current time.
    Restart { mu: SiteSet, nu: SiteSet },
    /// Keep η* constant from now on.
    Freeze,
    /// End the run.
    Stop,
}

/// Chooses immigration events. `decide` is called repeatedly at each time
/// until it returns something other than `Restart`.
pub trait ImmigrationRule {
    fn decide(&mut self, ctx: &RuleContext<'_>) -> RuleAction;
}

/// Events at fixed times.
pub struct FixedSchedule {
    events: Vec<(u64, SiteSet, SiteSet)>,
    next: usize,
    freeze_at: Option<u64>,
}

impl FixedSchedule {
    pub fn new(mut events: Vec<(u64, SiteSet, SiteSet)>, freeze_at: Option<u64>) -> Self {
        events.sort_by_key(|e| e.0);
        FixedSchedule { events, next: 0, freeze_at }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), None)
    }
}

impl ImmigrationRule for FixedSchedule {
    fn decide(&mut self, ctx: &RuleContext<'_>) -> RuleAction {
        if let Some(ev) = self.events.get(self.next) {
            if ev.0 == ctx.time {
                self.next += 1;
                return RuleAction::Restart { mu: ev.1.clone(), nu: ev.2.clone() };
            }
        }
        if self.freeze_at == Some(ctx.time) {
            return RuleAction::Freeze;
        }
        RuleAction::Continue
    }
}

/// η*_n, ρ*_n and the carried immigrants at one time.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImmigrationState {
    pub infected: SiteSet,
    pub recovered: SiteSet,
    pub carried: SiteSet,
    pub generation: u64,
}

/// One applied event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImmigrationEvent {
    pub time: u64,
    pub mu: SiteSet,
    pub nu: SiteSet,
}

#[derive(Clone, Debug)]
pub struct ImmigrationRun {
    pub states: Vec<ImmigrationState>,
    pub events: Vec<ImmigrationEvent>,
    pub frozen_at: Option<u64>,
}

/// Epidemic with immigration: between events it evolves as SIR from the
/// latest restart set μ_i and the recovered set at the event time; the
/// recovered set after an event at τ_i is ρ*_{τ_i} ∪ μ_i.
pub fn run_with_immigration<R: ImmigrationRule + ?Sized>(
    mu0: &SiteSet,
    nu0: &SiteSet,
    rho0: &SiteSet,
    rule: &mut R,
    oracle: &EdgeOracle,
    lattice: &LatticeParams,
    horizon: u64,
) -> Result<ImmigrationRun> {
    let init = EpidemicState::new(mu0.clone(), rho0.clone())?;
    let mut nbrs = OpenNeighbors::new(oracle, lattice);
    let mut cur = ImmigrationState {
        infected: init.infected,
        recovered: init.recovered,
        carried: nu0.clone(),
        generation: 0,
    };
    let mut events = vec![ImmigrationEvent { time: 0, mu: mu0.clone(), nu: nu0.clone() }];
    let mut states = Vec::new();
    let mut frozen_at = None;
    loop {
        let mut source: Option<SiteSet> = None;
        let mut stop = false;
        for _ in 0..100_000 {
            let ctx = RuleContext {
                time: cur.generation,
                infected: &cur.infected,
                recovered: &cur.recovered,
                carried: &cur.carried,
                events: events.len(),
            };
            match rule.decide(&ctx) {
                RuleAction::Continue => break,
                RuleAction::Stop => {
                    stop = true;
                    break;
                }
                RuleAction::Freeze => {
                    frozen_at.get_or_insert(cur.generation);
                    break;
                }
                RuleAction::Restart { mu, nu } => {
                    for s in mu.iter().chain(nu.iter()) {
                        if !cur.infected.contains(s) && !cur.carried.contains(s) {
                            return Err(Error::ScheduleViolation(format!(
                                "site {:?} at time {} is neither infected nor carried",
                                s.0, cur.generation
                            )));
                        }
                    }
                    events.push(ImmigrationEvent { time: cur.generation, mu: mu.clone(), nu: nu.clone() });
                    cur.carried = nu;
                    source = Some(mu);
                }
            }
        }
        states.push(cur.clone());
        if stop || cur.generation >= horizon {
            break;
        }
        if frozen_at.is_some() {
            cur.generation += 1;
            continue;
        }
        let src = source.unwrap_or_else(|| cur.infected.clone());
        let mut st = EpidemicState {
            infected: src,
            recovered: cur.recovered.clone(),
            generation: cur.generation,
        };
        advance(&mut st, &mut nbrs, false);
        cur.infected = st.infected;
        cur.recovered = st.recovered;
        cur.generation = st.generation;
    }
    Ok(ImmigrationRun { states, events, frozen_at })
}

/// Collisions of one step: Γ(x) = C(k_x, 2) for k_x simultaneous attempts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionRecord {
    pub per_site: Vec<(ScaledSite, u64)>,
    pub total: u64,
}

pub fn collisions_for(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

pub fn count_collisions(attempts: &Attempts) -> CollisionRecord {
    let mut per_site: Vec<(ScaledSite, u64)> = attempts
        .iter()
        .map(|(s, k)| (*s, collisions_for(*k)))
        .filter(|(_, g)| *g > 0)
        .collect();
    per_site.sort_unstable();
    let total = per_site.iter().map(|(_, g)| g).sum();
    CollisionRecord { per_site, total }
}

/// Whether sup_x |ρ ∩ N(x)| ≤ κR over the window, and the sup.
pub fn event_n_kappa(
    recovered: &SiteSet,
    kappa: f64,
    lattice: &LatticeParams,
    window: &BoxSpec,
) -> Result<(bool, u64)> {
    let c = SparseCounts::from_sites(recovered.iter().copied());
    let sup = neighborhood_sup_count(&c, lattice, window)?;
    Ok((sup as f64 <= kappa * lattice.range() as f64, sup))
}

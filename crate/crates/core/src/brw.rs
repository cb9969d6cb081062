//! The branching random walk Z_n: every particle has Binomial(V, p) children
//! placed on distinct uniformly chosen neighbours, then dies.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeParams, ScaledSite, SparseCounts};
use crate::numerics::{csum, CompensatedSum};
use crate::randwalk::{RunParams, SiteFunction};

/// Particle counts at one generation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Population {
    pub counts: SparseCounts,
    pub generation: u64,
}

impl Population {
    pub fn new(counts: SparseCounts) -> Self {
        Population { counts, generation: 0 }
    }

    /// `c` particles at one site.
    pub fn point(site: ScaledSite, c: u64) -> Self {
        let mut counts = SparseCounts::new();
        counts.add(site, c);
        Population::new(counts)
    }

    pub fn mass(&self) -> u64 {
        self.counts.total()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Children of one particle, for replaying the martingale per direction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BirthRecord {
    pub parent: ScaledSite,
    pub children: Vec<ScaledSite>,
}

/// A stored path Z_0, ..., Z_N.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub populations: Vec<Population>,
    pub params: RunParams,
    pub seed: u64,
    /// Per-generation birth log, kept only when requested.
    pub births: Option<Vec<Vec<BirthRecord>>>,
}

impl Trajectory {
    /// Number of completed steps N.
    pub fn len(&self) -> usize {
        self.populations.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.populations.len() <= 1
    }

    /// W^R_t for the generation floor(t R^{d-1}), if stored.
    pub fn rescaled_at(&self, t: f64) -> Option<Vec<(Vec<f64>, f64)>> {
        let n = (t * self.params.lattice.r_pow_dm1()).floor() as usize;
        self.populations.get(n).map(|p| rescaled_measure(p, &self.params.lattice))
    }
}

fn offspring_law(params: &RunParams) -> Binomial {
    Binomial::new(params.volume(), params.p()).expect("p(R) lies in [0,1]")
}

fn step_inner<G: Rng + ?Sized>(
    pop: &Population,
    params: &RunParams,
    rng: &mut G,
    mut log: Option<&mut Vec<BirthRecord>>,
) -> Population {
    let law = offspring_law(params);
    let mut next = SparseCounts::new();
    for (site, c) in pop.counts.sorted() {
        for _ in 0..c {
            let b = law.sample(rng);
            let kids = crate::lattice::sample_distinct_neighbors(&site, b, &params.lattice, rng)
                .expect("binomial draw never exceeds V(R)");
            for k in &kids {
                next.add(*k, 1);
            }
            if let Some(l) = log.as_deref_mut() {
                l.push(BirthRecord { parent: site, children: kids });
            }
        }
    }
    Population { counts: next, generation: pop.generation + 1 }
}

/// One generation of the branching random walk.
pub fn brw_step<G: Rng + ?Sized>(pop: &Population, params: &RunParams, rng: &mut G) -> Population {
    step_inner(pop, params, rng, None)
}

/// One generation, also returning every particle's children.
pub fn brw_step_logged<G: Rng + ?Sized>(
    pop: &Population,
    params: &RunParams,
    rng: &mut G,
) -> (Population, Vec<BirthRecord>) {
    let mut log = Vec::new();
    let next = step_inner(pop, params, rng, Some(&mut log));
    (next, log)
}

/// Runs `n` generations from `z0`. The birth log is kept when `log` is set.
pub fn simulate<G: Rng + ?Sized>(
    z0: Population,
    params: &RunParams,
    n: usize,
    seed: u64,
    rng: &mut G,
    log: bool,
) -> Trajectory {
    let mut pops = Vec::with_capacity(n + 1);
    let mut births = log.then(Vec::new);
    pops.push(z0);
    for _ in 0..n {
        let cur = pops.last().unwrap();
        let next = if let Some(b) = births.as_mut() {
            let (p, l) = brw_step_logged(cur, params, rng);
            b.push(l);
            p
        } else {
            brw_step(cur, params, rng)
        };
        pops.push(next);
    }
    Trajectory { populations: pops, params: *params, seed, births }
}

/// Z(φ) = Σ_x Z(x) φ(x).
pub fn measure_apply<F: SiteFunction + ?Sized>(pop: &Population, phi: &F) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for (s, c) in pop.counts.sorted() {
        acc.add(c as f64 * phi.value(&s)?);
    }
    Ok(acc.value())
}

/// Z(φ̄) with φ̄(y) = (1/V) Σ_e φ(y + e).
pub fn measure_neighbor_mean<F: SiteFunction + ?Sized>(
    pop: &Population,
    phi: &F,
    lattice: &LatticeParams,
) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for (s, c) in pop.counts.sorted() {
        acc.add(c as f64 * phi.neighbor_mean(&s, lattice)?);
    }
    Ok(acc.value())
}

/// Z(φ²̄) with φ²̄(y) = (1/V) Σ_e φ(y + e)².
pub fn measure_neighbor_mean_sq<F: SiteFunction + ?Sized>(
    pop: &Population,
    phi: &F,
    lattice: &LatticeParams,
) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for (s, c) in pop.counts.sorted() {
        acc.add(c as f64 * phi.neighbor_mean_sq(&s, lattice)?);
    }
    Ok(acc.value())
}

fn check_horizon(traj: &Trajectory, n: usize) -> Result<()> {
    if n > traj.len() {
        return Err(Error::InvalidParam(format!("N = {n} exceeds trajectory length {}", traj.len())));
    }
    Ok(())
}

/// M_N(φ) = Σ_{n<N} [Z_{n+1}(φ) - (1 + θ/R^{d-1}) Z_n(φ̄)].
pub fn martingale_term<F: SiteFunction + ?Sized>(traj: &Trajectory, phi: &F, n: usize) -> Result<f64> {
    check_horizon(traj, n)?;
    let growth = 1.0 + traj.params.drift();
    let lattice = &traj.params.lattice;
    let mut acc = CompensatedSum::new();
    for k in 0..n {
        acc.add(measure_apply(&traj.populations[k + 1], phi)?);
        acc.add(-growth * measure_neighbor_mean(&traj.populations[k], phi, lattice)?);
    }
    Ok(acc.value())
}

/// ⟨M(φ)⟩_N = p(1-p) V Σ_{n<N} Z_n(φ²̄).
pub fn quadratic_variation<F: SiteFunction + ?Sized>(
    traj: &Trajectory,
    phi: &F,
    n: usize,
) -> Result<f64> {
    check_horizon(traj, n)?;
    let p = traj.params.p();
    let v = traj.params.volume() as f64;
    let lattice = &traj.params.lattice;
    let mut parts = Vec::with_capacity(n);
    for k in 0..n {
        parts.push(measure_neighbor_mean_sq(&traj.populations[k], phi, lattice)?);
    }
    Ok(p * (1.0 - p) * v * csum(parts))
}

/// Per-generation masses with the mean curve (1 + θ/R^{d-1})^n Z_0(1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GwStats {
    pub mass: Vec<u64>,
    pub mean: Vec<f64>,
}

pub fn gw_stats(traj: &Trajectory) -> GwStats {
    let mass: Vec<u64> = traj.populations.iter().map(Population::mass).collect();
    let m0 = mass[0] as f64;
    let g = 1.0 + traj.params.drift();
    let mean = (0..mass.len()).map(|n| m0 * g.powi(n as i32)).collect();
    GwStats { mass, mean }
}

/// Variance of the generation-n mass of the Galton–Watson process with
/// Binomial(V, p) offspring started from `mass0` particles.
pub fn gw_variance(params: &RunParams, n: u64, mass0: u64) -> f64 {
    let mu = 1.0 + params.drift();
    let p = params.p();
    let sigma2 = params.volume() as f64 * p * (1.0 - p);
    let per = if params.drift() == 0.0 {
        n as f64 * sigma2
    } else {
        sigma2 * mu.powi(n as i32 - 1) * (mu.powi(n as i32) - 1.0) / (mu - 1.0)
    };
    mass0 as f64 * per
}

/// Atoms of W^R: position x / sqrt(R^{d-1}/3), weight count / R^{d-1}.
pub fn rescaled_measure(pop: &Population, lattice: &LatticeParams) -> Vec<(Vec<f64>, f64)> {
    let rd = lattice.r_pow_dm1();
    let scale = (rd / 3.0).sqrt();
    pop.counts
        .sorted()
        .into_iter()
        .map(|(s, c)| {
            let x = s.position(lattice).into_iter().map(|v| v / scale).collect();
            (x, c as f64 / rd)
        })
        .collect()
}

/// Integer y of the unit box Q(y) owning the site: the nearest integer to
/// k/R per coordinate, ties toward -∞.
pub fn unit_box_of(s: &ScaledSite, lattice: &LatticeParams) -> [i64; 3] {
    let r = lattice.range();
    let mut y = [0i64; 3];
    for a in 0..lattice.dim() {
        // ceil((2k - R) / 2R)
        y[a] = (2 * s.0[a] - r).div_euclid(2 * r) + i64::from((2 * s.0[a] - r).rem_euclid(2 * r) != 0);
    }
    y
}

/// Unit-box totals.
pub fn box_counts(counts: &SparseCounts, lattice: &LatticeParams) -> rustc_hash::FxHashMap<[i64; 3], u64> {
    let mut boxes = rustc_hash::FxHashMap::default();
    for (s, c) in counts.iter() {
        *boxes.entry(unit_box_of(s, lattice)).or_insert(0) += *c;
    }
    boxes
}

/// Deletes every unit box holding more than `K·β_d(R)` particles.
pub fn thin_counts(counts: &SparseCounts, k: f64, lattice: &LatticeParams) -> Result<SparseCounts> {
    if !(k > 0.0) {
        return Err(Error::InvalidParam(format!("K must be > 0, got {k}")));
    }
    let threshold = k * crate::randwalk::beta_d(lattice);
    let boxes = box_counts(counts, lattice);
    let mut out = SparseCounts::new();
    for (s, c) in counts.iter() {
        if boxes[&unit_box_of(s, lattice)] as f64 <= threshold {
            out.add(*s, *c);
        }
    }
    Ok(out)
}

pub fn thin(pop: &Population, k: f64, lattice: &LatticeParams) -> Result<Population> {
    Ok(Population { counts: thin_counts(&pop.counts, k, lattice)?, generation: pop.generation })
}

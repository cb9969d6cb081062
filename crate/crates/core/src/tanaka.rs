//! Local times of branching random walk paths and pathwise checks of the
//! martingale-problem identity and the Tanaka formulas.

use serde::{Deserialize, Serialize};

use crate::brw::{martingale_term, measure_apply, measure_neighbor_mean, Trajectory};
use crate::error::{Error, Result};
use crate::lattice::{is_neighbor, neighborhood_sup, BoxSpec, ScaledSite, SparseCounts};
use crate::numerics::CompensatedSum;
use crate::randwalk::{KernelKind, KernelTable, SiteFunction};

/// Σ_{n<N} Z_n(N(a)).
pub fn local_time(traj: &Trajectory, a: &ScaledSite, n: usize) -> Result<u64> {
    if n > traj.len() + 1 {
        return Err(Error::InvalidParam(format!("N = {n} exceeds the stored path")));
    }
    let lattice = &traj.params.lattice;
    let mut total = 0;
    for pop in &traj.populations[..n] {
        for (s, c) in pop.counts.iter() {
            if is_neighbor(s, a, lattice)? {
                total += c;
            }
        }
    }
    Ok(total)
}

/// The occupation measure Σ_{n<N} Z_n.
pub fn occupation(traj: &Trajectory, n: usize) -> SparseCounts {
    let mut occ = SparseCounts::new();
    for pop in &traj.populations[..n.min(traj.populations.len())] {
        occ.merge(&pop.counts);
    }
    occ
}

/// max over lattice a in the window of Σ_{n<N} Z_n(N(a)), with a maximiser.
pub fn sup_local_time(traj: &Trajectory, window: &BoxSpec, n: usize) -> Result<(u64, ScaledSite)> {
    neighborhood_sup(&occupation(traj, n), &traj.params.lattice, window)
}

/// Terms of Z_N(φ) = Z_0(φ) + (1+θ')Σ Z_n(Lφ) + M_N(φ) + θ'Σ Z_n(φ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpReport {
    pub terminal: f64,
    pub initial: f64,
    pub generator: f64,
    pub martingale: f64,
    pub damping: f64,
    pub residual: f64,
    pub relative_residual: f64,
}

/// Checks the martingale-problem identity on a stored path.
pub fn verify_mp<F: SiteFunction + ?Sized>(traj: &Trajectory, phi: &F, n: usize) -> Result<MpReport> {
    if n > traj.len() {
        return Err(Error::InvalidParam(format!("N = {n} exceeds trajectory length {}", traj.len())));
    }
    let growth = 1.0 + traj.params.drift();
    let lattice = &traj.params.lattice;
    let terminal = measure_apply(&traj.populations[n], phi)?;
    let initial = measure_apply(&traj.populations[0], phi)?;
    let mut gen = CompensatedSum::new();
    let mut damp = CompensatedSum::new();
    for pop in &traj.populations[..n] {
        let zf = measure_apply(pop, phi)?;
        gen.add(measure_neighbor_mean(pop, phi, lattice)?);
        gen.add(-zf);
        damp.add(zf);
    }
    let generator = growth * gen.value();
    let martingale = martingale_term(traj, phi, n)?;
    let damping = traj.params.drift() * damp.value();
    let mut rhs = CompensatedSum::new();
    for t in [initial, generator, martingale, damping] {
        rhs.add(t);
    }
    let residual = terminal - rhs.value();
    let scale = [terminal, initial, generator, martingale, damping]
        .iter()
        .fold(1.0f64, |m, x| m.max(x.abs()));
    Ok(MpReport {
        terminal,
        initial,
        generator,
        martingale,
        damping,
        residual,
        relative_residual: residual.abs() / scale,
    })
}

/// Both sides of the Tanaka formula for the local time at a.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TanakaReport {
    pub lhs: f64,
    /// Z_0(k).
    pub initial_kernel: f64,
    /// -Z_N(k).
    pub terminal_kernel: f64,
    /// M_N(k).
    pub martingale: f64,
    /// Drift and damping terms in Σ_{n<N} Z_n(k).
    pub drift: f64,
    /// Exact leftover of the truncation at depth m.
    pub truncation_correction: f64,
    pub residual: f64,
    /// Residual with the correction left out; equals the correction.
    pub residual_without_correction: f64,
    pub relative_residual: f64,
}

/// Evaluates the Tanaka formula with the truncated kernel anchored at a and
/// its exact correction term. The anchor of `kernel` is replaced by `a`.
pub fn verify_tanaka(traj: &Trajectory, a: &ScaledSite, n: usize, kernel: &KernelTable) -> Result<TanakaReport> {
    if n > traj.len() {
        return Err(Error::InvalidParam(format!("N = {n} exceeds trajectory length {}", traj.len())));
    }
    let params = &traj.params;
    if kernel.params.lattice != params.lattice || kernel.params.theta != params.theta {
        return Err(Error::InvalidParam("kernel built for other parameters".into()));
    }
    let k = kernel.with_anchor(*a);
    let drift1 = params.drift();
    let growth = 1.0 + drift1;
    let local = local_time(traj, a, n)? as f64;
    let (lhs, drift_coef) = match k.kind {
        KernelKind::Phi => (growth * params.r() as f64 * local, drift1),
        KernelKind::G => {
            let q = (params.theta / params.r() as f64).exp() - 1.0;
            (growth * local, q * growth + drift1)
        }
        _ => return Err(Error::InvalidParam("Tanaka needs a phi or g kernel".into())),
    };
    let initial_kernel = measure_apply(&traj.populations[0], &k)?;
    let terminal_kernel = -measure_apply(&traj.populations[n], &k)?;
    let martingale = martingale_term(traj, &k, n)?;
    let corr_fn = k.correction_fn();
    let mut occ_k = CompensatedSum::new();
    let mut occ_c = CompensatedSum::new();
    for pop in &traj.populations[..n] {
        occ_k.add(measure_apply(pop, &k)?);
        occ_c.add(measure_apply(pop, &corr_fn)?);
    }
    let drift = drift_coef * occ_k.value();
    let truncation_correction = growth * occ_c.value();
    let mut rest = CompensatedSum::new();
    for t in [initial_kernel, terminal_kernel, martingale, drift] {
        rest.add(t);
    }
    let residual_without_correction = lhs - rest.value();
    rest.add(truncation_correction);
    let residual = lhs - rest.value();
    Ok(TanakaReport {
        lhs,
        initial_kernel,
        terminal_kernel,
        martingale,
        drift,
        truncation_correction,
        residual,
        residual_without_correction,
        relative_residual: residual.abs() / (1.0 + lhs.abs()),
    })
}

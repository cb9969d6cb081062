//! Critical-probability estimation by bisection on finite-horizon survival
//! frequencies, power-law fits, and the Monte Carlo moment battery.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brw::{martingale_term, measure_apply, quadratic_variation, simulate, Population};
use crate::error::{Error, Result};
use crate::lattice::{volume, LatticeParams, ScaledSite};
use crate::numerics::{replica_rng, stream_seed, wilson_interval};
use crate::randwalk::{g_weight, FnSite, Grid, RunParams, WeightFn};
use crate::sir::{survives, EdgeOracle};

/// Finite-horizon stand-in for survival of the epidemic from the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalProxy {
    /// Alive at this generation.
    pub g_max: u64,
    /// Count as survived once this many sites are infected at once.
    pub exit_population: usize,
}

impl SurvivalProxy {
    /// Horizon `g_max` with early exit at 10·V(R) infected sites.
    pub fn standard(g_max: u64, lattice: &LatticeParams) -> Self {
        SurvivalProxy { g_max, exit_population: 10 * volume(lattice) as usize }
    }
}

/// Whether the epidemic from ({0}, ∅) satisfies the proxy in the environment
/// `oracle` with its edge probability replaced by `p`.
pub fn survival_probe(p: f64, lattice: &LatticeParams, proxy: &SurvivalProxy, oracle: &EdgeOracle) -> Result<bool> {
    let o = oracle.with_p(p)?;
    if p == 0.0 {
        return Ok(false);
    }
    Ok(survives(&o, lattice, proxy.g_max, proxy.exit_population))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurvePoint {
    pub p: f64,
    pub trials: u64,
    pub survivals: u64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

impl SurvivalCurvePoint {
    pub fn frequency(&self) -> f64 {
        self.survivals as f64 / self.trials as f64
    }
}

/// Cutoff for survival oracles: open edges are cheap to list up to p = 4/V,
/// the top of the initial bisection bracket.
pub fn survival_cutoff(lattice: &LatticeParams) -> f64 {
    (4.0 / volume(lattice) as f64).min(1.0)
}

/// Survival count at p over `trials` environments. Trial i uses the oracle
/// seed `stream_seed(seed, i)` and the cutoff of [`survival_cutoff`] at every
/// p, so curves are monotone per trial.
pub fn survival_point(
    p: f64,
    lattice: &LatticeParams,
    proxy: &SurvivalProxy,
    trials: u64,
    seed: u64,
) -> Result<SurvivalCurvePoint> {
    let cutoff = survival_cutoff(lattice);
    let outcomes: Vec<bool> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let o = EdgeOracle::with_cutoff(stream_seed(seed, i), p, cutoff)?;
            survival_probe(p, lattice, proxy, &o)
        })
        .collect::<Result<Vec<bool>>>()?;
    let survivals = outcomes.iter().filter(|b| **b).count() as u64;
    let (wilson_lo, wilson_hi) = wilson_interval(survivals, trials, 1.96);
    Ok(SurvivalCurvePoint { p, trials, survivals, wilson_lo, wilson_hi })
}

/// Bisection for the `target` crossing of an increasing frequency curve.
/// Returns the final bracket and every evaluated (p, frequency).
pub fn bisect_threshold(
    mut f: impl FnMut(f64) -> Result<f64>,
    mut lo: f64,
    mut hi: f64,
    levels: u32,
    target: f64,
) -> Result<((f64, f64), Vec<(f64, f64)>)> {
    let mut evals = Vec::new();
    for _ in 0..levels {
        let mid = 0.5 * (lo + hi);
        let v = f(mid)?;
        evals.push((mid, v));
        if v >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(((lo, hi), evals))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcConfig {
    pub d: usize,
    pub r: i64,
    pub g_max: u64,
    pub trials: u64,
    pub levels: u32,
    pub seed: u64,
    /// Survival frequency defining the threshold.
    pub target: f64,
}

impl PcConfig {
    pub fn new(d: usize, r: i64, g_max: u64, trials: u64, levels: u32, seed: u64) -> Self {
        PcConfig { d, r, g_max, trials, levels, seed, target: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcEstimate {
    pub r: i64,
    pub d: usize,
    pub g_max: u64,
    pub p_hat: f64,
    /// Final bisection bracket.
    pub lo: f64,
    pub hi: f64,
    /// (p_hat·V - 1)·R^{d-1}.
    pub theta_hat: f64,
    pub curve: Vec<SurvivalCurvePoint>,
    /// Set when a higher p showed a clearly lower frequency.
    pub non_monotone: bool,
    pub bias_note: String,
}

/// Threshold p at which the survival frequency crosses `target`.
pub fn estimate_pc(cfg: &PcConfig) -> Result<PcEstimate> {
    if cfg.trials < 100 {
        return Err(Error::InvalidParam(format!("need at least 100 trials, got {}", cfg.trials)));
    }
    let lattice = LatticeParams::new(cfg.d, cfg.r)?;
    let v = volume(&lattice) as f64;
    let proxy = SurvivalProxy::standard(cfg.g_max, &lattice);
    let seed = stream_seed(cfg.seed, ((cfg.d as u64) << 32) ^ cfg.r as u64);
    let mut curve = Vec::new();
    let mut eval = |p: f64| -> Result<f64> {
        let pt = survival_point(p, &lattice, &proxy, cfg.trials, seed)?;
        curve.push(pt);
        Ok(pt.frequency())
    };
    let lo = 1.0 / v;
    let mut hi = (4.0 / v).min(1.0);
    while eval(hi)? < cfg.target && hi < 1.0 {
        hi = (2.0 * hi).min(1.0);
    }
    let ((blo, bhi), _) = bisect_threshold(&mut eval, lo, hi, cfg.levels, cfg.target)?;
    let p_hat = 0.5 * (blo + bhi);
    let mut sorted = curve.clone();
    sorted.sort_by(|a, b| a.p.total_cmp(&b.p));
    let non_monotone = sorted.windows(2).any(|w| {
        let (a, b) = (w[0], w[1]);
        let se = ((a.frequency() * (1.0 - a.frequency()) + b.frequency() * (1.0 - b.frequency()))
            / cfg.trials as f64)
            .sqrt();
        a.frequency() - b.frequency() > 3.0 * se.max(1e-12)
    });
    Ok(PcEstimate {
        r: cfg.r,
        d: cfg.d,
        g_max: cfg.g_max,
        p_hat,
        lo: blo,
        hi: bhi,
        theta_hat: (p_hat * v - 1.0) * lattice.r_pow_dm1(),
        curve,
        non_monotone,
        bias_note: format!(
            "survival to generation {} (early exit at {} infected) at frequency {}; finite-horizon thresholds lie above p_c",
            cfg.g_max, proxy.exit_population, cfg.target
        ),
    })
}

/// P(Z_g > 0) for the Galton-Watson process with Binomial(V, p) offspring
/// from one ancestor, by iterating the generating function at 0.
pub fn gw_survival(v: u64, p: f64, g: u64) -> f64 {
    let mut q = 0.0f64;
    for _ in 0..g {
        q = (1.0 - p + p * q).powf(v as f64);
    }
    1.0 - q
}

/// p at which [`gw_survival`] crosses `target`, to relative precision 1e-12.
pub fn gw_threshold(v: u64, g: u64, target: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&target) || v == 0 || g == 0 {
        return Err(Error::InvalidParam("gw_threshold needs V, g >= 1 and target in [0,1)".into()));
    }
    let ((lo, hi), _) = bisect_threshold(|p| Ok(gw_survival(v, p, g)), 0.0, 1.0, 60, target)?;
    Ok(0.5 * (lo + hi))
}

/// Least-squares fit of log(p_hat·V - 1) = log θ - γ log R.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub gamma_hat: f64,
    pub theta_hat: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

/// Fits `points` of (R, p_hat·V(R) - 1).
pub fn scaling_fit_excess(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(Error::InvalidParam("scaling fit needs at least 3 points".into()));
    }
    if let Some((r, y)) = points.iter().find(|(_, y)| *y <= 0.0) {
        return Err(Error::InvalidParam(format!("p_hat·V - 1 = {y} <= 0 at R = {r}")));
    }
    let xs: Vec<f64> = points.iter().map(|(r, _)| r.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - intercept - slope * x).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    Ok(ScalingFit {
        gamma_hat: -slope,
        theta_hat: intercept.exp(),
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
        residuals,
    })
}

/// Fits (R, p_hat) pairs in dimension d.
pub fn scaling_fit(points: &[(i64, f64)], d: usize) -> Result<ScalingFit> {
    let excess = points
        .iter()
        .map(|&(r, p)| {
            let v = volume(&LatticeParams::new(d, r)?) as f64;
            Ok((r as f64, p * v - 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    scaling_fit_excess(&excess)
}

/// Settings of the moment battery: Z_0 = δ_0, φ = 1_{Q_M(0)}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentScenario {
    pub params: RunParams,
    pub n: u64,
    /// Radius M of the box indicator φ, in unscaled units.
    pub box_radius: f64,
    pub reps: u64,
    pub seed: u64,
    /// Each λ is this fraction of the largest value its bound allows.
    pub lambda_fraction: f64,
}

impl MomentScenario {
    /// d = 2, R = 4, n = 10, θ/R = e^{0.1} - 1 so the mean grows by e.
    pub fn standard(seed: u64) -> Self {
        let lattice = LatticeParams::new(2, 4).unwrap();
        let theta = 4.0 * (0.1f64.exp() - 1.0);
        MomentScenario {
            params: RunParams::new(lattice, theta, 1.0).unwrap(),
            n: 10,
            box_radius: 2.0,
            reps: 10_000,
            seed,
            lambda_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryRecord {
    pub check: String,
    pub statistic: f64,
    pub reference: f64,
    pub z_score: Option<f64>,
    pub lambda: Option<f64>,
    pub pass: bool,
}

fn box_indicator(lattice: &LatticeParams, m: f64) -> Grid {
    let rad = (m * lattice.range() as f64).floor() as i64;
    let mut g = Grid::centered(lattice.dim(), rad);
    let sites: Vec<ScaledSite> = g.iter().map(|(s, _)| s).collect();
    for s in sites {
        g.set(&s, 1.0).unwrap();
    }
    g
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// First moment, second moment, exponential moment, occupation exponential
/// moment and Freedman checks against simulated branching random walks.
pub fn moment_battery(sc: &MomentScenario) -> Result<Vec<BatteryRecord>> {
    let params = sc.params;
    let lattice = params.lattice;
    let n = sc.n;
    let phi = box_indicator(&lattice, sc.box_radius);
    let growth = 1.0 + params.drift();
    let en = (n as f64 * params.drift()).exp();
    let g = g_weight(WeightFn::Table(&phi), n, &lattice)?;
    // E^0 Z_n(φ) = (1+θ')^n (P^n φ)(0)
    let mut pn_phi = phi.clone();
    for _ in 0..n {
        pn_phi = pn_phi.smooth(&lattice);
    }
    let mean_th = growth.powi(n as i32) * pn_phi.get(&ScaledSite::ORIGIN).unwrap_or(0.0);
    let lam_exp = sc.lambda_fraction / (en * g);
    let lam_occ = sc.lambda_fraction / (2.0 * n as f64 * en * g);
    let lam_fr = sc.lambda_fraction.min(1.0) / 4.0;
    if !(lam_exp * en * g < 1.0) || !(2.0 * lam_occ * n as f64 * en * g < 1.0) {
        return Err(Error::InvalidRegime("lambda_fraction must be < 1".into()));
    }

    struct Rep {
        zn: f64,
        occ: f64,
        mart: f64,
        qv: f64,
    }
    let reps: Vec<Rep> = (0..sc.reps)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(sc.seed, i);
            let t = simulate(Population::point(ScaledSite::ORIGIN, 1), &params, n as usize, i, &mut rng, false);
            let zero_off = FnSite(|s: &ScaledSite| phi.get(s).unwrap_or(0.0));
            let mut occ = 0.0;
            for pop in &t.populations[..=n as usize] {
                occ += measure_apply(pop, &zero_off)?;
            }
            Ok(Rep {
                zn: measure_apply(&t.populations[n as usize], &zero_off)?,
                occ,
                mart: martingale_term(&t, &zero_off, n as usize)?,
                qv: quadratic_variation(&t, &zero_off, n as usize)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let zn: Vec<f64> = reps.iter().map(|r| r.zn).collect();
    let (m, v) = mean_var(&zn);
    let z = (m - mean_th) / (v / zn.len() as f64).sqrt();
    let mut out = vec![BatteryRecord {
        check: "first_moment".into(),
        statistic: m,
        reference: mean_th,
        z_score: Some(z),
        lambda: None,
        pass: z.abs() <= 4.0,
    }];
    let second: f64 = zn.iter().map(|x| x * x).sum::<f64>() / zn.len() as f64;
    let second_bound = en * g * mean_th;
    out.push(BatteryRecord {
        check: "second_moment".into(),
        statistic: second,
        reference: second_bound,
        z_score: None,
        lambda: None,
        pass: second <= second_bound,
    });
    let exp_stat = zn.iter().map(|x| (lam_exp * x).exp()).sum::<f64>() / zn.len() as f64;
    let exp_bound = (lam_exp * mean_th / (1.0 - lam_exp * en * g)).exp();
    out.push(BatteryRecord {
        check: "exponential_moment".into(),
        statistic: exp_stat,
        reference: exp_bound,
        z_score: None,
        lambda: Some(lam_exp),
        pass: exp_stat <= exp_bound,
    });
    let occ_stat = reps.iter().map(|r| (lam_occ * r.occ).exp()).sum::<f64>() / reps.len() as f64;
    let occ_bound = (lam_occ * en * g / (1.0 - 2.0 * lam_occ * n as f64 * en * g)).exp();
    out.push(BatteryRecord {
        check: "occupation_exponential_moment".into(),
        statistic: occ_stat,
        reference: occ_bound,
        z_score: None,
        lambda: Some(lam_occ),
        pass: occ_stat <= occ_bound,
    });
    let fr_stat = reps.iter().map(|r| (lam_fr * r.mart.abs()).exp()).sum::<f64>() / reps.len() as f64;
    let fr_inner = reps.iter().map(|r| (16.0 * lam_fr * lam_fr * r.qv).exp()).sum::<f64>() / reps.len() as f64;
    let fr_bound = 2.0 * fr_inner.sqrt();
    out.push(BatteryRecord {
        check: "freedman".into(),
        statistic: fr_stat,
        reference: fr_bound,
        z_score: None,
        lambda: Some(lam_fr),
        pass: fr_stat <= fr_bound,
    });
    let mart: Vec<f64> = reps.iter().map(|r| r.mart).collect();
    let (mm, mv) = mean_var(&mart);
    let zm = mm / (mv / mart.len() as f64).sqrt();
    out.push(BatteryRecord {
        check: "martingale_mean_zero".into(),
        statistic: mm,
        reference: 0.0,
        z_score: Some(zm),
        lambda: None,
        pass: zm.abs() <= 4.0,
    });
    // E M_N² = E⟨M⟩_N, compared through the differences M² - ⟨M⟩.
    let diffs: Vec<f64> = reps.iter().map(|r| r.mart * r.mart - r.qv).collect();
    let (dm, dv) = mean_var(&diffs);
    let zd = dm / (dv / diffs.len() as f64).sqrt();
    out.push(BatteryRecord {
        check: "martingale_isometry".into(),
        statistic: mart.iter().map(|x| x * x).sum::<f64>() / mart.len() as f64,
        reference: reps.iter().map(|r| r.qv).sum::<f64>() / reps.len() as f64,
        z_score: Some(zd),
        lambda: None,
        pass: zd.abs() <= 4.0,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_extremes() {
        let l = LatticeParams::new(2, 2).unwrap();
        let proxy = SurvivalProxy::standard(50, &l);
        let o = EdgeOracle::new(1, 0.5).unwrap();
        assert!(!survival_probe(0.0, &l, &proxy, &o).unwrap());
        assert!(survival_probe(1.0, &l, &proxy, &o).unwrap());
    }

    #[test]
    fn probe_monotone_in_p() {
        let l = LatticeParams::new(2, 2).unwrap();
        let proxy = SurvivalProxy::standard(60, &l);
        for seed in 0..200 {
            let o = EdgeOracle::with_cutoff(seed, 0.0, 0.05).unwrap();
            let mut prev = false;
            for k in 0..12 {
                let p = 0.5 / 24.0 + k as f64 * 0.25 / 24.0;
                let s = survival_probe(p, &l, &proxy, &o).unwrap();
                assert!(!prev || s, "seed {seed} lost survival at p = {p}");
                prev = s;
            }
        }
    }

    #[test]
    fn bisection_recovers_closed_form_at_one_generation() {
        let v = 24.0;
        let exact = 1.0 - 2f64.powf(-1.0 / v);
        let ((lo, hi), _) = bisect_threshold(|p| Ok(1.0 - (1.0 - p).powf(v)), 0.0, 1.0, 40, 0.5).unwrap();
        assert!(lo <= exact && exact <= hi && hi - lo <= 2f64.powi(-40));
    }

    #[test]
    fn one_generation_estimate_near_closed_form() {
        let l = LatticeParams::new(2, 2).unwrap();
        let proxy = SurvivalProxy { g_max: 1, exit_population: usize::MAX };
        let exact = 1.0 - 2f64.powf(-1.0 / 24.0);
        let pt = survival_point(exact, &l, &proxy, 4000, 3).unwrap();
        let se = (0.25 / 4000.0f64).sqrt();
        assert!((pt.frequency() - 0.5).abs() < 4.0 * se);
    }

    #[test]
    fn estimate_pc_is_deterministic() {
        let cfg = PcConfig::new(2, 2, 30, 100, 4, 17);
        let a = estimate_pc(&cfg).unwrap();
        let b = estimate_pc(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.p_hat > 0.0 && a.p_hat < 1.0);
        assert!(!a.non_monotone);
        assert!(estimate_pc(&PcConfig::new(2, 2, 30, 10, 4, 17)).is_err());
    }

    #[test]
    fn gw_threshold_limits() {
        // One generation: 1 - (1-p)^V = 1/2.
        let p = gw_threshold(24, 1, 0.5).unwrap();
        assert!((p - (1.0 - 2f64.powf(-1.0 / 24.0))).abs() < 1e-12);
        // Large V and horizon: Poisson(m) survival 1/2 at m = 2 ln 2.
        let v = 1_000_000;
        let m = gw_threshold(v, 2000, 0.5).unwrap() * v as f64;
        assert!((m - 2.0 * 2f64.ln()).abs() < 1e-3, "{m}");
        // Monotone in the horizon.
        assert!(gw_threshold(24, 5, 0.5).unwrap() < gw_threshold(24, 200, 0.5).unwrap());
    }

    #[test]
    fn fit_exact_power_laws() {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0].iter().map(|r| (*r, 2.0 / r)).collect();
        let f = scaling_fit_excess(&pts).unwrap();
        assert!((f.gamma_hat - 1.0).abs() < 1e-12 && (f.theta_hat - 2.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0].iter().map(|r| (*r, 3.0 / (r * r))).collect();
        let f = scaling_fit_excess(&pts).unwrap();
        assert!((f.gamma_hat - 2.0).abs() < 1e-12 && (f.theta_hat - 3.0).abs() < 1e-12);
        assert!(scaling_fit_excess(&[(2.0, 0.1), (4.0, -0.1), (8.0, 0.2)]).is_err());
        assert!(scaling_fit_excess(&[(2.0, 0.1), (4.0, 0.1)]).is_err());
    }

    #[test]
    fn scaling_fit_from_p_hat() {
        let pts: Vec<(i64, f64)> = [2i64, 4, 8]
            .iter()
            .map(|&r| {
                let v = ((2 * r + 1) * (2 * r + 1) - 1) as f64;
                (r, (1.0 + 0.5 / r as f64) / v)
            })
            .collect();
        let f = scaling_fit(&pts, 2).unwrap();
        assert!((f.gamma_hat - 1.0).abs() < 1e-9);
    }

    #[test]
    fn small_battery_passes() {
        let mut sc = MomentScenario::standard(5);
        sc.reps = 2000;
        let recs = moment_battery(&sc).unwrap();
        for r in &recs {
            assert!(r.pass, "{r:?}");
        }
        sc.lambda_fraction = 1.5;
        assert!(moment_battery(&sc).is_err());
    }
}

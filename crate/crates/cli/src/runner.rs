//! Seeded Monte-Carlo runner: builds the scenario from a configuration,
//! executes trials across schemes and the transmit-power sweep, and
//! aggregates NMSE statistics.
//!
//! Every trial derives its random streams from (base seed, scheme, power
//! index, trial index), so results are reproducible and independent of how
//! trials are scheduled across threads. Aggregation walks trials in index
//! order.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use riscade_core::estimator::{estimate, nmse, EstimatorConfig};
use riscade_core::model::{
    make_planar_bases, sample_channels, AngularBases, ChannelProfile, CovarianceSet, PathGains,
    PowerProfile, SystemDims,
};
use riscade_core::onoff::{estimate_all, simulate_onoff, OnOffPlan, RelativeMode};
use riscade_core::phase_opt::{
    build_gain_matrix, optimize_steering, SteeringVector, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use riscade_core::protocol::{
    build_phase_plan, build_pilots, preprocess, simulate_training, PhasePlan, PilotMatrix,
    TrainingRecord,
};

use crate::config::{dbm_to_mw, ExperimentConfig, Scheme};

/// Aggregated statistics of one (scheme, transmit power) cell.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub scheme: &'static str,
    pub power_dbm: f64,
    pub bs_antennas: usize,
    pub irs_elements: usize,
    pub users: usize,
    pub trials: usize,
    /// Trials excluded because the estimator failed.
    pub failed: usize,
    pub nmse_mean: f64,
    pub nmse_mean_db: f64,
    pub nmse_stderr: f64,
    pub iters_mean: f64,
    /// Wall-clock seconds spent on the cell. Reported through the API and
    /// the log only; the CSV stays byte-reproducible.
    pub wall_secs: f64,
}

/// Everything shared by all trials of one experiment.
pub struct Scenario {
    pub dims: SystemDims,
    pub bases: AngularBases,
    pub profile: ChannelProfile,
    pub covariances: CovarianceSet,
    pub pilots: PilotMatrix,
    /// Plan used by the proposed scheme (optimized or all-ones steering).
    pub proposed_plan: PhasePlan,
    pub onoff_plan: OnOffPlan,
    /// Offline sample covariances of the relative channels (users 1..K-1),
    /// present when the baseline runs in its shrinkage mode.
    pub relative_covariances: Option<Vec<riscade_core::CMat>>,
    /// Noise power before transmit-power scaling, in mW.
    pub noise_var_mw: f64,
    pub estimator: EstimatorConfig,
}

/// Draw count and fixed stream for the offline relative-covariance
/// estimates; independent of the experiment seed so a configuration always
/// produces the same baseline.
const RELATIVE_COV_DRAWS: u64 = 5_000;
const RELATIVE_COV_SEED: u64 = 0x0ff1_ce;

/// Runner failures (setup problems; individual trial failures are counted,
/// not raised).
#[derive(Debug)]
pub struct RunError(pub String);

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for RunError {}

impl From<riscade_core::Error> for RunError {
    fn from(e: riscade_core::Error) -> Self {
        RunError(e.to_string())
    }
}

/// Builds the scenario: geometry-derived path gains, closed-form
/// covariances (validated full rank), pilots, and phase plans.
pub fn build_scenario(cfg: &ExperimentConfig) -> Result<Scenario, RunError> {
    let dims = SystemDims::new(cfg.bs_antennas, cfg.irs_elements, cfg.users)?;
    let bases = make_planar_bases(&dims, cfg.irs_rows_effective())?;

    let reflect_loss = |d: f64| -> f64 {
        let db = cfg.pathloss_reflect_const_db + cfg.pathloss_reflect_slope_db * d.log10();
        10f64.powf(-db / 10.0)
    };
    let bs_irs_gain = reflect_loss(cfg.bs_irs_distance_m) * cfg.reflection_efficiency.powi(2);
    let mut irs_user = Vec::with_capacity(cfg.users);
    let mut direct = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let d_iu = cfg.user_distance(u);
        irs_user.push(reflect_loss(d_iu));
        let d_bu = (cfg.bs_irs_distance_m.powi(2) + d_iu.powi(2)).sqrt();
        let db = cfg.pathloss_direct_const_db
            + cfg.pathloss_direct_slope_db * d_bu.log10()
            + cfg.penetration_db;
        direct.push(10f64.powf(-db / 10.0));
    }
    let gains = PathGains {
        bs_irs: bs_irs_gain,
        irs_user,
        direct,
    };
    let profile = if cfg.angular_profile_peaked {
        let n = cfg.irs_elements;
        let m = cfg.bs_antennas;
        let bs_irs_power = PowerProfile::Peaked {
            decay: cfg.bs_irs_decay,
            center: cfg.bs_irs_center(),
        }
        .vector(n);
        let irs_user_power = (0..cfg.users)
            .map(|u| {
                PowerProfile::Peaked {
                    decay: cfg.user_decay,
                    center: cfg.user_sector_center(u),
                }
                .vector(n)
            })
            .collect();
        let direct_power = vec![
            PowerProfile::Exponential {
                decay: cfg.direct_decay
            }
            .vector(m);
            cfg.users
        ];
        ChannelProfile::new(dims, bs_irs_power, irs_user_power, direct_power, gains)?
    } else {
        ChannelProfile::from_profile(dims, &PowerProfile::Uniform, gains)?
    };
    let covariances = profile.covariances(&bases);
    covariances.validate(cfg.rank_tol)?;

    let pilots = build_pilots(cfg.users)?;
    let steering = if cfg.phase_opt {
        let gain = build_gain_matrix(&covariances, &dims)?;
        optimize_steering(
            &gain,
            &SteeringVector::ones(cfg.irs_elements),
            DEFAULT_TOL,
            DEFAULT_MAX_ITERS,
        )?
        .steering
    } else {
        SteeringVector::ones(cfg.irs_elements)
    };
    let proposed_plan = build_phase_plan(steering.entries(), &dims)?;
    let onoff_plan = OnOffPlan::new(dims);

    let relative_covariances = if cfg.onoff_lmmse && cfg.users > 1 {
        Some(gather_relative_covariances(&dims, &bases, &profile)?)
    } else {
        None
    };

    Ok(Scenario {
        dims,
        bases,
        profile,
        covariances,
        pilots,
        proposed_plan,
        onoff_plan,
        relative_covariances,
        noise_var_mw: cfg.noise_var_mw(),
        estimator: EstimatorConfig {
            max_iters: cfg.max_iters,
            tol: cfg.tol,
            ..EstimatorConfig::default()
        },
    })
}

/// Sample covariances of the relative channels h_u,k (surface-user vector
/// divided elementwise by the reference user's), gathered from seeded
/// offline draws of the channel model.
fn gather_relative_covariances(
    dims: &SystemDims,
    bases: &AngularBases,
    profile: &ChannelProfile,
) -> Result<Vec<riscade_core::CMat>, RunError> {
    let n = dims.irs_elements();
    let users = dims.users();
    let mut samples: Vec<Vec<riscade_core::CVec>> =
        vec![Vec::with_capacity(RELATIVE_COV_DRAWS as usize); users - 1];
    for t in 0..RELATIVE_COV_DRAWS {
        let ch = sample_channels(dims, bases, profile, RELATIVE_COV_SEED.wrapping_add(t))?;
        for user in 1..users {
            let rel = riscade_core::CVec::from_fn(n, |i, _| {
                ch.irs_user()[(i, user)] / ch.irs_user()[(i, 0)]
            });
            samples[user - 1].push(rel);
        }
    }
    samples
        .iter()
        .map(|s| Ok(riscade_core::model::estimate_covariance_from_samples(s)?))
        .collect()
}

/// splitmix64 round, used to derive independent seeds.
fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-trial seed chain from (base seed, scheme, power index, trial).
fn trial_seed(base: u64, scheme: Scheme, power_idx: usize, trial: usize) -> u64 {
    let s = mix(base ^ mix(scheme.seed_tag()));
    let s = mix(s ^ mix(power_idx as u64));
    mix(s ^ mix(trial as u64))
}

struct TrialOutcome {
    nmse: f64,
    iterations: usize,
}

fn run_trial(
    scenario: &Scenario,
    scheme: Scheme,
    noise_var: f64,
    base_seed: u64,
    power_idx: usize,
    trial: usize,
) -> Result<TrialOutcome, riscade_core::Error> {
    let seed = trial_seed(base_seed, scheme, power_idx, trial);
    let channel_seed = mix(seed ^ 1);
    let noise_seed = mix(seed ^ 2);
    let steering_seed = mix(seed ^ 3);

    let channels = sample_channels(&scenario.dims, &scenario.bases, &scenario.profile, channel_seed)?;
    let truth = channels.cascaded_all();

    match scheme {
        Scheme::Proposed | Scheme::ProposedRandomSteering => {
            let random_plan;
            let plan = if scheme == Scheme::ProposedRandomSteering {
                let mut rng = ChaCha8Rng::seed_from_u64(steering_seed);
                let steering =
                    SteeringVector::random(&mut rng, scenario.dims.irs_elements());
                random_plan = build_phase_plan(steering.entries(), &scenario.dims)?;
                &random_plan
            } else {
                &scenario.proposed_plan
            };
            let record = simulate_training(&channels, plan, &scenario.pilots, noise_var, noise_seed)?;
            let obs = preprocess(&record, &scenario.pilots)?;
            let est = estimate(
                &obs,
                plan,
                &scenario.pilots,
                &scenario.covariances,
                &scenario.estimator,
            )?;
            Ok(TrialOutcome {
                nmse: nmse(&est.cascaded, &truth)?,
                iterations: est.state.iterations(),
            })
        }
        Scheme::OnOff => {
            let obs = simulate_onoff(
                &channels,
                &scenario.onoff_plan,
                &scenario.pilots,
                noise_var,
                noise_seed,
            )?;
            let mode = match &scenario.relative_covariances {
                Some(covs) => RelativeMode::Shrinkage {
                    covariances: covs.clone(),
                    noise_var: riscade_core::onoff::CANCELLATION_NOISE_FACTOR * noise_var,
                },
                None => RelativeMode::LeastSquares,
            };
            let cascades = estimate_all(&obs, &scenario.onoff_plan, &mode, 0.0)?;
            Ok(TrialOutcome {
                nmse: nmse(&cascades, &truth)?,
                iterations: 0,
            })
        }
    }
}

/// Simulates one training record of the proposed scheme for record dumps.
pub fn sample_record(
    scenario: &Scenario,
    power_dbm: f64,
    base_seed: u64,
) -> Result<TrainingRecord, RunError> {
    let noise_var = scenario.noise_var_mw / dbm_to_mw(power_dbm);
    let seed = trial_seed(base_seed, Scheme::Proposed, 0, 0);
    let channels = sample_channels(
        &scenario.dims,
        &scenario.bases,
        &scenario.profile,
        mix(seed ^ 1),
    )?;
    Ok(simulate_training(
        &channels,
        &scenario.proposed_plan,
        &scenario.pilots,
        noise_var,
        mix(seed ^ 2),
    )?)
}

/// Runs the full experiment. Trials are independent and execute on the
/// current rayon pool; the output is identical for any thread count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>, RunError> {
    let scenario = build_scenario(cfg)?;
    run_scenario(&scenario, cfg)
}

/// [`run_experiment`] on an already-built scenario.
pub fn run_scenario(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<Vec<ResultRow>, RunError> {
    let mut rows = Vec::new();
    for &scheme in &cfg.schemes {
        for (power_idx, &power_dbm) in cfg.power_dbm.iter().enumerate() {
            let start = Instant::now();
            let noise_var = scenario.noise_var_mw / dbm_to_mw(power_dbm);
            let outcomes: Vec<Option<TrialOutcome>> = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| {
                    match run_trial(&scenario, scheme, noise_var, cfg.seed, power_idx, trial) {
                        Ok(out) => Some(out),
                        Err(e) => {
                            log::warn!(
                                "trial {trial} of {} at {power_dbm} dBm failed: {e}",
                                scheme.name()
                            );
                            None
                        }
                    }
                })
                .collect();

            let kept: Vec<&TrialOutcome> = outcomes.iter().flatten().collect();
            let failed = cfg.trials - kept.len();
            let n = kept.len();
            let (mean, stderr, iters_mean) = if n > 0 {
                let mean = kept.iter().map(|o| o.nmse).sum::<f64>() / n as f64;
                let var = if n > 1 {
                    kept.iter().map(|o| (o.nmse - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                let iters = kept.iter().map(|o| o.iterations as f64).sum::<f64>() / n as f64;
                (mean, (var / n as f64).sqrt(), iters)
            } else {
                (f64::NAN, f64::NAN, f64::NAN)
            };
            let row = ResultRow {
                scheme: scheme.name(),
                power_dbm,
                bs_antennas: cfg.bs_antennas,
                irs_elements: cfg.irs_elements,
                users: cfg.users,
                trials: cfg.trials,
                failed,
                nmse_mean: mean,
                nmse_mean_db: 10.0 * mean.log10(),
                nmse_stderr: stderr,
                iters_mean,
                wall_secs: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "{} @ {} dBm: NMSE {:.2} dB over {} trials ({} failed) in {:.2}s",
                row.scheme,
                row.power_dbm,
                row.nmse_mean_db,
                n,
                failed,
                row.wall_secs
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Format a float with 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Renders the versioned CSV: a schema line, a header line, then one row
/// per (scheme, power) cell. Floats carry 17 significant digits.
pub fn render_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("schema=1\n");
    out.push_str(
        "scheme,power_dbm,m,n,k,trials,failed,nmse_mean,nmse_mean_db,nmse_stderr,iters_mean\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.scheme,
            fmt_float(r.power_dbm),
            r.bs_antennas,
            r.irs_elements,
            r.users,
            r.trials,
            r.failed,
            fmt_float(r.nmse_mean),
            fmt_float(r.nmse_mean_db),
            fmt_float(r.nmse_stderr),
            fmt_float(r.iters_mean),
        ));
    }
    out
}

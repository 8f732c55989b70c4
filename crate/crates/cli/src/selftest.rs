//! Built-in invariant suite behind the `selftest` subcommand: one quick,
//! deterministic check per core invariant, with a pass/fail line each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use riscade_core::estimator::{estimate, nmse, EstimatorConfig};
use riscade_core::linalg::{self, c64, CMat, CVec};
use riscade_core::model::{
    make_angular_bases, sample_channels, ChannelProfile, PathGains, PowerProfile, SystemDims,
};
use riscade_core::phase_opt::{
    build_gain_matrix, eval_steering_gain, optimize_steering, SteeringVector, DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
};
use riscade_core::protocol::{build_phase_plan, build_pilots, preprocess, simulate_training};

type Check = (&'static str, fn() -> Result<(), String>);

fn desk_setup(
    seed: u64,
) -> (
    SystemDims,
    riscade_core::model::ChannelRealization,
    riscade_core::model::CovarianceSet,
    riscade_core::protocol::PhasePlan,
    riscade_core::protocol::PilotMatrix,
) {
    let dims = SystemDims::new(4, 16, 4).unwrap();
    let bases = make_angular_bases(&dims);
    let profile = ChannelProfile::from_profile(
        dims,
        &PowerProfile::Exponential { decay: 0.5 },
        PathGains::uniform(&dims, 1.0),
    )
    .unwrap();
    let channels = sample_channels(&dims, &bases, &profile, seed).unwrap();
    let covs = profile.covariances(&bases);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steering = linalg::random_unit_modulus(&mut rng, 16);
    let plan = build_phase_plan(&steering, &dims).unwrap();
    let pilots = build_pilots(4).unwrap();
    (dims, channels, covs, plan, pilots)
}

fn check_bases_unitary() -> Result<(), String> {
    let dims = SystemDims::new(4, 16, 2).map_err(|e| e.to_string())?;
    let bases = make_angular_bases(&dims);
    let err = (bases.irs().adjoint() * bases.irs() - CMat::identity(16, 16)).norm();
    if err < 1e-12 {
        Ok(())
    } else {
        Err(format!("surface basis unitarity error {err:.3e}"))
    }
}

fn check_pilot_orthogonality() -> Result<(), String> {
    let pilots = build_pilots(8).map_err(|e| e.to_string())?;
    let gram = pilots.matrix().adjoint() * pilots.matrix();
    let err = (gram - CMat::identity(8, 8) * c64(8.0, 0.0)).norm();
    if err < 1e-12 {
        Ok(())
    } else {
        Err(format!("pilot Gram error {err:.3e}"))
    }
}

fn check_plan_gram_trace() -> Result<(), String> {
    let dims = SystemDims::new(4, 16, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let steering = linalg::random_unit_modulus(&mut rng, 16);
    let plan = build_phase_plan(&steering, &dims).map_err(|e| e.to_string())?;
    let phi = plan.phase_matrix();
    let inv = linalg::invert_hermitian(&(&phi * phi.adjoint()), 0.0).map_err(|e| e.to_string())?;
    let trace: f64 = inv.diagonal().iter().map(|z| z.re).sum();
    if (trace - 1.0).abs() < 1e-10 {
        Ok(())
    } else {
        Err(format!("trace((Phi Phi^H)^-1) = {trace}"))
    }
}

fn check_covariances_psd_full_rank() -> Result<(), String> {
    let dims = SystemDims::new(4, 16, 4).unwrap();
    let bases = make_angular_bases(&dims);
    let profile = ChannelProfile::from_profile(
        dims,
        &PowerProfile::Exponential { decay: 0.5 },
        PathGains::uniform(&dims, 1.0),
    )
    .unwrap();
    profile
        .covariances(&bases)
        .validate(1e-9)
        .map_err(|e| e.to_string())
}

fn check_direct_cancellation() -> Result<(), String> {
    let (dims, channels, _, plan, pilots) = desk_setup(3);
    let record =
        simulate_training(&channels, &plan, &pilots, 0.0, 4).map_err(|e| e.to_string())?;
    let obs = preprocess(&record, &pilots).map_err(|e| e.to_string())?;
    for l in 1..=dims.stage1_slots() {
        let reflected = channels.bs_irs().transpose()
            * CMat::from_fn(16, 4, |i, u| plan.slot(l)[i] * channels.irs_user()[(i, u)]);
        let err = (obs.user_block(l) - &reflected).norm() / reflected.norm();
        if err > 1e-12 {
            return Err(format!("slot {l} cancellation residual {err:.3e}"));
        }
    }
    Ok(())
}

fn check_sample_bookkeeping() -> Result<(), String> {
    for (m, n, k, expected) in [(8, 32, 8, 68), (2, 4, 2, 8), (4, 16, 4, 32)] {
        let dims = SystemDims::new(m, n, k).unwrap();
        if dims.total_samples() != expected {
            return Err(format!(
                "M={m} N={n} K={k}: {} samples, expected {expected}",
                dims.total_samples()
            ));
        }
    }
    Ok(())
}

fn check_noiseless_recovery() -> Result<(), String> {
    let dims = SystemDims::new(2, 4, 2).unwrap();
    let bases = make_angular_bases(&dims);
    let profile = ChannelProfile::from_profile(
        dims,
        &PowerProfile::Uniform,
        PathGains::uniform(&dims, 1.0),
    )
    .unwrap();
    let channels = sample_channels(&dims, &bases, &profile, 5).unwrap();
    let covs = profile.covariances(&bases);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let plan = build_phase_plan(&linalg::random_unit_modulus(&mut rng, 4), &dims)
        .map_err(|e| e.to_string())?;
    let pilots = build_pilots(2).unwrap();
    let record = simulate_training(&channels, &plan, &pilots, 0.0, 7).unwrap();
    let obs = preprocess(&record, &pilots).unwrap();
    let est = estimate(&obs, &plan, &pilots, &covs, &EstimatorConfig::default())
        .map_err(|e| e.to_string())?;
    let err = nmse(&est.cascaded, &channels.cascaded_all()).unwrap();
    if err < 1e-10 {
        Ok(())
    } else {
        Err(format!("noiseless NMSE {err:.3e}"))
    }
}

fn check_objective_monotone() -> Result<(), String> {
    let (_, channels, covs, plan, pilots) = desk_setup(9);
    let record = simulate_training(&channels, &plan, &pilots, 1e-2, 10).unwrap();
    let obs = preprocess(&record, &pilots).unwrap();
    let est = estimate(&obs, &plan, &pilots, &covs, &EstimatorConfig::default())
        .map_err(|e| e.to_string())?;
    for w in est.state.objective().windows(2) {
        if w[1] < w[0] - 1e-9 {
            return Err(format!("objective dipped from {} to {}", w[0], w[1]));
        }
    }
    Ok(())
}

fn check_sca_ascent_unit_modulus() -> Result<(), String> {
    let dims = SystemDims::new(4, 16, 4).unwrap();
    let bases = make_angular_bases(&dims);
    let profile = ChannelProfile::from_profile(
        dims,
        &PowerProfile::Exponential { decay: 0.5 },
        PathGains::uniform(&dims, 1.0),
    )
    .unwrap();
    let covs = profile.covariances(&bases);
    let gain = build_gain_matrix(&covs, &dims).map_err(|e| e.to_string())?;
    let result = optimize_steering(
        &gain,
        &SteeringVector::ones(16),
        DEFAULT_TOL,
        DEFAULT_MAX_ITERS,
    )
    .map_err(|e| e.to_string())?;
    for w in result.trajectory.windows(2) {
        if w[1] < w[0] - 1e-10 {
            return Err(format!("SCA dipped from {} to {}", w[0], w[1]));
        }
    }
    for z in result.steering.entries().iter() {
        if (z.norm() - 1.0).abs() > 1e-12 {
            return Err(format!("iterate modulus {}", z.norm()));
        }
    }
    let ones_gain = eval_steering_gain(&SteeringVector::ones(16), &gain);
    let best = *result.trajectory.last().unwrap();
    if best + 1e-12 < ones_gain {
        return Err(format!("optimized gain {best} below start {ones_gain}"));
    }
    Ok(())
}

fn check_ambiguity_invariance() -> Result<(), String> {
    let (_, channels, covs, plan, pilots) = desk_setup(13);
    let record = simulate_training(&channels, &plan, &pilots, 1e-2, 14).unwrap();
    let obs = preprocess(&record, &pilots).unwrap();
    let cfg = EstimatorConfig::default();
    let problem =
        riscade_core::estimator::MapProblem::new(&obs, &plan, &pilots, &covs, &cfg)
            .map_err(|e| e.to_string())?;
    let state = problem.solve(&cfg).map_err(|e| e.to_string())?;
    let f0 = problem.objective(state.common(), state.user());
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let scale = CVec::from_fn(16, |_, _| {
        let v = linalg::random_unit_modulus(&mut rng, 1)[0];
        v * c64(1.7, 0.0)
    });
    let common = CMat::from_fn(16, 4, |i, a| state.common()[(i, a)] * scale[i]);
    let user = CMat::from_fn(16, 4, |i, u| state.user()[(i, u)] / scale[i]);
    let f1 = problem.objective(&common, &user);
    if (f1 - f0).abs() <= 1e-10 * f0.abs() {
        Ok(())
    } else {
        Err(format!("objective moved from {f0} to {f1}"))
    }
}

/// Runs every check, printing one line per invariant. Returns false if any
/// check failed.
pub fn run_selftest() -> bool {
    let checks: Vec<Check> = vec![
        ("angular bases unitary", check_bases_unitary),
        ("pilot orthogonality", check_pilot_orthogonality),
        ("phase plan gram trace", check_plan_gram_trace),
        ("covariances psd and full rank", check_covariances_psd_full_rank),
        ("direct-channel cancellation", check_direct_cancellation),
        ("sample bookkeeping", check_sample_bookkeeping),
        ("noiseless exact recovery", check_noiseless_recovery),
        ("objective monotone ascent", check_objective_monotone),
        ("sca ascent and feasibility", check_sca_ascent_unit_modulus),
        ("factor ambiguity invariance", check_ambiguity_invariance),
    ];
    let mut ok = true;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                ok = false;
            }
        }
    }
    ok
}

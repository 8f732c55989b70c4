//! Selected on-off baseline protocol.
//!
//! The comparison baseline estimates one reference user's cascaded channel
//! with every surface element reflecting, then recovers the remaining
//! users' channels relative to the reference by switching on one
//! antenna-sized block of elements per slot. The block structure makes each
//! slot a square (or skinny) linear system in the reference channel's
//! columns, so reference errors propagate into every relative estimate.
//!
//! Direct-channel contributions are removed exactly from the reflected
//! stages, mirroring the preprocessing advantage of the always-on protocol
//! so the comparison isolates the cascaded stage. The removal carries the
//! same cost as there: the effective noise on direct-free observations is
//! 3/2 of the raw level.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{self, c64, CMat, CVec};
use crate::model::{ChannelRealization, SystemDims};
use crate::protocol::PilotMatrix;
use crate::{Error, Result};

/// Noise-variance factor on direct-free observations, matching the cost of
/// the always-on protocol's cancellation.
pub const CANCELLATION_NOISE_FACTOR: f64 = 1.5;

/// Timeline of the on-off protocol: a direct-estimation slot block, N
/// reference slots with the full surface on, and per-user block-activation
/// slots. The reference user is user 0.
#[derive(Debug, Clone)]
pub struct OnOffPlan {
    dims: SystemDims,
    reference_phase: CMat,
    masks: Vec<DVector<f64>>,
}

impl OnOffPlan {
    /// Builds the plan: an orthogonal DFT configuration for the reference
    /// stage and element-block masks of size min(M, remaining) that
    /// partition the surface over ceil(N/M) slots.
    pub fn new(dims: SystemDims) -> Self {
        let n = dims.irs_elements();
        let m = dims.bs_antennas();
        let masks = (0..dims.stage1_slots())
            .map(|b| {
                DVector::from_fn(n, |i, _| {
                    if i >= b * m && i < ((b + 1) * m).min(n) {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Self {
            dims,
            reference_phase: linalg::dft_matrix(n),
            masks,
        }
    }

    pub fn dims(&self) -> &SystemDims {
        &self.dims
    }

    /// Orthogonal phase configuration of the reference stage (N x N).
    pub fn reference_phase(&self) -> &CMat {
        &self.reference_phase
    }

    /// Stage-III element masks, one per block slot.
    pub fn masks(&self) -> &[DVector<f64>] {
        &self.masks
    }

    /// Pilot overhead: K direct samples, N reference samples, and
    /// ceil(N/M) block samples for each of the other K-1 users.
    pub fn total_samples(&self) -> usize {
        let d = &self.dims;
        d.users() + d.irs_elements() + d.stage1_slots() * (d.users() - 1)
    }
}

/// Received samples of one on-off training block, with direct-channel
/// contributions already removed from the reflected stages.
#[derive(Debug, Clone)]
pub struct OnOffObservations {
    direct_stage: CMat,
    reference_stage: CMat,
    relative_stage: Vec<CMat>,
    noise_var: f64,
}

impl OnOffObservations {
    /// Direct-estimation block (M x K), surface off.
    pub fn direct_stage(&self) -> &CMat {
        &self.direct_stage
    }

    /// Reference-stage samples (M x N).
    pub fn reference_stage(&self) -> &CMat {
        &self.reference_stage
    }

    /// Block-activation samples of user k (M x ceil(N/M)), k = 1..K-1.
    pub fn relative_stage(&self, user: usize) -> &CMat {
        &self.relative_stage[user - 1]
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn total_samples(&self) -> usize {
        self.direct_stage.ncols()
            + self.reference_stage.ncols()
            + self.relative_stage.iter().map(|o| o.ncols()).sum::<usize>()
    }
}

/// Simulates the on-off training block. Deterministic given the seed.
pub fn simulate_onoff(
    channels: &ChannelRealization,
    plan: &OnOffPlan,
    pilots: &PilotMatrix,
    noise_var: f64,
    seed: u64,
) -> Result<OnOffObservations> {
    let dims = channels.dims();
    if *plan.dims() != dims || pilots.users() != dims.users() {
        return Err(Error::shape(
            "plan or pilots inconsistent with channel dims".to_string(),
        ));
    }
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::invalid("noise variance must be finite and >= 0"));
    }
    let m = dims.bs_antennas();
    let n = dims.irs_elements();
    let k = dims.users();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |rows: usize, var: f64| -> CVec {
        if var > 0.0 {
            linalg::complex_gaussian_vector(&mut rng, rows) * c64(var.sqrt(), 0.0)
        } else {
            CVec::zeros(rows)
        }
    };
    let removed_var = CANCELLATION_NOISE_FACTOR * noise_var;

    // Direct stage: surface off, all users transmit the pilot matrix.
    let mut direct_stage = channels.direct() * pilots.matrix();
    for j in 0..k {
        let z = noise(m, noise_var);
        for i in 0..m {
            direct_stage[(i, j)] += z[i];
        }
    }

    // Reference stage: only user 0 transmits; direct part removed at the
    // cancellation noise cost.
    let reference_channel = channels.cascaded(0);
    let mut reference_stage = CMat::zeros(m, n);
    for l in 0..n {
        let theta = CVec::from(plan.reference_phase().column(l));
        let y = &reference_channel * theta + noise(m, removed_var);
        reference_stage.set_column(l, &y);
    }

    // Block stage: each remaining user alone, one element block per slot.
    let blocks = plan.masks().len();
    let mut relative_stage = Vec::with_capacity(k - 1);
    for user in 1..k {
        let cascaded = channels.cascaded(user);
        let mut obs = CMat::zeros(m, blocks);
        for (b, mask) in plan.masks().iter().enumerate() {
            let theta = CVec::from_fn(n, |i, _| c64(mask[i], 0.0));
            let y = &cascaded * theta + noise(m, removed_var);
            obs.set_column(b, &y);
        }
        relative_stage.push(obs);
    }

    Ok(OnOffObservations {
        direct_stage,
        reference_stage,
        relative_stage,
        noise_var,
    })
}

/// Least-squares reconstruction of the reference user's cascaded channel
/// from the reference stage: Y Phi^{-1}.
pub fn estimate_reference(observations: &CMat, phase: &CMat) -> Result<CMat> {
    let n = phase.nrows();
    if phase.ncols() != n || observations.ncols() != n {
        return Err(Error::shape(format!(
            "reference stage is {}x{}, phase is {}x{}",
            observations.nrows(),
            observations.ncols(),
            phase.nrows(),
            phase.ncols()
        )));
    }
    // H = Y Phi^{-1} solves Phi^T H^T = Y^T.
    let solved = phase
        .transpose()
        .lu()
        .solve(&observations.transpose())
        .ok_or_else(|| Error::singular("reference phase configuration is singular".to_string()))?;
    Ok(solved.transpose())
}

/// How the per-block linear systems of the relative stage are solved.
#[derive(Debug, Clone)]
pub enum RelativeMode {
    /// Plain (regularized on failure) least squares.
    LeastSquares,
    /// Shrinkage toward zero using caller-supplied covariances of the
    /// relative channels (one N x N matrix per non-reference user, e.g.
    /// sample covariances gathered offline) and the observation noise level.
    Shrinkage {
        covariances: Vec<CMat>,
        noise_var: f64,
    },
}

/// Recovers the relative channels of users 1..K-1 from the block stage,
/// then scales the reference estimate by them. Returns one length-N vector
/// per non-reference user.
pub fn estimate_relative(
    observations: &OnOffObservations,
    reference: &CMat,
    masks: &[DVector<f64>],
    mode: &RelativeMode,
    reg_eps: f64,
) -> Result<Vec<CVec>> {
    let m = reference.nrows();
    let n = reference.ncols();
    let users = observations.relative_stage.len();
    if let RelativeMode::Shrinkage { covariances, .. } = mode {
        if covariances.len() != users {
            return Err(Error::shape(
                "need one relative covariance per non-reference user".to_string(),
            ));
        }
    }
    let mut relatives = Vec::with_capacity(users);
    for user in 1..=users {
        let obs = observations.relative_stage(user);
        if obs.nrows() != m || obs.ncols() != masks.len() {
            return Err(Error::shape("block stage shape mismatch".to_string()));
        }
        let mut relative = CVec::zeros(n);
        for (b, mask) in masks.iter().enumerate() {
            let active: Vec<usize> = (0..n).filter(|&i| mask[i] != 0.0).collect();
            let block = CMat::from_fn(m, active.len(), |r, c| reference[(r, active[c])]);
            let y = CMat::from_iterator(m, 1, obs.column(b).iter().copied());
            let solved = match mode {
                RelativeMode::LeastSquares => solve_block(&block, &y, reg_eps)?,
                RelativeMode::Shrinkage {
                    covariances,
                    noise_var,
                } => {
                    let cov = &covariances[user - 1];
                    if cov.nrows() != n || cov.ncols() != n {
                        return Err(Error::shape(
                            "relative covariance has wrong size".to_string(),
                        ));
                    }
                    let cov_block =
                        CMat::from_fn(active.len(), active.len(), |r, c| {
                            cov[(active[r], active[c])]
                        });
                    shrinkage_solve(&block, &cov_block, &y, *noise_var, reg_eps)?
                }
            };
            for (c, &i) in active.iter().enumerate() {
                relative[i] = solved[(c, 0)];
            }
        }
        relatives.push(relative);
    }
    Ok(relatives)
}

/// Square blocks go through LU; skinny blocks and singular squares fall
/// back to (ridged) normal equations.
fn solve_block(block: &CMat, y: &CMat, reg_eps: f64) -> Result<CMat> {
    if block.nrows() == block.ncols() {
        if let Some(x) = block.clone().lu().solve(y) {
            return Ok(x);
        }
        log::warn!("singular reference block, switching to regularized solve");
    }
    let normal = block.adjoint() * block;
    let rhs = block.adjoint() * y;
    linalg::solve_hermitian(&normal, &rhs, if reg_eps > 0.0 { reg_eps } else { 1e-12 })
}

/// x = C A^H (A C A^H + noise I)^{-1} y; with zero noise and a square
/// invertible block this reduces to the exact solve.
fn shrinkage_solve(
    block: &CMat,
    cov: &CMat,
    y: &CMat,
    noise_var: f64,
    reg_eps: f64,
) -> Result<CMat> {
    let m = block.nrows();
    let gram = block * cov * block.adjoint() + CMat::identity(m, m) * c64(noise_var, 0.0);
    let solved = linalg::solve_hermitian(&gram, y, if reg_eps > 0.0 { reg_eps } else { 1e-12 })?;
    Ok(cov * block.adjoint() * solved)
}

/// Full baseline pipeline: reference reconstruction, relative-channel
/// recovery, and assembly of every user's cascaded estimate.
pub fn estimate_all(
    observations: &OnOffObservations,
    plan: &OnOffPlan,
    mode: &RelativeMode,
    reg_eps: f64,
) -> Result<Vec<CMat>> {
    let reference = estimate_reference(observations.reference_stage(), plan.reference_phase())?;
    let relatives = estimate_relative(observations, &reference, plan.masks(), mode, reg_eps)?;
    let mut cascades = Vec::with_capacity(relatives.len() + 1);
    let n = reference.ncols();
    let m = reference.nrows();
    cascades.push(reference.clone());
    for rel in &relatives {
        cascades.push(CMat::from_fn(m, n, |r, c| reference[(r, c)] * rel[c]));
    }
    Ok(cascades)
}

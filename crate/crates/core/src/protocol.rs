//! Training protocol: pilots, phase plans, received-signal simulation, and
//! the preprocessing that removes the direct channels from the observations.
//!
//! The protocol has two stages. Stage I spans slots 0..=L1 and carries the
//! full orthogonal pilot matrix (K samples per slot); stage II spans slots
//! L1+1..=N with a single sample per slot in which every user transmits the
//! shared pilot (the first pilot column). Slot 0 repeats slot 1 with the
//! negated phase vector, so sums and differences of the two cancel either
//! the reflected or the direct path exactly.

use nalgebra::DVector;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{self, c64, CMat, CVec};
use crate::model::{ChannelRealization, SystemDims};
use crate::{Error, Result};

/// Tolerance for unit-modulus checks on steering entries.
const UNIT_MODULUS_TOL: f64 = 1e-9;
/// Relative floor below which a virtual-reference entry triggers a warning.
const VIRTUAL_REF_COND_TOL: f64 = 1e-6;

/// Orthogonal unit-modulus pilot matrix (the K-point DFT), X^H X = K I.
#[derive(Debug, Clone)]
pub struct PilotMatrix {
    matrix: CMat,
}

/// Builds the K-point DFT pilot matrix. Its first column is all-ones, which
/// plays the shared-pilot role in stage II.
pub fn build_pilots(users: usize) -> Result<PilotMatrix> {
    if users == 0 {
        return Err(Error::invalid("pilot matrix needs at least one user"));
    }
    Ok(PilotMatrix {
        matrix: linalg::dft_matrix(users),
    })
}

impl PilotMatrix {
    pub fn users(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    /// Shared pilot: the first column of the matrix (all-ones for the DFT).
    pub fn shared_pilot(&self) -> CVec {
        CVec::from(self.matrix.column(0))
    }

    /// Exact inverse X^H / K, valid because the columns are orthogonal with
    /// squared norm K.
    pub fn inverse(&self) -> CMat {
        self.matrix.adjoint() / c64(self.users() as f64, 0.0)
    }
}

/// Per-slot phase vectors for the whole training block, plus the steering
/// vector they were built from and per-slot amplitude masks (all-ones here;
/// the on-off baseline keeps its own masked plan).
#[derive(Debug, Clone)]
pub struct PhasePlan {
    slots: Vec<CVec>,
    steering: CVec,
    masks: Vec<DVector<f64>>,
}

/// Builds the phase plan theta_l = diag(steering) f_l for slots 1..=N, where
/// f_l is the l-th column of the unnormalized N-point DFT, and
/// theta_0 = -theta_1.
pub fn build_phase_plan(steering: &CVec, dims: &SystemDims) -> Result<PhasePlan> {
    let n = dims.irs_elements();
    if steering.len() != n {
        return Err(Error::shape(format!(
            "steering vector has length {}, expected {n}",
            steering.len()
        )));
    }
    for (i, z) in steering.iter().enumerate() {
        if (z.norm() - 1.0).abs() > UNIT_MODULUS_TOL {
            return Err(Error::invalid(format!(
                "steering entry {i} has modulus {:.6}, expected 1",
                z.norm()
            )));
        }
    }
    let dft = linalg::dft_matrix(n);
    let mut slots = Vec::with_capacity(n + 1);
    slots.push(CVec::zeros(n)); // placeholder for slot 0
    for l in 1..=n {
        let col = dft.column(l - 1);
        slots.push(CVec::from_fn(n, |i, _| steering[i] * col[i]));
    }
    slots[0] = -&slots[1];
    let masks = vec![DVector::from_element(n, 1.0); n + 1];
    Ok(PhasePlan {
        slots,
        steering: steering.clone(),
        masks,
    })
}

impl PhasePlan {
    /// Number of surface elements N.
    pub fn elements(&self) -> usize {
        self.steering.len()
    }

    /// Phase vector of one slot, l in 0..=N.
    pub fn slot(&self, l: usize) -> &CVec {
        &self.slots[l]
    }

    /// Amplitude mask of one slot.
    pub fn mask(&self, l: usize) -> &DVector<f64> {
        &self.masks[l]
    }

    /// Mask-weighted phase vector actually applied by the surface in slot l.
    pub fn effective_slot(&self, l: usize) -> CVec {
        CVec::from_fn(self.elements(), |i, _| self.slots[l][i] * self.masks[l][i])
    }

    pub fn steering(&self) -> &CVec {
        &self.steering
    }

    /// Phase configuration matrix Phi = [theta_1, ..., theta_N].
    pub fn phase_matrix(&self) -> CMat {
        let n = self.elements();
        CMat::from_fn(n, n, |i, j| self.slots[j + 1][i])
    }

    /// Replaces the per-slot amplitude masks (entries must be 0 or 1).
    pub fn with_masks(mut self, masks: Vec<DVector<f64>>) -> Result<Self> {
        if masks.len() != self.slots.len() {
            return Err(Error::shape(format!(
                "expected {} masks, got {}",
                self.slots.len(),
                masks.len()
            )));
        }
        for mask in &masks {
            if mask.len() != self.elements() {
                return Err(Error::shape("mask length != element count".to_string()));
            }
            if mask.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::invalid("mask entries must be 0 or 1".to_string()));
            }
        }
        self.masks = masks;
        Ok(self)
    }
}

/// Raw received samples of one training block, in transmission order.
#[derive(Debug, Clone)]
pub struct TrainingRecord {
    samples: Vec<CVec>,
    dims: SystemDims,
    noise_var: f64,
}

impl TrainingRecord {
    pub fn dims(&self) -> &SystemDims {
        &self.dims
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// All received samples; index t-1 holds the t-th sample.
    pub fn samples(&self) -> &[CVec] {
        &self.samples
    }

    pub fn total_samples(&self) -> usize {
        self.samples.len()
    }

    /// Returns a copy with a different declared noise level. Useful when the
    /// observations were synthesized noiselessly but downstream weighting
    /// should assume a given level.
    pub fn with_noise_var(mut self, noise_var: f64) -> Self {
        self.noise_var = noise_var;
        self
    }

    /// Received block of one stage-I slot (M x K), slot in 0..=L1.
    pub fn stage1_block(&self, slot: usize) -> CMat {
        let k = self.dims.users();
        let m = self.dims.bs_antennas();
        assert!(slot <= self.dims.stage1_slots(), "slot {slot} not in stage I");
        let mut block = CMat::zeros(m, k);
        for j in 0..k {
            block.set_column(j, &self.samples[k * slot + j]);
        }
        block
    }

    /// The sample in which all users sent the shared pilot while the surface
    /// applied the phase vector of `slot` (0..=N).
    pub fn shared_pilot_sample(&self, slot: usize) -> &CVec {
        let t = shared_pilot_sample_index(slot, &self.dims);
        &self.samples[t - 1]
    }
}

/// 1-based index of the shared-pilot sample for a slot: the first sample of
/// the slot during stage I, the slot's only sample during stage II.
pub fn shared_pilot_sample_index(slot: usize, dims: &SystemDims) -> usize {
    let l1 = dims.stage1_slots();
    let k = dims.users();
    assert!(slot <= dims.irs_elements(), "slot {slot} out of range");
    if slot <= l1 {
        1 + k * slot
    } else {
        slot + (k - 1) * l1 + k
    }
}

/// Simulates the received samples of the full training block. Deterministic
/// given the seed; noise is i.i.d. circularly-symmetric Gaussian with
/// variance `noise_var` per entry.
pub fn simulate_training(
    channels: &ChannelRealization,
    plan: &PhasePlan,
    pilots: &PilotMatrix,
    noise_var: f64,
    seed: u64,
) -> Result<TrainingRecord> {
    let dims = channels.dims();
    let m = dims.bs_antennas();
    let n = dims.irs_elements();
    let k = dims.users();
    if plan.elements() != n {
        return Err(Error::shape(format!(
            "phase plan has {} elements, channels have {n}",
            plan.elements()
        )));
    }
    if pilots.users() != k {
        return Err(Error::shape(format!(
            "pilot matrix is for {} users, channels have {k}",
            pilots.users()
        )));
    }
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::invalid("noise variance must be finite and >= 0"));
    }

    let shared = pilots.shared_pilot();
    let reference = channels.irs_user() * &shared;
    let mean_mag: f64 = reference.iter().map(|z| z.norm()).sum::<f64>() / n as f64;
    if reference
        .iter()
        .any(|z| z.norm() < VIRTUAL_REF_COND_TOL * mean_mag)
    {
        log::warn!("virtual reference channel has a near-zero entry; conditioning may suffer");
    }

    let l1 = dims.stage1_slots();
    let sigma = noise_var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(dims.total_samples());

    for slot in 0..=l1 {
        let effective = combined_channel(channels, &plan.effective_slot(slot));
        for j in 0..k {
            let pilot_col = CVec::from(pilots.matrix().column(j));
            let mut y = &effective * pilot_col;
            if sigma > 0.0 {
                y += linalg::complex_gaussian_vector(&mut rng, m) * c64(sigma, 0.0);
            }
            samples.push(y);
        }
    }
    for slot in l1 + 1..=n {
        let effective = combined_channel(channels, &plan.effective_slot(slot));
        let mut y = &effective * &shared;
        if sigma > 0.0 {
            y += linalg::complex_gaussian_vector(&mut rng, m) * c64(sigma, 0.0);
        }
        samples.push(y);
    }
    debug_assert_eq!(samples.len(), dims.total_samples());

    Ok(TrainingRecord {
        samples,
        dims,
        noise_var,
    })
}

/// H_d + G^T diag(theta) H_r for one slot.
fn combined_channel(channels: &ChannelRealization, theta: &CVec) -> CMat {
    let n = channels.bs_irs().nrows();
    let scaled = CMat::from_fn(n, channels.irs_user().ncols(), |i, j| {
        theta[i] * channels.irs_user()[(i, j)]
    });
    channels.direct() + channels.bs_irs().transpose() * scaled
}

/// Effective noise variances of the preprocessed observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseProfile {
    /// Variance in the first user block (slot 1).
    pub first_block: f64,
    /// Variance in user blocks of slots 2..=L1.
    pub later_block: f64,
    /// Variance in the shared-pilot vectors.
    pub shared: f64,
}

impl NoiseProfile {
    pub fn from_base(noise_var: f64, users: usize) -> Self {
        NoiseProfile {
            first_block: noise_var / (2.0 * users as f64),
            later_block: 1.5 * noise_var / users as f64,
            shared: 1.5 * noise_var,
        }
    }

    /// Variance of the user block at 1-based slot l.
    pub fn block(&self, l: usize) -> f64 {
        if l == 1 {
            self.first_block
        } else {
            self.later_block
        }
    }
}

/// Direct-channel-free observations derived from one training record.
#[derive(Debug, Clone)]
pub struct PreprocessedObs {
    direct_obs: CMat,
    user_blocks: Vec<CMat>,
    shared_obs: Vec<CVec>,
    noise: NoiseProfile,
    base_noise_var: f64,
    dims: SystemDims,
}

/// Removes the direct channels from the record: differences against the
/// sum/difference of slots 0 and 1 cancel H_d exactly, and the pilot inverse
/// strips the pilot matrix from the stage-I blocks.
pub fn preprocess(record: &TrainingRecord, pilots: &PilotMatrix) -> Result<PreprocessedObs> {
    let dims = *record.dims();
    let k = dims.users();
    let l1 = dims.stage1_slots();
    let n = dims.irs_elements();
    if pilots.users() != k {
        return Err(Error::shape("pilot matrix size != user count".to_string()));
    }
    if record.total_samples() != dims.total_samples() {
        return Err(Error::invalid(format!(
            "record holds {} samples, protocol requires {}",
            record.total_samples(),
            dims.total_samples()
        )));
    }
    let x_inv = pilots.inverse();
    let y0 = record.stage1_block(0);
    let y1 = record.stage1_block(1);
    let base = (&y0 + &y1) * c64(0.5, 0.0);
    let direct_obs = &base * &x_inv;

    let mut user_blocks = Vec::with_capacity(l1);
    user_blocks.push((&y1 - &y0) * c64(0.5, 0.0) * &x_inv);
    for slot in 2..=l1 {
        user_blocks.push((record.stage1_block(slot) - &base) * &x_inv);
    }

    let bar0 = record.shared_pilot_sample(0);
    let bar1 = record.shared_pilot_sample(1);
    let shared_base = (bar0 + bar1) * c64(0.5, 0.0);
    let shared_obs: Vec<CVec> = (1..=n)
        .map(|slot| record.shared_pilot_sample(slot) - &shared_base)
        .collect();

    Ok(PreprocessedObs {
        direct_obs,
        user_blocks,
        shared_obs,
        noise: NoiseProfile::from_base(record.noise_var(), k),
        base_noise_var: record.noise_var(),
        dims,
    })
}

impl PreprocessedObs {
    /// Builds observations directly; lengths must match the dims. Mostly for
    /// synthetic-data tests.
    pub fn new(
        dims: SystemDims,
        direct_obs: CMat,
        user_blocks: Vec<CMat>,
        shared_obs: Vec<CVec>,
        base_noise_var: f64,
    ) -> Result<Self> {
        if user_blocks.len() != dims.stage1_slots() || shared_obs.len() != dims.irs_elements() {
            return Err(Error::shape(
                "observation counts do not match protocol lengths".to_string(),
            ));
        }
        let noise = NoiseProfile::from_base(base_noise_var, dims.users());
        Ok(Self {
            direct_obs,
            user_blocks,
            shared_obs,
            noise,
            base_noise_var,
            dims,
        })
    }

    pub fn dims(&self) -> &SystemDims {
        &self.dims
    }

    /// Pilot-free observation of the direct channels (M x K).
    pub fn direct_obs(&self) -> &CMat {
        &self.direct_obs
    }

    /// Pilot-free user block of 1-based slot l (M x K), l in 1..=L1.
    pub fn user_block(&self, l: usize) -> &CMat {
        &self.user_blocks[l - 1]
    }

    /// Shared-pilot observation of 1-based slot l (length M), l in 1..=N.
    pub fn shared_ob(&self, l: usize) -> &CVec {
        &self.shared_obs[l - 1]
    }

    pub fn noise(&self) -> &NoiseProfile {
        &self.noise
    }

    pub fn base_noise_var(&self) -> f64 {
        self.base_noise_var
    }
}

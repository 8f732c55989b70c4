//! Training phase-shift configuration.
//!
//! The steering vector multiplies every column of the DFT-based phase plan,
//! so it redirects the reflected energy of the multi-pilot slots without
//! disturbing the orthogonality of the plan. The objective is the average
//! reflected power those slots collect, a Hermitian quadratic form in the
//! steering vector built from the cascaded covariances; it is maximized
//! under unit-modulus constraints by successive convex approximation, whose
//! surrogate maximizer is a plain phase projection.

use rand::Rng;

use crate::linalg::{self, c64, CMat, CVec};
use crate::model::{CovarianceSet, SystemDims};
use crate::{Error, Result};

/// Default relative objective-change tolerance of [`optimize_steering`].
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default iteration cap of [`optimize_steering`].
pub const DEFAULT_MAX_ITERS: usize = 200;

const UNIT_MODULUS_TOL: f64 = 1e-12;

/// Unit-modulus steering vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    entries: CVec,
}

impl SteeringVector {
    pub fn new(entries: CVec) -> Result<Self> {
        for (i, z) in entries.iter().enumerate() {
            if (z.norm() - 1.0).abs() > UNIT_MODULUS_TOL {
                return Err(Error::invalid(format!(
                    "steering entry {i} has modulus {:.15}, expected 1",
                    z.norm()
                )));
            }
        }
        Ok(Self { entries })
    }

    /// All-ones steering (the plan degenerates to the pure DFT).
    pub fn ones(n: usize) -> Self {
        Self {
            entries: CVec::from_element(n, c64(1.0, 0.0)),
        }
    }

    /// Independent uniform random phases.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        Self {
            entries: linalg::random_unit_modulus(rng, n),
        }
    }

    pub fn entries(&self) -> &CVec {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The N x N Hermitian PSD matrix behind the steering objective, plus the
/// protocol sizes it was built for.
#[derive(Debug, Clone)]
pub struct GainMatrix {
    matrix: CMat,
    stage1_slots: usize,
    users: usize,
    antennas: usize,
}

impl GainMatrix {
    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn stage1_slots(&self) -> usize {
        self.stage1_slots
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }
}

/// Accumulates the gain matrix: for every multi-pilot slot the conjugated
/// cascaded covariances are congruence-transformed by that slot's DFT
/// column, then everything is summed over slots, users, and antennas.
pub fn build_gain_matrix(covariances: &CovarianceSet, dims: &SystemDims) -> Result<GainMatrix> {
    let n = dims.irs_elements();
    let m = dims.bs_antennas();
    let k = dims.users();
    let l1 = dims.stage1_slots();
    if covariances.antennas() != m || covariances.users() != k {
        return Err(Error::shape(
            "covariance set does not match the requested dims".to_string(),
        ));
    }
    let mut summed = CMat::zeros(n, n);
    for antenna in 0..m {
        for user in 0..k {
            let c = covariances.cascaded(antenna, user);
            if c.nrows() != n || c.ncols() != n {
                return Err(Error::shape(format!(
                    "cascaded covariance ({antenna},{user}) is {}x{}, expected {n}x{n}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            summed += c.conjugate();
        }
    }
    let dft = linalg::dft_matrix(n);
    let mut matrix = CMat::zeros(n, n);
    for l in 0..l1 {
        let f = dft.column(l);
        for i in 0..n {
            for j in 0..n {
                matrix[(i, j)] += f[i].conj() * summed[(i, j)] * f[j];
            }
        }
    }
    Ok(GainMatrix {
        matrix,
        stage1_slots: l1,
        users: k,
        antennas: m,
    })
}

/// Average reflected stage-I power collected by a steering vector.
pub fn eval_steering_gain(steering: &SteeringVector, gain: &GainMatrix) -> f64 {
    let v = steering.entries();
    (v.adjoint() * gain.matrix() * v)[(0, 0)].re
}

/// One surrogate-maximization step: project the matrix-vector product onto
/// unit modulus. Entries where the product vanishes keep their phase.
pub fn sca_step(current: &SteeringVector, gain: &GainMatrix) -> SteeringVector {
    let w = gain.matrix() * current.entries();
    let entries = CVec::from_fn(w.len(), |i, _| {
        let mag = w[i].norm();
        if mag == 0.0 {
            current.entries()[i]
        } else {
            w[i] / c64(mag, 0.0)
        }
    });
    SteeringVector { entries }
}

/// Outcome of the steering optimization.
#[derive(Debug, Clone)]
pub struct SteeringResult {
    pub steering: SteeringVector,
    /// Objective value at the initial point and after every step.
    pub trajectory: Vec<f64>,
}

/// Iterates [`sca_step`] until the objective stalls (relative change below
/// `tol`) or `max_iters` steps. The trajectory is non-decreasing.
pub fn optimize_steering(
    gain: &GainMatrix,
    init: &SteeringVector,
    tol: f64,
    max_iters: usize,
) -> Result<SteeringResult> {
    if init.len() != gain.matrix().nrows() {
        return Err(Error::shape(format!(
            "steering length {} does not match gain matrix size {}",
            init.len(),
            gain.matrix().nrows()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mut current = init.clone();
    let mut f = eval_steering_gain(&current, gain);
    let mut trajectory = vec![f];
    for _ in 0..max_iters {
        let next = sca_step(&current, gain);
        let f_next = eval_steering_gain(&next, gain);
        trajectory.push(f_next);
        current = next;
        if (f_next - f).abs() <= tol * f_next.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        f = f_next;
    }
    Ok(SteeringResult {
        steering: current,
        trajectory,
    })
}

/// First-order surrogate of the objective at an expansion point.
pub fn surrogate(
    steering: &SteeringVector,
    expansion: &SteeringVector,
    gain: &GainMatrix,
) -> f64 {
    let v = steering.entries();
    let vb = expansion.entries();
    let cross = (vb.adjoint() * gain.matrix() * v)[(0, 0)];
    let anchor = (vb.adjoint() * gain.matrix() * vb)[(0, 0)];
    2.0 * cross.re - anchor.re
}

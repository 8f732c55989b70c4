//! System dimensions, angular-domain channel synthesis, and covariance
//! algebra for the cascaded surface channel.
//!
//! Channels are generated in an angular domain: the BS-surface matrix and the
//! surface-user vectors are unitary-DFT transforms of independent
//! circularly-symmetric Gaussians with diagonal per-angle power. This keeps
//! every cascaded covariance available in closed form (a Hadamard product of
//! the two link covariances), which is exactly the prior the estimator uses.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{self, c64, CMat, CVec};
use crate::{Error, Result};

/// Array sizes of the system plus the derived training-stage lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemDims {
    bs_antennas: usize,
    irs_elements: usize,
    users: usize,
}

impl SystemDims {
    pub fn new(bs_antennas: usize, irs_elements: usize, users: usize) -> Result<Self> {
        if bs_antennas == 0 || irs_elements == 0 || users == 0 {
            return Err(Error::invalid(format!(
                "dimensions must be positive, got M={bs_antennas}, N={irs_elements}, K={users}"
            )));
        }
        Ok(Self {
            bs_antennas,
            irs_elements,
            users,
        })
    }

    pub fn bs_antennas(&self) -> usize {
        self.bs_antennas
    }

    pub fn irs_elements(&self) -> usize {
        self.irs_elements
    }

    pub fn users(&self) -> usize {
        self.users
    }

    /// Number of multi-pilot training slots: ceil(N / M).
    pub fn stage1_slots(&self) -> usize {
        self.irs_elements.div_ceil(self.bs_antennas)
    }

    /// Number of single-sample training slots: N - ceil(N / M).
    pub fn stage2_slots(&self) -> usize {
        self.irs_elements - self.stage1_slots()
    }

    /// Total received samples over both stages: K (L1 + 1) + L2.
    pub fn total_samples(&self) -> usize {
        self.users * (self.stage1_slots() + 1) + self.stage2_slots()
    }
}

/// Unitary angular bases for the BS array (M x M) and the surface (N x N).
#[derive(Debug, Clone)]
pub struct AngularBases {
    bs: CMat,
    irs: CMat,
}

impl AngularBases {
    pub fn bs(&self) -> &CMat {
        &self.bs
    }

    pub fn irs(&self) -> &CMat {
        &self.irs
    }
}

impl AngularBases {
    /// Builds bases from explicit unitary matrices.
    pub fn from_parts(bs: CMat, irs: CMat) -> Result<Self> {
        for (name, b) in [("bs", &bs), ("irs", &irs)] {
            if b.nrows() != b.ncols() {
                return Err(Error::shape(format!("{name} basis must be square")));
            }
            let n = b.nrows();
            let err = (b.adjoint() * b - CMat::identity(n, n)).norm();
            if err > 1e-12 * n as f64 {
                return Err(Error::invalid(format!(
                    "{name} basis is not unitary (error {err:.3e})"
                )));
            }
        }
        Ok(Self { bs, irs })
    }
}

/// Builds the unitary DFT bases, entry (p, q) = exp(-j 2 pi p q / size) / sqrt(size).
pub fn make_angular_bases(dims: &SystemDims) -> AngularBases {
    AngularBases {
        bs: linalg::unitary_dft(dims.bs_antennas()),
        irs: linalg::unitary_dft(dims.irs_elements()),
    }
}

/// Like [`make_angular_bases`], but treats the surface as a planar
/// rows x cols array: its angular basis becomes the Kronecker product of the
/// two per-axis unitary DFTs. `rows * cols` must equal the element count.
pub fn make_planar_bases(dims: &SystemDims, irs_rows: usize) -> Result<AngularBases> {
    let n = dims.irs_elements();
    if irs_rows == 0 || n % irs_rows != 0 {
        return Err(Error::invalid(format!(
            "surface rows {irs_rows} must divide the element count {n}"
        )));
    }
    let cols = n / irs_rows;
    Ok(AngularBases {
        bs: linalg::unitary_dft(dims.bs_antennas()),
        irs: linalg::unitary_dft(irs_rows).kronecker(&linalg::unitary_dft(cols)),
    })
}

/// Shape of a per-angle power vector. Every variant is normalized so the
/// vector sums to its length (total link power equals gain * length, as in
/// the uniform case).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PowerProfile {
    /// Flat power across angles; link covariances become scaled identities.
    Uniform,
    /// Power decaying as exp(-decay * angle index).
    Exponential { decay: f64 },
    /// Power decaying as exp(-decay * |angle index - center|): a dominant
    /// arrival sector around `center`.
    Peaked { decay: f64, center: usize },
}

impl PowerProfile {
    pub fn vector(&self, len: usize) -> DVector<f64> {
        let raw = match *self {
            PowerProfile::Uniform => DVector::from_element(len, 1.0),
            PowerProfile::Exponential { decay } => {
                DVector::from_fn(len, |i, _| (-decay * i as f64).exp())
            }
            PowerProfile::Peaked { decay, center } => DVector::from_fn(len, |i, _| {
                (-decay * (i as f64 - center as f64).abs()).exp()
            }),
        };
        let total: f64 = raw.sum();
        raw * (len as f64 / total)
    }
}

/// Linear power gains of each link.
#[derive(Debug, Clone)]
pub struct PathGains {
    /// BS-surface link.
    pub bs_irs: f64,
    /// Surface-user links, one per user.
    pub irs_user: Vec<f64>,
    /// BS-user (direct) links, one per user.
    pub direct: Vec<f64>,
}

impl PathGains {
    /// Same gain on every link; convenient for unit-scale tests.
    pub fn uniform(dims: &SystemDims, gain: f64) -> Self {
        Self {
            bs_irs: gain,
            irs_user: vec![gain; dims.users()],
            direct: vec![gain; dims.users()],
        }
    }
}

/// Per-angle powers and path gains of every link in the system.
#[derive(Debug, Clone)]
pub struct ChannelProfile {
    dims: SystemDims,
    bs_irs_power: DVector<f64>,
    irs_user_power: Vec<DVector<f64>>,
    direct_power: Vec<DVector<f64>>,
    gains: PathGains,
}

impl ChannelProfile {
    pub fn new(
        dims: SystemDims,
        bs_irs_power: DVector<f64>,
        irs_user_power: Vec<DVector<f64>>,
        direct_power: Vec<DVector<f64>>,
        gains: PathGains,
    ) -> Result<Self> {
        let n = dims.irs_elements();
        let m = dims.bs_antennas();
        let k = dims.users();
        if irs_user_power.len() != k || direct_power.len() != k {
            return Err(Error::shape(format!(
                "expected {k} per-user power vectors, got {} and {}",
                irs_user_power.len(),
                direct_power.len()
            )));
        }
        if gains.irs_user.len() != k || gains.direct.len() != k {
            return Err(Error::shape("path gain list length != user count".to_string()));
        }
        check_power("bs_irs", &bs_irs_power, n)?;
        for (idx, p) in irs_user_power.iter().enumerate() {
            check_power(&format!("irs_user[{idx}]"), p, n)?;
        }
        for (idx, p) in direct_power.iter().enumerate() {
            check_power(&format!("direct[{idx}]"), p, m)?;
        }
        for (name, g) in std::iter::once(("bs_irs", gains.bs_irs))
            .chain(gains.irs_user.iter().map(|&g| ("irs_user", g)))
            .chain(gains.direct.iter().map(|&g| ("direct", g)))
        {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::invalid(format!("path gain {name} must be positive")));
            }
        }
        Ok(Self {
            dims,
            bs_irs_power,
            irs_user_power,
            direct_power,
            gains,
        })
    }

    /// Same angular profile on every link.
    pub fn from_profile(
        dims: SystemDims,
        profile: &PowerProfile,
        gains: PathGains,
    ) -> Result<Self> {
        let n = dims.irs_elements();
        let m = dims.bs_antennas();
        let k = dims.users();
        ChannelProfile::new(
            dims,
            profile.vector(n),
            vec![profile.vector(n); k],
            vec![profile.vector(m); k],
            gains,
        )
    }

    pub fn dims(&self) -> &SystemDims {
        &self.dims
    }

    /// Closed-form covariances of every link and of every cascaded channel.
    pub fn covariances(&self, bases: &AngularBases) -> CovarianceSet {
        let m = self.dims.bs_antennas();
        let k = self.dims.users();
        let cov_g = basis_covariance(bases.irs(), &self.bs_irs_power, self.gains.bs_irs);
        // Every BS antenna sees the same angular spectrum of the common link.
        let bs_irs: Vec<CMat> = vec![cov_g; m];
        let irs_user: Vec<CMat> = (0..k)
            .map(|u| basis_covariance(bases.irs(), &self.irs_user_power[u], self.gains.irs_user[u]))
            .collect();
        let direct: Vec<CMat> = (0..k)
            .map(|u| basis_covariance(bases.bs(), &self.direct_power[u], self.gains.direct[u]))
            .collect();
        let cascaded: Vec<Vec<CMat>> = (0..m)
            .map(|ant| {
                (0..k)
                    .map(|u| cascaded_covariance(&bs_irs[ant], &irs_user[u]).expect("same shape"))
                    .collect()
            })
            .collect();
        CovarianceSet {
            bs_irs,
            irs_user,
            cascaded,
            direct,
        }
    }
}

fn check_power(name: &str, p: &DVector<f64>, expected_len: usize) -> Result<()> {
    if p.len() != expected_len {
        return Err(Error::shape(format!(
            "power vector {name} has length {}, expected {expected_len}",
            p.len()
        )));
    }
    if p.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!(
            "power vector {name} must be strictly positive"
        )));
    }
    Ok(())
}

/// gain * B diag(power) B^H for a unitary basis B.
fn basis_covariance(basis: &CMat, power: &DVector<f64>, gain: f64) -> CMat {
    let scaled = CMat::from_diagonal(&CVec::from_fn(power.len(), |i, _| c64(gain * power[i], 0.0)));
    basis * scaled * basis.adjoint()
}

/// One draw of all channels in the system.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    direct: CMat,
    bs_irs: CMat,
    irs_user: CMat,
}

impl ChannelRealization {
    pub fn new(direct: CMat, bs_irs: CMat, irs_user: CMat) -> Result<Self> {
        let (m, k) = (direct.nrows(), direct.ncols());
        let n = bs_irs.nrows();
        if bs_irs.ncols() != m {
            return Err(Error::shape(format!(
                "BS-surface matrix is {}x{}, expected {n}x{m}",
                bs_irs.nrows(),
                bs_irs.ncols()
            )));
        }
        if irs_user.nrows() != n || irs_user.ncols() != k {
            return Err(Error::shape(format!(
                "surface-user matrix is {}x{}, expected {n}x{k}",
                irs_user.nrows(),
                irs_user.ncols()
            )));
        }
        Ok(Self {
            direct,
            bs_irs,
            irs_user,
        })
    }

    /// Direct channels, M x K (column per user).
    pub fn direct(&self) -> &CMat {
        &self.direct
    }

    /// Common BS-surface matrix, N x M.
    pub fn bs_irs(&self) -> &CMat {
        &self.bs_irs
    }

    /// Surface-user matrix, N x K (column per user).
    pub fn irs_user(&self) -> &CMat {
        &self.irs_user
    }

    pub fn dims(&self) -> SystemDims {
        SystemDims::new(self.direct.nrows(), self.bs_irs.nrows(), self.direct.ncols())
            .expect("realization dims are positive")
    }

    /// Cascaded channel of one user, M x N.
    pub fn cascaded(&self, user: usize) -> CMat {
        let col = CVec::from(self.irs_user.column(user));
        cascaded_channel(&self.bs_irs, &col).expect("shapes consistent by construction")
    }

    /// Cascaded channels of all users.
    pub fn cascaded_all(&self) -> Vec<CMat> {
        (0..self.direct.ncols()).map(|u| self.cascaded(u)).collect()
    }
}

/// Draws one channel realization under the angular-domain Gaussian model.
/// Deterministic for a fixed seed.
pub fn sample_channels(
    dims: &SystemDims,
    bases: &AngularBases,
    profile: &ChannelProfile,
    seed: u64,
) -> Result<ChannelRealization> {
    if profile.dims() != dims {
        return Err(Error::shape(
            "profile dims do not match requested dims".to_string(),
        ));
    }
    let m = dims.bs_antennas();
    let n = dims.irs_elements();
    let k = dims.users();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Angular-domain BS-surface matrix: independent columns, shared spectrum.
    let mut angular_g = linalg::complex_gaussian_matrix(&mut rng, n, m);
    for mut col in angular_g.column_iter_mut() {
        for (i, z) in col.iter_mut().enumerate() {
            *z *= c64((profile.gains.bs_irs * profile.bs_irs_power[i]).sqrt(), 0.0);
        }
    }
    let bs_irs = bases.irs() * angular_g * bases.bs().transpose();

    let mut irs_user = CMat::zeros(n, k);
    for u in 0..k {
        let mut angular = linalg::complex_gaussian_vector(&mut rng, n);
        for (i, z) in angular.iter_mut().enumerate() {
            *z *= c64(
                (profile.gains.irs_user[u] * profile.irs_user_power[u][i]).sqrt(),
                0.0,
            );
        }
        irs_user.set_column(u, &(bases.irs() * angular));
    }

    let mut direct = CMat::zeros(m, k);
    for u in 0..k {
        let mut angular = linalg::complex_gaussian_vector(&mut rng, m);
        for (i, z) in angular.iter_mut().enumerate() {
            *z *= c64(
                (profile.gains.direct[u] * profile.direct_power[u][i]).sqrt(),
                0.0,
            );
        }
        direct.set_column(u, &(bases.bs() * angular));
    }

    ChannelRealization::new(direct, bs_irs, irs_user)
}

/// Cascaded channel G^T diag(h_r) for one user; G is N x M, h_r is length N.
pub fn cascaded_channel(bs_irs: &CMat, irs_user_col: &CVec) -> Result<CMat> {
    let n = bs_irs.nrows();
    if irs_user_col.len() != n {
        return Err(Error::shape(format!(
            "surface-user vector has length {}, expected {n}",
            irs_user_col.len()
        )));
    }
    let mut out = bs_irs.transpose();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= irs_user_col[j];
    }
    Ok(out)
}

/// Covariance of the cascaded channel: the elementwise (Hadamard) product of
/// the two link covariances. Hermitian PSD whenever both inputs are.
pub fn cascaded_covariance(cov_bs_irs: &CMat, cov_irs_user: &CMat) -> Result<CMat> {
    if cov_bs_irs.shape() != cov_irs_user.shape() || cov_bs_irs.nrows() != cov_bs_irs.ncols() {
        return Err(Error::shape(format!(
            "covariance shapes {:?} and {:?} must be equal and square",
            cov_bs_irs.shape(),
            cov_irs_user.shape()
        )));
    }
    Ok(cov_irs_user.component_mul(cov_bs_irs))
}

/// Sample covariance (1/J) sum_j h_j h_j^H.
pub fn estimate_covariance_from_samples(samples: &[CVec]) -> Result<CMat> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("covariance estimate needs at least one sample"))?;
    let n = first.len();
    let mut acc = CMat::zeros(n, n);
    for h in samples {
        if h.len() != n {
            return Err(Error::shape("samples have inconsistent lengths".to_string()));
        }
        acc.gerc(c64(1.0, 0.0), h, h, c64(1.0, 0.0));
    }
    Ok(acc / c64(samples.len() as f64, 0.0))
}

/// Covariances of every link and every cascaded channel.
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    bs_irs: Vec<CMat>,
    irs_user: Vec<CMat>,
    cascaded: Vec<Vec<CMat>>,
    direct: Vec<CMat>,
}

impl CovarianceSet {
    /// Assembles a covariance set from per-link covariances; the cascaded
    /// covariances are derived as Hadamard products, which keeps the
    /// construction consistent with the generator model.
    pub fn from_links(
        bs_irs: Vec<CMat>,
        irs_user: Vec<CMat>,
        direct: Vec<CMat>,
    ) -> Result<Self> {
        if bs_irs.is_empty() || irs_user.is_empty() || irs_user.len() != direct.len() {
            return Err(Error::shape(
                "need covariances for at least one antenna and per-user links".to_string(),
            ));
        }
        let cascaded = bs_irs
            .iter()
            .map(|g| {
                irs_user
                    .iter()
                    .map(|r| cascaded_covariance(g, r))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bs_irs,
            irs_user,
            cascaded,
            direct,
        })
    }

    /// Covariance of one BS-surface column (N x N).
    pub fn bs_irs(&self, antenna: usize) -> &CMat {
        &self.bs_irs[antenna]
    }

    /// Covariance of the surface-user vector of one user (N x N).
    pub fn irs_user(&self, user: usize) -> &CMat {
        &self.irs_user[user]
    }

    /// Covariance of the cascaded channel for (antenna, user), N x N.
    pub fn cascaded(&self, antenna: usize, user: usize) -> &CMat {
        &self.cascaded[antenna][user]
    }

    /// Covariance of the direct channel of one user (M x M).
    pub fn direct(&self, user: usize) -> &CMat {
        &self.direct[user]
    }

    pub fn antennas(&self) -> usize {
        self.bs_irs.len()
    }

    pub fn users(&self) -> usize {
        self.irs_user.len()
    }

    /// Checks every matrix is Hermitian and PSD and every cascaded covariance
    /// is full rank (smallest eigenvalue above `rank_tol` times the largest).
    pub fn validate(&self, rank_tol: f64) -> Result<()> {
        let all = self
            .bs_irs
            .iter()
            .chain(self.irs_user.iter())
            .chain(self.direct.iter())
            .chain(self.cascaded.iter().flatten());
        for c in all {
            if linalg::hermitian_error(c) > 1e-12 * c.norm().max(1.0) {
                return Err(Error::Numerical("covariance is not Hermitian".to_string()));
            }
            let n = c.nrows() as f64;
            let trace: f64 = c.diagonal().iter().map(|z| z.re).sum();
            let eigs = linalg::hermitian_eigenvalues(c);
            if eigs[0] < -1e-10 * trace / n {
                return Err(Error::Numerical(format!(
                    "covariance has negative eigenvalue {:.3e}",
                    eigs[0]
                )));
            }
        }
        for row in &self.cascaded {
            for c in row {
                let eigs = linalg::hermitian_eigenvalues(c);
                let max = *eigs.last().expect("nonempty");
                if eigs[0] <= rank_tol * max {
                    return Err(Error::Numerical(format!(
                        "cascaded covariance is rank deficient: min/max eigenvalue {:.3e}",
                        eigs[0] / max
                    )));
                }
            }
        }
        Ok(())
    }
}

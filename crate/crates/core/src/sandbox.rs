//! Linear-Gaussian sandbox: every model is Gaussian, so each KL divergence in
//! the triangle has a closed form and every decomposition identity can be
//! checked numerically against two independent routes.
//!
//! World: data x ~ N(m_q, S_q); generator x = W z + b + eps with z ~ N(0, I)
//! and eps ~ N(0, sigma^2 I); inference q(z|x) = N(A x + c, diag(s));
//! quadratic energy f(x) = -x' E x / 2 + c_e' x with E positive definite, so
//! the energy model is the Gaussian N(E^{-1} c_e, E^{-1}).
//!
//! Route one computes the three triangle KLs directly between full joint
//! Gaussians on (z, x); route two recomposes them from marginal KLs plus
//! expected conditional KLs via the generator posterior. The two routes share
//! only the elementary Gaussian-KL formula.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SandboxInstance {
    pub data_mean: DVector<f64>,
    pub data_cov: DMatrix<f64>,
    pub gen_w: DMatrix<f64>,
    pub gen_b: DVector<f64>,
    pub gen_sigma: f64,
    pub inf_a: DMatrix<f64>,
    pub inf_c: DVector<f64>,
    /// Diagonal of the inference conditional covariance (variances).
    pub inf_var: DVector<f64>,
    pub en_quad: DMatrix<f64>,
    pub en_lin: DVector<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct SandboxReport {
    // Joint-KL route.
    pub kl_q_p: f64,
    pub kl_p_pi: f64,
    pub kl_q_pi: f64,
    pub d_triangle: f64,
    // Marginal decomposition route.
    pub kl_qdata_ptheta: f64,
    pub kl_ptheta_pi: f64,
    pub kl_qdata_pi: f64,
    pub d0: f64,
    pub expected_kl_qphi_post: f64,
    pub expected_kl_post_qphi: f64,
    /// d_triangle - (KL(q_data||p_theta) - KL(q_data||pi)): nonnegative.
    pub gap: f64,
}

// ── Gaussian building blocks ────────────────────────────────────────────

struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn spd_logdet_and_inverse(cov: &DMatrix<f64>, what: &str) -> Result<(f64, DMatrix<f64>)> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain(format!("{what} is not positive definite")))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((logdet, chol.inverse()))
}

/// KL( N(mu0, cov0) || N(mu1, cov1) ) for positive-definite covariances.
fn gaussian_kl(g0: &Gaussian, g1: &Gaussian) -> Result<f64> {
    let k = g0.mean.len() as f64;
    let (logdet1, inv1) = spd_logdet_and_inverse(&g1.cov, "KL target covariance")?;
    let (logdet0, _) = spd_logdet_and_inverse(&g0.cov, "KL source covariance")?;
    let trace = (&inv1 * &g0.cov).trace();
    let diff = &g1.mean - &g0.mean;
    let maha = (diff.transpose() * &inv1 * &diff)[(0, 0)];
    Ok(0.5 * (trace + maha - k + logdet1 - logdet0))
}

/// Joint (a, b) where a ~ N(mean_a, cov_a) and b | a ~ N(G a + g, S).
fn joint_cond_second(mean_a: &DVector<f64>, cov_a: &DMatrix<f64>, g_mat: &DMatrix<f64>, g_off: &DVector<f64>, s: &DMatrix<f64>) -> Gaussian {
    let (na, nb) = (mean_a.len(), g_off.len());
    let mean_b = g_mat * mean_a + g_off;
    let cov_ab = cov_a * g_mat.transpose(); // na x nb
    let cov_bb = g_mat * cov_a * g_mat.transpose() + s;
    let mut mean = DVector::zeros(na + nb);
    mean.rows_mut(0, na).copy_from(mean_a);
    mean.rows_mut(na, nb).copy_from(&mean_b);
    let mut cov = DMatrix::zeros(na + nb, na + nb);
    cov.view_mut((0, 0), (na, na)).copy_from(cov_a);
    cov.view_mut((0, na), (na, nb)).copy_from(&cov_ab);
    cov.view_mut((na, 0), (nb, na)).copy_from(&cov_ab.transpose());
    cov.view_mut((na, na), (nb, nb)).copy_from(&cov_bb);
    Gaussian { mean, cov }
}

/// Joint (a, b) where b ~ N(mean_b, cov_b) and a | b ~ N(G b + g, S).
fn joint_cond_first(mean_b: &DVector<f64>, cov_b: &DMatrix<f64>, g_mat: &DMatrix<f64>, g_off: &DVector<f64>, s: &DMatrix<f64>) -> Gaussian {
    let (nb, na) = (mean_b.len(), g_off.len());
    let mean_a = g_mat * mean_b + g_off;
    let cov_aa = g_mat * cov_b * g_mat.transpose() + s;
    let cov_ab = g_mat * cov_b; // na x nb
    let mut mean = DVector::zeros(na + nb);
    mean.rows_mut(0, na).copy_from(&mean_a);
    mean.rows_mut(na, nb).copy_from(mean_b);
    let mut cov = DMatrix::zeros(na + nb, na + nb);
    cov.view_mut((0, 0), (na, na)).copy_from(&cov_aa);
    cov.view_mut((0, na), (na, nb)).copy_from(&cov_ab);
    cov.view_mut((na, 0), (nb, na)).copy_from(&cov_ab.transpose());
    cov.view_mut((na, na), (nb, nb)).copy_from(cov_b);
    Gaussian { mean, cov }
}

/// Affine-mean Gaussian conditional z|x = N(Gx + g, S).
#[derive(Clone)]
struct AffineConditional {
    g_mat: DMatrix<f64>,
    g_off: DVector<f64>,
    cov: DMatrix<f64>,
}

/// E_{x ~ N(mx, cx)} KL( N(c0.G x + c0.g, c0.S) || N(c1.G x + c1.g, c1.S) ).
fn expected_affine_kl(
    c0: &AffineConditional,
    c1: &AffineConditional,
    mx: &DVector<f64>,
    cx: &DMatrix<f64>,
) -> Result<f64> {
    let k = c0.g_off.len() as f64;
    let (logdet1, inv1) = spd_logdet_and_inverse(&c1.cov, "conditional covariance")?;
    let (logdet0, _) = spd_logdet_and_inverse(&c0.cov, "conditional covariance")?;
    let trace = (&inv1 * &c0.cov).trace();
    let g = &c0.g_mat - &c1.g_mat;
    let delta = &g * mx + (&c0.g_off - &c1.g_off);
    let maha = (delta.transpose() * &inv1 * &delta)[(0, 0)];
    let spread = (&inv1 * &g * cx * g.transpose()).trace();
    Ok(0.5 * (trace + maha + spread - k + logdet1 - logdet0))
}

// ── Sandbox views of the three models ───────────────────────────────────

impl SandboxInstance {
    pub fn latent_dim(&self) -> usize {
        self.gen_w.ncols()
    }

    pub fn signal_dim(&self) -> usize {
        self.gen_w.nrows()
    }

    fn inference_conditional(&self) -> AffineConditional {
        AffineConditional {
            g_mat: self.inf_a.clone(),
            g_off: self.inf_c.clone(),
            cov: DMatrix::from_diagonal(&self.inf_var),
        }
    }

    /// Marginal of the generator: N(b, W W' + sigma^2 I).
    fn gen_marginal(&self) -> Gaussian {
        let d = self.signal_dim();
        let cov = &self.gen_w * self.gen_w.transpose()
            + DMatrix::identity(d, d) * (self.gen_sigma * self.gen_sigma);
        Gaussian { mean: self.gen_b.clone(), cov }
    }

    /// Exact generator posterior p(z|x) as an affine conditional.
    fn gen_posterior(&self) -> Result<AffineConditional> {
        posterior_of(&self.gen_w, &self.gen_b, self.gen_sigma)
    }

    /// The energy model as a Gaussian N(E^{-1} c, E^{-1}).
    fn energy_gaussian(&self) -> Result<Gaussian> {
        let (_, inv) = spd_logdet_and_inverse(&self.en_quad, "energy quadratic form")?;
        let mean = &inv * &self.en_lin;
        Ok(Gaussian { mean, cov: inv })
    }

    fn data_gaussian(&self) -> Gaussian {
        Gaussian { mean: self.data_mean.clone(), cov: self.data_cov.clone() }
    }
}

fn posterior_of(w: &DMatrix<f64>, b: &DVector<f64>, sigma: f64) -> Result<AffineConditional> {
    let d = w.ncols();
    let prec = DMatrix::identity(d, d) + w.transpose() * w / (sigma * sigma);
    let (_, cov_post) = spd_logdet_and_inverse(&prec, "posterior precision")?;
    let g_mat = &cov_post * w.transpose() / (sigma * sigma);
    let g_off = -(&g_mat * b);
    Ok(AffineConditional { g_mat, g_off, cov: cov_post })
}

/// All triangle KLs and their decompositions, in closed form.
pub fn analytic_triangle(inst: &SandboxInstance) -> Result<SandboxReport> {
    let d = inst.latent_dim();
    let dim_x = inst.signal_dim();
    if inst.inf_var.iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain("inference variances must be positive".into()));
    }
    if inst.gen_sigma <= 0.0 {
        return Err(Error::Domain("generator sigma must be positive".into()));
    }

    let q_data = inst.data_gaussian();
    let p_x = inst.gen_marginal();
    let pi_x = inst.energy_gaussian()?;
    let q_cond = inst.inference_conditional();

    // Route 1: KLs between full joints on (z, x).
    let joint_q = joint_cond_second(&q_data.mean, &q_data.cov, &q_cond.g_mat, &q_cond.g_off, &q_cond.cov);
    let joint_pi = joint_cond_second(&pi_x.mean, &pi_x.cov, &q_cond.g_mat, &q_cond.g_off, &q_cond.cov);
    let prior_mean = DVector::zeros(d);
    let prior_cov = DMatrix::identity(d, d);
    let obs_cov = DMatrix::identity(dim_x, dim_x) * (inst.gen_sigma * inst.gen_sigma);
    let joint_p = joint_cond_first(&prior_mean, &prior_cov, &inst.gen_w, &inst.gen_b, &obs_cov);

    let kl_q_p = gaussian_kl(&joint_q, &joint_p)?;
    let kl_p_pi = gaussian_kl(&joint_p, &joint_pi)?;
    let kl_q_pi = gaussian_kl(&joint_q, &joint_pi)?;
    let d_triangle = kl_q_p + kl_p_pi - kl_q_pi;

    // Route 2: marginal KLs on x plus expected conditional KLs.
    let kl_qdata_ptheta = gaussian_kl(&q_data, &p_x)?;
    let kl_ptheta_pi = gaussian_kl(&p_x, &pi_x)?;
    let kl_qdata_pi = gaussian_kl(&q_data, &pi_x)?;
    let d0 = kl_qdata_ptheta + kl_ptheta_pi - kl_qdata_pi;

    let post = inst.gen_posterior()?;
    let expected_kl_qphi_post = expected_affine_kl(&q_cond, &post, &q_data.mean, &q_data.cov)?;
    let expected_kl_post_qphi = expected_affine_kl(&post, &q_cond, &p_x.mean, &p_x.cov)?;

    let gap = d_triangle - (kl_qdata_ptheta - kl_qdata_pi);

    Ok(SandboxReport {
        kl_q_p,
        kl_p_pi,
        kl_q_pi,
        d_triangle,
        kl_qdata_ptheta,
        kl_ptheta_pi,
        kl_qdata_pi,
        d0,
        expected_kl_qphi_post,
        expected_kl_post_qphi,
        gap,
    })
}

/// The EM surrogate identity at a frozen generator (W_t, b_t, sigma_t):
/// KL( q_data(x) p_t(z|x) || p_theta(z,x) )
///   = KL( q_data || p_theta(x) ) + E_{q_data} KL( p_t(z|x) || p_theta(z|x) ).
/// Returns (joint LHS, marginal term, expected conditional term).
pub fn em_decomposition(
    inst: &SandboxInstance,
    w_t: &DMatrix<f64>,
    b_t: &DVector<f64>,
    sigma_t: f64,
) -> Result<(f64, f64, f64)> {
    let q_data = inst.data_gaussian();
    let post_t = posterior_of(w_t, b_t, sigma_t)?;
    let joint_lhs =
        joint_cond_second(&q_data.mean, &q_data.cov, &post_t.g_mat, &post_t.g_off, &post_t.cov);

    let d = inst.latent_dim();
    let dim_x = inst.signal_dim();
    let prior_mean = DVector::zeros(d);
    let prior_cov = DMatrix::identity(d, d);
    let obs_cov = DMatrix::identity(dim_x, dim_x) * (inst.gen_sigma * inst.gen_sigma);
    let joint_p = joint_cond_first(&prior_mean, &prior_cov, &inst.gen_w, &inst.gen_b, &obs_cov);

    let lhs = gaussian_kl(&joint_lhs, &joint_p)?;
    let marginal = gaussian_kl(&q_data, &inst.gen_marginal())?;
    let post = inst.gen_posterior()?;
    let conditional = expected_affine_kl(&post_t, &post, &q_data.mean, &q_data.cov)?;
    Ok((lhs, marginal, conditional))
}

fn randn(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Well-conditioned random instance for property tests.
pub fn random_instance(d: usize, dim_x: usize, rng: &mut impl Rng) -> SandboxInstance {
    let gen_w = DMatrix::from_fn(dim_x, d, |_, _| randn(rng) / (d as f64).sqrt());
    let gen_b = DVector::from_fn(dim_x, |_, _| randn(rng) * 0.5);
    let gen_sigma = 0.4 + 0.8 * rng.random_range(0.0..1.0);

    let q_root = DMatrix::from_fn(dim_x, dim_x, |_, _| randn(rng) / (dim_x as f64).sqrt());
    let data_cov = &q_root * q_root.transpose() + DMatrix::identity(dim_x, dim_x) * 0.5;
    let data_mean = DVector::from_fn(dim_x, |_, _| randn(rng) * 0.5);

    let inf_a = DMatrix::from_fn(d, dim_x, |_, _| randn(rng) * 0.3);
    let inf_c = DVector::from_fn(d, |_, _| randn(rng) * 0.3);
    let inf_var = DVector::from_fn(d, |_, _| 0.25 + 2.0 * rng.random_range(0.0..1.0));

    let e_root = DMatrix::from_fn(dim_x, dim_x, |_, _| randn(rng) / (dim_x as f64).sqrt());
    let en_quad = &e_root * e_root.transpose() + DMatrix::identity(dim_x, dim_x) * 0.3;
    let en_lin = DVector::from_fn(dim_x, |_, _| randn(rng) * 0.5);

    SandboxInstance {
        data_mean,
        data_cov,
        gen_w,
        gen_b,
        gen_sigma,
        inf_a,
        inf_c,
        inf_var,
        en_quad,
        en_lin,
    }
}

/// Instance where generator, energy model, inference model, and data all
/// describe the same distribution: every KL in the triangle is zero.
pub fn matched_instance(d: usize, dim_x: usize, sigma: f64) -> SandboxInstance {
    let gen_w = DMatrix::zeros(dim_x, d);
    let gen_b = DVector::from_fn(dim_x, |i, _| (i as f64) * 0.1 - 0.2);
    let data_cov = DMatrix::identity(dim_x, dim_x) * (sigma * sigma);
    let en_quad = DMatrix::identity(dim_x, dim_x) / (sigma * sigma);
    let en_lin = &en_quad * &gen_b;
    SandboxInstance {
        data_mean: gen_b.clone(),
        data_cov,
        gen_w,
        gen_b,
        gen_sigma: sigma,
        inf_a: DMatrix::zeros(d, dim_x),
        inf_c: DVector::zeros(d),
        inf_var: DVector::from_element(d, 1.0),
        en_quad,
        en_lin,
    }
}

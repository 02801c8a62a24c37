use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec, HermEig};

/// Eigenvalue floor of posterior covariances inside the loss, relative to the
/// per-frequency mean power of the mixture.
pub const KLD_FLOOR_REL: f64 = 1e-6;
pub const KLD_FLOOR_ABS: f64 = 1e-20;

pub fn kld_floor(power: f64) -> f64 {
    (KLD_FLOOR_REL * power).max(KLD_FLOOR_ABS)
}

/// A covariance with eigenvalues raised to a floor, kept in eigen form.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Floored {
    pub eig: HermEig,
    pub floor: f64,
    pub clamped: bool,
    pub inv: CMat,
    pub mat: CMat,
    pub logdet: f64,
}

impl Floored {
    pub fn new(v: &CMat, floor: f64) -> Result<Self> {
        if !v.is_finite() {
            return Err(Error::non_finite("covariance"));
        }
        let n = v.dim();
        let eig = v.hermitize().eigh();
        let mut d = [0.0; crate::linalg::MAX_DIM];
        let mut inv_d = [0.0; crate::linalg::MAX_DIM];
        let mut clamped = false;
        let mut logdet = 0.0;
        for a in 0..n {
            let lam = eig.values[a];
            d[a] = if lam < floor {
                clamped = true;
                floor
            } else {
                lam
            };
            if d[a] <= 0.0 {
                return Err(Error::Degenerate("covariance is not positive definite".into()));
            }
            inv_d[a] = 1.0 / d[a];
            logdet += d[a].ln();
        }
        Ok(Self { eig, floor, clamped, inv: eig.reconstruct(&inv_d[..n]), mat: eig.reconstruct(&d[..n]), logdet })
    }

    /// Pulls a gradient with respect to the floored matrix back to the
    /// unfloored one (divided differences of `max(λ, floor)`).
    pub fn backward(&self, d_floored: &CMat) -> CMat {
        if !self.clamped {
            return d_floored.hermitize();
        }
        let n = d_floored.dim();
        let u = &self.eig.vectors;
        let lam = &self.eig.values;
        let g = |x: f64| x.max(self.floor);
        let dg = |x: f64| if x >= self.floor { 1.0 } else { 0.0 };
        let mut b = &(&u.adjoint() * &d_floored.hermitize()) * u;
        for r in 0..n {
            for c in 0..n {
                let (a, e) = (lam[r], lam[c]);
                let gap = a - e;
                let f = if r != c && gap.abs() > 1e-12 * (a.abs() + e.abs()) {
                    (g(a) - g(e)) / gap
                } else {
                    dg(a)
                };
                b[(r, c)] *= f;
            }
        }
        (&(u * &b) * &u.adjoint()).hermitize()
    }
}

/// `Δᴴ Q⁻¹ Δ + tr(Q⁻¹ P) + log|Q| − log|P| − N_m` with `Δ = μ_q − μ_p`.
pub(crate) fn kld_floored(mu_p: &CVec, p: &Floored, mu_q: &CVec, q: &Floored) -> f64 {
    let delta = *mu_q - *mu_p;
    let n = mu_p.dim() as f64;
    q.inv.quad_form(&delta) + (&q.inv * &p.mat).re_trace() + q.logdet - p.logdet - n
}

/// Gradients of [`kld_floored`] with respect to `μ_q` and the unfloored `V_q`.
pub(crate) fn kld_backward(mu_p: &CVec, p: &Floored, mu_q: &CVec, q: &Floored) -> (CVec, CMat) {
    let delta = *mu_q - *mu_p;
    let qi = &q.inv;
    let d_mu = qi.mul_vec(&delta).scale(2.0.into());
    let inner = CMat::outer(&delta) + p.mat;
    let d_q = *qi - &(qi * &inner) * qi;
    (d_mu, q.backward(&d_q))
}

fn check(mu: &CVec, v: &CMat, n: usize) -> Result<()> {
    if mu.dim() != n || v.dim() != n {
        return Err(Error::shape("posterior dimensions differ"));
    }
    if !mu.is_finite() || !v.is_finite() {
        return Err(Error::non_finite("kld input"));
    }
    Ok(())
}

/// Gaussian KL divergence `D(p‖q)` with both covariances floored at `floor`.
pub fn kld_gaussian_floored(mu_p: &CVec, v_p: &CMat, mu_q: &CVec, v_q: &CMat, floor: f64) -> Result<f64> {
    let n = mu_p.dim();
    check(mu_p, v_p, n)?;
    check(mu_q, v_q, n)?;
    let p = Floored::new(v_p, floor)?;
    let q = Floored::new(v_q, floor)?;
    Ok(kld_floored(mu_p, &p, mu_q, &q))
}

/// Gaussian KL divergence `D(p‖q)` between complex circular Gaussians.
/// Both covariances must be positive definite.
pub fn kld_gaussian(mu_p: &CVec, v_p: &CMat, mu_q: &CVec, v_q: &CMat) -> Result<f64> {
    kld_gaussian_floored(mu_p, v_p, mu_q, v_q, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn scalar_example() {
        let z = CVec::from_slice(&[c(0.0)]);
        let d = kld_gaussian(&z, &CMat::diag(&[1.0]), &z, &CMat::diag(&[2.0])).unwrap();
        assert!((d - (0.5 + 2f64.ln() - 1.0)).abs() < 1e-12);
        assert!((d - 0.193147).abs() < 1e-6);
    }

    #[test]
    fn diagonal_example() {
        let mp = CVec::from_slice(&[c(0.0), c(0.0)]);
        let mq = CVec::from_slice(&[c(1.0), c(0.0)]);
        let d = kld_gaussian(&mp, &CMat::identity(2), &mq, &CMat::diag(&[2.0, 0.5])).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = CMat::from_fn(3, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let v = (a * a.adjoint()).add_diag(0.1);
        let mu = CVec::from_slice(&[c(1.0), C64::new(0.0, 2.0), c(-1.0)]);
        assert!(kld_gaussian(&mu, &v, &mu, &v).unwrap().abs() < 1e-12);
    }

    #[test]
    fn singular_without_floor_is_error() {
        let z = CVec::zeros(2);
        assert!(kld_gaussian(&z, &CMat::diag(&[1.0, 0.0]), &z, &CMat::identity(2)).is_err());
        assert!(kld_gaussian_floored(&z, &CMat::diag(&[1.0, 0.0]), &z, &CMat::identity(2), 1e-3).is_ok());
        let bad = CVec::from_slice(&[c(f64::NAN), c(0.0)]);
        assert!(kld_gaussian(&bad, &CMat::identity(2), &z, &CMat::identity(2)).is_err());
    }

    /// Central differences of `kld_floored` along random Hermitian directions.
    fn fd_check(vq: CMat, floor: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = vq.dim();
        let rv = |rng: &mut ChaCha8Rng| CVec::from_slice(&(0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect::<Vec<_>>());
        let mu_p = rv(&mut rng);
        let mu_q = rv(&mut rng);
        let a = CMat::from_fn(n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let p = Floored::new(&(a * a.adjoint()).add_diag(0.2), floor).unwrap();
        let f = |mq: &CVec, v: &CMat| kld_floored(&mu_p, &p, mq, &Floored::new(v, floor).unwrap());
        let (d_mu, d_v) = kld_backward(&mu_p, &p, &mu_q, &Floored::new(&vq, floor).unwrap());
        let dir = CMat::from_fn(n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).hermitize();
        let eps = 1e-6;
        let num = (f(&mu_q, &(vq + dir.scale(eps))) - f(&mu_q, &(vq - dir.scale(eps)))) / (2.0 * eps);
        let ana = d_v.inner(&dir);
        assert!((num - ana).abs() <= 1e-6 * (1.0 + ana.abs()), "V: {num} vs {ana}");
        let dm = rv(&mut rng);
        let num = (f(&(mu_q + dm.scale(eps.into())), &vq) - f(&(mu_q + dm.scale((-eps).into())), &vq)) / (2.0 * eps);
        let ana: f64 = (0..n).map(|m| (d_mu[m].conj() * dm[m]).re).sum();
        assert!((num - ana).abs() <= 1e-6 * (1.0 + ana.abs()), "mu: {num} vs {ana}");
    }

    #[test]
    fn gradient_matches_differences_unclamped() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = CMat::from_fn(2, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            fd_check((a * a.adjoint()).add_diag(0.3), 1e-6, seed);
        }
    }

    #[test]
    fn gradient_matches_differences_clamped() {
        // one eigenvalue (0.01) sits well below the floor (0.2), the others above
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let a = CMat::from_fn(3, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let e = (a * a.adjoint()).eigh();
            let v = e.reconstruct(&[0.01, 1.0, 2.5]);
            fd_check(v, 0.2, seed);
        }
    }
}

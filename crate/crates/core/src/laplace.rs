//! Laplace approximation of the marginal likelihood over latent states, with
//! its exact gradient in the fixed parameters.
//!
//! A model is a sum of small terms, each touching a handful of latents that
//! lie within a fixed bandwidth of each other. The latent Hessian is then
//! banded, so factorization, log-determinant and the needed entries of its
//! inverse all cost linear time in the number of latents.

use nalgebra::DMatrix;

use crate::ad::{SweepBuffers, Tape, Var};
use crate::banded::{BandCholesky, BandMatrix};
use crate::{Error, Real};

/// Joint negative log-likelihood written as a sum of local terms.
pub trait LatentModel: Sync {
    fn n_latent(&self) -> usize;
    fn n_theta(&self) -> usize;
    /// Largest `|i − j|` between two latents appearing in one term.
    fn bandwidth(&self) -> usize;
    /// Sorted, duplicate-free latent indices of each term.
    fn terms(&self) -> &[Vec<usize>];
    /// Negative log-likelihood of term `t` given its latents and all of θ.
    fn eval_term<R: Real>(&self, t: usize, u: &[R], theta: &[R]) -> R;
    /// Human-readable location of a latent, for error messages.
    fn describe_latent(&self, i: usize) -> String {
        format!("latent {i}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerOptions {
    /// Convergence when `max_i |∂f/∂u_i| / √max(H_ii, 1) <` this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions { tol: 1e-8, max_iter: 100 }
    }
}

/// Inner optimum at one θ.
#[derive(Clone, Debug)]
pub struct InnerSolution {
    pub u: Vec<f64>,
    /// Joint nll at `u`.
    pub joint: f64,
    pub chol: BandCholesky,
    pub iterations: usize,
    pub grad_max: f64,
}

/// Evaluation engine holding reusable tape storage.
pub struct Laplace<'m, M: LatentModel> {
    model: &'m M,
    opts: InnerOptions,
    tape: Tape,
    ws: SweepBuffers,
}

impl<'m, M: LatentModel> Laplace<'m, M> {
    pub fn new(model: &'m M, opts: InnerOptions) -> Self {
        Laplace { model, opts, tape: Tape::new(), ws: SweepBuffers::default() }
    }

    pub fn model(&self) -> &M {
        self.model
    }

    /// Joint nll in plain floating point.
    pub fn joint(&self, u: &[f64], theta: &[f64]) -> f64 {
        let mut local = Vec::new();
        let mut total = 0.0;
        for (t, idx) in self.model.terms().iter().enumerate() {
            local.clear();
            local.extend(idx.iter().map(|&i| u[i]));
            total += self.model.eval_term(t, &local, theta);
        }
        total
    }

    /// Joint nll, latent gradient and banded latent Hessian.
    pub fn grad_hess(&mut self, u: &[f64], theta: &[f64], grad: &mut [f64], hess: &mut BandMatrix) -> f64 {
        self.assemble(u, theta, grad, hess, false)
    }

    /// As [`Laplace::grad_hess`], with `project` replacing each term's local
    /// Hessian by its nearest positive semidefinite matrix.
    fn assemble(&mut self, u: &[f64], theta: &[f64], grad: &mut [f64], hess: &mut BandMatrix, project: bool) -> f64 {
        let model = self.model;
        grad.fill(0.0);
        hess.clear();
        let th: Vec<Var<'_>> = theta.iter().map(|&v| Var::constant(v)).collect();
        let mut total = 0.0;
        let mut local = Vec::new();
        let mut g = Vec::new();
        let mut dir = Vec::new();
        let mut col = Vec::new();
        for (t, idx) in model.terms().iter().enumerate() {
            let nl = idx.len();
            local.clear();
            local.extend(idx.iter().map(|&i| u[i]));
            let vars = self.tape.inputs(&local);
            let out = model.eval_term(t, &vars, &th);
            total += out.value();
            g.resize(nl, 0.0);
            self.tape.gradient(out, &mut g, &mut self.ws);
            for (k, &i) in idx.iter().enumerate() {
                grad[i] += g[k];
            }
            dir.resize(nl, 0.0);
            col.resize(nl, 0.0);
            if project {
                let mut local_h = DMatrix::zeros(nl, nl);
                for k in 0..nl {
                    dir.fill(0.0);
                    dir[k] = 1.0;
                    self.tape.hessian_vector(out, &dir, &mut col, &mut self.ws);
                    local_h.column_mut(k).copy_from_slice(&col);
                }
                let local_h = (&local_h + local_h.transpose()) * 0.5;
                let eig = local_h.symmetric_eigen();
                let clipped = eig.eigenvalues.map(|v| v.max(0.0));
                let psd = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
                for k in 0..nl {
                    for r in k..nl {
                        hess.add(idx[r], idx[k], psd[(r, k)]);
                    }
                }
                continue;
            }
            for k in 0..nl {
                dir.fill(0.0);
                dir[k] = 1.0;
                self.tape.hessian_vector(out, &dir, &mut col, &mut self.ws);
                for r in k..nl {
                    hess.add(idx[r], idx[k], col[r]);
                }
            }
        }
        total
    }

    /// Minimizes the joint nll over latents from `u0` by damped Newton steps.
    pub fn inner(&mut self, theta: &[f64], u0: &[f64]) -> Result<InnerSolution, Error> {
        let n = self.model.n_latent();
        let bw = self.model.bandwidth();
        let mut u = u0.to_vec();
        let mut g = vec![0.0; n];
        let mut h = BandMatrix::zeros(n, bw);
        let mut gp = vec![0.0; n];
        let mut grad_max = f64::INFINITY;
        for it in 0..=self.opts.max_iter {
            let f = self.grad_hess(&u, theta, &mut g, &mut h);
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("joint nll is {f} at iteration {it}")));
            }
            grad_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            // the gradient of a latent with curvature c carries rounding of
            // order c·ε·|u|; measure it in units of the latent's own scale
            let scaled_max = (0..n).fold(0.0f64, |m, i| m.max(g[i].abs() / h.get(i, i).max(1.0).sqrt()));
            if scaled_max < self.opts.tol {
                let chol = h.cholesky().map_err(|p| Error::NotPositiveDefinite {
                    block: self.model.describe_latent(p),
                })?;
                // one more full step makes û accurate to rounding, which keeps
                // the outer gradient consistent with the outer value
                let step = chol.solve(&g);
                let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a - b).collect();
                let mut g2 = vec![0.0; n];
                let f2 = self.grad_hess(&trial, theta, &mut g2, &mut h);
                let g2_max = g2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if f2.is_finite() && g2_max < grad_max {
                    if let Ok(chol2) = h.cholesky() {
                        return Ok(InnerSolution { u: trial, joint: f2, chol: chol2, iterations: it + 1, grad_max: g2_max });
                    }
                }
                return Ok(InnerSolution { u, joint: f, chol, iterations: it, grad_max });
            }
            if it == self.opts.max_iter {
                break;
            }
            let chol = match h.cholesky() {
                Ok(c) => c,
                Err(_) => {
                    // indefinite: use the sum of the terms' convex parts
                    let mut hp = BandMatrix::zeros(n, bw);
                    self.assemble(&u, theta, &mut gp, &mut hp, true);
                    let scale = (0..n).map(|i| hp.get(i, i).abs()).fold(1e-8, f64::max);
                    let mut lambda = 1e-10 * scale;
                    loop {
                        let mut damped = hp.clone();
                        damped.add_diagonal(lambda);
                        if let Ok(c) = damped.cholesky() {
                            break c;
                        }
                        lambda *= 10.0;
                        if lambda > 1e12 * scale {
                            return Err(Error::NotPositiveDefinite { block: "damped latent Hessian".into() });
                        }
                    }
                }
            };
            let step: Vec<f64> = chol.solve(&g).iter().map(|v| -v).collect();
            let slope: f64 = step.iter().zip(&g).map(|(s, g)| s * g).sum();
            // gradients of large-magnitude terms carry rounding above `tol`;
            // a Newton decrement at rounding level is stationary all the same
            if -slope < 1e-20 * f.abs().max(1.0) && scaled_max < 1e3 * self.opts.tol {
                if let Ok(chol) = h.cholesky() {
                    return Ok(InnerSolution { u, joint: f, chol, iterations: it, grad_max });
                }
            }
            let mut t = 1.0;
            let mut trial = vec![0.0; n];
            let mut accepted = false;
            for _ in 0..60 {
                for i in 0..n {
                    trial[i] = u[i] + t * step[i];
                }
                let ft = self.joint(&trial, theta);
                // near the optimum rounding swamps the decrease test; accept
                // full steps whose value is unchanged to working precision
                if ft.is_finite() && (ft <= f + 1e-4 * t * slope || (t == 1.0 && ft - f <= 1e-12 * f.abs().max(1.0))) {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            std::mem::swap(&mut u, &mut trial);
        }
        Err(Error::InnerNotConverged { iterations: self.opts.max_iter, gradient: grad_max })
    }

    /// Laplace-approximated marginal nll and the inner solution.
    pub fn marginal_nll(&mut self, theta: &[f64], u0: &[f64]) -> Result<(f64, InnerSolution), Error> {
        let sol = self.inner(theta, u0)?;
        let n = self.model.n_latent() as f64;
        let v = sol.joint + 0.5 * sol.chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        Ok((v, sol))
    }

    /// Exact gradient of the marginal nll with respect to θ at `sol`.
    pub fn marginal_gradient(&mut self, theta: &[f64], sol: &InnerSolution) -> Vec<f64> {
        let model = self.model;
        let n = model.n_latent();
        let nt = theta.len();
        let z_sel = sol.chol.selected_inverse();
        let mut grad = vec![0.0; nt];
        let mut rhs = vec![0.0; n];
        let mut inputs = Vec::new();
        let mut g = Vec::new();
        let mut dir = Vec::new();
        let mut res = Vec::new();
        for (t, idx) in model.terms().iter().enumerate() {
            let nl = idx.len();
            let factor = local_factor(&z_sel, idx);
            inputs.clear();
            inputs.extend(idx.iter().map(|&i| sol.u[i]));
            inputs.extend_from_slice(theta);
            let vars = self.tape.inputs(&inputs);
            let out = model.eval_term(t, &vars[..nl], &vars[nl..]);
            g.resize(nl + nt, 0.0);
            self.tape.gradient(out, &mut g, &mut self.ws);
            for (k, &i) in idx.iter().enumerate() {
                rhs[i] += g[k];
            }
            for j in 0..nt {
                grad[j] += g[nl + j];
            }
            dir.resize(nl + nt, 0.0);
            res.resize(nl + nt, 0.0);
            for k in 0..factor.ncols() {
                dir.fill(0.0);
                for r in 0..nl {
                    dir[r] = factor[(r, k)];
                }
                self.tape.half_quadratic_gradient(out, &dir, &mut res, &mut self.ws);
                for (r, &i) in idx.iter().enumerate() {
                    rhs[i] += res[r];
                }
                for j in 0..nt {
                    grad[j] += res[nl + j];
                }
            }
        }
        // implicit dependence of û on θ
        let z = sol.chol.solve(&rhs);
        for (t, idx) in model.terms().iter().enumerate() {
            let nl = idx.len();
            inputs.clear();
            inputs.extend(idx.iter().map(|&i| sol.u[i]));
            inputs.extend_from_slice(theta);
            let vars = self.tape.inputs(&inputs);
            let out = model.eval_term(t, &vars[..nl], &vars[nl..]);
            dir.resize(nl + nt, 0.0);
            res.resize(nl + nt, 0.0);
            dir.fill(0.0);
            for (r, &i) in idx.iter().enumerate() {
                dir[r] = z[i];
            }
            self.tape.hessian_vector(out, &dir, &mut res, &mut self.ws);
            for j in 0..nt {
                grad[j] -= res[nl + j];
            }
        }
        grad
    }

    /// `∂û/∂θ` as `n_theta` columns of length `n_latent`.
    pub fn latent_sensitivity(&mut self, theta: &[f64], sol: &InnerSolution) -> Vec<Vec<f64>> {
        let model = self.model;
        let n = model.n_latent();
        let nt = theta.len();
        let mut cross = vec![vec![0.0; n]; nt];
        let mut inputs = Vec::new();
        let mut dir = Vec::new();
        let mut res = Vec::new();
        for (t, idx) in model.terms().iter().enumerate() {
            let nl = idx.len();
            inputs.clear();
            inputs.extend(idx.iter().map(|&i| sol.u[i]));
            inputs.extend_from_slice(theta);
            let vars = self.tape.inputs(&inputs);
            let out = model.eval_term(t, &vars[..nl], &vars[nl..]);
            dir.resize(nl + nt, 0.0);
            res.resize(nl + nt, 0.0);
            for j in 0..nt {
                dir.fill(0.0);
                dir[nl + j] = 1.0;
                self.tape.hessian_vector(out, &dir, &mut res, &mut self.ws);
                for (r, &i) in idx.iter().enumerate() {
                    cross[j][i] += res[r];
                }
            }
        }
        cross.iter().map(|c| sol.chol.solve(c).iter().map(|v| -v).collect()).collect()
    }
}

/// A factor `C` with `C Cᵀ` equal to the principal submatrix of the inverse
/// Hessian on `idx`.
fn local_factor(z: &BandMatrix, idx: &[usize]) -> DMatrix<f64> {
    let nl = idx.len();
    let w = DMatrix::from_fn(nl, nl, |r, c| z.get(idx[r], idx[c]));
    match w.clone().cholesky() {
        Some(ch) => ch.l(),
        None => {
            let eig = w.symmetric_eigen();
            let mut c = eig.eigenvectors.clone();
            for (k, &l) in eig.eigenvalues.iter().enumerate() {
                let s = l.max(0.0).sqrt();
                c.column_mut(k).scale_mut(s);
            }
            c
        }
    }
}

#[cfg(test)]
pub(crate) mod toy {
    //! Linear-Gaussian state-space toy: `x_t = φ x_{t−1} + w_t`,
    //! `y_t = x_t + v_t`, with a known-variance prior on `x_0`.

    use super::*;
    use crate::process::nll_normal;

    pub struct LinearGaussian {
        pub y: Vec<f64>,
        pub prior_sd: f64,
        pub terms: Vec<Vec<usize>>,
    }

    impl LinearGaussian {
        pub fn new(y: Vec<f64>, prior_sd: f64) -> Self {
            let n = y.len();
            let mut terms = vec![vec![0]];
            for t in 1..n {
                terms.push(vec![t - 1, t]);
            }
            for t in 0..n {
                terms.push(vec![t]);
            }
            LinearGaussian { y, prior_sd, terms }
        }

        /// θ = (log process sd, log obs sd, φ).
        pub fn kalman_nll(&self, theta: &[f64]) -> f64 {
            let (q, r, phi) = (theta[0].exp(), theta[1].exp(), theta[2]);
            let mut m = 0.0;
            let mut p = self.prior_sd * self.prior_sd;
            let mut nll = 0.0;
            for (t, &y) in self.y.iter().enumerate() {
                if t > 0 {
                    m *= phi;
                    p = phi * phi * p + q * q;
                }
                let s = p + r * r;
                let e = y - m;
                nll += 0.5 * ((2.0 * std::f64::consts::PI * s).ln() + e * e / s);
                let k = p / s;
                m += k * e;
                p *= 1.0 - k;
            }
            nll
        }
    }

    impl LatentModel for LinearGaussian {
        fn n_latent(&self) -> usize {
            self.y.len()
        }
        fn n_theta(&self) -> usize {
            3
        }
        fn bandwidth(&self) -> usize {
            1
        }
        fn terms(&self) -> &[Vec<usize>] {
            &self.terms
        }
        fn eval_term<R: Real>(&self, t: usize, u: &[R], theta: &[R]) -> R {
            let n = self.y.len();
            if t == 0 {
                nll_normal(u[0], R::cst(0.0), R::cst(self.prior_sd))
            } else if t < n {
                nll_normal(u[1], u[0] * theta[2], theta[0].exp())
            } else {
                nll_normal(R::cst(self.y[t - n]), u[0], theta[1].exp())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::toy::LinearGaussian;
    use super::*;
    use crate::process::nll_normal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_data(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0;
        (0..n)
            .map(|_| {
                x = 0.8 * x + rng.random_range(-0.5..0.5);
                x + rng.random_range(-0.3..0.3)
            })
            .collect()
    }

    #[test]
    fn matches_kalman_filter() {
        let model = LinearGaussian::new(toy_data(20, 3), 2.0);
        let mut lap = Laplace::new(&model, InnerOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let theta = [rng.random_range(-2.0..0.5), rng.random_range(-2.0..0.5), rng.random_range(-0.9..0.9)];
            let (v, _) = lap.marginal_nll(&theta, &vec![0.0; 20]).unwrap();
            assert!((v - model.kalman_nll(&theta)).abs() < 1e-6, "{v} vs {}", model.kalman_nll(&theta));
        }
    }

    #[test]
    fn value_is_independent_of_start() {
        let model = LinearGaussian::new(toy_data(15, 5), 2.0);
        let mut lap = Laplace::new(&model, InnerOptions::default());
        let theta = [-1.0, -1.2, 0.6];
        let (base, _) = lap.marginal_nll(&theta, &vec![0.0; 15]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let u0: Vec<f64> = (0..15).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (v, _) = lap.marginal_nll(&theta, &u0).unwrap();
            assert!((v - base).abs() < 1e-8);
        }
    }

    /// Poisson-count toy with log-intensity random walk: non-Gaussian, so
    /// the log-determinant depends on û and the third-order terms matter.
    struct PoissonWalk {
        counts: Vec<f64>,
        terms: Vec<Vec<usize>>,
    }

    impl LatentModel for PoissonWalk {
        fn n_latent(&self) -> usize {
            self.counts.len()
        }
        fn n_theta(&self) -> usize {
            2
        }
        fn bandwidth(&self) -> usize {
            1
        }
        fn terms(&self) -> &[Vec<usize>] {
            &self.terms
        }
        fn eval_term<R: Real>(&self, t: usize, u: &[R], theta: &[R]) -> R {
            let n = self.counts.len();
            if t == 0 {
                nll_normal(u[0], theta[1], R::cst(2.0))
            } else if t < n {
                nll_normal(u[1], u[0], theta[0].exp())
            } else {
                let y = self.counts[t - n];
                u[0].exp() - u[0] * y
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let counts = vec![3.0, 5.0, 2.0, 8.0, 6.0, 9.0, 4.0, 12.0, 7.0, 10.0];
        let n = counts.len();
        let mut terms = vec![vec![0]];
        for t in 1..n {
            terms.push(vec![t - 1, t]);
        }
        for t in 0..n {
            terms.push(vec![t]);
        }
        let model = PoissonWalk { counts, terms };
        let mut lap = Laplace::new(&model, InnerOptions { tol: 1e-11, max_iter: 100 });
        let u0 = vec![1.5; n];
        for theta in [[-1.0, 1.2], [-0.3, 2.0], [-2.0, 0.5]] {
            let (_, sol) = lap.marginal_nll(&theta, &u0).unwrap();
            let g = lap.marginal_gradient(&theta, &sol);
            for j in 0..2 {
                let h = 1e-5;
                let mut tp = theta;
                let mut tm = theta;
                tp[j] += h;
                tm[j] -= h;
                let fp = lap.marginal_nll(&tp, &u0).unwrap().0;
                let fm = lap.marginal_nll(&tm, &u0).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                assert!((g[j] - fd).abs() < 1e-4 * fd.abs().max(1.0), "{j}: {} vs {fd}", g[j]);
            }
            let sens = lap.latent_sensitivity(&theta, &sol);
            let h = 1e-6;
            let mut tp = theta;
            tp[0] += h;
            let up = lap.inner(&tp, &sol.u).unwrap().u;
            for i in 0..n {
                assert!((sens[0][i] - (up[i] - sol.u[i]) / h).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn kalman_gradient_matches_differences() {
        let model = LinearGaussian::new(toy_data(12, 8), 1.5);
        let mut lap = Laplace::new(&model, InnerOptions::default());
        let theta = [-0.7, -1.1, 0.4];
        let (_, sol) = lap.marginal_nll(&theta, &vec![0.0; 12]).unwrap();
        let g = lap.marginal_gradient(&theta, &sol);
        for j in 0..3 {
            let h = 1e-6;
            let mut tp = theta;
            let mut tm = theta;
            tp[j] += h;
            tm[j] -= h;
            let fd = (model.kalman_nll(&tp) - model.kalman_nll(&tm)) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }
}

//! Latent dynamics and predictions: F random walk, survival with a plus
//! group, recruitment, Baranov catches, survey indices, SSB and F-bar.

use crate::densities_mv::{ln_ar1_normal, Ar1Scale};
use crate::special::LN_SQRT_2PI;
use crate::{Error, Real};

/// Sd of the diffuse normal placed on first-year states.
pub const DIFFUSE_SD: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RecruitmentKind {
    #[default]
    RandomWalk,
    BevertonHolt,
}

/// Recruitment function with its parameters on the natural scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Recruitment<R> {
    RandomWalk,
    BevertonHolt { a: R, b: R },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessParams {
    pub f_scale: Ar1Scale,
    pub survival_sd: f64,
    pub recruitment: Recruitment<f64>,
    pub rec_sd: f64,
}

/// Predicted catch `F/Z (1 − e^{−Z}) N`.
pub fn baranov_catch(f: f64, m: f64, n: f64) -> f64 {
    let z = f + m;
    if z == 0.0 {
        return 0.0;
    }
    // −expm1(−Z)/Z stays accurate for small Z
    f * n * (-(-z).exp_m1() / z)
}

/// Log predicted catch from log F, M and log N.
pub fn log_baranov<R: Real>(log_f: R, m: f64, log_n: R) -> R {
    let z = log_f.exp() + m;
    log_f - z.ln() + (-(-z).exp_m1()).ln() + log_n
}

/// Predicted survey index `q N e^{−Z t}`.
pub fn survey_index(q: f64, f: f64, m: f64, n: f64, timing: f64) -> f64 {
    q * n * (-(f + m) * timing).exp()
}

pub fn log_survey_index<R: Real>(log_q: R, log_f: R, m: f64, log_n: R, timing: f64) -> R {
    log_q + log_n - (log_f.exp() + m) * timing
}

/// Spawning stock biomass `Σ p w N`.
pub fn ssb(n: &[f64], maturity: &[f64], stock_weight: &[f64]) -> f64 {
    n.iter().zip(maturity).zip(stock_weight).map(|((n, p), w)| n * p * w).sum()
}

pub fn ssb_generic<R: Real>(log_n: &[R], maturity: &[f64], stock_weight: &[f64]) -> R {
    let mut s = R::cst(0.0);
    for ((&l, &p), &w) in log_n.iter().zip(maturity).zip(stock_weight) {
        if p * w != 0.0 {
            s = s + l.exp() * (p * w);
        }
    }
    s
}

/// Unweighted mean of `f[range.0..=range.1]` (indices into `f`).
pub fn fbar(f: &[f64], range: (usize, usize)) -> Result<f64, Error> {
    if range.0 > range.1 || range.1 >= f.len() {
        return Err(Error::InvalidParameter(format!("F-bar range {range:?} outside {} ages", f.len())));
    }
    let sel = &f[range.0..=range.1];
    Ok(sel.iter().sum::<f64>() / sel.len() as f64)
}

pub fn fbar_generic<R: Real>(log_f: &[R]) -> R {
    let mut s = R::cst(0.0);
    for &l in log_f {
        s = s + l.exp();
    }
    s / log_f.len() as f64
}

/// Mean recruitment given last year's recruits and SSB.
pub fn recruitment_mean(kind: Recruitment<f64>, prev_recruits: f64, prev_ssb: f64) -> f64 {
    match kind {
        Recruitment::RandomWalk => prev_recruits,
        Recruitment::BevertonHolt { a, b } => a * prev_ssb / (1.0 + b * prev_ssb),
    }
}

/// `log R` generic in its inputs.
pub fn log_recruitment<R: Real>(kind: &Recruitment<R>, prev_log_recruits: R, prev_ssb: R) -> R {
    match *kind {
        Recruitment::RandomWalk => prev_log_recruits,
        Recruitment::BevertonHolt { a, b } => a.ln() + prev_ssb.ln() - (b * prev_ssb).ln_1p(),
    }
}

/// Negative log of a normal density.
pub fn nll_normal<R: Real>(x: R, mean: R, sd: R) -> R {
    let z = (x - mean) / sd;
    z * z * 0.5 + sd.ln() + LN_SQRT_2PI
}

/// `−ln` density of one year's log F increments.
pub fn nll_f_step<R: Real>(prev: &[R], cur: &[R], sds: &[R], rho: R) -> R {
    let inc: Vec<R> = cur.iter().zip(prev).map(|(&c, &p)| c - p).collect();
    -ln_ar1_normal(&inc, sds, rho)
}

/// Expected log N at ages `1..` of year `y` from year `y−1` states, the
/// plus group accumulating the two oldest classes. `log_f` is per age.
pub fn log_survivors<R: Real>(prev_log_n: &[R], prev_log_f: &[R], prev_m: &[f64]) -> Vec<R> {
    let a = prev_log_n.len();
    let mut out = Vec::with_capacity(a.saturating_sub(1));
    let lz = |i: usize| prev_log_n[i] - prev_log_f[i].exp() - prev_m[i];
    for i in 1..a {
        if i == a - 1 {
            let (x, y) = (lz(a - 2), lz(a - 1));
            // ln(e^x + e^y) without overflow
            let (hi, lo) = if x.value() >= y.value() { (x, y) } else { (y, x) };
            out.push(hi + (lo - hi).exp().ln_1p());
        } else {
            out.push(lz(i - 1));
        }
    }
    out
}

/// Latent states over `Y` years.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStates {
    /// `log_f[y][s]` for F state `s`.
    pub log_f: Vec<Vec<f64>>,
    /// `log_n[y][a]` for age index `a`.
    pub log_n: Vec<Vec<f64>>,
}

impl LatentStates {
    pub fn n_years(&self) -> usize {
        self.log_n.len()
    }
}

/// F-state index of each age index when `n_states` states cover `n_ages`.
pub fn f_state_map(n_ages: usize, n_states: usize) -> Vec<usize> {
    (0..n_ages).map(|a| a.min(n_states - 1)).collect()
}

/// Full process negative log-likelihood, first-year states diffuse.
/// `m[y][a]`, `maturity[y][a]`, `stock_weight[y][a]` are per year and age.
pub fn process_nll(
    states: &LatentStates,
    params: &ProcessParams,
    m: &[Vec<f64>],
    maturity: &[Vec<f64>],
    stock_weight: &[Vec<f64>],
) -> Result<f64, Error> {
    let ny = states.n_years();
    if ny < 2 {
        return Err(Error::Dimension("the process model needs at least two years".into()));
    }
    let na = states.log_n[0].len();
    let ns = states.log_f[0].len();
    if params.f_scale.sds.len() != ns || m.len() < ny || na < 2 {
        return Err(Error::Dimension("process parameters or biology do not match the states".into()));
    }
    let smap = f_state_map(na, ns);
    let mut nll = 0.0;
    for y in 0..ny {
        nll += year_nll(states, params, m, maturity, stock_weight, &smap, y);
    }
    Ok(nll)
}

/// Contribution of year `y` (diffuse prior for `y = 0`).
pub fn year_nll(
    states: &LatentStates,
    params: &ProcessParams,
    m: &[Vec<f64>],
    maturity: &[Vec<f64>],
    stock_weight: &[Vec<f64>],
    smap: &[usize],
    y: usize,
) -> f64 {
    if y == 0 {
        return states.log_f[0]
            .iter()
            .chain(&states.log_n[0])
            .map(|&v| nll_normal(v, 0.0, DIFFUSE_SD))
            .sum();
    }
    let (pf, cf) = (&states.log_f[y - 1], &states.log_f[y]);
    let mut nll = nll_f_step(pf, cf, &params.f_scale.sds, params.f_scale.rho);
    let pn = &states.log_n[y - 1];
    let age_f: Vec<f64> = smap.iter().map(|&s| pf[s]).collect();
    let surv = log_survivors(pn, &age_f, &m[y - 1]);
    for (a, mean) in surv.iter().enumerate() {
        nll += nll_normal(states.log_n[y][a + 1], *mean, params.survival_sd);
    }
    let prev_ssb = ssb(&pn.iter().map(|v| v.exp()).collect::<Vec<_>>(), &maturity[y - 1], &stock_weight[y - 1]);
    let lr = log_recruitment(&params.recruitment, pn[0], prev_ssb);
    nll + nll_normal(states.log_n[y][0], lr, params.rec_sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn baranov_examples() {
        assert_eq!(baranov_catch(0.0, 0.3, 100.0), 0.0);
        assert_eq!(baranov_catch(0.0, 0.0, 100.0), 0.0);
        let c = baranov_catch(0.2, 0.2, 1000.0);
        assert!((c - 164.840).abs() < 1e-3);
        assert!((c - 0.5 * (1.0 - (-0.4f64).exp()) * 1000.0).abs() < 1e-10);
        let lc = log_baranov(0.2f64.ln(), 0.2, 1000f64.ln());
        assert!((lc.exp() - c).abs() < 1e-9);
        let mut last = 0.0;
        for i in 1..200 {
            let c = baranov_catch(i as f64 * 0.01, 0.2, 500.0);
            assert!(c > last && c < 500.0);
            last = c;
        }
    }

    #[test]
    fn survey_examples() {
        assert_eq!(survey_index(0.3, 0.4, 0.2, 10.0, 0.0), 3.0);
        assert_eq!(survey_index(1.0, 0.0, 0.0, 42.0, 0.7), 42.0);
        assert!((survey_index(0.5, 0.3, 0.2, 100.0, 0.5) - 38.940).abs() < 1e-3);
        let l = log_survey_index(0.5f64.ln(), 0.3f64.ln(), 0.2, 100f64.ln(), 0.5);
        assert!((l.exp() - 50.0 * (-0.25f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn ssb_fbar_recruitment_examples() {
        assert_eq!(ssb(&[10.0, 5.0], &[0.0, 1.0], &[1.0, 2.0]), 10.0);
        assert_eq!(ssb(&[10.0, 5.0], &[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ssb(&[20.0, 10.0], &[0.3, 1.0], &[1.0, 2.0]), 2.0 * ssb(&[10.0, 5.0], &[0.3, 1.0], &[1.0, 2.0]));
        assert!((fbar(&[0.2, 0.4], (0, 1)).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(fbar(&[0.2, 0.4, 0.9], (2, 2)).unwrap(), 0.9);
        assert!(fbar(&[0.2], (0, 1)).is_err());
        assert_eq!(recruitment_mean(Recruitment::RandomWalk, 7.0, 123.0), 7.0);
        let bh = Recruitment::BevertonHolt { a: 2.0, b: 1.0 };
        assert_eq!(recruitment_mean(bh, 0.0, 1.0), 1.0);
        let s = 1e-8;
        assert!((recruitment_mean(bh, 0.0, s) / s - 2.0).abs() / 2.0 < 1e-6);
        let lr = log_recruitment(&bh, 0.0, 3.0);
        assert!((lr.exp() - recruitment_mean(bh, 0.0, 3.0)).abs() < 1e-12);
    }

    #[test]
    fn plus_group_accumulates() {
        let pn = [5.0f64.ln(), 4.0f64.ln(), 3.0f64.ln()];
        let pf = [0.1f64.ln(), 0.2f64.ln(), 0.3f64.ln()];
        let m = [0.2, 0.2, 0.25];
        let s = log_survivors(&pn, &pf, &m);
        assert!((s[0].exp() - 5.0 * (-0.3f64).exp()).abs() < 1e-12);
        let plus = 4.0 * (-0.4f64).exp() + 3.0 * (-0.55f64).exp();
        assert!((s[1].exp() - plus).abs() < 1e-12);
    }

    fn one_age_params() -> ProcessParams {
        ProcessParams {
            f_scale: Ar1Scale::new(vec![0.3], 0.0),
            survival_sd: 0.2,
            recruitment: Recruitment::RandomWalk,
            rec_sd: 0.4,
        }
    }

    #[test]
    fn toy_matches_hand_normals() {
        // two ages so survival exists; one F state
        let states = LatentStates {
            log_f: vec![vec![-1.0], vec![-0.8]],
            log_n: vec![vec![5.0, 4.0], vec![5.3, 4.1]],
        };
        let p = one_age_params();
        let m = vec![vec![0.2, 0.2]; 2];
        let mat = vec![vec![0.0, 1.0]; 2];
        let w = vec![vec![1.0, 1.0]; 2];
        let nll = process_nll(&states, &p, &m, &mat, &w).unwrap();
        let norm = |x: f64, mu: f64, s: f64| 0.5 * ((x - mu) / s).powi(2) + s.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
        let diffuse: f64 = [-1.0, 5.0, 4.0].iter().map(|&v| norm(v, 0.0, 10.0)).sum();
        let f = (-1.0f64).exp();
        let plus = (5.0 - f - 0.2f64).exp() + (4.0 - f - 0.2f64).exp();
        let expected = diffuse + norm(-0.8, -1.0, 0.3) + norm(4.1, plus.ln(), 0.2) + norm(5.3, 5.0, 0.4);
        assert!((nll - expected).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn zero_residuals_leave_constants(ny in 2usize..6, f0 in -2.0f64..0.0, n0 in 3.0f64..8.0) {
            let na = 3;
            let m = vec![vec![0.2; na]; ny];
            let mat = vec![vec![0.5; na]; ny];
            let w = vec![vec![1.0; na]; ny];
            let smap = f_state_map(na, 2);
            let mut log_f = vec![vec![f0, f0 + 0.1]];
            let mut log_n = vec![vec![n0, n0 - 0.5, n0 - 1.0]];
            for y in 1..ny {
                log_f.push(log_f[y - 1].clone());
                let age_f: Vec<f64> = smap.iter().map(|&s| log_f[y - 1][s]).collect();
                let mut next = vec![log_n[y - 1][0]];
                next.extend(log_survivors(&log_n[y - 1], &age_f, &m[y - 1]));
                log_n.push(next);
            }
            let states = LatentStates { log_f, log_n };
            let p = ProcessParams {
                f_scale: Ar1Scale::new(vec![0.2, 0.3], 0.4),
                survival_sd: 0.15,
                recruitment: Recruitment::RandomWalk,
                rec_sd: 0.5,
            };
            let nll = process_nll(&states, &p, &m, &mat, &w).unwrap();
            let first: f64 = states.log_f[0].iter().chain(&states.log_n[0]).map(|&v| nll_normal(v, 0.0, DIFFUSE_SD)).sum();
            let per_year = (0.2f64 * 0.3).ln() + 0.5 * (1.0 - 0.16f64).ln() + 2.0 * LN_SQRT_2PI
                + (na - 1) as f64 * (0.15f64.ln() + LN_SQRT_2PI) + 0.5f64.ln() + LN_SQRT_2PI;
            prop_assert!((nll - first - (ny - 1) as f64 * per_year).abs() < 1e-9);

            // dropping the final year removes exactly that year's terms
            let mut short = states.clone();
            short.log_f.pop();
            short.log_n.pop();
            if ny > 2 {
                let shorter = process_nll(&short, &p, &m, &mat, &w).unwrap();
                let last = year_nll(&states, &p, &m, &mat, &w, &smap, ny - 1);
                prop_assert!((nll - shorter - last).abs() < 1e-9);
            }
        }
    }
}

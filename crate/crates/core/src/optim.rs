//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Converged when `max |g| <` this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Largest change of any coordinate in one line search.
    pub max_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 10, grad_tol: 1e-6, max_iter: 500, max_step: 3.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    EvaluationFailed,
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: OptimStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Point {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Minimizes `f`, which returns value and gradient or `None` where it cannot
/// be evaluated.
pub fn minimize<F>(f: F, x0: &[f64], opts: &LbfgsOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let free = vec![(f64::NEG_INFINITY, f64::INFINITY); x0.len()];
    minimize_in_box(f, x0, &free, opts)
}

/// Gradient with the components of coordinates held at a bound zeroed.
pub fn projected_gradient(x: &[f64], g: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter().zip(g).zip(bounds).map(|((&xi, &gi), &(lo, hi))| if at_bound(xi, gi, lo, hi) { 0.0 } else { gi }).collect()
}

/// Whether coordinate `x` sits on a bound that `g` pushes it against.
fn at_bound(x: f64, g: f64, lo: f64, hi: f64) -> bool {
    (x <= lo && g > 0.0) || (x >= hi && g < 0.0)
}

/// As [`minimize`] within the box `bounds`. Coordinates pushed against a
/// bound are held there; convergence is on the projected gradient.
/// `x0` is clamped into the box first.
pub fn minimize_in_box<F>(mut f: F, x0: &[f64], bounds: &[(f64, f64)], opts: &LbfgsOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let x0: Vec<f64> = x0.iter().zip(bounds).map(|(v, &(lo, hi))| v.clamp(lo, hi)).collect();
    let mut evals = 1;
    let Some((mut fx, mut g)) = f(&x0).filter(|(v, g)| v.is_finite() && g.iter().all(|x| x.is_finite())) else {
        return OptimResult {
            x: x0,
            f: f64::NAN,
            grad: vec![f64::NAN; bounds.len()],
            iterations: 0,
            evaluations: evals,
            status: OptimStatus::EvaluationFailed,
        };
    };
    let mut x = x0;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut status = OptimStatus::MaxIterations;
    let mut iter = 0;
    let mut held = vec![false; x.len()];
    while iter < opts.max_iter {
        let pg = projected_gradient(&x, &g, bounds);
        if max_abs(&pg) < opts.grad_tol {
            status = OptimStatus::Converged;
            break;
        }
        let now_held: Vec<bool> = pg.iter().zip(&g).map(|(p, g)| *p == 0.0 && *g != 0.0).collect();
        if now_held != held {
            // the curvature pairs mix in the coordinates that changed status
            hist.clear();
            held = now_held;
        }
        let mut d = direction(&pg, &hist);
        let mut slope = dot(&d, &pg);
        if !(slope < 0.0) {
            hist.clear();
            d = pg.iter().map(|v| -v).collect();
            slope = dot(&d, &pg);
        }
        for (i, di) in d.iter_mut().enumerate() {
            if held[i] {
                *di = 0.0;
            }
        }
        // stop at the first bound along the direction
        let to_bound = (0..x.len())
            .map(|i| match d[i] {
                v if v < 0.0 => (bounds[i].0 - x[i]) / v,
                v if v > 0.0 => (bounds[i].1 - x[i]) / v,
                _ => f64::INFINITY,
            })
            .fold(f64::INFINITY, f64::min);
        let cap = (opts.max_step / max_abs(&d)).min(to_bound);
        if !(cap > 0.0) {
            // the quasi-Newton direction leaves the box; steepest descent
            // on the free coordinates does not
            hist.clear();
            iter += 1;
            continue;
        }
        let first = if hist.is_empty() { cap.min(1.0 / max_abs(&pg).max(1.0)) } else { 1.0f64.min(cap) };
        let mut eval = |a: f64| -> Option<Point> {
            evals += 1;
            let xt: Vec<f64> = x
                .iter()
                .zip(&d)
                .zip(bounds)
                .map(|((xi, di), &(lo, hi))| (xi + a * di).clamp(lo, hi))
                .collect();
            f(&xt)
                .filter(|(v, gt)| v.is_finite() && gt.iter().all(|z| z.is_finite()))
                .map(|(v, gt)| Point { alpha: a, f: v, slope: dot(&gt, &d), x: xt, g: gt })
        };
        let found = wolfe_search(&mut eval, fx, slope, first, cap);
        match found {
            Some(p) => {
                let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if hist.len() == opts.memory {
                        hist.pop_front();
                    }
                    hist.push_back((s, y, 1.0 / sy));
                }
                x = p.x;
                fx = p.f;
                g = p.g;
            }
            None => {
                if hist.is_empty() {
                    status = OptimStatus::LineSearchFailed;
                    break;
                }
                // retry along steepest descent before giving up
                hist.clear();
                iter += 1;
                continue;
            }
        }
        iter += 1;
    }
    if status == OptimStatus::MaxIterations && max_abs(&projected_gradient(&x, &g, bounds)) < opts.grad_tol {
        status = OptimStatus::Converged;
    }
    OptimResult { x, f: fx, grad: g, iterations: iter, evaluations: evals, status }
}

fn direction(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter().map(|v| -v).collect()
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn wolfe_search(
    eval: &mut impl FnMut(f64) -> Option<Point>,
    f0: f64,
    slope0: f64,
    first: f64,
    alpha_max: f64,
) -> Option<Point> {
    let mut prev = Point { alpha: 0.0, f: f0, slope: slope0, x: Vec::new(), g: Vec::new() };
    let mut alpha = first;
    for i in 0..30 {
        let Some(p) = eval(alpha) else {
            // outside the evaluable region: shrink toward the last good point
            return zoom(eval, prev, None, alpha, f0, slope0);
        };
        if p.f > f0 + C1 * alpha * slope0 || (i > 0 && p.f >= prev.f) {
            return zoom(eval, prev, Some(p), alpha, f0, slope0);
        }
        if p.slope.abs() <= -C2 * slope0 {
            return Some(p);
        }
        if p.slope >= 0.0 {
            let hi_alpha = prev.alpha;
            return zoom(eval, p, Some(prev), hi_alpha, f0, slope0);
        }
        if alpha >= alpha_max {
            return Some(p);
        }
        prev = p;
        alpha = (2.0 * alpha).min(alpha_max);
    }
    None
}

/// Zoom between `lo` (satisfies sufficient decrease) and the bracket end
/// `hi_alpha` (with its point when it could be evaluated).
fn zoom(
    eval: &mut impl FnMut(f64) -> Option<Point>,
    mut lo: Point,
    mut hi: Option<Point>,
    mut hi_alpha: f64,
    f0: f64,
    slope0: f64,
) -> Option<Point> {
    for _ in 0..40 {
        let a = match &hi {
            Some(h) => {
                // minimizer of the quadratic through lo (value, slope) and hi
                let da = h.alpha - lo.alpha;
                let denom = 2.0 * (h.f - lo.f - lo.slope * da);
                let t = if denom > 0.0 { lo.alpha - lo.slope * da * da / denom } else { f64::NAN };
                let (lo_b, hi_b) = if lo.alpha < h.alpha { (lo.alpha, h.alpha) } else { (h.alpha, lo.alpha) };
                let margin = 0.1 * (hi_b - lo_b);
                if t.is_finite() && t > lo_b + margin && t < hi_b - margin {
                    t
                } else {
                    0.5 * (lo.alpha + h.alpha)
                }
            }
            None => 0.5 * (lo.alpha + hi_alpha),
        };
        if (a - lo.alpha).abs() < 1e-14 * a.abs().max(1e-300) {
            break;
        }
        match eval(a) {
            None => {
                hi = None;
                hi_alpha = a;
            }
            Some(p) => {
                if p.f > f0 + C1 * a * slope0 || p.f >= lo.f {
                    hi_alpha = a;
                    hi = Some(p);
                } else {
                    if p.slope.abs() <= -C2 * slope0 {
                        return Some(p);
                    }
                    if p.slope * (hi_alpha - lo.alpha) >= 0.0 {
                        hi_alpha = lo.alpha;
                        hi = Some(lo);
                    }
                    lo = p;
                }
            }
        }
    }
    // accept any strict decrease found
    (lo.alpha > 0.0 && lo.f < f0).then_some(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let mut f = 0.0;
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            f += 100.0 * a * a + b * b;
            g[i] += -400.0 * x[i] * a - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        Some((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(rosenbrock, &[-1.2, 1.0, -0.5, 0.8], &LbfgsOptions::default());
        assert_eq!(r.status, OptimStatus::Converged);
        for v in &r.x {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn backs_off_from_undefined_regions() {
        // defined only for x > 0
        let f = |x: &[f64]| (x[0] > 0.0).then(|| (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]]));
        let r = minimize(f, &[5.0], &LbfgsOptions { max_step: 100.0, ..Default::default() });
        assert_eq!(r.status, OptimStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn holds_coordinates_on_active_bounds() {
        // unconstrained minimum at (-2, 3); the box cuts off x0 < -1
        let f = |x: &[f64]| Some(((x[0] + 2.0).powi(2) + (x[1] - 3.0).powi(2), vec![2.0 * (x[0] + 2.0), 2.0 * (x[1] - 3.0)]));
        let bounds = [(-1.0, 5.0), (f64::NEG_INFINITY, f64::INFINITY)];
        let r = minimize_in_box(f, &[4.0, 0.0], &bounds, &LbfgsOptions::default());
        assert_eq!(r.status, OptimStatus::Converged);
        assert_eq!(r.x[0], -1.0);
        assert!((r.x[1] - 3.0).abs() < 1e-7);
        assert!(r.grad[0] > 0.0);
    }

    #[test]
    fn asymptotes_stop_at_the_bound() {
        // decreasing towards +inf, as a likelihood in log degrees of freedom
        let f = |x: &[f64]| Some(((-x[0]).exp() + (x[1] - 1.0).powi(2), vec![-(-x[0]).exp(), 2.0 * (x[1] - 1.0)]));
        let bounds = [(f64::NEG_INFINITY, 9.0), (f64::NEG_INFINITY, f64::INFINITY)];
        let r = minimize_in_box(f, &[0.0, 0.0], &bounds, &LbfgsOptions::default());
        assert_eq!(r.status, OptimStatus::Converged);
        assert_eq!(r.x[0], 9.0);
    }

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| Some((0.5 * (x[0] * x[0] + 10.0 * x[1] * x[1]), vec![x[0], 10.0 * x[1]]));
        let r = minimize(f, &[1.0, 1.0], &LbfgsOptions::default());
        assert_eq!(r.status, OptimStatus::Converged);
        assert!(r.f < 1e-12);
    }
}

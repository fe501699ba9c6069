//! AIC intervals and the rule for discarding clearly inferior families.
//!
//! A family fitted with fully independent observation parameters gives the
//! upper end of its interval. Sharing parameters can at best keep the
//! likelihood while dropping parameters, so the lower end subtracts twice
//! the number of parameters that sharing removes.

use crate::estimator::FitResult;
use crate::model_space::{count_obs_params, Family, FamilyClass, FleetSpec, ShareMode};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AicInterval {
    pub family: Family,
    /// AIC of the full model.
    pub upper: f64,
    pub lower: f64,
    pub p_full: usize,
    pub p_min: usize,
}

impl AicInterval {
    pub fn new(family: Family, full_aic: f64, p_full: usize, p_min: usize) -> Result<Self, Error> {
        if p_min > p_full {
            return Err(Error::Config(format!("{family}: minimal count {p_min} exceeds full count {p_full}")));
        }
        Ok(AicInterval { family, upper: full_aic, lower: full_aic - 2.0 * (p_full - p_min) as f64, p_full, p_min })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Interval from a fit with fully independent observation parameters.
pub fn aic_interval(fit: &FitResult, fleets: &[FleetSpec]) -> Result<AicInterval, Error> {
    if fit.spec.share_mode != ShareMode::Full {
        return Err(Error::Config(format!(
            "{}: AIC intervals need a fit with full sharing mode, got {:?}",
            fit.family(),
            fit.spec.share_mode
        )));
    }
    let family = fit.family();
    AicInterval::new(
        family,
        fit.aic,
        count_obs_params(family, fleets, ShareMode::Full),
        count_obs_params(family, fleets, ShareMode::Minimal),
    )
}

/// `a` is clearly superior when its whole interval lies below `b`'s.
pub fn clearly_superior(a: &AicInterval, b: &AicInterval) -> bool {
    a.upper < b.lower
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyRanking {
    /// Surviving families ordered by full-model AIC.
    pub survivors: Vec<Family>,
    /// Discarded families with the family that dominates each by the widest
    /// margin.
    pub dropped: Vec<(Family, Family)>,
}

impl FamilyRanking {
    pub fn rank_of(&self, family: Family) -> Option<usize> {
        self.survivors.iter().position(|&f| f == family).map(|i| i + 1)
    }
}

/// Drops every family clearly inferior to another and ranks the rest by
/// full-model AIC.
pub fn filter_families(intervals: &[AicInterval]) -> FamilyRanking {
    let mut survivors: Vec<&AicInterval> = Vec::new();
    let mut dropped = Vec::new();
    for b in intervals {
        let best = intervals.iter().filter(|a| clearly_superior(a, b)).min_by(|x, y| {
            x.upper.total_cmp(&y.upper).then(x.family.index().cmp(&y.family.index()))
        });
        match best {
            Some(a) => dropped.push((b.family, a.family)),
            None => survivors.push(b),
        }
    }
    survivors.sort_by(|x, y| x.upper.total_cmp(&y.upper).then(x.family.index().cmp(&y.family.index())));
    dropped.sort_by_key(|(f, _)| f.index());
    FamilyRanking { survivors: survivors.into_iter().map(|i| i.family).collect(), dropped }
}

/// One row of the comparison report. Failed fits carry no numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub family: Family,
    pub class: FamilyClass,
    pub nll: Option<f64>,
    pub k: Option<usize>,
    pub interval: Option<AicInterval>,
    pub survived: bool,
    pub rank: Option<usize>,
    /// `converged`, `not-converged` or the failure message.
    pub status: String,
}

/// Report rows for `fits`, in the order given.
pub fn comparison_rows(fits: &[(Family, Result<FitResult, Error>)], fleets: &[FleetSpec]) -> Vec<ComparisonRow> {
    let intervals: Vec<Option<AicInterval>> = fits
        .iter()
        .map(|(_, r)| r.as_ref().ok().and_then(|f| aic_interval(f, fleets).ok()))
        .collect();
    let present: Vec<AicInterval> = intervals.iter().flatten().copied().collect();
    let ranking = filter_families(&present);
    fits.iter()
        .zip(intervals)
        .map(|((family, r), interval)| {
            let (nll, k, status) = match r {
                Ok(f) => (
                    Some(f.nll),
                    Some(f.k),
                    if f.converged() { "converged".to_string() } else { "not-converged".to_string() },
                ),
                Err(e) => (None, None, format!("failed: {e}")),
            };
            let rank = interval.and(ranking.rank_of(*family));
            ComparisonRow {
                family: *family,
                class: family.class(),
                nll,
                k,
                interval,
                survived: rank.is_some(),
                rank,
                status,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(family: Family, upper: f64, lower: f64) -> AicInterval {
        AicInterval { family, upper, lower, p_full: 0, p_min: 0 }
    }

    #[test]
    fn interval_arithmetic() {
        let i = AicInterval::new(Family::M1, 2.0 * 10.0 + 2.0 * 100.0, 8, 4).unwrap();
        assert_eq!((i.upper, i.lower), (220.0, 212.0));
        let d = AicInterval::new(Family::M1, 50.0, 3, 3).unwrap();
        assert_eq!(d.lower, d.upper);
        assert!(AicInterval::new(Family::M1, 50.0, 2, 3).is_err());
    }

    #[test]
    fn dominance_examples() {
        let a = iv(Family::M7, 6407.32, 6400.0);
        let b = iv(Family::M1, 6420.0, 6405.52);
        assert!(!clearly_superior(&a, &b));
        assert!(clearly_superior(&iv(Family::M1, 100.0, 90.0), &iv(Family::M2, 310.0, 300.0)));
        assert!(!clearly_superior(&a, &a));
    }

    #[test]
    fn filtering_examples() {
        let r = filter_families(&[iv(Family::M1, 10.0, 5.0), iv(Family::M2, 30.0, 20.0), iv(Family::M3, 40.0, 25.0)]);
        assert_eq!(r.survivors, vec![Family::M1]);
        let r = filter_families(&[iv(Family::M1, 10.0, 5.0), iv(Family::M2, 12.0, 8.0), iv(Family::M3, 11.0, 3.0)]);
        assert_eq!(r.survivors, vec![Family::M1, Family::M3, Family::M2]);
        let r = filter_families(&[
            iv(Family::M7, 6400.0, 6380.0),
            iv(Family::M8, 6410.0, 6390.0),
            iv(Family::M10, 6800.0, 6600.0),
        ]);
        assert_eq!(r.dropped, vec![(Family::M10, Family::M7)]);
    }

    fn arb_intervals() -> impl Strategy<Value = Vec<AicInterval>> {
        prop::collection::vec((0.0..100.0f64, 0.0..20.0f64), 1..13).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (u, w))| iv(Family::ALL[i], u, u - w))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn order_independent(v in arb_intervals(), seed in 0u64..1000) {
            let mut w = v.clone();
            let n = w.len();
            for i in 0..n {
                w.swap(i, (seed as usize * 31 + i * 17) % n);
            }
            prop_assert_eq!(filter_families(&v), filter_families(&w));
        }

        #[test]
        fn best_upper_survives(v in arb_intervals()) {
            let r = filter_families(&v);
            let best = v.iter().min_by(|a, b| a.upper.total_cmp(&b.upper)).unwrap();
            prop_assert!(r.survivors.contains(&best.family));
        }

        #[test]
        fn never_mutually_superior(v in arb_intervals()) {
            for a in &v {
                for b in &v {
                    prop_assert!(!(clearly_superior(a, b) && clearly_superior(b, a)));
                }
            }
        }
    }
}

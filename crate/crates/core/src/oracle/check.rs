use super::adjust::{backdoor, frontdoor, interventional_truth, observational};
use super::Scm;
use crate::error::{CbbError, Result};
use serde::{Deserialize, Serialize};

/// Agreement between the adjustment formulas and the interventional truth
/// over a batch of random models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub n_scms: usize,
    pub base_seed: u64,
    /// Largest absolute difference between any two of back-door,
    /// front-door and interventional truth, over all models and all `x`.
    pub max_deviation: f64,
    /// Largest total variation between `P(Y | x)` and `P(Y | do(x))`.
    pub max_tv_gap: f64,
    /// Seed of the model attaining `max_tv_gap`.
    pub max_tv_seed: u64,
}

/// Seed of the `i`-th model in a batch drawn from `base`.
pub fn scm_seed(base: u64, i: usize) -> u64 {
    (base << 32).wrapping_add(i as u64)
}

/// Per-`x` comparison for one model: `(max deviation, max TV gap)`.
pub fn compare_adjustments(scm: &Scm) -> Result<(f64, f64)> {
    let mut dev = 0.0f64;
    let mut gap = 0.0f64;
    for x in 0..scm.card_x() {
        let truth = interventional_truth(scm, x)?;
        let bd = backdoor(scm, x)?;
        let fd = frontdoor(scm, x)?;
        dev = dev
            .max(bd.max_abs_diff(&truth))
            .max(fd.max_abs_diff(&truth))
            .max(bd.max_abs_diff(&fd));
        gap = gap.max(observational(scm, x)?.tv(&truth));
    }
    Ok((dev, gap))
}

/// Draws `n` models with [`Scm::random_any`] and compares every adjustment.
pub fn cross_check(n: usize, base_seed: u64) -> Result<CrossCheck> {
    if n == 0 {
        return Err(CbbError::Param("need at least one model".into()));
    }
    let mut out = CrossCheck {
        n_scms: n,
        base_seed,
        max_deviation: 0.0,
        max_tv_gap: 0.0,
        max_tv_seed: scm_seed(base_seed, 0),
    };
    for i in 0..n {
        let seed = scm_seed(base_seed, i);
        let (dev, gap) = compare_adjustments(&Scm::random_any(seed))?;
        out.max_deviation = out.max_deviation.max(dev);
        if gap > out.max_tv_gap {
            out.max_tv_gap = gap;
            out.max_tv_seed = seed;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_batch_is_rejected() {
        assert!(matches!(cross_check(0, 0), Err(CbbError::Param(_))));
    }

    #[test]
    fn seeds_do_not_collide_across_bases() {
        assert_ne!(scm_seed(0, 1), scm_seed(1, 0));
        assert_eq!(scm_seed(0, 7), 7);
    }

    #[test]
    fn gap_seed_reproduces_gap() {
        let c = cross_check(20, 3).unwrap();
        let (_, gap) = compare_adjustments(&Scm::random_any(c.max_tv_seed)).unwrap();
        assert_eq!(gap, c.max_tv_gap);
        assert!(c.max_deviation < 1e-12);
    }
}

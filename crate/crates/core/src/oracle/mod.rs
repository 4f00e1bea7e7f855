//! Exact enumeration over small discrete structural causal models.
//!
//! The graph is fixed:
//!
//! ```text
//!      Z ──────────┐
//!      │           ▼
//!      X ──► M ──► Y
//! ```
//!
//! `Z` confounds `X` and `Y`, and `M` carries all of the effect of `X` on
//! `Y`, so both the back-door set `{Z}` and the front-door mediator `M`
//! identify `P(Y | do(X))`. Every adjustment here is computed from the full
//! joint table by summation; nothing is sampled. [`sample_dataset`] is the
//! only stochastic entry point.

mod adjust;
mod check;
mod sample;

pub use adjust::{backdoor, frontdoor, interventional_truth, observational, Joint};
pub use check::{compare_adjustments, cross_check, scm_seed, CrossCheck};
pub use sample::{empirical_conditional, sample_dataset, Regime, Sample};

use crate::error::{CbbError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

pub const MAX_CARD: usize = 8;
pub const PROB_TOL: f64 = 1e-12;

/// A probability vector over `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Dist(Vec<f64>);

impl Dist {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        check_row(&p, "distribution")?;
        Ok(Self(p))
    }

    pub fn point(len: usize, at: usize) -> Self {
        let mut p = vec![0.0; len];
        p[at] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs_diff(&self, other: &Dist) -> f64 {
        assert_eq!(
            self.len(),
            other.len(),
            "comparing distributions of different size"
        );
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Total-variation distance, `0.5 * sum |p - q|`.
    pub fn tv(&self, other: &Dist) -> f64 {
        assert_eq!(
            self.len(),
            other.len(),
            "comparing distributions of different size"
        );
        0.5 * self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

impl TryFrom<Vec<f64>> for Dist {
    type Error = CbbError;
    fn try_from(p: Vec<f64>) -> Result<Self> {
        Self::new(p)
    }
}

impl From<Dist> for Vec<f64> {
    fn from(d: Dist) -> Self {
        d.0
    }
}

fn check_row(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(CbbError::Param(format!("{what} is empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CbbError::Param(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(CbbError::Param(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Conditional probability tables for `Z -> X -> M -> Y <- Z`.
///
/// Table layouts, outermost index first: `p_x_given_z[z][x]`,
/// `p_m_given_x[x][m]`, `p_y_given_m_z[m][z][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScmTables", into = "ScmTables")]
pub struct Scm {
    card_z: usize,
    card_x: usize,
    card_m: usize,
    card_y: usize,
    p_z: Vec<f64>,
    p_x_given_z: Vec<Vec<f64>>,
    p_m_given_x: Vec<Vec<f64>>,
    p_y_given_m_z: Vec<Vec<Vec<f64>>>,
}

/// Unvalidated serialized form of [`Scm`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScmTables {
    pub card_z: usize,
    pub card_x: usize,
    pub card_m: usize,
    pub card_y: usize,
    pub p_z: Vec<f64>,
    pub p_x_given_z: Vec<Vec<f64>>,
    pub p_m_given_x: Vec<Vec<f64>>,
    pub p_y_given_m_z: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<ScmTables> for Scm {
    type Error = CbbError;
    fn try_from(t: ScmTables) -> Result<Self> {
        Scm::new(t.p_z, t.p_x_given_z, t.p_m_given_x, t.p_y_given_m_z)
    }
}

impl From<Scm> for ScmTables {
    fn from(s: Scm) -> Self {
        ScmTables {
            card_z: s.card_z,
            card_x: s.card_x,
            card_m: s.card_m,
            card_y: s.card_y,
            p_z: s.p_z,
            p_x_given_z: s.p_x_given_z,
            p_m_given_x: s.p_m_given_x,
            p_y_given_m_z: s.p_y_given_m_z,
        }
    }
}

impl Scm {
    /// Validates the tables; cardinalities are read off their shapes.
    pub fn new(
        p_z: Vec<f64>,
        p_x_given_z: Vec<Vec<f64>>,
        p_m_given_x: Vec<Vec<f64>>,
        p_y_given_m_z: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let card_z = p_z.len();
        let card_x = p_x_given_z.first().map_or(0, Vec::len);
        let card_m = p_m_given_x.first().map_or(0, Vec::len);
        let card_y = p_y_given_m_z
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len);
        for (name, c) in [("Z", card_z), ("X", card_x), ("M", card_m), ("Y", card_y)] {
            if c == 0 || c > MAX_CARD {
                return Err(CbbError::Param(format!(
                    "cardinality of {name} is {c}, must be in 1..={MAX_CARD}"
                )));
            }
        }
        check_row(&p_z, "P(Z)")?;
        let table = |rows: &[Vec<f64>], n_rows: usize, width: usize, name: &str| -> Result<()> {
            if rows.len() != n_rows {
                return Err(CbbError::Param(format!(
                    "{name} has {} rows, expected {n_rows}",
                    rows.len()
                )));
            }
            for (i, r) in rows.iter().enumerate() {
                if r.len() != width {
                    return Err(CbbError::Param(format!(
                        "{name} row {i} has width {}, expected {width}",
                        r.len()
                    )));
                }
                check_row(r, &format!("{name} row {i}"))?;
            }
            Ok(())
        };
        table(&p_x_given_z, card_z, card_x, "P(X|Z)")?;
        table(&p_m_given_x, card_x, card_m, "P(M|X)")?;
        if p_y_given_m_z.len() != card_m {
            return Err(CbbError::Param(format!(
                "P(Y|M,Z) has {} mediator slices, expected {card_m}",
                p_y_given_m_z.len()
            )));
        }
        for (m, slice) in p_y_given_m_z.iter().enumerate() {
            table(slice, card_z, card_y, &format!("P(Y|M={m},Z)"))?;
        }
        Ok(Self {
            card_z,
            card_x,
            card_m,
            card_y,
            p_z,
            p_x_given_z,
            p_m_given_x,
            p_y_given_m_z,
        })
    }

    /// Every row drawn from a flat Dirichlet, seeded.
    pub fn random(cards: [usize; 4], seed: u64) -> Result<Self> {
        let [cz, cx, cm, cy] = cards;
        if cards.iter().any(|&c| c == 0 || c > MAX_CARD) {
            return Err(CbbError::Param(format!(
                "cardinalities {cards:?} must lie in 1..={MAX_CARD}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = |n: usize| dirichlet_row(n, &mut rng);
        let p_z = row(cz);
        let p_x_given_z = (0..cz).map(|_| row(cx)).collect();
        let p_m_given_x = (0..cx).map(|_| row(cm)).collect();
        let p_y_given_m_z = (0..cm)
            .map(|_| (0..cz).map(|_| row(cy)).collect())
            .collect();
        Self::new(p_z, p_x_given_z, p_m_given_x, p_y_given_m_z)
    }

    /// Like [`Scm::random`] with cardinalities also drawn from the seed,
    /// each in `2..=MAX_CARD`.
    pub fn random_any(seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d));
        let cards = [0; 4].map(|_| rng.random_range(2..=MAX_CARD));
        Self::random(cards, seed).expect("cardinalities are in range")
    }

    pub fn cards(&self) -> [usize; 4] {
        [self.card_z, self.card_x, self.card_m, self.card_y]
    }

    pub fn card_z(&self) -> usize {
        self.card_z
    }

    pub fn card_x(&self) -> usize {
        self.card_x
    }

    pub fn card_m(&self) -> usize {
        self.card_m
    }

    pub fn card_y(&self) -> usize {
        self.card_y
    }

    pub fn p_z(&self) -> &[f64] {
        &self.p_z
    }

    pub fn p_x_given_z(&self, z: usize) -> &[f64] {
        &self.p_x_given_z[z]
    }

    pub fn p_m_given_x(&self, x: usize) -> &[f64] {
        &self.p_m_given_x[x]
    }

    pub fn p_y_given_m_z(&self, m: usize, z: usize) -> &[f64] {
        &self.p_y_given_m_z[m][z]
    }

    pub(crate) fn check_x(&self, x: usize) -> Result<()> {
        if x >= self.card_x {
            return Err(CbbError::Usage(format!(
                "x = {x} out of range for cardinality {}",
                self.card_x
            )));
        }
        Ok(())
    }

    /// A binary SCM with an identity-like mediator and a strong `Z -> X`,
    /// `Z -> Y` confounding path.
    ///
    /// `leak` is `P(X != Z)`, `mediator_noise` is `P(M != X)` and
    /// `z_effect` moves `P(Y = 1)` from `0.5 - z_effect` to `0.5 + z_effect`
    /// as `Z` goes from 0 to 1, on top of a small `M` effect.
    pub fn confounded_binary(leak: f64, mediator_noise: f64, z_effect: f64) -> Result<Self> {
        let flip = |q: f64| vec![vec![1.0 - q, q], vec![q, 1.0 - q]];
        let y_row = |p1: f64| vec![1.0 - p1, p1];
        let p_y = (0..2)
            .map(|m| {
                (0..2)
                    .map(|z| {
                        let base = 0.5 + if z == 1 { z_effect } else { -z_effect };
                        let p1 = (base + 0.05 * m as f64 - 0.025).clamp(0.0, 1.0);
                        y_row(p1)
                    })
                    .collect()
            })
            .collect();
        Self::new(vec![0.5, 0.5], flip(leak), flip(mediator_noise), p_y)
    }
}

fn dirichlet_row<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            e.max(f64::MIN_POSITIVE)
        })
        .collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

use super::Scm;
use crate::error::{CbbError, Result};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Ancestral sampling through the full graph.
    Observational,
    /// `X` drawn from its observational marginal but independently of `Z`,
    /// as in a randomized experiment. Conditioning on `X = x` in such a
    /// sample estimates `P(Y | do(X = x))`.
    Interventional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub x: usize,
    pub m: usize,
    pub y: usize,
    pub z: usize,
}

fn sampler(p: &[f64]) -> WeightedIndex<f64> {
    WeightedIndex::new(p).expect("validated rows have positive mass")
}

/// `n` i.i.d. draws under `regime`, deterministic in `seed`.
pub fn sample_dataset(scm: &Scm, n: usize, regime: Regime, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(CbbError::Param("sample size must be at least 1".into()));
    }
    let [cz, cx, cm, _] = scm.cards();
    let z_dist = sampler(scm.p_z());
    let x_dists: Vec<_> = (0..cz).map(|z| sampler(scm.p_x_given_z(z))).collect();
    let m_dists: Vec<_> = (0..cx).map(|x| sampler(scm.p_m_given_x(x))).collect();
    let y_dists: Vec<Vec<_>> = (0..cm)
        .map(|m| (0..cz).map(|z| sampler(scm.p_y_given_m_z(m, z))).collect())
        .collect();
    let x_marginal = {
        let px: Vec<f64> = (0..cx)
            .map(|x| (0..cz).map(|z| scm.p_z()[z] * scm.p_x_given_z(z)[x]).sum())
            .collect();
        sampler(&px)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let z = z_dist.sample(&mut rng);
            let x = match regime {
                Regime::Observational => x_dists[z].sample(&mut rng),
                Regime::Interventional => x_marginal.sample(&mut rng),
            };
            let m = m_dists[x].sample(&mut rng);
            let y = y_dists[m][z].sample(&mut rng);
            Sample { x, m, y, z }
        })
        .collect())
}

/// Empirical `P(Y | X = x)` and the number of samples with `X = x`.
pub fn empirical_conditional(samples: &[Sample], x: usize, card_y: usize) -> (Vec<f64>, usize) {
    let mut counts = vec![0usize; card_y];
    for s in samples.iter().filter(|s| s.x == x) {
        counts[s.y] += 1;
    }
    let n: usize = counts.iter().sum();
    let freq = counts
        .iter()
        .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    (freq, n)
}

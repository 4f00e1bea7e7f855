use super::{Dist, Scm};
use crate::error::{CbbError, Result};

/// Full joint table `P(z, x, m, y)`, row-major in that index order.
#[derive(Debug, Clone)]
pub struct Joint {
    cards: [usize; 4],
    p: Vec<f64>,
}

impl Joint {
    pub fn of(scm: &Scm) -> Self {
        let [cz, cx, cm, cy] = scm.cards();
        let mut p = Vec::with_capacity(cz * cx * cm * cy);
        for z in 0..cz {
            for x in 0..cx {
                for m in 0..cm {
                    for y in 0..cy {
                        p.push(
                            scm.p_z()[z]
                                * scm.p_x_given_z(z)[x]
                                * scm.p_m_given_x(x)[m]
                                * scm.p_y_given_m_z(m, z)[y],
                        );
                    }
                }
            }
        }
        Self {
            cards: scm.cards(),
            p,
        }
    }

    pub fn at(&self, z: usize, x: usize, m: usize, y: usize) -> f64 {
        let [_, cx, cm, cy] = self.cards;
        self.p[((z * cx + x) * cm + m) * cy + y]
    }

    /// Sums the joint with each `Some(v)` index fixed to `v` and each `None`
    /// index marginalized.
    pub fn mass(
        &self,
        z: Option<usize>,
        x: Option<usize>,
        m: Option<usize>,
        y: Option<usize>,
    ) -> f64 {
        let [cz, cx, cm, cy] = self.cards;
        let range = |pin: Option<usize>, card: usize| match pin {
            Some(v) => v..v + 1,
            None => 0..card,
        };
        let mut total = 0.0;
        for zi in range(z, cz) {
            for xi in range(x, cx) {
                for mi in range(m, cm) {
                    for yi in range(y, cy) {
                        total += self.at(zi, xi, mi, yi);
                    }
                }
            }
        }
        total
    }
}

fn normalized(mut p: Vec<f64>) -> Result<Dist> {
    // Exact sums of products drift from 1 by a few ulps; rescale so the
    // result passes the 1e-12 distribution check regardless of size.
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Dist::new(p)
}

/// `P(Y | X = x)`, i.e. `sum_z P(Y | x, z) P(z | x)`, from the joint.
pub fn observational(scm: &Scm, x: usize) -> Result<Dist> {
    scm.check_x(x)?;
    let joint = Joint::of(scm);
    let px = joint.mass(None, Some(x), None, None);
    if px <= 0.0 {
        return Err(CbbError::Conditioning(format!("P(X = {x}) is zero")));
    }
    let mut out = vec![0.0; scm.card_y()];
    for z in 0..scm.card_z() {
        let pxz = joint.mass(Some(z), Some(x), None, None);
        if pxz <= 0.0 {
            continue;
        }
        let pz_given_x = pxz / px;
        for (y, o) in out.iter_mut().enumerate() {
            *o += joint.mass(Some(z), Some(x), None, Some(y)) / pxz * pz_given_x;
        }
    }
    normalized(out)
}

/// Back-door adjustment over the observed confounder:
/// `sum_z P(Y | x, z) P(z)`.
///
/// `P(Y | x, z)` is read from the joint where `P(x, z) > 0`. In strata the
/// observational data never visits it comes from the model's own mechanism,
/// `sum_m P(m | x) P(Y | m, z)`, which is what the joint would give in the
/// limit.
pub fn backdoor(scm: &Scm, x: usize) -> Result<Dist> {
    scm.check_x(x)?;
    let joint = Joint::of(scm);
    let mut out = vec![0.0; scm.card_y()];
    for z in 0..scm.card_z() {
        let pz = scm.p_z()[z];
        if pz == 0.0 {
            continue;
        }
        let pxz = joint.mass(Some(z), Some(x), None, None);
        for (y, o) in out.iter_mut().enumerate() {
            let py = if pxz > 0.0 {
                joint.mass(Some(z), Some(x), None, Some(y)) / pxz
            } else {
                (0..scm.card_m())
                    .map(|m| scm.p_m_given_x(x)[m] * scm.p_y_given_m_z(m, z)[y])
                    .sum()
            };
            *o += py * pz;
        }
    }
    normalized(out)
}

/// Front-door adjustment through the mediator:
/// `sum_m P(m | x) sum_x' P(Y | x', m) P(x')`.
///
/// Only observational quantities of `X`, `M` and `Y` are used. Cells with
/// `P(x') = 0` drop out. A cell with `P(x') > 0` but `P(x', m) = 0`, for an
/// `m` that `x` reaches, leaves `P(Y | x', m)` undefined and is reported as
/// a conditioning error.
pub fn frontdoor(scm: &Scm, x: usize) -> Result<Dist> {
    scm.check_x(x)?;
    let joint = Joint::of(scm);
    let px = joint.mass(None, Some(x), None, None);
    if px <= 0.0 {
        return Err(CbbError::Conditioning(format!(
            "P(M | X = {x}) is undefined because P(X = {x}) is zero"
        )));
    }
    let p_xprime: Vec<f64> = (0..scm.card_x())
        .map(|xp| joint.mass(None, Some(xp), None, None))
        .collect();
    let mut out = vec![0.0; scm.card_y()];
    for m in 0..scm.card_m() {
        let pm_given_x = joint.mass(None, Some(x), Some(m), None) / px;
        if pm_given_x == 0.0 {
            continue;
        }
        for (xp, &pxp) in p_xprime.iter().enumerate() {
            if pxp == 0.0 {
                continue;
            }
            let pxm = joint.mass(None, Some(xp), Some(m), None);
            if pxm <= 0.0 {
                return Err(CbbError::Conditioning(format!(
                    "P(M = {m} | X = {xp}) is zero while P(X = {xp}) > 0 and X = {x} reaches M = {m}"
                )));
            }
            for (y, o) in out.iter_mut().enumerate() {
                *o += pm_given_x * joint.mass(None, Some(xp), Some(m), Some(y)) / pxm * pxp;
            }
        }
    }
    normalized(out)
}

/// `P(Y | do(X = x))` on the mutilated graph: the `Z -> X` arrow is cut and
/// `X` clamped, so `sum_z sum_m P(z) P(m | x) P(Y | m, z)`. Defined for
/// every `x`, including ones the observational regime never produces.
pub fn interventional_truth(scm: &Scm, x: usize) -> Result<Dist> {
    scm.check_x(x)?;
    let mut out = vec![0.0; scm.card_y()];
    for z in 0..scm.card_z() {
        for m in 0..scm.card_m() {
            let w = scm.p_z()[z] * scm.p_m_given_x(x)[m];
            for (y, o) in out.iter_mut().enumerate() {
                *o += w * scm.p_y_given_m_z(m, z)[y];
            }
        }
    }
    normalized(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unconfounded() -> Scm {
        // Same P(X | Z) row for every z.
        Scm::new(
            vec![0.3, 0.7],
            vec![vec![0.2, 0.5, 0.3]; 2],
            vec![vec![0.6, 0.4], vec![0.1, 0.9], vec![0.5, 0.5]],
            vec![
                vec![vec![0.9, 0.1], vec![0.2, 0.8]],
                vec![vec![0.4, 0.6], vec![0.7, 0.3]],
            ],
        )
        .unwrap()
    }

    /// Z pinned to 0, X = 1 always, M = X, Y = 1 - M.
    fn deterministic() -> Scm {
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        Scm::new(
            vec![1.0, 0.0],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            id,
            vec![
                vec![vec![0.0, 1.0], vec![0.0, 1.0]],
                vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            ],
        )
        .unwrap()
    }

    #[test]
    fn no_confounding_observational_is_interventional() {
        let scm = unconfounded();
        for x in 0..3 {
            let obs = observational(&scm, x).unwrap();
            let truth = interventional_truth(&scm, x).unwrap();
            assert!(obs.max_abs_diff(&truth) < 1e-12);
            assert!(backdoor(&scm, x).unwrap().max_abs_diff(&obs) < 1e-12);
        }
    }

    #[test]
    fn deterministic_chain_gives_point_masses() {
        let scm = deterministic();
        assert_eq!(observational(&scm, 1).unwrap(), Dist::point(2, 0));
        assert_eq!(interventional_truth(&scm, 1).unwrap(), Dist::point(2, 0));
        assert_eq!(interventional_truth(&scm, 0).unwrap(), Dist::point(2, 1));
    }

    #[test]
    fn zero_probability_x_is_a_conditioning_error() {
        let scm = deterministic();
        assert!(matches!(
            observational(&scm, 0),
            Err(CbbError::Conditioning(_))
        ));
        assert!(matches!(frontdoor(&scm, 0), Err(CbbError::Conditioning(_))));
        // The intervention does not care about observational support.
        assert_eq!(interventional_truth(&scm, 0).unwrap().len(), 2);
        // Back-door falls back to the mechanism in unvisited strata.
        assert_eq!(backdoor(&scm, 0).unwrap(), Dist::point(2, 1));
    }

    #[test]
    fn backdoor_ignores_x_when_y_independent_of_x_given_z() {
        // P(Y | M, Z) does not depend on M.
        let scm = Scm::new(
            vec![0.5, 0.5],
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![vec![vec![0.8, 0.2], vec![0.3, 0.7]]; 2],
        )
        .unwrap();
        let mixture = Dist::new(vec![0.55, 0.45]).unwrap();
        for x in 0..2 {
            assert!(backdoor(&scm, x).unwrap().max_abs_diff(&mixture) < 1e-12);
        }
    }

    #[test]
    fn out_of_range_x() {
        let scm = unconfounded();
        assert!(matches!(observational(&scm, 3), Err(CbbError::Usage(_))));
        assert!(matches!(
            interventional_truth(&scm, 9),
            Err(CbbError::Usage(_))
        ));
    }

    #[test]
    fn exact_identity_mediator_breaks_positivity() {
        let scm = Scm::confounded_binary(0.1, 0.0, 0.3).unwrap();
        assert!(matches!(frontdoor(&scm, 0), Err(CbbError::Conditioning(_))));
    }

    #[test]
    fn joint_sums_to_one() {
        let scm = Scm::random([4, 3, 5, 2], 3).unwrap();
        let j = Joint::of(&scm);
        assert!((j.mass(None, None, None, None) - 1.0).abs() < 1e-12);
    }
}

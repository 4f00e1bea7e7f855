use crate::error::{shape_err, CbbError, Result};
use crate::tensor::{kernels, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Ridge added to every Gram matrix `B B^T` before solving.
pub const DEFAULT_GRAM_RIDGE: f64 = 1e-6;
pub const DEFAULT_SAMPLE_QUERIES: usize = 16;
pub const DEFAULT_BASIS_RATIO: f64 = 0.5;
pub const QUERY_INIT_STD: f64 = 0.02;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Number of bases for a channel width and basis ratio: `floor(ratio * C)`,
/// which must land in `[1, C)`.
pub fn basis_count(channels: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CbbError::Param(format!(
            "basis ratio {ratio} outside (0, 1)"
        )));
    }
    let k = (ratio * channels as f64).floor() as usize;
    if k < 1 || k >= channels {
        return Err(CbbError::Param(format!(
            "basis ratio {ratio} with {channels} channels gives K = {k}, need 1 <= K < C"
        )));
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbbConfig {
    pub channels: usize,
    pub sample_queries: usize,
    pub basis_ratio: f64,
    pub ridge: f64,
    /// Use one basis/query set for both expectation branches.
    pub share_branches: bool,
    pub seed: u64,
}

impl Default for CbbConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            sample_queries: DEFAULT_SAMPLE_QUERIES,
            basis_ratio: DEFAULT_BASIS_RATIO,
            ridge: DEFAULT_GRAM_RIDGE,
            share_branches: false,
            seed: 0,
        }
    }
}

/// Learnable bases `B` (`K x C`, `1 <= K < C`) spanning the low-rank
/// subspace expectations are projected onto.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub bases: Tensor,
    pub ridge: f64,
}

impl BasisSet {
    pub fn new(bases: Tensor, ridge: f64) -> Result<Self> {
        let [k, c] = bases.shape() else {
            return Err(shape_err(format!(
                "bases must be K x C, got {:?}",
                bases.shape()
            )));
        };
        if *k < 1 || k >= c {
            return Err(CbbError::Param(format!(
                "need 1 <= K < C, got K = {k}, C = {c}"
            )));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(CbbError::Param(format!(
                "ridge must be finite and >= 0, got {ridge}"
            )));
        }
        Ok(Self { bases, ridge })
    }

    pub fn k(&self) -> usize {
        self.bases.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.bases.shape()[1]
    }

    /// `B B^T + ridge I`.
    pub fn gram(&self) -> Tensor {
        let mut g = kernels::matmul(
            &self.bases,
            &kernels::transpose(&self.bases).expect("rank 2"),
        )
        .expect("K x C times C x K");
        let k = self.k();
        for i in 0..k {
            g.data_mut()[i * k + i] += self.ridge;
        }
        g
    }
}

/// Learnable sample queries `Q_s` (`S x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleQueries {
    pub queries: Tensor,
}

impl SampleQueries {
    pub fn new(queries: Tensor) -> Result<Self> {
        if queries.rank() != 2 {
            return Err(shape_err(format!(
                "queries must be S x C, got {:?}",
                queries.shape()
            )));
        }
        Ok(Self { queries })
    }

    pub fn s(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.queries.shape()[1]
    }
}

/// One expectation-estimation branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub basis: BasisSet,
    pub queries: SampleQueries,
}

impl Branch {
    pub fn new(basis: BasisSet, queries: SampleQueries) -> Result<Self> {
        if basis.channels() != queries.channels() {
            return Err(shape_err(format!(
                "basis width {} differs from query width {}",
                basis.channels(),
                queries.channels()
            )));
        }
        Ok(Self { basis, queries })
    }

    pub fn channels(&self) -> usize {
        self.basis.channels()
    }
}

/// All learnable state of one block: the `E[X]` branch, the `E[M]` branch
/// (absent when branches are shared) and the mediator kernel `C x C x 3 x 3`.
///
/// Every mutable borrow of the parameters stamps a new version, which is how
/// a [`super::ProjectionCache`] notices it has gone stale.
#[derive(Debug, Clone)]
pub struct CbbParams {
    x_branch: Branch,
    m_branch: Option<Branch>,
    conv_w: Tensor,
    seed: u64,
    stamp: u64,
}

impl PartialEq for CbbParams {
    fn eq(&self, other: &Self) -> bool {
        self.x_branch == other.x_branch
            && self.m_branch == other.m_branch
            && self.conv_w == other.conv_w
            && self.seed == other.seed
    }
}

impl CbbParams {
    pub fn new(
        x_branch: Branch,
        m_branch: Option<Branch>,
        conv_w: Tensor,
        seed: u64,
    ) -> Result<Self> {
        let c = x_branch.channels();
        if let Some(m) = &m_branch {
            if m.channels() != c {
                return Err(shape_err(format!(
                    "branch widths differ: {c} vs {}",
                    m.channels()
                )));
            }
        }
        if conv_w.shape() != [c, c, 3, 3] {
            return Err(shape_err(format!(
                "mediator kernel must be {c}x{c}x3x3, got {:?}",
                conv_w.shape()
            )));
        }
        let mut p = Self {
            x_branch,
            m_branch,
            conv_w,
            seed,
            stamp: fresh_stamp(),
        };
        for t in p.learnables_mut() {
            t.set_requires_grad(true);
        }
        Ok(p)
    }

    /// Seeded initialization: orthonormal bases (QR of a Gaussian matrix),
    /// `N(0, 0.02^2)` queries and He-scaled `N(0, 2 / (9 C))` mediator
    /// weights.
    pub fn init(cfg: &CbbConfig) -> Result<Self> {
        let c = cfg.channels;
        let k = basis_count(c, cfg.basis_ratio)?;
        if cfg.sample_queries < 1 {
            return Err(CbbError::Param("need at least one sample query".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let branch = |rng: &mut ChaCha8Rng| -> Result<Branch> {
            let bases = orthonormal_rows(k, c, rng);
            let q = Tensor::randn([cfg.sample_queries, c], QUERY_INIT_STD, rng);
            Branch::new(BasisSet::new(bases, cfg.ridge)?, SampleQueries::new(q)?)
        };
        let x_branch = branch(&mut rng)?;
        let m_branch = if cfg.share_branches {
            None
        } else {
            Some(branch(&mut rng)?)
        };
        let conv_w = Tensor::randn([c, c, 3, 3], (2.0 / (9.0 * c as f64)).sqrt(), &mut rng);
        Self::new(x_branch, m_branch, conv_w, cfg.seed)
    }

    pub fn channels(&self) -> usize {
        self.x_branch.channels()
    }

    pub fn k(&self) -> usize {
        self.x_branch.basis.k()
    }

    pub fn s(&self) -> usize {
        self.x_branch.queries.s()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ridge(&self) -> f64 {
        self.x_branch.basis.ridge
    }

    pub fn shares_branches(&self) -> bool {
        self.m_branch.is_none()
    }

    pub fn x_branch(&self) -> &Branch {
        &self.x_branch
    }

    /// The branch used for `E[M]`; the `E[X]` branch when shared.
    pub fn m_branch(&self) -> &Branch {
        self.m_branch.as_ref().unwrap_or(&self.x_branch)
    }

    pub fn conv_w(&self) -> &Tensor {
        &self.conv_w
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Sets the ridge on every basis set.
    pub fn set_ridge(&mut self, ridge: f64) {
        self.stamp = fresh_stamp();
        self.x_branch.basis.ridge = ridge;
        if let Some(m) = &mut self.m_branch {
            m.basis.ridge = ridge;
        }
    }

    pub fn x_branch_mut(&mut self) -> &mut Branch {
        self.stamp = fresh_stamp();
        &mut self.x_branch
    }

    /// Mutable `E[M]` branch, or `None` when branches are shared.
    pub fn m_branch_mut(&mut self) -> Option<&mut Branch> {
        self.stamp = fresh_stamp();
        self.m_branch.as_mut()
    }

    pub fn conv_w_mut(&mut self) -> &mut Tensor {
        self.stamp = fresh_stamp();
        &mut self.conv_w
    }

    /// Names of the learnable tensors, in [`CbbParams::learnables`] order.
    pub fn learnable_names(&self) -> Vec<&'static str> {
        let mut names = vec!["x_bases", "x_queries"];
        if self.m_branch.is_some() {
            names.extend(["m_bases", "m_queries"]);
        }
        names.push("conv_w");
        names
    }

    pub fn learnables(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.x_branch.basis.bases, &self.x_branch.queries.queries];
        if let Some(m) = &self.m_branch {
            v.extend([&m.basis.bases, &m.queries.queries]);
        }
        v.push(&self.conv_w);
        v
    }

    pub fn learnables_mut(&mut self) -> Vec<&mut Tensor> {
        self.stamp = fresh_stamp();
        let mut v = vec![
            &mut self.x_branch.basis.bases,
            &mut self.x_branch.queries.queries,
        ];
        if let Some(m) = &mut self.m_branch {
            v.extend([&mut m.basis.bases, &mut m.queries.queries]);
        }
        v.push(&mut self.conv_w);
        v
    }
}

/// `k` orthonormal rows of length `c` from modified Gram-Schmidt (with one
/// re-orthogonalization pass) on a seeded Gaussian matrix.
pub fn orthonormal_rows(k: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(k <= c, "cannot fit {k} orthonormal rows in {c} dimensions");
    loop {
        let g = Tensor::randn([k, c], 1.0, rng);
        let mut rows: Vec<Vec<f64>> = g.data().chunks(c).map(<[f64]>::to_vec).collect();
        let mut ok = true;
        for i in 0..k {
            for _pass in 0..2 {
                for j in 0..i {
                    let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    let (head, tail) = rows.split_at_mut(i);
                    tail[0]
                        .iter_mut()
                        .zip(&head[j])
                        .for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return Tensor::from_parts(vec![k, c], rows.concat());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, ratio: f64, seed: u64) -> CbbConfig {
        CbbConfig {
            channels: c,
            sample_queries: 4,
            basis_ratio: ratio,
            seed,
            ..CbbConfig::default()
        }
    }

    #[test]
    fn basis_counts() {
        assert_eq!(basis_count(8, 0.5).unwrap(), 4);
        assert_eq!(basis_count(8, 0.125).unwrap(), 1);
        assert_eq!(basis_count(32, 0.9).unwrap(), 28);
        assert!(matches!(basis_count(8, 0.1), Err(CbbError::Param(_))));
        assert!(basis_count(8, 1.0).is_err());
        assert!(basis_count(8, 0.0).is_err());
    }

    #[test]
    fn init_is_orthonormal() {
        let p = CbbParams::init(&cfg(8, 0.5, 3)).unwrap();
        assert_eq!(p.k(), 4);
        for branch in [p.x_branch(), p.m_branch()] {
            let mut basis = branch.basis.clone();
            basis.ridge = 0.0;
            let diff = basis.gram().max_abs_diff(&Tensor::eye(4));
            assert!(diff < 1e-12, "{diff}");
        }
        assert!(p.learnables().iter().all(|t| t.requires_grad()));
    }

    #[test]
    fn init_is_deterministic() {
        let a = CbbParams::init(&cfg(8, 0.5, 42)).unwrap();
        let b = CbbParams::init(&cfg(8, 0.5, 42)).unwrap();
        for (x, y) in a.learnables().iter().zip(b.learnables()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let c = CbbParams::init(&cfg(8, 0.5, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shared_branches_drop_m_learnables() {
        let mut c = cfg(8, 0.25, 1);
        c.share_branches = true;
        let p = CbbParams::init(&c).unwrap();
        assert!(p.shares_branches());
        assert_eq!(p.learnable_names(), vec!["x_bases", "x_queries", "conv_w"]);
        assert_eq!(p.m_branch(), p.x_branch());
    }

    #[test]
    fn validation_errors() {
        assert!(BasisSet::new(Tensor::zeros([4, 4]), 0.0).is_err());
        assert!(BasisSet::new(Tensor::zeros([2, 4]), -1.0).is_err());
        let b = BasisSet::new(Tensor::ones([1, 4]), 0.0).unwrap();
        let q = SampleQueries::new(Tensor::ones([2, 3])).unwrap();
        assert!(matches!(Branch::new(b, q), Err(CbbError::Shape(_))));
    }

    #[test]
    fn mutation_changes_stamp() {
        let mut p = CbbParams::init(&cfg(8, 0.5, 0)).unwrap();
        let s0 = p.stamp();
        let _ = p.conv_w_mut();
        assert_ne!(p.stamp(), s0);
        let clone = p.clone();
        assert_eq!(clone.stamp(), p.stamp());
    }
}

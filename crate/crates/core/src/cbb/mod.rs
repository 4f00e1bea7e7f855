//! The causal basis block.
//!
//! For input features `X_in` (`B x N x C`, `N = H x W`) one expectation
//! branch computes
//!
//! ```text
//! X'_q = X_in Q_s^T                      query responses, B x N x S
//! A    = sum_s softmax_s(X'_q) X'_q      spatial weighting, B x N x 1
//! X_q  = A * X_in                        reweighted features
//! C    = X_q B^T (B B^T + eps I)^-1      coefficients, B x N x K
//! E    = C B                             expectation estimate, B x N x C
//! ```
//!
//! The block runs one branch on `X_in` and another on the mediator
//! `M = Conv3x3(X_in)`, and returns `E[X] + E[M] + M`. At inference the
//! projection `B^T (B B^T + eps I)^-1 B` is cached as a `C x C` matrix.

mod checkpoint;
mod forward;
mod infer;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, MANIFEST_FILE};
pub use forward::{
    cbb_forward, estimate_coefficients, expectation_branch, mediator, query_response,
    reconstruct_expectation, reweight, spatial_weighting, BranchTrace, BranchVars, CbbTrace,
    CbbVars,
};
pub use infer::{
    cbb_infer, cbb_infer_parts, mediator_untracked, precompute_projection, projection_matrix,
    weighting_map, InferParts, ProjectionCache,
};
pub use params::{
    basis_count, orthonormal_rows, BasisSet, Branch, CbbConfig, CbbParams, SampleQueries,
    DEFAULT_BASIS_RATIO, DEFAULT_GRAM_RIDGE, DEFAULT_SAMPLE_QUERIES, QUERY_INIT_STD,
};

use crate::autodiff::Tape;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// One independently parameterized block per feature scale.
#[derive(Debug, Clone)]
pub struct MultiScaleCbb {
    pub scales: Vec<ScaleBlock>,
}

#[derive(Debug, Clone)]
pub struct ScaleBlock {
    pub params: CbbParams,
    pub height: usize,
    pub width: usize,
}

impl MultiScaleCbb {
    /// Runs every scale's block on its own feature map, untracked, through
    /// freshly computed projections.
    pub fn infer(&self, features: &[Tensor]) -> Result<Vec<Tensor>> {
        if features.len() != self.scales.len() {
            return Err(shape_err(format!(
                "{} feature maps for {} scales",
                features.len(),
                self.scales.len()
            )));
        }
        self.scales
            .iter()
            .zip(features)
            .map(|(s, x)| {
                let cache = precompute_projection(&s.params)?;
                cbb_infer(x, &s.params, &cache, s.height, s.width)
            })
            .collect()
    }

    /// Differentiable forward over all scales on one tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &[crate::autodiff::Var],
    ) -> Result<Vec<(CbbVars, CbbTrace)>> {
        if features.len() != self.scales.len() {
            return Err(shape_err(format!(
                "{} feature maps for {} scales",
                features.len(),
                self.scales.len()
            )));
        }
        self.scales
            .iter()
            .zip(features)
            .map(|(s, &x)| {
                let vars = s.params.register(tape);
                let trace = cbb_forward(tape, x, &vars, s.height, s.width)?;
                Ok((vars, trace))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CbbError;
    use crate::tensor::kernels::{self, flat_index};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn params(c: usize, s: usize, ratio: f64, seed: u64) -> CbbParams {
        CbbParams::init(&CbbConfig {
            channels: c,
            sample_queries: s,
            basis_ratio: ratio,
            seed,
            ..CbbConfig::default()
        })
        .unwrap()
    }

    fn branch_vars(tape: &mut Tape, bases: &Tensor, ridge: f64) -> BranchVars {
        let b = tape.constant(bases.clone());
        BranchVars {
            bases: b,
            queries: b,
            ridge,
        }
    }

    #[test]
    fn query_response_selector_queries() {
        let mut r = rng(1);
        let x = Tensor::randn([2, 3, 5], 1.0, &mut r);
        let mut q = Tensor::zeros([2, 5]);
        q.data_mut()[0] = 1.0;
        q.data_mut()[6] = 1.0;
        let mut tape = Tape::new();
        let (xv, qv) = (tape.constant(x.clone()), tape.constant(q));
        let resp = query_response(&mut tape, xv, qv).unwrap();
        let out = tape.value(resp);
        assert_eq!(out.shape(), &[2, 3, 2]);
        for b in 0..2 {
            for n in 0..3 {
                assert_eq!(out.get(&[b, n, 0]), x.get(&[b, n, 0]));
                assert_eq!(out.get(&[b, n, 1]), x.get(&[b, n, 1]));
            }
        }
        let zero = tape.constant(Tensor::zeros([2, 3, 5]));
        let resp0 = query_response(&mut tape, zero, qv).unwrap();
        assert!(tape.value(resp0).data().iter().all(|&v| v == 0.0));
        let narrow = tape.constant(Tensor::zeros([2, 3, 4]));
        assert!(matches!(
            query_response(&mut tape, narrow, qv),
            Err(CbbError::Shape(_))
        ));
    }

    #[test]
    fn query_response_matches_dot_loop() {
        let mut r = rng(2);
        let x = Tensor::randn([2, 4, 6], 1.0, &mut r);
        let q = Tensor::randn([3, 6], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, qv) = (tape.constant(x.clone()), tape.constant(q.clone()));
        let resp = query_response(&mut tape, xv, qv).unwrap();
        let out = tape.value(resp);
        for b in 0..2 {
            for n in 0..4 {
                for s in 0..3 {
                    let dot: f64 = (0..6).map(|c| x.get(&[b, n, c]) * q.get(&[s, c])).sum();
                    assert!((out.get(&[b, n, s]) - dot).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn spatial_weighting_examples() {
        let mut r = rng(3);
        let resp = Tensor::randn([2, 3, 1], 1.0, &mut r);
        let mut tape = Tape::new();
        let v = tape.constant(resp.clone());
        let a = spatial_weighting(&mut tape, v).unwrap();
        assert_eq!(tape.value(a), &resp);

        let z = tape.constant(Tensor::zeros([1, 4, 2]));
        let a0 = spatial_weighting(&mut tape, z).unwrap();
        assert_eq!(tape.value(a0).shape(), &[1, 4, 1]);
        assert!(tape.value(a0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_weighting_query_permutation() {
        let mut r = rng(4);
        let x = Tensor::randn([2, 5, 6], 1.0, &mut r);
        let q = Tensor::randn([4, 6], 1.0, &mut r);
        let perm = [2, 0, 3, 1];
        let qp = Tensor::new(
            [4, 6],
            perm.iter()
                .flat_map(|&p| q.data()[p * 6..(p + 1) * 6].to_vec())
                .collect(),
        )
        .unwrap();
        let br = |q: Tensor| {
            Branch::new(
                BasisSet::new(Tensor::ones([1, 6]), 0.0).unwrap(),
                SampleQueries::new(q).unwrap(),
            )
            .unwrap()
        };
        let a = weighting_map(&x, &br(q)).unwrap();
        let ap = weighting_map(&x, &br(qp)).unwrap();
        assert!(a.max_abs_diff(&ap) < 1e-12);
    }

    #[test]
    fn reweight_examples() {
        let mut r = rng(5);
        let x = Tensor::randn([2, 3, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ones = tape.constant(Tensor::ones([2, 3, 1]));
        let zeros = tape.constant(Tensor::zeros([2, 3, 1]));
        let same = reweight(&mut tape, xv, ones).unwrap();
        assert_eq!(tape.value(same), &x);
        let gone = reweight(&mut tape, xv, zeros).unwrap();
        assert!(tape.value(gone).data().iter().all(|&v| v == 0.0));

        let a = Tensor::randn([2, 3, 1], 1.0, &mut r);
        let av = tape.constant(a.clone());
        let out = reweight(&mut tape, xv, av).unwrap();
        let tiled: Vec<f64> = (0..24).map(|i| a.data()[i / 4] * x.data()[i]).collect();
        assert_eq!(tape.value(out).data(), tiled.as_slice());

        let bad = tape.constant(Tensor::ones([2, 1, 1]));
        assert!(reweight(&mut tape, xv, bad).is_err());
    }

    #[test]
    fn orthonormal_coefficients_are_plain_products() {
        let mut r = rng(6);
        let b = orthonormal_rows(3, 7, &mut r);
        let xq = Tensor::randn([2, 4, 7], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(xq.clone());
        let bv = branch_vars(&mut tape, &b, 0.0);
        let c = estimate_coefficients(&mut tape, xv, bv).unwrap();
        let want = kernels::matmul(&xq, &kernels::transpose(&b).unwrap()).unwrap();
        assert!(tape.value(c).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn in_subspace_rows_reconstruct() {
        let mut r = rng(7);
        let b = Tensor::randn([3, 8], 1.0, &mut r);
        let coeff = Tensor::randn([1, 5, 3], 1.0, &mut r);
        let xq = kernels::matmul(&coeff, &b).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(xq.clone());
        let bv = branch_vars(&mut tape, &b, 0.0);
        let c = estimate_coefficients(&mut tape, xv, bv).unwrap();
        let rec = reconstruct_expectation(&mut tape, c, bv.bases).unwrap();
        assert!(tape.value(rec).max_abs_diff(&xq) < 1e-10);
        assert!(tape.value(c).max_abs_diff(&coeff) < 1e-10);
    }

    #[test]
    fn reconstruct_zero_coefficients() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros([1, 2, 3]));
        let b = tape.constant(Tensor::ones([3, 5]));
        let e = reconstruct_expectation(&mut tape, c, b).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    fn conv_oracle(x: &Tensor, w: &Tensor) -> Tensor {
        let (bn, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = Tensor::zeros(x.shape().to_vec());
        for b in 0..bn {
            for co in 0..c {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (
                                        y as isize + ky as isize - 1,
                                        xx as isize + kx as isize - 1,
                                    );
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.get(&[co, ci, ky, kx])
                                        * x.get(&[b, ci, sy as usize, sx as usize]);
                                }
                            }
                        }
                        let i = flat_index(x.shape(), &[b, co, y, xx]);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn mediator_examples() {
        let mut r = rng(8);
        let (b, h, w, c) = (2, 3, 4, 5);
        let x = Tensor::randn([b, h * w, c], 1.0, &mut r);
        let mut delta = Tensor::zeros([c, c, 3, 3]);
        for ch in 0..c {
            delta.data_mut()[flat_index(&[c, c, 3, 3], &[ch, ch, 1, 1])] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let dv = tape.constant(delta);
        let m = mediator(&mut tape, xv, dv, h, w).unwrap();
        assert_eq!(tape.value(m), &x);

        let zv = tape.constant(Tensor::zeros([c, c, 3, 3]));
        let m0 = mediator(&mut tape, xv, zv, h, w).unwrap();
        assert!(tape.value(m0).data().iter().all(|&v| v == 0.0));

        let kernel = Tensor::randn([c, c, 3, 3], 1.0, &mut r);
        let kv = tape.constant(kernel.clone());
        let got = mediator(&mut tape, xv, kv, h, w).unwrap();
        let img = kernels::permute(&x, &[0, 2, 1])
            .unwrap()
            .reshape([b, c, h, w])
            .unwrap();
        let want = conv_oracle(&img, &kernel).reshape([b, c, h * w]).unwrap();
        let want = kernels::permute(&want, &[0, 2, 1]).unwrap();
        assert!(tape.value(got).max_abs_diff(&want) < 1e-12);

        assert!(matches!(
            mediator(&mut tape, xv, kv, 4, 4),
            Err(CbbError::Shape(_))
        ));
    }

    #[test]
    fn forward_zero_input_gives_zero() {
        let p = params(8, 4, 0.5, 1);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let x = tape.constant(Tensor::zeros([2, 6, 8]));
        let tr = cbb_forward(&mut tape, x, &vars, 2, 3).unwrap();
        assert!(tape.value(tr.output).data().iter().all(|&v| v == 0.0));
        let cache = precompute_projection(&p).unwrap();
        let y = cbb_infer(&Tensor::zeros([2, 6, 8]), &p, &cache, 2, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_branch_symmetry_with_identity_mediator() {
        let mut r = rng(9);
        let c = 6;
        let base = params(c, 3, 0.5, 2);
        let mut delta = Tensor::zeros([c, c, 3, 3]);
        for ch in 0..c {
            delta.data_mut()[flat_index(&[c, c, 3, 3], &[ch, ch, 1, 1])] = 1.0;
        }
        let x_branch = base.x_branch().clone();
        let p = CbbParams::new(x_branch.clone(), Some(x_branch), delta, 0).unwrap();
        let x = Tensor::randn([2, 4, c], 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let xv = tape.constant(x.clone());
        let tr = cbb_forward(&mut tape, xv, &vars, 2, 2).unwrap();
        let ex = tape.value(tr.expected_x()).clone();
        assert!(ex.max_abs_diff(tape.value(tr.expected_m())) < 1e-12);
        let want: Vec<f64> = ex
            .data()
            .iter()
            .zip(x.data())
            .map(|(e, x)| 2.0 * e + x)
            .collect();
        let want = Tensor::new(x.shape().to_vec(), want).unwrap();
        assert!(tape.value(tr.output).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn single_location_is_supported() {
        let mut r = rng(10);
        let p = params(8, 4, 0.5, 3);
        let x = Tensor::randn([3, 1, 8], 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let xv = tape.constant(x.clone());
        let tr = cbb_forward(&mut tape, xv, &vars, 1, 1).unwrap();
        let cache = precompute_projection(&p).unwrap();
        let y = cbb_infer(&x, &p, &cache, 1, 1).unwrap();
        assert!(tape.value(tr.output).max_abs_diff(&y) < 1e-6);
    }

    #[test]
    fn orthonormal_projection_is_btb() {
        let mut r = rng(11);
        let b = orthonormal_rows(4, 9, &mut r);
        let basis = BasisSet::new(b.clone(), 0.0).unwrap();
        let p = projection_matrix(&basis).unwrap();
        let btb = kernels::matmul(&kernels::transpose(&b).unwrap(), &b).unwrap();
        assert!(p.max_abs_diff(&btb) < 1e-12);
        let p2 = kernels::matmul(&p, &p).unwrap();
        assert!(p2.max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn infer_agrees_and_never_solves() {
        let mut r = rng(12);
        let mut p = params(16, 4, 0.5, 4);
        for t in p.learnables_mut() {
            let noise = Tensor::randn(t.shape().to_vec(), 0.3, &mut r);
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(a, b)| *a += b);
        }
        let x = Tensor::randn([2, 9, 16], 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let xv = tape.constant(x.clone());
        let tr = cbb_forward(&mut tape, xv, &vars, 3, 3).unwrap();
        let cache = precompute_projection(&p).unwrap();
        kernels::reset_solve_count();
        let y = cbb_infer(&x, &p, &cache, 3, 3).unwrap();
        assert_eq!(kernels::solve_count(), 0);
        assert!(tape.value(tr.output).max_abs_diff(&y) < 1e-6);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = params(8, 2, 0.5, 5);
        let cache = precompute_projection(&p).unwrap();
        assert!(!cache.is_stale(&p));
        p.conv_w_mut().data_mut()[0] += 1.0;
        assert!(cache.is_stale(&p));
        let err = cbb_infer(&Tensor::zeros([1, 4, 8]), &p, &cache, 2, 2).unwrap_err();
        assert!(matches!(err, CbbError::Usage(_)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = params(8, 3, 0.25, 6);
        let m = save_checkpoint(&p, dir.path()).unwrap();
        assert_eq!(m.basis_count, 2);
        assert_eq!(m.tensors.len(), 5);
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, p);

        let mut cfg = CbbConfig {
            channels: 8,
            sample_queries: 3,
            basis_ratio: 0.25,
            ..Default::default()
        };
        cfg.share_branches = true;
        let shared = CbbParams::init(&cfg).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(&shared, dir2.path()).unwrap();
        assert!(load_checkpoint(dir2.path()).unwrap().shares_branches());
        assert!(load_checkpoint(&dir2.path().join("missing")).is_err());
    }

    #[test]
    fn multi_scale_runs_each_block() {
        let mut r = rng(13);
        let ms = MultiScaleCbb {
            scales: vec![
                ScaleBlock {
                    params: params(8, 2, 0.5, 1),
                    height: 4,
                    width: 4,
                },
                ScaleBlock {
                    params: params(8, 2, 0.5, 2),
                    height: 2,
                    width: 2,
                },
            ],
        };
        let feats = vec![
            Tensor::randn([1, 16, 8], 1.0, &mut r),
            Tensor::randn([1, 4, 8], 1.0, &mut r),
        ];
        let outs = ms.infer(&feats).unwrap();
        assert_eq!(outs[0].shape(), &[1, 16, 8]);
        assert_eq!(outs[1].shape(), &[1, 4, 8]);
        assert!(ms.infer(&feats[..1]).is_err());
        let mut tape = Tape::new();
        let vars: Vec<_> = feats.iter().map(|f| tape.constant(f.clone())).collect();
        let traced = ms.forward(&mut tape, &vars).unwrap();
        for ((_, tr), want) in traced.iter().zip(&outs) {
            assert!(tape.value(tr.output).max_abs_diff(want) < 1e-6);
        }
    }
}

//! Central finite-difference gradient checks.
//!
//! The finite differences only ever evaluate forward values; the analytic
//! side comes from a tape backward pass. A parameter passes when every entry
//! satisfies `|analytic - numeric| / max(|analytic|, |numeric|, floor) < tol`.

use crate::autodiff::{FaultInjection, OpKind, Tape};
use crate::cbb::{cbb_forward, CbbConfig, CbbParams};
use crate::error::{CbbError, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub channels: usize,
    pub basis_ratio: f64,
    pub sample_queries: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub ridge: f64,
    pub share_branches: bool,
    pub seed: u64,
    /// Std of Gaussian noise added to the initialized parameters so the
    /// check does not run at the (very regular) initialization point.
    pub param_noise: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Negative control: scale the backward rule of this op kind by 1.5.
    pub corrupt_backward: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            basis_ratio: 0.5,
            sample_queries: 4,
            batch: 2,
            height: 3,
            width: 3,
            ridge: crate::cbb::DEFAULT_GRAM_RIDGE,
            share_branches: false,
            seed: 0,
            param_noise: 0.2,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt_backward: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` gradients with central differences of `loss` around
/// `point`, perturbing every entry of every tensor.
pub fn compare<F>(
    names: &[String],
    point: &[Tensor],
    analytic: &[Vec<f64>],
    step: f64,
    tolerance: f64,
    mut loss: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = point.to_vec();
    let mut params = Vec::with_capacity(point.len());
    for (ti, name) in names.iter().enumerate() {
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (j, (&orig, &a)) in point[ti].data().iter().zip(&analytic[ti]).enumerate() {
            work[ti].data_mut()[j] = orig + step;
            let up = loss(&work)?;
            work[ti].data_mut()[j] = orig - step;
            let down = loss(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        params.push(ParamCheck {
            name: name.clone(),
            entries: point[ti].numel(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            passed: max_rel < tolerance,
        });
    }
    let passed = params.iter().all(|p| p.passed);
    Ok(GradcheckReport {
        params,
        tolerance,
        passed,
    })
}

/// Seeded instance for a block gradient check: parameters, input features
/// and the fixed weights `R` of the scalar loss `sum(R * F_out)`.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub params: CbbParams,
    pub input: Tensor,
    pub loss_weights: Tensor,
}

impl GradcheckInstance {
    pub fn new(cfg: &GradcheckConfig) -> Result<Self> {
        let mut params = CbbParams::init(&CbbConfig {
            channels: cfg.channels,
            sample_queries: cfg.sample_queries,
            basis_ratio: cfg.basis_ratio,
            ridge: cfg.ridge,
            share_branches: cfg.share_branches,
            seed: cfg.seed,
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        for t in params.learnables_mut() {
            let noise = Tensor::randn(t.shape().to_vec(), cfg.param_noise, &mut rng);
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(a, b)| *a += b);
        }
        let n = cfg.height * cfg.width;
        let input = Tensor::randn([cfg.batch, n, cfg.channels], 1.0, &mut rng);
        let loss_weights = Tensor::randn([cfg.batch, n, cfg.channels], 1.0, &mut rng);
        Ok(Self {
            params,
            input,
            loss_weights,
        })
    }

    fn with_learnables(&self, values: &[Tensor]) -> CbbParams {
        let mut p = self.params.clone();
        for (dst, src) in p.learnables_mut().into_iter().zip(values) {
            dst.data_mut().copy_from_slice(src.data());
        }
        p
    }

    /// Records `sum(R * F_out)` on `tape` and returns the loss handle and
    /// the parameter handles.
    fn record(
        &self,
        tape: &mut Tape,
        params: &CbbParams,
        h: usize,
        w: usize,
    ) -> Result<(crate::autodiff::Var, crate::cbb::CbbVars)> {
        let vars = params.register(tape);
        let x = tape.constant(self.input.clone());
        let trace = cbb_forward(tape, x, &vars, h, w)?;
        let r = tape.constant(self.loss_weights.clone());
        let weighted = tape.mul(trace.output, r)?;
        Ok((tape.sum(weighted)?, vars))
    }
}

/// Finite-difference check of every block learnable.
pub fn check_cbb(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let fault = cfg
        .corrupt_backward
        .as_deref()
        .map(|k| -> Result<FaultInjection> {
            Ok(FaultInjection {
                kind: k.parse::<OpKind>()?,
                factor: 1.5,
            })
        })
        .transpose()?;
    if cfg.step.is_nan() || cfg.step <= 0.0 || cfg.tolerance.is_nan() || cfg.tolerance <= 0.0 {
        return Err(CbbError::Param(
            "step and tolerance must be positive".into(),
        ));
    }
    let inst = GradcheckInstance::new(cfg)?;
    let (h, w) = (cfg.height, cfg.width);

    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let (loss, vars) = inst.record(&mut tape, &inst.params, h, w)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .learnables()
        .into_iter()
        .map(|v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();

    let names: Vec<String> = inst
        .params
        .learnable_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let point: Vec<Tensor> = inst.params.learnables().into_iter().cloned().collect();
    compare(
        &names,
        &point,
        &analytic,
        cfg.step,
        cfg.tolerance,
        |values| {
            let p = inst.with_learnables(values);
            let mut tape = Tape::new();
            let (loss, _) = inst.record(&mut tape, &p, h, w)?;
            Ok(tape.value(loss).data()[0])
        },
    )
}

//! Analytic vs. finite-difference gradients of the full risk.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::autodiff::{Graph, PrimitiveKind};
use crate::data::Dataset;
use crate::model::{build_model, Mode, Model, ParamKind};
use crate::sparsity;

/// Largest model `check_grad` accepts.
pub const MAX_CHECK_PARAMS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckGradOptions {
    /// Central-difference step.
    pub epsilon: f64,
    /// Coordinates whose rectifier on/off pattern changes within this
    /// distance are excluded.
    pub kink_radius: f64,
    pub tolerance: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Examples taken from the head of the training set.
    pub batch: usize,
    /// Test fixture: corrupts one primitive's backward rule.
    pub fault: Option<PrimitiveKind>,
}

impl Default for CheckGradOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            kink_radius: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            batch: 16,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradOffender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub checked: usize,
    pub excluded_kink: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub offenders: Vec<GradOffender>,
    pub passed: bool,
}

fn param_name(kind: ParamKind) -> String {
    match kind {
        ParamKind::Weight(i) => format!("layer{i}.weight"),
        ParamKind::Bias(i) => format!("layer{i}.bias"),
        ParamKind::Mu(j) => format!("partition{j}.mu"),
        ParamKind::ZetaRaw(j) => format!("partition{j}.zeta_raw"),
        ParamKind::Eta(j) => format!("partition{j}.eta"),
    }
}

/// Risk and rectifier switch pattern of the deterministic forward pass.
fn risk(
    model: &Model,
    batch: &Dataset,
    lambdas: &[f64],
    fault: Option<PrimitiveKind>,
) -> Result<(Graph, crate::autodiff::Var, Vec<crate::autodiff::Var>), TrainError> {
    let mut g = match fault {
        Some(k) => Graph::with_corrupted_backward(k),
        None => Graph::new(),
    };
    // Eval mode: no dropout noise, so the risk is a deterministic function.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward(&mut g, &batch.inputs, Mode::Eval, &mut rng)?;
    let loss = g.softmax_cross_entropy(fwd.logits, &batch.labels)?;
    let (total, _) =
        sparsity::empirical_risk_graph(&mut g, loss, &fwd.mu, &model.partitions, lambdas)?;
    Ok((g, total, fwd.params))
}

fn set_coord(model: &mut Model, tensor: usize, index: usize, value: f64) {
    model.params_mut()[tensor][index] = value;
}

/// Compares backward against central differences for every trainable
/// coordinate of `model` on `batch`.
pub fn check_grad_model(
    model: &Model,
    batch: &Dataset,
    opts: &CheckGradOptions,
) -> Result<GradReport, TrainError> {
    let lambdas: Vec<f64> = model.partitions.iter().map(|p| p.lambda).collect();
    let (g, total, params) = risk(model, batch, &lambdas, opts.fault)?;
    let grads = g.backward(total)?;
    let base_pattern = g.switch_pattern();
    drop(g);

    let eval = |m: &Model| -> Result<(f64, Vec<u64>), TrainError> {
        let (g, t, _) = risk(m, batch, &lambdas, None)?;
        Ok((g.value(t).item(), g.switch_pattern()))
    };

    let mut probe = model.clone();
    let mut report = GradReport {
        checked: 0,
        excluded_kink: 0,
        max_rel_err: 0.0,
        tolerance: opts.tolerance,
        offenders: Vec::new(),
        passed: true,
    };
    for (t, ((kind, tensor), var)) in model
        .trainable_parameters()
        .into_iter()
        .zip(&params)
        .enumerate()
    {
        let analytic = grads.grad(*var);
        for (i, &orig) in tensor.data().iter().enumerate() {
            let mut near_kink = false;
            for delta in [opts.kink_radius, -opts.kink_radius] {
                set_coord(&mut probe, t, i, orig + delta);
                near_kink |= eval(&probe)?.1 != base_pattern;
            }
            if near_kink {
                set_coord(&mut probe, t, i, orig);
                report.excluded_kink += 1;
                continue;
            }
            set_coord(&mut probe, t, i, orig + opts.epsilon);
            let hi = eval(&probe)?.0;
            set_coord(&mut probe, t, i, orig - opts.epsilon);
            let lo = eval(&probe)?.0;
            set_coord(&mut probe, t, i, orig);
            let numeric = (hi - lo) / (2.0 * opts.epsilon);
            let a = analytic.data()[i];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if !(rel_err < opts.tolerance) {
                report.offenders.push(GradOffender {
                    param: param_name(kind),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    report.passed = report.offenders.is_empty() && report.checked > 0;
    Ok(report)
}

/// [`check_grad_model`] on the freshly initialized model of `cfg`, using the
/// first `opts.batch` training examples.
pub fn check_grad(cfg: &TrainConfig, opts: &CheckGradOptions) -> Result<GradReport, TrainError> {
    cfg.validate()?;
    let model = build_model(&cfg.model.spec()?, cfg.seeds.init)?;
    let n = model.parameter_count();
    if n > MAX_CHECK_PARAMS {
        return Err(TrainError::Config(format!(
            "check-grad needs at most {MAX_CHECK_PARAMS} parameters, model has {n}"
        )));
    }
    let (train, _) = cfg.data.load(&cfg.base_dir)?;
    check_grad_model(&model, &train.take(opts.batch), opts)
}

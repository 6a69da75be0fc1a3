//! Risk assembly, the expected-L0 surrogate and sparsity accounting.
//!
//! FLOP convention: a multiply-add counts as 2 FLOPs. Dense layers cost
//! `2·m_in·m_out`, convolutions `2·k_h·k_w·c_in·c_out·H_out·W_out`; biases,
//! activations and pooling are free.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::gates::{self, Granularity, Partition};
use crate::model::{LayerKind, Model};
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsityError {
    #[error("partition {partition}: λ must be non-negative, got {value}")]
    NegativeLambda { partition: usize, value: f64 },
    #[error("expected {expected} λ values, got {got}")]
    LambdaCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Σ_k P(z_k > 0) of one partition.
pub fn partition_expected_l0(p: &Partition) -> f64 {
    p.prob_enabled().iter().sum()
}

/// Σ_j Σ_k P(z_jk > 0) over all partitions.
pub fn expected_l0(partitions: &[Partition]) -> f64 {
    partitions.iter().map(partition_expected_l0).sum()
}

/// Per-partition expected-L0 scalars on a graph; `mu[j]` is the `μ` leaf of
/// partition `j`.
pub fn expected_l0_graph(
    g: &mut Graph,
    mu: &[Var],
    partitions: &[Partition],
) -> Result<Vec<Var>, TensorError> {
    mu.iter()
        .zip(partitions)
        .map(|(&m, p)| {
            let probs = gates::prob_enabled_graph(g, m, p.sigma, p.beta, p.utility)?;
            g.sum(probs)
        })
        .collect()
}

/// One partition's share of the regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegTerm {
    pub partition: usize,
    pub expected_l0: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub data_loss: f64,
    pub reg: Vec<RegTerm>,
    pub total: f64,
}

fn check_lambdas(lambdas: &[f64], n: usize) -> Result<(), SparsityError> {
    if lambdas.len() != n {
        return Err(SparsityError::LambdaCount {
            expected: n,
            got: lambdas.len(),
        });
    }
    if let Some((partition, &value)) = lambdas.iter().enumerate().find(|(_, l)| !(**l >= 0.0)) {
        return Err(SparsityError::NegativeLambda { partition, value });
    }
    Ok(())
}

fn breakdown(data_loss: f64, l0: &[f64], lambdas: &[f64]) -> RiskBreakdown {
    let reg: Vec<RegTerm> = l0
        .iter()
        .zip(lambdas)
        .enumerate()
        .map(|(partition, (&expected_l0, &lambda))| RegTerm {
            partition,
            expected_l0,
            weighted: lambda * expected_l0,
        })
        .collect();
    let total = data_loss + reg.iter().map(|r| r.weighted).sum::<f64>();
    RiskBreakdown {
        data_loss,
        reg,
        total,
    }
}

/// `data_loss + Σ_j λ_j · L0_j` on plain values.
pub fn empirical_risk(
    data_loss: f64,
    partitions: &[Partition],
    lambdas: &[f64],
) -> Result<RiskBreakdown, SparsityError> {
    check_lambdas(lambdas, partitions.len())?;
    let l0: Vec<f64> = partitions.iter().map(partition_expected_l0).collect();
    Ok(breakdown(data_loss, &l0, lambdas))
}

/// Graph version of [`empirical_risk`]; returns the differentiable total.
pub fn empirical_risk_graph(
    g: &mut Graph,
    data_loss: Var,
    mu: &[Var],
    partitions: &[Partition],
    lambdas: &[f64],
) -> Result<(Var, RiskBreakdown), SparsityError> {
    check_lambdas(lambdas, partitions.len())?;
    let terms = expected_l0_graph(g, mu, partitions)?;
    let mut total = data_loss;
    for (&t, &lambda) in terms.iter().zip(lambdas) {
        if lambda != 0.0 {
            let w = g.scalar_mul(t, lambda)?;
            total = g.add(total, w)?;
        }
    }
    let l0: Vec<f64> = terms.iter().map(|&t| g.value(t).item()).collect();
    let mut risk = breakdown(g.value(data_loss).item(), &l0, lambdas);
    risk.total = g.value(total).item();
    Ok((total, risk))
}

/// Enabled gates in evaluation mode.
pub fn count_active(p: &Partition) -> usize {
    p.eval_gates().n_active
}

/// Active unit counts of the gated layers joined by `-`, e.g. `20-50-800-500`.
pub fn architecture_string(model: &Model) -> String {
    model
        .partitions
        .iter()
        .map(|p| count_active(p).to_string())
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cost {
    flops: u64,
    params: u64,
}

/// Forward FLOPs and weight+bias counts, either for the dense network or
/// counting only units and weights whose gates are enabled.
fn walk_cost(model: &Model, use_active: bool) -> Cost {
    let masks: Vec<Vec<bool>> = model
        .eval_gates()
        .into_iter()
        .map(|o| o.active_mask)
        .collect();
    let shapes = model.spec().shapes().expect("validated at build");
    let layer_mask =
        |partition: Option<usize>, granularity: &[Granularity], n: usize| match partition {
            Some(j)
                if use_active && granularity.contains(&model.partitions[j].target.granularity) =>
            {
                masks[j].clone()
            }
            _ => vec![true; n],
        };
    let mut active = vec![true; model.input_shape[0]];
    let mut in_shape = model.input_shape.clone();
    let mut cost = Cost {
        flops: 0,
        params: 0,
    };
    for (i, l) in model.layers.iter().enumerate() {
        let out_shape = &shapes[i];
        match &l.spec.kind {
            LayerKind::Dense { inputs, outputs } => {
                let out = layer_mask(l.partition, &[Granularity::Neuron], *outputs);
                let n_out = out.iter().filter(|&&a| a).count() as u64;
                let weights = match l.partition {
                    Some(j)
                        if use_active
                            && model.partitions[j].target.granularity == Granularity::Weight =>
                    {
                        let m = &masks[j];
                        let mut n = 0u64;
                        for r in (0..*inputs).filter(|&r| active[r]) {
                            n += (0..*outputs).filter(|&c| m[r * outputs + c]).count() as u64;
                        }
                        n
                    }
                    _ => active.iter().filter(|&&a| a).count() as u64 * n_out,
                };
                cost.flops += 2 * weights;
                cost.params += weights + n_out;
                active = out;
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let out = layer_mask(
                    l.partition,
                    &[Granularity::Neuron, Granularity::Filter],
                    *out_channels,
                );
                let n_out = out.iter().filter(|&&a| a).count() as u64;
                let kk = kernel * kernel;
                let weights = match l.partition {
                    Some(j)
                        if use_active
                            && model.partitions[j].target.granularity == Granularity::Weight =>
                    {
                        let m = &masks[j];
                        let mut n = 0u64;
                        for o in 0..*out_channels {
                            for c in (0..*in_channels).filter(|&c| active[c]) {
                                let base = (o * in_channels + c) * kk;
                                n += m[base..base + kk].iter().filter(|&&a| a).count() as u64;
                            }
                        }
                        n
                    }
                    _ => active.iter().filter(|&&a| a).count() as u64 * n_out * kk as u64,
                };
                let spatial = (out_shape[1] * out_shape[2]) as u64;
                cost.flops += 2 * weights * spatial;
                cost.params += weights + n_out;
                active = out;
            }
            LayerKind::Relu | LayerKind::Maxpool2d => {}
            LayerKind::Flatten => {
                if in_shape.len() > 1 {
                    let hw: usize = in_shape[1..].iter().product();
                    active = active
                        .iter()
                        .flat_map(|&a| std::iter::repeat_n(a, hw))
                        .collect();
                }
                let gate = layer_mask(l.partition, &[Granularity::Neuron], active.len());
                active.iter_mut().zip(gate).for_each(|(a, g)| *a &= g);
            }
            LayerKind::Select { indices } => {
                active = indices.iter().map(|&j| active[j]).collect();
            }
        }
        in_shape = out_shape.clone();
    }
    cost
}

/// Forward-pass FLOPs per example; see the module docs for the convention.
pub fn flop_estimate(model: &Model, use_active_counts: bool) -> u64 {
    walk_cost(model, use_active_counts).flops
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSparsity {
    pub partition: usize,
    pub layer: usize,
    pub granularity: Granularity,
    pub size: usize,
    pub n_active: usize,
    pub expected_l0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub partitions: Vec<PartitionSparsity>,
    /// Weights and biases of the dense network.
    pub total_parameters: u64,
    /// Weights and biases that survive pruning.
    pub active_parameters: u64,
    pub architecture: String,
    pub flop_estimate_forward: u64,
    pub flop_estimate_pruned: u64,
}

impl SparsityReport {
    pub fn of(model: &Model) -> Self {
        let partitions = model
            .partitions
            .iter()
            .map(|p| PartitionSparsity {
                partition: p.id,
                layer: p.target.layer,
                granularity: p.target.granularity,
                size: p.size(),
                n_active: count_active(p),
                expected_l0: partition_expected_l0(p),
            })
            .collect();
        let dense = walk_cost(model, false);
        let pruned = walk_cost(model, true);
        Self {
            partitions,
            total_parameters: dense.params,
            active_parameters: pruned.params,
            architecture: architecture_string(model),
            flop_estimate_forward: dense.flops,
            flop_estimate_pruned: pruned.flops,
        }
    }
}

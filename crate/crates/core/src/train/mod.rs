//! Training, evaluation and the validation suites.

mod adam;
mod check;
mod config;
mod mc;
mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{check_grad, check_grad_model, CheckGradOptions, GradOffender, GradReport};
pub use config::{
    DataConfig, ModelConfig, Seeds, TrainConfig, TrainingConfig, FORMAT as CONFIG_FORMAT,
    FULL_PROTOCOL_EPOCHS,
};
pub use mc::{mc_validate, McClaim, McConfig, McReport};
pub use report::{
    EpochPick, EpochRecord, RunReport, RunSummary, RunWriter, Timing, EPOCHS_FILE, EPOCH_FORMAT,
    SUMMARY_FILE, SUMMARY_FORMAT, TIMING_FILE,
};

use crate::autodiff::Graph;
use crate::checkpoint::{self, CheckpointError};
use crate::data::{self, DataError, Dataset};
use crate::model::{build_model, Mode, Model, ModelError};
use crate::sparsity::{self, SparsityError, SparsityReport};
use crate::tensor::{Tensor, TensorError};

/// Name of the final checkpoint inside a run directory.
pub const CHECKPOINT_FILE: &str = "model.dgc";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("report: {0}")]
    Report(String),
}

/// Everything the loop needs besides the model and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub shuffle_seed: u64,
    pub dropout_seed: u64,
}

impl From<&TrainConfig> for TrainOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            epochs: c.training.epochs,
            batch_size: c.training.batch_size,
            adam: c.optimizer,
            shuffle_seed: c.seeds.shuffle,
            dropout_seed: c.seeds.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub error_pct: f64,
    pub mean_loss: f64,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Misclassified count and summed cross-entropy of `logits` (`[n, classes]`).
fn tally(logits: &Tensor, labels: &[usize]) -> (usize, f64) {
    let classes = logits.shape()[1];
    let mut wrong = 0;
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks_exact(classes).zip(labels) {
        if argmax(row) != y {
            wrong += 1;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    (wrong, loss)
}

/// Error rate and mean cross-entropy of `logits` (`[n, classes]`).
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Evaluation {
    let (wrong, loss) = tally(logits, labels);
    let n = labels.len() as f64;
    Evaluation {
        error_pct: 100.0 * wrong as f64 / n,
        mean_loss: loss / n,
    }
}

const EVAL_CHUNK: usize = 500;

/// Evaluation-mode error rate (argmax vs. label) and mean cross-entropy.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<Evaluation, TrainError> {
    let (mut wrong, mut loss) = (0, 0.0);
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let part = dataset.select(chunk);
        let (w, l) = tally(&model.predict(&part.inputs)?, &part.labels);
        wrong += w;
        loss += l;
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        error_pct: 100.0 * wrong as f64 / n,
        mean_loss: loss / n,
    })
}

fn lambdas(model: &Model) -> Vec<f64> {
    model.partitions.iter().map(|p| p.lambda).collect()
}

fn non_finite(epoch: usize, batch: usize) -> impl Fn(String) -> TrainError {
    move |detail| TrainError::NonFinite {
        epoch,
        batch,
        detail,
    }
}

/// Runs `opts.epochs` epochs of Adam on the empirical risk, evaluating on
/// `test` after each one. `on_epoch` sees every record as soon as it exists.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<(), TrainError>,
) -> Result<RunReport, TrainError> {
    let start = Instant::now();
    let sizes: Vec<usize> = model
        .trainable_parameters()
        .iter()
        .map(|(_, t)| t.numel())
        .collect();
    let mut state = AdamState::new(&sizes);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
    let lambdas = lambdas(model);
    let mut records = Vec::with_capacity(opts.epochs);

    for epoch in 1..=opts.epochs {
        let batches = data::batch_iter(
            train.len(),
            opts.batch_size,
            opts.shuffle_seed,
            epoch as u64,
        );
        let (mut loss_sum, mut risk_sum) = (0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            let nf = non_finite(epoch, b + 1);
            let batch = train.select(idx);
            let mut g = Graph::new();
            let nf_tensor = |e: TensorError| nf(e.to_string());
            let fwd = model
                .forward(&mut g, &batch.inputs, Mode::Train, &mut dropout_rng)
                .map_err(|e| match e {
                    ModelError::Tensor(t @ TensorError::NonFinite { .. }) => nf_tensor(t),
                    other => other.into(),
                })?;
            let data_loss = g
                .softmax_cross_entropy(fwd.logits, &batch.labels)
                .map_err(nf_tensor)?;
            let (total, risk) = sparsity::empirical_risk_graph(
                &mut g,
                data_loss,
                &fwd.mu,
                &model.partitions,
                &lambdas,
            )
            .map_err(|e| match e {
                SparsityError::Tensor(t) => nf_tensor(t),
                other => other.into(),
            })?;
            if !risk.total.is_finite() {
                return Err(nf(format!("risk {}", risk.total)));
            }
            let grads = g.backward(total)?;
            let grad_data: Vec<Tensor> = fwd.params.iter().map(|&p| grads.grad(p)).collect();
            let grad_refs: Vec<&[f64]> = grad_data.iter().map(Tensor::data).collect();
            adam_step(&mut model.params_mut(), &grad_refs, &mut state, &opts.adam)?;
            let w = idx.len() as f64;
            loss_sum += risk.data_loss * w;
            risk_sum += risk.total * w;
        }
        let n = train.len() as f64;
        let eval = evaluate(model, test)?;
        let snap = SparsityReport::of(model);
        let record = EpochRecord {
            format: EPOCH_FORMAT.into(),
            epoch,
            data_loss: loss_sum / n,
            total_risk: risk_sum / n,
            test_error_pct: eval.error_pct,
            test_loss: eval.mean_loss,
            partitions: snap.partitions,
            flops_forward: snap.flop_estimate_forward,
            flops_pruned: snap.flop_estimate_pruned,
            active_parameters: snap.active_parameters,
            architecture: snap.architecture,
        };
        on_epoch(&record)?;
        records.push(record);
    }
    let total_parameters = SparsityReport::of(model).total_parameters;
    let summary = RunSummary::from_epochs(&records, total_parameters)
        .ok_or_else(|| TrainError::Config("no epochs run".into()))?;
    Ok(RunReport {
        epochs: records,
        summary,
        timing: Timing {
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// A trained model and its report.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: RunReport,
}

/// Builds the model, loads the data and trains. With `out`, the resolved
/// config, the incremental report and the final checkpoint go there.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.data.load(&cfg.base_dir)?;
    let mut model = build_model(&cfg.model.spec()?, cfg.seeds.init)?;
    let mut writer = out.map(RunWriter::create).transpose()?;
    if let Some(w) = &writer {
        w.write_file("config.toml", &cfg.to_toml())?;
    }
    let report = fit(
        &mut model,
        &train_set,
        &test_set,
        &TrainOptions::from(cfg),
        &mut |r| match writer.as_mut() {
            Some(w) => w.append(r),
            None => Ok(()),
        },
    )?;
    if let Some(w) = &writer {
        w.finish(&report)?;
        checkpoint::save(&model, &w.dir().join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { model, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn perfect_and_chance_scores() {
        let logits = Tensor::matrix(&[&[5.0, 0.0], &[0.0, 5.0]]);
        assert_eq!(score_logits(&logits, &[0, 1]).error_pct, 0.0);

        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let data: Vec<f64> = (0..n * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let e = score_logits(&Tensor::new(vec![n, 10], data).unwrap(), &labels);
        assert!((e.error_pct - 90.0).abs() < 1.0, "{}", e.error_pct);
    }
}

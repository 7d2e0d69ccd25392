//! Training loop: each epoch shuffles the users, builds interpolated states
//! per batch, regresses the model output onto the clean interactions with
//! MSE, and steps Adam. Validation runs every few epochs and the best
//! checkpoint by NDCG@10 is what training returns.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::s;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DatasetSplit, InteractionMatrix};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::flowcore::{
    interpolate_continuous_rows, interpolate_masked, sample_mask_rows, StateSpace, StepSchedule,
};
use crate::infer::InferConfig;
use crate::model::{adam_step, FlowModel, Gradients, ModelConfig, OptimizerState};
use crate::prior::{sample_prior, PriorSpec};

/// Rows per forward/backward work unit. Fixed so gradient sums reduce in
/// the same order whatever the worker count.
const TRAIN_CHUNK: usize = 512;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Consecutive non-improving validations tolerated before stopping.
    pub patience: usize,
    pub n_steps: usize,
    pub prior: PriorSpec,
    pub seed: u64,
    /// Validate every this many epochs.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        StepSchedule::new(self.n_steps)?;
        self.prior.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recall10: Option<f64>,
    pub recall20: Option<f64>,
    pub ndcg10: Option<f64>,
    pub ndcg20: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss,recall10,recall20,ndcg10,ndcg20,seconds";

impl TrainLog {
    /// CSV with empty metric cells on epochs without validation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.loss,
                opt(r.recall10),
                opt(r.recall20),
                opt(r.ndcg10),
                opt(r.ndcg20),
                r.seconds
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<TrainLog> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == TRAIN_LOG_HEADER => {}
            other => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected training-log header, got {other:?}"),
                })
            }
        }
        let mut records = Vec::new();
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 7 fields, got {}", fields.len()),
                });
            }
            let req = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad number {s:?}"),
                })
            };
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    req(s).map(Some)
                }
            };
            records.push(EpochRecord {
                epoch: fields[0].parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad epoch {:?}", fields[0]),
                })?,
                loss: req(fields[1])?,
                recall10: opt(fields[2])?,
                recall20: opt(fields[3])?,
                ndcg10: opt(fields[4])?,
                ndcg20: opt(fields[5])?,
                seconds: req(fields[6])?,
            });
        }
        Ok(TrainLog { records })
    }
}

fn accumulate(total: &mut Option<Gradients<f32>>, mut part: Gradients<f32>, weight: f32) {
    match total {
        None => {
            for w in &mut part.weights {
                *w *= weight;
            }
            for b in &mut part.biases {
                *b *= weight;
            }
            *total = Some(part);
        }
        Some(acc) => {
            for (a, p) in acc.weights.iter_mut().zip(&part.weights) {
                a.scaled_add(weight, p);
            }
            for (a, p) in acc.biases.iter_mut().zip(&part.biases) {
                a.scaled_add(weight, p);
            }
        }
    }
}

/// One full pass over the users. All randomness (shuffle, step draws, prior,
/// masks, dropout) comes sequentially from `rng`, so a seed fixes the entire
/// epoch; the parallel parts only consume pre-drawn data. Returns the mean
/// squared error over the epoch.
pub fn train_epoch(
    model: &mut FlowModel<f32>,
    state: &mut OptimizerState<f32>,
    train: &InteractionMatrix,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let sched = StepSchedule::new(config.n_steps)?;
    let tgrid = sched.training_grid();
    let n_items = train.n_items;
    let mut order: Vec<usize> = (0..train.n_users).collect();
    order.shuffle(rng);

    let mut loss_sum = 0.0f64;
    for batch in order.chunks(config.batch_size) {
        let ts: Vec<f64> = (0..batch.len())
            .map(|_| tgrid[rng.random_range(0..tgrid.len())])
            .collect();
        let x1 = train.to_dense_rows::<f32>(batch);
        let x0 = sample_prior::<f32>(&config.prior, batch.len(), rng)?;
        let xt = match config.prior.state_space {
            StateSpace::Discrete => {
                let mask = sample_mask_rows::<f32>(&ts, n_items, rng);
                interpolate_masked(&x0.values, &x1, &mask)?
            }
            StateSpace::Continuous => interpolate_continuous_rows(&x0.values, &x1, &ts)?,
        };
        let dropout = model.draw_dropout_masks(batch.len(), rng);

        let ranges: Vec<(usize, usize)> = (0..batch.len())
            .step_by(TRAIN_CHUNK)
            .map(|a| (a, (a + TRAIN_CHUNK).min(batch.len())))
            .collect();
        let parts: Vec<(Gradients<f32>, f64, usize)> = ranges
            .par_iter()
            .map(|&(a, b)| -> Result<(Gradients<f32>, f64, usize)> {
                let xt_c = xt.slice(s![a..b, ..]);
                let x1_c = x1.slice(s![a..b, ..]);
                let masks_c: Option<Vec<_>> = dropout
                    .as_ref()
                    .map(|ms| ms.iter().map(|m| m.slice(s![a..b, ..]).to_owned()).collect());
                let trace = model.forward_train(&xt_c, &ts[a..b], masks_c.as_deref())?;
                let (grads, loss) = model.backward(&trace, &x1_c)?;
                Ok((grads, loss, b - a))
            })
            .collect::<Result<_>>()?;

        let mut grads: Option<Gradients<f32>> = None;
        let mut batch_loss = 0.0f64;
        for (g, loss, rows) in parts {
            let w = rows as f64 / batch.len() as f64;
            batch_loss += loss * w;
            accumulate(&mut grads, g, w as f32);
        }
        adam_step(model, &grads.expect("batches are non-empty"), state)?;
        loss_sum += batch_loss * batch.len() as f64;
    }
    Ok(loss_sum / train.n_users as f64)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: FlowModel<f32>,
    pub state: OptimizerState<f32>,
    pub log: TrainLog,
    /// Epoch whose checkpoint is returned, None when validation never ran.
    pub best_epoch: Option<usize>,
    pub best_ndcg10: Option<f64>,
}

/// Trains up to max_epochs with early stopping, returning the checkpoint
/// with the highest validation NDCG@10 seen (earliest epoch on exact ties).
/// With max_epochs 0 the initialized model comes back with an empty log.
pub fn fit(
    split: &DatasetSplit,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    if split.train.nnz() == 0 {
        return Err(Error::Data("train matrix has no interactions".into()));
    }
    if model_config.input_dim != split.train.n_items {
        return Err(Error::Shape(format!(
            "model takes {} items, dataset has {}",
            model_config.input_dim, split.train.n_items
        )));
    }
    if config.prior.n_items != split.train.n_items {
        return Err(Error::Shape(format!(
            "prior covers {} items, dataset has {}",
            config.prior.n_items, split.train.n_items
        )));
    }
    if model_config.n_steps != config.n_steps {
        return Err(Error::Config(
            "model and trainer disagree on n_steps".into(),
        ));
    }

    let mut model = FlowModel::<f32>::init(model_config.clone())?;
    let mut state = OptimizerState::new(&model, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let infer_cfg = InferConfig::new(config.n_steps, config.prior.state_space)?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, FlowModel<f32>, OptimizerState<f32>)> = None;
    let mut strikes = 0usize;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let loss = train_epoch(&mut model, &mut state, &split.train, config, &mut rng)?;
        let mut record = EpochRecord {
            epoch,
            loss,
            recall10: None,
            recall20: None,
            ndcg10: None,
            ndcg20: None,
            seconds: 0.0,
        };
        let mut stop = false;
        if epoch % config.eval_every == 0 {
            let report = evaluate(&model, &infer_cfg, &split.train, &split.validation, &[10, 20])?;
            record.recall10 = report.recall.get(&10).copied();
            record.recall20 = report.recall.get(&20).copied();
            record.ndcg10 = report.ndcg.get(&10).copied();
            record.ndcg20 = report.ndcg.get(&20).copied();
            if let Some(nd) = record.ndcg10 {
                if best.as_ref().is_none_or(|b| nd > b.0) {
                    best = Some((nd, epoch, model.clone(), state.clone()));
                    strikes = 0;
                } else {
                    strikes += 1;
                    if strikes >= config.patience {
                        stop = true;
                    }
                }
            }
        }
        record.seconds = started.elapsed().as_secs_f64();
        log.records.push(record);
        if stop {
            break;
        }
    }

    let (model, state, best_epoch, best_ndcg10) = match best {
        Some((nd, epoch, m, s)) => (m, s, Some(epoch), Some(nd)),
        None => (model, state, None, None),
    };
    Ok(FitResult {
        model,
        state,
        log,
        best_epoch,
        best_ndcg10,
    })
}

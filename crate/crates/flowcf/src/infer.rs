//! Inference-time sampling along the flow and top-K recommendation. The
//! discrete sampler thresholds each Euler step and forces observed
//! interactions back on; the continuous sampler integrates plainly.

use ndarray::{Array2, ArrayView2};

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::flowcore::{
    continuous_update, discrete_update, predicted_field, preserve_observed, StateSpace,
    StepSchedule,
};
use crate::model::FlowModel;

/// Anything that maps (rows, t) to a prediction of the final interactions.
/// The flow model implements it; tests substitute hand-written stubs.
pub trait Predictor: Sync {
    fn n_items(&self) -> usize;
    fn predict(&self, x: &ArrayView2<f32>, t: f64) -> Result<Array2<f32>>;
}

impl Predictor for FlowModel<f32> {
    fn n_items(&self) -> usize {
        FlowModel::n_items(self)
    }

    fn predict(&self, x: &ArrayView2<f32>, t: f64) -> Result<Array2<f32>> {
        let ts = vec![t; x.nrows()];
        self.forward(x, &ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    pub n_steps: usize,
    /// First grid index the sampler visits. The default N-2 leaves exactly
    /// one thresholded update before the final prediction.
    pub start_step: usize,
    pub mode: StateSpace,
}

impl InferConfig {
    pub fn new(n_steps: usize, mode: StateSpace) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::Config(format!(
                "n_steps must be at least 2, got {n_steps}"
            )));
        }
        Ok(InferConfig {
            n_steps,
            start_step: n_steps - 2,
            mode,
        })
    }

    pub fn with_start(n_steps: usize, start_step: usize, mode: StateSpace) -> Result<Self> {
        let mut cfg = InferConfig::new(n_steps, mode)?;
        if start_step > n_steps - 2 {
            return Err(Error::Config(format!(
                "start_step {start_step} must not exceed n_steps - 2 = {}",
                n_steps - 2
            )));
        }
        cfg.start_step = start_step;
        Ok(cfg)
    }

    /// Model forward passes one sampling run costs: one per visited grid
    /// point from start_step through N-1.
    pub fn model_evaluations(&self) -> usize {
        self.n_steps - self.start_step
    }
}

fn check_binary(x: &ArrayView2<f32>) -> Result<()> {
    if x.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(
            "discrete sampler requires binary input rows".into(),
        ));
    }
    Ok(())
}

/// Discrete sampling: from t_s, alternate predict / threshold / preserve,
/// then return the model's prediction at t_{N-1}. The state stays binary
/// throughout and never loses an observed interaction.
pub fn infer_discrete<P: Predictor + ?Sized>(
    predictor: &P,
    x: &ArrayView2<f32>,
    config: &InferConfig,
) -> Result<Array2<f32>> {
    check_binary(x)?;
    run(predictor, x, config, true)
}

/// Continuous sampling: plain Euler steps, no thresholding, no preserve.
pub fn infer_continuous<P: Predictor + ?Sized>(
    predictor: &P,
    x: &ArrayView2<f32>,
    config: &InferConfig,
) -> Result<Array2<f32>> {
    run(predictor, x, config, false)
}

/// Dispatches on the configured state space.
pub fn infer<P: Predictor + ?Sized>(
    predictor: &P,
    x: &ArrayView2<f32>,
    config: &InferConfig,
) -> Result<Array2<f32>> {
    match config.mode {
        StateSpace::Discrete => infer_discrete(predictor, x, config),
        StateSpace::Continuous => infer_continuous(predictor, x, config),
    }
}

fn run<P: Predictor + ?Sized>(
    predictor: &P,
    x: &ArrayView2<f32>,
    config: &InferConfig,
    discrete: bool,
) -> Result<Array2<f32>> {
    if config.start_step > config.n_steps - 2 {
        return Err(Error::Config(format!(
            "start_step {} must not exceed n_steps - 2",
            config.start_step
        )));
    }
    if x.ncols() != predictor.n_items() {
        return Err(Error::Shape(format!(
            "{} columns fed to a {}-item predictor",
            x.ncols(),
            predictor.n_items()
        )));
    }
    let sched = StepSchedule::new(config.n_steps)?;
    let observed = x.to_owned();
    let mut xt = x.to_owned();
    for i in config.start_step..=config.n_steps - 2 {
        let t = sched.t(i);
        let xhat = predictor.predict(&xt.view(), t)?;
        let v = predicted_field(&xhat, &xt, t as f32)?;
        if discrete {
            xt = discrete_update(&xt, &v, config.n_steps)?;
            xt = preserve_observed(&xt, &observed)?;
        } else {
            xt = continuous_update(&xt, &v, config.n_steps)?;
        }
    }
    predictor.predict(&xt.view(), sched.t(config.n_steps - 1))
}

/// Top-K per row of `scores`, where row r belongs to `users[r]` and that
/// user's observed items are excluded from ranking. Ties break toward the
/// smaller item index. Rows with fewer than K unobserved items come back
/// shorter.
pub fn recommend_topk(
    scores: &Array2<f32>,
    observed: &InteractionMatrix,
    users: &[usize],
    k: usize,
) -> Result<Vec<Vec<(u32, f32)>>> {
    if scores.nrows() != users.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} users",
            scores.nrows(),
            users.len()
        )));
    }
    if scores.ncols() != observed.n_items {
        return Err(Error::Shape(format!(
            "{} score columns for {} items",
            scores.ncols(),
            observed.n_items
        )));
    }
    let by_score_desc = |a: &(u32, f32), b: &(u32, f32)| {
        b.1.partial_cmp(&a.1)
            .expect("scores must be comparable")
            .then(a.0.cmp(&b.0))
    };
    let mut out = Vec::with_capacity(users.len());
    for (r, &u) in users.iter().enumerate() {
        let row = scores.row(r);
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN score for user {u}")));
        }
        let mut candidates: Vec<(u32, f32)> = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| !observed.contains(u, i as u32))
            .map(|(i, &s)| (i as u32, s))
            .collect();
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k, by_score_desc);
            candidates.truncate(k);
        }
        candidates.sort_by(by_score_desc);
        out.push(candidates);
    }
    Ok(out)
}

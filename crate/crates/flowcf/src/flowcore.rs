//! Discrete flow framework: the uniform time grid, Bernoulli-mask
//! interpolation between prior and data states, the expectation vector
//! fields, and the Euler-style state updates used at inference.

use ndarray::{Array2, NdFloat, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State space the flow operates in. Discrete keeps states binary via
/// thresholded updates; continuous runs plain Euler steps on real vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpace {
    Discrete,
    Continuous,
}

impl std::fmt::Display for StateSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateSpace::Discrete => write!(f, "discrete"),
            StateSpace::Continuous => write!(f, "continuous"),
        }
    }
}

/// Uniform time grid t_i = i/N for i = 0..=N.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    n_steps: usize,
    grid: Vec<f64>,
}

impl StepSchedule {
    /// Inference starts at step N-2, so N must be at least 2.
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::Config(format!(
                "n_steps must be at least 2, got {n_steps}"
            )));
        }
        let grid = (0..=n_steps).map(|i| i as f64 / n_steps as f64).collect();
        Ok(StepSchedule { n_steps, grid })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// t_i = i/N; panics if i > N.
    pub fn t(&self, i: usize) -> f64 {
        self.grid[i]
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Grid points valid for training-time draws. t_N = 1 is excluded: the
    /// interpolation there is surely X_1 and the fields are singular.
    pub fn training_grid(&self) -> &[f64] {
        &self.grid[..self.n_steps]
    }
}

/// Bernoulli(t) mask deciding, per entry, whether X_t copies X_1 (mask 1)
/// or X_0 (mask 0).
#[derive(Debug, Clone)]
pub struct BinaryMask<F> {
    pub values: Array2<F>,
    pub t: f64,
}

/// Draws an iid Bernoulli(t) mask of the given shape.
pub fn sample_mask<F: NdFloat>(
    t: f64,
    shape: (usize, usize),
    rng: &mut impl Rng,
) -> BinaryMask<F> {
    assert!(
        (0.0..=1.0).contains(&t),
        "mask probability t={t} outside [0,1]"
    );
    let mut values = Array2::zeros(shape);
    for v in values.iter_mut() {
        if rng.random_bool(t) {
            *v = F::one();
        }
    }
    BinaryMask { values, t }
}

/// Mask with one Bernoulli parameter per row, for training batches where
/// each user draws its own step.
pub fn sample_mask_rows<F: NdFloat>(
    ts: &[f64],
    n_cols: usize,
    rng: &mut impl Rng,
) -> Array2<F> {
    let mut values = Array2::zeros((ts.len(), n_cols));
    for (mut row, &t) in values.outer_iter_mut().zip(ts) {
        debug_assert!((0.0..=1.0).contains(&t));
        for v in row.iter_mut() {
            if rng.random_bool(t) {
                *v = F::one();
            }
        }
    }
    values
}

fn same_shape<F: NdFloat>(a: &Array2<F>, b: &Array2<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// X_t = M ⊙ X_1 + (1-M) ⊙ X_0 for an arbitrary binary mask. Binary inputs
/// stay binary because every entry is copied from one of them.
pub fn interpolate_masked<F: NdFloat>(
    x0: &Array2<F>,
    x1: &Array2<F>,
    mask_values: &Array2<F>,
) -> Result<Array2<F>> {
    same_shape(x0, x1, "interpolate_masked x0/x1")?;
    same_shape(x0, mask_values, "interpolate_masked x0/mask")?;
    let mut out = x0.clone();
    Zip::from(&mut out)
        .and(x1)
        .and(mask_values)
        .for_each(|o, &a, &m| {
            if m == F::one() {
                *o = a;
            }
        });
    Ok(out)
}

/// Mask interpolation with the Bernoulli(t) mask bundled alongside its t.
pub fn interpolate_discrete<F: NdFloat>(
    x0: &Array2<F>,
    x1: &Array2<F>,
    mask: &BinaryMask<F>,
) -> Result<Array2<F>> {
    interpolate_masked(x0, x1, &mask.values)
}

/// Exact convex combination X_t = t X_1 + (1-t) X_0, the expectation of the
/// mask interpolation at the same t.
pub fn interpolate_continuous<F: NdFloat>(
    x0: &Array2<F>,
    x1: &Array2<F>,
    t: F,
) -> Result<Array2<F>> {
    same_shape(x0, x1, "interpolate_continuous")?;
    Ok(x1 * t + x0 * (F::one() - t))
}

/// Convex combination with one t per row, for training batches where each
/// user draws its own step.
pub fn interpolate_continuous_rows<F: NdFloat>(
    x0: &Array2<F>,
    x1: &Array2<F>,
    ts: &[f64],
) -> Result<Array2<F>> {
    same_shape(x0, x1, "interpolate_continuous_rows")?;
    if ts.len() != x0.nrows() {
        return Err(Error::Shape(format!(
            "{} step draws for {} rows",
            ts.len(),
            x0.nrows()
        )));
    }
    let mut out = Array2::zeros(x0.dim());
    for ((mut row, (r0, r1)), &t) in out
        .outer_iter_mut()
        .zip(x0.outer_iter().zip(x1.outer_iter()))
        .zip(ts)
    {
        let tf = F::from(t).unwrap();
        Zip::from(&mut row).and(&r0).and(&r1).for_each(|o, &a, &b| {
            *o = b * tf + a * (F::one() - tf);
        });
    }
    Ok(out)
}

/// Ground-truth field u_t = (X_1 - E[X_t]) / (1-t); singular at t = 1.
pub fn true_field<F: NdFloat>(
    x1: &Array2<F>,
    xt_expect: &Array2<F>,
    t: F,
) -> Result<Array2<F>> {
    same_shape(x1, xt_expect, "true_field")?;
    let denom = F::one() - t;
    if denom <= F::zero() {
        return Err(Error::Numeric(format!(
            "vector field undefined at t = {t} (requires t < 1)"
        )));
    }
    Ok((x1 - xt_expect) / denom)
}

/// Model field v_t = (X̂_1 - X_t) / (1-t), the learned counterpart of
/// `true_field` with the prediction in place of the target.
pub fn predicted_field<F: NdFloat>(
    xhat: &Array2<F>,
    xt: &Array2<F>,
    t: F,
) -> Result<Array2<F>> {
    same_shape(xhat, xt, "predicted_field")?;
    let denom = F::one() - t;
    if denom <= F::zero() {
        return Err(Error::Numeric(format!(
            "vector field undefined at t = {t} (requires t < 1)"
        )));
    }
    Ok((xhat - xt) / denom)
}

/// Thresholded Euler step: entry i becomes 1 exactly when
/// X_t^i + v^i/N >= 0.5, keeping the state binary.
pub fn discrete_update<F: NdFloat>(
    xt: &Array2<F>,
    v: &Array2<F>,
    n_steps: usize,
) -> Result<Array2<F>> {
    same_shape(xt, v, "discrete_update")?;
    let n = F::from(n_steps).unwrap();
    let half = F::from(0.5).unwrap();
    let mut nonfinite = false;
    let mut out = Array2::zeros(xt.dim());
    Zip::from(&mut out).and(xt).and(v).for_each(|o, &x, &f| {
        if !f.is_finite() {
            nonfinite = true;
        } else if x + f / n >= half {
            *o = F::one();
        }
    });
    if nonfinite {
        return Err(Error::Numeric(
            "non-finite field entry in discrete update".into(),
        ));
    }
    Ok(out)
}

/// Plain Euler step X_t + v/N without thresholding.
pub fn continuous_update<F: NdFloat>(
    xt: &Array2<F>,
    v: &Array2<F>,
    n_steps: usize,
) -> Result<Array2<F>> {
    same_shape(xt, v, "continuous_update")?;
    let n = F::from(n_steps).unwrap();
    let out = xt + &(v / n);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "non-finite entry in continuous update".into(),
        ));
    }
    Ok(out)
}

/// Elementwise OR with the observed interactions, forcing known positives
/// back on after each update.
pub fn preserve_observed<F: NdFloat>(xt: &Array2<F>, x: &Array2<F>) -> Result<Array2<F>> {
    same_shape(xt, x, "preserve_observed")?;
    let mut out = xt.clone();
    Zip::from(&mut out).and(x).for_each(|o, &b| {
        if b == F::one() {
            *o = F::one();
        }
    });
    Ok(out)
}

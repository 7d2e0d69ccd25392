//! Source distributions for the flow: the behavior-guided Bernoulli prior
//! built from global item frequencies, plus the uniform, gaussian, and
//! random-binary reference priors used for ablations.

use ndarray::{Array2, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::FrequencyVector;
use crate::error::{Error, Result};
use crate::flowcore::StateSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    BehaviorGuided,
    Uniform,
    Gaussian,
    RandomBinary,
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PriorKind::BehaviorGuided => "behavior_guided",
            PriorKind::Uniform => "uniform",
            PriorKind::Gaussian => "gaussian",
            PriorKind::RandomBinary => "random_binary",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub state_space: StateSpace,
    pub n_items: usize,
    /// Global item frequencies, required for the behavior-guided prior.
    pub frequencies: Option<FrequencyVector>,
}

impl PriorSpec {
    pub fn behavior_guided(state_space: StateSpace, frequencies: FrequencyVector) -> Self {
        PriorSpec {
            kind: PriorKind::BehaviorGuided,
            state_space,
            n_items: frequencies.len(),
            frequencies: Some(frequencies),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::Config("prior needs n_items > 0".into()));
        }
        match self.kind {
            PriorKind::BehaviorGuided => match &self.frequencies {
                None => Err(Error::Config(
                    "behavior-guided prior requires item frequencies".into(),
                )),
                Some(f) => {
                    if f.len() != self.n_items {
                        return Err(Error::Shape(format!(
                            "frequency vector has {} entries, expected {}",
                            f.len(),
                            self.n_items
                        )));
                    }
                    f.validate()
                }
            },
            PriorKind::RandomBinary => {
                if self.state_space == StateSpace::Continuous {
                    return Err(Error::Config(
                        "random-binary prior is discrete-only".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// A batch of draws from the prior; `binary` records whether every entry is
/// exactly 0 or 1.
#[derive(Debug, Clone)]
pub struct PriorSample<F: NdFloat> {
    pub values: Array2<F>,
    pub binary: bool,
}

/// Draws one prior state per user row. The behavior-guided discrete prior
/// samples each entry Bernoulli(f_i); its continuous variant is the
/// deterministic frequency row copied per user.
pub fn sample_prior<F: NdFloat>(
    spec: &PriorSpec,
    batch_users: usize,
    rng: &mut impl Rng,
) -> Result<PriorSample<F>> {
    spec.validate()?;
    assert!(batch_users >= 1, "prior batch must be non-empty");
    let shape = (batch_users, spec.n_items);
    let one = F::one();
    let sample = match (spec.kind, spec.state_space) {
        (PriorKind::BehaviorGuided, StateSpace::Discrete) => {
            let f = spec.frequencies.as_ref().unwrap();
            let mut values = Array2::zeros(shape);
            for mut row in values.outer_iter_mut() {
                for (v, &p) in row.iter_mut().zip(f.as_slice()) {
                    if rng.random_bool(p) {
                        *v = one;
                    }
                }
            }
            PriorSample {
                values,
                binary: true,
            }
        }
        (PriorKind::BehaviorGuided, StateSpace::Continuous) => {
            let f = spec.frequencies.as_ref().unwrap();
            let mut values = Array2::zeros(shape);
            for mut row in values.outer_iter_mut() {
                for (v, &p) in row.iter_mut().zip(f.as_slice()) {
                    *v = F::from(p).unwrap();
                }
            }
            PriorSample {
                values,
                binary: false,
            }
        }
        (PriorKind::Uniform, StateSpace::Continuous) => {
            let mut values = Array2::zeros(shape);
            for v in values.iter_mut() {
                *v = F::from(rng.random::<f64>()).unwrap();
            }
            PriorSample {
                values,
                binary: false,
            }
        }
        (PriorKind::Uniform, StateSpace::Discrete) => {
            // Bernoulli with a fresh uniform parameter per entry.
            let mut values = Array2::zeros(shape);
            for v in values.iter_mut() {
                let u = rng.random::<f64>();
                if rng.random_bool(u) {
                    *v = one;
                }
            }
            PriorSample {
                values,
                binary: true,
            }
        }
        (PriorKind::Gaussian, StateSpace::Continuous) => {
            let mut values = Array2::zeros(shape);
            for v in values.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *v = F::from(g).unwrap();
            }
            PriorSample {
                values,
                binary: false,
            }
        }
        (PriorKind::Gaussian, StateSpace::Discrete) => {
            // Normal draws clamped to [0,1] serve as Bernoulli parameters.
            let mut values = Array2::zeros(shape);
            for v in values.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                let p = g.clamp(0.0, 1.0);
                if rng.random_bool(p) {
                    *v = one;
                }
            }
            PriorSample {
                values,
                binary: true,
            }
        }
        (PriorKind::RandomBinary, StateSpace::Discrete) => {
            let mut values = Array2::zeros(shape);
            for v in values.iter_mut() {
                if rng.random_bool(0.5) {
                    *v = one;
                }
            }
            PriorSample {
                values,
                binary: true,
            }
        }
        (PriorKind::RandomBinary, StateSpace::Continuous) => unreachable!("rejected by validate"),
    };
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn spec(kind: PriorKind, space: StateSpace, n_items: usize) -> PriorSpec {
        PriorSpec {
            kind,
            state_space: space,
            n_items,
            frequencies: None,
        }
    }

    #[test]
    fn behavior_guided_extreme_frequencies() {
        let zeros = PriorSpec::behavior_guided(
            StateSpace::Discrete,
            FrequencyVector::new(vec![0.0; 6]).unwrap(),
        );
        let s: PriorSample<f64> = sample_prior(&zeros, 5, &mut rng(1)).unwrap();
        assert!(s.binary);
        assert!(s.values.iter().all(|&v| v == 0.0));

        let ones = PriorSpec::behavior_guided(
            StateSpace::Discrete,
            FrequencyVector::new(vec![1.0; 6]).unwrap(),
        );
        let s: PriorSample<f64> = sample_prior(&ones, 5, &mut rng(2)).unwrap();
        assert!(s.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn behavior_guided_column_rate_concentrates() {
        // Binomial concentration: the empirical rate of a column with
        // f = 0.3 over 10,000 users stays within 4 standard errors.
        let spec = PriorSpec::behavior_guided(
            StateSpace::Discrete,
            FrequencyVector::new(vec![0.3, 0.7]).unwrap(),
        );
        let s: PriorSample<f64> = sample_prior(&spec, 10_000, &mut rng(3)).unwrap();
        let bound = 4.0 * (0.3f64 * 0.7 / 10_000.0).sqrt();
        for (col, f) in [(0, 0.3), (1, 0.7)] {
            let rate = s.values.column(col).mean().unwrap();
            assert!((rate - f).abs() < bound, "column {col} rate {rate}");
        }
    }

    #[test]
    fn behavior_guided_sample_density_matches_frequency_mean() {
        let mut r = rng(4);
        let f: Vec<f64> = (0..50).map(|_| r.random::<f64>()).collect();
        let fmean = f.iter().sum::<f64>() / 50.0;
        let spec = PriorSpec::behavior_guided(
            StateSpace::Discrete,
            FrequencyVector::new(f).unwrap(),
        );
        let s: PriorSample<f64> = sample_prior(&spec, 2000, &mut r).unwrap();
        let density = s.values.mean().unwrap();
        assert!((density - fmean).abs() < 0.005, "density {density} vs {fmean}");
    }

    #[test]
    fn continuous_behavior_guided_copies_frequencies() {
        let f = vec![0.1, 0.5, 0.9];
        let spec = PriorSpec::behavior_guided(
            StateSpace::Continuous,
            FrequencyVector::new(f.clone()).unwrap(),
        );
        let s: PriorSample<f64> = sample_prior(&spec, 4, &mut rng(5)).unwrap();
        assert!(!s.binary);
        for row in s.values.outer_iter() {
            for (v, e) in row.iter().zip(&f) {
                assert_eq!(v, e);
            }
        }
        // No randomness consumed: a second draw is identical.
        let s2: PriorSample<f64> = sample_prior(&spec, 4, &mut rng(99)).unwrap();
        assert_eq!(s.values, s2.values);
    }

    #[test]
    fn reference_priors_have_declared_supports() {
        let u: PriorSample<f64> =
            sample_prior(&spec(PriorKind::Uniform, StateSpace::Continuous, 40), 50, &mut rng(6))
                .unwrap();
        assert!(!u.binary);
        assert!(u.values.iter().all(|&v| (0.0..1.0).contains(&v)));

        let ud: PriorSample<f64> =
            sample_prior(&spec(PriorKind::Uniform, StateSpace::Discrete, 40), 50, &mut rng(7))
                .unwrap();
        assert!(ud.binary);
        assert!(ud.values.iter().all(|&v| v == 0.0 || v == 1.0));

        let g: PriorSample<f64> =
            sample_prior(&spec(PriorKind::Gaussian, StateSpace::Continuous, 40), 50, &mut rng(8))
                .unwrap();
        assert!(!g.binary);
        assert!(g.values.iter().any(|&v| v < 0.0));
        assert!(g.values.iter().any(|&v| v > 1.0));

        let gd: PriorSample<f64> =
            sample_prior(&spec(PriorKind::Gaussian, StateSpace::Discrete, 40), 50, &mut rng(9))
                .unwrap();
        assert!(gd.values.iter().all(|&v| v == 0.0 || v == 1.0));

        let rb: PriorSample<f64> =
            sample_prior(&spec(PriorKind::RandomBinary, StateSpace::Discrete, 40), 200, &mut rng(10))
                .unwrap();
        assert!(rb.values.iter().all(|&v| v == 0.0 || v == 1.0));
        let rate = rb.values.mean().unwrap();
        let bound = 4.0 * (0.25f64 / (200.0 * 40.0)).sqrt();
        assert!((rate - 0.5).abs() < bound, "random-binary rate {rate}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let no_f = spec(PriorKind::BehaviorGuided, StateSpace::Discrete, 5);
        assert!(sample_prior::<f64>(&no_f, 3, &mut rng(11)).is_err());

        let rb_cont = spec(PriorKind::RandomBinary, StateSpace::Continuous, 5);
        assert!(sample_prior::<f64>(&rb_cont, 3, &mut rng(12)).is_err());

        let mut wrong_len = PriorSpec::behavior_guided(
            StateSpace::Discrete,
            FrequencyVector::new(vec![0.5; 4]).unwrap(),
        );
        wrong_len.n_items = 7;
        assert!(sample_prior::<f64>(&wrong_len, 3, &mut rng(13)).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let spec = PriorSpec::behavior_guided(
            StateSpace::Discrete,
            FrequencyVector::new(vec![0.2, 0.5, 0.8]).unwrap(),
        );
        let a: PriorSample<f32> = sample_prior(&spec, 20, &mut rng(14)).unwrap();
        let b: PriorSample<f32> = sample_prior(&spec, 20, &mut rng(14)).unwrap();
        assert_eq!(a.values, b.values);
    }
}

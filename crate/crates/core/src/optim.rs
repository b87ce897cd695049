//! Adafactor with factored second moments and a constant learning rate.
//!
//! Matrices keep one running mean of squared gradients per row and per column;
//! the second-moment estimate is their outer product divided by the mean of the
//! row accumulator. Vectors keep a full accumulator. The decay is
//! `beta2_t = 1 - t^-c`, and each update is rescaled so its RMS never exceeds
//! the clipping threshold. There is no momentum, weight decay or step-size
//! schedule.

use crate::model::{Real, TensorSet};
use ndarray::{Array1, ArrayD, ArrayViewD, Axis, Ix2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("tensor {name}: shape mismatch ({detail})")]
    ShapeMismatch { name: String, detail: String },
    #[error("tensor {name}: rank {rank} is not supported (only vectors and matrices)")]
    UnsupportedRank { name: String, rank: usize },
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdafactorConfig {
    pub learning_rate: f64,
    /// Added to squared gradients before accumulation.
    pub eps1: f64,
    /// Only used by parameter-relative step sizes, which stay off under a constant rate.
    pub eps2: f64,
    pub clip_threshold: f64,
    /// Exponent `c` in `beta2_t = 1 - t^-c`.
    pub decay_exponent: f64,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        AdafactorConfig {
            learning_rate: 1e-3,
            eps1: 1e-30,
            eps2: 1e-3,
            clip_threshold: 1.0,
            decay_exponent: 0.8,
        }
    }
}

impl AdafactorConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.clip_threshold.is_nan() || self.clip_threshold <= 0.0 {
            return bad(format!("clip_threshold must be positive, got {}", self.clip_threshold));
        }
        if !(self.eps1 >= 0.0 && self.eps2 >= 0.0 && self.decay_exponent > 0.0) {
            return bad("eps1, eps2 must be nonnegative and decay_exponent positive".into());
        }
        Ok(())
    }

    pub fn beta2(&self, step: u64) -> f64 {
        1.0 - (step as f64).powf(-self.decay_exponent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Moment<F> {
    Factored { row: Array1<F>, col: Array1<F> },
    Full(ArrayD<F>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdafactorState<F> {
    pub step: u64,
    pub names: Vec<String>,
    pub moments: Vec<Moment<F>>,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Largest RMS of any tensor's clipped update (before the learning rate).
    pub max_update_rms: f64,
}

fn rms<F: Real>(a: &ArrayViewD<'_, F>) -> F {
    if a.is_empty() {
        return F::zero();
    }
    let n = F::from_usize(a.len()).unwrap_or_else(F::one);
    (a.iter().fold(F::zero(), |acc, &x| acc + x * x) / n).sqrt()
}

impl<F: Real> AdafactorState<F> {
    pub fn init(params: &impl TensorSet<F>) -> Result<Self, OptimError> {
        let mut names = Vec::new();
        let mut moments = Vec::new();
        for (name, t) in params.tensors() {
            let m = match t.ndim() {
                1 => Moment::Full(ArrayD::zeros(t.raw_dim())),
                2 => Moment::Factored {
                    row: Array1::zeros(t.shape()[0]),
                    col: Array1::zeros(t.shape()[1]),
                },
                rank => return Err(OptimError::UnsupportedRank { name, rank }),
            };
            names.push(name);
            moments.push(m);
        }
        Ok(AdafactorState { step: 0, names, moments })
    }

    /// The current second-moment estimate for tensor `index`.
    pub fn second_moment(&self, index: usize) -> ArrayD<F> {
        match &self.moments[index] {
            Moment::Full(v) => v.clone(),
            Moment::Factored { row, col } => factored_estimate(row, col).into_dyn(),
        }
    }

    fn check(&self, params: &impl TensorSet<F>, grads: &impl TensorSet<F>) -> Result<(), OptimError> {
        let p = params.tensors();
        let g = grads.tensors();
        if p.len() != self.names.len() || g.len() != self.names.len() {
            return Err(OptimError::ShapeMismatch {
                name: "<all>".into(),
                detail: format!(
                    "state has {} tensors, params {}, grads {}",
                    self.names.len(),
                    p.len(),
                    g.len()
                ),
            });
        }
        for (((name, (_, pt)), (_, gt)), m) in self.names.iter().zip(&p).zip(&g).zip(&self.moments) {
            let moment_ok = match m {
                Moment::Full(v) => v.shape() == pt.shape(),
                Moment::Factored { row, col } => {
                    pt.ndim() == 2 && row.len() == pt.shape()[0] && col.len() == pt.shape()[1]
                }
            };
            if pt.shape() != gt.shape() || !moment_ok {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    detail: format!("param {:?}, grad {:?}", pt.shape(), gt.shape()),
                });
            }
            if gt.iter().any(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient(name.clone()));
            }
        }
        Ok(())
    }

    /// Apply one update in place. Nothing is modified if validation fails.
    pub fn step(
        &mut self,
        params: &mut impl TensorSet<F>,
        grads: &impl TensorSet<F>,
        config: &AdafactorConfig,
    ) -> Result<StepReport, OptimError> {
        config.validate()?;
        self.check(params, grads)?;
        self.step += 1;
        let beta2 = F::from_f64(config.beta2(self.step)).unwrap_or_else(F::zero);
        let one_minus = F::one() - beta2;
        let eps1 = F::from_f64(config.eps1).unwrap_or_else(F::zero);
        let clip = F::from_f64(config.clip_threshold).unwrap_or_else(F::one);
        let lr = F::from_f64(config.learning_rate).unwrap_or_else(F::zero);
        let mut max_rms = 0.0f64;
        let g = grads.tensors();
        for (((_, mut p), (_, g)), m) in params.tensors_mut().into_iter().zip(g).zip(&mut self.moments) {
            let sq = g.mapv(|x| x * x + eps1);
            let v_hat = match m {
                Moment::Full(v) => {
                    Zip::from(&mut *v).and(&sq).for_each(|v, &s| *v = beta2 * *v + one_minus * s);
                    v.clone()
                }
                Moment::Factored { row, col } => {
                    let sq2 = sq.view().into_dimensionality::<Ix2>().expect("checked rank");
                    let rmean = sq2.mean_axis(Axis(1)).expect("nonempty");
                    let cmean = sq2.mean_axis(Axis(0)).expect("nonempty");
                    Zip::from(&mut *row).and(&rmean).for_each(|r, &s| *r = beta2 * *r + one_minus * s);
                    Zip::from(&mut *col).and(&cmean).for_each(|c, &s| *c = beta2 * *c + one_minus * s);
                    factored_estimate(row, col).into_dyn()
                }
            };
            let mut u = ArrayD::zeros(g.raw_dim());
            Zip::from(&mut u).and(&g).and(&v_hat).for_each(|u, &g, &v| {
                *u = if v > F::zero() { g / v.sqrt() } else { F::zero() }
            });
            let r = rms(&u.view());
            let denom = (r / clip).max(F::one());
            u /= denom;
            max_rms = max_rms.max((r / denom).to_f64().unwrap_or(f64::NAN));
            Zip::from(&mut p).and(&u).for_each(|p, &u| *p -= lr * u);
        }
        Ok(StepReport {
            step: self.step,
            max_update_rms: max_rms,
        })
    }
}

/// `outer(row, col) / mean(row)`, or zeros while the accumulators are empty.
pub fn factored_estimate<F: Real>(row: &Array1<F>, col: &Array1<F>) -> ndarray::Array2<F> {
    let mean = row.mean().unwrap_or_else(F::zero);
    let outer = row.view().insert_axis(Axis(1)).dot(&col.view().insert_axis(Axis(0)));
    if mean > F::zero() {
        outer / mean
    } else {
        outer
    }
}

use crate::{Result, Tensor, TensorError};

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear warmup to `base`, then decay with `1/sqrt(step)`:
    /// `base * min(step / warmup, sqrt(warmup / step))`.
    InverseSqrt {
        base: f64,
        warmup: u64,
    },
}

impl LrSchedule {
    pub fn inverse_sqrt(base: f64, warmup: i64) -> Result<Self> {
        if warmup <= 0 {
            return Err(TensorError::Config(format!(
                "warmup must be positive, got {warmup}"
            )));
        }
        Ok(LrSchedule::InverseSqrt {
            base,
            warmup: warmup as u64,
        })
    }

    /// Rate for a 1-based step.
    pub fn lr_at(&self, step: u64) -> f64 {
        assert!(step >= 1, "steps are 1-based");
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::InverseSqrt { base, warmup } => {
                let (s, w) = (step as f64, warmup as f64);
                base * (s / w).min((w / s).sqrt())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    pub fn new(schedule: LrSchedule) -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            schedule,
        }
    }
}

/// Adam with bias correction. Moment buffers are laid out to match the
/// parameter list passed to [`Adam::new`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        let second = first.clone();
        Adam {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update and returns the learning rate used. A `None`
    /// gradient is treated as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&[f64]>]) -> Result<f64> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::shape(
                "adam",
                format!(
                    "{} moment buffers, {} params, {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        self.step += 1;
        let lr = self.config.schedule.lr_at(self.step);
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, param) in params.iter_mut().enumerate() {
            if param.len() != self.first[i].len() {
                return Err(TensorError::shape(
                    "adam",
                    format!("param {i} has {} values", param.len()),
                ));
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = param.data_mut();
            match grads[i] {
                Some(g) => {
                    for j in 0..data.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        data[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..data.len() {
                        m[j] *= beta1;
                        v[j] *= beta2;
                        data[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(lr)
    }
}

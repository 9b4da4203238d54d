//! Deterministic DDIM sampling over a linear beta schedule.

pub const TRAIN_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct DdimSchedule {
    alphas_cumprod: Vec<f64>,
    /// Model timesteps in sampling order, e.g. `[950, 900, ..., 0]`.
    timesteps: Vec<usize>,
}

impl DdimSchedule {
    pub fn new(steps: usize) -> Self {
        let mut acc = 1.0;
        let alphas_cumprod = (0..TRAIN_TIMESTEPS)
            .map(|i| {
                let beta =
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (TRAIN_TIMESTEPS - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        let stride = TRAIN_TIMESTEPS / steps.max(1);
        let timesteps = (0..steps).rev().map(|i| i * stride).collect();
        Self {
            alphas_cumprod,
            timesteps,
        }
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Model timestep of the 1-based sampling step `step`.
    pub fn model_timestep(&self, step: usize) -> usize {
        self.timesteps[step - 1]
    }

    /// Progress of the 1-based step through the training range, in `[0, 1)`.
    pub fn noise_level(&self, step: usize) -> f64 {
        self.model_timestep(step) as f64 / TRAIN_TIMESTEPS as f64
    }

    /// `x_{t-1}` from `x_t` and the guided noise prediction (eta = 0).
    pub fn step(&self, step: usize, sample: &[f64], eps: &[f64]) -> Vec<f64> {
        let a_t = self.alphas_cumprod[self.model_timestep(step)];
        let a_prev = if step < self.timesteps.len() {
            self.alphas_cumprod[self.model_timestep(step + 1)]
        } else {
            1.0
        };
        let (sa, sb) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let (pa, pb) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        sample
            .iter()
            .zip(eps)
            .map(|(&x, &e)| {
                let x0 = (x - sb * e) / sa;
                pa * x0 + pb * e
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_step_schedule() {
        let s = DdimSchedule::new(20);
        assert_eq!(s.len(), 20);
        assert_eq!(s.model_timestep(1), 950);
        assert_eq!(s.model_timestep(20), 0);
    }

    #[test]
    fn perfect_noise_prediction_recovers_clean_sample() {
        let s = DdimSchedule::new(10);
        let x0 = [0.3, -1.2, 0.7];
        let noise = [1.0, -0.5, 0.25];
        let a = s.alphas_cumprod[s.model_timestep(1)];
        let mut x: Vec<f64> = x0
            .iter()
            .zip(&noise)
            .map(|(c, n)| a.sqrt() * c + (1.0 - a).sqrt() * n)
            .collect();
        for step in 1..=10 {
            x = s.step(step, &x, &noise);
        }
        for (got, want) in x.iter().zip(&x0) {
            assert!((got - want).abs() < 1e-9);
        }
    }
}

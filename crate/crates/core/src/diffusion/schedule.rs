use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Parameters a schedule is rebuilt from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_max: 100, beta_min: 1e-4, beta_max: 0.2 }
    }
}

/// Linear-beta DDPM schedule. Index 0 of `beta` is unused (t runs 1..=T).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self, DiffusionError> {
        let ScheduleConfig { t_max, beta_min, beta_max } = config;
        if t_max == 0 || !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(DiffusionError::Config(format!(
                "schedule needs T >= 1 and 0 < beta_min <= beta_max < 1, got {config:?}"
            )));
        }
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            beta[t] = if t_max == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * (t - 1) as f64 / (t_max - 1) as f64
            };
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(Self { config, beta, alpha_bar })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn t_max(&self) -> usize {
        self.config.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`; zero at t = 1.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_noise(&self, x0: [f64; 2], t: usize, eps: [f64; 2]) -> [f64; 2] {
        let a = self.alpha_bar[t];
        let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
        [s * x0[0] + n * eps[0], s * x0[1] + n * eps[1]]
    }

    /// Strided reverse-chain timesteps `tau_0 = 0 < ... < tau_S = T`.
    /// Requests above T run the full chain.
    pub fn timesteps(&self, steps: usize) -> Vec<usize> {
        let t = self.t_max();
        let s = steps.clamp(1, t);
        (0..=s).map(|i| ((i * t) as f64 / s as f64).round() as usize).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_products() {
        let s = NoiseSchedule::new(ScheduleConfig { t_max: 2, beta_min: 0.1, beta_max: 0.2 }).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_is_monotone_and_noisy() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(100) < 0.01);
        assert!((1..=100).all(|t| s.beta(t) > 0.0 && s.beta(t) < 1.0));
    }

    #[test]
    fn rejects_bad_ranges() {
        for (t, a, b) in [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)] {
            assert!(NoiseSchedule::new(ScheduleConfig { t_max: t, beta_min: a, beta_max: b }).is_err());
        }
    }

    #[test]
    fn forward_noise_plug_in() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        assert_eq!(s.forward_noise([0.3, -0.7], 0, [5.0, 5.0]), [0.3, -0.7]);
        let mut custom = s.clone();
        custom.alpha_bar[1] = 0.25;
        let x = custom.forward_noise([1.0, 0.0], 1, [0.0, 1.0]);
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 0.75f64.sqrt()).abs() < 1e-15);
        custom.alpha_bar[1] = 0.0;
        assert_eq!(custom.forward_noise([1.0, 2.0], 1, [0.3, 0.4]), [0.3, 0.4]);
    }

    #[test]
    fn strided_timesteps() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let ts = s.timesteps(50);
        assert_eq!(ts.len(), 51);
        assert_eq!((ts[0], ts[1], ts[50]), (0, 2, 100));
        assert_eq!(s.timesteps(200), (0..=100).collect::<Vec<_>>());
        assert_eq!(s.timesteps(3), vec![0, 33, 67, 100]);
    }
}

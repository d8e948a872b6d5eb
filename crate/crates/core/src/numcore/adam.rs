use serde::{Deserialize, Serialize};

use super::{NumError, ParamMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    /// Learning rate expressed per example, multiplied by the batch size.
    pub fn batch_scaled(lr_per_example: f64, batch: usize) -> Self {
        Self::new(lr_per_example * batch as f64)
    }
}

/// Adam with bias correction. Moments exist only for parameters that have
/// received a gradient, so masked parameters never move.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: ParamMap,
    v: ParamMap,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: ParamMap::new(), v: ParamMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// Applies one update to every parameter named in `grads`.
    ///
    /// `lr` overrides the configured rate for schedules. On error no parameter
    /// or moment is modified.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: Option<f64>) -> Result<(), NumError> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| NumError::UnknownParam { name: name.clone() })?;
            if p.shape() != g.shape() {
                return Err(NumError::GradShape {
                    name: name.clone(),
                    got: g.shape().to_vec(),
                    want: p.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumError::NonFiniteGrad { name: name.clone() });
            }
        }
        self.step += 1;
        let AdamConfig { lr: base_lr, beta1, beta2, eps } = self.config;
        let lr = lr.unwrap_or(base_lr);
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name).expect("checked above");
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamMap {
        ParamMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = one("w", 1.5);
        let mut st = AdamState::new(AdamConfig::new(0.1));
        st.step(&mut p, &one("w", 0.3), None).unwrap();
        let m1 = st.first_moment("w").unwrap().item();
        let before = p["w"].item();
        st.step(&mut p, &one("w", 0.0), None).unwrap();
        assert_eq!(st.first_moment("w").unwrap().item(), 0.9 * m1);
        // Nonzero moments still move the parameter; from a fresh state a zero gradient does not.
        assert_ne!(p["w"].item(), before);
        let mut q = one("w", 1.5);
        let mut fresh = AdamState::new(AdamConfig::new(0.1));
        fresh.step(&mut q, &one("w", 0.0), None).unwrap();
        assert_eq!(q["w"].item(), 1.5);
    }

    #[test]
    fn first_step_is_sign_step() {
        let mut p = one("w", 0.0);
        let mut st = AdamState::new(AdamConfig::new(0.01));
        st.step(&mut p, &one("w", 0.37), None).unwrap();
        let expected = -0.01 * 0.37 / (0.37 + 1e-8);
        assert!((p["w"].item() - expected).abs() < 1e-18);
        assert!((p["w"].item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_grad_names_param() {
        let mut p = one("w_k", 0.0);
        let mut st = AdamState::new(AdamConfig::new(0.01));
        let err = st.step(&mut p, &one("w_k", f64::NAN), None).unwrap_err();
        assert_eq!(err, NumError::NonFiniteGrad { name: "w_k".into() });
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = one("w", 0.2);
            let mut st = AdamState::new(AdamConfig::new(0.05));
            for k in 0..5 {
                st.step(&mut p, &one("w", (k as f64).sin()), None).unwrap();
            }
            p["w"].item().to_bits()
        };
        assert_eq!(run(), run());
    }
}

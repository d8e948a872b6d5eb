use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ConceptError;
use crate::numcore::{normal, Rng};

pub type Mat2 = [[f64; 2]; 2];

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut o = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    o
}

pub fn transpose(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

pub fn apply(a: &Mat2, x: [f64; 2]) -> [f64; 2] {
    [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]
}

/// Full-covariance 2-D Gaussian with cached Cholesky factor and inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian2 {
    mean: [f64; 2],
    cov: Mat2,
    chol: Mat2,
    inv: Mat2,
    log_norm: f64,
}

impl Gaussian2 {
    pub fn new(mean: [f64; 2], cov: Mat2) -> Result<Self, ConceptError> {
        let sym = (cov[0][1] - cov[1][0]).abs() <= 1e-12 * (cov[0][1].abs() + 1.0);
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if !sym || cov[0][0] <= 0.0 || det <= 0.0 || !det.is_finite() {
            return Err(ConceptError::Degenerate(format!("covariance {cov:?} is not symmetric positive-definite")));
        }
        let l00 = cov[0][0].sqrt();
        let l10 = cov[1][0] / l00;
        let l11 = (cov[1][1] - l10 * l10).sqrt();
        let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
        Ok(Self { mean, cov, chol: [[l00, 0.0], [l10, l11]], inv, log_norm: -(2.0 * PI).ln() - 0.5 * det.ln() })
    }

    pub fn isotropic(mean: [f64; 2], sigma: f64) -> Result<Self, ConceptError> {
        Self::new(mean, [[sigma * sigma, 0.0], [0.0, sigma * sigma]])
    }

    pub fn mean(&self) -> [f64; 2] {
        self.mean
    }

    pub fn cov(&self) -> Mat2 {
        self.cov
    }

    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        let d = [x[0] - self.mean[0], x[1] - self.mean[1]];
        let q = d[0] * (self.inv[0][0] * d[0] + self.inv[0][1] * d[1])
            + d[1] * (self.inv[1][0] * d[0] + self.inv[1][1] * d[1]);
        self.log_norm - 0.5 * q
    }

    pub fn sample(&self, rng: &mut Rng) -> [f64; 2] {
        let z = [normal(rng), normal(rng)];
        let d = apply(&self.chol, z);
        [self.mean[0] + d[0], self.mean[1] + d[1]]
    }

    /// KL(self || other) in nats.
    pub fn kl(&self, other: &Gaussian2) -> f64 {
        let oi = other.inv;
        let tr = oi[0][0] * self.cov[0][0]
            + oi[0][1] * self.cov[1][0]
            + oi[1][0] * self.cov[0][1]
            + oi[1][1] * self.cov[1][1];
        let d = [other.mean[0] - self.mean[0], other.mean[1] - self.mean[1]];
        let q = d[0] * (oi[0][0] * d[0] + oi[0][1] * d[1]) + d[1] * (oi[1][0] * d[0] + oi[1][1] * d[1]);
        if self.cov == other.cov {
            // Trace and log-det terms cancel exactly.
            return 0.5 * q;
        }
        // log det(other) - log det(self) = 2 * (self.log_norm - other.log_norm)
        0.5 * (tr + q - 2.0 + 2.0 * (self.log_norm - other.log_norm))
    }

    /// Image under `x -> centre + a (x - centre)`.
    pub fn transformed(&self, a: &Mat2, centre: [f64; 2]) -> Result<Self, ConceptError> {
        let d = apply(a, [self.mean[0] - centre[0], self.mean[1] - centre[1]]);
        let cov = mat_mul(&mat_mul(a, &self.cov), &transpose(a));
        // Symmetrize away rounding so the SPD check sees an exact mirror.
        let off = 0.5 * (cov[0][1] + cov[1][0]);
        Self::new([centre[0] + d[0], centre[1] + d[1]], [[cov[0][0], off], [off, cov[1][1]]])
    }
}

/// Weighted sum of 2-D Gaussians; weights sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    comps: Vec<Gaussian2>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, comps: Vec<Gaussian2>) -> Result<Self, ConceptError> {
        if weights.is_empty() || weights.len() != comps.len() {
            return Err(ConceptError::Invalid("mixture needs one weight per component".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(ConceptError::Invalid(format!("mixture weights {weights:?} must lie in [0,1] and sum to 1")));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { weights, log_weights, comps })
    }

    pub fn single(g: Gaussian2) -> Self {
        Self { weights: vec![1.0], log_weights: vec![0.0], comps: vec![g] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian2] {
        &self.comps
    }

    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        let terms: Vec<f64> = self.comps.iter().zip(&self.log_weights).map(|(g, lw)| lw + g.log_pdf(x)).collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    pub fn mean(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (w, g) in self.weights.iter().zip(&self.comps) {
            m[0] += w * g.mean[0];
            m[1] += w * g.mean[1];
        }
        m
    }

    /// Index of the component a uniform draw `u` in [0,1) selects.
    fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                return i;
            }
        }
        self.weights.iter().rposition(|&w| w > 0.0).unwrap()
    }

    pub fn sample(&self, rng: &mut Rng) -> [f64; 2] {
        use rand::Rng as _;
        let k = self.pick(rng.random::<f64>());
        self.comps[k].sample(rng)
    }

    pub fn transformed(&self, a: &Mat2, centre: [f64; 2]) -> Result<Self, ConceptError> {
        let comps = self.comps.iter().map(|g| g.transformed(a, centre)).collect::<Result<_, _>>()?;
        Ok(Self { weights: self.weights.clone(), log_weights: self.log_weights.clone(), comps })
    }
}

/// Serializable component description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: [f64; 2],
    pub cov: Mat2,
}

impl Component {
    pub fn isotropic(weight: f64, mean: [f64; 2], sigma: f64) -> Self {
        Self { weight, mean, cov: [[sigma * sigma, 0.0], [0.0, sigma * sigma]] }
    }
}

pub fn mixture_of(components: &[Component]) -> Result<Mixture, ConceptError> {
    let comps = components.iter().map(|c| Gaussian2::new(c.mean, c.cov)).collect::<Result<_, _>>()?;
    Mixture::new(components.iter().map(|c| c.weight).collect(), comps)
}

/// Rotation by `angle_deg` after axis scaling `diag(sqrt(a), 1/sqrt(a))`; determinant 1.
pub fn style_matrix(angle_deg: f64, anisotropy: f64) -> Mat2 {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (p, q) = (anisotropy.sqrt(), 1.0 / anisotropy.sqrt());
    [[c * p, -s * q], [s * p, c * q]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng_stream;

    #[test]
    fn isotropic_log_pdf_at_mean() {
        let g = Gaussian2::isotropic([1.0, 2.0], 0.15).unwrap();
        let expected = -(2.0 * PI * 0.0225).ln();
        assert!((g.log_pdf([1.0, 2.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_spd() {
        assert!(Gaussian2::new([0.0; 2], [[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(Gaussian2::new([0.0; 2], [[1.0, 0.1], [0.2, 1.0]]).is_err());
        assert!(Gaussian2::new([0.0; 2], [[0.0, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn kl_matches_isotropic_closed_form() {
        let a = Gaussian2::isotropic([0.0, 1.0], 0.15).unwrap();
        let b = Gaussian2::isotropic([1.0, 0.0], 0.15).unwrap();
        assert!((a.kl(&b) - 2.0 / (2.0 * 0.0225)).abs() < 1e-9);
        assert!(a.kl(&a).abs() < 1e-12);
    }

    #[test]
    fn style_matrix_preserves_area() {
        let a = style_matrix(45.0, 4.0);
        assert!((a[0][0] * a[1][1] - a[0][1] * a[1][0] - 1.0).abs() < 1e-12);
        assert_eq!(style_matrix(0.0, 1.0), [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn degenerate_weights_pick_component_zero() {
        let m = mixture_of(&[
            Component::isotropic(1.0, [5.0, 5.0], 0.1),
            Component::isotropic(0.0, [-5.0, 0.0], 0.1),
            Component::isotropic(0.0, [0.0, -5.0], 0.1),
            Component::isotropic(0.0, [-5.0, -5.0], 0.1),
        ])
        .unwrap();
        let mut r = rng_stream(1, 0);
        for _ in 0..1000 {
            let x = m.sample(&mut r);
            assert!((x[0] - 5.0).abs() < 1.0 && (x[1] - 5.0).abs() < 1.0);
        }
    }
}

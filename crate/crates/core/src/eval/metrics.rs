use super::EvalError;
use crate::concepts::Mixture;
use crate::numcore::rng_stream;
use crate::par;

use rand::seq::SliceRandom;

/// Similarity bandwidth whose 0.5 contour lies at distance 0.05.
pub const DEFAULT_SIGMA_SIM: f64 = 0.04246609001440096; // 0.05 / sqrt(2 ln 2)

/// `exp(-||x - m||^2 / (2 sigma^2))`.
pub fn similarity(x: [f64; 2], m: [f64; 2], sigma: f64) -> f64 {
    let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Fraction of `samples` with similarity to `m` at or above `threshold`.
pub fn copy_rate(samples: &[[f64; 2]], m: [f64; 2], sigma: f64, threshold: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|x| similarity(**x, m, sigma) >= threshold).count() as f64 / samples.len() as f64
}

/// Orders two densities when their log-likelihoods tie, so that exactly one
/// side wins every point.
fn a_wins_ties(a: &Mixture, b: &Mixture) -> Result<bool, EvalError> {
    let key = |m: &Mixture| {
        let mu = m.mean();
        let cov = m.components()[0].cov();
        [mu[0], mu[1], cov[0][0], cov[0][1], cov[1][1], m.weights().len() as f64]
    };
    for (x, y) in key(a).iter().zip(key(b).iter()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return Ok(true),
            std::cmp::Ordering::Greater => return Ok(false),
            std::cmp::Ordering::Equal => {}
        }
    }
    if a == b {
        return Err(EvalError::Degenerate("the two concepts have identical densities".into()));
    }
    Ok(a.components().len() <= b.components().len())
}

/// Number of samples the Bayes classifier assigns to `a` rather than `b`.
pub fn bayes_wins(samples: &[[f64; 2]], a: &Mixture, b: &Mixture) -> Result<usize, EvalError> {
    let ties_to_a = a_wins_ties(a, b)?;
    Ok(samples
        .iter()
        .filter(|&&x| {
            let (la, lb) = (a.log_pdf(x), b.log_pdf(x));
            la > lb || (la == lb && ties_to_a)
        })
        .count())
}

/// Fraction of `samples` the Bayes classifier assigns to `a` rather than `b`.
pub fn bayes_accuracy(samples: &[[f64; 2]], a: &Mixture, b: &Mixture) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Config("accuracy needs at least one sample".into()));
    }
    Ok(bayes_wins(samples, a, b)? as f64 / samples.len() as f64)
}

/// Mean log-density of `samples` under `density`, in nats.
pub fn mean_log_density(samples: &[[f64; 2]], density: &Mixture) -> f64 {
    samples.iter().map(|&x| density.log_pdf(x)).sum::<f64>() / samples.len() as f64
}

const POLY_DIM: f64 = 2.0;

/// `(x . y / d + 1)^3` with `d = 2`.
pub fn poly_kernel(x: [f64; 2], y: [f64; 2]) -> f64 {
    (x[0] * y[0] / POLY_DIM + x[1] * y[1] / POLY_DIM + 1.0).powi(3)
}

/// Explicit feature map of the cubic kernel: `phi(x) . phi(y) = poly_kernel(x, y)`.
fn poly_features(x: [f64; 2]) -> [f64; 10] {
    let (u, v) = (x[0] / POLY_DIM.sqrt(), x[1] / POLY_DIM.sqrt());
    let s3 = 3f64.sqrt();
    let s6 = 6f64.sqrt();
    [1.0, s3 * u, s3 * v, s3 * u * u, s6 * u * v, s3 * v * v, u * u * u, s3 * u * u * v, s3 * u * v * v, v * v * v]
}

/// `(sum_i phi(x_i), sum_i ||phi(x_i)||^2)`.
fn feature_sums(xs: &[[f64; 2]]) -> ([f64; 10], f64) {
    let mut s = [0.0; 10];
    let mut diag = 0.0;
    for &x in xs {
        let f = poly_features(x);
        for (acc, v) in s.iter_mut().zip(f) {
            *acc += v;
        }
        diag += f.iter().map(|v| v * v).sum::<f64>();
    }
    (s, diag)
}

fn dot(a: &[f64; 10], b: &[f64; 10]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unbiased MMD^2 under the cubic polynomial kernel, in O(n) via its feature map.
pub fn mmd_poly(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64, EvalError> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(EvalError::Config("MMD needs at least two points per set".into()));
    }
    let (sa, da) = feature_sums(a);
    let (sb, db) = feature_sums(b);
    let kaa = (dot(&sa, &sa) - da) / (m * (m - 1)) as f64;
    let kbb = (dot(&sb, &sb) - db) / (n * (n - 1)) as f64;
    let kab = dot(&sa, &sb) / (m * n) as f64;
    Ok(kaa + kbb - 2.0 * kab)
}

/// The same estimator as a direct double sum over kernel evaluations.
pub fn mmd_poly_brute(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64, EvalError> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(EvalError::Config("MMD needs at least two points per set".into()));
    }
    let within = |s: &[[f64; 2]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += poly_kernel(s[i], s[j]);
                }
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for &x in a {
        for &y in b {
            cross += poly_kernel(x, y);
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (m * n) as f64)
}

/// `q`-quantile of MMD^2 over `perms` random relabelings of the pooled sets.
///
/// Permutation `k` uses RNG stream `(seed, k)`, so the result is independent
/// of thread count.
pub fn mmd_null_quantile(a: &[[f64; 2]], b: &[[f64; 2]], perms: usize, q: f64, seed: u64) -> Result<f64, EvalError> {
    if perms == 0 || !(0.0..=1.0).contains(&q) {
        return Err(EvalError::Config("permutation null needs perms >= 1 and q in [0, 1]".into()));
    }
    mmd_poly(a, b)?;
    let pooled: Vec<[f64; 2]> = a.iter().chain(b).copied().collect();
    let mut stats = par::map_range(perms, |k| {
        let mut p = pooled.clone();
        p.shuffle(&mut rng_stream(seed, k as u64));
        mmd_poly(&p[..a.len()], &p[a.len()..]).expect("sizes checked")
    });
    stats.sort_by(f64::total_cmp);
    let idx = ((q * perms as f64).ceil() as usize).clamp(1, perms) - 1;
    Ok(stats[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::Gaussian2;

    #[test]
    fn similarity_half_at_threshold_radius() {
        let r = DEFAULT_SIGMA_SIM * (2.0 * std::f64::consts::LN_2).sqrt();
        assert!((similarity([r, 0.0], [0.0, 0.0], DEFAULT_SIGMA_SIM) - 0.5).abs() < 1e-15);
        assert_eq!(similarity([1.0, 2.0], [1.0, 2.0], DEFAULT_SIGMA_SIM), 1.0);
        assert!((r - 0.05).abs() < 1e-15);
    }

    #[test]
    fn feature_map_reproduces_kernel() {
        let pts = [[0.3, -1.2], [2.0, 0.5], [-0.7, 0.0], [1.1, 1.1]];
        for &x in &pts {
            for &y in &pts {
                let f = dot(&poly_features(x), &poly_features(y));
                assert!((f - poly_kernel(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mmd_matches_brute_force() {
        let a = [[0.1, 0.2], [1.0, -0.5], [0.3, 0.3]];
        let b = [[2.0, 0.0], [1.5, 1.5]];
        assert!((mmd_poly(&a, &b).unwrap() - mmd_poly_brute(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mmd_rejects_singletons() {
        assert!(mmd_poly(&[[0.0, 0.0]], &[[1.0, 0.0], [2.0, 0.0]]).is_err());
    }

    #[test]
    fn accuracy_at_own_mean_is_one() {
        let a = Mixture::single(Gaussian2::isotropic([0.0, 0.0], 0.15).unwrap());
        let b = Mixture::single(Gaussian2::isotropic([1.0, 0.0], 0.15).unwrap());
        assert_eq!(bayes_accuracy(&[[0.0, 0.0]], &a, &b).unwrap(), 1.0);
    }

    #[test]
    fn ties_go_to_exactly_one_side() {
        let a = Mixture::single(Gaussian2::isotropic([-1.0, 0.0], 0.15).unwrap());
        let b = Mixture::single(Gaussian2::isotropic([1.0, 0.0], 0.15).unwrap());
        let mid = [[0.0, 0.3]];
        assert_eq!(bayes_wins(&mid, &a, &b).unwrap() + bayes_wins(&mid, &b, &a).unwrap(), 1);
    }

    #[test]
    fn identical_densities_are_degenerate() {
        let a = Mixture::single(Gaussian2::isotropic([0.0, 0.0], 0.15).unwrap());
        assert!(matches!(bayes_accuracy(&[[0.0, 0.0]], &a, &a.clone()), Err(EvalError::Degenerate(_))));
    }

    #[test]
    fn null_quantile_is_deterministic() {
        let a: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 0.1, 0.0]).collect();
        let b: Vec<[f64; 2]> = (0..20).map(|i| [0.0, i as f64 * 0.1]).collect();
        let q1 = mmd_null_quantile(&a, &b, 50, 0.95, 3).unwrap();
        let q2 = mmd_null_quantile(&a, &b, 50, 0.95, 3).unwrap();
        assert_eq!(q1.to_bits(), q2.to_bits());
    }
}

use super::ParamMap;

/// Max relative error between `grad` and central differences of `value`,
/// over every entry of every parameter named in `grad`:
/// `|g - fd| / (|fd| + 1e-8)`.
///
/// `value` must be a deterministic function of the parameters.
pub fn grad_check_named<F>(value: F, params: &ParamMap, grad: &ParamMap, h: f64) -> f64
where
    F: Fn(&ParamMap) -> f64,
{
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for (name, g) in grad {
        let n = work[name].len();
        for i in 0..n {
            let orig = work[name].data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = value(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = value(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (g.data()[i] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

/// `grad_check_named` where `model` returns both the value and the autodiff
/// gradient; the checked set is whatever the gradient map names.
pub fn grad_check<F>(model: F, params: &ParamMap, h: f64) -> f64
where
    F: Fn(&ParamMap) -> (f64, ParamMap),
{
    let (_, grad) = model(params);
    grad_check_named(|p| model(p).0, params, &grad, h)
}

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` builds the scalar on a fresh graph from the parameter handles it is
/// given. It is called once with trainable leaves and `2 * n` more times
/// with constant leaves, one pair per perturbed entry. The relative error
/// per entry is `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    for pi in 0..params.len() {
        let mut num = Tensor::zeros(params[pi].shape().to_vec());
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let d = (plus - minus) / (2.0 * eps);
            num.data_mut()[j] = d;
            let a = analytic[pi].data()[j];
            max_rel_err = max_rel_err.max((a - d).abs() / (d.abs() + 1e-8));
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_err,
        analytic,
        numeric,
    })
}

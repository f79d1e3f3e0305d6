use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar function against central
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Config(format!("grad_check step {h} outside [1e-4, 1e-2]")));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        let value = g.value(out);
        if value.numel() != 1 {
            return Err(Error::Evaluation("grad_check needs a scalar function".into()));
        }
        let y = value.item();
        if !y.is_finite() {
            return Err(Error::Evaluation("function is not finite".into()));
        }
        Ok(y as f64)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Evaluation("function is not finite".into()));
    }
    g.backward(out)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f32;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h as f64);
        let a = analytic.data()[i] as f64;
        let err = ((a - numeric).abs() / a.abs().max(1.0)) as f32;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Like [`grad_check`], but differentiates with respect to the stored
/// parameter `id`. `f` builds the scalar on a graph in which only that
/// parameter is trainable.
pub fn param_grad_check<F>(store: &ParamStore, id: ParamId, f: F, h: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Config(format!("grad_check step {h} outside [1e-4, 1e-2]")));
    }
    let name = store.name(id).to_string();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(Error::Evaluation("function is not finite".into()));
        }
        Ok(y as f64)
    };
    let mut g = Graph::with_trainable(&[name.as_str()]);
    let out = f(&mut g, store)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Evaluation("grad_check needs a scalar function".into()));
    }
    g.backward(out)?;
    let analytic = g
        .param_grads()
        .into_iter()
        .find(|(p, _)| *p == id)
        .map(|(_, t)| t)
        .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
    let mut work = store.clone();
    let base = store.get(id).clone();
    let mut worst = 0.0f32;
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        work.set(id, plus)?;
        let fp = eval(&work)?;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        work.set(id, minus)?;
        let fm = eval(&work)?;
        let numeric = (fp - fm) / (2.0 * h as f64);
        let a = analytic.data()[i] as f64;
        worst = worst.max(((a - numeric).abs() / a.abs().max(1.0)) as f32);
    }
    Ok(worst)
}

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval(store: &ParamStore, f: &impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let t = g.value(loss);
    if t.len() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` on every trainable coordinate.
/// `filter` selects which parameters (by name) are perturbed.
pub fn grad_check_filtered(
    store: &mut ParamStore,
    eps: f64,
    filter: impl Fn(&str) -> bool,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    store.zero_grads();
    store.accumulate(&grads, 1.0);

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable && filter(&p.name))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.get(id).grad.data()[i];
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

pub fn grad_check(
    store: &mut ParamStore,
    eps: f64,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check_filtered(store, eps, |_| true, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::{Attention, Builder};
    use crate::numerics::{Rng, Tensor};

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[3.0]), true).unwrap();
        let report = grad_check(&mut store, 1e-5, |g, s| {
            let v = g.param(s, x);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!((store.get(x).grad.item() - 6.0).abs() < 1e-12);
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
    }

    #[test]
    fn constant_function() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[1.0, 2.0]), true).unwrap();
        let report = grad_check(&mut store, 1e-5, |g, _| Ok(g.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(store.get(x).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_l2_loss() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(77);
        let attn = {
            let mut b = Builder::new(&mut store, &mut rng);
            Attention::new(&mut b, "attn", 8, 2).unwrap()
        };
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.get(id).value.shape().to_vec();
            store.set_value(id, Tensor::randn(&shape, 0.4, &mut rng)).unwrap();
        }
        let x = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let report = grad_check(&mut store, 1e-5, |g, s| {
            let xv = g.constant(x.clone());
            let y = attn.forward(g, s, xv)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}

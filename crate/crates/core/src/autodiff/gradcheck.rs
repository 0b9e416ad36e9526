//! Central finite-difference check of tape gradients.

use super::graph::{Graph, Var};
use super::tensor::ParamStore;
use crate::error::{DvamError, Result};

#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn get(&self, name: &str) -> Option<&ParamError> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Names whose error exceeds `tol`.
    pub fn failures(&self, tol: f64) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_error > tol)
            .map(|e| e.name.as_str())
            .collect()
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&Graph, &ParamStore) -> Var,
{
    let g = Graph::new();
    let l = f(&g, params);
    let v = g.scalar_value(l);
    if !v.is_finite() {
        return Err(DvamError::NumericOverflow(format!(
            "objective evaluated to {v}"
        )));
    }
    Ok(v)
}

/// Compares backward-pass gradients of `f` with `(f(p+eps) - f(p-eps)) / 2eps`
/// for every element of every trainable parameter in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &ParamStore) -> Var,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(DvamError::contract("grad_check needs eps > 0"));
    }
    let g = Graph::new();
    let loss = f(&g, params);
    let v0 = g.scalar_value(loss);
    if !v0.is_finite() {
        return Err(DvamError::NumericOverflow(format!(
            "objective evaluated to {v0}"
        )));
    }
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, t) in params.iter() {
        if !t.requires_grad {
            continue;
        }
        let analytic = grads
            .named(name)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut entry = ParamError {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..t.len() {
            let orig = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&f, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&f, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[i], numeric);
            if err > entry.max_rel_error || i == 0 {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = analytic[i];
                entry.numeric = numeric;
            }
        }
        report.entries.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn square_at_three() {
        let mut p = ParamStore::new();
        p.insert("p", Tensor::scalar(3.0).trainable()).unwrap();
        let r = grad_check(
            |g, s| {
                let p = g.param(s, "p");
                g.mul(p, p)
            },
            &p,
            1e-5,
        )
        .unwrap();
        let e = r.get("p").unwrap();
        assert_eq!(e.analytic, 6.0);
        assert!((e.numeric - 6.0).abs() < 1e-8);
        assert!(r.max_rel_error() < 1e-9);
    }

    #[test]
    fn stop_gradient_is_flagged() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(2.0).trainable()).unwrap();
        p.insert("b", Tensor::scalar(-1.5).trainable()).unwrap();
        let r = grad_check(
            |g, s| {
                let a = g.param(s, "a");
                let b = g.param(s, "b");
                let blocked = g.stop_gradient(g.mul(b, b));
                g.add(g.mul(a, a), blocked)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.get("a").unwrap().max_rel_error < 1e-8);
        assert_eq!(r.failures(1e-4), vec!["b"]);
        assert_eq!(r.get("b").unwrap().analytic, 0.0);
    }

    #[test]
    fn non_finite_objective_errors() {
        let mut p = ParamStore::new();
        p.insert("p", Tensor::scalar(0.0).trainable()).unwrap();
        let r = grad_check(|g, s| g.log(g.param(s, "p")), &p, 1e-5);
        assert!(matches!(r, Err(DvamError::NumericOverflow(_))));
    }
}

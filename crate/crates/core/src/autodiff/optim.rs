use super::tensor::ParamStore;
use crate::error::{DvamError, Result};

/// Plain gradient descent: `p <- p - lr * grad`, then grads are zeroed.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(DvamError::contract(format!("learning rate must be > 0, got {lr}")));
    }
    for (name, t) in params.iter() {
        if t.requires_grad && t.grad().is_none() {
            return Err(DvamError::contract(format!("parameter {name} has no gradient")));
        }
    }
    for (_, t) in params.iter_mut() {
        if !t.requires_grad {
            continue;
        }
        let g = t.grad().unwrap().to_vec();
        for (p, d) in t.data_mut().iter_mut().zip(&g) {
            *p -= lr * d;
        }
        t.zero_grad();
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p).trainable()).unwrap();
        s
    }

    #[test]
    fn single_step() {
        let mut s = store(1.0);
        s.get_mut("p").unwrap().accumulate_grad(&[0.5]).unwrap();
        sgd_step(&mut s, 1.0).unwrap();
        assert_eq!(s.expect("p").data(), &[0.5]);
        assert_eq!(s.expect("p").grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = store(1.25);
        s.zero_grad();
        sgd_step(&mut s, 1.0).unwrap();
        assert_eq!(s.expect("p").data(), &[1.25]);
    }

    #[test]
    fn two_steps_on_square() {
        let mut s = store(1.0);
        for _ in 0..2 {
            let g = Graph::new();
            let p = g.param(&s, "p");
            let l = g.mul(p, p);
            g.backward(l).unwrap().accumulate_into(&mut s).unwrap();
            sgd_step(&mut s, 0.1).unwrap();
        }
        assert!((s.expect("p").data()[0] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_contract_violation() {
        let mut s = store(1.0);
        assert!(matches!(sgd_step(&mut s, 1.0), Err(DvamError::Contract(_))));
        s.zero_grad();
        assert!(sgd_step(&mut s, 0.0).is_err());
    }

    #[test]
    fn clipping_rescales_joint_norm() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(&[2], vec![0.0, 0.0]).unwrap().trainable()).unwrap();
        s.insert("b", Tensor::scalar(0.0).trainable()).unwrap();
        s.get_mut("a").unwrap().accumulate_grad(&[3.0, 0.0]).unwrap();
        s.get_mut("b").unwrap().accumulate_grad(&[4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut s, 10.0), 5.0);
        assert_eq!(s.expect("a").grad().unwrap(), &[3.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        let a = s.expect("a").grad().unwrap();
        assert!((a[0] - 0.6).abs() < 1e-15);
        assert!((s.expect("b").grad().unwrap()[0] - 0.8).abs() < 1e-15);
    }
}

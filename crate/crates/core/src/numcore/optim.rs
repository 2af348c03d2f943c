use super::params::ParameterSet;
use crate::error::{Error, Result};

/// `params - lr * grads`, entry by entry.
pub fn sgd_step(params: &ParameterSet, grads: &ParameterSet, lr: f64) -> Result<ParameterSet> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    params.check_compatible(grads)?;
    let mut out = params.clone();
    for (name, g) in grads.iter() {
        let p = out.get_mut(name).expect("checked compatible");
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(out)
}

/// Stateful SGD with optional heavy-ball momentum.
///
/// `step` updates only the entries named in the gradient set, which lets a
/// training phase touch a subset of a larger parameter set.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParameterSet,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: ParameterSet::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Incompatible(format!("no parameter named {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Incompatible(format!(
                    "{name}: {:?} vs {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if self.momentum == 0.0 {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= self.lr * gv;
                }
                continue;
            }
            if self.velocity.get(name).is_none() {
                self.velocity.insert(name, super::Tensor::zeros(g.shape()))?;
            }
            let v = self.velocity.get_mut(name).expect("inserted above");
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

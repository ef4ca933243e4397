use super::model::Trainable;
use crate::error::{config, invalid, Error, Result};

/// SGD with heavy-ball momentum: `buf ← μ·buf + g`, `p ← p − η·buf`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Sgd> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            buffers: Vec::new(),
        })
    }

    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid(format!(
                "{} parameter groups but {} gradient groups",
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient; lower the learning rate".into()));
        }
        if self.buffers.is_empty() {
            self.buffers = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            if p.len() != g.len() || buf.len() != g.len() {
                return Err(invalid("parameter/gradient group size mismatch"));
            }
            for ((pi, gi), bi) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
                *bi = self.momentum * *bi + gi;
                *pi -= self.lr * *bi;
                if !pi.is_finite() {
                    return Err(Error::Numerical("parameter overflowed during an SGD step".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn sgd_step<T: Trainable + ?Sized>(net: &mut T, opt: &mut Sgd, grads: &[Vec<f64>]) -> Result<()> {
    opt.step(net.trainable_params_mut(), grads)
}

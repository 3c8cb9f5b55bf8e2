use super::{Encoder, ModelError};
use crate::diffcore::DenseArray;

/// Heavy-ball SGD: `v <- mu v + g + wd w`, `w <- w - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<DenseArray>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self, ModelError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(ModelError::Config(format!(
                "learning rate {lr} must be > 0"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(ModelError::Config(format!(
                "momentum {momentum} not in [0, 1)"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(ModelError::Config(format!(
                "weight decay {weight_decay} must be >= 0"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update. `grads` must follow the encoder's parameter order.
    pub fn step(&mut self, enc: &mut Encoder, grads: &[DenseArray]) -> Result<(), ModelError> {
        let params = enc.params_mut();
        if grads.len() != params.len() {
            return Err(ModelError::Structure(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| DenseArray::zeros(p.value.shape()))
                .collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if g.shape() != p.value.shape() {
                return Err(ModelError::Structure(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let w = p.value.data_mut();
            for ((wi, &gi), vi) in w.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    #[test]
    fn heavy_ball_matches_hand_iteration() {
        let cfg = EncoderConfig {
            input_dim: 2,
            hidden: 2,
            embed_dim: 2,
            proj_dim: 2,
        };
        let mut enc = Encoder::new(cfg, 0).unwrap();
        let w0 = enc.params()[0].value.data()[0];
        let grads: Vec<DenseArray> = enc
            .params()
            .iter()
            .map(|p| DenseArray::filled(p.value.shape(), 1.0))
            .collect();
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        opt.step(&mut enc, &grads).unwrap();
        opt.step(&mut enc, &grads).unwrap();
        // v1 = 1, v2 = 1.9: w = w0 - 0.1 * 2.9
        let w2 = enc.params()[0].value.data()[0];
        assert!((w2 - (w0 - 0.29)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_gradients() {
        assert!(Sgd::new(0.0, 0.9, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0, 0.0).is_err());
        let cfg = EncoderConfig {
            input_dim: 2,
            hidden: 2,
            embed_dim: 2,
            proj_dim: 2,
        };
        let mut enc = Encoder::new(cfg, 0).unwrap();
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        assert!(opt.step(&mut enc, &[]).is_err());
    }
}

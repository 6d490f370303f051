//! AdamW with decoupled weight decay, and a cosine learning-rate schedule.

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Per-parameter switch for weight decay.
    pub decay: Vec<bool>,
}

/// Matrices decay; biases, norms, embeddings and prototypes do not.
pub fn decays(name: &str, t: &Tensor) -> bool {
    t.rank() == 2
        && t.shape()[0] > 1
        && !name.starts_with("proto.")
        && !name.ends_with(".pos")
        && !name.contains(".ln")
        && !name.contains(".norm")
}

impl AdamW {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: params.iter().map(|(_, t)| zeros(t)).collect(),
            v: params.iter().map(|(_, t)| zeros(t)).collect(),
            decay: params.iter().map(|(n, t)| decays(n, t)).collect(),
        }
    }

    /// One update with gradients parallel to `params`.
    ///
    /// `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let decay = if self.decay[i] { 1.0 - lr * self.weight_decay } else { 1.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(i).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] = p[k] * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// `base·(1 + cos(π·step/total))/2`, held at 0 past `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 || step >= total {
        return if total == 0 { base } else { 0.0 };
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert_eq!(cosine_lr(0.1, 100, 100), 0.0);
        assert!(cosine_lr(0.1, 99, 100) > 0.0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = ParamSet::new();
        p.push("vit.w", Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.05);
        opt.update(&mut p, &[vec![0.3, -0.1, 2.0, 5.0]], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = ParamSet::new();
        p.push("proto.local", Tensor::from_rows(&[vec![1.0, 1.0]]));
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-12, 0.05);
        opt.update(&mut p, &[vec![2.0, -0.5]], 0.01);
        let d = p.get(0).data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn decay_selection() {
        assert!(decays("vit.layer0.attn.wq", &Tensor::zeros(&[4, 4])));
        assert!(!decays("vit.layer0.attn.bq", &Tensor::zeros(&[1, 4])));
        assert!(!decays("vit.pos", &Tensor::zeros(&[17, 4])));
        assert!(!decays("proto.local", &Tensor::zeros(&[12, 4])));
    }
}

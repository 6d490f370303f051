//! Global and local prototype branches and logit fusion.
//!
//! Prototype vectors are trainable and live in the model's [`ParamSet`];
//! the class assignment and the frozen FC heads live in [`PrototypeBank`].

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{uniform01, ParamSet};
use crate::rollout::FPMask;
use crate::tensor::Tensor;
use rand::Rng;

/// `ε` in the log-distance similarity.
pub const SIMILARITY_EPS: f64 = 1e-4;

/// `ln((‖a−b‖² + 1) / (‖a−b‖² + ε))`.
pub fn similarity(token: &[f64], prototype: &[f64]) -> f64 {
    assert_eq!(token.len(), prototype.len(), "similarity of unequal lengths");
    let d: f64 = token.iter().zip(prototype).map(|(a, b)| (a - b) * (a - b)).sum();
    ((d + 1.0) / (d + SIMILARITY_EPS)).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub n_classes: usize,
    pub global_per_class: usize,
    pub local_per_class: usize,
    /// Owning class of each global prototype.
    pub global_class: Vec<u32>,
    /// Owning class of each local prototype.
    pub local_class: Vec<u32>,
    /// Frozen `m_g×C` head.
    pub fc_global: Tensor,
    /// Frozen `m_l×C` head.
    pub fc_local: Tensor,
    /// Index of the `m_g×d` global prototypes in the parameter set.
    pub global_idx: usize,
    /// Index of the `m_l×d` local prototypes in the parameter set.
    pub local_idx: usize,
}

fn class_map(n_classes: usize, per_class: usize) -> Vec<u32> {
    (0..n_classes * per_class).map(|i| (i / per_class) as u32).collect()
}

/// 1.0 from each prototype to its owning class, 0.0 elsewhere.
pub fn own_class_head(classes: &[u32], n_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len(), n_classes]);
    for (i, &c) in classes.iter().enumerate() {
        t.data_mut()[i * n_classes + c as usize] = 1.0;
    }
    t
}

impl PrototypeBank {
    /// Registers prototypes drawn uniformly from `[0,1)^d` as `proto.global`
    /// and `proto.local`.
    pub fn init<R: Rng>(
        n_classes: usize,
        global_per_class: usize,
        local_per_class: usize,
        dim: usize,
        rng: &mut R,
        params: &mut ParamSet,
    ) -> Result<Self> {
        if global_per_class == 0 || local_per_class == 0 {
            return Err(Error::Param("need at least one prototype per class in each branch".into()));
        }
        let global_class = class_map(n_classes, global_per_class);
        let local_class = class_map(n_classes, local_per_class);
        let global_idx = params.push("proto.global", uniform01(rng, &[global_class.len(), dim]));
        let local_idx = params.push("proto.local", uniform01(rng, &[local_class.len(), dim]));
        Ok(PrototypeBank {
            n_classes,
            global_per_class,
            local_per_class,
            fc_global: own_class_head(&global_class, n_classes),
            fc_local: own_class_head(&local_class, n_classes),
            global_class,
            local_class,
            global_idx,
            local_idx,
        })
    }

    pub fn m_global(&self) -> usize {
        self.global_class.len()
    }

    pub fn m_local(&self) -> usize {
        self.local_class.len()
    }

    /// Local prototype indices owned by `class`.
    pub fn local_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.m_local())
            .filter(|&i| self.local_class[i] as usize == class)
            .collect()
    }

    pub fn global_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.m_global())
            .filter(|&i| self.global_class[i] as usize == class)
            .collect()
    }
}

/// Local branch results for one image.
#[derive(Clone, Debug)]
pub struct LocalBranch {
    /// Full `(n−1)×m_l` similarity map, dropped positions included.
    pub similarity: Var,
    /// `1×m_l` max over preserved positions.
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct GlobalBranch {
    /// `1×m_g` similarities of the class token.
    pub scores: Var,
    pub logits: Var,
}

/// Similarity of every image token to every local prototype, pooled over
/// the preserved tokens only, then the frozen local head.
pub fn local_branch(tape: &mut Tape, features: Var, mask: &FPMask, prototypes: Var, fc_local: Var) -> Result<LocalBranch> {
    let (n, _) = tape.value(features).dims2()?;
    if mask.len() != n {
        return Err(Error::Contract(format!(
            "mask has {} entries for {n} feature tokens",
            mask.len()
        )));
    }
    if mask.k() == 0 {
        return Err(Error::Contract("local branch with an all-zero mask".into()));
    }
    let dist = tape.sq_dist(features, prototypes)?;
    let similarity = tape.log_similarity(dist, SIMILARITY_EPS)?;
    let pooled = tape.masked_max_cols(similarity, mask.keep())?;
    let logits = tape.matmul(pooled, fc_local)?;
    Ok(LocalBranch {
        similarity,
        pooled,
        logits,
    })
}

/// Similarity of the class token to each global prototype, then the
/// frozen global head. A single token needs no pooling.
pub fn global_branch(tape: &mut Tape, class_token: Var, prototypes: Var, fc_global: Var) -> Result<GlobalBranch> {
    let dist = tape.sq_dist(class_token, prototypes)?;
    let scores = tape.log_similarity(dist, SIMILARITY_EPS)?;
    let logits = tape.matmul(scores, fc_global)?;
    Ok(GlobalBranch { scores, logits })
}

/// `λ_g z_g + λ_l z_l` on the tape.
pub fn fuse(tape: &mut Tape, z_global: Var, z_local: Var, lambda_g: f64, lambda_l: f64) -> Result<Var> {
    if tape.shape(z_global) != tape.shape(z_local) {
        return Err(shape_err("fuse", tape.shape(z_global), tape.shape(z_local)));
    }
    let g = tape.scale(z_global, lambda_g);
    let l = tape.scale(z_local, lambda_l);
    tape.add(g, l)
}

/// `λ_g z_g + λ_l z_l` on plain values.
pub fn fuse_values(z_global: &[f64], z_local: &[f64], lambda_g: f64, lambda_l: f64) -> Result<Vec<f64>> {
    if z_global.len() != z_local.len() {
        return Err(shape_err("fuse", &[z_global.len()], &[z_local.len()]));
    }
    Ok(z_global
        .iter()
        .zip(z_local)
        .map(|(g, l)| lambda_g * g + lambda_l * l)
        .collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

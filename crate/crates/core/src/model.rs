//! Full model: encoder, prototype branches, fused logits.

use crate::autodiff::{Tape, Var};
use crate::concentration::{fit_on_tape, grid_positions, total_loss, FitVars, LossTerms, PPCConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::prototype::{fuse, global_branch, local_branch, GlobalBranch, LocalBranch, PrototypeBank};
use crate::tensor::Tensor;
use crate::vit::{forward as encode, EncoderOutput, MaskPolicy, ViTConfig, VitIndex};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub global_per_class: usize,
    pub local_per_class: usize,
    pub lambda_g: f64,
    pub lambda_l: f64,
    /// Preserved image tokens in the final layer.
    pub top_k: usize,
    pub rollout_renormalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vit: ViTConfig::default(),
            global_per_class: 2,
            local_per_class: 3,
            lambda_g: 0.5,
            lambda_l: 0.5,
            top_k: 9,
            rollout_renormalize: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let n_img = self.vit.n_tokens() - 1;
        if self.top_k < 1 || self.top_k > n_img {
            return Err(Error::Param(format!("top_k = {} outside [1, {n_img}]", self.top_k)));
        }
        if self.global_per_class == 0 || self.local_per_class == 0 {
            return Err(Error::Param("prototype counts per class must be positive".into()));
        }
        if !(self.lambda_g >= 0.0 && self.lambda_l >= 0.0) {
            return Err(Error::Param("branch weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn policy(&self) -> MaskPolicy {
        MaskPolicy::TopK {
            k: self.top_k,
            renormalize: self.rollout_renormalize,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub vit: VitIndex,
    pub bank: PrototypeBank,
}

/// Which logits to read a prediction from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Global,
    Local,
    Total,
}

impl std::str::FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Branch::Global),
            "local" => Ok(Branch::Local),
            "total" => Ok(Branch::Total),
            _ => Err(Error::Param(format!("unknown branch `{s}` (global|local|total)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub encoder: EncoderOutput,
    pub global: GlobalBranch,
    pub local: LocalBranch,
    pub logits: Var,
    /// Bound parameters, parallel to the model's [`ParamSet`].
    pub params: Vec<Var>,
}

impl ModelOutput {
    pub fn branch_logits(&self, branch: Branch) -> Var {
        match branch {
            Branch::Global => self.global.logits,
            Branch::Local => self.local.logits,
            Branch::Total => self.logits,
        }
    }
}

impl Model {
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let vit = VitIndex::init(&cfg.vit, rng, &mut params)?;
        let bank = PrototypeBank::init(
            cfg.vit.n_classes,
            cfg.global_per_class,
            cfg.local_per_class,
            cfg.vit.embed_dim,
            rng,
            &mut params,
        )?;
        Ok(Model { cfg, params, vit, bank })
    }

    /// Forward pass with the configured top-K policy.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor, trainable: bool) -> Result<ModelOutput> {
        self.forward_with(tape, image, &self.cfg.policy(), trainable)
    }

    pub fn forward_with(&self, tape: &mut Tape, image: &Tensor, policy: &MaskPolicy, trainable: bool) -> Result<ModelOutput> {
        let p = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        self.forward_bound(tape, image, policy, p)
    }

    /// Forward pass over an explicit binding `p`, parallel to the
    /// [`ParamSet`].
    pub fn forward_bound(&self, tape: &mut Tape, image: &Tensor, policy: &MaskPolicy, p: Vec<Var>) -> Result<ModelOutput> {
        if p.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound parameters for {} slots",
                p.len(),
                self.params.len()
            )));
        }
        let encoder = encode(tape, image, &self.cfg.vit, &self.vit, &p, policy)?;
        let fc_g = tape.constant(self.bank.fc_global.clone());
        let fc_l = tape.constant(self.bank.fc_local.clone());
        let global = global_branch(tape, encoder.class_token, p[self.bank.global_idx], fc_g)?;
        let local = local_branch(tape, encoder.feature_tokens, &encoder.mask, p[self.bank.local_idx], fc_l)?;
        let logits = fuse(tape, global.logits, local.logits, self.cfg.lambda_g, self.cfg.lambda_l)?;
        Ok(ModelOutput {
            encoder,
            global,
            local,
            logits,
            params: p,
        })
    }

    /// Gaussian fits of the label class's local prototypes.
    pub fn own_class_fits(
        &self,
        tape: &mut Tape,
        out: &ModelOutput,
        label: usize,
        guard: f64,
    ) -> Result<Vec<FitVars>> {
        let positions = grid_positions(self.cfg.vit.grid());
        self.bank
            .local_of_class(label)
            .into_iter()
            .map(|i| {
                let col = tape.slice_cols(out.local.similarity, i, 1)?;
                fit_on_tape(tape, col, out.encoder.mask.keep(), &positions, guard)
            })
            .collect()
    }

    /// Forward pass plus the full per-sample loss.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        label: usize,
        ppc: &PPCConfig,
        trainable: bool,
    ) -> Result<(ModelOutput, Vec<FitVars>, LossTerms)> {
        if label >= self.cfg.vit.n_classes {
            return Err(Error::Param(format!(
                "label {label} out of range for {} classes",
                self.cfg.vit.n_classes
            )));
        }
        let out = self.forward(tape, image, trainable)?;
        let fits = self.own_class_fits(tape, &out, label, ppc.sigma_guard)?;
        let terms = total_loss(tape, out.logits, label, &fits, ppc)?;
        Ok((out, fits, terms))
    }
}

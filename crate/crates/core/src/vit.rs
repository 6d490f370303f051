//! Small pre-norm vision transformer with attention recording and a
//! foreground-masked final layer.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamSet};
use crate::rollout::{build_fp_mask, class_token_scores, rollout, FPMask};
use crate::tensor::Tensor;
use rand::Rng;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub n_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            in_channels: 3,
            depth: 3,
            heads: 2,
            embed_dim: 32,
            mlp_ratio: 4.0,
            n_classes: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.in_channels == 0 || self.n_classes < 2 {
            return bad("need at least one channel and two classes".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length including the class token.
    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// Parameter indices of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerIndex {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Parameter layout of the encoder inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct VitIndex {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls: usize,
    pub pos: usize,
    pub layers: Vec<LayerIndex>,
    pub norm_g: usize,
    pub norm_b: usize,
}

impl VitIndex {
    /// Registers freshly initialized encoder parameters under `vit.*` names.
    pub fn init<R: Rng>(cfg: &ViTConfig, rng: &mut R, params: &mut ParamSet) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hid = cfg.mlp_hidden();
        let mut w = |params: &mut ParamSet, name: String, shape: &[usize]| {
            params.push(name, trunc_normal(rng, shape, INIT_STD))
        };
        let patch_w = w(params, "vit.patch.w".into(), &[cfg.patch_dim(), d]);
        let patch_b = params.push("vit.patch.b", Tensor::zeros(&[1, d]));
        let cls = w(params, "vit.cls".into(), &[1, d]);
        let pos = w(params, "vit.pos".into(), &[cfg.n_tokens(), d]);
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = |s: &str| format!("vit.layer{l}.{s}");
            let ln1_g = params.push(p("ln1.g"), Tensor::full(&[1, d], 1.0));
            let ln1_b = params.push(p("ln1.b"), Tensor::zeros(&[1, d]));
            let wq = w(params, p("attn.wq"), &[d, d]);
            let bq = params.push(p("attn.bq"), Tensor::zeros(&[1, d]));
            let wk = w(params, p("attn.wk"), &[d, d]);
            let bk = params.push(p("attn.bk"), Tensor::zeros(&[1, d]));
            let wv = w(params, p("attn.wv"), &[d, d]);
            let bv = params.push(p("attn.bv"), Tensor::zeros(&[1, d]));
            let wo = w(params, p("attn.wo"), &[d, d]);
            let bo = params.push(p("attn.bo"), Tensor::zeros(&[1, d]));
            let ln2_g = params.push(p("ln2.g"), Tensor::full(&[1, d], 1.0));
            let ln2_b = params.push(p("ln2.b"), Tensor::zeros(&[1, d]));
            let w1 = w(params, p("mlp.w1"), &[d, hid]);
            let b1 = params.push(p("mlp.b1"), Tensor::zeros(&[1, hid]));
            let w2 = w(params, p("mlp.w2"), &[hid, d]);
            let b2 = params.push(p("mlp.b2"), Tensor::zeros(&[1, d]));
            layers.push(LayerIndex {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let norm_g = params.push("vit.norm.g", Tensor::full(&[1, d], 1.0));
        let norm_b = params.push("vit.norm.b", Tensor::zeros(&[1, d]));
        Ok(VitIndex {
            patch_w,
            patch_b,
            cls,
            pos,
            layers,
            norm_g,
            norm_b,
        })
    }
}

/// Head-averaged attention matrices, one per layer, first layer first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Tensor>,
}

/// Encoder result with the class token split from the image tokens.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Full normalized sequence `[t_c; X_f]`.
    pub tokens: Var,
    pub class_token: Var,
    pub feature_tokens: Var,
    pub attention: AttentionRecord,
    /// Mask applied in the final layer (all-ones when unmasked).
    pub mask: FPMask,
}

/// How the final layer is restricted.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskPolicy {
    /// Every layer unmasked.
    Unmasked,
    /// Keep the top-K image tokens by rollout score through layer L−1.
    TopK { k: usize, renormalize: bool },
    /// Apply the given keep vector over image tokens.
    Fixed(Vec<bool>),
}

/// Flattens an `H×W×C` image into `(g²)×(p·p·C)` patch rows, raster order,
/// each patch flattened as (row, col, channel).
pub fn extract_patches(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let (s, c, p) = (cfg.image_size, cfg.in_channels, cfg.patch_size);
    if image.shape() != [s, s, c] {
        return Err(Error::Shape {
            op: "patch_embed",
            lhs: image.shape().to_vec(),
            rhs: vec![s, s, c],
        });
    }
    let g = cfg.grid();
    let src = image.data();
    let mut data = Vec::with_capacity(g * g * cfg.patch_dim());
    for pr in 0..g {
        for pc in 0..g {
            for y in 0..p {
                let row = pr * p + y;
                let start = (row * s + pc * p) * c;
                data.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[g * g, cfg.patch_dim()], data)
}

/// Linear patch projection, prepended class token, learned positions.
pub fn patch_embed(tape: &mut Tape, image: &Tensor, cfg: &ViTConfig, idx: &VitIndex, p: &[Var]) -> Result<Var> {
    let patches = extract_patches(image, cfg)?;
    let patches = tape.constant(patches);
    let proj = tape.matmul(patches, p[idx.patch_w])?;
    let proj = tape.add_row(proj, p[idx.patch_b])?;
    let seq = tape.concat_rows(&[p[idx.cls], proj])?;
    tape.add(seq, p[idx.pos])
}

/// Multi-head self-attention. With `mask` (over image tokens), dropped
/// columns get zero attention and rows renormalize over the survivors; the
/// class-token column is always kept. Returns the output and the
/// head-averaged attention matrix.
pub fn mhsa(
    tape: &mut Tape,
    x: Var,
    cfg: &ViTConfig,
    layer: &LayerIndex,
    p: &[Var],
    mask: Option<&FPMask>,
) -> Result<(Var, Tensor)> {
    let (n, _) = tape.value(x).dims2()?;
    let keep = match mask {
        Some(m) if m.len() != n - 1 => {
            return Err(Error::Contract(format!(
                "mask has {} entries but the sequence has {} image tokens",
                m.len(),
                n - 1
            )))
        }
        Some(m) => Some(m.sequence_keep()),
        None => None,
    };
    let q = tape.matmul(x, p[layer.wq])?;
    let q = tape.add_row(q, p[layer.bq])?;
    let k = tape.matmul(x, p[layer.wk])?;
    let k = tape.add_row(k, p[layer.bk])?;
    let v = tape.matmul(x, p[layer.wv])?;
    let v = tape.add_row(v, p[layer.bv])?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut avg = vec![0.0; n * n];
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.masked_softmax_rows(logits, keep.as_deref())?;
        for (a, v) in avg.iter_mut().zip(tape.data(attn)) {
            *a += v;
        }
        heads.push(tape.matmul(attn, vh)?);
    }
    for a in &mut avg {
        *a /= cfg.heads as f64;
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, p[layer.wo])?;
    let out = tape.add_row(out, p[layer.bo])?;
    Ok((out, Tensor::new(&[n, n], avg)?))
}

/// Pre-norm encoder block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    cfg: &ViTConfig,
    layer: &LayerIndex,
    p: &[Var],
    mask: Option<&FPMask>,
) -> Result<(Var, Tensor)> {
    let h = tape.layer_norm_rows(x, p[layer.ln1_g], p[layer.ln1_b])?;
    let (attn_out, attn) = mhsa(tape, h, cfg, layer, p, mask)?;
    let x1 = tape.add(x, attn_out)?;
    let h2 = tape.layer_norm_rows(x1, p[layer.ln2_g], p[layer.ln2_b])?;
    let m = tape.matmul(h2, p[layer.w1])?;
    let m = tape.add_row(m, p[layer.b1])?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, p[layer.w2])?;
    let m = tape.add_row(m, p[layer.b2])?;
    Ok((tape.add(x1, m)?, attn))
}

/// Runs layers 1..L−1 unmasked, builds the FP mask from their rollout, runs
/// layer L under that mask, and splits the normalized output.
pub fn forward(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &ViTConfig,
    idx: &VitIndex,
    p: &[Var],
    policy: &MaskPolicy,
) -> Result<EncoderOutput> {
    let depth = idx.layers.len();
    let n = cfg.n_tokens();
    let mut x = patch_embed(tape, image, cfg, idx, p)?;
    let mut record = AttentionRecord::default();
    for layer in &idx.layers[..depth - 1] {
        let (y, a) = encoder_layer(tape, x, cfg, layer, p, None)?;
        x = y;
        record.layers.push(a);
    }
    let renormalize = match policy {
        MaskPolicy::TopK { renormalize, .. } => *renormalize,
        _ => true,
    };
    let scores = if record.layers.is_empty() {
        vec![0.0; n - 1]
    } else {
        class_token_scores(&rollout(&record.layers, renormalize)?)
    };
    let mask = match policy {
        MaskPolicy::Unmasked => FPMask::all(scores),
        MaskPolicy::TopK { k, .. } => build_fp_mask(&scores, *k)?,
        MaskPolicy::Fixed(keep) => FPMask::from_keep(keep.clone(), scores)?,
    };
    let applied = (*policy != MaskPolicy::Unmasked).then_some(&mask);
    let (y, a) = encoder_layer(tape, x, cfg, &idx.layers[depth - 1], p, applied)?;
    record.layers.push(a);
    let tokens = tape.layer_norm_rows(y, p[idx.norm_g], p[idx.norm_b])?;
    let class_token = tape.slice_rows(tokens, 0, 1)?;
    let feature_tokens = tape.slice_rows(tokens, 1, n - 1)?;
    Ok(EncoderOutput {
        tokens,
        class_token,
        feature_tokens,
        attention: record,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ViTConfig, seed: u64) -> (ParamSet, VitIndex) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let idx = VitIndex::init(cfg, &mut rng, &mut params).unwrap();
        (params, idx)
    }

    fn image(cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::params::uniform01(&mut rng, &[cfg.image_size, cfg.image_size, cfg.in_channels])
    }

    #[test]
    fn token_count() {
        let cfg = ViTConfig::default();
        assert_eq!(cfg.n_tokens(), 17);
        let (params, idx) = setup(&cfg, 1);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = patch_embed(&mut tape, &image(&cfg, 2), &cfg, &idx, &p).unwrap();
        assert_eq!(tape.shape(x), &[17, 32]);
    }

    #[test]
    fn zero_image_and_projection_gives_positions() {
        let cfg = ViTConfig::default();
        let (mut params, idx) = setup(&cfg, 1);
        params.get_mut(idx.patch_w).data_mut().fill(0.0);
        params.get_mut(idx.cls).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let img = Tensor::zeros(&[32, 32, 3]);
        let x = patch_embed(&mut tape, &img, &cfg, &idx, &p).unwrap();
        assert_eq!(tape.data(x), params.get(idx.pos).data());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let cfg = ViTConfig::default();
        let (params, idx) = setup(&cfg, 1);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        assert!(matches!(
            patch_embed(&mut tape, &Tensor::zeros(&[16, 16, 3]), &cfg, &idx, &p),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ViTConfig::default();
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::default();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mask_of_wrong_length_is_contract_error() {
        let cfg = ViTConfig::default();
        let (params, idx) = setup(&cfg, 1);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = patch_embed(&mut tape, &image(&cfg, 2), &cfg, &idx, &p).unwrap();
        let m = FPMask::all(vec![0.0; 3]);
        assert!(matches!(
            mhsa(&mut tape, x, &cfg, &idx.layers[0], &p, Some(&m)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = ViTConfig::default();
        let (params, idx) = setup(&cfg, 3);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let out = forward(&mut tape, &image(&cfg, 4), &cfg, &idx, &p, &MaskPolicy::TopK { k: 9, renormalize: true })
            .unwrap();
        assert_eq!(out.attention.layers.len(), 3);
        for (l, a) in out.attention.layers.iter().enumerate() {
            for i in 0..17 {
                let s: f64 = a.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                if l == 2 {
                    for j in 0..16 {
                        if !out.mask.keep()[j] {
                            assert_eq!(a.at(i, j + 1), 0.0);
                        }
                    }
                }
            }
        }
        assert_eq!(out.mask.k(), 9);
    }
}

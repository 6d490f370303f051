//! Mini-batch training and evaluation.
//!
//! Per-sample gradients are computed in parallel, then summed in sample
//! order, so results do not depend on the thread count.

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::concentration::PPCConfig;
use crate::config::TrainConfig;
use crate::data::{generate, Sample};
use crate::error::{Error, Result};
use crate::model::{Branch, Model};
use crate::optim::{cosine_lr, AdamW};
use crate::prototype::argmax;
use crate::visualize::{concentration_ratio, upsample_bilinear};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Seed of the training split derived from the run seed.
pub fn train_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

/// Seed of the held-out split; never equal to the training seed.
pub fn test_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(2)
}

pub fn train_set(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let v = &cfg.model.vit;
    generate(train_seed(cfg.seed), cfg.train_samples, v.n_classes, v.image_size)
}

pub fn test_set(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let v = &cfg.model.vit;
    generate(test_seed(cfg.seed), cfg.test_samples, v.n_classes, v.image_size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss: f64,
    pub ce: f64,
    pub ppc_mu: f64,
    pub ppc_sigma: f64,
    /// Training accuracy of the fused logits, measured during the epoch.
    pub acc: f64,
    /// Mean trace of the own-class covariances that were fitted.
    pub tr_sigma: f64,
}

impl EpochMetrics {
    /// The metric-log line.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} acc={:.6} tr_sigma={:.6}",
            self.epoch, self.loss, self.acc, self.tr_sigma
        )
    }

    /// Log line plus the individual loss terms.
    pub fn detail_line(&self) -> String {
        format!(
            "{} ce={:.6} ppc_mu={:.6} ppc_sigma={:.6}",
            self.log_line(),
            self.ce,
            self.ppc_mu,
            self.ppc_sigma
        )
    }
}

struct SampleGrad {
    grads: Vec<Vec<f64>>,
    total: f64,
    ce: f64,
    ppc_mu: f64,
    ppc_sigma: f64,
    correct: bool,
    traces: Vec<f64>,
}

fn finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            term: term.to_string(),
            value,
        })
    }
}

fn sample_grad(model: &Model, s: &Sample, ppc: &PPCConfig) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let (out, fits, terms) = model.sample_loss(&mut tape, &s.image, s.label, ppc, true)?;
    let ce = finite("ce", tape.value(terms.ce).item())?;
    let ppc_mu = finite("ppc_mu", tape.value(terms.ppc_mu).item())?;
    let ppc_sigma = finite("ppc_sigma", tape.value(terms.ppc_sigma).item())?;
    let total = finite("total", tape.value(terms.total).item())?;
    let correct = argmax(tape.data(out.logits)) == s.label;
    let traces = fits
        .iter()
        .filter_map(|f| f.sigma.map(|v| tape.data(v)[0] + tape.data(v)[3]))
        .collect();
    tape.backward(terms.total)?;
    let grads = out
        .params
        .iter()
        .map(|&p| tape.grad(p).map(<[f64]>::to_vec).ok_or_else(|| Error::Contract("parameter lost its gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleGrad {
        grads,
        total,
        ce,
        ppc_mu,
        ppc_sigma,
        correct,
        traces,
    })
}

/// Owns the model, optimizer and shuffle RNG of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    data: Vec<Sample>,
}

impl Trainer {
    /// Fresh run: the model is initialized from `config.seed`, and the same
    /// RNG stream then drives shuffling.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(config.model.clone(), &mut rng)?;
        let optimizer = AdamW::new(&model.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
        let data = train_set(&config)?;
        Ok(Trainer {
            config,
            model,
            optimizer,
            epoch: 0,
            rng,
            data,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let data = train_set(&ck.config)?;
        Ok(Trainer {
            config: ck.config,
            model: ck.model,
            optimizer: ck.optimizer,
            epoch: ck.epoch,
            rng: ck.rng,
            data,
        })
    }

    /// Replaces the generated training set.
    pub fn with_data(mut self, data: Vec<Sample>) -> Self {
        self.data = data;
        self
    }

    pub fn data(&self) -> &[Sample] {
        &self.data
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
        }
    }

    /// Loss weights for the current epoch: zero during warm-up.
    pub fn effective_ppc(&self) -> PPCConfig {
        if (self.epoch as usize) < self.config.ppc_warmup_epochs {
            PPCConfig {
                lambda_mu: 0.0,
                lambda_sigma: 0.0,
                ..self.config.ppc
            }
        } else {
            self.config.ppc
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    /// One optimizer step on `batch`; returns per-sample results in order.
    fn step(&mut self, batch: &[usize]) -> Result<Vec<SampleGrad>> {
        let model = &self.model;
        let ppc = &self.effective_ppc();
        let data = &self.data;
        let results = batch
            .par_iter()
            .map(|&i| sample_grad(model, &data[i], ppc))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = results[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        let lr = cosine_lr(self.config.base_lr, self.optimizer.step, self.total_steps());
        self.optimizer.update(&mut self.model.params, &grads, lr);
        Ok(results)
    }

    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut ce, mut mu, mut sig) = (0.0, 0.0, 0.0, 0.0);
        let (mut correct, mut traces, mut n_traces) = (0usize, 0.0, 0usize);
        for batch in order.chunks(self.config.batch_size) {
            for r in self.step(batch)? {
                total += r.total;
                ce += r.ce;
                mu += r.ppc_mu;
                sig += r.ppc_sigma;
                correct += r.correct as usize;
                traces += r.traces.iter().sum::<f64>();
                n_traces += r.traces.len();
            }
        }
        self.epoch += 1;
        let n = self.data.len() as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: total / n,
            ce: ce / n,
            ppc_mu: mu / n,
            ppc_sigma: sig / n,
            acc: correct as f64 / n,
            tr_sigma: if n_traces > 0 { traces / n_traces as f64 } else { 0.0 },
        })
    }

    /// Trains until `config.epochs`, calling `on_epoch` after each epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<()>) -> Result<Vec<EpochMetrics>> {
        let mut all = Vec::new();
        while (self.epoch as usize) < self.config.epochs {
            let m = self.train_epoch()?;
            on_epoch(self, &m)?;
            all.push(m);
        }
        Ok(all)
    }
}

/// Per-prototype statistics over the samples of its own class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeStats {
    pub prototype: usize,
    pub class: usize,
    pub mean_trace: f64,
    /// Samples whose fit had a covariance.
    pub fitted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean `tr Σ̂` over own-class prototypes with a covariance.
    pub tr_sigma: f64,
    /// Mean over samples of the smallest squared distance between
    /// own-class centers.
    pub min_center_dist: f64,
    /// Mean share of top-5% similarity inside the foreground; `None`
    /// without masks.
    pub concentration: Option<f64>,
    /// Same ratio with dropped tokens zeroed before upsampling.
    pub concentration_masked: Option<f64>,
    pub prototypes: Vec<PrototypeStats>,
}

struct SampleEval {
    correct: bool,
    /// `(prototype, trace)` for fitted own-class prototypes.
    traces: Vec<(usize, f64)>,
    min_dist: Option<f64>,
    ratios: Vec<f64>,
    ratios_masked: Vec<f64>,
}

fn eval_sample(model: &Model, s: &Sample, branch: Branch, guard: f64) -> Result<SampleEval> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &s.image, false)?;
    let correct = argmax(tape.data(out.branch_logits(branch))) == s.label;
    let label = s.label.min(model.cfg.vit.n_classes - 1);
    let own = model.bank.local_of_class(label);
    let fits = model.own_class_fits(&mut tape, &out, label, guard)?;
    let traces = own
        .iter()
        .zip(&fits)
        .filter_map(|(&p, f)| f.sigma.map(|v| (p, tape.data(v)[0] + tape.data(v)[3])))
        .collect();
    let centers: Vec<[f64; 2]> = fits.iter().map(|f| [tape.data(f.mu)[0], tape.data(f.mu)[1]]).collect();
    let mut min_dist: Option<f64> = None;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let d = (centers[i][0] - centers[j][0]).powi(2) + (centers[i][1] - centers[j][1]).powi(2);
            min_dist = Some(min_dist.map_or(d, |m| m.min(d)));
        }
    }
    let mut ratios = Vec::new();
    let mut ratios_masked = Vec::new();
    if let Some(fg) = &s.fg_mask {
        let g = model.cfg.vit.grid();
        let m = model.bank.m_local();
        let (h, w) = s.size();
        let sim = tape.data(out.local.similarity);
        for &p in &own {
            let map: Vec<f64> = sim.iter().skip(p).step_by(m).copied().collect();
            let up = upsample_bilinear(&map, g, g, h, w)?;
            ratios.push(concentration_ratio(&up, fg));
            let masked: Vec<f64> = map.iter().zip(out.encoder.mask.keep()).map(|(v, &k)| if k { *v } else { 0.0 }).collect();
            ratios_masked.push(concentration_ratio(&upsample_bilinear(&masked, g, g, h, w)?, fg));
        }
    }
    Ok(SampleEval {
        correct,
        traces,
        min_dist,
        ratios,
        ratios_masked,
    })
}

/// Accuracy of `branch` plus concentration statistics of the label class's
/// local prototypes. Covariances are counted only where `Σγs − 1` exceeds
/// `guard`, matching the loss.
pub fn evaluate(model: &Model, data: &[Sample], branch: Branch, guard: f64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Param("cannot evaluate an empty dataset".into()));
    }
    let per = data
        .par_iter()
        .map(|s| eval_sample(model, s, branch, guard))
        .collect::<Result<Vec<_>>>()?;
    let bank = &model.bank;
    let mut protos: Vec<PrototypeStats> = (0..bank.m_local())
        .map(|p| PrototypeStats {
            prototype: p,
            class: bank.local_class[p] as usize,
            ..Default::default()
        })
        .collect();
    let (mut correct, mut tr, mut n_tr) = (0usize, 0.0, 0usize);
    let (mut dist, mut n_dist) = (0.0, 0usize);
    let (mut ratio, mut n_ratio) = (0.0, 0usize);
    let mut ratio_m = 0.0;
    for e in &per {
        correct += e.correct as usize;
        for &(p, t) in &e.traces {
            tr += t;
            n_tr += 1;
            protos[p].mean_trace += t;
            protos[p].fitted += 1;
        }
        if let Some(d) = e.min_dist {
            dist += d;
            n_dist += 1;
        }
        ratio += e.ratios.iter().sum::<f64>();
        n_ratio += e.ratios.len();
        ratio_m += e.ratios_masked.iter().sum::<f64>();
    }
    for p in &mut protos {
        if p.fitted > 0 {
            p.mean_trace /= p.fitted as f64;
        }
    }
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    Ok(EvalReport {
        samples: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        tr_sigma: mean(tr, n_tr),
        min_center_dist: mean(dist, n_dist),
        concentration: (n_ratio > 0).then(|| ratio / n_ratio as f64),
        concentration_masked: (n_ratio > 0).then(|| ratio_m / n_ratio as f64),
        prototypes: protos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig::parse(
            "epochs = 2\nbatch_size = 4\ntrain_samples = 8\ntest_samples = 4\ndepth = 2\nembed_dim = 8\nheads = 2\nmlp_ratio = 2\n",
        )
        .unwrap()
    }

    #[test]
    fn split_seeds_differ() {
        for s in [0, 1, u64::MAX] {
            assert_ne!(train_seed(s), test_seed(s));
        }
    }

    #[test]
    fn epoch_counts_and_finite_metrics() {
        let mut t = Trainer::new(tiny()).unwrap();
        let before = t.model.params.clone();
        let ms = t.run(|_, _| Ok(())).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(t.epoch, 2);
        assert_eq!(t.optimizer.step, 4);
        assert!(ms.iter().all(|m| m.loss.is_finite() && (0.0..=1.0).contains(&m.acc)));
        assert_ne!(t.model.params, before);
        let line = ms[0].log_line();
        assert!(line.starts_with("epoch=1 loss="), "{line}");
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut cfg = tiny();
        cfg.base_lr = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.model.params.clone();
        t.train_epoch().unwrap();
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn evaluate_reports_bounded_values() {
        let t = Trainer::new(tiny()).unwrap();
        let test = test_set(&t.config).unwrap();
        let r = evaluate(&t.model, &test, Branch::Total, t.config.ppc.sigma_guard).unwrap();
        assert_eq!(r.samples, 4);
        assert!((0.0..=1.0).contains(&r.accuracy));
        let c = r.concentration.unwrap();
        assert!((0.0..=1.0).contains(&c));
        assert_eq!(r.prototypes.len(), t.model.bank.m_local());
    }
}

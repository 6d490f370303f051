//! Suites shared by the per-topic test files and the acceptance report.
#![allow(dead_code)]

use ppf_core::autodiff::{Tape, Var};
use ppf_core::concentration::{
    fit_gaussian, fit_on_tape, grid_positions, ppc_mu, ppc_mu_on_tape, ppc_sigma, ppc_sigma_on_tape, total_loss,
    GaussianFit, PPCConfig, SIGMA_DENOM_GUARD,
};
use ppf_core::gradcheck::check;
use ppf_core::model::{Model, ModelConfig};
use ppf_core::prototype::SIMILARITY_EPS;
use ppf_core::rollout::{class_token_scores, rollout};
use ppf_core::vit::MaskPolicy;
use ppf_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-7;
pub const INSTANCES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Random keep vector with at least `min_kept` entries set.
pub fn rand_keep(r: &mut ChaCha8Rng, n: usize, min_kept: usize) -> Vec<bool> {
    loop {
        let k: Vec<bool> = (0..n).map(|_| r.gen_bool(0.6)).collect();
        if k.iter().filter(|&&b| b).count() >= min_kept {
            return k;
        }
    }
}

/// Outcome of one named check within a suite.
#[derive(Debug)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Outcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

pub fn all_passed(o: &[Outcome]) -> bool {
    o.iter().all(|x| x.passed)
}

pub fn summary(o: &[Outcome]) -> String {
    o.iter()
        .map(|x| format!("{}:{}({})", x.name, if x.passed { "ok" } else { "FAIL" }, x.detail))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Runs `instances` gradient checks built by `make`.
fn grad_family<M, F>(name: &str, seed: u64, make: M) -> Outcome
where
    M: Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, F),
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let (mut worst, mut worst_abs, mut failed, mut checked) = (0.0f64, 0.0f64, 0, 0);
    for _ in 0..INSTANCES {
        let (inputs, f) = make(&mut r);
        match check(&inputs, f, H, RTOL, ATOL) {
            Ok(rep) => {
                worst = worst.max(rep.max_rel_err);
                worst_abs = worst_abs.max(rep.max_abs_err);
                checked += rep.checked;
                if !rep.passed() {
                    failed += 1;
                }
            }
            Err(_) => failed += 1,
        }
    }
    Outcome::new(
        name,
        failed == 0,
        format!("{INSTANCES} instances, {checked} entries, max abs {worst_abs:.1e}, max rel (abs > atol) {worst:.2e}"),
    )
}

/// Weighted sum against fixed random coefficients, so every output entry
/// gets a distinct upstream gradient.
fn project(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let c = tape.constant(w.clone());
    let p = tape.mul(x, c)?;
    Ok(tape.sum(p))
}

pub fn gradient_suite() -> Vec<Outcome> {
    let mut out = Vec::new();

    out.push(grad_family("masked_softmax", 11, |r| {
        let (m, n) = (r.gen_range(2..5), r.gen_range(3..7));
        let x = rand_tensor(r, &[m, n], -2.0, 2.0);
        let w = rand_tensor(r, &[m, n], -1.0, 1.0);
        let mut keep = rand_keep(r, n, 1);
        keep[0] = true;
        (vec![x], move |t: &mut Tape, v: &[Var]| {
            let a = t.masked_softmax_rows(v[0], Some(&keep))?;
            project(t, a, &w)
        })
    }));

    out.push(grad_family("similarity", 12, |r| {
        let (n, k, d) = (r.gen_range(2..5), r.gen_range(1..4), r.gen_range(2..6));
        let x = rand_tensor(r, &[n, d], -1.0, 1.0);
        let p = rand_tensor(r, &[k, d], 0.0, 1.0);
        let w = rand_tensor(r, &[n, k], -1.0, 1.0);
        (vec![x, p], move |t: &mut Tape, v: &[Var]| {
            let d2 = t.sq_dist(v[0], v[1])?;
            let s = t.log_similarity(d2, SIMILARITY_EPS)?;
            project(t, s, &w)
        })
    }));

    out.push(grad_family("fit_gaussian", 13, |r| {
        let g = r.gen_range(2..5);
        let n = g * g;
        let s = rand_tensor(r, &[n, 1], 0.3, 2.0);
        let keep = rand_keep(r, n, 2);
        let wm = rand_tensor(r, &[1, 2], -1.0, 1.0);
        let ws = rand_tensor(r, &[2, 2], -1.0, 1.0);
        let pos = grid_positions(g);
        (vec![s], move |t: &mut Tape, v: &[Var]| {
            let f = fit_on_tape(t, v[0], &keep, &pos, SIGMA_DENOM_GUARD)?;
            let a = project(t, f.mu, &wm)?;
            let sigma = f.sigma.ok_or(ppf_core::Error::DegenerateFit(f.weight))?;
            let b = project(t, sigma, &ws)?;
            t.add(a, b)
        })
    }));

    out.push(grad_family("ppc_mu", 14, |r| {
        let m = r.gen_range(2..5);
        // keep every pair clear of the hinge corner
        let centers: Vec<Tensor> = loop {
            let c: Vec<Tensor> = (0..m).map(|_| rand_tensor(r, &[1, 2], 0.0, 2.5)).collect();
            let clear = (0..m).all(|i| {
                (0..m).all(|j| {
                    let d: f64 = c[i].data().iter().zip(c[j].data()).map(|(a, b)| (a - b).powi(2)).sum();
                    i == j || (d - 2.0).abs() > 1e-3
                })
            });
            if clear {
                break c;
            }
        };
        (centers, |t: &mut Tape, v: &[Var]| ppc_mu_on_tape(t, v, 2.0))
    }));

    out.push(grad_family("ppc_sigma", 15, |r| {
        let s = loop {
            let s = rand_tensor(r, &[2, 2], 0.0, 3.0);
            if s.data().iter().all(|x| (x - 1.0).abs() > 1e-3) {
                break s;
            }
        };
        (vec![s], |t: &mut Tape, v: &[Var]| ppc_sigma_on_tape(t, v[0], 1.0))
    }));

    out.push(grad_family("total_loss", 16, |r| {
        let c = r.gen_range(2..5);
        let m = r.gen_range(1..4);
        let g = 3;
        let logits = rand_tensor(r, &[1, c], -2.0, 2.0);
        let label = r.gen_range(0..c);
        let keep = rand_keep(r, g * g, 2);
        let mut inputs = vec![logits];
        for _ in 0..m {
            inputs.push(rand_tensor(r, &[g * g, 1], 0.2, 1.5));
        }
        let cfg = PPCConfig {
            lambda_mu: r.gen_range(0.1..1.0),
            lambda_sigma: r.gen_range(0.1..1.0),
            t_mu: r.gen_range(0.5..3.0),
            t_sigma: r.gen_range(0.2..1.5),
            ..PPCConfig::default()
        };
        let pos = grid_positions(g);
        (inputs, move |t: &mut Tape, v: &[Var]| {
            let fits = v[1..]
                .iter()
                .map(|&s| fit_on_tape(t, s, &keep, &pos, SIGMA_DENOM_GUARD))
                .collect::<Result<Vec<_>>>()?;
            Ok(total_loss(t, v[0], label, &fits, &cfg)?.total)
        })
    }));

    out.push(grad_family("total_loss_wrt_prototypes", 17, |r| {
        let mut cfg = ModelConfig::default();
        cfg.vit.depth = 2;
        cfg.vit.embed_dim = 8;
        cfg.vit.mlp_ratio = 2.0;
        let model = Model::init(cfg, r).unwrap();
        let image = rand_tensor(r, &[32, 32, 3], 0.0, 1.0);
        let label = r.gen_range(0..4);
        let gi = model.bank.global_idx;
        let li = model.bank.local_idx;
        let inputs = vec![model.params.get(gi).clone(), model.params.get(li).clone()];
        let ppc = PPCConfig::default();
        (inputs, move |t: &mut Tape, v: &[Var]| {
            let mut p = model.params.bind_frozen(t);
            p[gi] = v[0];
            p[li] = v[1];
            prototype_loss(t, &model, &image, label, &p, &ppc)
        })
    }));

    out
}

/// Full loss with an explicit parameter binding.
fn prototype_loss(t: &mut Tape, m: &Model, image: &Tensor, label: usize, p: &[Var], ppc: &PPCConfig) -> Result<Var> {
    let out = m.forward_bound(t, image, &m.cfg.policy(), p.to_vec())?;
    let fits = m.own_class_fits(t, &out, label, ppc.sigma_guard)?;
    Ok(total_loss(t, out.logits, label, &fits, ppc)?.total)
}

// --- oracles -----------------------------------------------------------

fn naive_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn random_stochastic(r: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut d: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.01..1.0)).collect();
    for row in d.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(&[n, n], d).unwrap()
}

/// Brute-force fit: explicit double loop over grid positions.
pub fn brute_fit(map: &[f64], keep: &[bool], g: usize) -> ([f64; 2], [[f64; 2]; 2]) {
    let mut w = 0.0;
    let mut mu = [0.0; 2];
    for r in 0..g {
        for c in 0..g {
            let i = r * g + c;
            if keep[i] {
                w += map[i];
                mu[0] += map[i] * r as f64;
                mu[1] += map[i] * c as f64;
            }
        }
    }
    mu = [mu[0] / w, mu[1] / w];
    let mut s = [[0.0; 2]; 2];
    for r in 0..g {
        for c in 0..g {
            let i = r * g + c;
            if keep[i] {
                let d = [r as f64 - mu[0], c as f64 - mu[1]];
                for a in 0..2 {
                    for b in 0..2 {
                        s[a][b] += map[i] * d[a] * d[b];
                    }
                }
            }
        }
    }
    for row in &mut s {
        for v in row.iter_mut() {
            *v /= w - 1.0;
        }
    }
    (mu, s)
}

fn fit(mu: [f64; 2], sigma: [[f64; 2]; 2]) -> GaussianFit {
    GaussianFit { mu, sigma, weight: 2.0 }
}

pub fn oracle_suite() -> Vec<Outcome> {
    let mut out = Vec::new();

    let mut r = rng(21);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = 6;
        let layers: Vec<Tensor> = (0..3).map(|_| random_stochastic(&mut r, n)).collect();
        for renorm in [true, false] {
            let mut expect = Tensor::eye(n).data().to_vec();
            for a in &layers {
                let mut b = a.data().to_vec();
                for i in 0..n {
                    b[i * n + i] += 1.0;
                    if renorm {
                        let s: f64 = b[i * n..(i + 1) * n].iter().sum();
                        b[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= s);
                    }
                }
                expect = naive_matmul(&b, &expect, n);
            }
            let got = rollout(&layers, renorm).unwrap();
            for (a, b) in got.matrix().data().iter().zip(&expect) {
                worst = worst.max((a - b).abs());
            }
            let scores = class_token_scores(&got);
            for (a, b) in scores.iter().zip(&expect[1..n]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    out.push(Outcome::new("rollout", worst < 1e-10, format!("max err {worst:.1e}")));

    let mut r = rng(22);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let g = 5;
        let map: Vec<f64> = (0..g * g).map(|_| r.gen_range(0.05..1.5)).collect();
        let keep = loop {
            let k = rand_keep(&mut r, g * g, 2);
            let w: f64 = map.iter().zip(&k).filter(|(_, &k)| k).map(|(v, _)| v).sum();
            if w > 1.01 {
                break k;
            }
        };
        let f = fit_gaussian(&map, &keep, g).unwrap();
        let (mu, s) = brute_fit(&map, &keep, g);
        for a in 0..2 {
            worst = worst.max((f.mu[a] - mu[a]).abs());
            for b in 0..2 {
                worst = worst.max((f.sigma[a][b] - s[a][b]).abs());
            }
        }
    }
    out.push(Outcome::new("fit_gaussian", worst < 1e-10, format!("max err {worst:.1e}")));

    let z = [[0.0; 2]; 2];
    let cases = [
        (ppc_mu(&[fit([1.0, 1.0], z)], 2.0), 0.0),
        (ppc_mu(&[fit([0.0, 0.0], z), fit([1.0, 0.0], z)], 2.0), 0.5),
        (ppc_mu(&[fit([0.0, 0.0], z), fit([3.0, 0.0], z)], 2.0), 0.0),
        (ppc_sigma(&fit([0.0; 2], [[3.0, 0.0], [0.0, 0.5]]), 1.0), 2.0),
        (ppc_sigma(&fit([0.0; 2], [[0.9, 5.0], [5.0, 0.5]]), 1.0), 0.0),
        (ppc_sigma(&fit([0.0; 2], z), 1.0), 0.0),
    ];
    let worst = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(Outcome::new("ppc_hand", worst <= 1e-12, format!("max err {worst:.1e}")));

    let f = fit_gaussian(&[1.0; 4], &[true; 4], 2).unwrap();
    let e = [
        (f.mu[0] - 0.5).abs(),
        (f.mu[1] - 0.5).abs(),
        (f.sigma[0][0] - 1.0 / 3.0).abs(),
        (f.sigma[1][1] - 1.0 / 3.0).abs(),
        f.sigma[0][1].abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    out.push(Outcome::new("fit_uniform_2x2", e <= 1e-12, format!("max err {e:.1e}")));

    out
}

// --- reductions --------------------------------------------------------

pub fn small_model(seed: u64) -> Model {
    Model::init(ModelConfig::default(), &mut rng(seed)).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn reduction_suite() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut r = rng(31);

    let mut worst = 0.0f64;
    for s in 0..5 {
        let model = small_model(100 + s);
        let image = rand_tensor(&mut r, &[32, 32, 3], 0.0, 1.0);
        let n = model.cfg.vit.grid().pow(2);
        let mut t1 = Tape::new();
        let a = model.forward_with(&mut t1, &image, &MaskPolicy::Fixed(vec![true; n]), false).unwrap();
        let mut t2 = Tape::new();
        let b = model.forward_with(&mut t2, &image, &MaskPolicy::Unmasked, false).unwrap();
        worst = worst.max(max_diff(t1.data(a.logits), t2.data(b.logits)));
        worst = worst.max(max_diff(t1.data(a.encoder.tokens), t2.data(b.encoder.tokens)));
    }
    out.push(Outcome::new("all_ones_mask", worst <= 1e-12, format!("max diff {worst:.1e}")));

    let mut worst = 0.0f64;
    for s in 0..5 {
        let model = small_model(200 + s);
        let image = rand_tensor(&mut r, &[32, 32, 3], 0.0, 1.0);
        let label = (s % 4) as usize;
        let cfg = PPCConfig {
            lambda_mu: 0.0,
            lambda_sigma: 0.0,
            ..PPCConfig::default()
        };
        let mut t = Tape::new();
        let (_, _, terms) = model.sample_loss(&mut t, &image, label, &cfg, false).unwrap();
        worst = worst.max((t.value(terms.total).item() - t.value(terms.ce).item()).abs());
    }
    out.push(Outcome::new("zero_lambdas_is_ce", worst == 0.0, format!("max diff {worst:.1e}")));

    // K = n − 1 keeps every image token.
    let mut worst = 0.0f64;
    for s in 0..5 {
        let mut cfg = ModelConfig::default();
        cfg.top_k = cfg.vit.n_tokens() - 1;
        let model = Model::init(cfg, &mut rng(300 + s)).unwrap();
        let image = rand_tensor(&mut r, &[32, 32, 3], 0.0, 1.0);
        let mut t1 = Tape::new();
        let a = model.forward(&mut t1, &image, false).unwrap();
        let mut t2 = Tape::new();
        let b = model.forward_with(&mut t2, &image, &MaskPolicy::Unmasked, false).unwrap();
        worst = worst.max(max_diff(t1.data(a.logits), t2.data(b.logits)));
    }
    out.push(Outcome::new("k_n_minus_1", worst <= 1e-12, format!("max diff {worst:.1e}")));
    out
}

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ppf_core::checkpoint::Checkpoint;
use ppf_core::config::TrainConfig;
use ppf_core::data::{load_dataset, load_pgm_ppm, save_dataset, generate};
use ppf_core::model::Branch;
use ppf_core::prototype::argmax;
use ppf_core::train::{evaluate, test_set, Trainer};
use ppf_core::visualize::render;
use ppf_core::Tape;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ppf", version, about = "Prototype vision-transformer classifier")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the synthetic set; writes checkpoint.ppfk and metrics.log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy and concentration metrics on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; the config's held-out split when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "total")]
        branch: String,
    },
    /// Rollout scores and the kept-token mask as g×g grids.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Heatmap and bounding box of the rank-th local prototype.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1)]
        rank: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Per-class prototype tables.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Score the prototypes against this image.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Write a synthetic dataset directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn grid_text(values: impl Iterator<Item = String>, g: usize) -> String {
    let v: Vec<String> = values.collect();
    v.chunks(g).map(|r| r.join(" ") + "\n").collect()
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(load_ckpt(p)?)?,
        None => {
            let cfg = TrainConfig::load(config).with_context(|| format!("reading config {}", config.display()))?;
            Trainer::new(cfg)?
        }
    };
    fs::create_dir_all(out)?;
    let ckpt_path = out.join("checkpoint.ppfk");
    let log_path = out.join("metrics.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)?;
    trainer.run(|t, m| {
        println!("{}", m.detail_line());
        writeln!(log, "{}", m.log_line())?;
        t.checkpoint().save(&ckpt_path)?;
        Ok(())
    })?;
    trainer.checkpoint().save(&ckpt_path)?;
    let test = test_set(&trainer.config)?;
    for b in [Branch::Global, Branch::Local, Branch::Total] {
        let r = evaluate(&trainer.model, &test, b, trainer.config.ppc.sigma_guard)?;
        println!("test branch={} acc={:.6}", branch_name(b), r.accuracy);
    }
    Ok(())
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Global => "global",
        Branch::Local => "local",
        Branch::Total => "total",
    }
}

fn eval(ckpt: &Path, data: Option<&Path>, branch: &str) -> Result<String> {
    let branch: Branch = branch.parse()?;
    let ck = load_ckpt(ckpt)?;
    let samples = match data {
        Some(d) => load_dataset(d, ck.config.model.vit.in_channels)?,
        None => test_set(&ck.config)?,
    };
    let r = evaluate(&ck.model, &samples, branch, ck.config.ppc.sigma_guard)?;
    let mut s = String::new();
    writeln!(s, "branch = {}", branch_name(branch))?;
    writeln!(s, "samples = {}", r.samples)?;
    writeln!(s, "accuracy = {:.6}", r.accuracy)?;
    writeln!(s, "mean_tr_sigma = {:.6}", r.tr_sigma)?;
    writeln!(s, "mean_min_center_dist = {:.6}", r.min_center_dist)?;
    if let Some(c) = r.concentration {
        writeln!(s, "fg_concentration = {c:.6}")?;
    }
    if let Some(c) = r.concentration_masked {
        writeln!(s, "fg_concentration_masked = {c:.6}")?;
    }
    writeln!(s, "prototype class fitted tr_sigma")?;
    for p in &r.prototypes {
        writeln!(s, "{} {} {} {:.6}", p.prototype, p.class, p.fitted, p.mean_trace)?;
    }
    Ok(s)
}

fn rollout(ckpt: &Path, image: &Path) -> Result<String> {
    let ck = load_ckpt(ckpt)?;
    let sample = load_pgm_ppm(image, ck.config.model.vit.in_channels)?;
    let mut tape = Tape::new();
    let out = ck.model.forward(&mut tape, &sample.image, false)?;
    let g = ck.config.model.vit.grid();
    let mask = &out.encoder.mask;
    let mut s = String::new();
    writeln!(s, "scores:")?;
    s += &grid_text(mask.scores().iter().map(|v| format!("{v:.6}")), g);
    writeln!(s, "mask:")?;
    s += &grid_text(mask.keep().iter().map(|&k| (k as u8).to_string()), g);
    Ok(s)
}

fn inspect(ckpt: &Path, image: Option<&Path>) -> Result<String> {
    let ck = load_ckpt(ckpt)?;
    let model = &ck.model;
    let bank = &model.bank;
    let mut s = String::new();
    writeln!(s, "epoch = {}", ck.epoch)?;
    writeln!(
        s,
        "classes = {} global = {} local = {}",
        bank.n_classes,
        bank.m_global(),
        bank.m_local()
    )?;
    let scored = match image {
        Some(p) => {
            let sample = load_pgm_ppm(p, ck.config.model.vit.in_channels)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &sample.image, false)?;
            writeln!(s, "predicted = {}", argmax(tape.data(out.logits)))?;
            Some((
                tape.data(out.global.scores).to_vec(),
                tape.data(out.local.pooled).to_vec(),
            ))
        }
        None => None,
    };
    let fc = |w: &ppf_core::Tensor, p: usize, c: usize| w.data()[p * bank.n_classes + c];
    for c in 0..bank.n_classes {
        writeln!(s, "class {c}")?;
        writeln!(s, "  kind   proto  score      points")?;
        for (kind, protos, w, scores) in [
            ("global", bank.global_of_class(c), &bank.fc_global, scored.as_ref().map(|x| &x.0)),
            ("local", bank.local_of_class(c), &bank.fc_local, scored.as_ref().map(|x| &x.1)),
        ] {
            for p in protos {
                let (score, points) = match scores {
                    Some(v) => (format!("{:.6}", v[p]), format!("{:.6}", v[p] * fc(w, p, c))),
                    None => ("-".into(), format!("w={}", fc(w, p, c))),
                };
                writeln!(s, "  {kind:<6} {p:<6} {score:<10} {points}")?;
            }
        }
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, resume } => train(&config, &out, resume.as_deref())?,
        Cmd::Eval { ckpt, data, branch } => print!("{}", eval(&ckpt, data.as_deref(), &branch)?),
        Cmd::Rollout { ckpt, image } => print!("{}", rollout(&ckpt, &image)?),
        Cmd::Visualize { ckpt, image, rank, out } => {
            let ck = load_ckpt(&ckpt)?;
            let sample = load_pgm_ppm(&image, ck.config.model.vit.in_channels)?;
            if sample.size() != (ck.config.model.vit.image_size, ck.config.model.vit.image_size) {
                bail!("image is {:?}, model expects {}", sample.size(), ck.config.model.vit.image_size);
            }
            let r = render(&sample, &ck.model, rank)?;
            r.write(&out)?;
            print!("{}", r.sidecar());
        }
        Cmd::Inspect { ckpt, image } => print!("{}", inspect(&ckpt, image.as_deref())?),
        Cmd::Generate { out, n, seed, classes, size } => {
            save_dataset(&out, &generate(seed, n, classes, size)?)?;
            println!("wrote {n} samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

//! Command-line front end: synthetic data generation, training, inference,
//! evaluation, gradient checking and ablation sweeps.

pub mod ablate;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use jointformer::inference::{
    labels_from_dist, multi_scale_infer, segment_video, target_ids, video_distributions, Diagnostics,
};
use jointformer::io::{list_videos, mask_path, read_pgm, read_video, write_pgm, write_scaled_map, write_video};
use jointformer::metrics::{evaluate, EvalReport};
use jointformer::trainer::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use jointformer::trainer::train::{log_csv, TrainEvent};
use jointformer::trainer::{
    full_model_gradcheck, gen_dataset, split_seeds, train_loop, SyntheticVideo, Trainer,
};
use jointformer::{Error, Model, PropagationMode, Result};

pub use config::RunConfig;

/// Gradient check threshold on the largest relative error.
pub const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "jointformer", version, about = "Video object segmentation with joint attention blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic moving-shapes set as `train/` and `val/` under --out.
    GenData,
    /// Train a model; writes checkpoint.bin, train_log.csv and validation.csv.
    Train,
    /// Segment every video under --data with the model from --checkpoint.
    Infer,
    /// Score predicted masks under --pred against ground truth under --data.
    Eval {
        #[arg(long)]
        pred: PathBuf,
    },
    /// Finite-difference check of every parameter of the small network.
    Gradcheck,
    /// Train and score each sweep setting; writes ablation.csv.
    Ablate {
        /// Training iterations per setting.
        #[arg(long, default_value_t = 2000)]
        budget: usize,
        /// Comma-separated seeds averaged per row; defaults to --seed.
        #[arg(long)]
        seeds: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
struct Flags {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    mode: Option<PropagationMode>,
    #[arg(long, global = true)]
    topk: Option<usize>,
    /// Comma-separated inference scales, e.g. `1.0,1.25`.
    #[arg(long, global = true)]
    scales: Option<String>,
    #[arg(long, global = true)]
    mirror: bool,
    #[arg(long, global = true)]
    memory: Option<OnOff>,
    /// Write attention and gate maps next to the predicted masks.
    #[arg(long, global = true)]
    dump_attn: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} entry `{}`", p.trim())))
        })
        .collect()
}

fn resolve(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = flags.mode {
        cfg.train.mode = mode;
        cfg.inference.mode = mode;
    }
    if let Some(k) = flags.topk {
        cfg.inference.topk = Some(k);
    }
    if let Some(s) = &flags.scales {
        cfg.inference.scales = parse_list("scale", s)?;
    }
    if flags.mirror {
        cfg.inference.mirror = true;
    }
    if let Some(m) = flags.memory {
        cfg.model.memory = m == OnOff::On;
        cfg.gradcheck_model.memory = m == OnOff::On;
    }
    if let Some(p) = &flags.out {
        cfg.out = p.clone();
    }
    if let Some(p) = &flags.data {
        cfg.data = Some(p.clone());
    }
    if let Some(p) = &flags.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn load_split(root: &Path) -> Result<Vec<SyntheticVideo>> {
    list_videos(root)?
        .iter()
        .map(|dir| {
            let v = read_video(dir)?;
            let labels = v
                .labels
                .into_iter()
                .enumerate()
                .map(|(t, l)| l.ok_or_else(|| Error::Input(format!("{}: frame {t} has no mask", dir.display()))))
                .collect::<Result<Vec<_>>>()?;
            let targets = labels.iter().flatten().copied().max().unwrap_or(0) as usize;
            Ok(SyntheticVideo {
                seed: 0,
                frames: v.frames,
                labels,
                targets,
            })
        })
        .collect()
}

/// Training and validation videos: read from `cfg.data` when set, otherwise
/// generated from `seed`.
pub fn datasets(cfg: &RunConfig, seed: u64) -> Result<(Vec<SyntheticVideo>, Vec<SyntheticVideo>)> {
    match &cfg.data {
        Some(root) => Ok((load_split(&root.join("train"))?, load_split(&root.join("val"))?)),
        None => {
            let (a, b) = split_seeds(seed);
            Ok((
                gen_dataset(cfg.train_videos, a, &cfg.synth)?,
                gen_dataset(cfg.val_videos, b, &cfg.synth)?,
            ))
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (a, b) = split_seeds(cfg.train.seed);
    for (split, n, base) in [("train", cfg.train_videos, a), ("val", cfg.val_videos, b)] {
        for (i, v) in gen_dataset(n, base, &cfg.synth)?.iter().enumerate() {
            write_video(&cfg.out.join(split).join(format!("video_{i:03}")), &v.frames, &v.labels)?;
        }
        let _ = writeln!(out, "wrote {n} videos to {}", cfg.out.join(split).display());
    }
    write_text(&cfg.out.join("config.json"), &cfg.to_json())
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (train_set, val_set) = datasets(cfg, cfg.train.seed)?;
    let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let report = train_loop(&mut trainer, &train_set, &val_set, |e| match e {
        TrainEvent::Log(r) => eprintln!(
            "iter {:>6} loss {:.4} ce {:.4} dice {:.4} lr {:e}",
            r.iteration, r.loss, r.ce, r.dice, r.lr
        ),
        TrainEvent::Validation { iteration, jf } => eprintln!("iter {iteration:>6} val J&F {jf:.4}"),
    })?;
    let ck = Checkpoint {
        model: trainer.model,
        opt: Some(trainer.opt),
    };
    let ck_path = cfg.out.join("checkpoint.bin");
    std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    save_checkpoint(&ck_path, &ck)?;
    write_text(&cfg.out.join("train_log.csv"), &log_csv(&report.log))?;
    let mut val = String::from("iteration,JF\n");
    for (it, jf) in &report.validation {
        val.push_str(&format!("{it},{jf:.6}\n"));
    }
    write_text(&cfg.out.join("validation.csv"), &val)?;
    if let Some((_, jf)) = report.validation.last() {
        let _ = writeln!(out, "final val J&F {jf:.6}");
    }
    let _ = writeln!(out, "checkpoint {}", ck_path.display());
    Ok(())
}

fn dump_diagnostics(dir: &Path, t: usize, diags: &[Diagnostics], grid: (usize, usize)) -> Result<()> {
    for (i, d) in diags.iter().enumerate() {
        for (b, a) in d.attention.iter().enumerate() {
            let s = a.shape();
            let path = dir.join(format!("{t:05}_target{i}_block{b}.pgm"));
            write_scaled_map(&path, a.data(), (s[0], s[1]))?;
        }
        if let Some(g) = &d.gate {
            write_scaled_map(&dir.join(format!("{t:05}_target{i}_gate.pgm")), g.data(), grid)?;
        }
    }
    Ok(())
}

fn infer(cfg: &RunConfig, dump_attn: bool, out: &mut dyn Write) -> Result<()> {
    let ck_path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("infer needs --checkpoint".into()))?;
    let model = load_checkpoint(ck_path)?.model;
    let root = cfg.data.as_ref().ok_or_else(|| Error::Config("infer needs --data".into()))?;
    let plain = cfg.inference.scales == [1.0] && !cfg.inference.mirror;
    for dir in list_videos(root)? {
        let v = read_video(&dir)?;
        let first = v.labels[0]
            .clone()
            .ok_or_else(|| Error::Input(format!("{}: no annotation", mask_path(&dir, 0).display())))?;
        let (h, w) = (v.frames[0].shape()[1], v.frames[0].shape()[2]);
        let vout = cfg.out.join(&v.name);
        let labels = if dump_attn {
            let ids = target_ids(&first);
            let grid = (h / model.cfg.patch, w / model.cfg.patch);
            let attn_dir = vout.join("attn");
            let mut failure = None;
            let mut observe = |t: usize, d: &[Diagnostics]| {
                if failure.is_none() {
                    failure = dump_diagnostics(&attn_dir, t, d, grid).err();
                }
            };
            let dists = video_distributions(&model, &v.frames, &first, &ids, &cfg.inference, Some(&mut observe))?;
            if let Some(e) = failure {
                return Err(e);
            }
            if plain {
                let mut l: Vec<Vec<u8>> = dists.iter().map(|d| labels_from_dist(d, &ids)).collect();
                l[0] = first.clone();
                l
            } else {
                multi_scale_infer(&model, &v.frames, &first, &cfg.inference)?
            }
        } else if plain {
            segment_video(&model, &v.frames, &first, &cfg.inference)?
        } else {
            multi_scale_infer(&model, &v.frames, &first, &cfg.inference)?
        };
        for (t, l) in labels.iter().enumerate() {
            write_pgm(&mask_path(&vout, t), l, (h, w))?;
        }
        let _ = writeln!(out, "{}: {} frames", v.name, labels.len());
    }
    Ok(())
}

fn eval(cfg: &RunConfig, pred_root: &Path, out: &mut dyn Write) -> Result<()> {
    let root = cfg.data.as_ref().ok_or_else(|| Error::Config("eval needs --data".into()))?;
    let mut reports = Vec::new();
    for dir in list_videos(root)? {
        let v = read_video(&dir)?;
        let (h, w) = (v.frames[0].shape()[1], v.frames[0].shape()[2]);
        let gt = v
            .labels
            .into_iter()
            .enumerate()
            .map(|(t, l)| l.ok_or_else(|| Error::Input(format!("missing ground truth {}", mask_path(&dir, t).display()))))
            .collect::<Result<Vec<_>>>()?;
        let pred = (0..gt.len())
            .map(|t| {
                let p = mask_path(&pred_root.join(&v.name), t);
                let (px, size) = read_pgm(&p)?;
                if size != (h, w) {
                    return Err(Error::Input(format!("{}: size {size:?}, expected {:?}", p.display(), (h, w))));
                }
                Ok(px)
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(evaluate(&v.name, &pred, &gt, (h, w), true)?);
    }
    let csv = EvalReport::new(reports).to_csv();
    write_text(&cfg.out.join("eval.csv"), &csv)?;
    let _ = out.write_all(csv.as_bytes());
    Ok(())
}

/// Returns whether the check passed.
fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    let r = full_model_gradcheck(&cfg.gradcheck_model, cfg.train.seed, cfg.train.mode)?;
    for (name, e) in &r.per_param {
        let _ = writeln!(out, "{name:<32} {e:.3e}");
    }
    let _ = writeln!(out, "max_rel_err {:.6e} over {} scalars", r.max_rel_err, r.scalars);
    Ok(r.max_rel_err < GRADCHECK_TOL)
}

fn ablate_cmd(cfg: &RunConfig, budget: usize, seeds: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let seeds = match seeds {
        Some(s) => parse_list("seed", s)?,
        None => vec![cfg.train.seed],
    };
    if budget == 0 || seeds.is_empty() {
        return Err(Error::Config("ablate needs a positive budget and at least one seed".into()));
    }
    let rows = ablate::ablate(cfg, budget, &seeds, |s| eprintln!("training {s}"))?;
    let csv = ablate::ablation_csv(&rows);
    write_text(&cfg.out.join("ablation.csv"), &csv)?;
    let _ = out.write_all(csv.as_bytes());
    for r in ablate::reversals(&rows) {
        eprintln!("warning: ordering reversed: {r}");
    }
    Ok(())
}

fn set_threads() {
    if let Some(n) = std::env::var("JF_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status: 0 success, 1 failure, 2 usage or configuration error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    set_threads();
    let cfg = match resolve(&cli.flags) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let result = match &cli.command {
        Command::GenData => gen_data(&cfg, out).map(|_| true),
        Command::Train => train(&cfg, out).map(|_| true),
        Command::Infer => infer(&cfg, cli.flags.dump_attn, out).map(|_| true),
        Command::Eval { pred } => eval(&cfg, pred, out).map(|_| true),
        Command::Gradcheck => gradcheck(&cfg, out),
        Command::Ablate { budget, seeds } => ablate_cmd(&cfg, *budget, seeds.as_deref(), out).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

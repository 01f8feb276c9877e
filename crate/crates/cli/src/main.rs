use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use manta_core::autodiff::PrimitiveKind;
use manta_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use manta_core::config::RunConfig;
use manta_core::diagnostics::{gradcheck_groups, GRADCHECK_TOL};
use manta_core::ssm::SsmParams;
use manta_core::taskgen::fixture::{write_fixture, Fixture};
use manta_core::train::{dtw_csv, evaluate, stream_episode, train, EVAL_STREAM};
use manta_core::{Exec, Tensor};

#[derive(Parser)]
#[command(name = "manta", about = "Matryoshka state-space few-shot sequence classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write metrics, DTW curve and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint and write the confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the backward rule of one primitive (negative control).
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
    /// Export evaluation episodes as MEPB fixture files.
    GenFixtures {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Scan and evaluation throughput, sequential against parallel.
    Bench {
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Run everything on one thread.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    keys: Overrides,
}

macro_rules! overrides {
    ($($key:ident),* $(,)?) => {
        /// Per-key overrides, applied after the config file.
        #[derive(Args, Default)]
        struct Overrides {
            $(
                #[arg(long = stringify!($key), value_name = "VALUE")]
                $key: Option<String>,
            )*
        }

        impl Overrides {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$key {
                        v.push((stringify!($key), x.as_str()));
                    }
                )*
                v
            }
        }
    };
}

overrides!(
    n_way,
    k_shot,
    q_per_class,
    frames,
    feat_dim,
    motif_len,
    noise_std,
    scales,
    n_state,
    tau,
    lambda,
    lr,
    episodes,
    eval_every,
    seed,
    frame_noise,
    sample_noise_ratio,
    gaussian_bg_std,
    reverse_support,
    disable_inner,
    disable_outer,
    disable_hc,
    fragmenting,
    selective,
);

impl Common {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    /// `base`, then the config file, then flags.
    fn config(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for (k, v) in self.keys.pairs() {
            cfg.set(k, v).with_context(|| format!("--{k}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn run_train(common: &Common) -> Result<()> {
    let cfg = common.config(RunConfig::default())?;
    let out = common.out_dir()?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let started = Instant::now();
    let outcome = train(&cfg, common.exec(), &mut |r| {
        writeln!(metrics, "{}", r.to_json())?;
        if let Some(acc) = r.eval_accuracy {
            eprintln!("episode {:>6}  loss {:.4}  validation accuracy {:.3}", r.episode + 1, r.loss_total, acc);
        }
        Ok(())
    })?;
    metrics.flush()?;
    fs::write(out.join("dtw.csv"), dtw_csv(&outcome.probe_dtw, &cfg.scale_set()?))?;
    save_checkpoint(&out.join("checkpoint.manta"), &Checkpoint::new(&cfg, &outcome.params))?;
    let (first, last) = (outcome.probe_dtw.first(), outcome.probe_dtw.last());
    println!(
        "trained {} episodes in {:.1}s; probe DTW {:.4} -> {:.4}; wrote {}",
        cfg.episodes,
        started.elapsed().as_secs_f64(),
        first.map_or(f64::NAN, |p| p.mean()),
        last.map_or(f64::NAN, |p| p.mean()),
        out.display()
    );
    Ok(())
}

fn run_eval(checkpoint: &Path, common: &Common) -> Result<()> {
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = common.config(ck.config.clone())?;
    let params = ck.params(&cfg)?;
    let report = evaluate(&params, &cfg, cfg.episodes, common.exec())?;
    let out = common.out_dir()?;
    fs::write(out.join("confusion.csv"), report.confusion_csv())?;
    println!(
        "accuracy {:.4} ± {:.4} over {} episodes",
        report.mean, report.ci95, cfg.episodes
    );
    Ok(())
}

fn run_gradcheck(common: &Common, corrupt: Option<&str>) -> Result<bool> {
    let base = RunConfig::from_text("n_way = 3\nk_shot = 2\nframes = 8\nfeat_dim = 4\nmotif_len = 2")?;
    let cfg = common.config(base)?;
    let fault = match corrupt {
        Some(name) => Some(PrimitiveKind::parse(name).with_context(|| format!("unknown primitive {name:?}"))?),
        None => None,
    };
    let report = gradcheck_groups(&cfg, fault, common.exec())?;
    let mut ok = true;
    for r in &report {
        let status = if r.passes() { "ok" } else { "FAIL" };
        ok &= r.passes();
        println!("{status:4} {:<28} {:>6} params  max rel error {:.3e}", r.name, r.size, r.max_rel_error);
    }
    println!("{} groups, tolerance {GRADCHECK_TOL:e}", report.len());
    Ok(ok)
}

fn run_gen_fixtures(count: usize, common: &Common) -> Result<()> {
    let cfg = common.config(RunConfig::default())?;
    let out = common.out_dir()?;
    for i in 0..count {
        let batch = stream_episode(&cfg, EVAL_STREAM, i)?;
        let path = out.join(format!("episode_{i:04}.mepb"));
        write_fixture(&path, &Fixture::from(&batch))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn time_it(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..repeats {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / repeats as f64)
}

fn run_bench(repeats: usize, common: &Common) -> Result<()> {
    if repeats == 0 {
        bail!("--repeats must be positive");
    }
    let cfg = common.config(RunConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ssm = SsmParams::init(cfg.feat_dim, cfg.n_state, cfg.selective, &mut rng);
    let len = cfg.frames * cfg.n_way * (cfg.k_shot + cfg.q_per_class);
    let x = Tensor::uniform(&[len, cfg.feat_dim], 1.0, &mut rng);
    let per_scan = time_it(repeats, || {
        ssm.scan(&x)?;
        Ok(())
    })?;
    println!(
        "scan {len}x{} with {} states: {:.3} ms, {:.2e} steps/s",
        cfg.feat_dim,
        cfg.n_state,
        per_scan * 1e3,
        len as f64 / per_scan
    );
    let params = manta_core::train::init_params(&cfg)?;
    let episodes = repeats.max(4);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let t = time_it(1, || {
            evaluate(&params, &cfg, episodes, exec)?;
            Ok(())
        })?;
        println!("eval {episodes} episodes {exec:?}: {:.3}s, {:.1} episodes/s", t, episodes as f64 / t);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common } => run_train(common).map(|_| true),
        Command::Eval { checkpoint, common } => run_eval(checkpoint, common).map(|_| true),
        Command::Gradcheck {
            common,
            corrupt_backward,
        } => run_gradcheck(common, corrupt_backward.as_deref()),
        Command::GenFixtures { count, common } => run_gen_fixtures(*count, common).map(|_| true),
        Command::Bench { repeats, common } => run_bench(*repeats, common).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

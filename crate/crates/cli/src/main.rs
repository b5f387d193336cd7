use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ecotrain::config::{RunConfig, Scenario};
use ecotrain::energy::{CostModel, CostModelKind};
use ecotrain::harness::{self, RunSummary};
use ecotrain::psg_verify::{
    monte_carlo_failure_rate, GaussianSampler, PairSampler, SnapshotSampler, Threshold, VerifyFormats,
};

#[derive(Parser)]
#[command(name = "ecotrain", version, about = "Energy-aware CNN training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration, or a seed sweep with --jobs.
    Train(TrainArgs),
    /// Monte-Carlo check of the predictor failure bound.
    VerifyPsg(VerifyArgs),
    /// Savings table of finished runs against a baseline run.
    Compare(CompareArgs),
    /// Pretrain on one half of the data, compare fine-tuning options on the other.
    FinetuneSplit(FinetuneArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    /// Override a config key, e.g. `--set slu.alpha=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Ok(RunConfig::load(self.config.as_deref(), self.scenario, &overrides)?)
    }
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    Scenario::parse(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory of a baseline for the savings columns.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Run the seeds in `--seeds` as parallel child processes.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerKind {
    Gaussian,
    Snapshot,
}

#[derive(Args)]
struct VerifyArgs {
    /// Activation predictor widths to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2u32, 4, 6, 8])]
    x_bits: Vec<u32>,
    /// Gradient predictor width minus activation predictor width.
    #[arg(long, default_value_t = 6)]
    g_offset: u32,
    #[arg(long, default_value_t = 0.05)]
    beta: f64,
    /// Fixed threshold in normalized units; overrides --beta.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum, default_value_t = SamplerKind::Gaussian)]
    sampler: SamplerKind,
    /// Directory of captured pairs for `--sampler snapshot`.
    #[arg(long)]
    snapshots: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    baseline: PathBuf,
    /// Run directories to compare.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = CostKind::Quadratic)]
    cost_model: CostKind,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostKind {
    Quadratic,
    PaperCalibrated,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 1000)]
    finetune_iterations: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Cmd::Train(a) => train(a),
        Cmd::VerifyPsg(a) => verify(a),
        Cmd::Compare(a) => compare(a),
        Cmd::FinetuneSplit(a) => finetune(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    if let Some(jobs) = a.jobs {
        return sweep(&a, jobs.max(1));
    }
    let cfg = a.cfg.load()?;
    let baseline = a.baseline.as_deref().map(RunSummary::load).transpose()?;
    let (out, rep) = harness::run(&cfg, a.out.as_deref(), baseline.as_ref())?;
    println!(
        "{} seed {}: accuracy {:.4}, processed {}/{} steps, kept ratio {:.3}, computational savings {:.4}, energy savings {:.4}",
        cfg.scenario.name(),
        cfg.seed,
        out.final_accuracy,
        out.processed_steps,
        out.scheduled_steps,
        out.eval_kept_ratio,
        rep.computational_savings,
        rep.energy_savings
    );
    Ok(())
}

fn sweep(a: &TrainArgs, jobs: usize) -> Result<()> {
    if a.seeds.is_empty() {
        bail!("--jobs needs --seeds");
    }
    let root = a.out.clone().context("--jobs needs --out")?;
    // validate once before spawning anything
    a.cfg.load()?;
    let exe = std::env::current_exe()?;
    let mut pending: Vec<u64> = a.seeds.iter().rev().copied().collect();
    let mut running = Vec::new();
    let mut failed = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some(seed) = pending.pop() else { break };
            let mut c = Command::new(&exe);
            c.arg("train").arg("--seed").arg(seed.to_string());
            c.arg("--out").arg(root.join(format!("seed{seed}")));
            if let Some(p) = &a.cfg.config {
                c.arg("--config").arg(p);
            }
            if let Some(s) = a.cfg.scenario {
                c.arg("--scenario").arg(s.name());
            }
            for s in &a.cfg.set {
                c.arg("--set").arg(s);
            }
            if let Some(b) = &a.baseline {
                c.arg("--baseline").arg(b);
            }
            running.push((seed, c.spawn()?));
        }
        let (seed, mut child) = running.remove(0);
        if !child.wait()?.success() {
            failed.push(seed);
        }
    }
    if !failed.is_empty() {
        bail!("runs failed for seeds {failed:?}");
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let threshold = match a.tau {
        Some(t) => Threshold::Fixed(t),
        None => Threshold::Adaptive(a.beta),
    };
    let captured = match a.sampler {
        SamplerKind::Snapshot => {
            let dir = a.snapshots.as_deref().context("--sampler snapshot needs --snapshots DIR")?;
            Some(SnapshotSampler::load(dir)?)
        }
        SamplerKind::Gaussian => None,
    };
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    writeln!(w, "bits,tau,rate,rate_ci,bound,bound_ci,bound_literal,bound_literal_ci")?;
    for &xb in &a.x_bits {
        let formats = VerifyFormats::predictors(xb, xb + a.g_offset);
        let mut sampler: Box<dyn PairSampler> = match &captured {
            Some(s) => Box::new(SnapshotSampler::new(s.pairs.clone())),
            None => Box::new(GaussianSampler::new(a.seed, 32, 64, 64, 1.0)),
        };
        let est = monte_carlo_failure_rate(sampler.as_mut(), &formats, threshold, a.n_samples)?;
        for warn in &est.warnings {
            eprintln!("warning ({xb}/{} bits): {warn}", xb + a.g_offset);
        }
        let tau = match threshold {
            Threshold::Fixed(t) => format!("{t}"),
            Threshold::Adaptive(b) => format!("{b}*max"),
        };
        writeln!(
            w,
            "{}/{},{},{},{},{},{},{},{}",
            xb,
            xb + a.g_offset,
            tau,
            est.rate,
            est.rate_ci.1,
            est.bound,
            est.bound_ci,
            est.bound_literal,
            est.bound_literal_ci
        )?;
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    if !a.baseline.join("ledger.json").exists() {
        bail!("baseline run {} has no ledger.json", a.baseline.display());
    }
    let base = RunSummary::load(&a.baseline)?;
    let runs = a
        .runs
        .iter()
        .map(|d| RunSummary::load(d).with_context(|| format!("loading run {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let model = match a.cost_model {
        CostKind::Quadratic => CostModel::from_kind(CostModelKind::Quadratic),
        CostKind::PaperCalibrated => CostModel::from_kind(CostModelKind::PaperCalibrated),
    };
    let rows = harness::compare(&base, &runs, &model)?;
    match &a.out {
        Some(p) => {
            let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            harness::write_compare_csv(&rows, f)?
        }
        None => harness::write_compare_csv(&rows, std::io::stdout())?,
    }
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let rep = harness::finetune_split(&cfg, a.finetune_iterations)?;
    let s = serde_json::to_string_pretty(&rep)?;
    match &a.out {
        Some(p) => write_file(p, &s)?,
        None => println!("{s}"),
    }
    Ok(())
}

fn write_file(p: &Path, s: &str) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(p, s).with_context(|| format!("writing {}", p.display()))
}

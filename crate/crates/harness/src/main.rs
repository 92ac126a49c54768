use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use nvib_harness::config::RunConfig;
use nvib_harness::error::HarnessError;
use nvib_harness::metrics::LmSettings;
use nvib_harness::plot;
use nvib_harness::run::{self, CHECKPOINT_FILE, LOSS_FILE, METRICS_FILE, SAMPLES_FILE};
use nvib_harness::verify::{self, Selection};

const OUT_ENV: &str = "NVIB_OUT_DIR";
const GENERATION_FILE: &str = "generation.csv";

#[derive(Parser)]
#[command(name = "nvib", version, about = "Train, evaluate and sample nonparametric variational autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write loss curves, metrics and a checkpoint.
    Train(Common),
    /// Held-out metrics of a checkpoint.
    Eval(Common),
    /// Sample from the prior of a checkpoint and score the samples.
    Generate(Common),
    /// Run the verification suite.
    Verify {
        /// all, attention, distributions, kl, gradients or fdp
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Write CSV and SVG series.
    Plot {
        what: PlotKind,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Fig3,
    NuVsLength,
    LossCurves,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// T, VT, VTP[-mean|-max|-cls], VTS[-stride] or NVAE
    #[arg(long)]
    variant: Option<String>,
    #[arg(long = "lambda-d")]
    lambda_d: Option<f64>,
    #[arg(long = "lambda-g")]
    lambda_g: Option<f64>,
    #[arg(long = "delta-p")]
    delta_p: Option<f64>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to $NVIB_OUT_DIR or ./runs
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| std::env::var_os(OUT_ENV).map_or_else(|| "runs".into(), PathBuf::from))
    }

    fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir().join(CHECKPOINT_FILE))
    }

    /// File values first, then flags.
    fn run_config(&self) -> nvib_harness::error::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.variant {
            cfg.set("variant", v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(x) = self.lambda_d {
            cfg.set("lambda_d_prime", &x.to_string())?;
        }
        if let Some(x) = self.lambda_g {
            cfg.set("lambda_g_prime", &x.to_string())?;
        }
        if let Some(x) = self.delta_p {
            cfg.set("delta_p", &x.to_string())?;
        }
        if let Some(p) = &self.data {
            cfg.data = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Failed,
}

fn print_rows(rows: &[(&str, f64)]) {
    for (k, v) in rows {
        println!("{k:>16} {v:.6}");
    }
}

fn train(c: &Common) -> anyhow::Result<Status> {
    let cfg = c.run_config()?;
    let out = c.out_dir();
    let outcome = run::train_to_dir(&cfg, &out, |p| {
        eprintln!("step {:>6} l_r {:.4} l_d {:.4} l_g {:.4} total {:.4}", p.step, p.loss.l_r, p.loss.l_d, p.loss.l_g, p.loss.total)
    })?;
    print_rows(&outcome.report.rows());
    eprintln!("wrote {}", out.display());
    Ok(Status::Ok)
}

fn eval(c: &Common) -> anyhow::Result<Status> {
    let report = run::eval_checkpoint(&c.checkpoint(), c.data.clone())?;
    print_rows(&report.rows());
    if let Some(out) = &c.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join(METRICS_FILE), run::metrics_csv(&report.rows()))?;
    }
    Ok(Status::Ok)
}

fn generate(c: &Common) -> anyhow::Result<Status> {
    let (ckpt, cfg, data) = run::load_checkpoint(&c.checkpoint())?;
    let lm = LmSettings { dim: cfg.model_dim, ff_dim: cfg.ff_dim, steps: cfg.lm_steps, ..LmSettings::default() };
    let seed = c.seed.unwrap_or(cfg.seed);
    let g = run::generate(&ckpt.model, &data, cfg.samples, &lm, seed)?;
    let out = c.out_dir();
    std::fs::create_dir_all(&out)?;
    let text: String = g.samples.iter().map(|s| data.train.detokenize(s.tokens()) + "\n").collect();
    std::fs::write(out.join(SAMPLES_FILE), text)?;
    let rows = [("f_ppl", g.f_ppl), ("r_ppl", g.r_ppl), ("random_f_ppl", g.random_f_ppl)];
    std::fs::write(out.join(GENERATION_FILE), run::metrics_csv(&rows))?;
    print_rows(&rows);
    Ok(Status::Ok)
}

fn verify(suite: &str) -> anyhow::Result<Status> {
    let selection: Selection = suite.parse()?;
    let report = verify::run(selection, |c| {
        println!(
            "{} {:<42} {:.3e} (limit {:.1e}, {:.1}s) {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.id,
            c.measured,
            c.threshold,
            c.seconds,
            c.detail
        )
    });
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", report.checks.len());
    Ok(if report.passed() { Status::Ok } else { Status::Failed })
}

fn loss_source(c: &Common) -> PathBuf {
    match &c.checkpoint {
        Some(ck) => ck.parent().unwrap_or(Path::new(".")).join(LOSS_FILE),
        None => c.out_dir().join(LOSS_FILE),
    }
}

fn plot(what: PlotKind, c: &Common) -> anyhow::Result<Status> {
    let out = c.out_dir();
    let files = match what {
        PlotKind::Fig3 => plot::emit_fig3(&out, 200)?,
        PlotKind::NuVsLength => plot::emit_nu_vs_length(&out, &c.checkpoint())?,
        PlotKind::LossCurves => {
            let src = loss_source(c);
            let points = plot::read_loss_curves(&src).with_context(|| format!("reading {}", src.display()))?;
            plot::emit_loss_curves(&out, &points)?
        }
    };
    for f in files {
        println!("{}", f.display());
    }
    Ok(Status::Ok)
}

fn model_input(e: &nvib_model::ModelError) -> bool {
    use nvib_model::ModelError as M;
    matches!(e, M::Input(_) | M::Config(_) | M::Unsupported(_) | M::Checkpoint(_))
}

fn is_input_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| match c.downcast_ref::<HarnessError>() {
        Some(HarnessError::Input(_)) => true,
        Some(HarnessError::Model(m)) => model_input(m),
        _ => c.downcast_ref::<nvib_model::ModelError>().is_some_and(model_input),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Generate(c) => generate(c),
        Command::Verify { suite } => verify(suite),
        Command::Plot { what, common } => plot(*what, common),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_input_error(&e) { 2 } else { 1 })
        }
    }
}

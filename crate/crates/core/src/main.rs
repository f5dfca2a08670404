use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use noisestab::certify::Verdict;
use noisestab::cli::{self, ExperimentConfig, Stage, StageError, SweepAxis, SynthesisSummary};
use noisestab::Error;

#[derive(Parser)]
#[command(name = "noisestab", version, about = "Noise feedback stabilization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, env = "NOISESTAB_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Sigma,
    MaskWidth,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalues, unstable index and semisimplicity report.
    Spectrum(Common),
    /// Noise matrices, intensity and actuators.
    Synthesize(Common),
    /// Closed-loop ensemble; writes per-path and ensemble CSVs.
    Simulate(Common),
    /// Decay certificate from stored trajectories (or a fresh simulation).
    Certify {
        #[command(flatten)]
        common: Common,
        /// Directory holding `paths/path_*.csv` from an earlier run.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Full pipeline with report files.
    Run(Common),
    /// Tabulate achieved rates over σ or mask width.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "sigma")]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, StageError> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|source| StageError { stage: Stage::Config, source })?;
    if let Some(s) = common.seed {
        cfg.sde.seed = s;
    }
    if let Some(p) = common.paths {
        cfg.sde.paths = p;
    }
    if let Some(o) = &common.out {
        cfg.output.directory = o.clone();
    }
    cfg.validate().map_err(|source| StageError { stage: Stage::Config, source })?;
    Ok(cfg)
}

fn at<T>(stage: Stage) -> impl Fn(Error) -> StageError {
    move |source| StageError { stage, source }
}

fn print_json<T: serde::Serialize>(quiet: bool, v: &T) {
    if !quiet {
        println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
    }
}

fn out_dir(cfg: &ExperimentConfig) -> &Path {
    &cfg.output.directory
}

fn execute(command: Command) -> Result<Verdict, StageError> {
    match command {
        Command::Spectrum(c) => {
            let cfg = load(&c)?;
            let model = cli::build_model(&cfg).map_err(at::<()>(Stage::Model))?;
            let sp = cli::spectrum_stage(&model).map_err(at::<()>(Stage::Spectrum))?;
            let dir = out_dir(&cfg);
            cli::write_csv(&dir.join("spectrum.csv"), &cli::spectrum_rows(&sp.spec)).map_err(at::<()>(Stage::Output))?;
            cli::write_json(&dir.join("spectrum.json"), &sp.summary).map_err(at::<()>(Stage::Output))?;
            print_json(c.quiet, &sp.summary);
            Ok(Verdict::Pass)
        }
        Command::Synthesize(c) => {
            let cfg = load(&c)?;
            let model = cli::build_model(&cfg).map_err(at::<()>(Stage::Model))?;
            let sp = cli::spectrum_stage(&model).map_err(at::<()>(Stage::Spectrum))?;
            let law = cli::synthesize_stage(&cfg, &model, &sp.dec, &cli::noise_choice(&cfg))
                .map_err(at::<()>(Stage::Synthesize))?;
            let s = SynthesisSummary::of(&law);
            cli::write_json(&out_dir(&cfg).join("synthesis.json"), &s).map_err(at::<()>(Stage::Output))?;
            print_json(c.quiet, &s);
            Ok(Verdict::Pass)
        }
        Command::Simulate(c) => {
            let cfg = load(&c)?;
            let model = cli::build_model(&cfg).map_err(at::<()>(Stage::Model))?;
            let sp = cli::spectrum_stage(&model).map_err(at::<()>(Stage::Spectrum))?;
            let law = cli::synthesize_stage(&cfg, &model, &sp.dec, &cli::noise_choice(&cfg))
                .map_err(at::<()>(Stage::Synthesize))?;
            let ens = cli::simulate_stage(&cfg, &model, &sp.dec, &law).map_err(at::<()>(Stage::Simulate))?;
            cli::write_trajectories(out_dir(&cfg), &ens).map_err(at::<()>(Stage::Output))?;
            if !c.quiet {
                println!("wrote {} paths to {}", ens.len(), out_dir(&cfg).display());
            }
            Ok(Verdict::Pass)
        }
        Command::Certify { common, input } => {
            let cfg = load(&common)?;
            let ens = match input {
                Some(dir) => cli::read_trajectories(&dir).map_err(at::<()>(Stage::Certify))?,
                None => {
                    let model = cli::build_model(&cfg).map_err(at::<()>(Stage::Model))?;
                    let sp = cli::spectrum_stage(&model).map_err(at::<()>(Stage::Spectrum))?;
                    let law = cli::synthesize_stage(&cfg, &model, &sp.dec, &cli::noise_choice(&cfg))
                        .map_err(at::<()>(Stage::Synthesize))?;
                    cli::simulate_stage(&cfg, &model, &sp.dec, &law).map_err(at::<()>(Stage::Simulate))?
                }
            };
            let cert = cli::certify_stage(&cfg, &ens).map_err(at::<()>(Stage::Certify))?;
            let s = cli::CertificateSummary::of(&cert);
            cli::write_json(&out_dir(&cfg).join("certificate.json"), &s).map_err(at::<()>(Stage::Output))?;
            print_json(common.quiet, &s);
            Ok(cert.verdict)
        }
        Command::Run(c) => {
            let cfg = load(&c)?;
            let report = cli::run_pipeline(&cfg)?;
            if !c.quiet {
                print!("{}", report.summary_text());
            }
            Ok(report.verdict())
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load(&common)?;
            let axis = match axis {
                Axis::Sigma => SweepAxis::Sigma,
                Axis::MaskWidth => SweepAxis::MaskWidth,
            };
            let rows = cli::sweep(&cfg, axis, &values)?;
            cli::write_csv(&out_dir(&cfg).join("sweep.csv"), &rows).map_err(at::<()>(Stage::Output))?;
            if !common.quiet {
                for r in &rows {
                    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
                    println!(
                        "{:>10.4}  modal_rate={}  closed_loop_rate={}  gram_condition={}{}",
                        r.value,
                        f(r.modal_rate),
                        f(r.closed_loop_rate),
                        f(r.gram_condition),
                        r.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default()
                    );
                }
            }
            Ok(Verdict::Pass)
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match execute(args.command) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

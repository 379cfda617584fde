//! Command-line front end. Each subcommand runs one pipeline stage
//! against the artifacts in the output directory, so a full run can be
//! driven stepwise across processes; `pipeline` runs everything.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use matchgap::cluster::{self, FirmClassing};
use matchgap::counterfactual::{self, Mode};
use matchgap::decompose::{self, CakmCovariates, FixedEffectsFit};
use matchgap::error::{Error, Result};
use matchgap::graph::{self, BiasDesign, QuadraticForm};
use matchgap::mixture::{self, EmOptions, MixtureModel, TypeAssignment};
use matchgap::panel::Gender;
use matchgap::pipeline::{
    self, files, read_json, write_json, Artifact, ModeChoice, PipelineConfig, ResolvedSeeds,
    StageStatus,
};

#[derive(Parser)]
#[command(
    name = "matchgap",
    version,
    about = "Firm classes, worker types, and wage-gap decompositions from matched panels"
)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Thread-pool size; overrides the configured one.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured input panel (simulated market or
    /// ingested CSV) into the output directory.
    Simulate,
    /// Class firms by k-means on their wage distributions.
    Cluster,
    /// Report the gap statistic over the configured class-count range.
    Gapstat,
    /// Fit the worker-type mixture on movers, then stayer proportions.
    Estimate,
    /// Assign worker types by posterior mode.
    Assign,
    /// Regression, firm-premium, and variance decompositions of the gap.
    Decompose,
    /// Separable-market counterfactual decomposition and segregation.
    Counterfactual(CounterfactualArgs),
    /// Mover-graph diagnostics.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Run every stage in order and write the manifest.
    Pipeline,
}

#[derive(Args)]
struct CounterfactualArgs {
    /// Subgroup partitions to add (education, age, size, occupation);
    /// overrides the configured list when given.
    #[arg(long = "by")]
    by: Vec<String>,
    /// Evaluation mode; overrides the configured one.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Simulated workers per evaluation in draws mode.
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Expectation,
    Draws,
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Connected components of the mover graph.
    Components,
    /// Largest dual connected set across both genders.
    Ldcs,
    /// Residual-change symmetry table over mover class transitions.
    Symmetry,
    /// Exact limited-mobility bias of a plug-in quadratic form.
    Bias(BiasArgs),
    /// Monte Carlo connectivity of a market with given firm sizes.
    Connectivity(ConnectivityArgs),
}

#[derive(Args)]
struct BiasArgs {
    /// JSON file with obs (worker, firm pairs), worker_count, firm_count.
    #[arg(long)]
    design: PathBuf,
    #[arg(long, value_enum, default_value = "firm-variance")]
    form: FormArg,
    /// Noise variance of the wage equation.
    #[arg(long)]
    sigma2: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    FirmVariance,
    WorkerFirmCovariance,
}

impl From<FormArg> for QuadraticForm {
    fn from(f: FormArg) -> QuadraticForm {
        match f {
            FormArg::FirmVariance => QuadraticForm::FirmVariance,
            FormArg::WorkerFirmCovariance => QuadraticForm::WorkerFirmCovariance,
        }
    }
}

#[derive(Args)]
struct ConnectivityArgs {
    /// Firm sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// Per-worker probability of moving between the periods.
    #[arg(long)]
    move_prob: f64,
    /// Simulation replications.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Config plus resolved output directory and seeds for stage commands.
struct Ctx {
    config: PipelineConfig,
    out: PathBuf,
    seeds: ResolvedSeeds,
}

fn load_ctx(cli: &Cli) -> Result<Ctx> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config is required for this command"))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let out = config.out_dir.clone();
    let seeds = config.resolved_seeds();
    Ok(Ctx { config, out, seeds })
}

/// Run a stage body inside a local thread pool when a size is set.
fn with_pool<T>(threads: Option<usize>, body: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            pool.install(body)
        }
        None => body(),
    }
}

fn announce(artifacts: &[Artifact]) {
    for a in artifacts {
        println!("wrote {} (sha256 {})", a.file, &a.sha256[..12]);
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("cannot serialize report: {e}")))?;
    println!("{text}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Simulate => {
            let ctx = load_ctx(cli)?;
            let (artifacts, _, _) = with_pool(ctx.config.threads, || {
                pipeline::materialize_panel(&ctx.config, &ctx.out, &ctx.seeds)
            })?;
            announce(&artifacts);
            Ok(ExitCode::SUCCESS)
        }
        Command::Cluster => {
            let ctx = load_ctx(cli)?;
            let artifacts = with_pool(ctx.config.threads, || run_cluster(&ctx))?;
            announce(&artifacts);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gapstat => {
            let ctx = load_ctx(cli)?;
            let artifacts = with_pool(ctx.config.threads, || run_gapstat(&ctx))?;
            announce(&artifacts);
            Ok(ExitCode::SUCCESS)
        }
        Command::Estimate => {
            let ctx = load_ctx(cli)?;
            let artifacts = with_pool(ctx.config.threads, || run_estimate(&ctx))?;
            announce(&artifacts);
            Ok(ExitCode::SUCCESS)
        }
        Command::Assign => {
            let ctx = load_ctx(cli)?;
            let artifacts = with_pool(ctx.config.threads, || run_assign(&ctx))?;
            announce(&artifacts);
            Ok(ExitCode::SUCCESS)
        }
        Command::Decompose => {
            let ctx = load_ctx(cli)?;
            let artifacts = with_pool(ctx.config.threads, || run_decompose(&ctx))?;
            announce(&artifacts);
            Ok(ExitCode::SUCCESS)
        }
        Command::Counterfactual(args) => {
            let ctx = load_ctx(cli)?;
            let artifacts = with_pool(ctx.config.threads, || run_counterfactual(&ctx, args))?;
            announce(&artifacts);
            Ok(ExitCode::SUCCESS)
        }
        Command::Graph(GraphCommand::Components) => {
            let ctx = load_ctx(cli)?;
            let panel = pipeline::load_panel(&ctx.out)?;
            let components = graph::connected_sets(&graph::mover_graph(&panel).full);
            let artifact = write_json(&ctx.out, files::COMPONENTS, &components)?;
            announce(std::slice::from_ref(&artifact));
            Ok(ExitCode::SUCCESS)
        }
        Command::Graph(GraphCommand::Ldcs) => {
            let ctx = load_ctx(cli)?;
            let panel = pipeline::load_panel(&ctx.out)?;
            let report = graph::largest_dual_connected(&panel)?;
            let artifact = write_json(&ctx.out, files::LDCS, &report)?;
            announce(std::slice::from_ref(&artifact));
            Ok(ExitCode::SUCCESS)
        }
        Command::Graph(GraphCommand::Symmetry) => {
            let ctx = load_ctx(cli)?;
            let panel = pipeline::load_panel(&ctx.out)?;
            let classing: FirmClassing = read_json(&ctx.out.join(files::CLASSING))?;
            let fit_f: FixedEffectsFit = read_json(&ctx.out.join(files::CAKM_FEMALE))?;
            let fit_m: FixedEffectsFit = read_json(&ctx.out.join(files::CAKM_MALE))?;
            let sym_f = graph::mobility_symmetry_diagnostic(&fit_f, &panel, &classing);
            let sym_m = graph::mobility_symmetry_diagnostic(&fit_m, &panel, &classing);
            let artifact = write_json(
                &ctx.out,
                files::SYMMETRY,
                &serde_json::json!({ "female": sym_f, "male": sym_m }),
            )?;
            announce(std::slice::from_ref(&artifact));
            Ok(ExitCode::SUCCESS)
        }
        Command::Graph(GraphCommand::Bias(args)) => {
            let bytes = std::fs::read(&args.design).map_err(|e| Error::io(&args.design, e))?;
            let design: BiasDesign = serde_json::from_slice(&bytes)
                .map_err(|e| Error::data(format!("{}: {e}", args.design.display())))?;
            let report = graph::exact_lmb_bias(&design, args.form.into(), args.sigma2)?;
            print_json(&report)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Graph(GraphCommand::Connectivity(args)) => {
            let seed = cli.seed.unwrap_or(0);
            let report = with_pool(cli.threads, || {
                graph::connectivity_simulation(&args.sizes, args.move_prob, args.reps, seed)
            })?;
            print_json(&report)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Pipeline => {
            let ctx = load_ctx(cli)?;
            let manifest = pipeline::run_pipeline(&ctx.config)?;
            for stage in &manifest.stages {
                let status = match stage.status {
                    StageStatus::Completed => "completed",
                    StageStatus::Failed => "failed",
                    StageStatus::Skipped => "skipped",
                    StageStatus::Disabled => "disabled",
                };
                println!(
                    "{:<16} {:<10} {:>8} ms  {} artifacts",
                    stage.name,
                    status,
                    stage.wall_ms,
                    stage.outputs.len()
                );
            }
            println!("manifest {}", ctx.out.join(files::MANIFEST).display());
            if let Some(failure) = manifest.first_failure() {
                eprintln!(
                    "stage {} failed: {}",
                    failure.name,
                    failure.error.as_deref().unwrap_or("unknown error")
                );
                let code = failure.error_code.unwrap_or(1).clamp(0, 255) as u8;
                return Ok(ExitCode::from(code));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_cluster(ctx: &Ctx) -> Result<Vec<Artifact>> {
    let panel = pipeline::load_panel(&ctx.out)?;
    let grid = cluster::compute_ecdfs(&panel)?;
    let classing = cluster::kmeans_classes(
        &grid,
        ctx.config.class_count,
        ctx.config.kmeans_restarts,
        ctx.seeds.cluster,
    )?;
    Ok(vec![write_json(&ctx.out, files::CLASSING, &classing)?])
}

fn run_gapstat(ctx: &Ctx) -> Result<Vec<Artifact>> {
    let gap = ctx.config.gap_statistic.as_ref().ok_or_else(|| {
        Error::config("gapstat needs a [gap_statistic] section in the config")
    })?;
    let panel = pipeline::load_panel(&ctx.out)?;
    let grid = cluster::compute_ecdfs(&panel)?;
    let report = cluster::gap_statistic(
        &grid,
        gap.min_k..=gap.max_k,
        gap.reference_draws,
        ctx.config.kmeans_restarts,
        ctx.seeds.gap_statistic,
    )?;
    println!(
        "chosen class count {} over {}..={}",
        report.chosen_k, gap.min_k, gap.max_k
    );
    Ok(vec![write_json(&ctx.out, files::GAPSTAT, &report)?])
}

fn run_estimate(ctx: &Ctx) -> Result<Vec<Artifact>> {
    let panel = pipeline::load_panel(&ctx.out)?;
    let classing: FirmClassing = read_json(&ctx.out.join(files::CLASSING))?;
    let movers = mixture::fit_movers(
        &panel,
        &classing,
        ctx.config.type_count,
        ctx.config.em_restarts,
        ctx.seeds.em,
        &EmOptions::default(),
    )?;
    let model = mixture::fit_stayers(&panel, &classing, &movers)?;
    Ok(vec![write_json(&ctx.out, files::MODEL, &model)?])
}

fn run_assign(ctx: &Ctx) -> Result<Vec<Artifact>> {
    let panel = pipeline::load_panel(&ctx.out)?;
    let classing: FirmClassing = read_json(&ctx.out.join(files::CLASSING))?;
    let model: MixtureModel = read_json(&ctx.out.join(files::MODEL))?;
    let assignment = mixture::map_assign(&panel, &classing, &model)?;
    Ok(vec![write_json(&ctx.out, files::ASSIGNMENT, &assignment)?])
}

fn run_decompose(ctx: &Ctx) -> Result<Vec<Artifact>> {
    let panel = pipeline::load_panel(&ctx.out)?;
    let classing: FirmClassing = read_json(&ctx.out.join(files::CLASSING))?;
    let mut artifacts = Vec::new();

    let mincer = decompose::mincer_kob(&panel)?;
    artifacts.push(write_json(&ctx.out, files::MINCER, &mincer)?);

    let covariates: CakmCovariates = ctx.config.covariates.into();
    let fit_f = decompose::cakm_fit(&panel, &classing, Gender::F, covariates)?;
    let fit_m = decompose::cakm_fit(&panel, &classing, Gender::M, covariates)?;
    artifacts.push(write_json(
        &ctx.out,
        files::CAKM_FEMALE,
        &pipeline::strip_series(&fit_f),
    )?);
    artifacts.push(write_json(
        &ctx.out,
        files::CAKM_MALE,
        &pipeline::strip_series(&fit_m),
    )?);

    let firm_gap = decompose::cakm_kob(&fit_f, &fit_m)?;
    artifacts.push(write_json(&ctx.out, files::FIRM_GAP, &firm_gap)?);

    let var_f = decompose::variance_decomposition(&fit_f.series)?;
    let var_m = decompose::variance_decomposition(&fit_m.series)?;
    artifacts.push(write_json(
        &ctx.out,
        files::VARIANCE,
        &serde_json::json!({ "female": var_f, "male": var_m }),
    )?);
    Ok(artifacts)
}

fn run_counterfactual(ctx: &Ctx, args: &CounterfactualArgs) -> Result<Vec<Artifact>> {
    let panel = pipeline::load_panel(&ctx.out)?;
    let classing: FirmClassing = read_json(&ctx.out.join(files::CLASSING))?;
    let assignment: TypeAssignment = read_json(&ctx.out.join(files::ASSIGNMENT))?;
    let mut artifacts = Vec::new();

    let moments = counterfactual::match_moments(
        &panel,
        &classing,
        &assignment.types,
        ctx.config.type_count,
    )?;
    artifacts.push(write_json(&ctx.out, files::MOMENTS, &moments)?);

    let mode_choice = match args.mode {
        Some(ModeArg::Expectation) => ModeChoice::Expectation,
        Some(ModeArg::Draws) => ModeChoice::Draws,
        None => ctx.config.counterfactual.mode,
    };
    let draws = args.draws.unwrap_or(ctx.config.counterfactual.draws);
    if mode_choice == ModeChoice::Draws && draws == 0 {
        return Err(Error::config("draws mode needs draws >= 1"));
    }
    let mode = match mode_choice {
        ModeChoice::Expectation => Mode::Expectation,
        ModeChoice::Draws => Mode::Draws {
            draws,
            seed: ctx.seeds.draws,
        },
    };
    let subgroups = if args.by.is_empty() {
        ctx.config.counterfactual.subgroups.clone()
    } else {
        args.by.clone()
    };

    let overall = counterfactual::decompose_gap_with(&moments, mode)?;
    let mut subgroup_out = Vec::new();
    let mut skipped_all = Vec::new();
    for name in &subgroups {
        let key = pipeline::parse_subgroup(name)?;
        let (reports, skipped) = counterfactual::subgroup_decompose(
            &panel,
            &classing,
            &assignment.types,
            ctx.config.type_count,
            key,
            mode,
        )?;
        skipped_all.extend(skipped.iter().map(|s| format!("{name}: {s}")));
        subgroup_out.push((name.clone(), reports));
    }
    let payload = pipeline::CounterfactualArtifact {
        overall,
        subgroups: subgroup_out,
        skipped: skipped_all,
    };
    artifacts.push(write_json(&ctx.out, files::COUNTERFACTUAL, &payload)?);

    let theil = pipeline::theil_rows(&moments)?;
    artifacts.push(write_json(&ctx.out, files::THEIL, &theil)?);
    Ok(artifacts)
}

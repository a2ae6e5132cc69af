use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use cgpds::dataset::{load_dataset, read_times, write_dataset, write_predictions, LoadMode, SequenceDataset};
use cgpds::elbo::elbo;
use cgpds::error::CgpdsError;
use cgpds::kernels::KernelFamily;
use cgpds::latent_prior::TemporalGrid;
use cgpds::model_file::{ModelFile, TrainingMeta};
use cgpds::oracle::gradient_check;
use cgpds::predictor::{generate, metrics, reconstruct, PredictionRequest, ReconstructOptions, ReconstructionTask};
use cgpds::model::{CgpdsModel, ModelShape};
use cgpds::synthetic::{random_instance, sample_cgpds, SyntheticConfig};
use cgpds::trainer::{fit, initialize, ModelConfig, StopReason, TrainConfig};

#[derive(Parser)]
#[command(name = "cgpds", version, about = "Collaborative multi-output Gaussian process dynamical systems")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true, env = "CGPDS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV sequence and write the model file and trace.
    Train(TrainArgs),
    /// Predict every output dimension at new time stamps.
    Generate(GenerateArgs),
    /// Fill in the NaN entries of a partially observed sequence.
    Reconstruct(ReconstructArgs),
    /// Compare analytic gradients of the bound with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the bound of a trained model, term by term.
    Elbo(ElboArgs),
    /// Write a dataset sampled from the generative model.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Latent dimension Q.
    #[arg(long, default_value_t = 2)]
    latent_dim: usize,
    /// Number of local processes J.
    #[arg(long, default_value_t = 2)]
    num_local: usize,
    /// Inducing points per process M [default: min(20, N)].
    #[arg(long)]
    inducing: Option<usize>,
    /// Temporal kernel: rbf, periodic or rbf+periodic.
    #[arg(long, default_value = "rbf")]
    kernel_x: KernelFamily,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig, CliError> {
        if self.latent_dim == 0 {
            return Err(CliError::Usage("--latent-dim must be at least 1".into()));
        }
        if self.num_local == 0 {
            return Err(CliError::Usage("--num-local must be at least 1".into()));
        }
        Ok(ModelConfig {
            latent_dim: self.latent_dim,
            num_local: self.num_local,
            inducing: self.inducing,
            kernel_x: self.kernel_x,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV: header, first column "t", one column per output.
    #[arg(long)]
    data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Trace CSV [default: <out> with extension trace.csv].
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    step_size: f64,
    /// Output dimensions per minibatch [default: all].
    #[arg(long)]
    batch_dims: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep the inducing inputs at their initial values.
    #[arg(long)]
    freeze_inducing: bool,
    /// Stop once the full-batch bound improves by less than this fraction over 50 iterations (0 disables).
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args)]
struct TimeArgs {
    /// File with one time stamp per line.
    #[arg(long, conflicts_with_all = ["from", "to", "step"])]
    times: Option<PathBuf>,
    #[arg(long, requires_all = ["to", "step"])]
    from: Option<f64>,
    #[arg(long, requires_all = ["from", "step"])]
    to: Option<f64>,
    #[arg(long, requires_all = ["from", "to"])]
    step: Option<f64>,
}

impl TimeArgs {
    fn grid(&self) -> Result<TemporalGrid, CliError> {
        match (&self.times, self.from, self.to, self.step) {
            (Some(path), ..) => Ok(read_times(std::fs::File::open(path)?)?),
            (None, Some(from), Some(to), Some(step)) => Ok(TemporalGrid::range(from, to, step)?),
            _ => Err(CliError::Usage("give either --times or --from/--to/--step".into())),
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Prediction CSV: t, mean_1..mean_D, var_1..var_D.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    times: TimeArgs,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    /// Partial CSV with the training header; NaN marks a missing entry.
    #[arg(long)]
    data: PathBuf,
    /// Completed CSV: observed entries copied, missing ones set to predictive means.
    #[arg(long)]
    out: PathBuf,
    /// Long-form moments of the missing entries: t, dim, mean, var.
    #[arg(long)]
    moments: Option<PathBuf>,
    /// Complete CSV at the same time stamps; enables error metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Metrics JSON (requires --truth).
    #[arg(long, requires = "truth")]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 0.02)]
    step_size: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a saved model instead of random instances.
    #[arg(long, conflicts_with = "data")]
    model: Option<PathBuf>,
    /// Check the initialization on this dataset instead of random instances.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    init: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances to check (seeds seed, seed+1, ...).
    #[arg(long, default_value_t = 5)]
    instances: u64,
    /// Finite-difference step in the unconstrained parameterization.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Coordinates sampled per parameter block [default: all].
    #[arg(long)]
    coords_per_block: Option<usize>,
}

#[derive(Args)]
struct ElboArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    q: usize,
    #[arg(long, default_value_t = 2)]
    j: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(CgpdsError),
}

impl From<CgpdsError> for CliError {
    fn from(e: CgpdsError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(CgpdsError::Config(_)) => 1,
            CliError::Core(CgpdsError::Numeric { .. } | CgpdsError::Conditioning { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Writes through a temporary file in the target directory and renames it into place.
fn write_atomic<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut std::io::BufWriter<&mut tempfile::NamedTempFile>) -> Result<(), CgpdsError>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(&mut tmp);
        body(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| CliError::Core(e.error.into()))?;
    Ok(())
}

fn center(y: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = y.nrows() as f64;
    let offset: Vec<f64> = y.column_iter().map(|c| c.sum() / n).collect();
    let mut out = y.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-offset[j]);
    }
    (out, offset)
}

fn stop_label(stop: &StopReason) -> String {
    match stop {
        StopReason::IterationCap => "iteration cap".into(),
        StopReason::Converged => "converged".into(),
        StopReason::NonFinite(m) => format!("non-finite: {m}"),
    }
}

fn load_trained(path: &Path) -> Result<(ModelFile, CgpdsModel, DMatrix<f64>), CliError> {
    let file = ModelFile::load(path)?;
    file.training()?;
    let (model, y) = file.to_model()?;
    Ok((file, model, y))
}

fn train(args: &TrainArgs) -> Result<(), CliError> {
    let model_cfg = args.model.config()?;
    let ds = load_dataset(&args.data, LoadMode::Train)?;
    let cfg = TrainConfig {
        iterations: args.iters,
        step_size: args.step_size,
        batch_dims: args.batch_dims.unwrap_or(ds.d()),
        seed: args.seed,
        freeze_inducing: args.freeze_inducing,
        convergence_tol: args.tol,
    };
    cfg.validate(ds.d())?;
    let (y, offset) = center(&ds.y);
    let model = initialize(&ds.grid, &y, &model_cfg, args.seed)?;
    let result = fit(model, &y, &cfg)?;
    let meta = TrainingMeta {
        seed: cfg.seed,
        iterations: cfg.iterations,
        iterations_run: result.iterations_run,
        step_size: cfg.step_size,
        batch_dims: cfg.batch_dims,
        freeze_inducing: cfg.freeze_inducing,
        convergence_tol: cfg.convergence_tol,
        initial_elbo: result.initial_elbo,
        final_elbo: result.final_elbo,
        stop: stop_label(&result.stop),
    };
    let file = ModelFile::from_model(&result.model, &y, &offset, &ds.columns, Some(meta))?;
    let json = file.to_json()?;
    let trace_path = args.trace.clone().unwrap_or_else(|| args.out.with_extension("trace.csv"));
    write_atomic(&trace_path, |w| result.trace.write_csv(w))?;
    write_atomic(&args.out, |w| Ok(w.write_all(json.as_bytes())?))?;
    if let StopReason::NonFinite(m) = &result.stop {
        eprintln!("warning: training stopped early ({m}); saved the best finite state");
    }
    println!("iterations: {}", result.iterations_run);
    println!("initial ELBO: {}", result.initial_elbo);
    println!("final ELBO: {}", result.final_elbo);
    Ok(())
}

fn generate_cmd(args: &GenerateArgs) -> Result<(), CliError> {
    let t_star = args.times.grid()?;
    let (file, model, _) = load_trained(&args.model)?;
    let pred = generate(&model, &PredictionRequest { t_star })?;
    write_atomic(&args.out, |w| write_predictions(w, &pred, Some(&file.y_offset)))?;
    println!("wrote {} rows", pred.times.len());
    Ok(())
}

fn shifted(ds: &SequenceDataset, offset: &[f64], sign: f64) -> DMatrix<f64> {
    let mut y = ds.y.clone();
    for (j, mut col) in y.column_iter_mut().enumerate() {
        col.add_scalar_mut(sign * offset[j]);
    }
    y
}

fn reconstruct_cmd(args: &ReconstructArgs) -> Result<(), CliError> {
    let (file, model, train_y) = load_trained(&args.model)?;
    let ds = load_dataset(&args.data, LoadMode::Reconstruct)?;
    if ds.columns != file.columns {
        return Err(CgpdsError::Input("column names differ from the training data".into()).into());
    }
    let observed = ds
        .observed
        .clone()
        .ok_or_else(|| CgpdsError::Input("nothing to reconstruct: no entry is NaN".into()))?;
    let truth = match &args.truth {
        Some(p) => {
            let t = load_dataset(p, LoadMode::Train)?;
            if t.grid != ds.grid || t.columns != ds.columns {
                return Err(CgpdsError::Input("truth file must share the time stamps and columns of --data".into()).into());
            }
            Some(t)
        }
        None => None,
    };
    let task = ReconstructionTask::from_partial(ds.grid.clone(), shifted(&ds, &file.y_offset, -1.0))?;
    let opts = ReconstructOptions { iterations: args.iters, step_size: args.step_size };
    let rec = reconstruct(&model, &train_y, &task, &opts)?;
    let (ns, d) = ds.y.shape();
    let mut filled = ds.y.clone();
    let mut long = Vec::new();
    for n in 0..ns {
        for j in 0..d {
            if !observed[n][j] {
                let mean = rec.moments.mean[(n, j)] + file.y_offset[j];
                filled[(n, j)] = mean;
                long.push((ds.grid.times()[n], j + 1, mean, rec.moments.variance[(n, j)]));
            }
        }
    }
    let report = match &truth {
        Some(t) => {
            let mask: Vec<Vec<bool>> = observed.iter().map(|r| r.iter().map(|o| !o).collect()).collect();
            let train_var: Vec<f64> = train_y.column_iter().map(|c| c.norm_squared() / c.len() as f64).collect();
            Some(metrics(&filled, &t.y, &mask, &train_var)?)
        }
        None => None,
    };
    if let Some(path) = &args.moments {
        write_atomic(path, |w| {
            let mut csv = csv_writer(w);
            csv.write_record(["t", "dim", "mean", "var"]).map_err(CgpdsError::from)?;
            for (t, j, m, v) in &long {
                csv.write_record([t.to_string(), j.to_string(), m.to_string(), v.to_string()])
                    .map_err(CgpdsError::from)?;
            }
            csv.flush()?;
            Ok(())
        })?;
    }
    if let (Some(path), Some(m)) = (&args.metrics, &report) {
        let doc = serde_json::json!({
            "rmse": m.rmse,
            "smse": m.smse,
            "smse_per_dim": m.smse_per_dim,
            "missing": long.len(),
        });
        let text = serde_json::to_string_pretty(&doc).map_err(CgpdsError::from)?;
        write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    }
    write_atomic(&args.out, |w| write_dataset(w, ds.grid.times(), &ds.columns, &filled))?;
    println!("filled {} missing entries", long.len());
    if let Some(m) = report {
        println!("rmse: {}", m.rmse);
        println!("smse: {}", m.smse);
    }
    Ok(())
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<(), CliError> {
    let cases: Vec<(u64, CgpdsModel, DMatrix<f64>)> = match (&args.model, &args.data) {
        (Some(path), _) => {
            let (model, y) = ModelFile::load(path)?.to_model()?;
            vec![(args.seed, model, y)]
        }
        (None, Some(path)) => {
            let cfg = args.init.config()?;
            let ds = load_dataset(path, LoadMode::Train)?;
            let (y, _) = center(&ds.y);
            vec![(args.seed, initialize(&ds.grid, &y, &cfg, args.seed)?, y)]
        }
        (None, None) => {
            let cfg = args.init.config()?;
            let shape = ModelShape { n: 6, d: 4, q: cfg.latent_dim, j: cfg.num_local, m: cfg.inducing.unwrap_or(3) };
            let mut out = Vec::new();
            for k in 0..args.instances {
                let seed = args.seed.wrapping_add(k);
                let (model, y) = random_instance(seed, shape)?;
                out.push((seed, model, y));
            }
            out
        }
    };
    let mut worst = 0.0f64;
    for (seed, model, y) in &cases {
        let report = gradient_check(model, y, args.step, args.coords_per_block, *seed)?;
        println!("instance seed {seed}: {} coordinates", report.checked);
        for (block, count, err) in &report.per_block {
            if *count > 0 {
                println!("  {block}: {count} coordinates, max relative error {err:.3e}");
            }
        }
        worst = worst.max(report.max_rel_error);
    }
    println!("max relative error: {worst:.3e}");
    Ok(())
}

fn elbo_cmd(args: &ElboArgs) -> Result<(), CliError> {
    let (file, model, y) = load_trained(&args.model)?;
    let b = elbo(&model, &y)?;
    for (name, term) in file.columns.iter().zip(&b.per_dim_terms) {
        println!("likelihood {name}: {term}");
    }
    println!("likelihood total: {}", b.per_dim_terms.iter().sum::<f64>());
    println!("KL inducing: {}", b.kl_inducing_term);
    println!("KL latent: {}", b.kl_latent_term);
    println!("ELBO: {}", b.total);
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = SyntheticConfig {
        n: args.n,
        d: args.d,
        q: args.q,
        j: args.j,
        noise_variance: args.noise,
        seed: args.seed,
        ..Default::default()
    };
    let data = sample_cgpds(&cfg)?;
    let columns: Vec<String> = (1..=args.d).map(|i| format!("y{i}")).collect();
    write_atomic(&args.out, |w| write_dataset(w, data.grid.times(), &columns, &data.y))?;
    println!("wrote {}×{} dataset", args.n, args.d);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Elbo(a) => elbo_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

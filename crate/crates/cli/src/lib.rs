//! Command-line front end: synthetic data, training, scoring, clustering,
//! evaluation, attribution and latent export.

pub mod config;

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use etnet::data::{load_windows, synth_test, synth_train, write_windows, Window, CSV_VERSION_LINE};
use etnet::metrics::{auc, nmi, MetricReport};
use etnet::model::{EtNetModel, FORMAT_VERSION};
use etnet::tasks::{self, TrainingLatents};
use etnet::training::{train_with_observer, write_loss_log};
use serde::Serialize;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] etnet::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for usage, configuration and input-compatibility problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use etnet::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Usage(_) | E::Parse { .. } | E::Incompatible(_) | E::Json(_) | E::Csv(_)) => 2,
            CliError::Core(E::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "etnet", version, about = "Event-triggered time series anomaly detection and clustering")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed; overrides the config file and ETNET_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model file.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Window CSV to operate on.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic wave benchmark: train.csv, test.csv, manifest.json.
    Synth,
    /// Train a model: model.json and loss.csv.
    Train,
    /// Per-window energies and anomaly scores: scores.csv.
    Score,
    /// Cluster labels: clusters.csv.
    Cluster,
    /// AUC of a scores file or NMI of a clusters file against --data: metrics.json.
    Eval {
        #[arg(long, conflicts_with = "clusters", required_unless_present = "clusters")]
        scores: Option<PathBuf>,
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Reference training windows explaining one window of --data: attribution.json.
    Attribute {
        /// Window id in --data.
        #[arg(long)]
        id: String,
        /// Training windows (defaults to data.train from the config).
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Extended latents of both branches: latents.csv.
    ExportLatent,
}

/// Parsed flags plus the resolved configuration.
struct Ctx {
    cli: Cli,
    cfg: RunConfig,
}

impl Ctx {
    fn out_dir(&self) -> PathBuf {
        self.cli.out.clone().or_else(|| self.cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."))
    }

    fn model_path(&self) -> PathBuf {
        self.cli.model.clone().unwrap_or_else(|| self.out_dir().join("model.json"))
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.cli.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn windows(&self, path: &Path) -> Result<Vec<Window>> {
        require_file(path)?;
        Ok(load_windows(path, self.cfg.data.samples_per_window)?)
    }

    fn model(&self) -> Result<EtNetModel> {
        let path = self.model_path();
        require_file(&path)?;
        Ok(EtNetModel::load(&path)?)
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file {} does not exist", path.display())))
    }
}

fn data_arg(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} given (use --data or the config file)")))
}

/// Writes every file only after all of them have been produced.
fn emit(ctx: &Ctx, files: Vec<(&str, Vec<u8>)>) -> Result<()> {
    let dir = ctx.out_dir();
    fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
        ctx.say(format!("wrote {}", path.display()));
    }
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(etnet::Error::from)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Runs a parsed command line; `env_seed` is the value of `ETNET_SEED`, if set.
pub fn run(cli: Cli, env_seed: Option<&str>) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.resolve_seed(cli.seed, env_seed)?;
    let ctx = Ctx { cli, cfg };
    match &ctx.cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Score => cmd_score(&ctx),
        Command::Cluster => cmd_cluster(&ctx),
        Command::Eval { scores, clusters } => cmd_eval(&ctx, scores.as_deref(), clusters.as_deref()),
        Command::Attribute { id, train, points } => cmd_attribute(&ctx, id, train.as_deref(), *points),
        Command::ExportLatent => cmd_export_latent(&ctx),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    seed: u64,
    synth: &'a etnet::data::SynthConfig,
    train_windows: usize,
    test_windows: usize,
    window_len: usize,
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let spec = &ctx.cfg.synth;
    let train = synth_train(spec)?;
    let test = synth_test(spec)?;
    let mut train_csv = Vec::new();
    write_windows(&mut train_csv, &train)?;
    let mut test_csv = Vec::new();
    write_windows(&mut test_csv, &test)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: spec.seed,
        synth: spec,
        train_windows: train.len(),
        test_windows: test.len(),
        window_len: spec.window_len(),
    };
    emit(ctx, vec![("train.csv", train_csv), ("test.csv", test_csv), ("manifest.json", json_bytes(&manifest)?)])
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let path = data_arg(&ctx.cli.data, &ctx.cfg.data.train, "training data")?;
    let windows = ctx.windows(&path)?;
    let data: Vec<Vec<f64>> = windows.into_iter().map(|w| w.values).collect();
    let model = EtNetModel::initialize(ctx.cfg.train.clone(), &data)?;
    let quiet = ctx.cli.quiet;
    let (model, reports) = train_with_observer(model, &data, &mut |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4} {}  recon {:.6}  energy {:.4}  total {:.6}",
                r.epoch,
                r.branch.name(),
                r.recon_loss,
                r.energy_loss,
                r.total
            );
        }
    })?;
    let mut log = Vec::new();
    write_loss_log(&mut log, &reports)?;
    let mut model_json = model.to_json()?;
    model_json.push('\n');
    emit(ctx, vec![("model.json", model_json.into_bytes()), ("loss.csv", log)])
}

fn cmd_score(ctx: &Ctx) -> Result<()> {
    let path = data_arg(&ctx.cli.data, &ctx.cfg.data.test, "data")?;
    let windows = ctx.windows(&path)?;
    let model = ctx.model()?;
    let rows = windows
        .iter()
        .map(|w| Ok((w.id.clone(), tasks::score(&model, &w.values)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    tasks::write_scores(&mut out, &rows)?;
    emit(ctx, vec![("scores.csv", out)])
}

fn cmd_cluster(ctx: &Ctx) -> Result<()> {
    let path = data_arg(&ctx.cli.data, &ctx.cfg.data.test, "data")?;
    let windows = ctx.windows(&path)?;
    let model = ctx.model()?;
    let rows = windows
        .iter()
        .map(|w| Ok((w.id.clone(), tasks::cluster_label(&model, &w.values)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    tasks::write_clusters(&mut out, &rows)?;
    emit(ctx, vec![("clusters.csv", out)])
}

/// Rows of a versioned CSV written by this tool, keyed by header name.
fn read_table(path: &Path) -> Result<Vec<HashMap<String, String>>> {
    require_file(path)?;
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    match text.lines().next() {
        Some(line) if line.trim() == CSV_VERSION_LINE => {}
        Some(line) if line.starts_with("# format-version:") => {
            return Err(etnet::Error::Incompatible(format!("{}: unsupported {}", path.display(), line.trim())).into())
        }
        _ => return Err(etnet::Error::Incompatible(format!("{}: missing format-version line", path.display())).into()),
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(etnet::Error::from)?.clone();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(etnet::Error::from)?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok(rows)
}

fn field<'a>(row: &'a HashMap<String, String>, name: &str, path: &Path) -> Result<&'a str> {
    row.get(name)
        .map(String::as_str)
        .ok_or_else(|| CliError::Usage(format!("{} has no {name} column", path.display())))
}

fn cmd_eval(ctx: &Ctx, scores: Option<&Path>, clusters: Option<&Path>) -> Result<()> {
    let truth_path = data_arg(&ctx.cli.data, &ctx.cfg.data.test, "ground truth")?;
    let input = scores.or(clusters).expect("clap requires one input");
    let rows = read_table(input)?;
    let truth = ctx.windows(&truth_path)?;
    let by_id: HashMap<&str, &Window> = truth.iter().map(|w| (w.id.as_str(), w)).collect();
    let lookup = |row: &HashMap<String, String>| -> Result<&Window> {
        let id = field(row, "window_id", input)?;
        by_id
            .get(id)
            .copied()
            .ok_or_else(|| CliError::Usage(format!("window {id} is missing from {}", truth_path.display())))
    };
    let (metric, value) = if scores.is_some() {
        let mut ys = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for row in &rows {
            let w = lookup(row)?;
            let a = w.anomaly.ok_or_else(|| CliError::Usage(format!("window {} has no anomaly label", w.id)))?;
            let y: f64 = field(row, "y", input)?
                .parse()
                .map_err(|_| CliError::Usage(format!("bad score in {}", input.display())))?;
            ys.push(y);
            labels.push(a > 0);
        }
        ("auc", auc(&ys, &labels)?)
    } else {
        let mut pred = Vec::with_capacity(rows.len());
        let mut truth_labels = Vec::with_capacity(rows.len());
        for row in &rows {
            let w = lookup(row)?;
            let c = w.class.ok_or_else(|| CliError::Usage(format!("window {} has no class label", w.id)))?;
            pred.push(field(row, "label", input)?.to_string());
            truth_labels.push(c);
        }
        ("nmi", nmi(&pred, &truth_labels)?)
    };
    let report = MetricReport {
        format_version: FORMAT_VERSION,
        metric: metric.to_string(),
        value,
        n: rows.len(),
        config: serde_json::json!({
            "input": input.display().to_string(),
            "truth": truth_path.display().to_string(),
        }),
    };
    ctx.say(format!("{metric} = {value:.4} over {} windows", rows.len()));
    emit(ctx, vec![("metrics.json", json_bytes(&report)?)])
}

fn cmd_attribute(ctx: &Ctx, id: &str, train: Option<&Path>, points: Option<usize>) -> Result<()> {
    let data_path = data_arg(&ctx.cli.data, &ctx.cfg.data.test, "data")?;
    let train_path = train
        .map(Path::to_path_buf)
        .or_else(|| ctx.cfg.data.train.clone())
        .ok_or_else(|| CliError::Usage("no training windows given (use --train or data.train)".into()))?;
    let windows = ctx.windows(&data_path)?;
    let training = ctx.windows(&train_path)?;
    let model = ctx.model()?;
    let target = windows
        .iter()
        .find(|w| w.id == id)
        .ok_or_else(|| CliError::Usage(format!("window {id} not found in {}", data_path.display())))?;
    let ids = training.iter().map(|w| w.id.clone()).collect();
    let values: Vec<Vec<f64>> = training.into_iter().map(|w| w.values).collect();
    let latents = TrainingLatents::compute(&model, ids, &values)?;
    let result = tasks::attribute(&model, id, &target.values, &latents, points.unwrap_or(ctx.cfg.attribution_points))?;
    emit(ctx, vec![("attribution.json", json_bytes(&result)?)])
}

fn cmd_export_latent(ctx: &Ctx) -> Result<()> {
    let path = data_arg(&ctx.cli.data, &ctx.cfg.data.test, "data")?;
    let windows = ctx.windows(&path)?;
    let model = ctx.model()?;
    let rows = windows
        .iter()
        .map(|w| Ok((w.id.clone(), tasks::latents(&model, &w.values)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    tasks::write_latents(&mut out, model.extended_dim(), &rows)?;
    emit(ctx, vec![("latents.csv", out)])
}

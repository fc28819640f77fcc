use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use memoe::em::{self, FittedModel};
use memoe::inference;
use memoe::io::{
    self, atomic_write, fmt_f64, ConfigSource, LayeredConfig, LongCsvSchema, ModelArchive, CONFIG_KEYS,
};
use memoe::predict::{self, DEFAULT_GRID_CELLS};
use memoe::select;
use memoe::sim::{self, Method, SimDesign, SplitPolicy, StudyConfig};
use memoe::MemoeError;

#[derive(Parser)]
#[command(name = "memoe", version, about = "Mixed-effects mixture-of-experts regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a long-format CSV.
    Fit(FitArgs),
    /// Prediction sets and point predictions for new rows.
    Predict(PredictArgs),
    /// Run a simulation study and write its summary.
    Simulate(SimulateArgs),
    /// Score a predictions file against observed responses.
    Evaluate(EvaluateArgs),
    /// Write one simulated dataset as long-format CSV.
    Generate(GenerateArgs),
    /// Choose the number of experts by cross-validation.
    SelectK(SelectArgs),
}

#[derive(Args)]
struct FitFlags {
    /// key = value file of fit settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_starts: Option<usize>,
    #[arg(long)]
    max_em_iters: Option<usize>,
    /// full, zero_mean or off
    #[arg(long)]
    random_effects: Option<String>,
    /// x or xz
    #[arg(long)]
    gating: Option<String>,
}

impl FitFlags {
    fn layered(&self) -> Result<LayeredConfig> {
        let mut layered = LayeredConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            layered.apply_file_text(&text)?;
        }
        let flags = [
            ("k", self.k.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("n_starts", self.n_starts.map(|v| v.to_string())),
            ("max_em_iters", self.max_em_iters.map(|v| v.to_string())),
            ("random_effects", self.random_effects.clone()),
            ("gating", self.gating.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                layered.set(key, &v, ConfigSource::Flag)?;
            }
        }
        layered.config.validate()?;
        Ok(layered)
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[command(flatten)]
    fit: FitFlags,
    /// Model archive to write
    #[arg(long)]
    out: PathBuf,
    /// Fit report CSV (defaults to <out>.report.csv)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Skip the sandwich standard errors
    #[arg(long)]
    no_se: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Covariate CSV; the response column is optional
    #[arg(long)]
    data: PathBuf,
    /// Column binding (defaults to the schema stored with the model)
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    q: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_CELLS)]
    grid_cells: usize,
    /// Interval CSV: row_id,lo,hi,achieved_mass
    #[arg(long)]
    out: PathBuf,
    /// Point prediction CSV (defaults to <out>.points.csv)
    #[arg(long)]
    points: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    design: SimDesign,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random-effect variance; repeat for several values
    #[arg(long, default_values_t = [1.0])]
    tau: Vec<f64>,
    /// Comma-separated subset of memoe,remoe,moe,lmm
    #[arg(long, value_delimiter = ',', default_values_t = Method::ALL.to_vec())]
    methods: Vec<Method>,
    /// Experts for the mixture methods (defaults to the design's count)
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_starts: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    q: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_CELLS)]
    grid_cells: usize,
    /// Train/test split: observation or subject
    #[arg(long, default_value = "observation")]
    split: SplitPolicy,
    /// Summary CSV
    #[arg(long)]
    out: PathBuf,
    /// Per-replication CSV
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Interval CSV written by `predict`
    #[arg(long)]
    predictions: PathBuf,
    /// Point prediction CSV (defaults to <predictions>.points.csv)
    #[arg(long)]
    points: Option<PathBuf>,
    /// CSV with the observed responses
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Metric CSV (metric,value)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    design: SimDesign,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Data CSV
    #[arg(long)]
    out: PathBuf,
    /// Schema file for the data (defaults to <out>.schema)
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Hold out this fraction for a test file written to <out>.test.csv
    #[arg(long)]
    test_frac: Option<f64>,
    /// Train/test split: observation or subject
    #[arg(long, default_value = "observation")]
    split: SplitPolicy,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[command(flatten)]
    fit: FitFlags,
    /// Candidate expert counts
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
    k_range: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Table CSV (k,fold,rmse,error)
    #[arg(long)]
    out: PathBuf,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Files written so far; removed again if the command fails.
#[derive(Default)]
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn write(&mut self, path: &Path, f: impl FnOnce(&mut dyn Write) -> memoe::Result<()>) -> Result<()> {
        atomic_write(path, f).with_context(|| format!("writing {}", path.display()))?;
        self.0.push(path.to_path_buf());
        Ok(())
    }

    fn discard(&self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn csv_rows(out: &mut dyn Write, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> memoe::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn fit_report_rows(fitted: &FittedModel, layered: &LayeredConfig, se: Option<&inference::SandwichReport>) -> Vec<Vec<String>> {
    let row = |section: &str, key: &str, index: String, value: String| vec![section.into(), key.into(), index, value];
    let mut rows = Vec::new();
    for key in CONFIG_KEYS {
        rows.push(row("config", key, layered.source(key).name().into(), layered.value(key)));
    }
    for (i, v) in fitted.loglik_trace.iter().enumerate() {
        rows.push(row("trace", "loglik", i.to_string(), fmt_f64(*v)));
    }
    for s in &fitted.starts {
        let value = s.final_loglik.map_or_else(|| "NA".into(), fmt_f64);
        rows.push(row("start", "loglik", s.start.to_string(), value));
    }
    let d = &fitted.diagnostics;
    rows.push(row("diagnostics", "best_start", String::new(), fitted.best_start.to_string()));
    rows.push(row("diagnostics", "converged", String::new(), fitted.converged.to_string()));
    rows.push(row("diagnostics", "em_iters", String::new(), fitted.em_iters.to_string()));
    rows.push(row("diagnostics", "max_rel_dip", String::new(), fmt_f64(d.max_rel_dip)));
    rows.push(row("diagnostics", "dip_warnings", String::new(), d.dip_warnings.to_string()));
    rows.push(row("diagnostics", "unconverged_modes", String::new(), d.unconverged_modes.to_string()));
    rows.push(row("diagnostics", "floored_curvatures", String::new(), d.floored_curvatures.to_string()));
    rows.push(row("diagnostics", "alpha_clamped", String::new(), d.alpha_clamped.to_string()));
    rows.push(row("diagnostics", "ridge_warnings", String::new(), d.ridge_warnings.to_string()));
    rows.push(row("diagnostics", "max_resp_row_error", String::new(), fmt_f64(d.max_resp_row_error)));
    rows.push(row("diagnostics", "min_sigma2", String::new(), fmt_f64(d.min_sigma2)));
    rows.push(row("diagnostics", "min_sigma_eig", String::new(), fmt_f64(d.min_sigma_eig)));
    for (k, dead) in d.degenerate_experts.iter().enumerate() {
        rows.push(row("diagnostics", "degenerate_expert", k.to_string(), dead.to_string()));
    }
    let p = &fitted.params;
    for k in 0..p.n_experts() {
        for c in 0..p.beta.ncols() {
            rows.push(row("estimate", "beta", format!("{k}:{c}"), fmt_f64(p.beta[(k, c)])));
        }
        rows.push(row("estimate", "sigma2", k.to_string(), fmt_f64(p.sigma2[k])));
    }
    if let Some(report) = se {
        for (k, e) in report.experts.iter().enumerate() {
            for c in 0..e.se.len() {
                rows.push(row("se", "beta", format!("{k}:{c}"), fmt_f64(e.se[c])));
            }
        }
    }
    rows
}

fn cmd_fit(a: &FitArgs, outputs: &mut Outputs) -> Result<()> {
    let schema = LongCsvSchema::load(&a.schema)?;
    let layered = a.fit.layered()?;
    for key in CONFIG_KEYS {
        info!("config {key} = {} ({})", layered.value(key), layered.source(key).name());
    }
    let data = io::load_long_csv(&a.data, &schema)?;
    info!("{} subjects, {} observations", data.n_subjects(), data.total_obs());
    let fitted = em::fit(&data, &layered.config)?;
    let se = if a.no_se { None } else { Some(inference::sandwich(&fitted, &data)?) };
    let archive = ModelArchive::from_fitted(&fitted, Some(schema));
    archive.validate()?;
    let text = archive.to_json()?;
    outputs.write(&a.out, |w| Ok(w.write_all(text.as_bytes())?))?;
    let report = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".report.csv"));
    let rows = fit_report_rows(&fitted, &layered, se.as_ref());
    outputs.write(&report, |w| csv_rows(w, &["section", "key", "index", "value"], rows))?;
    println!("loglik={} converged={} iterations={}", fmt_f64(fitted.loglik()), fitted.converged, fitted.em_iters);
    Ok(())
}

fn cmd_predict(a: &PredictArgs, outputs: &mut Outputs) -> Result<()> {
    let archive = io::load_model(&a.model)?;
    let schema = match (&a.schema, &archive.schema) {
        (Some(path), _) => LongCsvSchema::load(path)?,
        (None, Some(s)) => s.clone(),
        (None, None) => bail!("the model stores no schema; pass --schema"),
    };
    let rows = io::load_predict_rows(&a.data, &schema)?;
    let mut intervals = Vec::new();
    let mut points = Vec::new();
    for r in &rows {
        let set = predict::prediction_set_for(&r.input, &archive.params, &archive.design_sums, a.q, a.grid_cells)
            .with_context(|| format!("row {}", r.row_id))?;
        for (lo, hi) in &set.intervals {
            intervals.push(vec![r.row_id.clone(), fmt_f64(*lo), fmt_f64(*hi), fmt_f64(set.achieved_mass)]);
        }
        let point = archive.subject_effects.predict(&r.subject, &r.input, &archive.params)?;
        points.push(vec![r.row_id.clone(), fmt_f64(point)]);
    }
    outputs.write(&a.out, |w| csv_rows(w, &["row_id", "lo", "hi", "achieved_mass"], intervals))?;
    let points_path = a.points.clone().unwrap_or_else(|| with_suffix(&a.out, ".points.csv"));
    outputs.write(&points_path, |w| csv_rows(w, &["row_id", "prediction"], points))?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, outputs: &mut Outputs) -> Result<()> {
    let mut cfg = StudyConfig::new(a.design, a.tau.clone(), a.reps, a.methods.clone(), a.seed);
    if let Some(k) = a.k {
        cfg.fit.k = k;
    }
    if let Some(n) = a.n_starts {
        cfg.fit.n_starts = n;
    }
    cfg.q = a.q;
    cfg.split = a.split;
    cfg.grid_cells = a.grid_cells;
    let report = sim::run_study(&cfg)?;
    outputs.write(&a.out, |w| report.write_summary_csv(w))?;
    if let Some(path) = &a.records {
        outputs.write(path, |w| report.write_records_csv(w))?;
    }
    Ok(())
}

fn read_csv(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| anyhow!("{}: missing column '{name}'", path.display()))
}

fn parse_cell(rec: &csv::StringRecord, idx: usize, line: usize, path: &Path) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("");
    raw.trim()
        .parse()
        .map_err(|_| anyhow!("{} line {line}: not a number: '{raw}'", path.display()))
}

fn cmd_evaluate(a: &EvaluateArgs, outputs: &mut Outputs) -> Result<()> {
    let schema = LongCsvSchema::load(&a.schema)?;
    let truth = io::load_predict_rows(&a.data, &schema)?;
    let (header, rows) = read_csv(&a.predictions)?;
    let (id, lo, hi) = (
        column(&header, "row_id", &a.predictions)?,
        column(&header, "lo", &a.predictions)?,
        column(&header, "hi", &a.predictions)?,
    );
    let mut sets: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        let interval = (parse_cell(r, lo, i + 2, &a.predictions)?, parse_cell(r, hi, i + 2, &a.predictions)?);
        sets.entry(r.get(id).unwrap_or("").to_string()).or_default().push(interval);
    }
    let points_path = a.points.clone().unwrap_or_else(|| with_suffix(&a.predictions, ".points.csv"));
    let (header, rows) = read_csv(&points_path)?;
    let (pid, pv) = (column(&header, "row_id", &points_path)?, column(&header, "prediction", &points_path)?);
    let mut points = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        points.insert(r.get(pid).unwrap_or("").to_string(), parse_cell(r, pv, i + 2, &points_path)?);
    }
    let (mut sq, mut hits, mut length) = (Vec::new(), 0usize, Vec::new());
    for t in &truth {
        let y = t.y.ok_or_else(|| anyhow!("row {}: no observed response", t.row_id))?;
        let p = points.get(&t.row_id).ok_or_else(|| anyhow!("row {}: no point prediction", t.row_id))?;
        let set = sets.get(&t.row_id).ok_or_else(|| anyhow!("row {}: no prediction set", t.row_id))?;
        sq.push((y - p).powi(2));
        hits += set.iter().any(|&(l, h)| l <= y && y <= h) as usize;
        length.push(set.iter().map(|(l, h)| h - l).sum::<f64>());
    }
    let n = truth.len() as f64;
    let metrics = vec![
        vec!["pmse".into(), fmt_f64(memoe::linalg::pairwise_sum(&sq) / n)],
        vec!["coverage".into(), fmt_f64(hits as f64 / n)],
        vec!["mean_length".into(), fmt_f64(memoe::linalg::pairwise_sum(&length) / n)],
        vec!["n".into(), truth.len().to_string()],
    ];
    for m in &metrics {
        println!("{}={}", m[0], m[1]);
    }
    outputs.write(&a.out, |w| csv_rows(w, &["metric", "value"], metrics))?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs, outputs: &mut Outputs) -> Result<()> {
    let simulated = a.design.generate(a.tau, &mut sim::rep_rng(a.seed, 0))?;
    let schema = a.design.schema();
    let data = match a.test_frac {
        Some(frac) => {
            let mut rng = sim::rep_rng(a.seed, 1);
            let (train, test) = sim::split(&simulated.dataset, a.split, frac, &mut rng)?;
            let test_path = with_suffix(&a.out, ".test.csv");
            outputs.write(&test_path, |w| io::write_long_csv(&test, &schema, w))?;
            train
        }
        None => simulated.dataset,
    };
    outputs.write(&a.out, |w| io::write_long_csv(&data, &schema, w))?;
    let schema_path = a.schema.clone().unwrap_or_else(|| with_suffix(&a.out, ".schema"));
    let text = schema.to_text();
    outputs.write(&schema_path, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(())
}

fn cmd_select(a: &SelectArgs, outputs: &mut Outputs) -> Result<()> {
    let schema = LongCsvSchema::load(&a.schema)?;
    let layered = a.fit.layered()?;
    let data = io::load_long_csv(&a.data, &schema)?;
    let table = select::select_k(&data, &a.k_range, a.folds, &layered.config, layered.config.seed)?;
    let mut rows = Vec::new();
    for s in &table.scores {
        for (f, o) in s.folds.iter().enumerate() {
            rows.push(match o {
                select::FoldOutcome::Rmse(r) => vec![s.k.to_string(), f.to_string(), fmt_f64(*r), String::new()],
                select::FoldOutcome::Failed(e) => vec![s.k.to_string(), f.to_string(), "NA".into(), e.clone()],
            });
        }
    }
    outputs.write(&a.out, |w| csv_rows(w, &["k", "fold", "rmse", "error"], rows))?;
    println!("selected_k={}", table.selected);
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.chain().find_map(|c| c.downcast_ref::<MemoeError>()) {
        Some(MemoeError::Dimension(_)) => "dimension",
        Some(MemoeError::Domain(_)) => "domain",
        Some(MemoeError::Decomposition(_)) => "decomposition",
        Some(MemoeError::InvalidParams(_)) => "invalid_params",
        Some(MemoeError::Fit(_)) => "fit",
        Some(MemoeError::Data { .. }) => "data",
        Some(MemoeError::Subject { .. }) => "subject",
        Some(MemoeError::Input(_)) => "input",
        Some(MemoeError::Archive(_)) => "archive",
        Some(MemoeError::Config(_)) => "config",
        Some(MemoeError::Io(_)) => "io",
        Some(MemoeError::Csv(_)) => "csv",
        Some(MemoeError::Json(_)) => "json",
        None => "error",
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MEMOE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| MemoeError::Config(format!("MEMOE_THREADS must be a positive integer, got '{v}'")))?;
        memoe::par::set_max_threads(n);
    }
    Ok(())
}

fn run(cli: &Cli, outputs: &mut Outputs) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, outputs),
        Command::Predict(a) => cmd_predict(a, outputs),
        Command::Simulate(a) => cmd_simulate(a, outputs),
        Command::Evaluate(a) => cmd_evaluate(a, outputs),
        Command::Generate(a) => cmd_generate(a, outputs),
        Command::SelectK(a) => cmd_select(a, outputs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut outputs = Outputs::default();
    match run(&cli, &mut outputs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            outputs.discard();
            let message = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {message}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use mortsmooth::confounding::{decorrelate_covariate, rate_ratio, standardize_covariate, Axis, RemovalCount};
use mortsmooth::data::crude::crude_rates_csv;
use mortsmooth::data::export::{export_fit, export_report, read_metadata, ReportTables, RunMetadata, METADATA_FILE};
use mortsmooth::data::{crude_rates, parse_grouping, simulate_dataset, Dataset, SimulationInput};
use mortsmooth::graph::AdjacencyGraph;
use mortsmooth::inference::fit::{evaluate_grid, DEFAULT_SEED};
use mortsmooth::inference::{compute_dic, compute_waic, find_mode, fit_model, FitResult, GridConfig};
use mortsmooth::model::{assemble_model, parse_model_spec, AssembledModel, BlockRole, ModelKind, ModelSpec};
use mortsmooth::oracle::{grid_posterior, mcmc_sample_with, GridOracleConfig, McmcConfig, OracleResult};
use mortsmooth::products::{
    cell_rate_estimates, exceedance_effect, exceedance_vs_age_mean, marginal_pattern_rates, variance_decomposition,
    ExceedanceReference, DEFAULT_PRODUCT_DRAWS, PER_100K,
};
use mortsmooth::structure::{eigendecompose, icar_structure, rw_structure, InteractionType};
use mortsmooth::{Error, Result};

/// Bayesian smoothing of stratified mortality counts.
#[derive(Debug, Parser)]
#[command(name = "mortsmooth", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Crude rates per 100,000 with 95% intervals over chosen strata.
    Aggregate(AggregateArgs),
    /// Fit one model and write the fit archive.
    Fit(FitArgs),
    /// Fit the additive model and interaction types I-IV; tabulate DIC and WAIC.
    Compare(CompareArgs),
    /// Pattern rates, cell rates, exceedance probabilities and variance shares.
    Report(ReportArgs),
    /// Remove the large-scale component of a covariate (simplified spatial+).
    Decorrelate(DecorrelateArgs),
    /// Draw a synthetic dataset from a model's priors.
    Simulate(SimulateArgs),
    /// Reference posterior by adaptive MCMC or quadrature (small models only).
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
struct AggregateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated keys from sex, age_group, age_band, year, area, rurality.
    #[arg(long, default_value = "")]
    by: String,
    /// Keep negative lower interval bounds.
    #[arg(long)]
    no_clamp: bool,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Directory with deaths.csv, population.csv and covariates/.
    #[arg(long)]
    data: PathBuf,
    /// Edge list of the area adjacency graph (age-space models).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// `index,label` table fixing the area order of the graph.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Preset (male_agetime, female_agetime, male_agespace, female_agespace) or spec file.
    #[arg(long)]
    spec: String,
    /// Overrides the sex selected by the specification.
    #[arg(long)]
    sex: Option<String>,
    #[arg(long, default_value_t = 0.75)]
    grid_step: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Posterior draws behind DIC and WAIC.
    #[arg(long, default_value_t = 1000)]
    draws: usize,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Reference {
    RateScale,
    Joint,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Reuse the θ grid of an earlier `fit` archive instead of searching again.
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PRODUCT_DRAWS)]
    product_draws: usize,
    /// Reference level for area exceedance in age-space models.
    #[arg(long, value_enum, default_value_t = Reference::RateScale)]
    reference: Reference,
}

#[derive(Debug, Args)]
struct DecorrelateArgs {
    /// `label,value` CSV.
    #[arg(long)]
    covariate: PathBuf,
    /// Spatial covariate: decorrelate against the iCAR structure of this graph.
    #[arg(long, conflicts_with = "axis_length")]
    graph: Option<PathBuf>,
    #[arg(long, requires = "graph")]
    labels: Option<PathBuf>,
    /// Temporal covariate: decorrelate against a random walk of this length.
    #[arg(long)]
    axis_length: Option<usize>,
    /// Random-walk order for temporal covariates.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    order: u8,
    #[arg(long)]
    k: usize,
    /// Remove exactly k eigenvectors instead of the k+1 in `U_{n-k}..U_n`.
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    spec: String,
    /// Comma-separated age-group labels.
    #[arg(long, default_value = "10-19,20-29,30-39,40-49,50-59,60-69,70-79,80+")]
    ages: String,
    /// Year range `first-last` for age-time models.
    #[arg(long)]
    years: Option<String>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Log-precisions in model order; `inf` switches a block off.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Vec<f64>,
    #[arg(long, default_value_t = -9.0, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Vec<f64>,
    /// `name=file.csv` with `label,value` rows, one per spec covariate.
    #[arg(long = "covariate")]
    covariates: Vec<String>,
    /// Population of every cell.
    #[arg(long, default_value_t = 1e5)]
    exposure: f64,
    #[arg(long, default_value = "M")]
    sex: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OracleKind {
    Mcmc,
    Grid,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = OracleKind::Mcmc)]
    method: OracleKind,
    #[arg(long, default_value_t = 100_000)]
    iterations: usize,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Condition on these log-precisions instead of sampling them.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    #[arg(long, default_value_t = 401)]
    grid_points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
            }
            fs::write(p, text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::Data(format!("standard output: {e}"))),
    }
}

fn load_spec(arg: &str, sex: Option<&str>) -> Result<ModelSpec> {
    let mut spec = match ModelSpec::preset(arg) {
        Some(s) => s,
        None => {
            let path = Path::new(arg);
            if !path.is_file() {
                return Err(usage(format!("{arg:?} is neither a preset nor a specification file")));
            }
            parse_model_spec(&read_text(path)?)?
        }
    };
    if let Some(s) = sex {
        spec.sex = Some(s.to_string());
    }
    Ok(spec)
}

fn load_graph(graph: Option<&Path>, labels: Option<&Path>) -> Result<Option<AdjacencyGraph>> {
    graph.map(|g| AdjacencyGraph::load(g, labels)).transpose()
}

fn load_model(args: &ModelArgs) -> Result<AssembledModel> {
    let spec = load_spec(&args.spec, args.sex.as_deref())?;
    let dataset = Dataset::load_dir(&args.data)?;
    let graph = load_graph(args.graph.as_deref(), args.labels.as_deref())?;
    let model = assemble_model(&spec, &dataset, graph.as_ref())?;
    info!(
        "{}: {} cells, {} latent coordinates, {} hyperparameters",
        spec.to_config(),
        model.cells.len(),
        model.n_latent(),
        model.n_hyper()
    );
    Ok(model)
}

fn grid_config(args: &ModelArgs) -> GridConfig {
    GridConfig {
        step: args.grid_step,
        seed: args.seed,
        n_draws: args.draws,
        ..GridConfig::default()
    }
}

fn fit_with_metadata(model: &AssembledModel, config: &GridConfig) -> Result<(FitResult, RunMetadata)> {
    let fit = fit_model(model, config)?;
    let dic = compute_dic(&fit.diagnostics)?;
    let waic = compute_waic(&fit.diagnostics)?;
    let meta = RunMetadata::from_fit(model, &fit, Some(dic), Some(waic));
    Ok((fit, meta))
}

fn run_aggregate(args: &AggregateArgs) -> Result<()> {
    let grouping = parse_grouping(&args.by)?;
    let dataset = Dataset::load_dir(&args.data)?;
    let rows = crude_rates(&dataset, &grouping, !args.no_clamp)?;
    write_output(args.out.as_deref(), &crude_rates_csv(&grouping, &rows))
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (fit, meta) = fit_with_metadata(&model, &grid_config(&args.model))?;
    info!("{} grid points, θ mode {:?}", fit.points.len(), fit.theta_mode);
    export_fit(&args.out, &model, &fit, &meta)
}

fn interaction_label(i: Option<InteractionType>) -> String {
    i.map_or("additive".to_string(), |t| format!("type {t}"))
}

fn run_compare(args: &CompareArgs) -> Result<()> {
    let base = load_model(&args.model)?.spec;
    let dataset = Dataset::load_dir(&args.model.data)?;
    let graph = load_graph(args.model.graph.as_deref(), args.model.labels.as_deref())?;
    let config = grid_config(&args.model);
    let candidates: Vec<Option<InteractionType>> =
        std::iter::once(None).chain(InteractionType::ALL.map(Some)).collect();
    let rows: Vec<String> = candidates
        .par_iter()
        .map(|&inter| -> Result<String> {
            let model = assemble_model(&base.with_interaction(inter), &dataset, graph.as_ref())?;
            let fit = fit_model(&model, &config)?;
            let dic = compute_dic(&fit.diagnostics)?;
            let waic = compute_waic(&fit.diagnostics)?;
            info!("{}: DIC {:.2}, WAIC {:.2}", interaction_label(inter), dic.dic, waic.waic);
            Ok(format!(
                "{},{},{},{},{},{}\n",
                interaction_label(inter),
                dic.dic,
                dic.p_d,
                dic.mean_deviance,
                waic.waic,
                waic.p_waic
            ))
        })
        .collect::<Result<_>>()?;
    let mut out = String::from("model,dic,p_d,mean_deviance,waic,p_waic\n");
    out.extend(rows);
    write_output(args.out.as_deref(), &out)
}

/// Rebuilds a fit from the θ grid stored in an archive.
fn fit_from_archive(model: &AssembledModel, dir: &Path) -> Result<(FitResult, RunMetadata)> {
    let meta = read_metadata(&dir.join(METADATA_FILE))?;
    if meta.spec != model.spec.to_config() {
        return Err(usage(format!(
            "fit archive was produced for {:?}, not {:?}",
            meta.spec,
            model.spec.to_config()
        )));
    }
    let config = GridConfig {
        step: meta.grid_step,
        seed: meta.seed,
        n_draws: meta.n_draws,
        ..GridConfig::default()
    };
    let warm = find_mode(model, &meta.theta_mode, None)?.z;
    let thetas = meta.grid.iter().map(|g| g.theta.clone()).collect();
    let (evaluated, warnings) = evaluate_grid(model, thetas, &warm);
    let fit = FitResult::from_points(model, meta.theta_mode.clone(), evaluated, config, warnings)?;
    Ok((fit, meta))
}

fn covariate_effects_csv(model: &AssembledModel, fit: &FitResult) -> Result<String> {
    let mut out = String::from("covariate,beta_median,beta_q025,beta_q975,scale,rr_median,rr_q025,rr_q975\n");
    for c in &model.covariates {
        let block = model
            .covariate_block(&c.spec.name)
            .ok_or_else(|| Error::Numerical(format!("covariate {} has no latent block", c.spec.name)))?;
        let m = fit.marginal(block.offset);
        let rr = rate_ratio(&m, c.standardized.scale, 1.0)?;
        use mortsmooth::marginal::Quantiles;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.spec.name,
            m.quantile(0.5),
            m.quantile(0.025),
            m.quantile(0.975),
            c.standardized.scale,
            rr.median,
            rr.lower,
            rr.upper
        ));
    }
    Ok(out)
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (fit, meta) = match &args.fit {
        Some(dir) => fit_from_archive(&model, dir)?,
        None => fit_with_metadata(&model, &grid_config(&args.model))?,
    };
    let draws = fit.sample(&model, args.product_draws, meta.seed)?;
    let mut tables = ReportTables::default();
    let second = match model.spec.kind {
        ModelKind::AgeTime => BlockRole::Time,
        ModelKind::AgeSpace => BlockRole::Space,
    };
    for role in [BlockRole::Age, second] {
        if model.block(role).is_some() {
            tables.pattern_rates.extend(marginal_pattern_rates(&model, role, &draws, PER_100K)?);
            tables.exceedance.push(exceedance_effect(&model, role, &draws)?);
        }
    }
    tables.cell_rates = cell_rate_estimates(&model, &draws, PER_100K)?;
    if model.spec.kind == ModelKind::AgeSpace && model.block(BlockRole::Age).is_some() {
        let reference = match args.reference {
            Reference::RateScale => ExceedanceReference::RateScale,
            Reference::Joint => ExceedanceReference::Joint,
        };
        tables.exceedance.push(exceedance_vs_age_mean(&model, &draws, reference)?);
    }
    if model.n_hyper() > 0 {
        tables.variance_shares = variance_decomposition(&model, &fit)?;
    }
    export_report(&args.out, &tables, &meta)?;
    if !model.covariates.is_empty() {
        write_output(Some(&args.out.join("covariate_effects.csv")), &covariate_effects_csv(&model, &fit)?)?;
    }
    Ok(())
}

fn read_label_values(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() < 2 {
            return Err(Error::Parse {
                line,
                message: "expected label,value".into(),
            });
        }
        let value = rec[1].parse::<f64>().map_err(|_| Error::Parse {
            line,
            message: format!("bad value {:?}", &rec[1]),
        })?;
        rows.push((rec[0].to_string(), value));
    }
    Ok(rows)
}

/// Values aligned to `labels`; every label must appear exactly once.
fn align(rows: &[(String, f64)], labels: &[String], what: &Path) -> Result<Vec<f64>> {
    if rows.len() != labels.len() {
        return Err(Error::Data(format!(
            "{}: {} rows for {} labels",
            what.display(),
            rows.len(),
            labels.len()
        )));
    }
    labels
        .iter()
        .map(|l| {
            rows.iter()
                .find(|(r, _)| r == l)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Data(format!("{}: no value for {l:?}", what.display())))
        })
        .collect()
}

fn run_decorrelate(args: &DecorrelateArgs) -> Result<()> {
    let rows = read_label_values(&args.covariate)?;
    let (axis, labels, structure) = match (&args.graph, args.axis_length) {
        (Some(g), None) => {
            let graph = AdjacencyGraph::load(g, args.labels.as_deref())?;
            (Axis::Spatial, graph.labels().to_vec(), icar_structure(&graph))
        }
        (None, Some(n)) => {
            if rows.len() != n {
                return Err(Error::Data(format!("{} values for an axis of length {n}", rows.len())));
            }
            let labels = rows.iter().map(|r| r.0.clone()).collect();
            (Axis::Temporal, labels, rw_structure(n, args.order as usize)?)
        }
        _ => return Err(usage("give exactly one of --graph or --axis-length")),
    };
    let values = align(&rows, &labels, &args.covariate)?;
    let x = standardize_covariate(axis, &values)?;
    let eig = eigendecompose(structure.entries())?;
    let removal = if args.exact { RemovalCount::Exact } else { RemovalCount::IndexRange };
    let d = decorrelate_covariate(&x, &eig, axis, args.k, removal)?;
    let mut out = String::from("label,value,standardized,z,z_star\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("{l},{},{},{},{}\n", values[i], x.values[i], d.z[i], d.z_star[i]));
    }
    write_output(args.out.as_deref(), &out)?;
    eprintln!(
        "k = {}, removed {} of {} eigenvectors; removed energy {:.6}, retained energy {:.6}",
        d.k,
        d.n_removed(),
        labels.len(),
        d.removed_energy(),
        d.retained_energy()
    );
    Ok(())
}

fn parse_years(text: &str) -> Result<Vec<String>> {
    let (a, b) = text
        .split_once('-')
        .ok_or_else(|| usage(format!("years {text:?} must read first-last")))?;
    let parse = |s: &str| s.trim().parse::<i32>().map_err(|_| usage(format!("bad year {s:?}")));
    let (a, b) = (parse(a)?, parse(b)?);
    if b < a {
        return Err(usage(format!("empty year range {text:?}")));
    }
    Ok((a..=b).map(|y| y.to_string()).collect())
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let spec = load_spec(&args.spec, Some(&args.sex))?;
    let graph = load_graph(args.graph.as_deref(), args.labels.as_deref())?;
    let second_labels = match (spec.kind, &args.years, &graph) {
        (ModelKind::AgeTime, Some(y), _) => parse_years(y)?,
        (ModelKind::AgeSpace, _, Some(g)) => g.labels().to_vec(),
        (ModelKind::AgeTime, None, _) => return Err(usage("age-time simulation needs --years")),
        (ModelKind::AgeSpace, _, None) => return Err(usage("age-space simulation needs --graph")),
    };
    let mut covariates = Vec::new();
    for c in &spec.covariates {
        let file = args
            .covariates
            .iter()
            .find_map(|s| s.split_once('=').filter(|(n, _)| *n == c.name).map(|(_, f)| PathBuf::from(f)))
            .ok_or_else(|| usage(format!("no --covariate {}=FILE given", c.name)))?;
        covariates.push(align(&read_label_values(&file)?, &second_labels, &file)?);
    }
    let input = SimulationInput {
        age_labels: args.ages.split(',').map(|s| s.trim().to_string()).collect(),
        second_labels,
        graph,
        covariates,
        exposures: vec![args.exposure],
        alpha: args.alpha,
        theta: args.theta.clone(),
        beta: args.beta.clone(),
        sex: args.sex.clone(),
        spec,
    };
    let (dataset, truth) = simulate_dataset(&input, args.seed)?;
    dataset.write_dir(&args.out)?;
    write_output(Some(&args.out.join("truth.json")), &(serde_json::to_string_pretty(&truth)? + "\n"))
}

fn oracle_csv(result: &OracleResult) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("quantity,mean,sd,mcse,ess,median,q025,q975,rhat\n");
    for q in &result.quantities {
        out.push_str(&format!(
            "\"{}\",{},{},{},{},{},{},{},{}\n",
            q.name.replace('"', "\"\""),
            q.mean,
            q.sd,
            q.mcse,
            q.ess,
            opt(q.median),
            opt(q.q025),
            opt(q.q975),
            opt(q.rhat)
        ));
    }
    out
}

fn run_oracle(args: &OracleArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let theta = args.theta.as_deref();
    let result = match args.method {
        OracleKind::Mcmc => mcmc_sample_with(
            &model,
            theta,
            &McmcConfig {
                iterations: args.iterations,
                chains: args.chains,
                seed: args.model.seed,
                ..McmcConfig::default()
            },
        )?,
        OracleKind::Grid => grid_posterior(
            &model,
            theta,
            &GridOracleConfig {
                points: args.grid_points,
                ..GridOracleConfig::default()
            },
        )?,
    };
    if !result.acceptance.is_empty() {
        info!("acceptance rates {:?}", result.acceptance);
    }
    if let Some(e) = result.quadrature_error {
        info!("quadrature error estimate {e:.3e}");
    }
    write_output(args.out.as_deref(), &oracle_csv(&result))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Aggregate(a) => run_aggregate(a),
        Command::Fit(a) => run_fit(a),
        Command::Compare(a) => run_compare(a),
        Command::Report(a) => run_report(a),
        Command::Decorrelate(a) => run_decorrelate(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Oracle(a) => run_oracle(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

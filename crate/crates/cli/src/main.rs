//! `frailfit`: fit, bootstrap and simulate proportional hazards frailty models.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use frailfit::inference::{
    bootstrap_from_fit, write_band_csv, write_wald_csv, SurvivalCurve,
};
use frailfit::sim::{run_scenario, Scenario};
use frailfit::{
    fit, kaplan_meier, load_long_csv, load_wide_csv, marginal_survival, predict_survival,
    score_test_gamma, simultaneous_band, wald_table, BootstrapRun, ConstraintMode, CovariatePath,
    Dataset, Error, FitOptions, FitResult, FrailtyFamily, Subject, Weights, WeightKind,
};

#[derive(Parser, Debug)]
#[command(name = "frailfit", version, about = "Proportional hazards frailty regression by profile NPMLE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model; writes fit.json and baseline.csv.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Weighted bootstrap of a fit; writes bootstrap.json and wald.csv.
    Bootstrap {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        resample: ResampleArgs,
        /// Reuse this fit.json instead of refitting.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Predicted survival for one covariate value, with a simultaneous band when
    /// a bootstrap run is given; writes band.csv.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        bootstrap: Option<PathBuf>,
        /// Comma-separated covariate values.
        #[arg(long, allow_hyphen_values = true)]
        z: String,
        /// A point count (equally spaced on [0, last jump]) or comma-separated times.
        #[arg(long, default_value = "100")]
        grid: String,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Kaplan–Meier curves with Greenwood variance; writes km.csv.
    Km {
        #[command(flatten)]
        data: DataArgs,
        /// Split into groups by the distinct values of this covariate.
        #[arg(long)]
        by: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Model-based marginal survival per group alongside Kaplan–Meier; writes marginal.csv.
    Marginal {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        by: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Score test of gamma = 0 with a bootstrap reference; writes score.json.
    ScoreTest {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        resample: ResampleArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a simulation study from a scenario file; writes scenario_result.json and summary.csv.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CSV with `time,status,<covariates>`, or `id,start,stop,status,<covariates>` with --long.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    long: bool,
    /// End of follow-up; defaults to the largest observed time.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Gamma,
    Ig,
    Igg,
    Lognormal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConstraintArg {
    Free,
    NonnegCoxFallback,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightArg {
    Dirichlet,
    Multinomial,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "gamma")]
    family: FamilyArg,
    /// IGG shape constant in [0, 1); required with --family igg.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma_min: Option<f64>,
    #[arg(long)]
    gamma_max: Option<f64>,
    /// Hold gamma at this value (0 gives the Cox model).
    #[arg(long, allow_hyphen_values = true)]
    gamma_fixed: Option<f64>,
    #[arg(long)]
    allow_negative_gamma: bool,
    #[arg(long, value_enum, default_value = "free")]
    constraint: ConstraintArg,
    #[arg(long, default_value_t = 2000)]
    mh_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ResampleArgs {
    #[arg(long = "B", default_value_t = 200)]
    b: usize,
    #[arg(long, value_enum, default_value = "dirichlet")]
    weights: WeightArg,
    #[arg(long)]
    jobs: Option<usize>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Fit(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::EmptySubset => Failure::Usage(e.to_string()),
            _ => Failure::Fit(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

impl ModelArgs {
    fn family(&self) -> CliResult<FrailtyFamily> {
        match (self.family, self.alpha) {
            (FamilyArg::Igg, Some(a)) => Ok(FrailtyFamily::igg(a)?),
            (FamilyArg::Igg, None) => usage("--family igg requires --alpha"),
            (_, Some(_)) => usage("--alpha is only valid with --family igg"),
            (FamilyArg::Gamma, None) => Ok(FrailtyFamily::gamma()),
            (FamilyArg::Ig, None) => Ok(FrailtyFamily::inverse_gaussian()),
            (FamilyArg::Lognormal, None) => Ok(FrailtyFamily::lognormal()),
        }
    }

    fn options(&self) -> CliResult<FitOptions> {
        let defaults = FitOptions::default();
        let bounds = match self.gamma_fixed {
            Some(g) => {
                if self.gamma_min.is_some() || self.gamma_max.is_some() {
                    return usage("--gamma-fixed conflicts with --gamma-min/--gamma-max");
                }
                (g, g)
            }
            None => (
                self.gamma_min.unwrap_or(defaults.gamma_bounds.0),
                self.gamma_max.unwrap_or(defaults.gamma_bounds.1),
            ),
        };
        if bounds.0 < 0.0 && !self.allow_negative_gamma {
            return usage("negative gamma requires --allow-negative-gamma");
        }
        Ok(FitOptions {
            gamma_bounds: bounds,
            allow_negative_gamma: self.allow_negative_gamma,
            mh_steps: self.mh_steps,
            seed: self.seed,
            constraint_mode: match self.constraint {
                ConstraintArg::Free => ConstraintMode::Free,
                ConstraintArg::NonnegCoxFallback => ConstraintMode::NonnegGammaWithCoxFallback,
            },
            ..defaults
        })
    }
}

impl ResampleArgs {
    fn kind(&self) -> WeightKind {
        match self.weights {
            WeightArg::Dirichlet => WeightKind::Dirichlet,
            WeightArg::Multinomial => WeightKind::Multinomial,
        }
    }
}

fn load(data: &DataArgs) -> CliResult<Dataset> {
    Ok(if data.long {
        load_long_csv(&data.input, data.tau)?
    } else {
        load_wide_csv(&data.input, data.tau)?
    })
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    write_bytes(dir, name, text.as_bytes())
}

fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
    let mut w = create(dir, name)?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn read_fit(path: &Path) -> CliResult<FitResult> {
    Ok(FitResult::from_json(&fs::read_to_string(path)?)?)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match jobs {
        Some(0) => usage("--jobs must be at least 1"),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Failure::Usage(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn parse_list(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .or_else(|_| usage(format!("could not parse {what} '{s}'")))
}

fn parse_grid(text: &str, upper: f64) -> CliResult<Vec<f64>> {
    if text.contains(',') {
        let g = parse_list(text, "grid")?;
        if g.iter().any(|t| !(*t >= 0.0)) {
            return usage("grid times must be nonnegative");
        }
        return Ok(g);
    }
    match text.trim().parse::<usize>() {
        Ok(k) if k >= 2 => Ok((0..k).map(|i| upper * i as f64 / (k - 1) as f64).collect()),
        Ok(1) => Ok(vec![0.0]),
        _ => match text.trim().parse::<f64>() {
            Ok(t) if t >= 0.0 => Ok(vec![t]),
            _ => usage(format!("could not parse grid '{text}'")),
        },
    }
}

fn fit_model(data: &Dataset, model: &ModelArgs) -> CliResult<(FrailtyFamily, FitOptions, FitResult)> {
    let family = model.family()?;
    let options = model.options()?;
    let f = fit(data, &family, &options, &Weights::uniform(data.n()))?;
    Ok((family, options, f))
}

fn report(f: &FitResult) {
    let beta: Vec<String> = f.theta_hat.beta.iter().map(|b| format!("{b:.6}")).collect();
    println!(
        "gamma = {:.6}  beta = [{}]  loglik = {:.8}  converged = {}",
        f.theta_hat.gamma,
        beta.join(", "),
        f.loglik,
        f.converged
    );
    for w in &f.warnings {
        eprintln!("warning: {w}");
    }
}

fn write_fit(out: &Path, f: &FitResult) -> CliResult<()> {
    write_text(out, "fit.json", &f.to_json()?)?;
    let mut w = create(out, "baseline.csv")?;
    f.hazard.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Subsets keyed by the distinct values of one covariate (at time zero).
fn groups(data: &Dataset, by: Option<&str>) -> CliResult<Vec<(String, Option<(usize, f64)>)>> {
    let Some(name) = by else {
        return Ok(vec![("all".into(), None)]);
    };
    let Some(col) = data.covariate_names().iter().position(|c| c == name) else {
        return usage(format!("no covariate named '{name}'"));
    };
    let mut values: Vec<f64> = data.subjects().iter().map(|s| s.z.at(0.0)[col]).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    Ok(values
        .into_iter()
        .map(|v| (format!("{name}={v}"), Some((col, v))))
        .collect())
}

fn member(key: Option<(usize, f64)>) -> impl Fn(&Subject) -> bool {
    move |s: &Subject| match key {
        None => true,
        Some((col, v)) => s.z.at(0.0)[col] == v,
    }
}

fn write_curve_rows(w: &mut impl Write, group: &str, source: &str, c: &SurvivalCurve) -> CliResult<()> {
    writeln!(w, "{group},{source},0,1")?;
    for (t, s) in c.times.iter().zip(&c.survival) {
        writeln!(w, "{group},{source},{t},{s}")?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit { data, model, out } => {
            let data = load(&data)?;
            let (_, _, f) = fit_model(&data, &model)?;
            report(&f);
            write_fit(&out, &f)
        }
        Command::Bootstrap {
            data,
            model,
            resample,
            fit: fit_path,
            out,
        } => {
            let data = load(&data)?;
            let family = model.family()?;
            let options = model.options()?;
            let base = match fit_path {
                Some(p) => read_fit(&p)?,
                None => {
                    let f = fit(&data, &family, &options, &Weights::uniform(data.n()))?;
                    write_fit(&out, &f)?;
                    f
                }
            };
            if base.theta_hat.beta.len() != data.d() {
                return usage("fit.json does not match the data's covariates");
            }
            let kind = resample.kind();
            let run = with_jobs(resample.jobs, || {
                bootstrap_from_fit(&data, &base.family, &options, base.clone(), resample.b, kind, model.seed, None)
            })??;
            eprintln!("{} of {} replicates failed", run.n_failed(), resample.b);
            write_text(&out, "bootstrap.json", &run.to_json()?)?;
            let rows = wald_table(&run)?;
            for r in &rows {
                println!("{:>10} {:>6} {:>6} est {:>10.4} se {:>8.4} z {:>8.3}", r.covariate, r.parameter, r.model, r.estimate, r.se, r.z);
            }
            let mut w = create(&out, "wald.csv")?;
            write_wald_csv(&rows, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Predict {
            fit: fit_path,
            bootstrap,
            z,
            grid,
            level,
            out,
        } => {
            let f = read_fit(&fit_path)?;
            let z = CovariatePath::fixed(parse_list(&z, "--z")?);
            let upper = f.hazard.times.last().copied().unwrap_or(1.0);
            let grid = parse_grid(&grid, upper)?;
            let band = match bootstrap {
                Some(p) => {
                    let run = BootstrapRun::from_json(&fs::read_to_string(p)?)?;
                    simultaneous_band(&run, &f.family, &z, &grid, level)?
                }
                None => {
                    let center = predict_survival(&f, &f.family, &z, &grid)?;
                    frailfit::BandResult {
                        grid: grid.clone(),
                        lower: center.clone(),
                        upper: center.clone(),
                        center,
                        level: 0.0,
                        critical_value: 0.0,
                        replicates_used: 0,
                    }
                }
            };
            let mut w = create(&out, "band.csv")?;
            write_band_csv(&band, &mut w)?;
            w.flush()?;
            println!("critical value {:.4} from {} replicates", band.critical_value, band.replicates_used);
            Ok(())
        }
        Command::Km { data, by, out } => {
            let data = load(&data)?;
            let mut w = Vec::new();
            writeln!(w, "group,time,survival,variance")?;
            for (label, key) in groups(&data, by.as_deref())? {
                let km = kaplan_meier(&data, &member(key))?;
                let var = km.variance.clone().unwrap_or_default();
                for ((t, s), v) in km.times.iter().zip(&km.survival).zip(&var) {
                    writeln!(w, "{label},{t},{s},{v}")?;
                }
            }
            write_bytes(&out, "km.csv", &w)
        }
        Command::Marginal { data, fit: fit_path, by, out } => {
            let data = load(&data)?;
            let f = read_fit(&fit_path)?;
            if f.theta_hat.beta.len() != data.d() {
                return usage("fit.json does not match the data's covariates");
            }
            let mut w = Vec::new();
            writeln!(w, "group,source,time,survival")?;
            for (label, key) in groups(&data, by.as_deref())? {
                let model = marginal_survival(&f, &f.family, &data, &member(key))?;
                write_curve_rows(&mut w, &label, "model", &model)?;
                let km = kaplan_meier(&data, &member(key))?;
                write_curve_rows(&mut w, &label, "km", &km)?;
            }
            write_bytes(&out, "marginal.csv", &w)
        }
        Command::ScoreTest {
            data,
            model,
            resample,
            out,
        } => {
            let data = load(&data)?;
            let family = model.family()?;
            let options = model.options()?;
            let kind = resample.kind();
            let res = with_jobs(resample.jobs, || {
                score_test_gamma(&data, &family, &options, resample.b, kind, model.seed)
            })??;
            println!(
                "score = {:.6e}  p = {:.4}  (B used {}, finite difference {:.6e})",
                res.statistic, res.p_value, res.b_used, res.finite_difference
            );
            write_text(&out, "score.json", &serde_json::to_string_pretty(&res).map_err(Error::from)?)
        }
        Command::Simulate {
            scenario,
            seed,
            jobs,
            out,
        } => {
            let mut sc = Scenario::from_json(&fs::read_to_string(&scenario)?)?;
            if let Some(s) = seed {
                set_seed(&mut sc, s);
            }
            let res = with_jobs(jobs, || run_scenario(&sc))??;
            write_text(&out, "scenario_result.json", &res.to_json()?)?;
            let mut w = create(&out, "summary.csv")?;
            res.write_summary_csv(&mut w)?;
            w.flush()?;
            println!("{} replicates ({} failed), seed {}", res.reps, res.failed, res.seed);
            for (k, v) in &res.summary {
                println!("{k} = {v:.6}");
            }
            Ok(())
        }
    }
}

fn set_seed(sc: &mut Scenario, s: u64) {
    match sc {
        Scenario::Attenuation { seed, .. }
        | Scenario::SignConsistency { seed, .. }
        | Scenario::ScoreSizePower { seed, .. }
        | Scenario::BootstrapCalibration { seed, .. } => *seed = s,
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
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Fit(msg)) => {
            eprintln!("fit failed: {msg}");
            ExitCode::from(2)
        }
    }
}

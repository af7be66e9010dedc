use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use latentprod::classo::{fit, post_lasso, firm_estimates, CLassoConfig, Classification};
use latentprod::empirical::{
    compare_fits, crosstab, firm_labels, industry_mimic, label_classes, read_assignment_csv, residuals,
    tfp_levels, write_comparison_csv, write_residuals_csv, write_tfp_csv, FitRecord,
};
use latentprod::montecarlo::{self, McConfig};
use latentprod::selection::{select_joint, PenaltySpec, SelectionGrid};
use latentprod::simulate::{draw_panel, SimConfig};
use latentprod::{CsvSchema, Error, MomentSpec, PanelData, Result, Strategy};

#[derive(Parser)]
#[command(name = "latentprod", version, about = "Production functions with latent group structures")]
struct Cli {
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// JSON configuration of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Gnr,
    Acf,
    Dynpanel,
}

#[derive(clap::Args)]
struct PanelArgs {
    /// Panel CSV.
    #[arg(long)]
    panel: PathBuf,
    /// JSON column mapping; by default standard names are used, `l` and `s`
    /// are optional and all other columns are kept as extras.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Treat prices as normalized, so a missing share column is `m - y`.
    #[arg(long)]
    prices_normalized: bool,
}

#[derive(clap::Args)]
struct SpecArgs {
    #[arg(long, value_enum, default_value = "gnr")]
    strategy: StrategyArg,
    /// Productivity follows an AR(1) without intercept.
    #[arg(long)]
    no_ar1_intercept: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a panel from the simulation design.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        t: Option<usize>,
        /// Also write the latent series.
        #[arg(long)]
        latent: bool,
        /// Add an `industry` column with codes 1..=K drawn independently
        /// of the groups.
        #[arg(long)]
        industries: Option<usize>,
    },
    /// Fit the classifier-Lasso and re-estimate each group.
    Estimate {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Skip the penalized step and estimate the groups given by this
        /// firm-constant panel column.
        #[arg(long)]
        partition: Option<String>,
        /// Panel column copied into the assignment file.
        #[arg(long)]
        label: Option<String>,
    },
    /// Information criteria over a grid of penalty levels and group counts.
    Select {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Monte Carlo replications of the simulation design.
    Montecarlo,
    /// Crosstab of estimated groups against ex-ante labels.
    Crosstab {
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long)]
        label: String,
    },
    /// Mean squared composite residuals of two fits.
    CompareFits {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long)]
        fit_a: PathBuf,
        #[arg(long)]
        fit_b: PathBuf,
    },
    /// TFP levels from a fit.
    Tfp {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long)]
        fit: PathBuf,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SelectConfig {
    grid: SelectionGrid,
    penalties: Option<Vec<PenaltySpec>>,
    classo: CLassoConfig,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn config_or_default<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = create(path)?;
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn load_panel(args: &PanelArgs) -> Result<PanelData> {
    let schema = match &args.schema {
        Some(p) => read_json::<CsvSchema>(p)?,
        None => CsvSchema::infer_from_csv(&args.panel)?,
    };
    let schema = CsvSchema {
        prices_normalized: schema.prices_normalized || args.prices_normalized,
        ..schema
    };
    PanelData::load_csv(&args.panel, &schema)
}

fn moment_spec(args: &SpecArgs, panel: &PanelData) -> Result<MomentSpec> {
    let strategy = match args.strategy {
        StrategyArg::Gnr => Strategy::Gnr,
        StrategyArg::Acf => Strategy::Acf,
        StrategyArg::Dynpanel => Strategy::DynamicPanel,
    };
    let intercept = strategy == Strategy::Gnr && !args.no_ar1_intercept;
    MomentSpec::new(strategy, intercept, panel.has_labor())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::Io {
        path: cli.out_dir.clone(),
        source: e,
    })?;
    let out = |name: &str| cli.out_dir.join(name);

    match &cli.command {
        Command::Simulate {
            n,
            t,
            latent,
            industries,
        } => {
            let mut cfg: SimConfig = config_or_default(&cli.config)?;
            if let Some(n) = n {
                cfg.n = *n;
            }
            if let Some(t) = t {
                cfg.t = *t;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let sim = match industries {
                Some(k) => industry_mimic(&cfg, *k)?,
                None => draw_panel(&cfg)?,
            };
            let latent_path = out("latent.csv");
            sim.save(
                &out("panel.csv"),
                &out("truth.csv"),
                latent.then_some(latent_path.as_path()),
            )?;
            println!(
                "simulated {} firms, {} observations",
                sim.panel.num_firms(),
                sim.panel.num_observations()
            );
        }
        Command::Estimate {
            panel,
            spec,
            groups,
            lambda,
            partition,
            label,
        } => {
            let data = load_panel(panel)?;
            let spec = moment_spec(spec, &data)?;
            let mut cfg: CLassoConfig = config_or_default(&cli.config)?;
            if let Some(j) = groups {
                cfg.groups = *j;
            }
            if lambda.is_some() {
                cfg.lambda = *lambda;
            }
            cfg.validate()?;
            let record = match partition {
                Some(col) => {
                    let (classes, names) = label_classes(&firm_labels(&data, col)?);
                    let cls = Classification::from_labels(&classes, names.len())?;
                    let init = firm_estimates(&data, &spec, cfg.weighting)?;
                    let est = post_lasso(&data, &cls, &spec, cfg.weighting, &init)?;
                    write_json(&out("fit.json"), &est)?;
                    for w in &est.warnings {
                        eprintln!("warning: {w}");
                    }
                    FitRecord::new(&data, None, &cls, &est)?
                }
                None => {
                    let res = fit(&data, &cfg, &spec)?;
                    write_json(&out("fit.json"), &res)?;
                    for w in res.warnings.iter().chain(&res.estimates.warnings) {
                        eprintln!("warning: {w}");
                    }
                    FitRecord::new(&data, Some(res.lambda), &res.classification, &res.estimates)?
                }
            };
            record.save_json(out("fit_record.json"))?;
            let labels = label.as_deref().map(|c| firm_labels(&data, c)).transpose()?;
            record.write_assignment_csv(
                create(&out("assignment.csv"))?,
                label.as_deref().zip(labels.as_deref()),
            )?;
            write_residuals_csv(create(&out("residuals.csv"))?, &residuals(&data, &record)?)?;
            let names = spec.param_names();
            for (g, th) in record.theta.iter().enumerate() {
                if let Some(th) = th {
                    let size = record.assignment.iter().filter(|a| **a == Some(g)).count();
                    let parts: Vec<String> = names
                        .iter()
                        .zip(th)
                        .map(|(n, v)| format!("{n}={v:.4}"))
                        .collect();
                    println!("group {} ({size} firms): {}", g + 1, parts.join(" "));
                }
            }
        }
        Command::Select { panel, spec } => {
            let data = load_panel(panel)?;
            let spec = moment_spec(spec, &data)?;
            let cfg: SelectConfig = config_or_default(&cli.config)?;
            let penalties = cfg
                .penalties
                .unwrap_or_else(|| vec![PenaltySpec::p1(1.0), PenaltySpec::p2(0.25)]);
            let res = select_joint(&data, &cfg.grid, &penalties, &spec, &cfg.classo, None)?;
            res.save_surface_csv(out("ic_surface.csv"))?;
            write_json(&out("selection.json"), &res)?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            for s in res.selected.iter().flatten() {
                println!(
                    "{}: lambda = {:.4} (a = {}), J = {}",
                    s.penalty.label(),
                    s.lambda,
                    s.a.map(|a| a.to_string()).unwrap_or_default(),
                    s.groups
                );
            }
        }
        Command::Montecarlo => {
            let mut cfg: McConfig = config_or_default(&cli.config)?;
            if let Some(s) = cli.seed {
                cfg.base_seed = s;
            }
            let summary = montecarlo::run(&cfg)?;
            summary.save_csv(out("mc_summary.csv"))?;
            write_json(&out("mc_summary.json"), &summary)?;
            println!(
                "{} replications, {} failed",
                summary.replications, summary.failed
            );
        }
        Command::Crosstab { assignment, label } => {
            let (labels, assign, groups) = read_assignment_csv(assignment, label)?;
            let ct = crosstab(&labels, &assign, groups)?;
            ct.write_csv(create(&out("crosstab.csv"))?)?;
            ct.write_csv(std::io::stdout())?;
        }
        Command::CompareFits { panel, fit_a, fit_b } => {
            let data = load_panel(panel)?;
            let a = FitRecord::load_json(fit_a)?;
            let b = FitRecord::load_json(fit_b)?;
            let names = [fit_a.display().to_string(), fit_b.display().to_string()];
            let fits = compare_fits(&data, (&names[0], &a), (&names[1], &b))?;
            write_comparison_csv(create(&out("msr_comparison.csv"))?, &fits)?;
            write_comparison_csv(std::io::stdout(), &fits)?;
        }
        Command::Tfp { panel, fit } => {
            let data = load_panel(panel)?;
            let record = FitRecord::load_json(fit)?;
            let rows = tfp_levels(&data, &record)?;
            write_tfp_csv(create(&out("tfp.csv"))?, &rows)?;
            println!("{} TFP levels written", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

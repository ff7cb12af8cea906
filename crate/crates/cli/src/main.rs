use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use heatshift::experiment::{
    build_cluster_dataset, run_experiment, sweep_hyperparameters, train_cluster_model, write_outputs, ClusterScenario,
    ExperimentConfig, ExperimentOutcome, SweepGrid, CONTROLLERS,
};
use heatshift::imitation::NormParams;
use heatshift::model::WeekData;
use heatshift::nn::{load_model, save_model, write_loss_history};
use heatshift::psc::ProductRule;
use heatshift::scenario::{load_week_csv, save_week_csv};
use heatshift::scheduler::{solve_optimal, validate_schedule, write_schedule_csv};
use heatshift::sim::{compare, simulate_week, write_trace_csv, Controller, Psc, PscAnn, Replay, SimulationResult};

#[derive(Parser)]
#[command(name = "heatshift", version, about = "Heat-pump demand-response scheduling and controller benchmark")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate synthetic cluster weeks as CSV.
    Gen {
        #[arg(long)]
        cluster: Option<String>,
        /// Week ids; defaults to the training pool and the test weeks.
        #[arg(long, value_delimiter = ',')]
        weeks: Vec<u64>,
    },
    /// Solve the cost-optimal schedule of one building week.
    Solve {
        #[command(flatten)]
        target: Target,
    },
    /// Build the imitation dataset of a cluster's training building.
    Dataset {
        #[arg(long)]
        cluster: String,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Build the dataset and train the controller model.
    Train {
        #[arg(long)]
        cluster: String,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Simulate controllers on one building week.
    Simulate {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ControllerArg::Conventional, ControllerArg::Psc])]
        controllers: Vec<ControllerArg>,
        /// Model for psc-ann, as written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Normalisation of the model; defaults to `<model stem>_norm.json`.
        #[arg(long)]
        norm: Option<PathBuf>,
    },
    /// Run the full benchmark and write the reports.
    Experiment,
    /// Train and evaluate one model per hyperparameter combination.
    Sweep {
        /// TOML grid file with `batch_size`, `learning_rate`, `hidden_width`
        /// and `hidden_layers` lists.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        batch_size: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        learning_rate: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        hidden_width: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        hidden_layers: Vec<usize>,
    },
}

#[derive(Args)]
struct Target {
    #[arg(long)]
    cluster: String,
    #[arg(long, default_value_t = 0)]
    building: usize,
    /// Week id of the synthetic generator.
    #[arg(long, conflicts_with = "input")]
    week: Option<u64>,
    /// Week CSV to use instead of a generated week.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerArg {
    Optimal,
    Conventional,
    Psc,
    PscAnn,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    match cli.command {
        Command::Config => {
            print!("{}", toml::to_string(&cfg)?);
            Ok(0)
        }
        Command::Gen { cluster, weeks } => cfg.install(|| gen(&cfg, out, cluster.as_deref(), weeks))?,
        Command::Solve { target } => cfg.install(|| solve(&cfg, out, &target))?,
        Command::Dataset { cluster, run } => cfg.install(|| {
            let sc = ClusterScenario::new(&cfg, cfg.cluster_index(&cluster)?);
            let ds = build_cluster_dataset(&cfg, &sc, run, None)?;
            std::fs::create_dir_all(out)?;
            let stem = format!("{}_run{run}", sc.name());
            ds.save(out, &stem)?;
            println!(
                "{stem}: {} train rows, {} val rows, weeks {:?}",
                ds.train.len(),
                ds.val.len(),
                ds.provenance.week_ids
            );
            Ok(0)
        })?,
        Command::Train { cluster, run } => cfg.install(|| train(&cfg, out, &cluster, run))?,
        Command::Simulate {
            target,
            controllers,
            model,
            norm,
        } => cfg.install(|| simulate(&cfg, out, &target, &controllers, model.as_deref(), norm.as_deref()))?,
        Command::Experiment => {
            let outcome = run_experiment(&cfg)?;
            write_outputs(&outcome, out)?;
            print_outcome(&outcome);
            Ok(outcome.exit_code() as u8)
        }
        Command::Sweep {
            grid,
            batch_size,
            learning_rate,
            hidden_width,
            hidden_layers,
        } => {
            let mut g = match grid {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SweepGrid::default(),
            };
            let replace = |dst: &mut Vec<_>, src: Vec<_>| {
                if !src.is_empty() {
                    *dst = src;
                }
            };
            replace(&mut g.batch_size, batch_size);
            replace(&mut g.hidden_width, hidden_width);
            replace(&mut g.hidden_layers, hidden_layers);
            if !learning_rate.is_empty() {
                g.learning_rate = learning_rate;
            }
            let report = sweep_hyperparameters(&cfg, &g)?;
            write_json(&out.join("sweep.json"), &report)?;
            let mut w = csv::Writer::from_writer(create(&out.join("sweep.csv"))?);
            for r in &report.rows {
                w.serialize(r)?;
            }
            w.flush()?;
            println!("{:>6} {:>8} {:>6} {:>6} {:>12}", "batch", "lr", "width", "layers", "improvement");
            for r in &report.rows {
                println!(
                    "{:>6} {:>8} {:>6} {:>6} {:>11.2}%",
                    r.batch_size,
                    r.learning_rate,
                    r.hidden_width,
                    r.hidden_layers,
                    r.improvement_pct.unwrap_or(f64::NAN)
                );
            }
            Ok(0)
        }
    }
}

fn gen(cfg: &ExperimentConfig, out: &Path, only: Option<&str>, weeks: Vec<u64>) -> Result<u8> {
    let weeks: Vec<u64> = if weeks.is_empty() {
        (0..(cfg.training_pool + cfg.test_weeks) as u64).collect()
    } else {
        weeks
    };
    let clusters: Vec<usize> = match only {
        Some(name) => vec![cfg.cluster_index(name)?],
        None => (0..cfg.clusters.len()).collect(),
    };
    for i in clusters {
        let sc = ClusterScenario::new(cfg, i);
        let dir = out.join(sc.name());
        std::fs::create_dir_all(&dir)?;
        write_json(&dir.join("manifest.json"), &sc.spec.manifest())?;
        for b in 0..sc.members.len() {
            for &w in &weeks {
                save_week_csv(dir.join(format!("b{b}_w{w}.csv")), &sc.week(b, w))?;
            }
        }
        println!("{}: {} buildings x {} weeks -> {}", sc.name(), sc.members.len(), weeks.len(), dir.display());
    }
    Ok(0)
}

fn target_week(cfg: &ExperimentConfig, t: &Target) -> Result<(ClusterScenario, WeekData, String)> {
    let sc = ClusterScenario::new(cfg, cfg.cluster_index(&t.cluster)?);
    if t.building >= sc.members.len() {
        bail!("cluster {} has {} buildings", sc.name(), sc.members.len());
    }
    let (week, tag) = match (&t.input, t.week) {
        (Some(p), _) => {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (load_week_csv(p)?, stem)
        }
        (None, Some(w)) => (sc.week(t.building, w), format!("b{}_w{w}", t.building)),
        (None, None) => bail!("either --week or --input is required"),
    };
    Ok((sc, week, tag))
}

fn solve(cfg: &ExperimentConfig, out: &Path, t: &Target) -> Result<u8> {
    let (sc, week, tag) = target_week(cfg, t)?;
    let building = sc.building(t.building);
    let started = Instant::now();
    let s = solve_optimal(&week, &building, &sc.heat_pump, &cfg.solver)?;
    let elapsed = started.elapsed().as_secs_f64();
    let violations = validate_schedule(&s, &week, &building, &sc.heat_pump)?;
    let stem = format!("{}_{tag}", sc.name());
    write_schedule_csv(create(&out.join(format!("schedule_{stem}.csv")))?, &s, &week, &sc.heat_pump)?;
    let lo = s.temp_trace.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.temp_trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    write_json(
        &out.join(format!("schedule_{stem}.json")),
        &serde_json::json!({
            "cluster": sc.name(),
            "building": t.building,
            "week": tag,
            "total_cost": s.total_cost,
            "switch_offs_total": s.switch_offs_total,
            "temp_min": lo,
            "temp_max": hi,
            "violations": violations.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
        }),
    )?;
    println!(
        "{stem}: cost {:.4} EUR, {} switch-offs, T in [{lo:.3}, {hi:.3}], solved in {elapsed:.2} s",
        s.total_cost, s.switch_offs_total
    );
    if !violations.is_empty() {
        eprintln!("{} constraint violations, first: {}", violations.len(), violations[0]);
        return Ok(2);
    }
    Ok(0)
}

fn train(cfg: &ExperimentConfig, out: &Path, cluster: &str, run: usize) -> Result<u8> {
    let sc = ClusterScenario::new(cfg, cfg.cluster_index(cluster)?);
    let m = train_cluster_model(cfg, &sc, run, None, cfg.mlp, &cfg.train)?;
    let dir = out.join("models");
    std::fs::create_dir_all(&dir)?;
    save_model(dir.join(format!("{}.bin", m.label)), &m.model, &m.meta)?;
    write_json(&dir.join(format!("{}_norm.json", m.label)), &m.norm)?;
    write_json(&out.join(format!("training_{}.json", m.label)), &m.summary)?;
    write_loss_history(create(&out.join(format!("loss_{}.csv", m.label)))?, &m.summary.report)?;
    let r = &m.summary.report;
    println!(
        "{}: {} train / {} val rows, val mse {:.5} -> {:.5} over {} epochs",
        m.label,
        m.summary.train_rows,
        m.summary.val_rows,
        r.val_mse.first().copied().unwrap_or(f64::NAN),
        r.val_mse.last().copied().unwrap_or(f64::NAN),
        r.val_mse.len()
    );
    Ok(0)
}

fn simulate(
    cfg: &ExperimentConfig,
    out: &Path,
    t: &Target,
    which: &[ControllerArg],
    model: Option<&Path>,
    norm: Option<&Path>,
) -> Result<u8> {
    let (sc, week, tag) = target_week(cfg, t)?;
    let building = sc.building(t.building);
    let hp = &sc.heat_pump;
    let mut results: Vec<SimulationResult> = Vec::new();
    for &c in which {
        let r = match c {
            ControllerArg::Optimal => {
                let s = solve_optimal(&week, &building, hp, &cfg.solver)?;
                simulate_week(&Replay::optimal(&s), &week, &building, hp, &cfg.sim)?
            }
            ControllerArg::Conventional => simulate_week(&cfg.conventional, &week, &building, hp, &cfg.sim)?,
            ControllerArg::Psc => {
                let psc = Psc {
                    config: cfg.psc.clone(),
                    rule: ProductRule,
                };
                simulate_week(&psc, &week, &building, hp, &cfg.sim)?
            }
            ControllerArg::PscAnn => {
                let path = model.context("psc-ann needs --model")?;
                let (m, meta) = load_model(path)?;
                let norm_path = match norm {
                    Some(p) => p.to_path_buf(),
                    None => path.with_file_name(format!(
                        "{}_norm.json",
                        path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
                    )),
                };
                let params: NormParams = serde_json::from_reader(File::open(&norm_path).with_context(|| format!("opening {}", norm_path.display()))?)?;
                let ann = PscAnn::new(m, params, &meta, cfg.psc.clone(), cfg.starts_feature)?;
                simulate_week(&ann as &dyn Controller, &week, &building, hp, &cfg.sim)?
            }
        };
        results.push(r);
    }
    let stem = format!("{}_{tag}", sc.name());
    for r in &results {
        write_trace_csv(create(&out.join(format!("trace_{stem}_{}.csv", r.controller)))?, r)?;
    }
    let summaries: Vec<_> = results.iter().map(|r| r.summary()).collect();
    let baseline = results.iter().find(|r| r.controller == "conventional");
    let comparison = baseline.map(|b| compare(b, &results.iter().filter(|r| r.controller != b.controller).collect::<Vec<_>>()));
    write_json(
        &out.join(format!("simulation_{stem}.json")),
        &serde_json::json!({ "summaries": summaries, "comparison": comparison }),
    )?;
    println!("{:<14} {:>10} {:>8} {:>8} {:>6}", "controller", "cost EUR", "T min", "T max", "offs");
    for s in &summaries {
        println!(
            "{:<14} {:>10.4} {:>8.3} {:>8.3} {:>6}",
            s.controller, s.total_cost, s.temp_min, s.temp_max, s.switch_offs_total
        );
    }
    Ok(0)
}

fn print_outcome(o: &ExperimentOutcome) {
    let r = &o.report;
    for s in &r.clusters {
        println!("{} ({} evaluations)", s.cluster, s.average.count);
        println!("  {:<14} {:>10} {:>10}", "controller", "mean EUR", "vs conv.");
        for (i, name) in CONTROLLERS.iter().enumerate() {
            let gain = s.improvement_pct[i].map(|g| format!("{g:.2}%")).unwrap_or_else(|| "-".into());
            println!("  {:<14} {:>10.4} {:>10}", name, s.average.costs[i], gain);
        }
    }
    for p in &r.properties {
        println!("{} {}: {}", if p.passed { "PASS" } else { "FAIL" }, p.name, p.detail);
    }
    let t = &o.timing;
    println!(
        "{} timing: solve {:.3} s/week, controller {:.5} s/week, ratio {:.1} (threshold {})",
        if t.passed { "PASS" } else { "FAIL" },
        t.solve_s_per_week,
        t.controller_s_per_week,
        t.ratio,
        t.threshold
    );
    for f in &r.failures {
        eprintln!("failure in {} ({}): {}", f.stage, f.cluster, f.message);
    }
}

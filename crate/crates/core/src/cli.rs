//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::eval::{
    evaluate, evaluate_checkpoint, reports_to_csv, run_ablation_suite, skill_table, AblationBudget,
    AgentController, EvalOptions, EvalReport, SkillScenario,
};
use crate::plot::{plot, PlotKind};
use crate::psnet::Variant;
use crate::rl::{Agent, Trainer};
use crate::sim::CommandClass;
use crate::terrain::{generate, Family, TerrainSpec};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAULT: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "strider",
    version,
    about = "Train and evaluate terrain-aware quadruped policies"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Layered TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override, applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes metrics.jsonl, checkpoints and config.toml.
    Train,
    /// Evaluate a checkpoint (or a freshly built agent) on skill scenarios.
    Evaluate(EvaluateArgs),
    /// Train every variant on one budget and evaluate the same scenarios.
    Ablate(AblateArgs),
    /// Render figures from metrics streams or reports.
    Plot(PlotArgs),
    /// Generate a course and write it as a voxel file.
    TerrainDump(TerrainArgs),
    /// Print the resolved configuration.
    Config,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Scenario name, skill name, or `all`.
    #[arg(long, default_value = "all")]
    pub scenario: String,
    /// Overrides the scenario's command class.
    #[arg(long)]
    pub command: Option<String>,
    /// Rollouts per scenario.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated variants; all by default.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Comma-separated scenarios; all table rows by default.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Vec<String>,
    /// Training updates per variant; `train.updates` by default.
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub kind: String,
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TerrainArgs {
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value_t = 0.5)]
    pub difficulty: f64,
}

/// Resolved configuration: file, then `--set`, then the global flags.
pub fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("train.seed={s}"));
    }
    if let Some(t) = g.threads {
        overrides.push(format!("train.threads={t}"));
    }
    RunConfig::load(g.config.as_deref(), &overrides)
}

fn scenarios(spec: &str, command: Option<&str>) -> Result<Vec<SkillScenario>> {
    let mut list = if spec == "all" {
        skill_table()
    } else {
        spec.split(',')
            .map(SkillScenario::lookup)
            .collect::<Result<_>>()?
    };
    if let Some(c) = command {
        let c: CommandClass = c.parse()?;
        for s in &mut list {
            s.command = c;
            s.validate()?;
        }
    }
    Ok(list)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn train(cfg: &RunConfig, out_dir: &Path, err: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let mut metrics = std::io::BufWriter::new(fs::File::create(out_dir.join("metrics.jsonl"))?);
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(Some(out_dir), &mut metrics, |m| {
        let _ = writeln!(
            err,
            "update {} reward {:.4} tracking {:.4} episodes {}",
            m.update, m.reward, m.tracking, m.episodes
        );
    })?;
    Ok(())
}

fn evaluate_cmd(
    cfg: &RunConfig,
    a: &EvaluateArgs,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let list = scenarios(&a.scenario, a.command.as_deref())?;
    let n = a.n.unwrap_or(cfg.eval.n_rollouts);
    let opts = EvalOptions {
        bins: a.bins.unwrap_or(cfg.eval.bins),
        threads: cfg.train.threads,
    };
    let seed = cfg.train.seed;
    let fresh = match &a.checkpoint {
        Some(_) => None,
        None => Some(Agent::new(cfg)?),
    };
    let mut reports: Vec<EvalReport> = Vec::with_capacity(list.len());
    for s in &list {
        let r = match (&a.checkpoint, &fresh) {
            (Some(p), _) => evaluate_checkpoint(p, s, n, seed, &opts)?,
            (None, Some(agent)) => evaluate(&mut AgentController::new(agent), s, n, seed, &opts)?,
            (None, None) => unreachable!("an agent is built when no checkpoint is given"),
        };
        reports.push(r);
    }
    fs::create_dir_all(out_dir)?;
    for r in &reports {
        write_json(&out_dir.join(format!("report_{}.json", r.scenario)), r)?;
    }
    fs::write(out_dir.join("reports.csv"), reports_to_csv(&reports)?)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&reports)?)?;
    Ok(())
}

fn ablate(cfg: &RunConfig, a: &AblateArgs, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let variants: Vec<Variant> = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants
            .iter()
            .map(|v| v.parse())
            .collect::<Result<_>>()?
    };
    let list = if a.scenarios.is_empty() {
        skill_table()
    } else {
        a.scenarios
            .iter()
            .map(|s| SkillScenario::lookup(s))
            .collect::<Result<_>>()?
    };
    let budget = AblationBudget {
        updates: a.updates.unwrap_or(cfg.train.updates),
        n_rollouts: a.n.unwrap_or(cfg.eval.n_rollouts),
        bins: a.bins.unwrap_or(cfg.eval.bins),
    };
    let table = run_ablation_suite(
        cfg,
        &variants,
        &list,
        &budget,
        cfg.train.seed,
        Some(out_dir),
    )?;
    write_json(&out_dir.join("ablation.json"), &table)?;
    let csv = table.to_csv()?;
    fs::write(out_dir.join("ablation.csv"), &csv)?;
    write!(out, "{csv}")?;
    Ok(())
}

fn terrain_dump(
    cfg: &RunConfig,
    a: &TerrainArgs,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let family: Family = a.family.parse()?;
    if !(0.0..=1.0).contains(&a.difficulty) {
        return Err(Error::Invalid(format!(
            "difficulty {} outside [0, 1]",
            a.difficulty
        )));
    }
    let t = generate(&TerrainSpec::new(family, a.difficulty, cfg.train.seed))?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!(
        "terrain_{}_{:.3}_{}.vox",
        family.name(),
        a.difficulty,
        cfg.train.seed
    ));
    t.save(&path)?;
    let [x, y, z] = t.extents();
    writeln!(
        out,
        "{} family={} difficulty={} seed={} extents={x}x{y}x{z} occupied={}",
        path.display(),
        family.name(),
        a.difficulty,
        cfg.train.seed,
        t.count_occupied()
    )?;
    Ok(())
}

/// Usage errors and unusable configurations map to 1, other failures to 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) => EXIT_USAGE,
        _ => EXIT_FAULT,
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    let dir = &cli.global.out_dir;
    match &cli.command {
        Command::Train => train(&cfg, dir, err),
        Command::Evaluate(a) => evaluate_cmd(&cfg, a, dir, out),
        Command::Ablate(a) => ablate(&cfg, a, dir, out),
        Command::Plot(a) => {
            let kind: PlotKind = a.kind.parse()?;
            let path = plot(&a.files, kind, dir)?;
            writeln!(out, "{}", path.display())?;
            Ok(())
        }
        Command::TerrainDump(a) => terrain_dump(&cfg, a, dir, out),
        Command::Config => {
            write!(out, "{}", cfg.to_toml())?;
            Ok(())
        }
    }
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

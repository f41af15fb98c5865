use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use strider_nn::checkpoint::Checkpoint;

use crate::config::RunConfig;
use crate::percept::NoiseMode;
use crate::psnet::Variant;
use crate::rl::{Agent, Trainer};
use crate::sim::observe::FRONT_FACE_DIM;
use crate::sim::{CommandClass, EnvConfig, StandardObservation, Status, VecEnv};
use crate::terrain::{generate, Family, TerrainSpec};
use crate::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;
/// Largest camera mount offset scenarios may request, m.
pub const MAX_CAMERA_OFFSET: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    HighJump,
    LongJump,
    Stairs,
    Crawl,
    BlindCrawl,
    CameraOffset,
}

impl Skill {
    pub const ALL: [Skill; 6] = [
        Self::HighJump,
        Self::LongJump,
        Self::Stairs,
        Self::Crawl,
        Self::BlindCrawl,
        Self::CameraOffset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::HighJump => "high_jump",
            Self::LongJump => "long_jump",
            Self::Stairs => "stairs",
            Self::Crawl => "crawl",
            Self::BlindCrawl => "blind_crawl",
            Self::CameraOffset => "camera_offset",
        }
    }

    /// Course family the skill is scored on.
    pub fn family(self) -> Family {
        match self {
            Self::HighJump => Family::HighStep,
            Self::LongJump => Family::Gap,
            Self::Stairs => Family::Stairs,
            Self::Crawl | Self::BlindCrawl => Family::Overhang,
            Self::CameraOffset => Family::Discrete,
        }
    }
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Skill {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown skill `{s}`")))
    }
}

/// One evaluated skill row: course family, difficulty sweep and sensing
/// conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillScenario {
    pub skill: Skill,
    pub command: CommandClass,
    pub family: Family,
    /// Inclusive difficulty range swept by the bins.
    pub difficulty: [f64; 2],
    pub noise: NoiseMode,
    pub camera_z_offset: f64,
}

impl SkillScenario {
    /// Default family, full sweep and sensing for `skill` under `command`.
    pub fn new(skill: Skill, command: CommandClass) -> Result<Self> {
        let s = Self {
            skill,
            command,
            family: skill.family(),
            difficulty: [0.0, 1.0],
            noise: if skill == Skill::BlindCrawl {
                NoiseMode::Blind
            } else {
                NoiseMode::None
            },
            camera_z_offset: if skill == Skill::CameraOffset {
                MAX_CAMERA_OFFSET
            } else {
                0.0
            },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn name(&self) -> String {
        format!("{}_{}", self.skill, self.command)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.difficulty;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Invalid(format!(
                "difficulty range [{lo}, {hi}] is not inside [0, 1]"
            )));
        }
        if !(0.0..=MAX_CAMERA_OFFSET).contains(&self.camera_z_offset) {
            return Err(Error::Invalid(format!(
                "camera z offset {} outside [0, {MAX_CAMERA_OFFSET}] m",
                self.camera_z_offset
            )));
        }
        if self.skill == Skill::BlindCrawl && self.noise != NoiseMode::Blind {
            return Err(Error::Invalid("blind_crawl requires blind sensing".into()));
        }
        if self.skill == Skill::CameraOffset && self.camera_z_offset <= 0.0 {
            return Err(Error::Invalid(
                "camera_offset requires a positive camera z offset".into(),
            ));
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            command: self.command,
            noise: self.noise,
            camera_z_offset: self.camera_z_offset,
            ..EnvConfig::default()
        }
    }

    /// Looks up a skill table row by `skill_command` name, or by skill alone
    /// for its first row.
    pub fn lookup(name: &str) -> Result<Self> {
        let rows = skill_table();
        rows.iter()
            .find(|s| s.name() == name)
            .or_else(|| rows.iter().find(|s| s.skill.name() == name))
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("unknown scenario `{name}`")))
    }
}

/// The ten skill/command rows of the success-rate table.
pub fn skill_table() -> Vec<SkillScenario> {
    use CommandClass::*;
    let rows = [
        (Skill::HighJump, Forward),
        (Skill::LongJump, Forward),
        (Skill::Stairs, Forward),
        (Skill::Stairs, Lateral),
        (Skill::Stairs, Backward),
        (Skill::Crawl, Forward),
        (Skill::Crawl, Lateral),
        (Skill::Crawl, Backward),
        (Skill::BlindCrawl, Omni),
        (Skill::CameraOffset, Forward),
    ];
    rows.into_iter()
        .map(|(k, c)| SkillScenario::new(k, c).expect("table rows are valid"))
        .collect()
}

/// Episodes per bin when `n` rollouts are split as evenly as possible;
/// earlier bins take the remainder.
pub fn bin_counts(n: usize, bins: usize) -> Vec<usize> {
    let bins = bins.max(1);
    (0..bins)
        .map(|b| n / bins + usize::from(b < n % bins))
        .collect()
}

/// Centre difficulty of each bin over `[lo, hi]`.
pub fn bin_difficulties(range: [f64; 2], bins: usize) -> Vec<f64> {
    let bins = bins.max(1);
    let [lo, hi] = range;
    (0..bins)
        .map(|b| lo + (hi - lo) * (b as f64 + 0.5) / bins as f64)
        .collect()
}

/// Wilson score interval `(centre, half-width)` for `k` successes in `n`.
pub fn wilson(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.5, 0.5);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    (centre, half)
}

/// Produces actions for the still-running episodes of a batch.
pub trait Controller {
    /// Called once before a batch of `n` episodes starts.
    fn begin(&mut self, n: usize);
    /// `ids` are the running episodes, `obs` their observations in order.
    fn act(
        &mut self,
        ids: &[usize],
        envs: &VecEnv,
        obs: &[StandardObservation],
    ) -> Result<Vec<[f64; 12]>>;
}

/// Mean actions of a trained agent with per-episode recurrent state.
#[derive(Debug)]
pub struct AgentController<'a> {
    pub agent: &'a Agent,
    h: Vec<f32>,
}

impl<'a> AgentController<'a> {
    pub fn new(agent: &'a Agent) -> Self {
        Self {
            agent,
            h: Vec::new(),
        }
    }
}

impl Controller for AgentController<'_> {
    fn begin(&mut self, n: usize) {
        self.h = self.agent.zero_state(n);
    }

    fn act(
        &mut self,
        ids: &[usize],
        _envs: &VecEnv,
        obs: &[StandardObservation],
    ) -> Result<Vec<[f64; 12]>> {
        let g = self.agent.net.gru_dim();
        let mut h: Vec<f32> = ids
            .iter()
            .flat_map(|&i| self.h[i * g..(i + 1) * g].iter().copied())
            .collect();
        let a = self.agent.act(obs, &mut h)?;
        for (k, &i) in ids.iter().enumerate() {
            self.h[i * g..(i + 1) * g].copy_from_slice(&h[k * g..(k + 1) * g]);
        }
        Ok(a.iter().map(|r| r.map(f64::from)).collect())
    }
}

/// Always commands the neutral pose.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroController;

impl Controller for ZeroController {
    fn begin(&mut self, _n: usize) {}

    fn act(
        &mut self,
        ids: &[usize],
        _envs: &VecEnv,
        _obs: &[StandardObservation],
    ) -> Result<Vec<[f64; 12]>> {
        Ok(vec![[0.0; 12]; ids.len()])
    }
}

/// Open-loop gait flipping every hip and knee target between `±amplitude`
/// each control step; walks forward on flat ground.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedGait {
    pub amplitude: f64,
}

impl Default for ScriptedGait {
    fn default() -> Self {
        Self { amplitude: 0.3 }
    }
}

impl Controller for ScriptedGait {
    fn begin(&mut self, _n: usize) {}

    fn act(
        &mut self,
        ids: &[usize],
        envs: &VecEnv,
        _obs: &[StandardObservation],
    ) -> Result<Vec<[f64; 12]>> {
        Ok(ids
            .iter()
            .map(|&i| {
                let s = if envs.envs[i].steps().is_multiple_of(2) {
                    self.amplitude
                } else {
                    -self.amplitude
                };
                let mut a = [0.0; 12];
                for leg in 0..4 {
                    a[3 * leg + 1] = s;
                    a[3 * leg + 2] = s;
                }
                a
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bins: usize,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bins: 10,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub difficulty: f64,
    pub terrain_seed: u64,
    pub episodes: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub settings: SkillScenario,
    pub seed: u64,
    /// SHA-256 of the evaluated checkpoint file, when there is one.
    pub checkpoint: Option<String>,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub wilson_centre: f64,
    pub wilson_half_width: f64,
    pub bins: Vec<BinReport>,
    pub failures: BTreeMap<String, usize>,
    /// Mean `|v_cmd - v_xy|` over all steps, per command class.
    pub velocity_error: BTreeMap<String, f64>,
    pub mean_episode_steps: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const CSV_HEADER: [&str; 12] = [
    "scenario",
    "skill",
    "command",
    "family",
    "noise",
    "camera_z_offset",
    "episodes",
    "successes",
    "success_rate",
    "wilson_half_width",
    "velocity_error",
    "mean_episode_steps",
];

pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in reports {
        let s = &r.settings;
        let err = r
            .velocity_error
            .get(s.command.name())
            .copied()
            .unwrap_or(f64::NAN);
        w.write_record([
            r.scenario.clone(),
            s.skill.to_string(),
            s.command.to_string(),
            s.family.name().to_string(),
            format!("{:?}", s.noise).to_lowercase(),
            format!("{}", s.camera_z_offset),
            r.episodes.to_string(),
            r.successes.to_string(),
            format!("{:.6}", r.success_rate),
            format!("{:.6}", r.wilson_half_width),
            format!("{err:.6}"),
            format!("{:.3}", r.mean_episode_steps),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn bin_seed(seed: u64, bin: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(bin as u64)
}

/// Runs `n_rollouts` single episodes split evenly over the difficulty bins,
/// one course per bin. Deterministic per seed.
pub fn evaluate(
    ctrl: &mut dyn Controller,
    scenario: &SkillScenario,
    n_rollouts: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    scenario.validate()?;
    if n_rollouts == 0 {
        return Err(Error::Invalid("n_rollouts must be at least 1".into()));
    }
    let counts = bin_counts(n_rollouts, opts.bins);
    let diffs = bin_difficulties(scenario.difficulty, opts.bins);
    let mut bins = Vec::with_capacity(counts.len());
    let mut terrains = Vec::with_capacity(n_rollouts);
    let mut bin_of = Vec::with_capacity(n_rollouts);
    for (b, (&c, &d)) in counts.iter().zip(&diffs).enumerate() {
        let ts = bin_seed(seed, b);
        let t = Arc::new(generate(&TerrainSpec::new(scenario.family, d, ts))?);
        terrains.extend(std::iter::repeat_n(t, c));
        bin_of.extend(std::iter::repeat_n(b, c));
        bins.push(BinReport {
            difficulty: d,
            terrain_seed: ts,
            episodes: c,
            successes: 0,
        });
    }
    let mut envs = VecEnv::new(&scenario.env_config(), terrains, seed, opts.threads)?;
    ctrl.begin(n_rollouts);

    let mut outcome: Vec<Option<Status>> = vec![None; n_rollouts];
    let mut err_sum: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    let mut total_steps = 0usize;
    let mut ids: Vec<usize> = (0..n_rollouts).collect();
    while !ids.is_empty() {
        let running: Vec<bool> = outcome.iter().map(Option::is_none).collect();
        let obs: Vec<StandardObservation> = envs
            .map_mut(|i, e| running[i].then(|| e.observe_standard()))
            .into_iter()
            .flatten()
            .collect();
        let actions = ctrl.act(&ids, &envs, &obs)?;
        if actions.len() != ids.len() {
            return Err(Error::Invalid(format!(
                "controller returned {} actions for {} episodes",
                actions.len(),
                ids.len()
            )));
        }
        let mut full = vec![[0.0; 12]; n_rollouts];
        for (&i, a) in ids.iter().zip(actions) {
            full[i] = a;
        }
        let trs = envs.map_mut(|i, e| running[i].then(|| e.step(&full[i])));
        for (i, tr) in trs.into_iter().enumerate() {
            let Some(tr) = tr else { continue };
            let c = tr.command;
            let e = ((c.velocity[0] - tr.velocity[0]).powi(2)
                + (c.velocity[1] - tr.velocity[1]).powi(2))
            .sqrt();
            let slot = err_sum.entry(c.class.name()).or_insert((0.0, 0));
            slot.0 += e;
            slot.1 += 1;
            total_steps += 1;
            if tr.status.is_done() {
                outcome[i] = Some(tr.status);
            }
        }
        ids.retain(|&i| outcome[i].is_none());
    }

    let mut failures = BTreeMap::new();
    let mut successes = 0;
    for (i, st) in outcome.iter().enumerate() {
        match st.expect("every episode ends") {
            Status::Success => {
                successes += 1;
                bins[bin_of[i]].successes += 1;
            }
            Status::Failure(f) => *failures.entry(f.name().to_string()).or_insert(0) += 1,
            Status::Running => unreachable!("finished episodes are not running"),
        }
    }
    let (centre, half) = wilson(successes, n_rollouts, Z_95);
    Ok(EvalReport {
        scenario: scenario.name(),
        settings: scenario.clone(),
        seed,
        checkpoint: None,
        episodes: n_rollouts,
        successes,
        success_rate: successes as f64 / n_rollouts as f64,
        wilson_centre: centre,
        wilson_half_width: half,
        bins,
        failures,
        velocity_error: err_sum
            .into_iter()
            .map(|(c, (s, k))| (c.to_string(), s / k as f64))
            .collect(),
        mean_episode_steps: total_steps as f64 / n_rollouts as f64,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Evaluates a checkpoint file, which must be left byte-identical.
pub fn evaluate_checkpoint(
    path: &Path,
    scenario: &SkillScenario,
    n_rollouts: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let before = sha256_hex(&fs::read(path)?);
    let agent = Agent::from_checkpoint(&Checkpoint::load(path)?)?;
    let mut report = evaluate(
        &mut AgentController::new(&agent),
        scenario,
        n_rollouts,
        seed,
        opts,
    )?;
    let after = sha256_hex(&fs::read(path)?);
    if before != after {
        return Err(Error::Fault(format!(
            "checkpoint {} changed during evaluation",
            path.display()
        )));
    }
    report.checkpoint = Some(before);
    Ok(report)
}

/// Mean squared error of the decoded front face against the clean front
/// cube face, over `steps` control steps of `envs` episodes on `family`.
pub fn front_depth_error(
    agent: &Agent,
    family: Family,
    difficulty: f64,
    envs: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let t = Arc::new(generate(&TerrainSpec::new(family, difficulty, seed))?);
    let mut venv = VecEnv::new(&agent.config.env_config(), vec![t; envs], seed, 1)?;
    let mut h = agent.zero_state(envs);
    let g = agent.net.gru_dim();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for _ in 0..steps {
        let bundles = venv.observe();
        let obs: Vec<StandardObservation> = bundles.iter().map(|b| b.standard.clone()).collect();
        let (a, front) = agent.act_and_reconstruct(&obs, &mut h)?;
        for (k, b) in bundles.iter().enumerate() {
            let pred = &front[k * FRONT_FACE_DIM..(k + 1) * FRONT_FACE_DIM];
            for (p, t) in pred.iter().zip(b.privileged.front_face()) {
                sum += f64::from(p - t).powi(2);
            }
            count += FRONT_FACE_DIM;
        }
        let acts: Vec<[f64; 12]> = a.iter().map(|r| r.map(f64::from)).collect();
        for (i, tr) in venv.step(&acts).iter().enumerate() {
            if tr.status.is_done() {
                venv.envs[i].reset();
                h[i * g..(i + 1) * g].fill(0.0);
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Training and evaluation budget shared by every ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationBudget {
    pub updates: usize,
    pub n_rollouts: usize,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub scenario: String,
    pub success_rate: Option<f64>,
    pub wilson_half_width: Option<f64>,
    pub velocity_error: Option<f64>,
    pub front_depth_error: Option<f64>,
    /// Loss terms present in the last logged update.
    pub loss_terms: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([
            "variant",
            "scenario",
            "success_rate",
            "wilson_half_width",
            "velocity_error",
            "front_depth_error",
            "loss_terms",
            "error",
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.scenario.clone(),
                opt(r.success_rate),
                opt(r.wilson_half_width),
                opt(r.velocity_error),
                opt(r.front_depth_error),
                r.loss_terms.join(" "),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.variant) {
                v.push(r.variant.clone());
            }
        }
        v
    }
}

/// Names of the loss terms a breakdown carries.
pub fn loss_terms(l: &crate::psnet::LossBreakdown, variant: Variant) -> Vec<String> {
    let mut t = vec!["surrogate", "value", "entropy"];
    if variant.uses_reconstruction() {
        t.extend(["kl", "obs", "velocity", "reconstruction"]);
    }
    if l.depth.is_some() {
        t.push("depth");
    }
    if l.contrastive.is_some() {
        t.push("contrastive");
    }
    t.push("total");
    t.into_iter().map(String::from).collect()
}

struct Trained {
    agent: Agent,
    terms: Vec<String>,
}

fn train_variant(
    base: &RunConfig,
    variant: Variant,
    updates: usize,
    out_dir: Option<&Path>,
) -> Result<Trained> {
    let mut cfg = base.clone();
    cfg.train.variant = variant;
    cfg.train.updates = updates;
    cfg.validate()?;
    let mut trainer = Trainer::new(&cfg)?;
    let dir = out_dir.map(|d| d.join(variant.name()));
    let mut sink: Box<dyn Write> = match &dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Box::new(std::io::BufWriter::new(fs::File::create(
                d.join("metrics.jsonl"),
            )?))
        }
        None => Box::new(std::io::sink()),
    };
    let mut terms = Vec::new();
    for _ in 0..updates {
        let m = trainer.iterate()?;
        serde_json::to_writer(&mut sink, &m)?;
        writeln!(sink)?;
        terms = loss_terms(&m.losses, variant);
    }
    sink.flush()?;
    if let Some(d) = &dir {
        trainer.agent.save(&d.join("final.ckpt"))?;
    }
    Ok(Trained {
        agent: trainer.agent,
        terms,
    })
}

/// Trains every variant with the same seed and budget, then evaluates the
/// same scenarios. A failing variant yields rows carrying its error.
pub fn run_ablation_suite(
    base: &RunConfig,
    variants: &[Variant],
    scenarios: &[SkillScenario],
    budget: &AblationBudget,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if variants.is_empty() || scenarios.is_empty() {
        return Err(Error::Invalid(
            "ablation needs at least one variant and one scenario".into(),
        ));
    }
    if budget.n_rollouts == 0 {
        return Err(Error::Invalid("n_rollouts must be at least 1".into()));
    }
    let opts = EvalOptions {
        bins: budget.bins,
        threads: base.train.threads,
    };
    let mut table = AblationTable::default();
    for &v in variants {
        let trained = train_variant(base, v, budget.updates, out_dir);
        let trained = match trained {
            Ok(t) => t,
            Err(e) => {
                for s in scenarios {
                    table.rows.push(AblationRow {
                        variant: v.name().into(),
                        scenario: s.name(),
                        success_rate: None,
                        wilson_half_width: None,
                        velocity_error: None,
                        front_depth_error: None,
                        loss_terms: Vec::new(),
                        error: Some(e.to_string()),
                    });
                }
                continue;
            }
        };
        let depth_err = front_depth_error(&trained.agent, Family::Flat, 0.0, 8, 20, seed).ok();
        for s in scenarios {
            let r = evaluate(
                &mut AgentController::new(&trained.agent),
                s,
                budget.n_rollouts,
                seed,
                &opts,
            );
            table.rows.push(match r {
                Ok(r) => AblationRow {
                    variant: v.name().into(),
                    scenario: s.name(),
                    success_rate: Some(r.success_rate),
                    wilson_half_width: Some(r.wilson_half_width),
                    velocity_error: r.velocity_error.get(s.command.name()).copied(),
                    front_depth_error: depth_err,
                    loss_terms: trained.terms.clone(),
                    error: None,
                },
                Err(e) => AblationRow {
                    variant: v.name().into(),
                    scenario: s.name(),
                    success_rate: None,
                    wilson_half_width: None,
                    velocity_error: None,
                    front_depth_error: depth_err,
                    loss_terms: trained.terms.clone(),
                    error: Some(e.to_string()),
                },
            });
        }
    }
    Ok(table)
}

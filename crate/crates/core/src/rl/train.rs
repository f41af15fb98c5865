use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use strider_nn::optim::Adam;

use super::agent::Agent;
use super::buffer::{RolloutBuffer, StepRecord};
use super::policy::log_prob;
use super::ppo::{ppo_update, UpdateStats};
use crate::config::RunConfig;
use crate::config::TerrainSection;
use crate::psnet::{LossBreakdown, ACTION_DIM};
use crate::sim::{ObservationBundle, PrivilegedObservation, Status, VecEnv};
use crate::terrain::{generate, Curriculum, Family, TerrainSpec, VoxelTerrain};
use crate::Result;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: usize,
    pub env_steps: usize,
    /// Mean per-step reward.
    pub reward: f64,
    /// Mean per-step value of each reward term.
    pub reward_terms: BTreeMap<String, f64>,
    /// Mean per-step linear-velocity tracking reward.
    pub tracking: f64,
    pub episodes: usize,
    pub success_rate: Option<f64>,
    pub failures: BTreeMap<String, usize>,
    pub losses: LossBreakdown,
    pub collapse: Option<f64>,
    pub grad_norm: f64,
    pub optimizer_steps: usize,
    pub skipped_steps: usize,
    /// Mean curriculum level per terrain family.
    pub curriculum: BTreeMap<String, f64>,
}

#[derive(Debug, Default)]
pub struct RolloutStats {
    pub steps: usize,
    pub reward: f64,
    pub terms: BTreeMap<String, f64>,
    pub episodes: usize,
    pub successes: usize,
    pub failures: BTreeMap<String, usize>,
}

/// Rollout, update and curriculum loop over a vectorised environment.
pub struct Trainer {
    pub agent: Agent,
    pub adam: Adam,
    pub envs: VecEnv,
    pub curricula: Vec<Curriculum>,
    terrains: HashMap<(Family, usize), Arc<VoxelTerrain>>,
    pending: Vec<ObservationBundle>,
    h: Vec<f32>,
    rng: ChaCha8Rng,
    update: usize,
}

fn terrain_seed(base: u64, family: Family, level: usize) -> u64 {
    let f = Family::ALL.iter().position(|&x| x == family).unwrap_or(0) as u64;
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(f * 1000 + level as u64)
}

fn cached_terrain(
    cache: &mut HashMap<(Family, usize), Arc<VoxelTerrain>>,
    cfg: &TerrainSection,
    family: Family,
    level: usize,
) -> Result<Arc<VoxelTerrain>> {
    if let Some(t) = cache.get(&(family, level)) {
        return Ok(t.clone());
    }
    let d = if cfg.max_level == 0 {
        0.0
    } else {
        level as f64 / cfg.max_level as f64
    };
    let t = Arc::new(generate(&TerrainSpec::new(
        family,
        d,
        terrain_seed(cfg.seed, family, level),
    ))?);
    cache.insert((family, level), t.clone());
    Ok(t)
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let agent = Agent::new(config)?;
        let adam = Adam::new(&agent.store, config.ppo.learning_rate);
        let n = config.train.envs;
        let fams = &config.terrain.families;
        let mut terrains = HashMap::new();
        let initial = (0..n)
            .map(|i| cached_terrain(&mut terrains, &config.terrain, fams[i % fams.len()], 0))
            .collect::<Result<Vec<_>>>()?;
        let mut envs = VecEnv::new(
            &config.env_config(),
            initial,
            config.train.seed,
            config.train.threads,
        )?;
        let pending = envs.observe();
        Ok(Self {
            h: agent.zero_state(n),
            agent,
            adam,
            envs,
            curricula: (0..n)
                .map(|_| Curriculum::new(config.terrain.max_level))
                .collect(),
            terrains,
            pending,
            rng: ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x5EED_0F7E_A100),
            update: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.agent.config
    }

    pub fn updates_done(&self) -> usize {
        self.update
    }

    /// Fills one rollout buffer with the current policy.
    pub fn collect(&mut self) -> Result<(RolloutBuffer, RolloutStats)> {
        let cfg = self.agent.config.clone();
        let (t_len, n) = (cfg.train.horizon, cfg.train.envs);
        let gru = self.agent.net.gru_dim();
        let mut buf = RolloutBuffer::new(t_len, n, gru, self.h.clone());
        let mut stats = RolloutStats::default();
        let std: Vec<f64> = self.agent.log_std().iter().map(|s| s.exp()).collect();
        let log_std = self.agent.log_std();
        for _ in 0..t_len {
            let obs = std::mem::take(&mut self.pending);
            let standard: Vec<_> = obs.iter().map(|o| o.standard.clone()).collect();
            let privileged: Vec<PrivilegedObservation> =
                obs.iter().map(|o| o.privileged.clone()).collect();
            let means = self.agent.act(&standard, &mut self.h)?;
            let values = self.agent.values(&privileged)?;
            let mut actions = Vec::with_capacity(n);
            let mut sampled = Vec::with_capacity(n);
            for mean in &means {
                let mut a = [0.0f64; ACTION_DIM];
                for k in 0..ACTION_DIM {
                    let e: f64 = StandardNormal.sample(&mut self.rng);
                    a[k] = (mean[k] as f64 + std[k] * e) as f32 as f64;
                }
                let m64: Vec<f64> = mean.iter().map(|&v| v as f64).collect();
                sampled.push(log_prob(&a, &m64, &log_std));
                actions.push(a);
            }
            let transitions = self.envs.step(&actions);
            for (i, tr) in transitions.iter().enumerate() {
                let o = &obs[i];
                let a32: Vec<f32> = actions[i].iter().map(|&v| v as f32).collect();
                let done = tr.status.is_done();
                buf.push(&StepRecord {
                    history: &o.standard.history,
                    depth: &o.standard.depth.data,
                    state: &o.privileged.state,
                    vision: &o.privileged.vision,
                    action: &a32,
                    log_prob: sampled[i],
                    reward: tr.reward.total * cfg.ppo.reward_scale,
                    value: values[i],
                    done,
                    next_obs: &tr.next_proprio,
                    velocity: &o.privileged.velocity,
                    front: o.privileged.front_face(),
                });
                stats.steps += 1;
                stats.reward += tr.reward.total;
                for (name, v) in tr.reward.terms() {
                    *stats.terms.entry(name.to_string()).or_default() += v;
                }
                if done {
                    self.end_episode(i, tr.status, &mut stats)?;
                }
            }
            self.pending = self.envs.observe();
        }
        let last: Vec<PrivilegedObservation> =
            self.pending.iter().map(|o| o.privileged.clone()).collect();
        let bootstrap = self.agent.values(&last)?;
        buf.finish(bootstrap, cfg.ppo.gamma, cfg.ppo.lambda);
        Ok((buf, stats))
    }

    fn end_episode(&mut self, i: usize, status: Status, stats: &mut RolloutStats) -> Result<()> {
        stats.episodes += 1;
        match status {
            Status::Success => stats.successes += 1,
            Status::Failure(f) => *stats.failures.entry(f.name().to_string()).or_default() += 1,
            Status::Running => {}
        }
        let before = self.curricula[i].level;
        let level = self.curricula[i].update(status == Status::Success).level;
        if level != before {
            let fams = &self.agent.config.terrain.families;
            let t = cached_terrain(
                &mut self.terrains,
                &self.agent.config.terrain,
                fams[i % fams.len()],
                level,
            )?;
            self.envs.envs[i].reset_on(t);
        } else {
            self.envs.envs[i].reset();
        }
        let g = self.agent.net.gru_dim();
        self.h[i * g..(i + 1) * g].fill(0.0);
        Ok(())
    }

    fn curriculum_summary(&self) -> BTreeMap<String, f64> {
        let fams = &self.agent.config.terrain.families;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (i, c) in self.curricula.iter().enumerate() {
            let e = sums
                .entry(fams[i % fams.len()].name().to_string())
                .or_default();
            e.0 += c.level as f64;
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }

    /// One rollout followed by one PPO update.
    pub fn iterate(&mut self) -> Result<UpdateMetrics> {
        let (buf, rs) = self.collect()?;
        let ppo = self.agent.config.ppo;
        let us: UpdateStats = ppo_update(
            &self.agent.net,
            &mut self.agent.store,
            &mut self.adam,
            &buf,
            &ppo,
            &mut self.rng,
        )?;
        let steps = rs.steps.max(1) as f64;
        let metrics = UpdateMetrics {
            update: self.update,
            env_steps: rs.steps,
            reward: rs.reward / steps,
            tracking: rs.terms.get("lin_vel").copied().unwrap_or(0.0) / steps,
            reward_terms: rs
                .terms
                .iter()
                .map(|(k, v)| (k.clone(), v / steps))
                .collect(),
            episodes: rs.episodes,
            success_rate: (rs.episodes > 0).then(|| rs.successes as f64 / rs.episodes as f64),
            failures: rs.failures,
            losses: us.losses,
            collapse: us.collapse,
            grad_norm: us.grad_norm,
            optimizer_steps: us.steps,
            skipped_steps: us.skipped,
            curriculum: self.curriculum_summary(),
        };
        self.update += 1;
        Ok(metrics)
    }

    /// Runs the configured number of updates, writing one JSON line per
    /// update to `metrics` and checkpoints under `out_dir`. A failing update
    /// still leaves a `partial.ckpt` behind.
    pub fn run<W: Write>(
        &mut self,
        out_dir: Option<&Path>,
        metrics: &mut W,
        mut progress: impl FnMut(&UpdateMetrics),
    ) -> Result<Vec<UpdateMetrics>> {
        let updates = self.agent.config.train.updates;
        let every = self.agent.config.train.checkpoint_every;
        let mut all = Vec::with_capacity(updates);
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d)?;
        }
        while self.update < updates {
            let m = match self.iterate() {
                Ok(m) => m,
                Err(e) => {
                    if let Some(d) = out_dir {
                        self.agent.save(&d.join("partial.ckpt"))?;
                    }
                    return Err(e);
                }
            };
            serde_json::to_writer(&mut *metrics, &m)?;
            metrics.write_all(b"\n")?;
            progress(&m);
            all.push(m);
            if let Some(d) = out_dir {
                if every > 0 && self.update.is_multiple_of(every) && self.update < updates {
                    self.agent.save(&checkpoint_path(d, self.update))?;
                }
            }
        }
        if let Some(d) = out_dir {
            self.agent.save(&d.join("final.ckpt"))?;
        }
        metrics.flush()?;
        Ok(all)
    }
}

pub fn checkpoint_path(dir: &Path, update: usize) -> PathBuf {
    dir.join(format!("update_{update:05}.ckpt"))
}

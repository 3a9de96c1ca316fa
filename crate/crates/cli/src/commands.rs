use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dynode_core::data::{collect_random, read_dataset, write_dataset, Normalizer, ReplayBuffer};
use dynode_core::envs::{Env, EnvKind};
use dynode_core::eval::svg::{Plot, Series};
use dynode_core::eval::{self, Cell, EvalSet, MetricReport, EVAL_SEED_BASE};
use dynode_core::models::{self, BaselineModel, DyNodeModel, DynamicsModel, ModelKind, ModelMeta};
use dynode_core::ode::SolverConfig;
use dynode_core::rl::{curve_csv, Agent, CurveRow, Variant};

use crate::{thread_count, CliError, ExperimentConfig};

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Output layout under `experiment.out`.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self, env: EnvKind, samples: usize, seed: u64) -> PathBuf {
        self.root.join("data").join(env.name()).join(format!("n{samples}_s{seed}"))
    }

    pub fn model(&self, env: EnvKind, kind: ModelKind, samples: usize, seed: u64) -> PathBuf {
        self.root.join("models").join(env.name()).join(kind.name()).join(format!("n{samples}_s{seed}")).join("model.bin")
    }

    pub fn eval(&self, env: EnvKind) -> PathBuf {
        self.root.join("eval").join(env.name())
    }

    pub fn rl(&self, env: EnvKind) -> PathBuf {
        self.root.join("rl").join(env.name())
    }

    pub fn repro(&self, target: ReproTarget) -> PathBuf {
        self.root.join("repro").join(target.name())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes `<dir>/<command>.config.toml`.
fn write_resolved(cfg: &ExperimentConfig, dir: &Path, command: &str) -> Result<()> {
    write_file(&dir.join(format!("{command}.config.toml")), cfg.to_toml()?)
}

/// Runs `f` over `items` on up to `DYNODE_THREADS` workers. Results keep the
/// input order, so outputs do not depend on scheduling.
fn fan_out<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?.min(items.len().max(1)))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn model_grid(cfg: &ExperimentConfig) -> Vec<(ModelKind, usize, u64)> {
    let x = &cfg.experiment;
    let mut grid = Vec::new();
    for &kind in &x.models {
        for &n in &x.samples {
            for &seed in &x.seeds {
                grid.push((kind, n, seed));
            }
        }
    }
    grid
}

fn write_dataset_dir(env: &Env, n: usize, seed: u64, episode_len: usize, dir: &Path) -> Result<ReplayBuffer> {
    let buffer = collect_random(env, n, episode_len, seed)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    write_dataset(dir, env, &buffer, seed, episode_len)?;
    Ok(buffer)
}

/// `collect`: one random-policy dataset per budget and seed.
pub fn collect(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let x = &cfg.experiment;
    let env = Env::new(x.env);
    let paths = RunPaths::new(&x.out);
    write_resolved(cfg, &paths.root, "collect")?;
    let tasks: Vec<(usize, u64)> = x.samples.iter().flat_map(|&n| x.seeds.iter().map(move |&s| (n, s))).collect();
    fan_out(&tasks, |&(n, seed)| {
        let dir = paths.dataset(x.env, n, seed);
        write_dataset_dir(&env, n, seed, x.episode_len, &dir)?;
        log::info!("collected {n} {} transitions for seed {seed} into {}", env.name(), dir.display());
        Ok(dir)
    })
}

/// The stored dataset if it matches, otherwise a fresh collection.
fn training_data(cfg: &ExperimentConfig, paths: &RunPaths, n: usize, seed: u64) -> Result<ReplayBuffer> {
    let x = &cfg.experiment;
    let env = Env::new(x.env);
    let dir = paths.dataset(x.env, n, seed);
    if dir.join("manifest.toml").exists() {
        let (manifest, stored_env, buffer) = read_dataset(&dir)?;
        if stored_env == env && manifest.samples == n && manifest.seed == seed && manifest.episode_len == x.episode_len {
            return Ok(buffer);
        }
    }
    write_dataset_dir(&env, n, seed, x.episode_len, &dir)
}

fn loss_csv(history: &models::LossHistory, every: usize) -> String {
    let mut out = String::from("iteration,loss\n");
    for (it, loss) in history.windows(every) {
        let _ = writeln!(out, "{it},{loss}");
    }
    out
}

fn train_one(cfg: &ExperimentConfig, paths: &RunPaths, kind: ModelKind, n: usize, seed: u64) -> Result<PathBuf> {
    let env = Env::new(cfg.experiment.env);
    let buffer = training_data(cfg, paths, n, seed)?;
    let tc = cfg.train.for_kind(kind, seed);
    let norm = Normalizer::for_env(&env, &buffer)?;
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(1);
    let net = cfg.model.net().build(env.state_dim(), env.action_dim(), &mut init)?;
    let mut model: DynamicsModel = match kind.method() {
        Some(m) => DyNodeModel::new(net, SolverConfig::new(m, cfg.model.substeps, env.spec().dt)?, norm)?.into(),
        None => BaselineModel::new(net, norm)?.into(),
    };
    let history = models::train(&mut model, &buffer, &tc)?;
    let path = paths.model(env.kind(), kind, n, seed);
    write_file(&path.with_file_name("loss.csv"), loss_csv(&history, tc.eval_every))?;
    model.save(&path, &ModelMeta { env: env.name().into(), horizon: tc.horizon, samples: n, seed })?;
    log::info!("trained {kind} on {n} {} samples, seed {seed}: {}", env.name(), path.display());
    Ok(path)
}

/// `train-model`: one checkpoint and loss CSV per model, budget and seed.
pub fn train_models(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    if let Some(h) = cfg.train.horizon {
        if cfg.experiment.models.contains(&ModelKind::Baseline) && h != 1 {
            log::warn!("the baseline trains on one-step pairs; train.horizon = {h} is ignored for it");
        }
    }
    let paths = RunPaths::new(&cfg.experiment.out);
    write_resolved(cfg, &paths.root, "train-model")?;
    fan_out(&model_grid(cfg), |&(kind, n, seed)| train_one(cfg, &paths, kind, n, seed))
}

fn load_model(path: &Path) -> Result<DynamicsModel> {
    if !path.exists() {
        return Err(CliError::Io(format!("no checkpoint at {}; run `dynode train-model` with the same configuration first", path.display())));
    }
    Ok(DynamicsModel::load(path)?.0)
}

/// Loads the checkpoint, training it first if it does not exist yet.
fn ensure_model(cfg: &ExperimentConfig, paths: &RunPaths, kind: ModelKind, n: usize, seed: u64) -> Result<DynamicsModel> {
    let path = paths.model(cfg.experiment.env, kind, n, seed);
    if !path.exists() {
        train_one(cfg, paths, kind, n, seed)?;
    }
    load_model(&path)
}

fn score(env: EnvKind, n: usize, seed: u64, model: &DynamicsModel, set: &EvalSet) -> Result<Cell> {
    let errors = eval::horizon_errors(model, set)?;
    let horizons: Vec<usize> = (0..=errors.len()).collect();
    Ok(Cell {
        env: env.name().into(),
        model: model.kind().name().into(),
        samples: n,
        seed,
        mpe: errors.iter().sum::<f64>() / errors.len() as f64,
        cumulative: eval::cumulative_from(&errors, &horizons),
    })
}

fn score_grid(cfg: &ExperimentConfig, paths: &RunPaths, train_missing: bool) -> Result<Vec<Cell>> {
    let x = &cfg.experiment;
    let set = EvalSet::collect(&Env::new(x.env), cfg.eval.rollouts, cfg.eval.horizon, EVAL_SEED_BASE)?;
    fan_out(&model_grid(cfg), |&(kind, n, seed)| {
        let model = if train_missing { ensure_model(cfg, paths, kind, n, seed)? } else { load_model(&paths.model(x.env, kind, n, seed))? };
        score(x.env, n, seed, &model, &set)
    })
}

/// `eval`: scores every trained model and writes the metric report.
pub fn eval(cfg: &ExperimentConfig) -> Result<MetricReport> {
    let paths = RunPaths::new(&cfg.experiment.out);
    let dir = paths.eval(cfg.experiment.env);
    write_resolved(cfg, &dir, "eval")?;
    let report = MetricReport { cells: score_grid(cfg, &paths, false)? };
    report.write(&dir)?;
    Ok(report)
}

/// Per-run summary of an `rl` invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RlRun {
    pub variant: Variant,
    pub seed: u64,
    pub curve: Vec<CurveRow>,
    /// Mean return of the last ten training episodes.
    pub final_return: f64,
}

fn run_agent_checkpointed(cfg: &ExperimentConfig, dir: &Path, variant: Variant, seed: u64, resume: bool) -> Result<RlRun> {
    let env = Env::new(cfg.experiment.env);
    let stem = format!("{variant}_s{seed}");
    let ckpt = dir.join(format!("{stem}.agent.json"));
    let sac = cfg.sac_for_seed(seed);
    let mut agent = if resume && ckpt.exists() {
        let mut a = Agent::load(&ckpt)?;
        let same = a.env == env && a.variant == variant && dynode_core::rl::SacConfig { budget: sac.budget, ..a.cfg.clone() } == sac;
        if !same {
            return Err(CliError::Config(format!("checkpoint {} was written with a different configuration", ckpt.display())));
        }
        a.cfg.budget = sac.budget;
        log::info!("resuming {stem} on {} at step {}", env.name(), a.step);
        a
    } else {
        Agent::new(env, variant, sac)?
    };
    let budget = agent.cfg.budget;
    let every = cfg.experiment.checkpoint_every;
    loop {
        let target = agent.step.checked_div(every).map_or(budget, |k| ((k + 1) * every).min(budget));
        if let Err(e) = agent.run_until(target) {
            let failed = dir.join(format!("{stem}.failed.json"));
            agent.save(&failed)?;
            log::error!("{stem} failed at step {}; run state written to {}", agent.step, failed.display());
            return Err(e.into());
        }
        agent.save(&ckpt)?;
        if agent.step >= budget {
            break;
        }
    }
    write_file(&dir.join(format!("{stem}.csv")), curve_csv(&agent.curve))?;
    log::info!("{stem} on {}: final return {:.1}", env.name(), agent.final_return(10));
    Ok(RlRun { variant, seed, final_return: agent.final_return(10), curve: agent.curve })
}

/// Seed-mean return on a grid of environment steps, holding each run's
/// latest episode return.
fn mean_curves(runs: &[RlRun], variants: &[Variant], grid: usize, budget: usize) -> Vec<(Variant, Vec<(f64, f64)>)> {
    let steps: Vec<usize> = (0..=budget / grid.max(1)).map(|k| k * grid).collect();
    variants
        .iter()
        .map(|&v| {
            let mine: Vec<&RlRun> = runs.iter().filter(|r| r.variant == v).collect();
            let pts = steps
                .iter()
                .map(|&g| {
                    let sum: f64 =
                        mine.iter().map(|r| r.curve.iter().rev().find(|row| row.env_step <= g).map_or(f64::NAN, |row| row.episode_return)).sum();
                    (g as f64, sum / mine.len() as f64)
                })
                .collect();
            (v, pts)
        })
        .collect()
}

/// Learning curves of all variants on one plot.
pub fn fig3_svg(env: &str, curves: &[(Variant, Vec<(f64, f64)>)]) -> String {
    let mut plot = Plot::new(format!("{env}: episode return (seed mean)"), "environment steps", "return");
    for (v, pts) in curves {
        plot.series.push(Series::line(v.name(), pts.clone()));
    }
    plot.render()
}

fn fig3_csv(curves: &[(Variant, Vec<(f64, f64)>)]) -> String {
    let mut out = String::from("env_step");
    for (v, _) in curves {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
    if let Some((_, first)) = curves.first() {
        for (i, (x, _)) in first.iter().enumerate() {
            let _ = write!(out, "{x}");
            for (_, pts) in curves {
                let _ = write!(out, ",{}", pts[i].1);
            }
            out.push('\n');
        }
    }
    out
}

/// `rl`: trains every variant for every seed and plots the learning curves.
pub fn rl(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<RlRun>> {
    let x = &cfg.experiment;
    let env = Env::new(x.env);
    let dir = RunPaths::new(&x.out).rl(x.env);
    write_resolved(cfg, &dir, "rl")?;
    let tasks: Vec<(Variant, u64)> = x.variants.iter().flat_map(|&v| x.seeds.iter().map(move |&s| (v, s))).collect();
    let runs = fan_out(&tasks, |&(v, seed)| run_agent_checkpointed(cfg, &dir, v, seed, resume))?;
    let curves = mean_curves(&runs, &x.variants, env.spec().max_episode_len, cfg.rl.budget);
    write_file(&dir.join(format!("fig3_{}.svg", env.name())), fig3_svg(env.name(), &curves))?;
    write_file(&dir.join(format!("fig3_{}.csv", env.name())), fig3_csv(&curves))?;
    let mut summary = String::from("variant,seed,final_return\n");
    for r in &runs {
        let _ = writeln!(summary, "{},{},{}", r.variant, r.seed, r.final_return);
    }
    write_file(&dir.join("final_returns.csv"), summary)?;
    Ok(runs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReproTarget {
    All,
    Table1,
    Fig4,
    Fig5,
    Fig3,
}

impl ReproTarget {
    pub fn name(self) -> &'static str {
        match self {
            ReproTarget::All => "all",
            ReproTarget::Table1 => "table1",
            ReproTarget::Fig4 => "fig4",
            ReproTarget::Fig5 => "fig5",
            ReproTarget::Fig3 => "fig3",
        }
    }
}

/// The model grid on all four environments: MPE table, error-vs-budget and
/// cumulative-error figures.
fn repro_table1(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let paths = RunPaths::new(&cfg.experiment.out);
    let dir = paths.repro(ReproTarget::Table1);
    write_resolved(cfg, &dir, "repro")?;
    let mut cells = Vec::new();
    for env in EnvKind::ALL {
        let c = cfg.with_env(env);
        train_models(&c)?;
        cells.extend(score_grid(&c, &paths, false)?);
    }
    MetricReport { cells }.write(&dir)?;
    Ok(dir)
}

/// Cumulative error curves at the largest budget on all four environments.
fn repro_fig4(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let paths = RunPaths::new(&cfg.experiment.out);
    let dir = paths.repro(ReproTarget::Fig4);
    write_resolved(cfg, &dir, "repro")?;
    let largest = cfg.experiment.samples.iter().copied().max().expect("validated non-empty");
    let mut cells = Vec::new();
    for env in EnvKind::ALL {
        let mut c = cfg.with_env(env);
        c.experiment.samples = vec![largest];
        cells.extend(score_grid(&c, &paths, true)?);
    }
    let report = MetricReport { cells };
    for env in EnvKind::ALL {
        write_file(&dir.join(format!("fig4_{}.svg", env.name())), report.fig4_svg(env.name()))?;
        write_file(&dir.join(format!("fig4_{}.csv", env.name())), report.fig4_csv(env.name()))?;
    }
    Ok(dir)
}

/// Open-loop reconstruction of the scripted MountainCar trajectory by each
/// model trained on the largest budget.
fn repro_fig5(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let c = cfg.with_env(EnvKind::MountainCar);
    let paths = RunPaths::new(&c.experiment.out);
    let dir = paths.repro(ReproTarget::Fig5);
    write_resolved(&c, &dir, "repro")?;
    let n = c.experiment.samples.iter().copied().max().expect("validated non-empty");
    let rollout = eval::scripted_mountain_car()?;
    let mut errors = String::from("model,seed,final_error\n");
    for &seed in &c.experiment.seeds {
        let train: Vec<Vec<f64>> = training_data(&c, &paths, n, seed)?.iter().map(|t| t.state.clone()).collect();
        let mut recon = Vec::new();
        for &kind in &c.experiment.models {
            let model = ensure_model(&c, &paths, kind, n, seed)?;
            let ps = eval::phase_space_reconstruction(&model, &rollout, model.normalizer())?;
            let _ = writeln!(errors, "{kind},{seed},{}", ps.final_error);
            recon.push((kind.name(), ps));
        }
        let truth = recon.first().map(|(_, p)| p.truth.clone()).unwrap_or_default();
        let preds: Vec<(&str, &[Vec<f64>])> = recon.iter().map(|(k, p)| (*k, p.predicted.as_slice())).collect();
        write_file(&dir.join(format!("phase_s{seed}.svg")), eval::phase_svg(&truth, &preds, &train))?;
        write_file(&dir.join(format!("phase_s{seed}.csv")), eval::phase_csv(&truth, &preds))?;
    }
    write_file(&dir.join("final_errors.csv"), errors)?;
    Ok(dir)
}

/// Agent learning curves on Pendulum and CartPole-Swingup.
fn repro_fig3(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = RunPaths::new(&cfg.experiment.out).repro(ReproTarget::Fig3);
    for env in [EnvKind::Pendulum, EnvKind::CartPoleSwingup] {
        let mut c = cfg.with_env(env);
        c.experiment.out = dir.clone();
        rl(&c, false)?;
    }
    Ok(dir)
}

/// `repro`: runs the selected reproduction target(s).
pub fn repro(cfg: &ExperimentConfig, target: ReproTarget) -> Result<Vec<PathBuf>> {
    match target {
        ReproTarget::Table1 => Ok(vec![repro_table1(cfg)?]),
        ReproTarget::Fig4 => Ok(vec![repro_fig4(cfg)?]),
        ReproTarget::Fig5 => Ok(vec![repro_fig5(cfg)?]),
        ReproTarget::Fig3 => Ok(vec![repro_fig3(cfg)?]),
        ReproTarget::All => Ok(vec![repro_table1(cfg)?, repro_fig4(cfg)?, repro_fig5(cfg)?, repro_fig3(cfg)?]),
    }
}

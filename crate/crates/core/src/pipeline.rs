//! Run-directory persistence and the end-to-end pipeline.
//!
//! ```text
//! runs/<name>/
//!   manifest.json  config.txt  .lock
//!   data/{coo.json, d_ctr.jsonl}
//!   round_<t>/{policy.ckpt, ctr.ckpt, pairs.jsonl, metrics.csv, weights_hist.csv, dpo_curve.csv}
//!   report/{metrics.csv, ctr_per_round.svg, auc_logloss.svg}
//! ```
//!
//! `round_t/ctr.ckpt` is the CTR model that scored the candidates π_t was
//! trained on (the logged-data model for t = 0). A round is complete once its
//! `metrics.csv` exists.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{
    build_round_pairs, evaluate, recalibrate_ctr, run_iteration, IterationState, RoundOutput, RoundStats, Simulation,
};
use crate::config::RunConfig;
use crate::context::ContextBundle;
use crate::ctr::{read_jsonl, train_ctr, write_jsonl, ClickRecord, CtrCheckpoint};
use crate::dpo::{train_dpo, write_curve_csv, CurvePoint, DpoConfig, ReferenceMode};
use crate::error::{GqsError, Result};
use crate::metrics::MetricsReport;
use crate::policy::{sft_train, PolicyCheckpoint};
use crate::prefs::{read_pairs, write_pairs};
use crate::rng;
use crate::sim::{build_coo, click_log, logged_lists, CooDictionary, World};
use crate::suggestion::SuggestionList;

/// Environment variable that forces deterministic mode.
pub const DETERMINISTIC_ENV: &str = "GQS_DETERMINISTIC";

/// Offset between the CTR-log and SFT-data seeds, so the two logged samples
/// never share a session.
const SFT_SEED_OFFSET: u64 = 7919;

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GqsError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| GqsError::io(path, e))
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        create_dir(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(GqsError::Locked(path)),
            Err(e) => Err(GqsError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub rounds: usize,
    pub deterministic: bool,
}

/// Paths inside one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn coo_path(&self) -> PathBuf {
        self.root.join("data").join("coo.json")
    }

    pub fn d_ctr_path(&self) -> PathBuf {
        self.root.join("data").join("d_ctr.jsonl")
    }

    pub fn round_dir(&self, t: usize) -> PathBuf {
        self.root.join(format!("round_{t}"))
    }

    pub fn policy_path(&self, t: usize) -> PathBuf {
        self.round_dir(t).join("policy.ckpt")
    }

    pub fn ctr_path(&self, t: usize) -> PathBuf {
        self.round_dir(t).join("ctr.ckpt")
    }

    pub fn pairs_path(&self, t: usize) -> PathBuf {
        self.round_dir(t).join("pairs.jsonl")
    }

    pub fn metrics_path(&self, t: usize) -> PathBuf {
        self.round_dir(t).join("metrics.csv")
    }

    pub fn weights_path(&self, t: usize) -> PathBuf {
        self.round_dir(t).join("weights_hist.csv")
    }

    pub fn curve_path(&self, t: usize) -> PathBuf {
        self.round_dir(t).join("dpo_curve.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// Number of leading rounds with a metrics file: rounds `0..n` are done.
    pub fn completed_rounds(&self) -> usize {
        (0..).take_while(|&t| self.metrics_path(t).is_file()).count()
    }

    pub fn read_manifest(&self) -> Result<Option<Manifest>> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| GqsError::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Writes the manifest and configuration, or checks them against an
    /// existing run. Only the round count may differ.
    pub fn init(&self, config: &RunConfig) -> Result<Manifest> {
        create_dir(&self.root)?;
        let manifest = Manifest {
            config_hash: config.hash(),
            seed: config.seed,
            task: config.task.to_string(),
            rounds: config.rounds,
            deterministic: deterministic_mode(),
        };
        if let Some(old) = self.read_manifest()? {
            let mut existing = RunConfig::load(&self.config_path())?;
            existing.rounds = config.rounds;
            if existing != *config {
                return Err(GqsError::Config(format!(
                    "{} was created with a different configuration",
                    self.root.display()
                )));
            }
            if old == manifest {
                return Ok(manifest);
            }
        }
        config.save(&self.config_path())?;
        write_text(&self.manifest_path(), &serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// The simulated world and COO dictionary a run is built on. Both are pure
/// functions of the configuration.
#[derive(Clone, Debug)]
pub struct Environment {
    pub world: World,
    pub dict: CooDictionary,
    pub coo_k: usize,
}

impl Environment {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let world = World::generate(config.seed, config.world.clone())?;
        let log = world.query_log(config.data.query_log_sessions, &mut rng::stream(config.seed, "qlog", 0));
        Ok(Self {
            dict: build_coo(&log),
            world,
            coo_k: config.data.coo_k,
        })
    }

    pub fn sim(&self) -> Simulation<'_> {
        Simulation {
            world: &self.world,
            dict: &self.dict,
            coo_k: self.coo_k,
        }
    }
}

/// Clicks of the logging policy on `data.ctr_lists` sessions.
pub fn click_dataset(config: &RunConfig, env: &Environment) -> Result<Vec<ClickRecord>> {
    let n = config.list_len();
    let logged = logged_lists(&env.world, &env.dict, env.coo_k, config.data.ctr_lists, n, config.seed);
    click_log(&env.world, &logged, "logged", config.seed)
}

/// Logged lists for supervised fine-tuning, disjoint from the click log.
pub fn sft_dataset(config: &RunConfig, env: &Environment) -> Vec<(ContextBundle, SuggestionList)> {
    logged_lists(
        &env.world,
        &env.dict,
        env.coo_k,
        config.data.sft_lists,
        config.list_len(),
        config.seed.wrapping_add(SFT_SEED_OFFSET),
    )
}

/// Simulates the logged click dataset and writes it with the COO dictionary.
pub fn simulate(config: &RunConfig, env: &Environment, run: &RunDir) -> Result<Vec<ClickRecord>> {
    let records = click_dataset(config, env)?;
    create_dir(&run.root.join("data"))?;
    env.dict.save_json(&run.coo_path())?;
    write_jsonl(&run.d_ctr_path(), &records)?;
    Ok(records)
}

pub fn load_d_ctr(run: &RunDir) -> Result<Vec<ClickRecord>> {
    read_jsonl(&run.d_ctr_path())
}

/// Supervised fine-tuning on logged lists; writes the round-0 policy.
pub fn sft(config: &RunConfig, env: &Environment, run: &RunDir) -> Result<PolicyCheckpoint> {
    let ckpt = sft_train(
        &sft_dataset(config, env),
        &config.policy_config(),
        &config.sft_config(),
        &config.hash(),
    )?;
    create_dir(&run.round_dir(0))?;
    ckpt.save(&run.policy_path(0))?;
    Ok(ckpt)
}

/// Trains the CTR model on the logged clicks; writes the round-0 CTR model.
pub fn train_ctr_stage(config: &RunConfig, run: &RunDir) -> Result<CtrCheckpoint> {
    let records = load_d_ctr(run)?;
    let ckpt = train_ctr(&records, None, &config.ctr_config(), &config.ctr_train_config(), None)?;
    create_dir(&run.round_dir(0))?;
    ckpt.save(&run.ctr_path(0))?;
    Ok(ckpt)
}

fn write_metrics(path: &Path, rows: &[MetricsReport]) -> Result<()> {
    let mut out = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| GqsError::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(MetricsReport::parse_csv_row)
        .collect()
}

/// Evaluates `round_t` and writes its metrics file, which marks it complete.
pub fn eval_round(config: &RunConfig, env: &Environment, run: &RunDir, t: usize) -> Result<MetricsReport> {
    let policy = PolicyCheckpoint::load(&run.policy_path(t))?;
    let ctr = CtrCheckpoint::load(&run.ctr_path(t))?;
    let baseline = match t {
        0 => None,
        _ => Some(read_metrics(&run.metrics_path(0))?[0].oracle_ctr),
    };
    let row = evaluate(env.sim(), &policy.policy, &ctr, &config.loop_config(), t, baseline)?;
    write_metrics(&run.metrics_path(t), std::slice::from_ref(&row))?;
    Ok(row)
}

/// Loop state after round `t`, rebuilt from disk.
pub fn load_state(run: &RunDir, t: usize) -> Result<IterationState> {
    if run.completed_rounds() <= t {
        return Err(GqsError::InvalidArgument(format!("round {t} is not complete")));
    }
    let d_ctr = load_d_ctr(run)?;
    let mut policies = Vec::with_capacity(t + 1);
    let mut metrics = Vec::with_capacity(t + 1);
    for r in 0..=t {
        policies.push(PolicyCheckpoint::load(&run.policy_path(r))?);
        metrics.extend(read_metrics(&run.metrics_path(r))?);
    }
    let state = IterationState {
        round: t,
        policies,
        ctr: CtrCheckpoint::load(&run.ctr_path(t))?,
        d_ctr_hash: crate::calibration::dataset_hash(&d_ctr)?,
        d_ctr,
        metrics,
    };
    state.check()?;
    Ok(state)
}

/// Recalibrates the CTR model if due and builds the pairs for round `t`
/// from π_{t-1}. Writes `ctr.ckpt`, `pairs.jsonl` and `weights_hist.csv`.
pub fn build_pairs_stage(config: &RunConfig, env: &Environment, run: &RunDir, t: usize) -> Result<RoundStats> {
    if t == 0 {
        return Err(GqsError::InvalidArgument("round 0 has no preference pairs".into()));
    }
    let lc = config.loop_config();
    let state = load_state(run, t - 1)?;
    let (ctr, weights) = if t == 1 || lc.fixed_ctr {
        (state.ctr.clone(), None)
    } else {
        let (c, h) = recalibrate_ctr(&state, &lc)?;
        (c, Some(h))
    };
    let (pairs, stats) = build_round_pairs(env.sim(), &state.current().policy, &ctr, &lc, t - 1)?;
    create_dir(&run.round_dir(t))?;
    ctr.save(&run.ctr_path(t))?;
    write_pairs(&run.pairs_path(t), &pairs)?;
    if let Some(h) = weights {
        h.write_csv(&run.weights_path(t))?;
    }
    Ok(stats)
}

/// Trains π_t on `round_t/pairs.jsonl` starting from π_{t-1}.
pub fn dpo_stage(config: &RunConfig, run: &RunDir, t: usize) -> Result<Vec<CurvePoint>> {
    if t == 0 {
        return Err(GqsError::InvalidArgument("round 0 is the supervised policy".into()));
    }
    let pairs = read_pairs(&run.pairs_path(t))?;
    let previous = PolicyCheckpoint::load(&run.policy_path(t - 1))?;
    let round_zero = match config.dpo.reference {
        ReferenceMode::RoundZero => Some(PolicyCheckpoint::load(&run.policy_path(0))?),
        ReferenceMode::Previous => None,
    };
    let dpo = DpoConfig {
        seed: config.seed,
        ..config.dpo.clone()
    };
    let (next, curve) = train_dpo(&pairs, &previous, round_zero.as_ref().map(|c| &c.policy), &dpo)?;
    next.save(&run.policy_path(t))?;
    write_curve_csv(&run.curve_path(t), &curve)?;
    Ok(curve)
}

fn write_round(dir: &Path, state: &IterationState, out: &RoundOutput) -> Result<()> {
    let t = state.round;
    let path = |name: &str| dir.join(name);
    create_dir(dir)?;
    state.current().save(&path("policy.ckpt"))?;
    state.ctr.save(&path("ctr.ckpt"))?;
    write_pairs(&path("pairs.jsonl"), &out.pairs)?;
    write_curve_csv(&path("dpo_curve.csv"), &out.curve)?;
    if let Some(h) = &out.weights {
        h.write_csv(&path("weights_hist.csv"))?;
    }
    write_metrics(&path("metrics.csv"), &state.metrics[t..])
}

/// Round 0: SFT, CTR training and the baseline evaluation.
fn run_round_zero(config: &RunConfig, env: &Environment, run: &RunDir) -> Result<MetricsReport> {
    let _ = fs::remove_dir_all(run.round_dir(0));
    sft(config, env, run)?;
    train_ctr_stage(config, run)?;
    eval_round(config, env, run, 0)
}

/// Runs rounds until `rounds` are complete, resuming after the last
/// completed one. Each round is staged in a scratch directory and renamed
/// into place, so an interrupted round leaves no partial `round_t`.
pub fn iterate(config: &RunConfig, env: &Environment, run: &RunDir, rounds: usize) -> Result<Vec<RoundStats>> {
    let done = run.completed_rounds();
    if done == 0 {
        return Err(GqsError::InvalidArgument("round 0 is not complete".into()));
    }
    if done > rounds {
        return Ok(Vec::new());
    }
    let lc = config.loop_config();
    let mut state = load_state(run, done - 1)?;
    let mut stats = Vec::new();
    while state.round < rounds {
        let (next, out) = run_iteration(env.sim(), &state, &lc)?;
        let t = next.round;
        let staging = run.root.join(format!(".round_{t}.partial"));
        let _ = fs::remove_dir_all(&staging);
        write_round(&staging, &next, &out)?;
        let target = run.round_dir(t);
        let _ = fs::remove_dir_all(&target);
        fs::rename(&staging, &target).map_err(|e| GqsError::io(&target, e))?;
        stats.push(out.stats);
        state = next;
    }
    Ok(stats)
}

/// Full pipeline: simulate, SFT, CTR training, `config.rounds` iterations and
/// the report. Completed rounds found on disk are kept.
pub fn run_pipeline(config: &RunConfig, run: &RunDir) -> Result<Vec<MetricsReport>> {
    config.validate()?;
    let _lock = RunLock::acquire(run.root())?;
    run.init(config)?;
    let env = Environment::new(config)?;
    if !run.d_ctr_path().is_file() {
        simulate(config, &env, run)?;
    }
    if run.completed_rounds() == 0 {
        run_round_zero(config, &env, run)?;
    }
    iterate(config, &env, run, config.rounds)?;
    let rows = report(run, config.rounds)?;
    Ok(rows)
}

/// Aggregates `round_0..=round_last` into `report/metrics.csv` and draws the
/// CTR-per-round and AUC/logloss plots.
pub fn report(run: &RunDir, last: usize) -> Result<Vec<MetricsReport>> {
    let mut rows = Vec::new();
    for t in 0..=last {
        rows.extend(read_metrics(&run.metrics_path(t))?);
    }
    let dir = run.report_dir();
    create_dir(&dir)?;
    write_metrics(&dir.join("metrics.csv"), &rows)?;
    write_text(&dir.join("ctr_per_round.svg"), &ctr_plot(&rows))?;
    write_text(&dir.join("auc_logloss.svg"), &auc_logloss_plot(&rows))?;
    Ok(rows)
}

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;

fn svg_frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n{body}</svg>\n",
        W / 2.0,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    )
}

/// Maps `v` in `[lo, hi]` onto the plot's vertical extent.
fn y_of(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    H - PAD - (v - lo) / span * (H - 2.0 * PAD)
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

fn ctr_plot(rows: &[MetricsReport]) -> String {
    let (lo, hi) = finite_range(rows.iter().map(|r| r.oracle_ctr));
    let (lo, hi) = ((lo - 0.05).max(0.0), (hi + 0.05).min(1.0));
    let step = (W - 2.0 * PAD) / (rows.len().max(2) - 1) as f64;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (PAD + i as f64 * step, y_of(r.oracle_ctr, lo, hi)))
        .collect();
    let mut body = String::new();
    let line: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    body.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
        line.join(" ")
    ));
    for ((x, y), r) in pts.iter().zip(rows) {
        body.push_str(&format!(
            "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"steelblue\"/>\n"
        ));
        body.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>\n",
            y - 8.0,
            r.oracle_ctr
        ));
        body.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">round {}</text>\n",
            H - PAD + 16.0,
            r.round
        ));
    }
    for v in [lo, hi] {
        body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
            PAD - 4.0,
            y_of(v, lo, hi) + 4.0
        ));
    }
    svg_frame("Oracle CTR of greedy lists per round", &body)
}

fn auc_logloss_plot(rows: &[MetricsReport]) -> String {
    let (_, hi) = finite_range(rows.iter().flat_map(|r| [r.auc, r.logloss]));
    let hi = hi.max(1.0);
    let group = (W - 2.0 * PAD) / rows.len().max(1) as f64;
    let bar = group / 3.0;
    let mut body = String::new();
    for (i, r) in rows.iter().enumerate() {
        let x0 = PAD + i as f64 * group + bar / 2.0;
        for (k, (v, color)) in [(r.auc, "steelblue"), (r.logloss, "darkorange")]
            .into_iter()
            .enumerate()
        {
            let v = if v.is_finite() { v } else { 0.0 };
            let y = y_of(v, 0.0, hi);
            body.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{bar:.1}\" height=\"{:.1}\" fill=\"{color}\"/>\n",
                x0 + k as f64 * bar,
                H - PAD - y
            ));
        }
        body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">round {}</text>\n",
            x0 + bar,
            H - PAD + 16.0,
            r.round
        ));
    }
    body.push_str(&format!(
        "<rect x=\"{:.1}\" y=\"30\" width=\"10\" height=\"10\" fill=\"steelblue\"/><text x=\"{:.1}\" y=\"39\">AUC</text>\n\
         <rect x=\"{:.1}\" y=\"30\" width=\"10\" height=\"10\" fill=\"darkorange\"/><text x=\"{:.1}\" y=\"39\">logloss</text>\n",
        W - 150.0,
        W - 136.0,
        W - 90.0,
        W - 76.0
    ));
    svg_frame("CTR model AUC and logloss per round", &body)
}

/// Final metrics of one sweep value.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub last: MetricsReport,
}

/// Runs the pipeline once per value of `parameter` under
/// `root/<index>_<value>/` and writes `root/sweep.csv`. With `parallel`
/// set (and deterministic mode off) the runs share the machine's threads;
/// results are identical either way because every run owns its seed streams.
pub fn sweep(
    config: &RunConfig,
    root: &Path,
    parameter: &str,
    values: &[String],
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(GqsError::Config("sweep needs at least one value".into()));
    }
    if parameter == "task" || !RunConfig::keys().contains(&parameter) {
        return Err(GqsError::Config(format!("cannot sweep {parameter:?}")));
    }
    let mut jobs = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        let mut c = config.clone();
        c.set(parameter, v)?;
        c.validate()?;
        let dir = root.join(format!("{i}_{}", v.replace(['/', '\\'], "_")));
        jobs.push((v.clone(), c, RunDir::new(dir)));
    }
    let _lock = RunLock::acquire(root)?;
    let finish = |(v, c, run): &(String, RunConfig, RunDir)| -> Result<SweepRow> {
        let rows = run_pipeline(c, run)?;
        Ok(SweepRow {
            value: v.clone(),
            last: rows.last().cloned().expect("round 0 row"),
        })
    };
    let results: Vec<Result<SweepRow>> = if parallel && !deterministic_mode() {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.iter().map(|j| s.spawn(move || finish(j))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    } else {
        jobs.iter().map(finish).collect()
    };
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = format!("{parameter},{}\n", MetricsReport::CSV_HEADER);
    for r in &rows {
        out.push_str(&format!("{},{}\n", r.value, r.last.csv_row()));
    }
    write_text(&root.join("sweep.csv"), &out)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(GqsError::Locked(_))));
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn init_rejects_a_changed_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let mut c = RunConfig::default();
        let m = run.init(&c).unwrap();
        assert_eq!(m.config_hash, c.hash());
        c.rounds = 5;
        run.init(&c).unwrap();
        c.dpo.lambda = 0.5;
        assert!(matches!(run.init(&c), Err(GqsError::Config(_))));
    }

    #[test]
    fn completed_rounds_counts_leading_metrics_files() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        assert_eq!(run.completed_rounds(), 0);
        for t in [0, 1, 3] {
            create_dir(&run.round_dir(t)).unwrap();
            write_text(&run.metrics_path(t), "x").unwrap();
        }
        assert_eq!(run.completed_rounds(), 2);
    }

    #[test]
    fn sweep_rejects_bad_requests() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::default();
        assert!(matches!(
            sweep(&c, dir.path(), "dpo.lambda", &[], false),
            Err(GqsError::Config(_))
        ));
        assert!(matches!(
            sweep(&c, dir.path(), "dpo.nothing", &["1".into()], false),
            Err(GqsError::Config(_))
        ));
    }

    #[test]
    fn plots_are_well_formed() {
        let row = |round, ctr| MetricsReport {
            round,
            oracle_ctr: ctr,
            ctr_uplift_pct: 0.0,
            relevance: 50.0,
            diversity: 50.0,
            auc: f64::NAN,
            logloss: 0.6,
        };
        for svg in [ctr_plot(&[row(0, 0.3)]), auc_logloss_plot(&[row(0, 0.3), row(1, 0.5)])] {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert!(!svg.contains("NaN") && !svg.contains("inf"));
        }
    }
}

//! The five verbs. Every command reads a validated config, writes into its
//! own directory under the run root and records what it wrote in a
//! `manifest.json` of content digests.

use crate::config::{ConfigError, ExperimentConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;
use visplan_core::corpus::{build_corpus, load_corpus, save_corpus, Corpus, CorpusError, MANIFEST_FILE};
use visplan_core::evalx::{eval_suite, rollout_strip, EvalSummary, Greedy, Oracle, Planner, UniformLegal};
use visplan_core::gridworld::text::{decode_layout, decode_state};
use visplan_core::gridworld::{compute_progress_map, sample_optimal_trajectory, EnvState};
use visplan_core::policy::checkpoint::{load_optimizer, load_params, save_optimizer, save_params};
use visplan_core::policy::optim::AdamW;
use visplan_core::policy::{Params, PolicyError};
use visplan_core::raster::{render, write_image, Raster, RasterError};
use visplan_core::train::{
    flatten_pairs, gaussian_smooth, pool_progress_maps, train_stage2, train_supervised, EpochEnd, TrainError,
    TrainReport, REPORT_SIGMA,
};

pub const OUT_ENV: &str = "VISPLAN_OUT";
pub const RUN_MANIFEST: &str = "manifest.json";
/// The corpus directory already holds the corpus's own `manifest.json`.
pub const GEN_MANIFEST: &str = "run.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric { .. } => CliError::Numeric(e.to_string()),
            TrainError::Policy(p) => p.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Digests of everything a command produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub corpus_digest: Option<String>,
    pub judge_digest: String,
    /// path relative to the manifest's directory -> sha256
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }

    /// Check that every listed file exists with the recorded digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, want) in &self.files {
            let got = sha256_file(&dir.join(name)).map_err(|_| CliError::Data(format!("{name} is missing")))?;
            if &got != want {
                return Err(CliError::Data(format!("{name} does not match its recorded digest")));
            }
        }
        Ok(())
    }
}

pub fn load_run_manifest(dir: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(dir.join(RUN_MANIFEST))
        .map_err(|_| CliError::Data(format!("no {RUN_MANIFEST} in {}", dir.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("bad {RUN_MANIFEST}: {e}")))
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Finish a command directory: digest `files`, write the manifest, and keep
/// wall-clock times in a separate file so manifests stay reproducible.
fn seal(
    ws: &Workspace,
    dir: &Path,
    manifest_name: &str,
    command: &str,
    corpus: Option<String>,
    files: &[String],
    started: u64,
) -> Result<RunManifest> {
    let mut digests = BTreeMap::new();
    for f in files {
        digests.insert(f.clone(), sha256_file(&dir.join(f))?);
    }
    let m = RunManifest {
        command: command.into(),
        config_digest: ws.cfg.digest(),
        corpus_digest: corpus,
        judge_digest: ws.cfg.judge().digest(),
        files: digests,
    };
    fs::write(dir.join(manifest_name), serde_json::to_string_pretty(&m).expect("serializes") + "\n")?;
    let timing = serde_json::json!({ "started": started, "finished": now_secs() });
    fs::write(dir.join("timing.json"), timing.to_string() + "\n")?;
    Ok(m)
}

/// A config bound to an output root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub cfg: ExperimentConfig,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, cfg: ExperimentConfig) -> Result<Workspace> {
        cfg.validate()?;
        Ok(Workspace { root: root.into(), cfg })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join(&self.cfg.name)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.run_dir().join("corpus")
    }

    pub fn train_dir(&self, regime: Regime) -> PathBuf {
        self.run_dir().join("train").join(regime.tag())
    }

    pub fn eval_dir(&self, label: &str) -> PathBuf {
        self.run_dir().join("eval").join(label)
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let dir = self.corpus_dir();
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(CliError::Data(format!("no corpus at {}; run `gen` first", dir.display())));
        }
        let m = visplan_core::corpus::load_manifest(&dir)?;
        let spec = &self.cfg.corpus;
        let mut sizes = spec.sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        if m.seed != spec.seed || m.task != spec.task || m.sizes != sizes || m.counts.contains_key("ood") != spec.ood {
            return Err(CliError::Data(format!(
                "the corpus at {} was generated from different settings; rerun `gen --force`",
                dir.display()
            )));
        }
        Ok(load_corpus(&dir)?)
    }

    fn corpus_digest(&self) -> Result<String> {
        Ok(visplan_core::corpus::load_manifest(&self.corpus_dir())?.digest())
    }

    /// Create a fresh output directory, refusing to touch an existing one
    /// unless `force` is set.
    fn fresh_dir(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() {
            if !force {
                return Err(CliError::Data(format!("{} already exists; pass --force to replace it", dir.display())));
            }
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        Ok(())
    }

    fn write_config(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("config.toml"), self.cfg.to_toml())?;
        Ok(())
    }
}

// ---- gen ---------------------------------------------------------------------

pub fn cmd_gen(ws: &Workspace, force: bool) -> Result<RunManifest> {
    let started = now_secs();
    let dir = ws.corpus_dir();
    ws.fresh_dir(&dir, force)?;
    let corpus = build_corpus(&ws.cfg.corpus)?;
    let cm = save_corpus(&corpus, &dir)?;
    ws.write_config(&dir)?;
    let mut files: Vec<String> = cm.digests.keys().cloned().collect();
    files.push(MANIFEST_FILE.into());
    files.push("config.toml".into());
    seal(ws, &dir, GEN_MANIFEST, "gen", Some(cm.digest()), &files, started)
}

// ---- train ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Vpft,
    Vprl,
    VpftStar,
}

impl Regime {
    pub fn tag(self) -> &'static str {
        match self {
            Regime::Vpft => "vpft",
            Regime::Vprl => "vprl",
            Regime::VpftStar => "vpft-star",
        }
    }

    pub fn from_tag(s: &str) -> Option<Regime> {
        match s {
            "vpft" => Some(Regime::Vpft),
            "vprl" => Some(Regime::Vprl),
            "vpft-star" => Some(Regime::VpftStar),
            _ => None,
        }
    }

    fn stages(self) -> &'static [&'static str] {
        match self {
            Regime::Vpft => &["vpft"],
            Regime::Vprl => &["stage1", "stage2"],
            Regime::VpftStar => &["stage1", "vpft-star"],
        }
    }
}

/// Where an interrupted run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Progress {
    stage: usize,
    /// Completed epochs of that stage.
    epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainOutcome {
    Finished(RunManifest),
    /// Stopped on request after the given number of epochs in this call.
    Halted { epochs: usize },
}

fn ck_name(stage: &str, epoch: usize) -> String {
    format!("{stage}-e{epoch:02}.ck")
}

fn opt_name(stage: &str, epoch: usize) -> String {
    format!("{stage}-e{epoch:02}.opt")
}

pub struct TrainOptions {
    pub resume: bool,
    pub force: bool,
    /// Stop after this many epochs of this invocation (a later `--resume`
    /// continues where it left off).
    pub halt_after: Option<usize>,
}

pub fn cmd_train(ws: &Workspace, regime: Regime, opts: &TrainOptions) -> Result<TrainOutcome> {
    let started = now_secs();
    let corpus = ws.load_corpus()?;
    let corpus_digest = ws.corpus_digest()?;
    let dir = ws.train_dir(regime);
    let state_path = dir.join("progress.json");
    let resume_from: Option<Progress> = if opts.resume && state_path.exists() {
        let p = serde_json::from_str(&fs::read_to_string(&state_path)?)
            .map_err(|e| CliError::Data(format!("bad progress file: {e}")))?;
        let written = fs::read_to_string(dir.join("config.toml")).unwrap_or_default();
        if written != ws.cfg.to_toml() {
            return Err(CliError::Data("cannot resume: the config differs from the interrupted run".into()));
        }
        Some(p)
    } else {
        ws.fresh_dir(&dir, opts.force)?;
        ws.write_config(&dir)?;
        None
    };

    let rc = ws.cfg.regime();
    let stages = regime.stages();
    let epochs_of = |s: &str| match s {
        "stage1" => rc.stage1.epochs,
        "stage2" => rc.grpo.epochs,
        _ => rc.supervised.epochs,
    };

    let (mut params, mut report, start) = match resume_from {
        Some(p) => {
            let stage = stages[p.stage];
            let params = load_params(&dir.join(ck_name(stage, p.epoch)))?;
            let report: TrainReport = serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)
                .map_err(|e| CliError::Data(format!("bad report: {e}")))?;
            (params, report, p)
        }
        None => (Params::init(rc.model), TrainReport::default(), Progress { stage: 0, epoch: 0 }),
    };

    let mut done_this_call = 0usize;
    let stage1_flat = flatten_pairs(&corpus.stage1);
    let pmaps = if stages.contains(&"stage2") { pool_progress_maps(&corpus) } else { Vec::new() };
    for (si, &stage) in stages.iter().enumerate().skip(start.stage) {
        let first_epoch = if si == start.stage { start.epoch } else { 0 };
        let optim_cfg = if stage == "stage2" { rc.rl_optim } else { rc.optim };
        let mut opt = if first_epoch > 0 {
            load_optimizer(&dir.join(opt_name(stage, first_epoch)), &params)?
        } else {
            AdamW::new(optim_cfg, &params)
        };
        let halt = opts.halt_after;
        let mut hook = |e: EpochEnd| -> std::result::Result<(), TrainError> {
            let io = |err: std::io::Error| TrainError::Hook(err.to_string());
            save_params(e.params, &dir.join(ck_name(e.stage, e.epoch)))?;
            save_optimizer(e.opt, &dir.join(opt_name(e.stage, e.epoch)))?;
            fs::write(dir.join("report.json"), serde_json::to_string(e.report).expect("serializes")).map_err(io)?;
            let progress = Progress { stage: si, epoch: e.epoch };
            fs::write(&state_path, serde_json::to_string(&progress).expect("serializes")).map_err(io)?;
            done_this_call += 1;
            if halt.is_some_and(|h| done_this_call >= h) {
                return Err(TrainError::Hook(HALT.into()));
            }
            Ok(())
        };
        let result = match stage {
            "stage2" => {
                let reference = load_params(&dir.join(ck_name("stage1", rc.stage1.epochs)))?;
                train_stage2(
                    &mut params, &mut opt, &reference, &corpus, &pmaps, &rc.grpo, &rc.judge, first_epoch,
                    &mut report, &mut hook,
                )
            }
            "stage1" => train_supervised(
                stage, &mut params, &mut opt, &stage1_flat, &rc.stage1, first_epoch, &mut report, &mut hook,
            ),
            _ => train_supervised(
                stage, &mut params, &mut opt, &corpus.vpft, &rc.supervised, first_epoch, &mut report, &mut hook,
            ),
        };
        match result {
            Err(TrainError::Hook(m)) if m == HALT => return Ok(TrainOutcome::Halted { epochs: done_this_call }),
            other => other?,
        }
        if epochs_of(stage) == 0 {
            // nothing ran, so no hook wrote the stage checkpoint
            save_params(&params, &dir.join(ck_name(stage, 0)))?;
        }
    }

    save_params(&params, &dir.join("final.ck"))?;
    fs::write(dir.join("report.json"), serde_json::to_string(&report).expect("serializes"))?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("groups.csv"), report.groups_csv())?;
    let mut files = vec![
        "config.toml".to_string(),
        "final.ck".into(),
        "report.json".into(),
        "report.csv".into(),
        "groups.csv".into(),
    ];
    for &stage in stages {
        for e in 1..=epochs_of(stage) {
            files.push(ck_name(stage, e));
        }
    }
    let m = seal(ws, &dir, RUN_MANIFEST, &format!("train:{}", regime.tag()), Some(corpus_digest), &files, started)?;
    Ok(TrainOutcome::Finished(m))
}

const HALT: &str = "halt requested";

// ---- eval ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum EvalSource {
    Regime(Regime),
    Checkpoint(PathBuf),
    Oracle,
    Uniform { seed: u64 },
}

impl EvalSource {
    pub fn default_label(&self) -> String {
        match self {
            EvalSource::Regime(r) => r.tag().into(),
            EvalSource::Checkpoint(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("checkpoint".into()),
            EvalSource::Oracle => "oracle".into(),
            EvalSource::Uniform { .. } => "uniform".into(),
        }
    }
}

/// Evaluate and write `summary.json`, `summary.tsv` and optional strips.
/// Returns the summary and any warnings about mismatched settings.
pub fn cmd_eval(ws: &Workspace, source: &EvalSource, label: &str, force: bool) -> Result<(EvalSummary, Vec<String>)> {
    let started = now_secs();
    let corpus = ws.load_corpus()?;
    let judge = ws.cfg.judge();
    let mut warnings = Vec::new();
    let params = match source {
        EvalSource::Regime(r) => {
            let tdir = ws.train_dir(*r);
            let m = load_run_manifest(&tdir)
                .map_err(|_| CliError::Data(format!("no finished {} run; train it first", r.tag())))?;
            // evaluation settings may differ freely from the training run
            let trained = ExperimentConfig::load(&tdir.join("config.toml")).map(|mut c| {
                c.eval = ws.cfg.eval;
                c.digest()
            });
            if trained.ok().as_deref() != Some(ws.cfg.digest().as_str()) {
                warnings.push(format!("checkpoint was trained under a different config ({})", m.config_digest));
            }
            if m.judge_digest != judge.digest() {
                warnings.push("checkpoint was trained with different parse/reward settings".into());
            }
            Some(load_params(&tdir.join("final.ck"))?)
        }
        EvalSource::Checkpoint(p) => Some(load_params(p)?),
        _ => None,
    };
    let greedy;
    let uniform;
    let planner: &dyn Planner = match (source, &params) {
        (EvalSource::Oracle, _) => &Oracle,
        (EvalSource::Uniform { seed }, _) => {
            uniform = UniformLegal { seed: *seed };
            &uniform
        }
        (_, Some(p)) => {
            greedy = Greedy(p);
            &greedy
        }
        _ => unreachable!("checkpoint sources load params"),
    };
    let ood = if ws.cfg.eval.ood { corpus.ood.as_ref() } else { None };
    let summary = eval_suite(planner, &corpus.pool, ood, &judge)?;

    let dir = ws.eval_dir(label);
    ws.fresh_dir(&dir, force)?;
    ws.write_config(&dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("serializes") + "\n")?;
    fs::write(dir.join("summary.tsv"), summary.to_table())?;
    let mut files = vec!["config.toml".to_string(), "summary.json".into(), "summary.tsv".into()];
    if ws.cfg.eval.dump_images > 0 {
        fs::create_dir_all(dir.join("strips"))?;
        let starts: BTreeMap<&str, &EnvState> = corpus
            .pool
            .envs
            .iter()
            .chain(corpus.ood.iter().flat_map(|p| p.envs.iter()))
            .map(|e| (e.id.as_str(), &e.start))
            .collect();
        for r in summary.records.iter().take(ws.cfg.eval.dump_images) {
            let strip = rollout_strip(starts[r.env_id.as_str()], r, &judge)?;
            let name = format!("strips/{}.pgm", r.env_id);
            write_image(&strip, dir.join(&name))?;
            files.push(name);
        }
    }
    seal(ws, &dir, RUN_MANIFEST, &format!("eval:{label}"), Some(ws.corpus_digest()?), &files, started)?;
    Ok((summary, warnings))
}

// ---- render ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum RenderTarget {
    /// An environment of the corpus; its optimal trajectory is drawn.
    Env(String),
    /// A text file: a layout line followed by one state per line.
    Trajectory(PathBuf),
}

pub fn read_trajectory(path: &Path) -> Result<Vec<EnvState>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| CliError::Data(format!("{} is empty", path.display())))?;
    let layout = std::sync::Arc::new(decode_layout(first).map_err(|e| CliError::Data(e.to_string()))?);
    let states: Vec<EnvState> = lines
        .map(|l| decode_state(&layout, l.trim()).map_err(|e| CliError::Data(e.to_string())))
        .collect::<Result<_>>()?;
    if states.is_empty() {
        return Err(CliError::Data(format!("{} holds no states", path.display())));
    }
    Ok(states)
}

/// Write one image per state plus a horizontal strip; returns the paths.
pub fn cmd_render(ws: &Workspace, target: &RenderTarget, force: bool) -> Result<Vec<PathBuf>> {
    let (label, states) = match target {
        RenderTarget::Env(id) => {
            let corpus = ws.load_corpus()?;
            let env = corpus
                .pool
                .find(id)
                .or_else(|| corpus.ood.as_ref().and_then(|p| p.find(id)))
                .ok_or_else(|| CliError::Data(format!("no environment with id {id}")))?;
            let pmap = compute_progress_map(env.layout());
            (id.clone(), sample_optimal_trajectory(&env.start, &pmap, 0).states)
        }
        RenderTarget::Trajectory(path) => {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("trajectory".into());
            (stem, read_trajectory(path)?)
        }
    };
    let atlas = ws.cfg.judge().atlas;
    let dir = ws.run_dir().join("render").join(&label);
    ws.fresh_dir(&dir, force)?;
    let frames: Vec<Raster> = states.iter().map(|s| render(s, &atlas)).collect();
    let mut out = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let p = dir.join(format!("state-{i:02}.pgm"));
        write_image(f, &p)?;
        out.push(p);
    }
    let p = dir.join("strip.pgm");
    write_image(&Raster::hstack(&frames)?, &p)?;
    out.push(p);
    Ok(out)
}

// ---- report ----------------------------------------------------------------------

/// Published large-model reference values, shown beside desk-scale results.
const REFERENCE_NOTE: &str = "Reference values from the published large-model runs (3 tasks: FrozenLake / Maze / MiniBehavior); \
not reproduced at desk scale:\n\n\
| metric | VPFT | VPRL |\n|---|---|---|\n\
| invalid-failure ratio (%) | 60.6 / 73.7 / 78.3 | 36.9 / 25.1 / 29.6 |\n\
| EM after warm-up only (%) | - | 11.1 (FrozenLake) |\n";

/// Collect training curves and evaluation summaries into `report/`.
pub fn cmd_report(ws: &Workspace) -> Result<PathBuf> {
    let run = ws.run_dir();
    let dir = run.join("report");
    ws.fresh_dir(&dir, true)?;
    let mut md = format!("# Run `{}`\n\nconfig digest `{}`\n\n", ws.cfg.name, ws.cfg.digest());
    md.push_str("## Training\n\n| regime | stage | steps | final loss | mean reward (last 10%) |\n|---|---|---|---|---|\n");
    for regime in [Regime::Vpft, Regime::Vprl, Regime::VpftStar] {
        let path = ws.train_dir(regime).join("report.json");
        let Ok(text) = fs::read_to_string(&path) else { continue };
        let report: TrainReport =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for &stage in regime.stages() {
            let rows: Vec<_> = report.rows.iter().filter(|r| r.stage == stage).collect();
            if rows.is_empty() {
                continue;
            }
            let tail = &rows[rows.len() - (rows.len() / 10).max(1)..];
            let rewards: Vec<f64> = tail.iter().filter_map(|r| r.mean_reward).collect();
            let mean_reward = if rewards.is_empty() {
                "-".to_string()
            } else {
                format!("{:.3}", rewards.iter().sum::<f64>() / rewards.len() as f64)
            };
            md.push_str(&format!(
                "| {} | {} | {} | {:.4} | {} |\n",
                regime.tag(),
                stage,
                rows.len(),
                rows.last().map(|r| r.loss).unwrap_or(f64::NAN),
                mean_reward
            ));
        }
        fs::write(dir.join(format!("curves-{}.csv", regime.tag())), smoothed_csv(&report))?;
    }
    md.push_str("\n## Evaluation\n\n| label | split | size | n | EM % | PR % | invalid-failure ratio |\n|---|---|---|---|---|---|---|\n");
    if let Ok(entries) = fs::read_dir(run.join("eval")) {
        let mut labels: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        labels.sort();
        for path in labels {
            let Ok(text) = fs::read_to_string(path.join("summary.json")) else { continue };
            let s: EvalSummary =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let label = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            for r in &s.rows {
                md.push_str(&format!(
                    "| {label} | {} | {} | {} | {:.1} | {:.1} | {} |\n",
                    r.split,
                    r.size.map(|v| v.to_string()).unwrap_or("-".into()),
                    r.count,
                    r.em_pct,
                    r.pr_pct,
                    r.invalid_failure_ratio.map(|v| format!("{:.3}", v)).unwrap_or("-".into())
                ));
            }
        }
    }
    md.push('\n');
    md.push_str(REFERENCE_NOTE);
    let out = dir.join("report.md");
    fs::write(&out, md)?;
    Ok(out)
}

/// Gaussian-smoothed per-stage curves (σ = [`REPORT_SIGMA`] steps).
fn smoothed_csv(report: &TrainReport) -> String {
    let mut out = String::from("stage,step,loss,mean_reward,invalid_ratio,entropy\n");
    let mut stages: Vec<&str> = report.rows.iter().map(|r| r.stage.as_str()).collect();
    stages.dedup();
    for stage in stages {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.stage == stage).collect();
        let loss = gaussian_smooth(&rows.iter().map(|r| Some(r.loss)).collect::<Vec<_>>(), REPORT_SIGMA);
        let reward = gaussian_smooth(&report.column(stage, |r| r.mean_reward), REPORT_SIGMA);
        let invalid = gaussian_smooth(&report.column(stage, |r| r.invalid_ratio), REPORT_SIGMA);
        let entropy = gaussian_smooth(&report.column(stage, |r| r.entropy), REPORT_SIGMA);
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (i, r) in rows.iter().enumerate() {
            out.push_str(&format!(
                "{stage},{},{},{},{},{}\n",
                r.step,
                f(loss[i]),
                f(reward[i]),
                f(invalid[i]),
                f(entropy[i])
            ));
        }
    }
    out
}

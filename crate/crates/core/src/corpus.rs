//! Dataset construction: environment pools with layout-disjoint splits,
//! optimal-trajectory pairs, random-walk pairs, GRPO prefixes and
//! out-of-distribution pools, plus a digest-checked on-disk format.
//!
//! A corpus directory holds `manifest.json` and one text payload per part:
//!
//! ```text
//! environments.txt  <id> <train|test> <state> <layout record>
//! ood.txt           same shape as environments.txt (optional)
//! vpft.txt          <env-id> <s0> <s1> ... -> <candidate> ...
//! stage1.txt        same shape as vpft.txt
//! stage2.txt        <env-id> <s0> <s1> ...
//! ```
//!
//! States and layouts use the canonical text format of
//! [`crate::gridworld::text`].

use crate::gridworld::text::{decode_layout, decode_state, encode_layout, encode_state};
use crate::gridworld::{
    apply_action, compute_progress_map, enumerate_optimal_actions, gen_layout, legal_actions, random_walk,
    sample_optimal_trajectory, spawn_state, EnvState, GenError, Layout, TaskKind,
};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

pub const CORPUS_VERSION: u32 = 1;

/// Unsuccessful draws in a row after which a pool request counts as exhausted.
pub const EXHAUSTION_LIMIT: usize = 20_000;

pub const OOD_COUNT: usize = 250;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Grid side used for out-of-distribution evaluation.
pub fn ood_size(task: TaskKind) -> usize {
    match task {
        TaskKind::FrozenLake | TaskKind::Maze => 7,
        TaskKind::MiniBehavior => 9,
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("only {found} unique {task} environments of size {size} found, {requested} requested; lower the count")]
    Exhausted {
        task: TaskKind,
        size: usize,
        requested: usize,
        found: usize,
    },
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error("invalid corpus request: {0}")]
    Request(String),
    #[error("missing manifest in {0}")]
    MissingManifest(String),
    #[error("corpus version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("digest mismatch for {file}")]
    Digest { file: String },
    #[error("malformed payload {file}:{line}: {msg}")]
    Format { file: String, line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One evaluation or training episode: a layout with a fixed start state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Environment {
    /// Content digest of (layout, start); unique within a pool.
    pub id: String,
    pub split: Split,
    pub start: EnvState,
}

impl Environment {
    pub fn size(&self) -> usize {
        self.start.size()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.start.layout
    }

    fn new(start: EnvState, split: Split) -> Environment {
        let mut h = Sha256::new();
        h.update(encode_layout(&start.layout));
        h.update(b"|");
        h.update(encode_state(&start));
        let id = hex::encode(&h.finalize()[..8]);
        Environment { id, split, start }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pool {
    pub task: TaskKind,
    pub envs: Vec<Environment>,
}

/// Layout ids per side of a split, with per-size counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// size -> (train, test) environment counts
    pub per_size: BTreeMap<usize, (usize, usize)>,
}

impl Pool {
    pub fn train(&self) -> impl Iterator<Item = &Environment> {
        self.envs.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Environment> {
        self.envs.iter().filter(|e| e.split == Split::Test)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.envs.iter().map(|e| e.size()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn find(&self, id: &str) -> Option<&Environment> {
        self.envs.iter().find(|e| e.id == id)
    }

    /// Layout digests on each side of the split.
    pub fn split(&self) -> DatasetSplit {
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        let mut per_size: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for e in &self.envs {
            let slot = per_size.entry(e.size()).or_default();
            let digest = e.layout().digest();
            match e.split {
                Split::Train => {
                    slot.0 += 1;
                    train.insert(digest, ());
                }
                Split::Test => {
                    slot.1 += 1;
                    test.insert(digest, ());
                }
            }
        }
        DatasetSplit {
            train: train.into_keys().collect(),
            test: test.into_keys().collect(),
            per_size,
        }
    }
}

/// Build `n_per_size` unique environments for every size, assigning whole
/// layouts to the test side until it holds `test_fraction` of the environments.
///
/// FrozenLake and Maze layouts are unique; MiniBehavior allows a layout to
/// repeat with a different start cell.
pub fn build_environment_pool(
    task: TaskKind,
    sizes: &[usize],
    n_per_size: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Pool, CorpusError> {
    if n_per_size == 0 {
        return Err(CorpusError::Request("environment count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(CorpusError::Request("test fraction must lie in [0, 1]".into()));
    }
    let mut envs = Vec::new();
    for &size in sizes {
        let starts = unique_starts(task, size, n_per_size, seed)?;
        let n_test = (n_per_size as f64 * test_fraction).round() as usize;
        envs.extend(split_by_layout(starts, n_test, rng::derive(seed, &[task as u64, size as u64, 1])));
    }
    Ok(Pool { task, envs })
}

fn unique_starts(task: TaskKind, size: usize, n: usize, seed: u64) -> Result<Vec<EnvState>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut misses = 0;
    let mut draw = 0u64;
    while out.len() < n {
        let s = rng::derive(seed, &[task as u64, size as u64, 0, draw]);
        draw += 1;
        let layout = Arc::new(gen_layout(task, size, s)?);
        let start = spawn_state(&layout, rng::mix(s));
        let key = match task {
            TaskKind::MiniBehavior => format!("{}|{}", encode_layout(&layout), encode_state(&start)),
            _ => encode_layout(&layout),
        };
        if seen.insert(key) {
            out.push(start);
            misses = 0;
        } else {
            misses += 1;
            if misses >= EXHAUSTION_LIMIT {
                return Err(CorpusError::Exhausted {
                    task,
                    size,
                    requested: n,
                    found: out.len(),
                });
            }
        }
    }
    Ok(out)
}

fn split_by_layout(starts: Vec<EnvState>, n_test: usize, seed: u64) -> Vec<Environment> {
    let mut by_layout: BTreeMap<String, Vec<EnvState>> = BTreeMap::new();
    for s in starts {
        by_layout.entry(s.layout.digest()).or_default().push(s);
    }
    let mut groups: Vec<Vec<EnvState>> = by_layout.into_values().collect();
    groups.shuffle(&mut rng::rng(seed));
    let mut envs = Vec::new();
    let mut in_test = 0;
    for group in groups {
        let split = if in_test < n_test { Split::Test } else { Split::Train };
        if split == Split::Test {
            in_test += group.len();
        }
        envs.extend(group.into_iter().map(|s| Environment::new(s, split)));
    }
    envs.sort_by(|a, b| a.id.cmp(&b.id));
    envs
}

/// `OOD_COUNT` test environments at the task's out-of-distribution size.
pub fn build_ood_pool(task: TaskKind, seed: u64) -> Result<Pool, CorpusError> {
    let starts = unique_starts(task, ood_size(task), OOD_COUNT, rng::derive(seed, &[0x00d]))?;
    let mut envs: Vec<Environment> = starts.into_iter().map(|s| Environment::new(s, Split::Test)).collect();
    envs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Pool { task, envs })
}

/// A context of visited states and the next states accepted as targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixPair {
    /// Index of the environment in its pool.
    pub env: usize,
    pub prefix: Vec<EnvState>,
    pub candidates: Vec<EnvState>,
}

impl PrefixPair {
    pub fn last(&self) -> &EnvState {
        self.prefix.last().expect("prefix is non-empty")
    }
}

/// A GRPO input: the visited states of an optimal trajectory so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prefix {
    pub env: usize,
    pub states: Vec<EnvState>,
}

fn successors(state: &EnvState, actions: impl IntoIterator<Item = crate::gridworld::Action>) -> Vec<EnvState> {
    let mut out: Vec<EnvState> = Vec::new();
    for a in actions {
        if let Ok(next) = apply_action(state, a) {
            if !out.contains(&next) {
                out.push(next);
            }
        }
    }
    out
}

/// One sampled optimal trajectory per training environment, expanded into
/// one pair per step. Each pair accepts every optimal successor of its last
/// state, with the trajectory's own successor listed first.
pub fn build_vpft_dataset(pool: &Pool, seed: u64) -> Vec<PrefixPair> {
    let mut pairs = Vec::new();
    for (i, env) in pool.envs.iter().enumerate() {
        if env.split != Split::Train {
            continue;
        }
        let pmap = compute_progress_map(env.layout());
        let traj = sample_optimal_trajectory(&env.start, &pmap, rng::derive(seed, &[i as u64]));
        for k in 0..traj.len() {
            let state = &traj.states[k];
            let mut candidates = vec![traj.states[k + 1].clone()];
            for s in successors(state, enumerate_optimal_actions(state, &pmap)) {
                if !candidates.contains(&s) {
                    candidates.push(s);
                }
            }
            pairs.push(PrefixPair {
                env: i,
                prefix: traj.states[..=k].to_vec(),
                candidates,
            });
        }
    }
    pairs
}

/// Prefix pairs harvested from random walks over training environments.
///
/// Walks start at each environment's start state and run for at most
/// `min(D(start), depth_cap)` steps, so prefixes have the lengths seen at
/// evaluation time. Every distinct visited prefix is paired with all legal
/// successors of its last state. Harvesting stops once `budget`
/// (prefix, candidate) pairs are collected or new prefixes stop appearing.
pub fn build_stage1_dataset(pool: &Pool, depth_cap: usize, budget: usize, seed: u64) -> Vec<PrefixPair> {
    let train: Vec<usize> = (0..pool.envs.len()).filter(|&i| pool.envs[i].split == Split::Train).collect();
    if train.is_empty() || budget == 0 || depth_cap == 0 {
        return Vec::new();
    }
    let horizons: Vec<usize> = train
        .iter()
        .map(|&i| {
            let env = &pool.envs[i];
            let d = compute_progress_map(env.layout()).distance(&env.start).unwrap_or(0) as usize;
            d.min(depth_cap)
        })
        .collect();
    let mut seen: HashSet<Vec<EnvState>> = HashSet::new();
    let mut pairs = Vec::new();
    let mut total = 0;
    let mut stale = 0;
    let mut walk = 0u64;
    while total < budget && stale < train.len() * 20 {
        let slot = walk as usize % train.len();
        let env_index = train[slot];
        let env = &pool.envs[env_index];
        let traj = random_walk(&env.start, horizons[slot], rng::derive(seed, &[walk]));
        walk += 1;
        let mut fresh = false;
        for k in 0..traj.len() {
            let prefix = traj.states[..=k].to_vec();
            if seen.contains(&prefix) {
                continue;
            }
            let candidates = successors(&traj.states[k], legal_actions(&traj.states[k]));
            if candidates.is_empty() {
                continue;
            }
            seen.insert(prefix.clone());
            fresh = true;
            total += candidates.len();
            pairs.push(PrefixPair {
                env: env_index,
                prefix,
                candidates,
            });
            if total >= budget {
                break;
            }
        }
        stale = if fresh { 0 } else { stale + 1 };
    }
    pairs
}

/// The VPFT input prefixes without their targets.
pub fn build_stage2_prefixes(vpft: &[PrefixPair]) -> Vec<Prefix> {
    vpft.iter()
        .map(|p| Prefix {
            env: p.env,
            states: p.prefix.clone(),
        })
        .collect()
}

/// What to build, in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub task: TaskKind,
    pub sizes: Vec<usize>,
    pub n_per_size: usize,
    pub test_fraction: f64,
    pub stage1_budget: usize,
    pub stage1_depth_cap: usize,
    pub ood: bool,
    pub seed: u64,
}

impl CorpusSpec {
    /// Paper-scale FrozenLake/Maze pool sizes: 1250 per size, 1000 train / 250 test.
    pub fn paper(task: TaskKind, seed: u64) -> CorpusSpec {
        let sizes = match task {
            TaskKind::MiniBehavior => vec![7, 8],
            _ => vec![3, 4, 5, 6],
        };
        CorpusSpec {
            task,
            sizes,
            n_per_size: 1250,
            test_fraction: 0.2,
            stage1_budget: 20_000,
            stage1_depth_cap: 16,
            ood: false,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub task: TaskKind,
    pub sizes: Vec<usize>,
    pub seed: u64,
    /// regime tag -> record count
    pub counts: BTreeMap<String, usize>,
    /// payload file -> sha256 hex digest
    pub digests: BTreeMap<String, String>,
}

impl CorpusManifest {
    /// Digest of the manifest itself, covering every payload digest.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec_seed: u64,
    pub pool: Pool,
    pub vpft: Vec<PrefixPair>,
    pub stage1: Vec<PrefixPair>,
    pub stage2: Vec<Prefix>,
    pub ood: Option<Pool>,
}

pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    let pool = build_environment_pool(spec.task, &spec.sizes, spec.n_per_size, spec.test_fraction, spec.seed)?;
    let vpft = build_vpft_dataset(&pool, rng::derive(spec.seed, &[2]));
    let stage1 = build_stage1_dataset(&pool, spec.stage1_depth_cap, spec.stage1_budget, rng::derive(spec.seed, &[3]));
    let stage2 = build_stage2_prefixes(&vpft);
    let ood = if spec.ood { Some(build_ood_pool(spec.task, spec.seed)?) } else { None };
    Ok(Corpus {
        spec_seed: spec.seed,
        pool,
        vpft,
        stage1,
        stage2,
        ood,
    })
}

fn states_text(states: &[EnvState]) -> String {
    states.iter().map(encode_state).collect::<Vec<_>>().join(" ")
}

fn pool_text(pool: &Pool) -> String {
    let mut out = String::new();
    for e in &pool.envs {
        let split = match e.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        out.push_str(&format!("{} {} {} {}\n", e.id, split, encode_state(&e.start), encode_layout(e.layout())));
    }
    out
}

fn pairs_text(pool: &Pool, pairs: &[PrefixPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "{} {} -> {}\n",
            pool.envs[p.env].id,
            states_text(&p.prefix),
            states_text(&p.candidates)
        ));
    }
    out
}

fn prefixes_text(pool: &Pool, prefixes: &[Prefix]) -> String {
    let mut out = String::new();
    for p in prefixes {
        out.push_str(&format!("{} {}\n", pool.envs[p.env].id, states_text(&p.states)));
    }
    out
}

impl Corpus {
    pub fn task(&self) -> TaskKind {
        self.pool.task
    }

    fn payloads(&self) -> Vec<(&'static str, String)> {
        let mut files = vec![
            ("environments.txt", pool_text(&self.pool)),
            ("vpft.txt", pairs_text(&self.pool, &self.vpft)),
            ("stage1.txt", pairs_text(&self.pool, &self.stage1)),
            ("stage2.txt", prefixes_text(&self.pool, &self.stage2)),
        ];
        if let Some(ood) = &self.ood {
            files.push(("ood.txt", pool_text(ood)));
        }
        files
    }

    pub fn manifest(&self) -> CorpusManifest {
        let mut counts = BTreeMap::new();
        counts.insert("environments".to_string(), self.pool.envs.len());
        counts.insert("vpft".to_string(), self.vpft.len());
        counts.insert("stage1".to_string(), self.stage1.len());
        counts.insert("stage2".to_string(), self.stage2.len());
        if let Some(ood) = &self.ood {
            counts.insert("ood".to_string(), ood.envs.len());
        }
        let digests = self
            .payloads()
            .into_iter()
            .map(|(name, text)| (name.to_string(), hex::encode(Sha256::digest(text.as_bytes()))))
            .collect();
        CorpusManifest {
            version: CORPUS_VERSION,
            task: self.task(),
            sizes: self.pool.sizes(),
            seed: self.spec_seed,
            counts,
            digests,
        }
    }
}

/// Write the corpus into `dir` (created if needed) and return its manifest.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest, CorpusError> {
    fs::create_dir_all(dir)?;
    for (name, text) in corpus.payloads() {
        fs::write(dir.join(name), text)?;
    }
    let manifest = corpus.manifest();
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest, CorpusError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CorpusError::MissingManifest(dir.display().to_string()));
    }
    let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.version != CORPUS_VERSION {
        return Err(CorpusError::Version {
            found: manifest.version,
            expected: CORPUS_VERSION,
        });
    }
    Ok(manifest)
}

struct Reader<'a> {
    file: &'a str,
}

impl Reader<'_> {
    fn err(&self, line: usize, msg: impl Into<String>) -> CorpusError {
        CorpusError::Format {
            file: self.file.to_string(),
            line: line + 1,
            msg: msg.into(),
        }
    }

    fn pool(&self, text: &str, task: TaskKind) -> Result<Pool, CorpusError> {
        let mut envs = Vec::new();
        let mut layouts: HashMap<String, Arc<Layout>> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.splitn(4, ' ');
            let (Some(id), Some(split), Some(state), Some(layout_line)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(self.err(n, "expected 4 fields"));
            };
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(self.err(n, format!("unknown split {other}"))),
            };
            let layout = match layouts.get(layout_line) {
                Some(l) => l.clone(),
                None => {
                    let l = Arc::new(decode_layout(layout_line).map_err(|e| self.err(n, e.to_string()))?);
                    layouts.insert(layout_line.to_string(), l.clone());
                    l
                }
            };
            if layout.task != task {
                return Err(self.err(n, "task differs from manifest"));
            }
            let start = decode_state(&layout, state).map_err(|e| self.err(n, e.to_string()))?;
            let env = Environment::new(start, split);
            if env.id != id {
                return Err(self.err(n, "environment id does not match its content"));
            }
            envs.push(env);
        }
        Ok(Pool { task, envs })
    }

    fn states(&self, n: usize, layout: &Arc<Layout>, fields: &[&str]) -> Result<Vec<EnvState>, CorpusError> {
        fields
            .iter()
            .map(|s| decode_state(layout, s).map_err(|e| self.err(n, e.to_string())))
            .collect()
    }

    fn env_index(&self, n: usize, index: &HashMap<&str, usize>, id: &str) -> Result<usize, CorpusError> {
        index.get(id).copied().ok_or_else(|| self.err(n, format!("unknown environment {id}")))
    }

    fn pairs(&self, text: &str, pool: &Pool) -> Result<Vec<PrefixPair>, CorpusError> {
        let index: HashMap<&str, usize> = pool.envs.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split(' ').collect();
            let arrow = fields.iter().position(|&f| f == "->").ok_or_else(|| self.err(n, "missing ->"))?;
            if arrow < 2 || arrow + 1 == fields.len() {
                return Err(self.err(n, "empty prefix or candidate list"));
            }
            let env = self.env_index(n, &index, fields[0])?;
            let layout = pool.envs[env].layout();
            out.push(PrefixPair {
                env,
                prefix: self.states(n, layout, &fields[1..arrow])?,
                candidates: self.states(n, layout, &fields[arrow + 1..])?,
            });
        }
        Ok(out)
    }

    fn prefixes(&self, text: &str, pool: &Pool) -> Result<Vec<Prefix>, CorpusError> {
        let index: HashMap<&str, usize> = pool.envs.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() < 2 {
                return Err(self.err(n, "empty prefix"));
            }
            let env = self.env_index(n, &index, fields[0])?;
            out.push(Prefix {
                env,
                states: self.states(n, pool.envs[env].layout(), &fields[1..])?,
            });
        }
        Ok(out)
    }
}

/// Read a corpus back, verifying every payload against the manifest digests.
pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let manifest = load_manifest(dir)?;
    let mut texts = HashMap::new();
    for (name, digest) in &manifest.digests {
        let text = fs::read_to_string(dir.join(name))?;
        if &hex::encode(Sha256::digest(text.as_bytes())) != digest {
            return Err(CorpusError::Digest { file: name.clone() });
        }
        texts.insert(name.as_str(), text);
    }
    let get = |name: &str| {
        texts.get(name).ok_or_else(|| CorpusError::Format {
            file: name.to_string(),
            line: 0,
            msg: "payload not listed in manifest".into(),
        })
    };
    let pool = Reader { file: "environments.txt" }.pool(get("environments.txt")?, manifest.task)?;
    let vpft = Reader { file: "vpft.txt" }.pairs(get("vpft.txt")?, &pool)?;
    let stage1 = Reader { file: "stage1.txt" }.pairs(get("stage1.txt")?, &pool)?;
    let stage2 = Reader { file: "stage2.txt" }.prefixes(get("stage2.txt")?, &pool)?;
    let ood = match texts.get("ood.txt") {
        Some(text) => Some(Reader { file: "ood.txt" }.pool(text, manifest.task)?),
        None => None,
    };
    Ok(Corpus {
        spec_seed: manifest.seed,
        pool,
        vpft,
        stage1,
        stage2,
        ood,
    })
}

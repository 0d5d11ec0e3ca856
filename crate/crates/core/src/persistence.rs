//! Run directories: config snapshot, append-only JSONL event log,
//! per-iteration checkpoints, the best valid solution and the CSV report.
//!
//! ```text
//! <run>/config.snapshot.json
//! <run>/events.jsonl
//! <run>/checkpoints/iter-<t>.json
//! <run>/best_solution.txt
//! <run>/report.csv
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EngineConfig;
use crate::diversity::{canonicalize, DiversityIndex};
use crate::engine::{Engine, EngineError, IterationSummary, RunState};
use crate::model::{LineageStore, Population, SolutionId, SolutionRecord};

pub const SNAPSHOT_FILE: &str = "config.snapshot.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_FILE: &str = "best_solution.txt";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("i/o failure on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt event log: {0}")]
    CorruptLog(String),
    #[error("corrupt checkpoint {path}: {message}")]
    CorruptCheckpoint { path: String, message: String },
    #[error("no checkpoint found in {0}")]
    MissingCheckpoint(String),
    #[error("config hash {found:016x} does not match checkpoint hash {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("run directory {0} is not empty")]
    NotEmpty(String),
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistenceError + '_ {
    move |source| PersistenceError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEvent {
    pub iteration: u64,
    pub batch_index: u32,
    pub parent_id: SolutionId,
    /// Sampled parent first, then the ancestors shown in its prompt.
    pub prompt_ids: Vec<SolutionId>,
    pub solution_ids: Vec<SolutionId>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Event {
    Solution(SolutionRecord),
    Group(GroupEvent),
    Iteration(IterationSummary),
}

impl Event {
    pub fn iteration(&self) -> u64 {
        match self {
            Event::Solution(r) => r.iteration,
            Event::Group(g) => g.iteration,
            Event::Iteration(s) => s.iteration,
        }
    }
}

/// Sink for everything the engine persists.
pub trait Recorder: Send {
    fn record(&mut self, event: &Event) -> Result<(), PersistenceError>;
    fn best_solution(&mut self, content: &str) -> Result<(), PersistenceError>;
    fn checkpoint(&mut self, config: &EngineConfig, state: &RunState) -> Result<(), PersistenceError>;
}

#[derive(Debug, Default)]
pub struct MemoryLog {
    pub events: Vec<Event>,
    pub checkpoints: Vec<Checkpoint>,
    pub best: Option<String>,
}

/// Keeps everything in memory; the shared handle stays readable after the
/// engine takes ownership of the recorder.
pub struct MemoryRecorder(Arc<Mutex<MemoryLog>>);

impl MemoryRecorder {
    pub fn new() -> (Self, Arc<Mutex<MemoryLog>>) {
        let log = Arc::new(Mutex::new(MemoryLog::default()));
        (Self(log.clone()), log)
    }
}

impl Recorder for MemoryRecorder {
    fn record(&mut self, event: &Event) -> Result<(), PersistenceError> {
        self.0.lock().expect("log lock").events.push(event.clone());
        Ok(())
    }

    fn best_solution(&mut self, content: &str) -> Result<(), PersistenceError> {
        self.0.lock().expect("log lock").best = Some(content.to_string());
        Ok(())
    }

    fn checkpoint(&mut self, config: &EngineConfig, state: &RunState) -> Result<(), PersistenceError> {
        self.0.lock().expect("log lock").checkpoints.push(Checkpoint::capture(config, state));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: SolutionId,
    pub parent_id: Option<SolutionId>,
    pub iteration: u64,
    pub content_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_hash: u64,
    pub rng: ChaCha8Rng,
    pub next_id: u64,
    pub population: Vec<SolutionId>,
    pub best_valid: Option<SolutionId>,
    pub records: Vec<IndexEntry>,
}

impl Checkpoint {
    pub fn capture(config: &EngineConfig, state: &RunState) -> Self {
        let records = state
            .order
            .iter()
            .map(|&id| {
                let r = state.store.get(id).expect("ordered ids exist");
                IndexEntry { id, parent_id: r.parent_id, iteration: r.iteration, content_hash: r.content_hash }
            })
            .collect();
        Self {
            iteration: state.iteration,
            config_hash: config.config_hash(),
            rng: state.rng.clone(),
            next_id: state.next_id,
            population: state.population.members().to_vec(),
            best_valid: state.best_valid,
            records,
        }
    }
}

/// Paths of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn snapshot(&self) -> PathBuf {
        self.root.join(SNAPSHOT_FILE)
    }
    pub fn events(&self) -> PathBuf {
        self.root.join(EVENTS_FILE)
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }
    pub fn checkpoint(&self, t: u64) -> PathBuf {
        self.checkpoints().join(format!("iter-{t}.json"))
    }
    pub fn best(&self) -> PathBuf {
        self.root.join(BEST_FILE)
    }
    pub fn report(&self) -> PathBuf {
        self.root.join(REPORT_FILE)
    }

    /// Creates the layout and writes the redacted config snapshot. The
    /// directory must be absent or empty.
    pub fn create(&self, config: &EngineConfig) -> Result<(), PersistenceError> {
        if self.root.exists() {
            let mut entries = fs::read_dir(&self.root).map_err(io_err(&self.root))?;
            if entries.next().is_some() {
                return Err(PersistenceError::NotEmpty(self.root.display().to_string()));
            }
        }
        let dir = self.checkpoints();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let text = serde_json::to_string_pretty(&config.redacted()).expect("config serializes");
        write_atomic(&self.snapshot(), text.as_bytes())
    }

    pub fn load_snapshot(&self) -> Result<EngineConfig, PersistenceError> {
        let path = self.snapshot();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let config: EngineConfig =
            serde_json::from_str(&text).map_err(|e| PersistenceError::Snapshot(format!("{}: {e}", path.display())))?;
        Ok(config.unredacted())
    }

    pub fn latest_checkpoint(&self) -> Result<u64, PersistenceError> {
        let missing = || PersistenceError::MissingCheckpoint(self.root.display().to_string());
        let dir = self.checkpoints();
        let entries = fs::read_dir(&dir).map_err(|_| missing())?;
        entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix("iter-")?.strip_suffix(".json")?.parse::<u64>().ok()
            })
            .max()
            .ok_or_else(missing)
    }

    pub fn load_checkpoint(&self, t: u64) -> Result<Checkpoint, PersistenceError> {
        let path = self.checkpoint(t);
        if !path.exists() {
            return Err(PersistenceError::MissingCheckpoint(path.display().to_string()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| PersistenceError::CorruptCheckpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if ck.iteration != t {
            return Err(PersistenceError::CorruptCheckpoint {
                path: path.display().to_string(),
                message: format!("holds iteration {}", ck.iteration),
            });
        }
        Ok(ck)
    }

    pub fn read_events(&self) -> Result<Vec<Event>, PersistenceError> {
        Ok(read_event_lines(&self.events())?.into_iter().map(|(_, e)| e).collect())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistenceError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Parses every line. A malformed final line (a crash mid-append) is
/// skipped with a warning; a malformed line elsewhere is corruption.
fn read_event_lines(path: &Path) -> Result<Vec<(String, Event)>, PersistenceError> {
    let file = File::open(path).map_err(io_err(path))?;
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err(path))?;
    let mut out = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Event>(&line) {
            Ok(e) => out.push((line, e)),
            Err(e) if i == last => {
                log::warn!("{}: skipping partial trailing line ({e})", path.display());
            }
            Err(e) => return Err(PersistenceError::CorruptLog(format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Appends to a run directory.
pub struct RunDirRecorder {
    dir: RunDir,
    events: File,
}

impl RunDirRecorder {
    pub fn open(dir: RunDir) -> Result<Self, PersistenceError> {
        let path = dir.events();
        let events = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        Ok(Self { dir, events })
    }
}

impl Recorder for RunDirRecorder {
    fn record(&mut self, event: &Event) -> Result<(), PersistenceError> {
        let mut line = serde_json::to_string(event).expect("events serialize");
        line.push('\n');
        let path = self.dir.events();
        self.events.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.events.flush().map_err(io_err(&path))
    }

    fn best_solution(&mut self, content: &str) -> Result<(), PersistenceError> {
        write_atomic(&self.dir.best(), content.as_bytes())
    }

    fn checkpoint(&mut self, config: &EngineConfig, state: &RunState) -> Result<(), PersistenceError> {
        let ck = Checkpoint::capture(config, state);
        let text = serde_json::to_string(&ck).expect("checkpoints serialize");
        write_atomic(&self.dir.checkpoint(state.iteration), text.as_bytes())
    }
}

/// Starts a fresh run in `dir`.
pub fn start_run(dir: &RunDir, config: EngineConfig) -> Result<Engine, EngineError> {
    dir.create(&config)?;
    Engine::initialize(config, Box::new(RunDirRecorder::open(dir.clone())?))
}

/// Rebuilds the state as of checkpoint `t` from the event log without
/// touching the directory. Every record is checked against the
/// checkpoint's index.
pub fn restore_state(dir: &RunDir, config: &EngineConfig, t: u64) -> Result<RunState, EngineError> {
    let ck = dir.load_checkpoint(t)?;
    let found = config.config_hash();
    if found != ck.config_hash {
        return Err(PersistenceError::ConfigMismatch { expected: ck.config_hash, found }.into());
    }
    let events = dir.read_events()?;
    let mut records: Vec<SolutionRecord> = Vec::new();
    let mut logged_summary = None;
    for e in events {
        match e {
            Event::Solution(r) if r.iteration <= t => records.push(r),
            Event::Iteration(s) if s.iteration == t => logged_summary = Some(s),
            _ => {}
        }
    }
    if records.len() != ck.records.len() {
        return Err(PersistenceError::CorruptLog(format!(
            "checkpoint {t} indexes {} records, log holds {}",
            ck.records.len(),
            records.len()
        ))
        .into());
    }
    let embedder = config.embedding.build()?;
    let mut store = LineageStore::new();
    let mut index = DiversityIndex::new(config.diversity.k);
    let mut order = Vec::with_capacity(records.len());
    for (r, entry) in records.into_iter().zip(&ck.records) {
        let actual = IndexEntry { id: r.id, parent_id: r.parent_id, iteration: r.iteration, content_hash: r.content_hash };
        if &actual != entry || crate::model::content_hash(&r.content) != entry.content_hash {
            return Err(PersistenceError::CorruptLog(format!("record {} disagrees with checkpoint {t}", r.id)).into());
        }
        let text = if config.diversity.canonicalize { canonicalize(&r.content) } else { r.content.clone() };
        index.push(embedder.embed(&text)?);
        order.push(r.id);
        store.insert(r).map_err(EngineError::from)?;
    }
    for (&id, score) in order.iter().zip(index.scores()) {
        store.get_mut(id)?.diversity = Some(score);
    }
    let mut population = Population::new(config.population_capacity)?;
    population.set_members(ck.population.clone(), &store)?;
    let mut state = RunState {
        iteration: t,
        store,
        population,
        index,
        order,
        rng: ck.rng,
        next_id: ck.next_id,
        best_valid: ck.best_valid,
        last_summary: None,
    };
    let new_ids: Vec<SolutionId> = state.order.iter().copied().filter(|&id| state.store.get(id).is_ok_and(|r| r.iteration == t)).collect();
    let summary = state.summarize(&new_ids)?;
    if t > 0 && logged_summary.as_ref() != Some(&summary) {
        return Err(PersistenceError::CorruptLog(format!("iteration {t} summary does not replay")).into());
    }
    state.last_summary = Some(summary);
    Ok(state)
}

/// Continues a run from its latest checkpoint. Events logged after that
/// checkpoint are discarded. `iterations` overrides the configured target.
pub fn resume(dir: &RunDir, iterations: Option<u64>) -> Result<Engine, EngineError> {
    let mut config = dir.load_snapshot()?;
    if let Some(n) = iterations {
        config.iterations = n;
    }
    let t = dir.latest_checkpoint()?;
    let state = restore_state(dir, &config, t)?;
    truncate_events(dir, t)?;
    Engine::restore(config, state, Box::new(RunDirRecorder::open(dir.clone())?))
}

fn truncate_events(dir: &RunDir, t: u64) -> Result<(), PersistenceError> {
    let path = dir.events();
    let kept: String = read_event_lines(&path)?
        .into_iter()
        .filter(|(_, e)| e.iteration() <= t)
        .map(|(line, _)| line + "\n")
        .collect();
    write_atomic(&path, kept.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub t: u64,
    pub best_so_far: f64,
    pub mean_reward: f64,
    pub validity_rate: f64,
    pub population_mean_diversity: f64,
}

/// One row per logged iteration. The per-iteration aggregates are replayed
/// from the solution events and must agree with the iteration records.
pub fn build_report(dir: &RunDir) -> Result<Vec<ReportRow>, PersistenceError> {
    let events = dir.read_events()?;
    let mut per_iter: Vec<(f64, usize, usize)> = Vec::new();
    let mut best_by_iter: Vec<f64> = Vec::new();
    let mut summaries = Vec::new();
    for e in &events {
        match e {
            Event::Solution(r) => {
                let t = r.iteration as usize;
                if per_iter.len() <= t {
                    per_iter.resize(t + 1, (0.0, 0, 0));
                    best_by_iter.resize(t + 1, 0.0);
                }
                let cell = &mut per_iter[t];
                cell.0 += r.reward;
                cell.1 += r.valid as usize;
                cell.2 += 1;
                best_by_iter[t] = best_by_iter[t].max(r.reward);
            }
            Event::Iteration(s) => summaries.push(s),
            Event::Group(_) => {}
        }
    }
    let last = per_iter.len().saturating_sub(1) as u64;
    if summaries.len() as u64 != last {
        return Err(PersistenceError::CorruptLog(format!(
            "solutions reach iteration {last} but {} iteration records exist",
            summaries.len()
        )));
    }
    let mut best = 0.0f64;
    if let Some(b) = best_by_iter.first() {
        best = best.max(*b);
    }
    let mut rows = Vec::with_capacity(summaries.len());
    for (k, s) in summaries.into_iter().enumerate() {
        let t = k as u64 + 1;
        if s.iteration != t {
            return Err(PersistenceError::CorruptLog(format!("expected iteration record {t}, found {}", s.iteration)));
        }
        let (sum, valid, n) = per_iter[t as usize];
        best = best.max(best_by_iter[t as usize]);
        let n = n.max(1) as f64;
        if sum / n != s.mean_reward || valid as f64 / n != s.validity_rate || best != s.best_reward_so_far {
            return Err(PersistenceError::CorruptLog(format!("iteration {t} record does not replay")));
        }
        rows.push(ReportRow {
            t,
            best_so_far: s.best_reward_so_far,
            mean_reward: s.mean_reward,
            validity_rate: s.validity_rate,
            population_mean_diversity: s.population_mean_diversity,
        });
    }
    Ok(rows)
}

/// Writes `report.csv` into the run directory.
pub fn write_report(dir: &RunDir) -> Result<PathBuf, PersistenceError> {
    let rows = build_report(dir)?;
    let path = dir.report();
    let csv_err = |e: csv::Error| PersistenceError::Io { path: path.display().to_string(), source: e.into() };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for row in &rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mutators::stub::CircleRefineParams;
    use crate::mutators::MutatorConfig;
    use crate::tasks::{CirclePackingConfig, TaskConfig};

    fn config(iterations: u64) -> EngineConfig {
        let task = TaskConfig::CirclePacking(CirclePackingConfig { n: 4, ..toml::from_str("").unwrap() });
        let mut c = EngineConfig::new(2, 2, iterations, MutatorConfig::CircleRefine(CircleRefineParams::default()), task);
        c.population_capacity = 6;
        c
    }

    #[test]
    fn append_and_read_back() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("run"));
        dir.create(&config(1)).unwrap();
        let mut rec = RunDirRecorder::open(dir.clone()).unwrap();
        let a = Event::Solution(SolutionRecord::new(SolutionId(0), None, 0, "x".into(), 0.1 + 0.2, true, "ok"));
        let b = Event::Solution(SolutionRecord::new(SolutionId(1), Some(SolutionId(0)), 1, "y".into(), 1e-300, true, ""));
        rec.record(&a).unwrap();
        rec.record(&b).unwrap();
        assert_eq!(dir.read_events().unwrap(), vec![a.clone(), b]);
        let mut f = OpenOptions::new().append(true).open(dir.events()).unwrap();
        f.write_all(b"{\"type\":\"solu").unwrap();
        assert_eq!(dir.read_events().unwrap().len(), 2);
        let text = fs::read_to_string(dir.events()).unwrap();
        fs::write(dir.events(), format!("garbage\n{text}")).unwrap();
        assert!(matches!(dir.read_events(), Err(PersistenceError::CorruptLog(_))));
    }

    #[test]
    fn refuses_non_empty_directory() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("stray"), "x").unwrap();
        assert!(matches!(RunDir::new(tmp.path()).create(&config(1)), Err(PersistenceError::NotEmpty(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("run"));
        let mut e = start_run(&dir, config(2)).unwrap();
        e.run().unwrap();
        let ck = dir.load_checkpoint(2).unwrap();
        assert_eq!(ck, Checkpoint::capture(&e.config, &e.state));
        let restored = restore_state(&dir, &e.config, 2).unwrap();
        assert_eq!(restored.store, e.state.store);
        assert_eq!(restored.population, e.state.population);
        assert_eq!(restored.rng, e.state.rng);
        assert_eq!(restored.last_summary.as_ref().map(|s| &s.population_ids), Some(&e.state.population.members().to_vec()));
        let other = EngineConfig { seed: 99, ..e.config.clone() };
        assert!(matches!(
            restore_state(&dir, &other, 2),
            Err(EngineError::Persistence(PersistenceError::ConfigMismatch { .. }))
        ));
        assert!(matches!(
            restore_state(&dir, &e.config, 7),
            Err(EngineError::Persistence(PersistenceError::MissingCheckpoint(_)))
        ));
        fs::write(dir.checkpoint(1), "{").unwrap();
        assert!(matches!(dir.load_checkpoint(1), Err(PersistenceError::CorruptCheckpoint { .. })));
    }

    #[test]
    fn report_rows_replay_solution_events() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("run"));
        start_run(&dir, config(3)).unwrap().run().unwrap();
        let rows = build_report(&dir).unwrap();
        assert_eq!(rows.len(), 3);
        let events = dir.read_events().unwrap();
        for row in &rows {
            let rs: Vec<f64> = events
                .iter()
                .filter_map(|e| match e {
                    Event::Solution(r) if r.iteration == row.t => Some(r.reward),
                    _ => None,
                })
                .collect();
            assert_eq!(rs.len(), 4);
            let mean = rs.iter().sum::<f64>() / rs.len() as f64;
            assert!((mean - row.mean_reward).abs() < 1e-12);
        }
        assert!(rows.windows(2).all(|w| w[0].best_so_far <= w[1].best_so_far));
        let path = write_report(&dir).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert!(text.starts_with("t,best_so_far,mean_reward,validity_rate,population_mean_diversity\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn missing_iteration_record_is_corrupt() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("run"));
        start_run(&dir, config(2)).unwrap().run().unwrap();
        let text = fs::read_to_string(dir.events()).unwrap();
        let kept: Vec<&str> = text.lines().filter(|l| !l.contains("\"type\":\"iteration\",\"iteration\":1")).collect();
        assert_eq!(kept.len() + 1, text.lines().count());
        fs::write(dir.events(), kept.join("\n") + "\n").unwrap();
        assert!(matches!(build_report(&dir), Err(PersistenceError::CorruptLog(_))));
    }

    #[test]
    fn best_solution_tracks_max_valid() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("run"));
        let e = {
            let mut e = start_run(&dir, config(3)).unwrap();
            e.run().unwrap();
            e
        };
        let best = e.state.store.iter().filter(|r| r.valid).map(|r| r.reward).fold(f64::NEG_INFINITY, f64::max);
        let content = fs::read_to_string(dir.best()).unwrap();
        let matching = e.state.store.iter().find(|r| r.valid && r.reward == best).unwrap();
        assert_eq!(content, matching.content);
    }
}

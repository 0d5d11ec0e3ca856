//! The search loop: sample parents, prompt, mutate `G` times per parent,
//! evaluate, compute group advantages, rescore diversity, select.
//!
//! All randomness flows from one ChaCha stream owned by [`RunState`]. Rollout
//! seeds are drawn before the parallel fan-out and results are merged in
//! `(batch_index, rollout_index)` order, so stub runs are bit-reproducible
//! regardless of the worker count.

use std::sync::Arc;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::{sample, sample_weighted};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EngineConfig;
use crate::diversity::{canonicalize, DiversityError, DiversityIndex, Embedder};
use crate::grpo::{group_advantages, GrpoError};
use crate::model::{GroupKey, LineageStore, ModelError, Population, SolutionId, SolutionRecord};
use crate::mutators::{EditMode, MutationOutcome, MutationRequest, Mutator, MutatorError};
use crate::persistence::{Event, GroupEvent, PersistenceError, Recorder};
use crate::prompting::{construct_prompt, PromptBundle, PromptError, PromptTemplate};
use crate::selection::{ObjectivePoint, SelectionError};
use crate::tasks::{evaluate, EvalResult, Task, TaskError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("task produced no initial solutions")]
    NoInitialSolutions,
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Mutator(#[from] MutatorError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: u64,
    pub best_reward_so_far: f64,
    pub mean_reward: f64,
    pub validity_rate: f64,
    pub population_ids: Vec<SolutionId>,
    pub population_mean_diversity: f64,
    /// Seconds; kept out of the event log.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Everything that changes between iterations.
#[derive(Debug, Clone)]
pub struct RunState {
    pub iteration: u64,
    pub store: LineageStore,
    pub population: Population,
    /// Row `i` holds the embedding of the `i`-th inserted record.
    pub index: DiversityIndex,
    pub order: Vec<SolutionId>,
    pub rng: ChaCha8Rng,
    pub next_id: u64,
    pub best_valid: Option<SolutionId>,
    pub last_summary: Option<IterationSummary>,
}

impl RunState {
    pub fn best_reward(&self) -> f64 {
        self.store.iter().map(|r| r.reward).fold(0.0, f64::max)
    }

    pub fn objective_points(&self) -> Vec<ObjectivePoint> {
        self.order
            .iter()
            .map(|&id| {
                let r = self.store.get(id).expect("ordered ids exist");
                ObjectivePoint::new(id, r.reward, r.diversity.unwrap_or(0.0))
            })
            .collect()
    }

    /// Summary of the current iteration given the records it created.
    pub fn summarize(&self, new_ids: &[SolutionId]) -> Result<IterationSummary, ModelError> {
        let mut rewards = 0.0;
        let mut valid = 0usize;
        for &id in new_ids {
            let r = self.store.get(id)?;
            rewards += r.reward;
            valid += r.valid as usize;
        }
        let n = new_ids.len().max(1) as f64;
        Ok(IterationSummary {
            iteration: self.iteration,
            best_reward_so_far: self.best_reward(),
            mean_reward: rewards / n,
            validity_rate: valid as f64 / n,
            population_ids: self.population.members().to_vec(),
            population_mean_diversity: self.population_mean_diversity(),
            wall_time: 0.0,
        })
    }

    fn population_mean_diversity(&self) -> f64 {
        let m = self.population.members();
        if m.is_empty() {
            return 0.0;
        }
        let sum: f64 = m.iter().map(|&id| self.store.get(id).ok().and_then(|r| r.diversity).unwrap_or(0.0)).sum();
        sum / m.len() as f64
    }
}

pub struct Engine {
    pub config: EngineConfig,
    pub state: RunState,
    task: Box<dyn Task>,
    mutator: Arc<dyn Mutator>,
    embedder: Arc<dyn Embedder>,
    template: PromptTemplate,
    mode: EditMode,
    pool: rayon::ThreadPool,
    recorder: Box<dyn Recorder>,
}

struct Rollout {
    key: GroupKey,
    parent: SolutionId,
    content: String,
    eval: EvalResult,
}

/// Components built from a config, before any state exists.
struct Parts {
    task: Box<dyn Task>,
    mutator: Arc<dyn Mutator>,
    embedder: Arc<dyn Embedder>,
    template: PromptTemplate,
    mode: EditMode,
    pool: rayon::ThreadPool,
}

fn build_parts(config: &EngineConfig) -> Result<Parts, EngineError> {
    config.validate().map_err(|e| EngineError::Config(e.to_string()))?;
    let task = config.task.build()?;
    let mutator = config.mutator.build(&task.mutator_hints())?;
    let embedder = config.embedding.build()?;
    let template = match &config.template {
        Some(path) => PromptTemplate::load(path)?,
        None => task.default_template(),
    };
    let mode = config.mutator.mode_override().unwrap_or(task.preferred_mode());
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| EngineError::Config(e.to_string()))?;
    Ok(Parts { task, mutator, embedder, template, mode, pool })
}

impl Engine {
    /// Creates the roots, evaluates and embeds them and selects the first
    /// population. Emits one solution event per root and checkpoint 0.
    pub fn initialize(config: EngineConfig, recorder: Box<dyn Recorder>) -> Result<Self, EngineError> {
        let parts = build_parts(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let initial = parts.task.initial_solutions(&mut rng);
        if initial.is_empty() {
            return Err(EngineError::NoInitialSolutions);
        }
        let state = RunState {
            iteration: 0,
            store: LineageStore::new(),
            population: Population::new(config.population_capacity)?,
            index: DiversityIndex::new(config.diversity.k),
            order: Vec::new(),
            rng,
            next_id: 0,
            best_valid: None,
            last_summary: None,
        };
        let mut engine = Self::assemble(config, state, parts, recorder);
        let start = Instant::now();
        let evals: Vec<Result<EvalResult, TaskError>> = {
            let task = &*engine.task;
            engine.pool.install(|| initial.par_iter().map(|c| evaluate(task, c)).collect())
        };
        let mut records = Vec::with_capacity(initial.len());
        for (i, (content, eval)) in initial.into_iter().zip(evals).enumerate() {
            let eval = absorb(eval)?;
            let key = GroupKey { batch_index: 0, rollout_index: i as u32 };
            records.push(engine.new_record(None, 0, content, &eval).with_tag("initial").with_group_key(key));
        }
        let ids = engine.commit(records)?;
        let summary = engine.finish_iteration(&ids, start)?;
        engine.state.last_summary = Some(summary);
        Ok(engine)
    }

    /// Rebuilds an engine around a restored state without emitting events.
    pub fn restore(config: EngineConfig, state: RunState, recorder: Box<dyn Recorder>) -> Result<Self, EngineError> {
        let parts = build_parts(&config)?;
        Ok(Self::assemble(config, state, parts, recorder))
    }

    fn assemble(config: EngineConfig, state: RunState, parts: Parts, recorder: Box<dyn Recorder>) -> Self {
        Self {
            config,
            state,
            task: parts.task,
            mutator: parts.mutator,
            embedder: parts.embedder,
            template: parts.template,
            mode: parts.mode,
            pool: parts.pool,
            recorder,
        }
    }

    pub fn task(&self) -> &dyn Task {
        &*self.task
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn summary(&self) -> Option<&IterationSummary> {
        self.state.last_summary.as_ref()
    }

    fn new_record(&mut self, parent: Option<SolutionId>, iteration: u64, content: String, eval: &EvalResult) -> SolutionRecord {
        let id = SolutionId(self.state.next_id);
        self.state.next_id += 1;
        SolutionRecord::new(id, parent, iteration, content, eval.reward, eval.valid, &eval.feedback)
    }

    /// Inserts, embeds and logs records, then rescores diversity for the
    /// whole dataset and selects the next population.
    fn commit(&mut self, records: Vec<SolutionRecord>) -> Result<Vec<SolutionId>, EngineError> {
        let embeddings: Vec<Result<Vec<f64>, DiversityError>> = {
            let (embedder, canon) = (&self.embedder, self.config.diversity.canonicalize);
            self.pool.install(|| {
                records
                    .par_iter()
                    .map(|r| if canon { embedder.embed(&canonicalize(&r.content)) } else { embedder.embed(&r.content) })
                    .collect()
            })
        };
        let mut ids = Vec::with_capacity(records.len());
        for (record, emb) in records.into_iter().zip(embeddings) {
            self.recorder.record(&Event::Solution(record.clone()))?;
            let id = self.state.store.insert(record)?;
            self.state.index.push(emb?);
            self.state.order.push(id);
            ids.push(id);
        }
        for (&id, score) in self.state.order.iter().zip(self.state.index.scores()) {
            self.state.store.get_mut(id)?.diversity = Some(score);
        }
        let points = self.state.objective_points();
        let selected = self.config.selection.select(&points, self.config.population_capacity, &mut self.state.rng)?;
        self.state.population.set_members(selected, &self.state.store)?;
        Ok(ids)
    }

    fn finish_iteration(&mut self, new_ids: &[SolutionId], start: Instant) -> Result<IterationSummary, EngineError> {
        for &id in new_ids {
            let r = self.state.store.get(id)?;
            let better = match self.state.best_valid {
                None => r.valid,
                Some(b) => r.valid && r.reward > self.state.store.get(b)?.reward,
            };
            if better {
                self.state.best_valid = Some(id);
                self.recorder.best_solution(&r.content)?;
            }
        }
        let mut summary = self.state.summarize(new_ids)?;
        summary.wall_time = start.elapsed().as_secs_f64();
        if self.state.iteration > 0 {
            self.recorder.record(&Event::Iteration(summary.clone()))?;
        }
        self.recorder.checkpoint(&self.config, &self.state)?;
        Ok(summary)
    }

    fn sample_parents(&mut self) -> Result<Vec<SolutionId>, EngineError> {
        let members = self.state.population.members().to_vec();
        let b = self.config.batch_size;
        let alpha = self.config.sampling_alpha;
        let rng = &mut self.state.rng;
        if alpha == 0.0 {
            return Ok(if b <= members.len() {
                sample(rng, members.len(), b).into_iter().map(|i| members[i]).collect()
            } else {
                (0..b).map(|_| members[rng.random_range(0..members.len())]).collect()
            });
        }
        let rewards: Vec<f64> = members
            .iter()
            .map(|&id| self.state.store.get(id).map(|r| r.reward))
            .collect::<Result<_, _>>()?;
        let top = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = rewards.iter().map(|r| (alpha * (r - top)).exp().max(f64::MIN_POSITIVE)).collect();
        if b <= members.len() {
            let picked = sample_weighted(rng, members.len(), |i| weights[i], b)
                .map_err(|e| EngineError::Config(format!("parent sampling: {e}")))?;
            Ok(picked.into_iter().map(|i| members[i]).collect())
        } else {
            let dist = WeightedIndex::new(&weights).map_err(|e| EngineError::Config(format!("parent sampling: {e}")))?;
            Ok((0..b).map(|_| members[dist.sample(rng)]).collect())
        }
    }

    /// One full iteration. Fatal faults leave the state at the previous
    /// checkpoint boundary as far as the log is concerned.
    pub fn run_iteration(&mut self) -> Result<IterationSummary, EngineError> {
        let start = Instant::now();
        let t = self.state.iteration + 1;
        let parents = self.sample_parents()?;
        let prompts: Vec<PromptBundle> = parents
            .iter()
            .map(|&p| {
                construct_prompt(&self.template, &self.state.store, p, self.config.n_ancestors, self.config.char_budget)
            })
            .collect::<Result<_, _>>()?;
        let g = self.config.group_size;
        let jobs: Vec<(GroupKey, usize, u64)> = (0..parents.len())
            .flat_map(|b| (0..g).map(move |j| (b, j)))
            .map(|(b, j)| {
                (GroupKey { batch_index: b as u32, rollout_index: j as u32 }, b, self.state.rng.next_u64())
            })
            .collect();

        let results: Vec<Result<Rollout, EngineError>> = {
            let (task, mutator, store, mode) = (&*self.task, &*self.mutator, &self.state.store, self.mode);
            let (parents, prompts) = (&parents, &prompts);
            self.pool.install(|| {
                jobs.par_iter()
                    .map(|&(key, b, seed)| {
                        let parent = store.get(parents[b])?;
                        let request = MutationRequest {
                            prompt: &prompts[b],
                            parent_content: &parent.content,
                            seed,
                            fence_language: task.fence_language(),
                            mode,
                        };
                        let outcome = match mutator.mutate(&request) {
                            Ok(o) => o,
                            Err(e) if !e.is_fatal() => MutationOutcome::failure(String::new(), e.to_string()),
                            Err(e) => return Err(e.into()),
                        };
                        let (content, eval) = match outcome.content {
                            Some(c) if outcome.parse_ok => {
                                let eval = absorb(evaluate(task, &c))?;
                                (c, eval)
                            }
                            _ => {
                                let reason = outcome.failure_reason.unwrap_or_else(|| "mutation failed".into());
                                (outcome.raw_response, EvalResult::invalid(reason, Default::default()))
                            }
                        };
                        Ok(Rollout { key, parent: parents[b], content, eval })
                    })
                    .collect()
            })
        };
        let rollouts: Vec<Rollout> = results.into_iter().collect::<Result<_, _>>()?;

        let mut records = Vec::with_capacity(rollouts.len());
        for r in rollouts {
            let tag = self.mutator.tag().to_string();
            records.push(self.new_record(Some(r.parent), t, r.content, &r.eval).with_tag(tag).with_group_key(r.key));
        }
        let mut groups = Vec::with_capacity(parents.len());
        for (b, chunk) in records.chunks(g).enumerate() {
            let rewards: Vec<f64> = chunk.iter().map(|r| r.reward).collect();
            let advantages = group_advantages(&rewards, self.config.grpo.degenerate_std_floor)?;
            groups.push(GroupEvent {
                iteration: t,
                batch_index: b as u32,
                parent_id: parents[b],
                prompt_ids: prompts[b].included_ids.clone(),
                solution_ids: chunk.iter().map(|r| r.id).collect(),
                rewards,
                advantages,
            });
        }
        self.state.iteration = t;
        let ids = self.commit(records)?;
        for group in groups {
            self.recorder.record(&Event::Group(group))?;
        }
        let summary = self.finish_iteration(&ids, start)?;
        self.state.last_summary = Some(summary.clone());
        Ok(summary)
    }

    /// Runs until `config.iterations` iterations are complete.
    pub fn run(&mut self) -> Result<IterationSummary, EngineError> {
        while self.state.iteration < self.config.iterations {
            self.run_iteration()?;
        }
        Ok(self.state.last_summary.clone().expect("initialized engines carry a summary"))
    }
}

/// Non-fatal task errors score the candidate 0.
fn absorb(result: Result<EvalResult, TaskError>) -> Result<EvalResult, EngineError> {
    match result {
        Ok(r) => Ok(r),
        Err(e) if !e.is_fatal() => Ok(EvalResult::invalid(e.to_string(), Default::default())),
        Err(e) => Err(e.into()),
    }
}

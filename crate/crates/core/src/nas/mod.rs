//! Aging-evolution architecture search over [`ArchCode`]s.

mod desk;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchCode, NUM_SLOTS};
use crate::error::{Error, Result};
use crate::io::KeyValues;
use crate::metrics::{EvalReport, ObjectiveWeights};

pub use desk::{evaluate_candidate, train_oracle, DeskConfig, DeskEvaluator, Oracle};

/// Attempts to find a child not already in the history before accepting a
/// duplicate.
pub const MUTATION_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pending,
    Trained,
    Failed,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pending => "pending",
            Status::Trained => "trained",
            Status::Failed => "failed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub code: ArchCode,
    /// `L`; `+∞` for failed candidates.
    pub loss: f64,
    pub gen: usize,
    pub status: Status,
    /// Position in the history.
    pub index: usize,
    pub report: Option<EvalReport>,
}

impl Candidate {
    fn from_outcome(code: ArchCode, gen: usize, index: usize, outcome: &Outcome) -> Self {
        match outcome {
            Outcome::Trained(r) => Self {
                code,
                loss: r.overall,
                gen,
                status: Status::Trained,
                index,
                report: Some(*r),
            },
            Outcome::Failed(_) => Self {
                code,
                loss: f64::INFINITY,
                gen,
                status: Status::Failed,
                index,
                report: None,
            },
        }
    }
}

/// Result of evaluating one code.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Trained(EvalReport),
    Failed(String),
}

/// Scores architectures. Implementations must be deterministic per code.
pub trait Evaluator: Sync {
    fn evaluate(&self, code: ArchCode) -> Outcome;
}

impl<F: Fn(ArchCode) -> Outcome + Sync> Evaluator for F {
    fn evaluate(&self, code: ArchCode) -> Outcome {
        self(code)
    }
}

/// Caches outcomes per code; shareable across searches.
pub struct Memoized<E> {
    inner: E,
    cache: Mutex<HashMap<ArchCode, Outcome>>,
}

impl<E: Evaluator> Memoized<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    /// Number of distinct codes evaluated so far.
    pub fn len(&self) -> usize {
        self.cache.lock().expect("memo lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<E: Evaluator> Evaluator for Memoized<E> {
    fn evaluate(&self, code: ArchCode) -> Outcome {
        if let Some(hit) = self.cache.lock().expect("memo lock").get(&code) {
            return hit.clone();
        }
        let outcome = self.inner.evaluate(code);
        self.cache.lock().expect("memo lock").entry(code).or_insert(outcome).clone()
    }
}

/// The searchable subset of codes: `base` with only the `free` bits varying.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    pub base: ArchCode,
    free: u32,
}

impl SearchSpace {
    pub fn full() -> Self {
        Self {
            base: ArchCode::ZEROS,
            free: ArchCode::ONES.bits(),
        }
    }

    pub fn restricted(base: ArchCode, free_slots: &[usize]) -> Result<Self> {
        let mut free = 0u32;
        for &s in free_slots {
            if s >= NUM_SLOTS {
                return Err(Error::Input(format!("slot {s} out of range")));
            }
            free |= 1 << s;
        }
        if free == 0 {
            return Err(Error::Input("search space has no free slots".into()));
        }
        Ok(Self {
            base: ArchCode::from_bits(base.bits() & !free)?,
            free,
        })
    }

    pub fn free_slots(&self) -> Vec<usize> {
        (0..NUM_SLOTS).filter(|&i| self.free >> i & 1 == 1).collect()
    }

    pub fn size(&self) -> u64 {
        1u64 << self.free.count_ones()
    }

    pub fn contains(&self, code: ArchCode) -> bool {
        code.bits() & !self.free == self.base.bits()
    }

    /// Uniform random member.
    pub fn sample(&self, rng: &mut impl Rng) -> ArchCode {
        let bits = self.base.bits() | (rng.gen::<u32>() & self.free);
        ArchCode::from_bits(bits).expect("within mask")
    }

    /// Every member, in increasing order of the free bits.
    pub fn enumerate(&self) -> Vec<ArchCode> {
        let slots = self.free_slots();
        (0..self.size())
            .map(|k| {
                let bits = slots
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| k >> j & 1 == 1)
                    .fold(self.base.bits(), |b, (_, &s)| b | 1 << s);
                ArchCode::from_bits(bits).expect("within mask")
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub population: usize,
    /// Total number of evaluations (history size).
    pub budget: usize,
    pub tournament_size: usize,
    pub weights: ObjectiveWeights,
    pub seed: u64,
    pub workers: usize,
    /// Generation barriers: each round breeds `population` children from
    /// one snapshot and inserts them in order.
    pub strict: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::with_population(20, 140)
    }
}

impl SearchConfig {
    pub fn with_population(population: usize, budget: usize) -> Self {
        Self {
            population,
            budget,
            tournament_size: default_tournament(population),
            weights: ObjectiveWeights::default(),
            seed: 0,
            workers: 1,
            strict: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config(format!("population must be >= 2, got {}", self.population)));
        }
        if self.budget < self.population {
            return Err(Error::Config(format!(
                "budget {} is smaller than the population {}",
                self.budget, self.population
            )));
        }
        if !(2..=self.population).contains(&self.tournament_size) {
            return Err(Error::Config(format!(
                "tournament size {} outside [2, {}]",
                self.tournament_size, self.population
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.weights.validate()
    }

    pub const KEYS: [&'static str; 10] = [
        "population",
        "budget",
        "tournament",
        "alpha",
        "beta",
        "gamma",
        "seed",
        "workers",
        "strict",
        "mode",
    ];

    /// Applies the search keys of a `key=value` file on top of the defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = kv.get("population")? {
            c.population = p;
            c.tournament_size = default_tournament(p);
        }
        if let Some(b) = kv.get("budget")? {
            c.budget = b;
        }
        if let Some(t) = kv.get("tournament")? {
            c.tournament_size = t;
        }
        let w = c.weights;
        c.weights = ObjectiveWeights {
            alpha: kv.get("alpha")?.unwrap_or(w.alpha),
            beta: kv.get("beta")?.unwrap_or(w.beta),
            gamma: kv.get("gamma")?.unwrap_or(w.gamma),
        };
        if let Some(s) = kv.get("seed")? {
            c.seed = s;
        }
        if let Some(n) = kv.get("workers")? {
            c.workers = n;
        }
        if let Some(s) = kv.get("strict")? {
            c.strict = s;
        }
        match kv.get_str("mode") {
            None => {}
            Some("strict") => c.strict = true,
            Some("free") => c.strict = false,
            Some(other) => return Err(Error::Config(format!("mode must be strict or free, got {other}"))),
        }
        c.validate()?;
        Ok(c)
    }
}

/// `⌈P/4⌉`, at least 2.
pub fn default_tournament(population: usize) -> usize {
    population.div_ceil(4).max(2)
}

/// Population, history and generation counter of one search.
#[derive(Clone, Debug, Default)]
pub struct SearchState {
    pub population: Vec<Candidate>,
    pub history: Vec<Candidate>,
    pub gen: usize,
}

impl SearchState {
    /// Best trained candidate so far (lowest loss, then earliest).
    pub fn best(&self) -> Option<&Candidate> {
        best_of(&self.history)
    }

    fn insert(&mut self, candidate: Candidate) {
        self.history.push(candidate.clone());
        self.population.push(candidate);
    }

    /// Removes the member with the lowest generation index, ties going to
    /// the earliest inserted.
    fn evict_oldest(&mut self) -> Candidate {
        let pos = self
            .population
            .iter()
            .enumerate()
            .min_by_key(|(_, c)| (c.gen, c.index))
            .map(|(i, _)| i)
            .expect("population is non-empty");
        self.population.remove(pos)
    }
}

fn best_of(candidates: &[Candidate]) -> Option<&Candidate> {
    candidates
        .iter()
        .filter(|c| c.status == Status::Trained)
        .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)))
}

fn tournament_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.loss
        .total_cmp(&b.loss)
        .then(a.gen.cmp(&b.gen))
        .then(a.code.lex_cmp(b.code))
}

/// Picks `size` members uniformly without replacement and returns the best
/// (lowest loss, then lowest generation, then lexicographic code).
pub fn tournament_select<'a>(population: &'a [Candidate], size: usize, rng: &mut impl Rng) -> Result<&'a Candidate> {
    if size == 0 || population.len() < size {
        return Err(Error::Precondition(format!(
            "tournament of {size} from a population of {}",
            population.len()
        )));
    }
    Ok(sample(rng, population.len(), size)
        .into_iter()
        .map(|i| &population[i])
        .min_by(|a, b| tournament_order(a, b))
        .expect("size >= 1"))
}

/// Flips one uniformly chosen free bit, retrying while the child is already
/// in `seen`.
pub fn mutate(parent: ArchCode, seen: &HashSet<ArchCode>, space: &SearchSpace, rng: &mut impl Rng) -> ArchCode {
    let slots = space.free_slots();
    let mut child = parent;
    for _ in 0..=MUTATION_RETRIES {
        child = parent.flip(slots[rng.gen_range(0..slots.len())]);
        if !seen.contains(&child) {
            break;
        }
    }
    child
}

/// What the observer sees after every insertion.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub state: &'a SearchState,
    pub inserted: &'a Candidate,
    /// Present during the steady-state phase.
    pub evicted: Option<&'a Candidate>,
    /// Generation indices of the population just before the eviction.
    pub gens_before_eviction: Vec<usize>,
    /// Population codes when the parent was chosen.
    pub parent_pool: Option<Vec<ArchCode>>,
}

pub type Observer<'a> = dyn FnMut(&StepEvent<'_>) + Send + 'a;

/// One telemetry row per evaluated candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct TelemetryRow {
    pub index: usize,
    pub code: String,
    pub status: Status,
    pub loss: f64,
    pub recon_error: f64,
    pub perceptual: f64,
    pub op_fraction: f64,
    pub gen: usize,
    pub hamming_to_best: u32,
    pub running_best: f64,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: Candidate,
    pub history: Vec<Candidate>,
}

impl SearchResult {
    fn from_history(history: Vec<Candidate>) -> Result<Self> {
        let best = best_of(&history)
            .cloned()
            .ok_or_else(|| Error::Precondition("every candidate failed".into()))?;
        Ok(Self { best, history })
    }

    pub fn telemetry(&self) -> Vec<TelemetryRow> {
        let mut running = f64::INFINITY;
        self.history
            .iter()
            .map(|c| {
                if c.status == Status::Trained {
                    running = running.min(c.loss);
                }
                let r = c.report;
                TelemetryRow {
                    index: c.index,
                    code: c.code.to_string(),
                    status: c.status,
                    loss: c.loss,
                    recon_error: r.map_or(f64::NAN, |r| r.recon_error),
                    perceptual: r.map_or(f64::NAN, |r| r.perceptual),
                    op_fraction: c.code.op_fraction(),
                    gen: c.gen,
                    hamming_to_best: c.code.hamming(self.best.code),
                    running_best: running,
                }
            })
            .collect()
    }

    pub fn write_telemetry(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record([
            "index",
            "code",
            "status",
            "loss",
            "recon_error",
            "perceptual",
            "op_fraction",
            "gen",
            "hamming_to_best",
            "running_best",
        ])
        .map_err(csv_error)?;
        for row in self.telemetry() {
            w.write_record([
                row.index.to_string(),
                row.code,
                row.status.to_string(),
                row.loss.to_string(),
                row.recon_error.to_string(),
                row.perceptual.to_string(),
                row.op_fraction.to_string(),
                row.gen.to_string(),
                row.hamming_to_best.to_string(),
                row.running_best.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("csv: {other:?}")),
    }
}

fn search_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Evaluates `codes` with up to `workers` threads; results keep input order.
fn evaluate_all(evaluator: &dyn Evaluator, codes: &[ArchCode], workers: usize) -> Vec<Outcome> {
    if workers <= 1 || codes.len() <= 1 {
        return codes.iter().map(|&c| evaluator.evaluate(c)).collect();
    }
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<Outcome>>> = codes.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(codes.len()) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= codes.len() {
                    break;
                }
                let out = evaluator.evaluate(codes[i]);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("evaluated"))
        .collect()
}

/// Uniform i.i.d. codes from `space`, scored by `evaluator`. The draws use
/// the same generator as [`search`], so the first `population` codes of both
/// coincide for equal seeds.
pub fn random_search(config: &SearchConfig, space: &SearchSpace, evaluator: &dyn Evaluator) -> Result<SearchResult> {
    if config.budget == 0 {
        return Err(Error::Config("budget must be >= 1".into()));
    }
    let mut rng = search_rng(config.seed);
    let codes: Vec<ArchCode> = (0..config.budget).map(|_| space.sample(&mut rng)).collect();
    let outcomes = evaluate_all(evaluator, &codes, config.workers);
    let history = codes
        .iter()
        .zip(&outcomes)
        .enumerate()
        .map(|(i, (&c, o))| Candidate::from_outcome(c, 0, i, o))
        .collect();
    SearchResult::from_history(history)
}

/// Aging evolution. Seeds `population` random codes, then repeatedly picks a
/// tournament winner, mutates it, evaluates the child, inserts it and evicts
/// the oldest member until the history holds `budget` candidates.
pub fn search(
    config: &SearchConfig,
    space: &SearchSpace,
    evaluator: &dyn Evaluator,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<SearchResult> {
    config.validate()?;
    let mut rng = search_rng(config.seed);
    let mut state = SearchState::default();
    let seeds: Vec<ArchCode> = (0..config.population).map(|_| space.sample(&mut rng)).collect();
    let outcomes = evaluate_all(evaluator, &seeds, config.workers);
    for (&code, outcome) in seeds.iter().zip(&outcomes) {
        let c = Candidate::from_outcome(code, 0, state.history.len(), outcome);
        state.insert(c.clone());
        if let Some(obs) = observer.as_deref_mut() {
            obs(&StepEvent {
                state: &state,
                inserted: &c,
                evicted: None,
                gens_before_eviction: Vec::new(),
                parent_pool: None,
            });
        }
    }
    if config.strict {
        strict_rounds(config, space, evaluator, &mut rng, &mut state, observer)?;
    } else if config.workers <= 1 {
        let mut seen: HashSet<ArchCode> = state.history.iter().map(|c| c.code).collect();
        while state.history.len() < config.budget {
            state.gen += 1;
            let pool: Vec<ArchCode> = state.population.iter().map(|c| c.code).collect();
            let parent = tournament_select(&state.population, config.tournament_size, &mut rng)?.code;
            let child = mutate(parent, &seen, space, &mut rng);
            seen.insert(child);
            let outcome = evaluator.evaluate(child);
            let c = Candidate::from_outcome(child, state.gen, state.history.len(), &outcome);
            steady_insert(&mut state, c, Some(pool), observer.as_deref_mut());
        }
    } else {
        free_running_parallel(config, space, evaluator, rng, &mut state, observer)?;
    }
    SearchResult::from_history(state.history)
}

fn steady_insert(state: &mut SearchState, c: Candidate, pool: Option<Vec<ArchCode>>, observer: Option<&mut Observer<'_>>) {
    state.insert(c.clone());
    let gens_before_eviction = state.population.iter().map(|p| p.gen).collect();
    let evicted = state.evict_oldest();
    if let Some(obs) = observer {
        obs(&StepEvent {
            state,
            inserted: &c,
            evicted: Some(&evicted),
            gens_before_eviction,
            parent_pool: pool,
        });
    }
}

fn strict_rounds(
    config: &SearchConfig,
    space: &SearchSpace,
    evaluator: &dyn Evaluator,
    rng: &mut ChaCha8Rng,
    state: &mut SearchState,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<()> {
    let mut seen: HashSet<ArchCode> = state.history.iter().map(|c| c.code).collect();
    while state.history.len() < config.budget {
        state.gen += 1;
        let snapshot = state.population.clone();
        let pool: Vec<ArchCode> = snapshot.iter().map(|c| c.code).collect();
        let n = config.population.min(config.budget - state.history.len());
        let mut children = Vec::with_capacity(n);
        for _ in 0..n {
            let parent = tournament_select(&snapshot, config.tournament_size, rng)?.code;
            let child = mutate(parent, &seen, space, rng);
            seen.insert(child);
            children.push(child);
        }
        let outcomes = evaluate_all(evaluator, &children, config.workers);
        for (&child, outcome) in children.iter().zip(&outcomes) {
            let c = Candidate::from_outcome(child, state.gen, state.history.len(), outcome);
            steady_insert(state, c, Some(pool.clone()), observer.as_deref_mut());
        }
    }
    Ok(())
}

struct Shared<'o, 'a> {
    state: &'a mut SearchState,
    rng: ChaCha8Rng,
    seen: HashSet<ArchCode>,
    launched: usize,
    observer: Option<&'a mut Observer<'o>>,
}

fn free_running_parallel(
    config: &SearchConfig,
    space: &SearchSpace,
    evaluator: &dyn Evaluator,
    rng: ChaCha8Rng,
    state: &mut SearchState,
    observer: Option<&mut Observer<'_>>,
) -> Result<()> {
    let seen = state.history.iter().map(|c| c.code).collect();
    let launched = state.history.len();
    let shared = Mutex::new(Shared {
        state,
        rng,
        seen,
        launched,
        observer,
    });
    std::thread::scope(|s| {
        for _ in 0..config.workers {
            s.spawn(|| loop {
                let (child, gen, pool) = {
                    let mut g = shared.lock().expect("search lock");
                    if g.launched >= config.budget {
                        break;
                    }
                    g.launched += 1;
                    g.state.gen += 1;
                    let gen = g.state.gen;
                    let Shared { state, rng, seen, .. } = &mut *g;
                    let pool: Vec<ArchCode> = state.population.iter().map(|c| c.code).collect();
                    let parent = tournament_select(&state.population, config.tournament_size, rng)
                        .expect("population stays at full size")
                        .code;
                    let child = mutate(parent, seen, space, rng);
                    seen.insert(child);
                    (child, gen, pool)
                };
                let outcome = evaluator.evaluate(child);
                let mut g = shared.lock().expect("search lock");
                let Shared { state, observer, .. } = &mut *g;
                let c = Candidate::from_outcome(child, gen, state.history.len(), &outcome);
                steady_insert(state, c, Some(pool), observer.as_deref_mut());
            });
        }
    });
    Ok(())
}

/// Reads search keys plus `train.*` / `desk.*` / `oracle.*` keys.
pub fn configs_from_kv(kv: &KeyValues) -> Result<(SearchConfig, DeskConfig)> {
    let mut known: Vec<&str> = SearchConfig::KEYS.to_vec();
    known.extend(DeskConfig::KEYS);
    kv.reject_unknown(&known)?;
    Ok((SearchConfig::from_kv(kv)?, DeskConfig::from_kv(kv)?))
}

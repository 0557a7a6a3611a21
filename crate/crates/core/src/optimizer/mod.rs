//! Bucket-constrained architecture search: LA-MCTS partitions the evaluated
//! samples into regions, and Bayesian optimization picks the next encoding
//! inside the most promising region.
//!
//! Each call to [`Optimizer::propose`] is a pure function of the completed
//! history (in order), the in-flight encodings, the bucket and the seed. The
//! tree and the surrogate are rebuilt from the history on every call, so an
//! optimizer restored from a checkpoint proposes exactly what the original
//! would have.

pub mod gp;
pub mod tree;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gp::{acquisition_ei, expected_improvement, fit_surrogate, SurrogateError, SurrogateModel};
pub use tree::{build_tree, mcts_select, split_node, ucb, PathStep, SearchTreeNode, TreeError, TreeSample};

use crate::evaluators::{splitmix64, Evaluator};
use crate::latency::NetworkLatency;
use crate::sampler::{quantize_with, LatencyBucket, SobolStream};
use crate::search_space::{NetworkEncoding, SearchSpaceSpec, ENCODING_LEN};

pub const OPTIMIZER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("no constraint-satisfying candidate within {budget} draws")]
    ExhaustedRegion { budget: usize },
    #[error("objective already recorded for {0}")]
    ObjectiveAlreadySet(String),
    #[error("evaluation of {encoding} failed: {reason}")]
    Evaluation { encoding: String, reason: String },
    #[error("optimizer config: {0}")]
    Config(String),
}

/// Tunables. Every field has a default, so a config file may name only the
/// values it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Exploration constant as a fraction of the observed objective range.
    pub cp_fraction: f64,
    /// A leaf splits once it holds this many samples.
    pub min_samples: usize,
    /// Objective weight in the split clustering.
    pub lambda: f64,
    pub max_depth: usize,
    /// Sobol-quantized candidates scored by EI per proposal.
    pub pool_size: usize,
    /// Mutations of the region's best samples added to the pool.
    pub local_candidates: usize,
    /// Draws allowed per region before it is widened.
    pub rejection_budget: usize,
    /// Proposals drawn straight from the Sobol sequence before the surrogate takes over.
    pub initial_samples: usize,
    /// GP noise variance on standardized objectives.
    pub noise: f64,
    /// A region whose best EI is below this fraction of the observed
    /// objective range is treated as exhausted and widened, like an empty one.
    pub min_ei_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            cp_fraction: 0.1,
            min_samples: 20,
            lambda: 1.0,
            max_depth: 8,
            pool_size: 512,
            local_candidates: 0,
            rejection_budget: 10_000,
            initial_samples: 10,
            noise: 1e-6,
            min_ei_fraction: 1e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn from_json(text: &str) -> Result<Self, OptimizerError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| OptimizerError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), OptimizerError> {
        let bad = |m: &str| Err(OptimizerError::Config(m.into()));
        if self.min_samples < 2 {
            return bad("min_samples must be at least 2");
        }
        if self.pool_size == 0 || self.rejection_budget == 0 {
            return bad("pool_size and rejection_budget must be positive");
        }
        if !(self.cp_fraction >= 0.0 && self.lambda >= 0.0 && self.noise >= 0.0 && self.min_ei_fraction >= 0.0) {
            return bad("cp_fraction, lambda, noise and min_ei_fraction must be non-negative");
        }
        Ok(())
    }
}

/// One proposed network and, once evaluated, its objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub encoding: NetworkEncoding,
    pub estimated_latency_us: f64,
    objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
    #[serde(default)]
    pub wall_time_s: f64,
}

impl CandidateRecord {
    pub fn pending(encoding: NetworkEncoding, estimated_latency_us: f64) -> Self {
        Self {
            encoding,
            estimated_latency_us,
            objective: None,
            job_id: None,
            client_id: None,
            wall_time_s: 0.0,
        }
    }

    pub fn completed(encoding: NetworkEncoding, estimated_latency_us: f64, objective: f64) -> Self {
        Self {
            objective: Some(objective),
            ..Self::pending(encoding, estimated_latency_us)
        }
    }

    pub fn objective(&self) -> Option<f64> {
        self.objective
    }

    /// Records the objective; a second call is an error.
    pub fn set_objective(&mut self, objective: f64) -> Result<(), OptimizerError> {
        if self.objective.is_some() {
            return Err(OptimizerError::ObjectiveAlreadySet(self.encoding.to_string()));
        }
        self.objective = Some(objective);
        Ok(())
    }
}

/// Per-digit choice position scaled to `[0, 1]` and divided by the square
/// root of the number of searchable digits, so squared distances stay in
/// `[0, 1]` whatever the space. Single-choice digits map to 0.
pub fn features(space: &SearchSpaceSpec, encoding: &NetworkEncoding) -> Option<Vec<f64>> {
    let counts = space.choice_counts();
    let indices = space.to_indices(encoding).ok()?;
    Some(features_from_indices(&counts, &indices))
}

fn features_from_indices(counts: &[usize], indices: &[usize]) -> Vec<f64> {
    let active = counts.iter().filter(|&&k| k > 1).count().max(1) as f64;
    let scale = 1.0 / active.sqrt();
    indices
        .iter()
        .zip(counts)
        .map(|(&i, &k)| if k > 1 { scale * i as f64 / (k - 1) as f64 } else { 0.0 })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalKind {
    /// Sobol point; the history was too short for a surrogate.
    ColdStart,
    /// EI maximizer inside the selected region.
    Guided,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub encoding: NetworkEncoding,
    pub estimated_latency_us: f64,
    pub kind: ProposalKind,
    /// EI of the proposal (0 for cold start).
    pub ei: f64,
    /// Path constraints dropped before a region yielded a useful candidate.
    pub widened_levels: usize,
    pub leaf_depth: usize,
    /// The scored candidate pool, in scoring order.
    pub pool: Vec<NetworkEncoding>,
    pub length_scale: f64,
}

fn call_seed(seed: u64, history_len: usize, pending_len: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(history_len as u64)) ^ pending_len as u64)
}

/// Draws from a Sobol stream at a seed-chosen offset.
struct SobolDraws {
    stream: SobolStream,
    point: Vec<f64>,
}

impl SobolDraws {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let start = rng.random_range(1..(1u64 << 31));
        Self {
            stream: SobolStream::new(ENCODING_LEN, start).expect("encoding dimension is supported"),
            point: vec![0.0; ENCODING_LEN],
        }
    }

    fn next(&mut self, domains: &[Vec<u32>]) -> NetworkEncoding {
        self.stream.next_into(&mut self.point).expect("index stays below 2^32");
        quantize_with(&self.point, domains)
    }
}

pub struct Optimizer {
    pub config: OptimizerConfig,
    pub seed: u64,
    space: SearchSpaceSpec,
    domains: Vec<Vec<u32>>,
    counts: Vec<usize>,
}

impl Optimizer {
    pub fn new(space: SearchSpaceSpec, config: OptimizerConfig, seed: u64) -> Self {
        Self {
            domains: space.domains(),
            counts: space.choice_counts(),
            space,
            config,
            seed,
        }
    }

    pub fn space(&self) -> &SearchSpaceSpec {
        &self.space
    }

    pub fn snapshot(&self, history: &[CandidateRecord]) -> OptimizerSnapshot {
        OptimizerSnapshot {
            schema_version: OPTIMIZER_SCHEMA_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            history: history.to_vec(),
        }
    }

    /// Rebuilds an optimizer and its history. The next proposal equals the one
    /// the snapshotted optimizer would have made.
    pub fn restore(
        space: SearchSpaceSpec,
        snapshot: OptimizerSnapshot,
    ) -> Result<(Self, Vec<CandidateRecord>), OptimizerError> {
        if snapshot.schema_version != OPTIMIZER_SCHEMA_VERSION {
            return Err(OptimizerError::Config(format!(
                "snapshot schema {} (expected {OPTIMIZER_SCHEMA_VERSION})",
                snapshot.schema_version
            )));
        }
        snapshot.config.check()?;
        Ok((Self::new(space, snapshot.config, snapshot.seed), snapshot.history))
    }

    /// Proposes a new in-bucket encoding that is neither in `history` nor in `pending`.
    pub fn propose<L: NetworkLatency + ?Sized>(
        &self,
        history: &[CandidateRecord],
        pending: &[NetworkEncoding],
        bucket: &LatencyBucket,
        estimator: &L,
    ) -> Result<Proposal, OptimizerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(call_seed(self.seed, history.len(), pending.len()));
        let mut seen: HashSet<String> = history.iter().map(|r| r.encoding.to_string()).collect();
        seen.extend(pending.iter().map(NetworkEncoding::to_string));

        let done: Vec<(&CandidateRecord, f64)> =
            history.iter().filter_map(|r| r.objective.map(|y| (r, y))).collect();
        if done.len() < self.config.initial_samples.max(2) {
            return self.cold_start(&mut rng, &seen, bucket, estimator);
        }

        let data: Vec<TreeSample> = done
            .iter()
            .map(|(r, y)| TreeSample {
                x: self.features_of(&r.encoding),
                y: *y,
            })
            .collect();
        let ys: Vec<f64> = data.iter().map(|s| s.y).collect();
        let y_best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let cp = self.config.cp_fraction * (y_best - y_min);

        let root = build_tree(&data, self.config.min_samples, self.config.lambda, self.config.max_depth);
        let (leaf, path) = mcts_select(&root, cp);

        let xs: Vec<Vec<f64>> = data.iter().map(|s| s.x.clone()).collect();
        let model = fit_surrogate(&xs, &ys, self.config.noise)
            .map_err(|_| OptimizerError::ExhaustedRegion { budget: 0 })?;

        // Leaf samples, best first, seed the local mutations.
        let mut elites: Vec<usize> = leaf.samples.clone();
        elites.sort_by(|&a, &b| ys[b].total_cmp(&ys[a]).then(a.cmp(&b)));
        elites.truncate(5);
        let elites: Vec<&NetworkEncoding> = elites.iter().map(|&i| &done[i].0.encoding).collect();

        for dropped in 0..=path.len() {
            let constraints = &path[..path.len() - dropped];
            let pool = self.candidate_pool(&mut rng, constraints, &elites, &seen, bucket, estimator);
            if pool.is_empty() {
                if dropped < path.len() {
                    log::info!("region yielded no candidate; widening to depth {}", path.len() - dropped - 1);
                }
                continue;
            }
            let feats: Vec<Vec<f64>> = pool.iter().map(|(e, _)| self.features_of(e)).collect();
            let (means, vars) = model.predict_batch(&feats);
            let mut best = 0;
            let mut best_ei = f64::NEG_INFINITY;
            for (i, (m, v)) in means.iter().zip(&vars).enumerate() {
                let ei = expected_improvement(*m, *v, y_best);
                if ei > best_ei {
                    best_ei = ei;
                    best = i;
                }
            }
            if best_ei < self.config.min_ei_fraction * (y_best - y_min) && dropped < path.len() {
                log::debug!("region offers no improvement; widening to depth {}", path.len() - dropped - 1);
                continue;
            }
            let (encoding, latency) = pool[best].clone();
            return Ok(Proposal {
                encoding,
                estimated_latency_us: latency,
                kind: ProposalKind::Guided,
                ei: best_ei,
                widened_levels: dropped,
                leaf_depth: path.len(),
                pool: pool.into_iter().map(|(e, _)| e).collect(),
                length_scale: model.length_scale(),
            });
        }
        Err(OptimizerError::ExhaustedRegion {
            budget: self.config.rejection_budget,
        })
    }

    fn features_of(&self, encoding: &NetworkEncoding) -> Vec<f64> {
        let indices = self.space.to_indices(encoding).expect("history holds valid encodings");
        features_from_indices(&self.counts, &indices)
    }

    fn in_bucket<L: NetworkLatency + ?Sized>(
        &self,
        encoding: &NetworkEncoding,
        bucket: &LatencyBucket,
        estimator: &L,
    ) -> Option<f64> {
        match estimator.latency_us(encoding) {
            Ok(us) if bucket.contains_us(us) => Some(us),
            Ok(_) => None,
            Err(e) => {
                log::warn!("latency estimate failed for {encoding}: {e}");
                None
            }
        }
    }

    fn cold_start<L: NetworkLatency + ?Sized>(
        &self,
        rng: &mut ChaCha8Rng,
        seen: &HashSet<String>,
        bucket: &LatencyBucket,
        estimator: &L,
    ) -> Result<Proposal, OptimizerError> {
        let mut draws = SobolDraws::new(rng);
        for _ in 0..self.config.rejection_budget {
            let e = draws.next(&self.domains);
            if seen.contains(&e.to_string()) {
                continue;
            }
            if let Some(us) = self.in_bucket(&e, bucket, estimator) {
                return Ok(Proposal {
                    encoding: e,
                    estimated_latency_us: us,
                    kind: ProposalKind::ColdStart,
                    ei: 0.0,
                    widened_levels: 0,
                    leaf_depth: 0,
                    pool: Vec::new(),
                    length_scale: 0.0,
                });
            }
        }
        Err(OptimizerError::ExhaustedRegion {
            budget: self.config.rejection_budget,
        })
    }

    /// Unique, unseen, in-region, in-bucket candidates. Cheap checks run first.
    fn candidate_pool<L: NetworkLatency + ?Sized>(
        &self,
        rng: &mut ChaCha8Rng,
        constraints: &[PathStep],
        elites: &[&NetworkEncoding],
        seen: &HashSet<String>,
        bucket: &LatencyBucket,
        estimator: &L,
    ) -> Vec<(NetworkEncoding, f64)> {
        let mut pool = Vec::new();
        let mut taken: HashSet<String> = HashSet::new();
        let mut accept = |e: NetworkEncoding, pool: &mut Vec<(NetworkEncoding, f64)>| {
            let x = self.features_of(&e);
            if !constraints.iter().all(|c| c.admits(&x)) {
                return;
            }
            let text = e.to_string();
            if seen.contains(&text) || taken.contains(&text) {
                return;
            }
            if let Some(us) = self.in_bucket(&e, bucket, estimator) {
                taken.insert(text);
                pool.push((e, us));
            }
        };

        let mut draws = SobolDraws::new(rng);
        let mut used = 0;
        while pool.len() < self.config.pool_size && used < self.config.rejection_budget {
            used += 1;
            accept(draws.next(&self.domains), &mut pool);
        }

        let searchable: Vec<usize> = (0..ENCODING_LEN).filter(|&d| self.counts[d] > 1).collect();
        if elites.is_empty() || searchable.is_empty() {
            return pool;
        }
        let target = pool.len() + self.config.local_candidates;
        let mut tries = 0;
        while pool.len() < target && tries < self.config.rejection_budget {
            tries += 1;
            let parent = elites[tries % elites.len()];
            let mut digits = parent.digits().to_vec();
            let flips = rng.random_range(1..=2);
            for _ in 0..flips {
                let d = searchable[rng.random_range(0..searchable.len())];
                let values = &self.domains[d];
                digits[d] = values[rng.random_range(0..values.len())];
            }
            accept(NetworkEncoding::new(digits), &mut pool);
        }
        pool
    }
}

/// Uniform per-digit random encoding, rejection-sampled into the bucket.
pub fn random_propose<L: NetworkLatency + ?Sized>(
    space: &SearchSpaceSpec,
    bucket: &LatencyBucket,
    estimator: &L,
    seed: u64,
    budget: usize,
) -> Result<(NetworkEncoding, f64), OptimizerError> {
    let domains = space.domains();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..budget {
        let e = NetworkEncoding::new(domains.iter().map(|v| v[rng.random_range(0..v.len())]).collect());
        if let Ok(us) = estimator.latency_us(&e) {
            if bucket.contains_us(us) {
                return Ok((e, us));
            }
        }
    }
    Err(OptimizerError::ExhaustedRegion { budget })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Guided,
    Random,
}

/// Runs `budget` sequential propose/evaluate rounds and returns the history.
pub fn run_search<L: NetworkLatency + ?Sized>(
    optimizer: &Optimizer,
    strategy: Strategy,
    evaluator: &dyn Evaluator,
    bucket: &LatencyBucket,
    estimator: &L,
    budget: usize,
) -> Result<Vec<CandidateRecord>, OptimizerError> {
    let mut history: Vec<CandidateRecord> = Vec::with_capacity(budget);
    for step in 0..budget {
        let (encoding, us) = match strategy {
            Strategy::Guided => {
                let p = optimizer.propose(&history, &[], bucket, estimator)?;
                (p.encoding, p.estimated_latency_us)
            }
            Strategy::Random => random_propose(
                optimizer.space(),
                bucket,
                estimator,
                call_seed(optimizer.seed, step, 0),
                optimizer.config.rejection_budget,
            )?,
        };
        let y = evaluator.evaluate(&encoding).map_err(|e| OptimizerError::Evaluation {
            encoding: encoding.to_string(),
            reason: e.to_string(),
        })?;
        history.push(CandidateRecord::completed(encoding, us, y));
    }
    Ok(history)
}

/// Running maximum of the objective over a history.
pub fn best_so_far(history: &[CandidateRecord]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    history
        .iter()
        .map(|r| {
            if let Some(y) = r.objective {
                best = best.max(y);
            }
            best
        })
        .collect()
}

/// Checkpointable optimizer state. The tree and surrogate are functions of
/// the history and are rebuilt on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub schema_version: u32,
    pub seed: u64,
    pub config: OptimizerConfig,
    pub history: Vec<CandidateRecord>,
}

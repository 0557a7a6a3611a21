//! The server's job table as a pure state machine.
//!
//! [`ServerState::handle`] maps one command to a reply plus the durable
//! effects that must be persisted before the reply leaves the server. It
//! never touches the network or the disk, so any recorded command trace can be
//! replayed to rebuild the exact same state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::protocol::{EvalConfig, WireMessage, PROTOCOL_VERSION};
use super::CoordinatorConfig;
use crate::latency::NetworkLatency;
use crate::optimizer::{CandidateRecord, Optimizer, OptimizerError, Proposal};
use crate::sampler::LatencyBucket;
use crate::search_space::{NetworkEncoding, SearchSpaceSpec};

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Proposed,
    Assigned,
    Running,
    Done,
    Failed,
    TimedOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub encoding: NetworkEncoding,
    pub estimated_latency_us: f64,
    pub state: JobState,
    pub assigned_client: Option<String>,
    pub assigned_at: Option<f64>,
    pub deadline: Option<f64>,
    pub objective: Option<f64>,
    pub attempts: u32,
    /// Set once the attempt limit is reached; the job is never reassigned.
    pub permanent: bool,
    pub last_error: Option<String>,
}

impl Job {
    fn is_active(&self) -> bool {
        matches!(self.state, JobState::Proposed | JobState::Assigned | JobState::Running)
            || (matches!(self.state, JobState::Failed | JobState::TimedOut) && !self.permanent)
    }

    fn is_assignable(&self) -> bool {
        match self.state {
            JobState::Proposed => true,
            JobState::Failed | JobState::TimedOut => !self.permanent,
            _ => false,
        }
    }
}

pub fn job_id(n: u64) -> String {
    format!("job-{n:06}")
}

fn job_number(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

/// Input to the state machine.
#[derive(Clone, Debug, PartialEq)]
pub struct Command {
    /// Identity the connection announced in HELLO, if any.
    pub client_id: Option<String>,
    pub message: Option<WireMessage>,
    /// Server clock in seconds.
    pub now: f64,
}

impl Command {
    pub fn message(client_id: Option<&str>, message: WireMessage, now: f64) -> Self {
        Self {
            client_id: client_id.map(str::to_string),
            message: Some(message),
            now,
        }
    }

    pub fn tick(now: f64) -> Self {
        Self {
            client_id: None,
            message: None,
            now,
        }
    }
}

/// Durable side effects, persisted in order before the reply is sent.
#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    AppendResult(CandidateRecord),
    /// A job hit the attempt limit; its encoding is kept for manual retry.
    RecordFailure(Job),
    Snapshot,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub reply: Option<WireMessage>,
    pub effects: Vec<Effect>,
    /// Close the connection after sending the reply.
    pub close: bool,
}

impl Outcome {
    fn reply(message: WireMessage) -> Self {
        Self {
            reply: Some(message),
            ..Self::default()
        }
    }
}

/// Serializable server state; results live in the log, not here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerSnapshot {
    pub schema_version: u32,
    pub seq: u64,
    pub config: CoordinatorConfig,
    pub space: SearchSpaceSpec,
    pub jobs: Vec<Job>,
    pub next_job: u64,
    /// Number of results-log records this snapshot already reflects.
    pub results_recorded: usize,
}

pub struct ServerState {
    config: CoordinatorConfig,
    optimizer: Optimizer,
    bucket: LatencyBucket,
    jobs: BTreeMap<String, Job>,
    history: Vec<CandidateRecord>,
    next_job: u64,
    seq: u64,
}

impl ServerState {
    pub fn new(config: CoordinatorConfig, space: SearchSpaceSpec) -> Self {
        Self {
            optimizer: Optimizer::new(space, config.optimizer.clone(), config.seed),
            bucket: config.bucket(),
            config,
            jobs: BTreeMap::new(),
            history: Vec::new(),
            next_job: 1,
            seq: 0,
        }
    }

    /// Rebuilds state from the latest readable snapshot (if any) and the full
    /// results log. The log is authoritative for completed work; jobs that were
    /// in flight are demoted to PROPOSED so they will be handed out again.
    /// Settings come from the snapshot except the budget, which may be raised.
    pub fn restore(
        config: CoordinatorConfig,
        space: SearchSpaceSpec,
        snapshot: Option<ServerSnapshot>,
        results: Vec<CandidateRecord>,
    ) -> Self {
        let mut state = match snapshot {
            Some(s) => {
                let mut st = Self::new(CoordinatorConfig { budget: config.budget, ..s.config }, s.space);
                st.jobs = s.jobs.into_iter().map(|j| (j.job_id.clone(), j)).collect();
                st.next_job = s.next_job;
                st.seq = s.seq;
                st
            }
            None => Self::new(config, space),
        };
        let logged: BTreeMap<&str, &CandidateRecord> =
            results.iter().filter_map(|r| r.job_id.as_deref().map(|id| (id, r))).collect();
        for job in state.jobs.values_mut() {
            if job.state == JobState::Done && !logged.contains_key(job.job_id.as_str()) {
                log::warn!("{} is DONE in the snapshot but missing from the log; re-queued", job.job_id);
                job.state = JobState::Proposed;
                job.objective = None;
            }
        }
        for r in &results {
            let Some(id) = r.job_id.clone() else { continue };
            if let Some(n) = job_number(&id) {
                state.next_job = state.next_job.max(n + 1);
            }
            let job = state.jobs.entry(id.clone()).or_insert_with(|| Job {
                job_id: id,
                encoding: r.encoding.clone(),
                estimated_latency_us: r.estimated_latency_us,
                state: JobState::Done,
                assigned_client: r.client_id.clone(),
                assigned_at: None,
                deadline: None,
                objective: None,
                attempts: 1,
                permanent: false,
                last_error: None,
            });
            job.state = JobState::Done;
            job.objective = r.objective();
            job.deadline = None;
        }
        for job in state.jobs.values_mut() {
            if matches!(job.state, JobState::Assigned | JobState::Running) {
                job.state = JobState::Proposed;
                job.assigned_client = None;
                job.assigned_at = None;
                job.deadline = None;
            }
        }
        state.history = results;
        state
    }

    pub fn snapshot(&self) -> ServerSnapshot {
        ServerSnapshot {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            seq: self.seq,
            config: self.config.clone(),
            space: self.optimizer.space().clone(),
            jobs: self.jobs.values().cloned().collect(),
            next_job: self.next_job,
            results_recorded: self.history.len(),
        }
    }

    /// Advances the snapshot sequence number; called when a snapshot is written.
    pub fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn history(&self) -> &[CandidateRecord] {
        &self.history
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    pub fn job(&self, id: &str) -> Option<&Job> {
        self.jobs.get(id)
    }

    pub fn done_count(&self) -> usize {
        self.history.len()
    }

    pub fn active_count(&self) -> usize {
        self.jobs.values().filter(|j| j.is_active()).count()
    }

    /// Budget reached and nothing left in flight.
    pub fn is_complete(&self) -> bool {
        self.done_count() >= self.config.budget && self.active_count() == 0
    }

    fn pending_encodings(&self) -> Vec<NetworkEncoding> {
        self.jobs
            .values()
            .filter(|j| j.state != JobState::Done)
            .map(|j| j.encoding.clone())
            .collect()
    }

    /// The proposal the next new job would receive, without changing state.
    pub fn peek_proposal<L: NetworkLatency + ?Sized>(&self, estimator: &L) -> Result<Proposal, OptimizerError> {
        self.optimizer
            .propose(&self.history, &self.pending_encodings(), &self.bucket, estimator)
    }

    pub fn handle<L: NetworkLatency + ?Sized>(&mut self, cmd: Command, estimator: &L) -> Outcome {
        let now = cmd.now;
        let Some(message) = cmd.message else {
            return self.tick(now);
        };
        let sender = cmd.client_id;
        match message {
            WireMessage::Hello {
                client_id,
                protocol_version,
            } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Outcome {
                        reply: Some(WireMessage::Error {
                            message: format!(
                                "protocol version {protocol_version} not supported; server speaks {PROTOCOL_VERSION}"
                            ),
                        }),
                        effects: Vec::new(),
                        close: true,
                    };
                }
                Outcome::reply(WireMessage::Welcome {
                    client_id,
                    protocol_version,
                })
            }
            WireMessage::RequestWork { client_id } => self.request_work(client_id, now, estimator),
            WireMessage::Heartbeat { job_id, .. } => self.heartbeat(job_id, now),
            WireMessage::Result {
                job_id,
                encoding,
                objective,
                failed,
                error,
                ..
            } => self.result(sender, job_id, encoding, objective, failed, error, now),
            other => Outcome {
                reply: Some(WireMessage::Error {
                    message: format!("unexpected message from client: {other:?}"),
                }),
                effects: Vec::new(),
                close: true,
            },
        }
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            epochs: self.config.epochs,
            heartbeat_interval_s: self.config.heartbeat_interval_s,
        }
    }

    fn deadline(&self, now: f64) -> f64 {
        now + self.config.heartbeat_interval_s * self.config.missed_beats as f64
    }

    fn request_work<L: NetworkLatency + ?Sized>(&mut self, client: String, now: f64, estimator: &L) -> Outcome {
        let retry_after_s = self.config.retry_after_s;
        let no_work = || Outcome::reply(WireMessage::NoWork { retry_after_s });
        if self.done_count() >= self.config.budget {
            return if self.active_count() == 0 {
                Outcome::reply(WireMessage::Shutdown {})
            } else {
                no_work()
            };
        }
        let mut effects = Vec::new();
        let queued = self.jobs.values().find(|j| j.is_assignable()).map(|j| j.job_id.clone());
        let id = match queued {
            Some(id) => id,
            None => {
                if self.done_count() + self.active_count() >= self.config.budget {
                    return no_work();
                }
                let proposal = match self.peek_proposal(estimator) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("optimizer could not propose: {e}");
                        return no_work();
                    }
                };
                let id = job_id(self.next_job);
                self.next_job += 1;
                self.jobs.insert(
                    id.clone(),
                    Job {
                        job_id: id.clone(),
                        encoding: proposal.encoding,
                        estimated_latency_us: proposal.estimated_latency_us,
                        state: JobState::Proposed,
                        assigned_client: None,
                        assigned_at: None,
                        deadline: None,
                        objective: None,
                        attempts: 0,
                        permanent: false,
                        last_error: None,
                    },
                );
                // The new job must be durable before anyone can work on it.
                effects.push(Effect::Snapshot);
                id
            }
        };
        let deadline = self.deadline(now);
        let eval_config = self.eval_config();
        let job = self.jobs.get_mut(&id).expect("job was just selected");
        job.state = JobState::Assigned;
        job.assigned_client = Some(client);
        job.assigned_at = Some(now);
        job.deadline = Some(deadline);
        job.attempts += 1;
        Outcome {
            reply: Some(WireMessage::Proposal {
                job_id: id,
                encoding: job.encoding.clone(),
                eval_config,
            }),
            effects,
            close: false,
        }
    }

    fn heartbeat(&mut self, job_id: String, now: f64) -> Outcome {
        let deadline = self.deadline(now);
        match self.jobs.get_mut(&job_id) {
            Some(job) if matches!(job.state, JobState::Assigned | JobState::Running) => {
                job.state = JobState::Running;
                job.deadline = Some(deadline);
                Outcome::reply(WireMessage::Ack { job_id, warning: None })
            }
            Some(job) => {
                let warning = Some(format!("job is {:?}", job.state));
                Outcome::reply(WireMessage::Ack { job_id, warning })
            }
            None => Outcome::reply(WireMessage::Ack {
                job_id,
                warning: Some("unknown job".into()),
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn result(
        &mut self,
        sender: Option<String>,
        job_id: String,
        encoding: NetworkEncoding,
        objective: Option<f64>,
        failed: bool,
        error: Option<String>,
        now: f64,
    ) -> Outcome {
        let ack = |warning: Option<String>| WireMessage::Ack {
            job_id: job_id.clone(),
            warning,
        };
        let attempt_limit = self.config.attempt_limit;
        let snapshot_every = self.config.snapshot_every.max(1);
        let Some(job) = self.jobs.get_mut(&job_id) else {
            return Outcome::reply(ack(Some("unknown job; result discarded".into())));
        };
        if job.encoding != encoding {
            return Outcome::reply(ack(Some("encoding does not match the job; result discarded".into())));
        }
        if job.state == JobState::Done {
            return Outcome::reply(ack(Some("duplicate result; already recorded".into())));
        }
        let objective = objective.filter(|y| y.is_finite());
        if failed || objective.is_none() {
            let held_by_other = matches!(job.state, JobState::Assigned | JobState::Running)
                && job.assigned_client.is_some()
                && job.assigned_client != sender;
            if held_by_other {
                return Outcome::reply(ack(Some("stale failure report; job was reassigned".into())));
            }
            job.state = JobState::Failed;
            job.deadline = None;
            job.last_error = Some(error.unwrap_or_else(|| "missing objective".into()));
            let mut effects = Vec::new();
            if job.attempts >= attempt_limit {
                job.permanent = true;
                effects.push(Effect::RecordFailure(job.clone()));
                effects.push(Effect::Snapshot);
            }
            return Outcome {
                reply: Some(ack(None)),
                effects,
                close: false,
            };
        }
        let y = objective.expect("checked above");
        // Late results from a timed-out or reassigned attempt are still valid.
        job.state = JobState::Done;
        job.objective = Some(y);
        job.deadline = None;
        let mut record = CandidateRecord::completed(encoding, job.estimated_latency_us, y);
        record.job_id = Some(job_id.clone());
        record.client_id = sender;
        record.wall_time_s = job.assigned_at.map_or(0.0, |t| (now - t).max(0.0));
        self.history.push(record.clone());
        let mut effects = vec![Effect::AppendResult(record)];
        if self.history.len() % snapshot_every == 0 {
            effects.push(Effect::Snapshot);
        }
        Outcome {
            reply: Some(ack(None)),
            effects,
            close: false,
        }
    }

    fn tick(&mut self, now: f64) -> Outcome {
        let mut effects = Vec::new();
        for job in self.jobs.values_mut() {
            let expired = matches!(job.state, JobState::Assigned | JobState::Running)
                && job.deadline.is_some_and(|d| now > d);
            if !expired {
                continue;
            }
            log::info!("{} missed its heartbeat deadline", job.job_id);
            job.state = JobState::TimedOut;
            job.deadline = None;
            if job.attempts >= self.config.attempt_limit {
                job.permanent = true;
                effects.push(Effect::RecordFailure(job.clone()));
            }
        }
        if !effects.is_empty() {
            effects.push(Effect::Snapshot);
        }
        Outcome {
            reply: None,
            effects,
            close: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::LatencyEstimator;

    fn setup(budget: usize) -> (ServerState, LatencyEstimator) {
        let space = SearchSpaceSpec::table1();
        let cfg = CoordinatorConfig {
            budget,
            ..CoordinatorConfig::default()
        };
        (ServerState::new(cfg, space.clone()), LatencyEstimator::analytic(space))
    }

    fn request(state: &mut ServerState, est: &LatencyEstimator, client: &str, now: f64) -> Outcome {
        state.handle(
            Command::message(Some(client), WireMessage::RequestWork { client_id: client.into() }, now),
            est,
        )
    }

    fn result_for(job_id: &str, encoding: NetworkEncoding, y: f64) -> WireMessage {
        WireMessage::Result {
            job_id: job_id.into(),
            encoding,
            objective: Some(y),
            epochs_completed: 1,
            failed: false,
            error: None,
        }
    }

    fn take_proposal(o: &Outcome) -> (String, NetworkEncoding) {
        match &o.reply {
            Some(WireMessage::Proposal { job_id, encoding, .. }) => (job_id.clone(), encoding.clone()),
            other => panic!("expected a proposal, got {other:?}"),
        }
    }

    #[test]
    fn hello_version_mismatch_closes() {
        let (mut s, est) = setup(1);
        let o = s.handle(
            Command::message(None, WireMessage::Hello { client_id: "a".into(), protocol_version: 99 }, 0.0),
            &est,
        );
        assert!(o.close);
        assert!(matches!(o.reply, Some(WireMessage::Error { .. })));
    }

    #[test]
    fn unknown_and_duplicate_results_are_acked_without_change() {
        let (mut s, est) = setup(2);
        let o = s.handle(
            Command::message(Some("a"), result_for("job-999999", NetworkEncoding::new(vec![0; 41]), 0.5), 0.0),
            &est,
        );
        assert!(matches!(o.reply, Some(WireMessage::Ack { warning: Some(_), .. })));
        assert!(o.effects.is_empty());

        let (id, e) = take_proposal(&request(&mut s, &est, "a", 0.0));
        let first = s.handle(Command::message(Some("a"), result_for(&id, e.clone(), 0.7), 1.0), &est);
        assert_eq!(first.effects.len(), 1);
        let before = s.snapshot();
        let dup = s.handle(Command::message(Some("a"), result_for(&id, e, 0.1), 2.0), &est);
        assert!(dup.effects.is_empty());
        assert!(matches!(dup.reply, Some(WireMessage::Ack { warning: Some(_), .. })));
        assert_eq!(s.snapshot(), before);
        assert_eq!(s.history().len(), 1);
        assert_eq!(s.history()[0].objective(), Some(0.7));
    }

    #[test]
    fn budget_exhaustion_gives_no_work_then_shutdown() {
        let (mut s, est) = setup(1);
        let (id, e) = take_proposal(&request(&mut s, &est, "a", 0.0));
        assert!(matches!(request(&mut s, &est, "b", 0.0).reply, Some(WireMessage::NoWork { .. })));
        s.handle(Command::message(Some("a"), result_for(&id, e, 0.5), 1.0), &est);
        assert!(matches!(request(&mut s, &est, "b", 2.0).reply, Some(WireMessage::Shutdown {})));
        assert!(s.is_complete());
    }

    #[test]
    fn timeout_reassigns_and_attempt_limit_is_permanent() {
        let (mut s, est) = setup(1);
        let interval = s.config().heartbeat_interval_s * s.config().missed_beats as f64;
        let (id, _) = take_proposal(&request(&mut s, &est, "a", 0.0));
        let mut now = 0.0;
        for attempt in 1..=3 {
            assert_eq!(s.job(&id).unwrap().attempts, attempt);
            now += interval + 1.0;
            s.handle(Command::tick(now), &est);
            if attempt < 3 {
                assert_eq!(s.job(&id).unwrap().state, JobState::TimedOut);
                let (again, _) = take_proposal(&request(&mut s, &est, "b", now));
                assert_eq!(again, id);
            }
        }
        let job = s.job(&id).unwrap();
        assert!(job.permanent);
        // The failed job no longer counts against the budget.
        let (next, _) = take_proposal(&request(&mut s, &est, "c", now));
        assert_ne!(next, id);
    }

    #[test]
    fn heartbeats_extend_the_deadline() {
        let (mut s, est) = setup(1);
        let interval = s.config().heartbeat_interval_s;
        let (id, _) = take_proposal(&request(&mut s, &est, "a", 0.0));
        for k in 1..10 {
            let now = k as f64 * interval;
            s.handle(
                Command::message(Some("a"), WireMessage::Heartbeat { job_id: id.clone(), epoch: k, current_metric: None }, now),
                &est,
            );
            s.handle(Command::tick(now + 0.5), &est);
            assert_eq!(s.job(&id).unwrap().state, JobState::Running);
        }
    }

    #[test]
    fn late_result_after_timeout_is_recorded_once() {
        let (mut s, est) = setup(1);
        let (id, e) = take_proposal(&request(&mut s, &est, "a", 0.0));
        s.handle(Command::tick(1e6), &est);
        take_proposal(&request(&mut s, &est, "b", 1e6));
        s.handle(Command::message(Some("a"), result_for(&id, e.clone(), 0.4), 1e6 + 1.0), &est);
        s.handle(Command::message(Some("b"), result_for(&id, e, 0.4), 1e6 + 2.0), &est);
        assert_eq!(s.history().len(), 1);
        assert!(s.is_complete());
    }

    #[test]
    fn restore_demotes_in_flight_jobs() {
        let (mut s, est) = setup(5);
        let (id1, e1) = take_proposal(&request(&mut s, &est, "a", 0.0));
        let (id2, _) = take_proposal(&request(&mut s, &est, "b", 0.0));
        s.handle(Command::message(Some("a"), result_for(&id1, e1, 0.5), 1.0), &est);
        let snap = s.snapshot();
        let r = ServerState::restore(s.config().clone(), SearchSpaceSpec::table1(), Some(snap), s.history().to_vec());
        assert_eq!(r.job(&id2).unwrap().state, JobState::Proposed);
        assert_eq!(r.history(), s.history());
        assert_eq!(r.peek_proposal(&est).unwrap(), s.peek_proposal(&est).unwrap());
    }
}

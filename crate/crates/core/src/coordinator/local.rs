//! Socket-free driver: virtual clients take turns against the state machine.
//!
//! Every command is issued in a fixed order and the clock is a step counter,
//! so a run is a pure function of its configuration and seed.

use super::checkpoint::CheckpointStore;
use super::protocol::WireMessage;
use super::state::{Command, ServerState};
use super::CoordinatorError;
use crate::evaluators::Evaluator;
use crate::latency::NetworkLatency;
use crate::search_space::NetworkEncoding;

struct Assignment {
    job_id: String,
    encoding: NetworkEncoding,
}

/// Runs `clients` virtual clients until the server shuts them all down.
///
/// Each round, every idle client requests work, then every busy client
/// reports its result in client order. Effects go to `store` when given.
pub fn run_lockstep<L: NetworkLatency + ?Sized>(
    state: &mut ServerState,
    estimator: &L,
    evaluator: &dyn Evaluator,
    clients: usize,
    mut store: Option<&mut CheckpointStore>,
) -> Result<(), CoordinatorError> {
    let clients = clients.max(1);
    let names: Vec<String> = (1..=clients).map(|i| format!("local-{i}")).collect();
    let mut held: Vec<Option<Assignment>> = (0..clients).map(|_| None).collect();
    let mut finished = vec![false; clients];
    let mut clock = 0.0;

    let mut send = |state: &mut ServerState, client: &str, msg: WireMessage| -> Result<Option<WireMessage>, CoordinatorError> {
        clock += 1.0;
        let outcome = state.handle(Command::message(Some(client), msg, clock), estimator);
        if let Some(store) = store.as_deref_mut() {
            store.apply(state, &outcome.effects)?;
        }
        Ok(outcome.reply)
    };

    while finished.iter().any(|f| !f) {
        let mut progressed = false;
        for c in 0..clients {
            if finished[c] || held[c].is_some() {
                continue;
            }
            let reply = send(state, &names[c], WireMessage::RequestWork { client_id: names[c].clone() })?;
            match reply {
                Some(WireMessage::Proposal { job_id, encoding, .. }) => {
                    held[c] = Some(Assignment { job_id, encoding });
                    progressed = true;
                }
                Some(WireMessage::Shutdown {}) => {
                    finished[c] = true;
                    progressed = true;
                }
                Some(WireMessage::NoWork { .. }) => {}
                other => return Err(CoordinatorError::Refused(format!("unexpected reply {other:?}"))),
            }
        }
        for c in 0..clients {
            let Some(a) = held[c].take() else { continue };
            let msg = match evaluator.evaluate(&a.encoding) {
                Ok(y) => WireMessage::Result {
                    job_id: a.job_id,
                    encoding: a.encoding,
                    objective: Some(y),
                    epochs_completed: 0,
                    failed: false,
                    error: None,
                },
                Err(e) => WireMessage::Result {
                    job_id: a.job_id,
                    encoding: a.encoding,
                    objective: None,
                    epochs_completed: 0,
                    failed: true,
                    error: Some(e.to_string()),
                },
            };
            send(state, &names[c], msg)?;
            progressed = true;
        }
        if !progressed {
            return Err(CoordinatorError::Refused(
                "no client made progress; the optimizer cannot fill the bucket".into(),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::CoordinatorConfig;
    use crate::evaluators::StructuredSurrogate;
    use crate::latency::LatencyEstimator;
    use crate::search_space::SearchSpaceSpec;

    fn run(clients: usize) -> Vec<(String, f64)> {
        let space = SearchSpaceSpec::table1();
        let cfg = CoordinatorConfig { budget: 15, seed: 3, ..CoordinatorConfig::default() };
        let mut state = ServerState::new(cfg, space.clone());
        let est = LatencyEstimator::analytic(space.clone());
        run_lockstep(&mut state, &est, &StructuredSurrogate::new(space), clients, None).unwrap();
        assert!(state.is_complete());
        state
            .history()
            .iter()
            .map(|r| (r.job_id.clone().unwrap(), r.objective().unwrap()))
            .collect()
    }

    #[test]
    fn budget_is_met_exactly_and_runs_repeat() {
        for clients in [1, 3] {
            let a = run(clients);
            assert_eq!(a.len(), 15);
            let mut ids: Vec<_> = a.iter().map(|(id, _)| id.clone()).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 15);
            assert_eq!(a, run(clients));
        }
    }
}

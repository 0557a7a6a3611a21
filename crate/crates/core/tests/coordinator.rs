use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::thread;
use std::time::Duration;

use latnas::coordinator::checkpoint::{read_results, CheckpointStore, RESULTS_LOG};
use latnas::coordinator::{
    run_client, run_lockstep, serve, ClientConfig, ClientFault, ClientReport, Command, CoordinatorConfig,
    CoordinatorError, FaultPlan, KillPoint, ServerOptions, ServerState, WireMessage,
};
use latnas::evaluators::{Evaluator, StructuredSurrogate};
use latnas::latency::LatencyEstimator;
use latnas::search_space::{NetworkEncoding, SearchSpaceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn space() -> SearchSpaceSpec {
    SearchSpaceSpec::table1()
}

fn config(budget: usize) -> CoordinatorConfig {
    CoordinatorConfig {
        budget,
        seed: 11,
        heartbeat_interval_s: 0.1,
        missed_beats: 10,
        retry_after_s: 0.02,
        snapshot_every: 7,
        ..CoordinatorConfig::default()
    }
}

fn options(budget: usize, dir: &Path) -> ServerOptions {
    let mut o = ServerOptions::new(config(budget), space(), dir);
    o.tick_interval = Duration::from_millis(20);
    o.linger = Duration::from_millis(500);
    o
}

fn client_config(addr: &str, i: usize) -> ClientConfig {
    let mut c = ClientConfig::new(addr, format!("client-{i}"));
    c.initial_backoff = Duration::from_millis(10);
    c.max_backoff = Duration::from_millis(200);
    c.give_up_after = Duration::from_secs(5);
    c.heartbeat_interval = Some(Duration::from_millis(50));
    c
}

fn spawn_clients(configs: Vec<ClientConfig>) -> Vec<thread::JoinHandle<ClientReport>> {
    configs
        .into_iter()
        .map(|c| {
            thread::spawn(move || {
                let eval = StructuredSurrogate::new(space());
                run_client(&c, &eval).expect("client runs")
            })
        })
        .collect()
}

/// Checks the log holds exactly `budget` distinct jobs, each with the value a
/// direct evaluation gives.
fn check_log(dir: &Path, budget: usize) -> Vec<String> {
    let records = read_results(&dir.join(RESULTS_LOG)).unwrap();
    let eval = StructuredSurrogate::new(space());
    let ids: Vec<String> = records.iter().map(|r| r.job_id.clone().unwrap()).collect();
    let unique: BTreeSet<&String> = ids.iter().collect();
    assert_eq!(records.len(), budget, "log length");
    assert_eq!(unique.len(), budget, "duplicate job ids in the log");
    for r in &records {
        assert_eq!(r.objective(), Some(eval.evaluate(&r.encoding).unwrap()));
    }
    ids
}

#[test]
fn four_clients_complete_the_budget_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(options(100, dir.path()), LatencyEstimator::analytic(space())).unwrap();
    let addr = server.local_addr().to_string();
    let clients = spawn_clients((0..4).map(|i| client_config(&addr, i)).collect());
    let reports: Vec<ClientReport> = clients.into_iter().map(|h| h.join().unwrap()).collect();
    let summary = server.wait().unwrap();
    assert!(summary.complete);
    assert_eq!(summary.results, 100);
    check_log(dir.path(), 100);

    let mut acked = BTreeSet::new();
    for r in &reports {
        assert!(r.shutdown);
        for (id, _) in &r.completed {
            assert!(acked.insert(id.clone()), "{id} evaluated by two clients");
        }
    }
    assert_eq!(acked.len(), 100);
}

#[test]
fn abandoned_job_is_reassigned_after_its_deadline() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(options(12, dir.path()), LatencyEstimator::analytic(space())).unwrap();
    let addr = server.local_addr().to_string();
    let mut quitter = client_config(&addr, 0);
    quitter.fault = Some(ClientFault::AbandonAfter(2));
    let first = spawn_clients(vec![quitter]).pop().unwrap().join().unwrap();
    let abandoned = first.abandoned.clone().expect("fault fired");

    let mut worker = client_config(&addr, 1);
    worker.eval_delay = Duration::from_millis(5);
    let second = spawn_clients(vec![worker]).pop().unwrap().join().unwrap();
    server.wait().unwrap();

    let ids = check_log(dir.path(), 12);
    assert!(ids.contains(&abandoned));
    assert!(second.completed.iter().any(|(id, _)| *id == abandoned));
}

#[test]
fn slow_clients_keep_their_jobs_through_heartbeats() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(options(4, dir.path()), LatencyEstimator::analytic(space())).unwrap();
    let addr = server.local_addr().to_string();
    let configs = (0..2)
        .map(|i| {
            let mut c = client_config(&addr, i);
            // Longer than the deadline, so only heartbeats keep the job alive.
            c.eval_delay = Duration::from_millis(1500);
            c
        })
        .collect();
    let reports: Vec<_> = spawn_clients(configs).into_iter().map(|h| h.join().unwrap()).collect();
    server.wait().unwrap();
    check_log(dir.path(), 4);
    let done: usize = reports.iter().map(|r| r.completed.len()).sum();
    assert_eq!(done, 4, "a job was reassigned despite heartbeats");
}

#[test]
fn server_refuses_an_unwritable_checkpoint_directory() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, "x").unwrap();
    let r = serve(options(1, &file.join("ckpt")), LatencyEstimator::analytic(space()));
    assert!(matches!(r, Err(CoordinatorError::Checkpoint(_))));
}

#[test]
fn hello_is_required_and_versions_must_match() {
    use std::io::{BufRead, BufReader, Write};
    let dir = tempfile::tempdir().unwrap();
    let server = serve(options(1, dir.path()), LatencyEstimator::analytic(space())).unwrap();
    let talk = |line: &str| {
        let mut s = std::net::TcpStream::connect(server.local_addr()).unwrap();
        s.write_all(line.as_bytes()).unwrap();
        let mut reply = String::new();
        BufReader::new(s).read_line(&mut reply).unwrap();
        WireMessage::parse_line(&reply).unwrap()
    };
    assert!(matches!(talk("{\"type\":\"REQUEST_WORK\",\"client_id\":\"x\"}\n"), WireMessage::Error { .. }));
    assert!(matches!(
        talk("{\"type\":\"HELLO\",\"client_id\":\"x\",\"protocol_version\":7}\n"),
        WireMessage::Error { .. }
    ));
    assert!(matches!(talk("garbage\n"), WireMessage::Error { .. }));
    server.stop().unwrap();
}

/// Crashes the server once at `point`, restarts it on the same port, and
/// checks that every acknowledged result survives exactly once.
fn crash_and_recover(point: KillPoint, countdown: usize, budget: usize) {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = options(budget, dir.path());
    opts.fault = Some(FaultPlan { point, countdown });
    let server = serve(opts, LatencyEstimator::analytic(space())).unwrap();
    let addr = server.local_addr().to_string();
    let clients = spawn_clients((0..4).map(|i| client_config(&addr, i)).collect());

    let crashed = server.wait();
    assert!(
        matches!(crashed, Err(CoordinatorError::InjectedCrash(_))),
        "{point:?}: expected a crash, got {crashed:?}"
    );
    let before = read_results(&dir.path().join(RESULTS_LOG)).unwrap().len();

    let mut opts = options(budget, dir.path());
    opts.bind = addr.clone();
    let server = serve(opts, LatencyEstimator::analytic(space())).unwrap();
    let reports: Vec<ClientReport> = clients.into_iter().map(|h| h.join().unwrap()).collect();
    let summary = server.wait().unwrap();
    assert_eq!(summary.restored_results, before, "{point:?}");
    assert!(summary.complete, "{point:?}");

    let ids: BTreeSet<String> = check_log(dir.path(), budget).into_iter().collect();
    for r in &reports {
        for (id, _) in &r.completed {
            assert!(ids.contains(id), "{point:?}: acknowledged {id} was lost");
        }
    }
}

#[test]
fn no_result_is_lost_or_duplicated_at_any_kill_point() {
    for point in KillPoint::ALL {
        crash_and_recover(point, 5, 30);
    }
}

#[test]
fn restart_after_fifty_results_resumes_with_new_work() {
    crash_and_recover(KillPoint::AfterLogAppend, 50, 60);
}

#[test]
fn write_ahead_record_survives_a_crash_before_the_ack() {
    let dir = tempfile::tempdir().unwrap();
    let est = LatencyEstimator::analytic(space());
    let (mut store, _) = CheckpointStore::open(dir.path(), config(3).manifest()).unwrap();
    store.faults = latnas::coordinator::checkpoint::Faults::new(Some(FaultPlan {
        point: KillPoint::AfterLogAppend,
        countdown: 1,
    }));
    let mut state = ServerState::new(config(3), space());
    let out = state.handle(
        Command::message(Some("a"), WireMessage::RequestWork { client_id: "a".into() }, 0.0),
        &est,
    );
    store.apply(&mut state, &out.effects).unwrap();
    let Some(WireMessage::Proposal { job_id, encoding, .. }) = out.reply else { panic!() };
    let msg = WireMessage::Result {
        job_id: job_id.clone(),
        encoding,
        objective: Some(0.5),
        epochs_completed: 1,
        failed: false,
        error: None,
    };
    let out = state.handle(Command::message(Some("a"), msg, 1.0), &est);
    assert!(store.apply(&mut state, &out.effects).is_err());
    drop(store);

    let (_, rec) = CheckpointStore::open(dir.path(), config(3).manifest()).unwrap();
    let restored = ServerState::restore(config(3), space(), rec.snapshot, rec.results);
    assert_eq!(restored.history().len(), 1);
    assert_eq!(restored.history()[0].job_id.as_deref(), Some(job_id.as_str()));
}

#[test]
fn propose_after_restore_matches_uninterrupted_server() {
    let dir = tempfile::tempdir().unwrap();
    let est = LatencyEstimator::analytic(space());
    let eval = StructuredSurrogate::new(space());
    let (mut store, _) = CheckpointStore::open(dir.path(), config(25).manifest()).unwrap();
    let mut live = ServerState::new(config(25), space());
    run_lockstep(&mut live, &est, &eval, 3, Some(&mut store)).unwrap();
    drop(store);

    let (_, rec) = CheckpointStore::open(dir.path(), config(25).manifest()).unwrap();
    let restored = ServerState::restore(config(25), space(), rec.snapshot, rec.results);
    assert_eq!(restored.history(), live.history());
    assert_eq!(restored.peek_proposal(&est).unwrap(), live.peek_proposal(&est).unwrap());
}

/// Random client behaviour against the pure state machine; replaying the
/// recorded commands on a fresh state must give the same final state.
#[test]
fn replaying_a_command_trace_reproduces_the_state() {
    let est = LatencyEstimator::analytic(space());
    let eval = StructuredSurrogate::new(space());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut state = ServerState::new(config(20), space());
    let mut trace = Vec::new();
    let mut held: BTreeMap<String, (String, NetworkEncoding)> = BTreeMap::new();
    let mut now = 0.0;
    let run = |state: &mut ServerState, cmd: Command, trace: &mut Vec<Command>| {
        trace.push(cmd.clone());
        state.handle(cmd, &est)
    };
    for _ in 0..400 {
        now += rng.random_range(0.0..0.2);
        let client = format!("c{}", rng.random_range(0..4));
        let roll: f64 = rng.random();
        if let Some((job, enc)) = held.get(&client).cloned().filter(|_| roll < 0.6) {
            let fail = rng.random_bool(0.1);
            let msg = WireMessage::Result {
                job_id: job,
                objective: (!fail).then(|| eval.evaluate(&enc).unwrap()),
                encoding: enc,
                epochs_completed: 1,
                failed: fail,
                error: fail.then(|| "boom".into()),
            };
            run(&mut state, Command::message(Some(&client), msg.clone(), now), &mut trace);
            if rng.random_bool(0.2) {
                run(&mut state, Command::message(Some(&client), msg, now), &mut trace);
            }
            held.remove(&client);
        } else if roll < 0.8 {
            let out = run(
                &mut state,
                Command::message(Some(&client), WireMessage::RequestWork { client_id: client.clone() }, now),
                &mut trace,
            );
            if let Some(WireMessage::Proposal { job_id, encoding, .. }) = out.reply {
                held.insert(client, (job_id, encoding));
            }
        } else if roll < 0.9 {
            run(&mut state, Command::tick(now), &mut trace);
        } else if let Some((job, _)) = held.get(&client) {
            let beat = WireMessage::Heartbeat { job_id: job.clone(), epoch: 1, current_metric: None };
            run(&mut state, Command::message(Some(&client), beat, now), &mut trace);
        }
    }
    assert!(state.history().len() > 5);

    let mut replay = ServerState::new(config(20), space());
    for cmd in trace {
        replay.handle(cmd, &est);
    }
    assert_eq!(replay.snapshot(), state.snapshot());
    assert_eq!(replay.history(), state.history());
}

//! TCP front end for [`ServerState`].
//!
//! One thread accepts connections and one thread per connection parses lines.
//! All of them forward commands to a single loop thread that owns the state,
//! the checkpoint store and the latency estimator. The loop persists a
//! command's effects before the reply is released to the connection.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::checkpoint::{CheckpointStore, FaultPlan, Faults, KillPoint};
use super::protocol::WireMessage;
use super::state::{Command, Effect, ServerState};
use super::{CoordinatorConfig, CoordinatorError};
use crate::latency::NetworkLatency;
use crate::search_space::SearchSpaceSpec;

#[derive(Clone, Debug)]
pub struct ServerOptions {
    pub config: CoordinatorConfig,
    pub space: SearchSpaceSpec,
    pub checkpoint_dir: PathBuf,
    /// Address to bind, e.g. `127.0.0.1:0`.
    pub bind: String,
    /// How often deadlines are checked.
    pub tick_interval: Duration,
    /// After the budget is met, keep answering SHUTDOWN to connected clients
    /// for at most this long.
    pub linger: Duration,
    pub fault: Option<FaultPlan>,
}

impl ServerOptions {
    pub fn new(config: CoordinatorConfig, space: SearchSpaceSpec, checkpoint_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            space,
            checkpoint_dir: checkpoint_dir.into(),
            bind: "127.0.0.1:0".into(),
            tick_interval: Duration::from_millis(100),
            linger: Duration::from_secs(2),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerSummary {
    /// Results in the log when the server stopped.
    pub results: usize,
    /// Results recovered from the checkpoint directory at start.
    pub restored_results: usize,
    pub permanent_failures: usize,
    pub truncated_log: bool,
    pub complete: bool,
}

type Reply = mpsc::Sender<Option<(WireMessage, bool)>>;

struct Request {
    client_id: Option<String>,
    message: WireMessage,
    reply: Reply,
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    main: Option<JoinHandle<Result<ServerSummary, CoordinatorError>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Asks the server to stop and waits for it.
    pub fn stop(mut self) -> Result<ServerSummary, CoordinatorError> {
        self.stop.store(true, Ordering::SeqCst);
        self.join_inner()
    }

    /// Waits until the server finishes on its own (budget met) or crashes.
    pub fn wait(mut self) -> Result<ServerSummary, CoordinatorError> {
        self.join_inner()
    }

    fn join_inner(&mut self) -> Result<ServerSummary, CoordinatorError> {
        let main = self.main.take().expect("joined once");
        main.join().unwrap_or_else(|_| Err(CoordinatorError::Checkpoint("server thread panicked".into())))
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(main) = self.main.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = main.join();
        }
    }
}

/// Open connections, so a crash or stop can cut them all at once.
#[derive(Clone, Default)]
struct Registry {
    streams: Arc<Mutex<HashMap<u64, TcpStream>>>,
    next: Arc<AtomicU64>,
}

impl Registry {
    fn add(&self, stream: &TcpStream) -> Option<u64> {
        let id = self.next.fetch_add(1, Ordering::SeqCst);
        let clone = stream.try_clone().ok()?;
        self.streams.lock().expect("registry lock").insert(id, clone);
        Some(id)
    }

    fn remove(&self, id: u64) {
        self.streams.lock().expect("registry lock").remove(&id);
    }

    fn len(&self) -> usize {
        self.streams.lock().expect("registry lock").len()
    }

    fn shutdown_all(&self) {
        for s in self.streams.lock().expect("registry lock").values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Starts a server: recovers the checkpoint directory, binds, and spawns the
/// accept and command-loop threads. Refuses to start when the directory is
/// unwritable or the address cannot be bound.
pub fn serve<L>(options: ServerOptions, estimator: L) -> Result<ServerHandle, CoordinatorError>
where
    L: NetworkLatency + Send + 'static,
{
    options.config.check()?;
    let (mut store, recovered) = CheckpointStore::open(&options.checkpoint_dir, options.config.manifest())?;
    store.faults = Faults::new(options.fault);
    let restored_results = recovered.results.len();
    let truncated_log = recovered.truncated_log;
    let mut state = ServerState::restore(
        options.config.clone(),
        options.space.clone(),
        recovered.snapshot,
        recovered.results,
    );
    if restored_results > 0 || truncated_log {
        log::info!("restored {restored_results} results from {}", options.checkpoint_dir.display());
    }
    // Persist the demoted job table before anyone connects.
    store.apply(&mut state, &[Effect::Snapshot])?;

    let listener = TcpListener::bind(&options.bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    log::info!("listening on {addr}");

    let stop = Arc::new(AtomicBool::new(false));
    let registry = Registry::default();
    let (tx, rx) = mpsc::channel::<Request>();

    let acceptor = {
        let stop = stop.clone();
        let registry = registry.clone();
        thread::spawn(move || accept_loop(listener, tx, stop, registry))
    };

    let main = {
        let stop = stop.clone();
        thread::spawn(move || {
            let mut ctx = LoopContext {
                state,
                store,
                estimator,
                options,
                stop: stop.clone(),
                registry: registry.clone(),
            };
            let result = ctx.run(rx);
            stop.store(true, Ordering::SeqCst);
            registry.shutdown_all();
            let _ = acceptor.join();
            result.map(|(results, permanent_failures, complete)| ServerSummary {
                results,
                restored_results,
                permanent_failures,
                truncated_log,
                complete,
            })
        })
    };
    Ok(ServerHandle {
        addr,
        stop,
        main: Some(main),
    })
}

fn accept_loop(listener: TcpListener, tx: mpsc::Sender<Request>, stop: Arc<AtomicBool>, registry: Registry) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let _ = stream.set_nodelay(true);
                let Some(id) = registry.add(&stream) else { continue };
                let tx = tx.clone();
                let registry = registry.clone();
                thread::spawn(move || {
                    if let Err(e) = connection(stream, tx) {
                        log::debug!("{peer}: {e}");
                    }
                    registry.remove(id);
                });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn write_line(stream: &mut TcpStream, message: &WireMessage) -> std::io::Result<()> {
    stream.write_all(message.to_line().as_bytes())?;
    stream.flush()
}

/// Parses lines from one client and relays them to the command loop. The
/// first message must be HELLO.
fn connection(stream: TcpStream, tx: mpsc::Sender<Request>) -> Result<(), CoordinatorError> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut client_id: Option<String> = None;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let message = match WireMessage::parse_line(&line) {
            Ok(m) => m,
            Err(e) => {
                let _ = write_line(&mut writer, &WireMessage::Error { message: e.to_string() });
                return Err(e.into());
            }
        };
        let hello_id = match &message {
            WireMessage::Hello { client_id, .. } => Some(client_id.clone()),
            _ if client_id.is_none() => {
                let _ = write_line(&mut writer, &WireMessage::Error { message: "expected HELLO first".into() });
                return Ok(());
            }
            _ => None,
        };
        let (reply_tx, reply_rx) = mpsc::channel();
        let request = Request {
            client_id: client_id.clone(),
            message,
            reply: reply_tx,
        };
        if tx.send(request).is_err() {
            return Ok(());
        }
        // A dropped sender means the loop died before answering.
        let Ok(Some((reply, close))) = reply_rx.recv() else {
            return Ok(());
        };
        if let (Some(id), WireMessage::Welcome { .. }) = (hello_id, &reply) {
            client_id = Some(id);
        }
        write_line(&mut writer, &reply)?;
        if close {
            return Ok(());
        }
    }
}

struct LoopContext<L> {
    state: ServerState,
    store: CheckpointStore,
    estimator: L,
    options: ServerOptions,
    stop: Arc<AtomicBool>,
    registry: Registry,
}

impl<L: NetworkLatency> LoopContext<L> {
    /// Returns (results, permanent failures, complete).
    fn run(&mut self, rx: mpsc::Receiver<Request>) -> Result<(usize, usize, bool), CoordinatorError> {
        let start = Instant::now();
        let now = || start.elapsed().as_secs_f64();
        let mut last_tick = Instant::now();
        let mut completed_at: Option<Instant> = None;
        loop {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            if self.state.is_complete() {
                let at = *completed_at.get_or_insert_with(Instant::now);
                if self.registry.len() == 0 || at.elapsed() >= self.options.linger {
                    break;
                }
            }
            match rx.recv_timeout(self.options.tick_interval) {
                Ok(req) => self.handle(req, now())?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            if last_tick.elapsed() >= self.options.tick_interval {
                // Heartbeats queued behind a slow proposal count before any deadline does.
                while let Ok(req) = rx.try_recv() {
                    self.handle(req, now())?;
                }
                last_tick = Instant::now();
                let outcome = self.state.handle(Command::tick(now()), &self.estimator);
                self.persist(&outcome.effects)?;
            }
        }
        let permanent = self.state.jobs().filter(|j| j.permanent).count();
        Ok((self.state.done_count(), permanent, self.state.is_complete()))
    }

    fn persist(&mut self, effects: &[Effect]) -> Result<(), CoordinatorError> {
        let result = self.store.apply(&mut self.state, effects);
        if let Err(e) = &result {
            log::error!("stopping: {e}");
        }
        result
    }

    fn handle(&mut self, req: Request, now: f64) -> Result<(), CoordinatorError> {
        let is_result = matches!(req.message, WireMessage::Result { .. });
        let cmd = Command {
            client_id: req.client_id,
            message: Some(req.message),
            now,
        };
        let outcome = self.state.handle(cmd, &self.estimator);
        self.persist(&outcome.effects)?;
        let Some(reply) = outcome.reply else {
            let _ = req.reply.send(None);
            return Ok(());
        };
        let is_proposal = matches!(reply, WireMessage::Proposal { .. });
        if is_proposal {
            self.store.faults.check(KillPoint::BeforeProposalSent)?;
        }
        let _ = req.reply.send(Some((reply, outcome.close)));
        if is_proposal {
            self.store.faults.check(KillPoint::AfterProposalSent)?;
        }
        if is_result {
            self.store.faults.check(KillPoint::AfterAck)?;
        }
        Ok(())
    }
}

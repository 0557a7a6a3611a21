//! Worker loop: request a job, evaluate it, report, repeat.
//!
//! A background thread sends heartbeats while an evaluation runs. Lost
//! connections are retried with exponential backoff, and a result that was
//! never acknowledged is sent again after reconnecting; the server discards
//! duplicates.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{WireMessage, PROTOCOL_VERSION};
use super::CoordinatorError;
use crate::evaluators::Evaluator;

/// Deliberate misbehaviour, for testing reassignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientFault {
    /// After completing this many jobs, take one more and vanish without
    /// reporting it, as a preempted worker would.
    AbandonAfter(usize),
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub server: String,
    pub client_id: String,
    /// Heartbeat period; `None` uses the interval the server sends.
    pub heartbeat_interval: Option<Duration>,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    /// Give up after failing to reach the server for this long.
    pub give_up_after: Duration,
    /// Simulated training time per job.
    pub eval_delay: Duration,
    /// Upper bound on a NO_WORK wait.
    pub max_retry_wait: Duration,
    pub fault: Option<ClientFault>,
}

impl ClientConfig {
    pub fn new(server: impl Into<String>, client_id: impl Into<String>) -> Self {
        Self {
            server: server.into(),
            client_id: client_id.into(),
            heartbeat_interval: None,
            initial_backoff: Duration::from_millis(50),
            max_backoff: Duration::from_secs(5),
            give_up_after: Duration::from_secs(60),
            eval_delay: Duration::ZERO,
            max_retry_wait: Duration::from_secs(30),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientReport {
    /// Acknowledged results as (job_id, objective).
    pub completed: Vec<(String, f64)>,
    /// Acknowledged failure reports.
    pub failed: usize,
    /// Successful connections, including the first.
    pub connections: usize,
    /// Job taken and never reported, when a fault was injected.
    pub abandoned: Option<String>,
    /// True when the server said SHUTDOWN; false when the client gave up.
    pub shutdown: bool,
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Conn {
    fn open(cfg: &ClientConfig) -> Result<Self, CoordinatorError> {
        let stream = TcpStream::connect(&cfg.server)?;
        stream.set_nodelay(true)?;
        let mut conn = Self {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        };
        let hello = WireMessage::Hello {
            client_id: cfg.client_id.clone(),
            protocol_version: PROTOCOL_VERSION,
        };
        match conn.call(&hello)? {
            WireMessage::Welcome { .. } => Ok(conn),
            WireMessage::Error { message } => Err(CoordinatorError::Refused(message)),
            other => Err(CoordinatorError::Refused(format!("unexpected reply to HELLO: {other:?}"))),
        }
    }

    fn call(&mut self, message: &WireMessage) -> Result<WireMessage, CoordinatorError> {
        self.writer.write_all(message.to_line().as_bytes())?;
        self.writer.flush()?;
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "server closed the connection").into());
        }
        Ok(WireMessage::parse_line(&line)?)
    }
}

type Shared = Arc<Mutex<Option<Conn>>>;

struct Session<'a> {
    cfg: &'a ClientConfig,
    conn: Shared,
    report: ClientReport,
}

impl Session<'_> {
    /// Sends `message`, reconnecting as needed. `None` when the server stayed
    /// unreachable past the give-up window.
    fn call(&mut self, message: &WireMessage) -> Result<Option<WireMessage>, CoordinatorError> {
        let mut backoff = self.cfg.initial_backoff;
        let mut unreachable_since: Option<Instant> = None;
        loop {
            let mut guard = self.conn.lock().expect("connection lock");
            if guard.is_none() {
                match Conn::open(self.cfg) {
                    Ok(c) => {
                        *guard = Some(c);
                        self.report.connections += 1;
                    }
                    Err(CoordinatorError::Refused(m)) => return Err(CoordinatorError::Refused(m)),
                    Err(e) => log::debug!("{}: connect failed: {e}", self.cfg.client_id),
                }
            }
            if let Some(conn) = guard.as_mut() {
                match conn.call(message) {
                    Ok(WireMessage::Error { message }) => return Err(CoordinatorError::Refused(message)),
                    Ok(reply) => return Ok(Some(reply)),
                    Err(e) => {
                        log::debug!("{}: connection lost: {e}", self.cfg.client_id);
                        *guard = None;
                    }
                }
            }
            drop(guard);
            let since = *unreachable_since.get_or_insert_with(Instant::now);
            if since.elapsed() >= self.cfg.give_up_after {
                return Ok(None);
            }
            thread::sleep(backoff);
            backoff = (backoff * 2).min(self.cfg.max_backoff);
        }
    }
}

/// Heartbeats for one job until `done` is set.
fn spawn_heartbeat(conn: Shared, job_id: String, period: Duration, done: Arc<AtomicBool>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut epoch = 0;
        let step = Duration::from_millis(10).min(period);
        let mut last = Instant::now();
        while !done.load(Ordering::SeqCst) {
            thread::sleep(step);
            if last.elapsed() < period {
                continue;
            }
            last = Instant::now();
            epoch += 1;
            let mut guard = conn.lock().expect("connection lock");
            if let Some(c) = guard.as_mut() {
                let beat = WireMessage::Heartbeat {
                    job_id: job_id.clone(),
                    epoch,
                    current_metric: None,
                };
                if c.call(&beat).is_err() {
                    *guard = None;
                }
            }
        }
    })
}

/// Runs the worker loop until the server sends SHUTDOWN, the server stays
/// unreachable past `give_up_after`, or an injected fault fires.
pub fn run_client(cfg: &ClientConfig, evaluator: &dyn Evaluator) -> Result<ClientReport, CoordinatorError> {
    let mut session = Session {
        cfg,
        conn: Arc::new(Mutex::new(None)),
        report: ClientReport::default(),
    };
    loop {
        let request = WireMessage::RequestWork {
            client_id: cfg.client_id.clone(),
        };
        let Some(reply) = session.call(&request)? else {
            return Ok(session.report);
        };
        let (job_id, encoding, eval_config) = match reply {
            WireMessage::Proposal {
                job_id,
                encoding,
                eval_config,
            } => (job_id, encoding, eval_config),
            WireMessage::NoWork { retry_after_s } => {
                let wait = Duration::from_secs_f64(retry_after_s.max(0.0)).min(cfg.max_retry_wait);
                thread::sleep(wait);
                continue;
            }
            WireMessage::Shutdown {} => {
                session.report.shutdown = true;
                return Ok(session.report);
            }
            other => return Err(CoordinatorError::Refused(format!("unexpected reply {other:?}"))),
        };

        if let Some(ClientFault::AbandonAfter(n)) = cfg.fault {
            if session.report.completed.len() >= n {
                if let Some(c) = session.conn.lock().expect("connection lock").take() {
                    let _ = c.writer.shutdown(std::net::Shutdown::Both);
                }
                session.report.abandoned = Some(job_id);
                return Ok(session.report);
            }
        }

        let period = cfg
            .heartbeat_interval
            .unwrap_or_else(|| Duration::from_secs_f64(eval_config.heartbeat_interval_s.max(0.01)));
        let done = Arc::new(AtomicBool::new(false));
        let beats = spawn_heartbeat(session.conn.clone(), job_id.clone(), period, done.clone());
        thread::sleep(cfg.eval_delay);
        let outcome = evaluator.evaluate(&encoding);
        done.store(true, Ordering::SeqCst);
        let _ = beats.join();

        let (objective, error) = match outcome {
            Ok(y) => (Some(y), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let result = WireMessage::Result {
            job_id: job_id.clone(),
            encoding,
            objective,
            epochs_completed: eval_config.epochs,
            failed: error.is_some(),
            error,
        };
        // Until an ACK arrives the result is resent on every reconnect.
        match session.call(&result)? {
            Some(WireMessage::Ack { warning, .. }) => {
                if let Some(w) = warning {
                    log::info!("{}: {job_id}: {w}", cfg.client_id);
                }
                match objective {
                    Some(y) => session.report.completed.push((job_id, y)),
                    None => session.report.failed += 1,
                }
            }
            Some(other) => return Err(CoordinatorError::Refused(format!("unexpected reply {other:?}"))),
            None => return Ok(session.report),
        }
    }
}

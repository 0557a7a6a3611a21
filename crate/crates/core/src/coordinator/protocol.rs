//! Line-delimited JSON wire messages.
//!
//! Every message is one UTF-8 JSON object terminated by `\n`, tagged by a
//! `type` field. Unknown fields are ignored so newer peers can add data.

use serde::{Deserialize, Serialize};

use crate::search_space::NetworkEncoding;

pub const PROTOCOL_VERSION: u32 = 1;

/// What a client needs to know to run one job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default)]
    pub epochs: u32,
    #[serde(default)]
    pub heartbeat_interval_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WireMessage {
    Hello {
        client_id: String,
        protocol_version: u32,
    },
    /// Server reply to an accepted HELLO.
    Welcome {
        client_id: String,
        protocol_version: u32,
    },
    RequestWork {
        client_id: String,
    },
    Proposal {
        job_id: String,
        encoding: NetworkEncoding,
        eval_config: EvalConfig,
    },
    Heartbeat {
        job_id: String,
        epoch: u32,
        #[serde(default)]
        current_metric: Option<f64>,
    },
    Result {
        job_id: String,
        encoding: NetworkEncoding,
        #[serde(default)]
        objective: Option<f64>,
        #[serde(default)]
        epochs_completed: u32,
        /// Set when the evaluation itself failed.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        failed: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Ack {
        job_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
    NoWork {
        retry_after_s: f64,
    },
    Shutdown {},
    /// Protocol violation; the server closes the connection after sending it.
    Error {
        message: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("message contains a newline")]
    EmbeddedNewline,
    #[error("malformed message: {0}")]
    Malformed(String),
}

impl WireMessage {
    pub fn parse_line(line: &str) -> Result<Self, ProtocolError> {
        let line = line.strip_suffix('\n').unwrap_or(line);
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.contains('\n') {
            return Err(ProtocolError::EmbeddedNewline);
        }
        serde_json::from_str(line).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }

    /// The message as one `\n`-terminated line.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("wire messages always serialize");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples() -> Vec<WireMessage> {
        let e = NetworkEncoding::new(vec![1, 2, 3]);
        vec![
            WireMessage::Hello { client_id: "c1".into(), protocol_version: 1 },
            WireMessage::Welcome { client_id: "c1".into(), protocol_version: 1 },
            WireMessage::RequestWork { client_id: "c1".into() },
            WireMessage::Proposal {
                job_id: "job-000001".into(),
                encoding: e.clone(),
                eval_config: EvalConfig { epochs: 450, heartbeat_interval_s: 30.0 },
            },
            WireMessage::Heartbeat { job_id: "job-000001".into(), epoch: 3, current_metric: Some(0.5) },
            WireMessage::Result {
                job_id: "job-000001".into(),
                encoding: e,
                objective: Some(0.81),
                epochs_completed: 450,
                failed: false,
                error: None,
            },
            WireMessage::Ack { job_id: "job-000001".into(), warning: Some("late".into()) },
            WireMessage::NoWork { retry_after_s: 2.5 },
            WireMessage::Shutdown {},
            WireMessage::Error { message: "bad".into() },
        ]
    }

    #[test]
    fn every_variant_round_trips() {
        for m in samples() {
            let line = m.to_line();
            assert!(line.ends_with('\n'));
            assert_eq!(line.matches('\n').count(), 1);
            assert_eq!(WireMessage::parse_line(&line).unwrap(), m);
        }
    }

    #[test]
    fn golden_lines() {
        assert_eq!(WireMessage::Shutdown {}.to_line(), "{\"type\":\"SHUTDOWN\"}\n");
        assert_eq!(
            WireMessage::RequestWork { client_id: "a".into() }.to_line(),
            "{\"type\":\"REQUEST_WORK\",\"client_id\":\"a\"}\n"
        );
        let r = WireMessage::parse_line(
            r#"{"type":"RESULT","job_id":"j","encoding":[1,2],"objective":0.5,"epochs_completed":10}"#,
        )
        .unwrap();
        assert!(matches!(r, WireMessage::Result { failed: false, .. }));
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let m = WireMessage::parse_line(r#"{"type":"NO_WORK","retry_after_s":1,"hint":"x"}"#).unwrap();
        assert_eq!(m, WireMessage::NoWork { retry_after_s: 1.0 });
    }

    #[test]
    fn malformed_lines_rejected() {
        for bad in ["", "{}", r#"{"type":"NOPE"}"#, r#"{"type":"ACK"}"#, "not json", "{\"type\":\"SHUTDOWN\"}\n{}"] {
            assert!(WireMessage::parse_line(bad).is_err(), "{bad:?}");
        }
    }
}

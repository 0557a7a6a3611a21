use std::collections::HashMap;
use std::fmt::Write as _;

use super::{LatencyBackend, LatencyError, LayerKey};

pub const TABLE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableMetadata {
    pub backend: String,
    pub device: String,
    pub created: String,
}

impl Default for TableMetadata {
    fn default() -> Self {
        Self {
            backend: "unknown".into(),
            device: "unknown".into(),
            created: "unspecified".into(),
        }
    }
}

impl TableMetadata {
    pub fn for_backend(backend: &dyn LatencyBackend) -> Self {
        Self {
            backend: backend.id(),
            ..Self::default()
        }
    }
}

/// Layer latencies in microseconds keyed by [`LayerKey`].
///
/// On disk: `#`-prefixed `name: value` metadata lines followed by one
/// `canonical_key<TAB>latency_us` row per entry, sorted by key text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyTable {
    entries: HashMap<LayerKey, f64>,
    pub metadata: TableMetadata,
}

impl LatencyTable {
    pub fn new(metadata: TableMetadata) -> Self {
        Self {
            entries: HashMap::new(),
            metadata,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &LayerKey) -> Option<f64> {
        self.entries.get(key).copied()
    }

    /// Adds an entry. Latencies must be finite and non-negative; an existing
    /// entry is left untouched.
    pub fn insert(&mut self, key: LayerKey, latency_us: f64) -> Result<(), LatencyError> {
        if !latency_us.is_finite() || latency_us < 0.0 {
            return Err(LatencyError::InvalidLatency {
                key: key.to_string(),
                value: latency_us,
            });
        }
        self.entries.entry(key).or_insert(latency_us);
        Ok(())
    }

    /// Entries sorted by canonical key text.
    pub fn sorted_entries(&self) -> Vec<(String, LayerKey, f64)> {
        let mut rows: Vec<_> = self.entries.iter().map(|(k, v)| (k.to_string(), *k, *v)).collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        rows
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# schema_version: {TABLE_SCHEMA_VERSION}");
        let _ = writeln!(out, "# backend: {}", self.metadata.backend);
        let _ = writeln!(out, "# device: {}", self.metadata.device);
        let _ = writeln!(out, "# created: {}", self.metadata.created);
        for (text, _, us) in self.sorted_entries() {
            let _ = writeln!(out, "{text}\t{us}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, LatencyError> {
        let mut table = LatencyTable::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let parse_err = |reason: String| LatencyError::Parse { line, reason };
            if let Some(meta) = raw.strip_prefix('#') {
                let Some((name, value)) = meta.split_once(':') else { continue };
                let value = value.trim().to_string();
                match name.trim() {
                    "schema_version" => {
                        if value != TABLE_SCHEMA_VERSION.to_string() {
                            return Err(parse_err(format!("unsupported schema version {value}")));
                        }
                    }
                    "backend" => table.metadata.backend = value,
                    "device" => table.metadata.device = value,
                    "created" => table.metadata.created = value,
                    _ => {}
                }
                continue;
            }
            if raw.trim().is_empty() {
                continue;
            }
            let (key_text, value) = raw
                .split_once('\t')
                .ok_or_else(|| parse_err("expected key<TAB>latency_us".into()))?;
            let key: LayerKey = key_text
                .parse()
                .map_err(|_| parse_err(format!("malformed layer key {key_text:?}")))?;
            let us: f64 = value
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("malformed latency {value:?}")))?;
            if table.entries.contains_key(&key) {
                return Err(LatencyError::DuplicateKey {
                    line,
                    key: key_text.to_string(),
                });
            }
            table.insert(key, us).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(table)
    }
}

//! Line-delimited JSON traces: a header, one record per round, a footer.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Aggregate, RoundRecord, ScenarioConfig, SimulationTrace};
use crate::error::{ApexError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum TraceRecord {
    Header { config: ScenarioConfig, seed: u64 },
    Round(RoundRecord),
    Footer(Aggregate),
}

pub fn write_trace<W: Write>(trace: &SimulationTrace, mut out: W) -> std::io::Result<()> {
    let mut line = |record: &TraceRecord| -> std::io::Result<()> {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")
    };
    line(&TraceRecord::Header {
        config: trace.config.clone(),
        seed: trace.config.seed,
    })?;
    for r in &trace.rounds {
        line(&TraceRecord::Round(r.clone()))?;
    }
    line(&TraceRecord::Footer(trace.aggregate.clone()))?;
    out.flush()
}

pub fn read_trace(text: &str) -> Result<SimulationTrace> {
    let err = |line: usize, message: String| ApexError::Trace { line, message };
    let mut config = None;
    let mut rounds = Vec::new();
    let mut aggregate = None;
    let mut last = 0;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        last = line;
        if aggregate.is_some() {
            return Err(err(line, "record after the footer".into()));
        }
        let record: TraceRecord =
            serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
        match (record, &config) {
            (TraceRecord::Header { config: c, seed }, None) => {
                if seed != c.seed {
                    return Err(err(
                        line,
                        format!("header seed {seed} differs from config seed {}", c.seed),
                    ));
                }
                config = Some(c);
            }
            (TraceRecord::Header { .. }, Some(_)) => return Err(err(line, "second header".into())),
            (_, None) => return Err(err(line, "trace must start with a header".into())),
            (TraceRecord::Round(r), Some(_)) => rounds.push(r),
            (TraceRecord::Footer(a), Some(_)) => aggregate = Some(a),
        }
    }
    let config = config.ok_or_else(|| err(1, "empty trace".into()))?;
    let aggregate = aggregate.ok_or_else(|| err(last, "missing footer".into()))?;
    let trace = SimulationTrace {
        config,
        rounds,
        aggregate,
    };
    trace.validate().map_err(|e| err(last, e.to_string()))?;
    Ok(trace)
}

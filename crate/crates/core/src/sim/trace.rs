use std::io::Write;

use serde::Serialize;
use serde_json::json;

use super::engine::Resource;
use super::TimelineReport;
use crate::error::Result;

#[derive(Serialize)]
struct TraceEvent {
    name: String,
    cat: &'static str,
    ph: &'static str,
    /// Microseconds.
    ts: f64,
    dur: f64,
    pid: usize,
    tid: &'static str,
    args: serde_json::Value,
}

/// Chrome trace-event JSON (`chrome://tracing`, Perfetto): one complete
/// event per operation, `pid` = device, `tid` = resource.
pub fn trace_json(report: &TimelineReport) -> serde_json::Value {
    let events: Vec<TraceEvent> = report
        .events()
        .map(|e| TraceEvent {
            name: format!("{}{}", e.kind.name(), if e.backward { "_bwd" } else { "" }),
            cat: if e.backward { "backward" } else { "forward" },
            ph: "X",
            ts: e.start * 1e6,
            dur: (e.end - e.start) * 1e6,
            pid: e.device,
            tid: match e.resource {
                Resource::Compute => "compute",
                Resource::Wire => "wire",
            },
            args: json!({ "index": e.index, "lane": e.lane, "bytes": e.bytes }),
        })
        .collect();
    json!({ "traceEvents": events, "displayTimeUnit": "ms" })
}

pub fn write_trace<W: Write>(report: &TimelineReport, writer: W) -> Result<()> {
    serde_json::to_writer(writer, &trace_json(report))?;
    Ok(())
}

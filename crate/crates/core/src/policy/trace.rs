//! Emission traces: when every output unit became available.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Action;

pub const TRACE_FORMAT: &str = "simulstream-trace-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRead {
    /// Frames received after this read.
    pub frames: usize,
    pub ms: f64,
}

/// A maximal run of outputs emitted without an intervening READ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Index of the first output unit.
    pub start: usize,
    pub len: usize,
    /// Ideal emission time of the segment.
    pub ms: f64,
    /// Chunk reads completed before the segment was emitted.
    pub reads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmission {
    pub token: usize,
    /// Input frames visible when the token was produced, the realised `g(i)`.
    pub prefix_frames: usize,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub frames: usize,
    pub asr_count: usize,
    pub nar_count: usize,
    pub emitted: usize,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTotals {
    /// Source duration `|X|`.
    pub x_ms: f64,
    /// Emitted output duration, units × unit duration.
    pub s_ms: f64,
    /// Reference output duration, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_s_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionTrace {
    pub format: String,
    pub frame_ms: f64,
    pub unit_ms: f64,
    /// Ideal emission time of each output unit.
    pub t: Vec<f64>,
    /// Emission time including accumulated model compute time.
    pub t_ca: Vec<f64>,
    pub chunk_reads: Vec<ChunkRead>,
    pub segments: Vec<Segment>,
    pub totals: TraceTotals,
    pub tokens: Vec<TokenEmission>,
    pub decisions: Vec<DecisionRecord>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl EmissionTrace {
    pub fn new(x_ms: f64, frame_ms: f64, unit_ms: f64) -> Self {
        Self {
            format: TRACE_FORMAT.to_string(),
            frame_ms,
            unit_ms,
            t: Vec::new(),
            t_ca: Vec::new(),
            chunk_reads: Vec::new(),
            segments: Vec::new(),
            totals: TraceTotals {
                x_ms,
                s_ms: 0.0,
                reference_s_ms: None,
            },
            tokens: Vec::new(),
            decisions: Vec::new(),
            flags: Vec::new(),
        }
    }

    /// Builds a trace directly from timestamps, one segment per distinct
    /// ideal time. Useful for evaluating externally produced emissions.
    pub fn from_times(x_ms: f64, frame_ms: f64, unit_ms: f64, t: Vec<f64>, t_ca: Vec<f64>) -> Self {
        let mut trace = Self::new(x_ms, frame_ms, unit_ms);
        let mut group = 0;
        for (i, (&a, &b)) in t.iter().zip(&t_ca).enumerate() {
            if i > 0 && t[i - 1] != a {
                group += 1;
            }
            trace.push_outputs(1, a, b, group);
        }
        trace.totals.s_ms = trace.t.len() as f64 * unit_ms;
        trace
    }

    /// Appends `n` outputs emitted at `t` / `t_ca` after `reads` chunk reads.
    /// Outputs emitted after the same number of reads share a segment.
    pub(crate) fn push_outputs(&mut self, n: usize, t: f64, t_ca: f64, reads: usize) {
        if n == 0 {
            return;
        }
        let start = self.t.len();
        self.t.extend(std::iter::repeat_n(t, n));
        self.t_ca.extend(std::iter::repeat_n(t_ca, n));
        match self.segments.last_mut() {
            Some(seg) if seg.reads == reads => seg.len += n,
            _ => self.segments.push(Segment {
                start,
                len: n,
                ms: t,
                reads,
            }),
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.t.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("traces always serialize")
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json() + "\n")
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let trace: Self = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
        if trace.format != TRACE_FORMAT {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: unsupported trace format {:?}", path.display(), trace.format),
            ));
        }
        Ok(trace)
    }
}

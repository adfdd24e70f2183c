//! Latency and streaming-degree metrics over one emission trace.
//!
//! Notation: `t_i` is the emission time of output frame `i` (1-based), `N` the
//! number of emitted output frames, `|X|` the source duration and `|S|` the
//! reference output length in frames (the emitted length when no reference
//! is recorded). Every quantity is in milliseconds.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::policy::EmissionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyMetrics {
    pub al: f64,
    pub ap: f64,
    pub dal: f64,
    pub start_offset: f64,
    pub end_offset: f64,
    pub laal: f64,
    pub atd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discontinuity {
    pub sum: f64,
    pub ave: f64,
    pub num: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamingDegree {
    pub num_chunks: usize,
    pub discontinuity: Discontinuity,
    pub rtf: f64,
}

fn check(trace: &EmissionTrace) -> Result<(), EvalError> {
    if trace.t.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    if trace.totals.x_ms.is_nan() || trace.totals.x_ms <= 0.0 {
        return Err(EvalError::InvalidTrace(format!("source duration {} ms", trace.totals.x_ms)));
    }
    if !(trace.unit_ms > 0.0 && trace.frame_ms > 0.0) {
        return Err(EvalError::InvalidTrace("frame and unit durations must be positive".into()));
    }
    Ok(())
}

/// Reference output length in frames, falling back to the emitted length.
fn reference_frames(trace: &EmissionTrace) -> f64 {
    match trace.totals.reference_s_ms {
        Some(ms) if ms > 0.0 => ms / trace.unit_ms,
        _ => trace.t.len() as f64,
    }
}

/// `τ = min{i : t_i ≥ |X|}` over ideal times, or `N` if no output reaches `|X|`.
fn tau(t_ideal: &[f64], x: f64) -> usize {
    t_ideal.iter().position(|&v| v >= x).map_or(t_ideal.len(), |i| i + 1)
}

fn lagging(t: &[f64], tau: usize, x: f64, s: f64) -> f64 {
    let rate = x / s;
    (0..tau).map(|i| t[i] - i as f64 * rate).sum::<f64>() / tau as f64
}

fn latency_from(trace: &EmissionTrace, t: &[f64]) -> LatencyMetrics {
    let x = trace.totals.x_ms;
    let n = t.len();
    let nf = n as f64;
    let s_ref = reference_frames(trace);
    // τ is anchored on the ideal timeline so that compute-aware variants
    // average over the same outputs.
    let tau = tau(&trace.t, x);
    let al = lagging(t, tau, x, s_ref);
    let laal = lagging(t, tau, x, s_ref.max(nf));
    let ap = t.iter().sum::<f64>() / (x * nf);

    let step = x / nf;
    let mut prev = f64::NEG_INFINITY;
    let mut dal = 0.0;
    for (i, &ti) in t.iter().enumerate() {
        let tp = if i == 0 { ti } else { ti.max(prev + step) };
        dal += tp - i as f64 * step;
        prev = tp;
    }
    dal /= nf;

    let frame = trace.frame_ms;
    let atd = t
        .iter()
        .enumerate()
        .map(|(i, &ti)| {
            let pos = ((i + 1) as f64 * step).min(x);
            // Absorb rounding noise so exact frame boundaries stay in their frame.
            let xi = ((pos / frame - 1e-9).ceil() * frame).min(x);
            ti - xi
        })
        .sum::<f64>()
        / nf;

    LatencyMetrics {
        al,
        ap,
        dal,
        start_offset: t[0],
        end_offset: t[n - 1] - x,
        laal,
        atd,
    }
}

/// Ideal-clock latency metrics.
pub fn compute_latency_metrics(trace: &EmissionTrace) -> Result<LatencyMetrics, EvalError> {
    check(trace)?;
    Ok(latency_from(trace, &trace.t))
}

/// The same metrics on the compute-aware timeline `t_ca`.
pub fn compute_ca_metrics(trace: &EmissionTrace) -> Result<LatencyMetrics, EvalError> {
    check(trace)?;
    if trace.t_ca.len() != trace.t.len() {
        return Err(EvalError::MissingComputeClock {
            t: trace.t.len(),
            t_ca: trace.t_ca.len(),
        });
    }
    Ok(latency_from(trace, &trace.t_ca))
}

/// Number of output segments, silences in playback, and the real-time factor.
///
/// Playback of a segment starts when it is emitted or when the previous
/// segment finishes playing, whichever is later. A silence opens whenever a
/// segment is emitted after the previous one has finished.
pub fn compute_streaming_degree(trace: &EmissionTrace) -> Result<StreamingDegree, EvalError> {
    check(trace)?;
    let mut sum = 0.0;
    let mut num = 0;
    let mut playback_end: Option<f64> = None;
    for seg in &trace.segments {
        let start = match playback_end {
            Some(end) if seg.ms > end => {
                sum += seg.ms - end;
                num += 1;
                seg.ms
            }
            Some(end) => end,
            None => seg.ms,
        };
        playback_end = Some(start + seg.len as f64 * trace.unit_ms);
    }
    let ave = if num > 0 { sum / num as f64 } else { 0.0 };
    Ok(StreamingDegree {
        num_chunks: trace.segments.len().max(1),
        discontinuity: Discontinuity { sum, ave, num },
        rtf: trace.t[trace.t.len() - 1] / trace.totals.x_ms,
    })
}

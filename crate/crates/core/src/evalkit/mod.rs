//! Quality, latency and streaming-degree evaluation.
//!
//! [`metrics`] scores single emission traces, [`bleu`] scores token
//! sequences, and the corpus helpers here run a policy over a corpus and
//! aggregate everything into a [`MetricsReport`].

pub mod bleu;
pub mod metrics;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{corpus_bleu, BLEU_ORDER};
pub use metrics::{
    compute_ca_metrics, compute_latency_metrics, compute_streaming_degree, Discontinuity, LatencyMetrics,
    StreamingDegree,
};

use crate::model::{ChunkSize, Model};
use crate::policy::{run_offline_inference, run_simul_inference, run_waitk_inference, InferenceOptions, InferenceOutput, PolicyError};
use crate::toyspeech::Corpus;
use crate::vocab::EOS;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("trace has no emitted outputs")]
    EmptyTrace,
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("trace has no compute-aware timestamps ({t_ca} for {t} outputs)")]
    MissingComputeClock { t: usize, t_ca: usize },
    #[error("{hypotheses} hypotheses for {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("corpus has no samples")]
    EmptyCorpus,
}

/// Which inference procedure produced a set of outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum EvalMode {
    Offline,
    Simul { chunk: ChunkSize },
    WaitK { k: usize },
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Offline => write!(f, "offline"),
            Self::Simul { chunk } => write!(f, "simul-C{chunk}"),
            Self::WaitK { k } => write!(f, "waitk-k{k}"),
        }
    }
}

/// Corpus-level scores of one evaluation run.
///
/// Latency and streaming figures are means over samples with at least one
/// emitted unit; samples without output are counted in `empty_outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub samples: usize,
    pub empty_outputs: usize,
    pub latency: Option<LatencyMetrics>,
    pub latency_ca: Option<LatencyMetrics>,
    pub num_chunks: Option<f64>,
    pub discontinuity_sum: Option<f64>,
    pub discontinuity_ave: Option<f64>,
    pub discontinuity_num: Option<f64>,
    pub rtf: Option<f64>,
    pub unit_bleu: f64,
    pub text_bleu: f64,
    /// Fraction of samples whose units equal the reference exactly.
    pub unit_exact_match: f64,
    /// Fraction of samples whose text equals the reference exactly.
    pub text_exact_match: f64,
}

const CSV_COLUMNS: [&str; 26] = [
    "mode",
    "samples",
    "empty_outputs",
    "AL",
    "AP",
    "DAL",
    "StartOffset",
    "EndOffset",
    "LAAL",
    "ATD",
    "AL_CA",
    "AP_CA",
    "DAL_CA",
    "StartOffset_CA",
    "EndOffset_CA",
    "LAAL_CA",
    "ATD_CA",
    "NumChunks",
    "Discontinuity_Sum",
    "Discontinuity_Ave",
    "Discontinuity_Num",
    "RTF",
    "unit_bleu",
    "text_bleu",
    "unit_exact_match",
    "text_exact_match",
];

fn latency_fields(m: Option<&LatencyMetrics>) -> [Option<f64>; 7] {
    match m {
        Some(m) => [
            Some(m.al),
            Some(m.ap),
            Some(m.dal),
            Some(m.start_offset),
            Some(m.end_offset),
            Some(m.laal),
            Some(m.atd),
        ],
        None => [None; 7],
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl MetricsReport {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    /// One CSV row matching [`MetricsReport::csv_header`]; undefined metrics are empty cells.
    pub fn csv_row(&self) -> String {
        let mut cells = vec![self.mode.to_string(), self.samples.to_string(), self.empty_outputs.to_string()];
        cells.extend(latency_fields(self.latency.as_ref()).into_iter().map(cell));
        cells.extend(latency_fields(self.latency_ca.as_ref()).into_iter().map(cell));
        for v in [
            self.num_chunks,
            self.discontinuity_sum,
            self.discontinuity_ave,
            self.discontinuity_num,
            self.rtf,
            Some(self.unit_bleu),
            Some(self.text_bleu),
            Some(self.unit_exact_match),
            Some(self.text_exact_match),
        ] {
            cells.push(cell(v));
        }
        cells.join(",")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}

fn mean_latency(all: &[LatencyMetrics]) -> Option<LatencyMetrics> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let avg = |f: fn(&LatencyMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    Some(LatencyMetrics {
        al: avg(|m| m.al),
        ap: avg(|m| m.ap),
        dal: avg(|m| m.dal),
        start_offset: avg(|m| m.start_offset),
        end_offset: avg(|m| m.end_offset),
        laal: avg(|m| m.laal),
        atd: avg(|m| m.atd),
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Emitted target tokens without the terminating `<eos>`.
pub fn text_content(text: &[usize]) -> &[usize] {
    match text.last() {
        Some(&EOS) => &text[..text.len() - 1],
        _ => text,
    }
}

/// Scores precomputed outputs against `corpus`.
pub fn evaluate_outputs(corpus: &Corpus, outputs: &[InferenceOutput], mode: EvalMode) -> Result<MetricsReport, EvalError> {
    if corpus.samples.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if outputs.len() != corpus.samples.len() {
        return Err(EvalError::LengthMismatch {
            hypotheses: outputs.len(),
            references: corpus.samples.len(),
        });
    }
    let mut latency = Vec::new();
    let mut latency_ca = Vec::new();
    let mut streaming = Vec::new();
    for out in outputs.iter().filter(|o| !o.trace.t.is_empty()) {
        latency.push(compute_latency_metrics(&out.trace)?);
        latency_ca.push(compute_ca_metrics(&out.trace)?);
        streaming.push(compute_streaming_degree(&out.trace)?);
    }

    let unit_hyps: Vec<Vec<usize>> = outputs.iter().map(|o| o.units.clone()).collect();
    let unit_refs: Vec<Vec<usize>> = corpus.samples.iter().map(|s| s.u.clone()).collect();
    let text_hyps: Vec<Vec<usize>> = outputs.iter().map(|o| text_content(&o.text).to_vec()).collect();
    let text_refs: Vec<Vec<usize>> = corpus.samples.iter().map(|s| s.y_content().to_vec()).collect();
    let n = corpus.samples.len() as f64;
    let exact = |h: &[Vec<usize>], r: &[Vec<usize>]| h.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / n;

    Ok(MetricsReport {
        mode,
        samples: corpus.samples.len(),
        empty_outputs: outputs.len() - latency.len(),
        latency: mean_latency(&latency),
        latency_ca: mean_latency(&latency_ca),
        num_chunks: mean(streaming.iter().map(|s| s.num_chunks as f64)),
        discontinuity_sum: mean(streaming.iter().map(|s| s.discontinuity.sum)),
        discontinuity_ave: mean(streaming.iter().map(|s| s.discontinuity.ave)),
        discontinuity_num: mean(streaming.iter().map(|s| s.discontinuity.num as f64)),
        rtf: mean(streaming.iter().map(|s| s.rtf)),
        unit_bleu: corpus_bleu(&unit_hyps, &unit_refs)?,
        text_bleu: corpus_bleu(&text_hyps, &text_refs)?,
        unit_exact_match: exact(&unit_hyps, &unit_refs),
        text_exact_match: exact(&text_hyps, &text_refs),
    })
}

/// Runs `mode` over every sample, recording the reference output duration
/// in each trace.
pub fn run_corpus(
    model: &Model,
    corpus: &Corpus,
    mode: EvalMode,
    opts: &InferenceOptions,
) -> Result<Vec<InferenceOutput>, EvalError> {
    corpus
        .samples
        .iter()
        .map(|sample| {
            let mut out = match mode {
                EvalMode::Offline => run_offline_inference(model, &sample.x, opts)?,
                EvalMode::Simul { chunk } => run_simul_inference(model, &sample.x, chunk, opts)?,
                EvalMode::WaitK { k } => run_waitk_inference(model, &sample.x, k, opts)?,
            };
            out.trace.totals.reference_s_ms = Some(sample.u.len() as f64 * opts.unit_ms);
            Ok(out)
        })
        .collect()
}

/// Runs and scores `mode` over `corpus`.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    mode: EvalMode,
    opts: &InferenceOptions,
) -> Result<(MetricsReport, Vec<InferenceOutput>), EvalError> {
    let outputs = run_corpus(model, corpus, mode, opts)?;
    let report = evaluate_outputs(corpus, &outputs, mode)?;
    Ok((report, outputs))
}

/// Quality against latency across chunk sizes, ordered by ascending AL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityLatencyCurve {
    pub rows: Vec<MetricsReport>,
}

#[derive(Serialize)]
struct PlotSeries {
    name: &'static str,
    x: &'static str,
    y: &'static str,
    /// `(label, x, y)` per curve row with a defined latency.
    points: Vec<(String, f64, f64)>,
}

impl QualityLatencyCurve {
    pub fn to_csv(&self) -> String {
        let mut out = MetricsReport::csv_header();
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_row());
            out.push('\n');
        }
        out
    }

    /// Plot data: unit BLEU against AL and against AL_CA.
    pub fn plot_json(&self) -> String {
        let series = |name, x, pick: fn(&MetricsReport) -> Option<f64>| PlotSeries {
            name,
            x,
            y: "unit_bleu",
            points: self
                .rows
                .iter()
                .filter_map(|r| pick(r).map(|v| (r.mode.to_string(), v, r.unit_bleu)))
                .collect(),
        };
        let all = [
            series("ideal", "AL", |r| r.latency.map(|m| m.al)),
            series("computation_aware", "AL_CA", |r| r.latency_ca.map(|m| m.al)),
        ];
        serde_json::to_string_pretty(&serde_json::json!({ "series": all })).expect("plot data always serializes")
    }
}

/// Evaluates simultaneous inference for every chunk size in `grid`.
pub fn quality_latency_curve(
    model: &Model,
    corpus: &Corpus,
    grid: &[ChunkSize],
    opts: &InferenceOptions,
) -> Result<QualityLatencyCurve, EvalError> {
    let mut rows = Vec::with_capacity(grid.len());
    for &chunk in grid {
        let (report, _) = evaluate(model, corpus, EvalMode::Simul { chunk }, opts)?;
        log::info!("curve point {}: AL {:?}, unit BLEU {:.2}", report.mode, report.latency.map(|m| m.al), report.unit_bleu);
        rows.push(report);
    }
    let key = |r: &MetricsReport| r.latency.map_or(f64::INFINITY, |m| m.al);
    rows.sort_by(|a, b| key(a).total_cmp(&key(b)));
    Ok(QualityLatencyCurve { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::EmissionTrace;

    fn trace(t: Vec<f64>, x: f64) -> EmissionTrace {
        EmissionTrace::from_times(x, 1.0, 1.0, t.clone(), t)
    }

    #[test]
    fn hand_fixture() {
        let tr = trace(vec![1.0, 2.0, 3.0, 4.0], 4.0);
        let m = compute_latency_metrics(&tr).unwrap();
        assert!((m.al - 1.0).abs() < 1e-12);
        assert!((m.ap - 0.625).abs() < 1e-12);
        assert!((m.dal - 1.0).abs() < 1e-12);
        assert_eq!(m.start_offset, 1.0);
        assert_eq!(m.end_offset, 0.0);
    }

    #[test]
    fn discontinuity_uses_playback_timeline() {
        let mut tr = EmissionTrace::from_times(1000.0, 40.0, 20.0, vec![320.0; 5], vec![320.0; 5]);
        tr.push_outputs(2, 640.0, 640.0, 99);
        let s = compute_streaming_degree(&tr).unwrap();
        assert_eq!(s.num_chunks, 2);
        assert_eq!(s.discontinuity.num, 1);
        assert!((s.discontinuity.sum - 220.0).abs() < 1e-12);
        assert!((s.discontinuity.ave - 220.0).abs() < 1e-12);
    }

    #[test]
    fn ca_requires_compute_channel() {
        let mut tr = trace(vec![1.0, 2.0], 2.0);
        tr.t_ca.clear();
        assert!(matches!(compute_ca_metrics(&tr), Err(EvalError::MissingComputeClock { .. })));
        assert!(matches!(compute_latency_metrics(&trace(vec![], 2.0)), Err(EvalError::EmptyTrace)));
    }

    #[test]
    fn csv_row_has_header_width() {
        let report = MetricsReport {
            mode: EvalMode::Simul {
                chunk: ChunkSize::Infinite,
            },
            samples: 1,
            empty_outputs: 1,
            latency: None,
            latency_ca: None,
            num_chunks: None,
            discontinuity_sum: None,
            discontinuity_ave: None,
            discontinuity_num: None,
            rtf: None,
            unit_bleu: 0.0,
            text_bleu: 0.0,
            unit_exact_match: 0.0,
            text_exact_match: 0.0,
        };
        assert_eq!(report.csv_row().split(',').count(), MetricsReport::csv_header().split(',').count());
        assert!(report.csv_row().starts_with("simul-Cinf,"));
        let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}

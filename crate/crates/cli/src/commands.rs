//! One function per subcommand. Each writes its outputs plus the resolved
//! configuration into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use simulstream::evalkit::{evaluate, quality_latency_curve, text_content, EvalMode, MetricsReport};
use simulstream::model::{
    argmax, load_training_checkpoint, save_training_checkpoint, ChunkSize, Model, StepLog, TrainConfig, TrainingState,
};
use simulstream::policy::run_simul_inference;
use simulstream::toyspeech::{read_corpus, synthesize_corpus, write_corpus, Corpus, Split, ToyLanguageSpec};
use simulstream::vocab::BLANK;

use crate::config::{Mode, RunConfig};
use crate::UsageError;

/// Chunk size used by `eval --mode simul` and `inspect` when none is given.
const DEFAULT_CHUNK: ChunkSize = ChunkSize::Finite(8);
const LOSS_FILE: &str = "loss.csv";
const CHECKPOINT_DIR: &str = "checkpoint";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| usage(format!("missing {flag}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Prints to standard output; a closed pipe (as with `| head`) is not an error.
fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing to standard output"),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Accepts either a checkpoint directory or a `train` output directory.
fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = required(&cfg.paths.corpus, "--corpus")?;
    let mut corpus = read_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    if let Some(limit) = cfg.eval.limit {
        corpus.samples.truncate(limit);
    }
    if corpus.samples.is_empty() {
        return Err(usage(format!("corpus {} has no samples to use", path.display())));
    }
    Ok(corpus)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let dir = checkpoint_dir(required(&cfg.paths.ckpt, "--ckpt")?);
    let (model, _) = Model::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(model)
}

#[derive(Serialize)]
struct SplitStats {
    samples: usize,
    mean_frames: f64,
    max_frames: usize,
    mean_source_tokens: f64,
    mean_target_tokens: f64,
    mean_units: f64,
    /// Mean target tokens per source frame.
    mean_text_per_frame: f64,
    /// Mean units per target token, which sets the upsampling rate.
    mean_unit_ratio: f64,
}

fn split_stats(corpus: &Corpus) -> SplitStats {
    let n = corpus.samples.len().max(1) as f64;
    let avg = |f: &dyn Fn(&simulstream::toyspeech::Sample) -> f64| corpus.samples.iter().map(f).sum::<f64>() / n;
    SplitStats {
        samples: corpus.samples.len(),
        mean_frames: avg(&|s| s.num_frames() as f64),
        max_frames: corpus.max_frames(),
        mean_source_tokens: avg(&|s| s.a.len() as f64),
        mean_target_tokens: avg(&|s| s.y_content().len() as f64),
        mean_units: avg(&|s| s.u.len() as f64),
        mean_text_per_frame: avg(&|s| s.y_content().len() as f64 / s.num_frames() as f64),
        mean_unit_ratio: corpus.mean_unit_ratio(),
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.out, "--out")?;
    if cfg.data.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let spec = ToyLanguageSpec::generate(&cfg.toy_params()).map_err(|e| usage(format!("invalid toy language: {e}")))?;
    create_dir(out)?;
    let tenth = (cfg.data.n / 10).max(1);
    let splits = [
        (Split::Train, cfg.data.n),
        (Split::Valid, cfg.data.n_valid.unwrap_or(tenth)),
        (Split::Test, cfg.data.n_test.unwrap_or(tenth)),
    ];
    let mut stats = serde_json::Map::new();
    for (split, n) in splits {
        if n == 0 {
            return Err(usage(format!("{} split must have at least one sample", split.name())));
        }
        let corpus = synthesize_corpus(&spec, split, n)?;
        let path = out.join(format!("{}.jsonl", split.name()));
        write_corpus(&corpus, &path)?;
        log::info!("wrote {} samples to {}", n, path.display());
        stats.insert(split.name().to_string(), serde_json::to_value(split_stats(&corpus))?);
    }
    let text = serde_json::to_string_pretty(&stats)?;
    write_file(&out.join("stats.json"), format!("{text}\n"))?;
    print_stdout(&text)?;
    cfg.write_snapshot(out, "gen-data")
}

fn loss_header() -> &'static str {
    "step,chunk,s2ut,ar_s2tt,asr,nar_s2tt,total,lr,grad_norm,skipped"
}

fn loss_row(l: &StepLog) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        l.step, l.chunk, l.s2ut, l.ar_s2tt, l.asr, l.nar_s2tt, l.total, l.lr, l.grad_norm, l.skipped
    )
}

/// Rows of an earlier `loss.csv` up to and including `step`.
fn previous_loss_rows(train_dir: &Path, step: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(train_dir.join(LOSS_FILE)) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|line| {
            line.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(str::to_string)
        .collect()
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.out, "--out")?;
    let corpus = read_corpus(required(&cfg.paths.corpus, "--corpus")?).context("loading training corpus")?;
    if corpus.samples.is_empty() {
        return Err(usage("training corpus is empty"));
    }
    let (mut state, mut rows) = match &cfg.paths.ckpt {
        Some(path) => {
            let dir = checkpoint_dir(path);
            let state = load_training_checkpoint(&dir).with_context(|| format!("resuming from {}", dir.display()))?;
            let train_dir = if dir == *path { dir.parent().unwrap_or(&dir).to_path_buf() } else { path.clone() };
            let rows = previous_loss_rows(&train_dir, state.step());
            log::info!("resuming at step {} from {}", state.step(), dir.display());
            (state, rows)
        }
        None => {
            let model_config = cfg.model_config(&corpus)?;
            model_config.validate().map_err(|e| usage(e.to_string()))?;
            let train_config = TrainConfig {
                steps: cfg.train.steps,
                batch_size: cfg.train.batch_size,
                seed: cfg.seed,
                adam: cfg.adam(),
                clip_norm: cfg.train.clip_norm,
            };
            (TrainingState::new(model_config, train_config)?, Vec::new())
        }
    };
    if cfg.train.steps < state.step() {
        return Err(usage(format!(
            "--steps {} is below the checkpoint's step {}",
            cfg.train.steps,
            state.step()
        )));
    }
    state.config.steps = cfg.train.steps;
    create_dir(out)?;
    let log_every = cfg.train.log_every.max(1);
    let logs = state.run(&corpus, cfg.train.steps, |l| {
        if l.step % log_every == 0 || l.step == cfg.train.steps {
            log::info!(
                "step {} C={} total {:.4} s2ut {:.4} ar_s2tt {:.4} asr {:.4} nar_s2tt {:.4} lr {:.2e} |g| {:.3}",
                l.step,
                l.chunk,
                l.total,
                l.s2ut,
                l.ar_s2tt,
                l.asr,
                l.nar_s2tt,
                l.lr,
                l.grad_norm
            );
        }
    })?;
    rows.extend(logs.iter().map(loss_row));

    let mut csv = String::from(loss_header());
    csv.push('\n');
    for row in &rows {
        csv.push_str(row);
        csv.push('\n');
    }
    write_file(&out.join(LOSS_FILE), csv)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    save_training_checkpoint(&ckpt, &state).with_context(|| format!("saving {}", ckpt.display()))?;
    log::info!("checkpoint at step {} written to {}", state.step(), ckpt.display());
    cfg.write_snapshot(out, "train")
}

fn eval_mode(cfg: &RunConfig) -> Result<EvalMode> {
    let e = &cfg.eval;
    match e.mode {
        Mode::Offline => {
            if e.chunk.is_some() || e.k.is_some() {
                return Err(usage("--mode offline takes neither --C nor --k"));
            }
            Ok(EvalMode::Offline)
        }
        Mode::Simul => {
            if e.k.is_some() {
                return Err(usage("--k only applies to --mode waitk"));
            }
            Ok(EvalMode::Simul {
                chunk: e.chunk.unwrap_or(DEFAULT_CHUNK),
            })
        }
        Mode::Waitk => {
            if e.chunk.is_some() {
                return Err(usage("--C only applies to --mode simul"));
            }
            match e.k {
                Some(k) if k >= 1 => Ok(EvalMode::WaitK { k }),
                Some(_) => Err(usage("--k must be at least 1")),
                None => Err(usage("--mode waitk needs --k")),
            }
        }
    }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.out, "--out")?;
    let mode = eval_mode(cfg)?;
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg)?;
    let (report, outputs) = evaluate(&model, &corpus, mode, &cfg.eval.inference_options())?;

    let traces = out.join("traces");
    create_dir(&traces)?;
    let mut lines = String::new();
    for (i, o) in outputs.iter().enumerate() {
        o.trace
            .write(&traces.join(format!("sample_{i:05}.json")))
            .with_context(|| format!("writing trace {i}"))?;
        let record = json!({ "index": i, "text": text_content(&o.text), "units": o.units });
        writeln!(lines, "{record}").expect("writing to a String cannot fail");
    }
    write_file(&out.join("outputs.jsonl"), lines)?;
    write_file(&out.join("report.json"), format!("{}\n", report.to_json()))?;
    write_file(
        &out.join("report.csv"),
        format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
    )?;
    print_summary(&report);
    cfg.write_snapshot(out, "eval")
}

fn print_summary(r: &MetricsReport) {
    let al = |m: Option<simulstream::evalkit::LatencyMetrics>| m.map_or("n/a".to_string(), |m| format!("{:.1}", m.al));
    println!(
        "{}: unit BLEU {:.2}, unit exact match {:.3}, text BLEU {:.2}, AL {} ms, AL_CA {} ms",
        r.mode,
        r.unit_bleu,
        r.unit_exact_match,
        r.text_bleu,
        al(r.latency),
        al(r.latency_ca)
    );
}

pub fn curve(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.out, "--out")?;
    if cfg.eval.grid.is_empty() {
        return Err(usage("--grid needs at least one chunk size"));
    }
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg)?;
    let curve = quality_latency_curve(&model, &corpus, &cfg.eval.grid, &cfg.eval.inference_options())?;
    create_dir(out)?;
    write_file(&out.join("curve.csv"), curve.to_csv())?;
    write_file(&out.join("curve_plot.json"), format!("{}\n", curve.plot_json()))?;
    for row in &curve.rows {
        print_summary(row);
    }
    cfg.write_snapshot(out, "curve")
}

#[derive(Serialize)]
struct FrameLabel {
    frame: usize,
    label: usize,
}

/// Non-blank frame-wise argmax labels; blank frames are left out.
fn labelled_frames(log_probs: &simulstream::numerics::Tensor) -> Vec<FrameLabel> {
    (0..log_probs.rows())
        .map(|j| FrameLabel {
            frame: j,
            label: argmax(log_probs.row(j)),
        })
        .filter(|f| f.label != BLANK)
        .collect()
}

pub fn inspect(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let path = required(&cfg.paths.corpus, "--corpus")?;
    let corpus = read_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    let index = cfg.eval.sample;
    let sample = corpus
        .samples
        .get(index)
        .ok_or_else(|| usage(format!("--sample {index} is out of range; the corpus has {}", corpus.samples.len())))?;
    let chunk = cfg.eval.chunk.unwrap_or(DEFAULT_CHUNK);
    let frames = sample.num_frames();

    let probes = model.probe(&model.encode(&sample.x, chunk)?)?;
    let asr = labelled_frames(&probes.asr);
    let nar = labelled_frames(&probes.nar_s2tt);
    let in_span = asr
        .iter()
        .filter(|f| {
            sample
                .a_spans
                .iter()
                .position(|&(s, e)| s <= f.frame && f.frame < e)
                .is_some_and(|k| sample.a[k] == f.label)
        })
        .count();
    let span_agreement = if asr.is_empty() { 0.0 } else { in_span as f64 / asr.len() as f64 };

    let boundaries: Vec<usize> = match chunk {
        ChunkSize::Finite(c) => (1..).map(|k| k * c).take_while(|&b| b < frames).chain([frames]).collect(),
        ChunkSize::Infinite => vec![frames],
    };
    let output = run_simul_inference(&model, &sample.x, chunk, &cfg.eval.inference_options())?;
    let emissions: Vec<_> = output
        .trace
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| json!({ "position": i + 1, "token": t.token, "g": t.prefix_frames, "ms": t.ms }))
        .collect();

    let dump = json!({
        "sample": index,
        "chunk": chunk,
        "frames": frames,
        "frame_ms": cfg.eval.frame_ms,
        "chunk_boundaries": boundaries,
        "source_tokens": sample.a,
        "source_spans": sample.a_spans,
        "reference_text": sample.y_content(),
        "asr_labels": asr,
        "nar_s2tt_labels": nar,
        "asr_span_agreement": span_agreement,
        "emissions": emissions,
        "text": text_content(&output.text),
        "units": output.units,
    });
    let text = serde_json::to_string_pretty(&dump)?;
    match &cfg.paths.out {
        Some(out) => {
            create_dir(out)?;
            write_file(&out.join("inspect.json"), format!("{text}\n"))?;
            cfg.write_snapshot(out, "inspect")?;
        }
        None => print_stdout(&text)?,
    }
    Ok(())
}

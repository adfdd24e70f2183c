//! JSON-lines corpus files, optionally gzip-compressed (`.gz` extension).
//!
//! Line 1 is a header `{"format":"simulstream-corpus-v1","split":..,"spec":{..}}`;
//! every following line is one sample `{"x":[[..]..],"a":[..],"a_spans":[[s,e]..],"y":[..],"u":[..]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::{Corpus, Sample, Split, ToyLanguageSpec, ToySpeechError};
use crate::numerics::Tensor;

pub const CORPUS_FORMAT: &str = "simulstream-corpus-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    split: Split,
    spec: ToyLanguageSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    x: Vec<Vec<f64>>,
    a: Vec<usize>,
    a_spans: Vec<(usize, usize)>,
    y: Vec<usize>,
    u: Vec<usize>,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn io_err(path: &Path, source: std::io::Error) -> ToySpeechError {
    ToySpeechError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), ToySpeechError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out: Box<dyn Write> = if is_gz(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    let header = Header {
        format: CORPUS_FORMAT.to_string(),
        split: corpus.split,
        spec: corpus.spec.clone(),
    };
    write_line(&mut *out, path, &header)?;
    for s in &corpus.samples {
        let rec = Record {
            x: (0..s.x.rows()).map(|r| s.x.row(r).to_vec()).collect(),
            a: s.a.clone(),
            a_spans: s.a_spans.clone(),
            y: s.y.clone(),
            u: s.u.clone(),
        };
        write_line(&mut *out, path, &rec)?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

fn write_line<T: Serialize>(out: &mut dyn Write, path: &Path, value: &T) -> Result<(), ToySpeechError> {
    let text = serde_json::to_string(value).expect("corpus records always serialize");
    out.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    out.write_all(b"\n").map_err(|e| io_err(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Corpus, ToySpeechError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut reader = BufReader::new(reader);
    let display = path.display().to_string();
    let parse_err = |line: usize, offset: u64, message: String| ToySpeechError::Parse {
        path: display.clone(),
        line,
        offset,
        message,
    };

    let mut offset = 0u64;
    let mut line_no = 0usize;
    let mut header: Option<Header> = None;
    let mut samples = Vec::new();
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader
            .read_line(&mut buf)
            .map_err(|e| parse_err(line_no + 1, offset, format!("read failed: {e}")))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let start = offset;
        offset += n as u64;
        if !buf.ends_with('\n') {
            return Err(parse_err(
                line_no,
                start,
                format!("truncated record: no line terminator at byte offset {offset}"),
            ));
        }
        let text = buf.trim_end();
        match &header {
            None => {
                let h: Header = serde_json::from_str(text).map_err(|e| parse_err(line_no, start, e.to_string()))?;
                if h.format != CORPUS_FORMAT {
                    return Err(parse_err(
                        line_no,
                        start,
                        format!("unsupported format {:?}, expected {CORPUS_FORMAT:?}", h.format),
                    ));
                }
                h.spec.validate().map_err(|e| parse_err(line_no, start, e.to_string()))?;
                header = Some(h);
            }
            Some(h) => {
                let rec: Record = serde_json::from_str(text).map_err(|e| parse_err(line_no, start, e.to_string()))?;
                let rows = rec.x.len();
                let cols = rec.x.first().map_or(0, Vec::len);
                if rec.x.iter().any(|r| r.len() != cols) {
                    return Err(parse_err(line_no, start, "ragged frame rows".into()));
                }
                let x = Tensor::new(vec![rows, cols], rec.x.into_iter().flatten().collect())
                    .map_err(|e| parse_err(line_no, start, e.to_string()))?;
                let sample = Sample {
                    x,
                    a: rec.a,
                    a_spans: rec.a_spans,
                    y: rec.y,
                    u: rec.u,
                };
                sample.check(&h.spec).map_err(|m| parse_err(line_no, start, m))?;
                samples.push(sample);
            }
        }
    }
    let header = header.ok_or_else(|| parse_err(1, 0, "missing header line".into()))?;
    Ok(Corpus {
        spec: header.spec,
        split: header.split,
        samples,
    })
}

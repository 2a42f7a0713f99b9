//! Newline-delimited JSON feature-frame format, ground-truth files, and the
//! trace and alarm files written by `detect`.
//!
//! A frame stream optionally starts with a header line
//!
//! ```text
//! {"format":"seqwatch-frames","version":1,"n_classes":2}
//! ```
//!
//! followed by one record per frame:
//!
//! ```text
//! {"t":0,"flow":{"mean":1.0,"var":0.5,"skew":0.3,"kurt":2.8},
//!  "objects":[{"bbox":[0,0,10,10],"probs":[0.9,0.1]},{"loc":[5,5,100],"probs":[0.2,0.7]}]}
//! ```
//!
//! Each object carries exactly one of `bbox` (`[x1,y1,x2,y2]`) or `loc`
//! (`[cx,cy,area]`). Feature weights are applied at ingest time.

use std::io::{self, BufRead, Write};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::detector::{AlarmRecord, TracePoint};
use crate::features::{
    assemble_feature, bbox_to_location, BoundingBox, ClassProbs, FeatureWeights, FlowStats,
    FrameFeatures, LocationFeatures, ObjectMeta,
};
use crate::metrics::GroundTruth;

pub const FRAMES_FORMAT: &str = "seqwatch-frames";
pub const GT_FORMAT: &str = "seqwatch-gt";
pub const TRACE_FORMAT: &str = "seqwatch-trace";
pub const ALARMS_FORMAT: &str = "seqwatch-alarms";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: frame {got} does not follow frame {last}")]
    NonMonotone { line: usize, last: u64, got: u64 },
    #[error("line {line}: object has {got} class probabilities, stream uses {expected}")]
    InconsistentClasses { line: usize, expected: usize, got: usize },
    #[error("unsupported {what} header: {msg}")]
    Header { what: &'static str, msg: String },
    #[error("invalid ground truth: {0}")]
    GroundTruth(String),
}

impl IngestError {
    /// Line the error refers to, when it has one.
    pub fn line(&self) -> Option<usize> {
        match self {
            IngestError::Malformed { line, .. }
            | IngestError::NonMonotone { line, .. }
            | IngestError::InconsistentClasses { line, .. } => Some(*line),
            _ => None,
        }
    }
}

type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// Abort on the first bad line.
    #[default]
    Strict,
    /// Skip bad lines and count them.
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestConfig {
    pub weights: FeatureWeights,
    pub mode: ParseMode,
    /// Required class count; otherwise taken from the header or first object.
    pub n_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamHeader {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRecord {
    pub mean: f64,
    pub var: f64,
    pub skew: f64,
    pub kurt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc: Option<[f64; 3]>,
    pub probs: Vec<f64>,
}

/// One line of the frame stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFrameRecord {
    pub t: u64,
    pub flow: FlowRecord,
    #[serde(default)]
    pub objects: Vec<ObjectRecord>,
}

impl FeatureFrameRecord {
    /// Builds a record from frame features, preferring the raw object
    /// metadata and otherwise undoing the weights.
    pub fn from_frame(frame: &FrameFeatures, weights: &FeatureWeights) -> Result<Self> {
        let flow = FlowRecord {
            mean: frame.flow.mean,
            var: frame.flow.variance,
            skew: frame.flow.skewness,
            kurt: frame.flow.kurtosis,
        };
        let objects = match &frame.raw_object_meta {
            Some(meta) => meta
                .iter()
                .map(|m| ObjectRecord {
                    bbox: m.bbox.map(|b| [b.x1, b.y1, b.x2, b.y2]),
                    loc: m.bbox.is_none().then_some([m.location.cx, m.location.cy, m.location.area]),
                    probs: m.probs.as_slice().to_vec(),
                })
                .collect(),
            None => {
                if weights.location == 0.0 || weights.appearance == 0.0 {
                    return Err(IngestError::Malformed {
                        line: 0,
                        msg: format!("frame {} has no raw metadata and zero weights cannot be undone", frame.t),
                    });
                }
                frame
                    .objects
                    .iter()
                    .map(|v| {
                        let l = v.location();
                        ObjectRecord {
                            bbox: None,
                            loc: Some([l[0] / weights.location, l[1] / weights.location, l[2] / weights.location]),
                            probs: v.appearance().iter().map(|p| p / weights.appearance).collect(),
                        }
                    })
                    .collect()
            }
        };
        Ok(FeatureFrameRecord { t: frame.t, flow, objects })
    }
}

/// Stateful line parser enforcing ordering and class-count consistency.
#[derive(Debug, Clone)]
pub struct FrameParser {
    cfg: IngestConfig,
    last_t: Option<u64>,
    n_classes: Option<usize>,
    seen_record: bool,
}

impl FrameParser {
    pub fn new(cfg: IngestConfig) -> Self {
        let n_classes = cfg.n_classes;
        FrameParser { cfg, last_t: None, n_classes, seen_record: false }
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.n_classes
    }

    /// Parses one line. Blank lines and a leading header yield `None`.
    pub fn parse_line(&mut self, line_no: usize, bytes: &[u8]) -> Result<Option<FrameFeatures>> {
        let malformed = |msg: String| IngestError::Malformed { line: line_no, msg };
        if bytes.iter().all(u8::is_ascii_whitespace) {
            return Ok(None);
        }
        if !self.seen_record {
            if let Ok(h) = serde_json::from_slice::<StreamHeader>(bytes) {
                self.seen_record = true;
                if h.format != FRAMES_FORMAT || h.version != FORMAT_VERSION {
                    return Err(IngestError::Header {
                        what: "frame stream",
                        msg: format!("{} v{}", h.format, h.version),
                    });
                }
                if let Some(n) = h.n_classes {
                    match self.n_classes {
                        Some(want) if want != n => {
                            return Err(IngestError::InconsistentClasses { line: line_no, expected: want, got: n })
                        }
                        _ => self.n_classes = Some(n),
                    }
                }
                return Ok(None);
            }
        }
        self.seen_record = true;
        let rec: FeatureFrameRecord =
            serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
        self.parse_record(line_no, &rec).map(Some)
    }

    /// Validates and assembles an already decoded record; `line_no` is used
    /// in diagnostics.
    pub fn parse_record(&mut self, line_no: usize, rec: &FeatureFrameRecord) -> Result<FrameFeatures> {
        self.seen_record = true;
        if let Some(last) = self.last_t {
            if rec.t <= last {
                return Err(IngestError::NonMonotone { line: line_no, last, got: rec.t });
            }
        }
        let frame = self.assemble(line_no, rec)?;
        self.last_t = Some(rec.t);
        Ok(frame)
    }

    fn assemble(&mut self, line_no: usize, rec: &FeatureFrameRecord) -> Result<FrameFeatures> {
        let malformed = |msg: String| IngestError::Malformed { line: line_no, msg };
        let flow = FlowStats::new(rec.flow.mean, rec.flow.var, rec.flow.skew, rec.flow.kurt)
            .map_err(|e| malformed(e.to_string()))?;
        let mut n_classes = self.n_classes;
        let mut objects = Vec::with_capacity(rec.objects.len());
        let mut meta = Vec::with_capacity(rec.objects.len());
        for (i, o) in rec.objects.iter().enumerate() {
            let (bbox, location) = match (o.bbox, o.loc) {
                (Some(_), Some(_)) => {
                    return Err(malformed(format!("object {i} has both bbox and loc")));
                }
                (None, None) => return Err(malformed(format!("object {i} has neither bbox nor loc"))),
                (Some([x1, y1, x2, y2]), None) => {
                    let b = BoundingBox::new(x1, y1, x2, y2).map_err(|e| malformed(format!("object {i}: {e}")))?;
                    (Some(b), bbox_to_location(&b).map_err(|e| malformed(format!("object {i}: {e}")))?)
                }
                (None, Some([cx, cy, area])) => (
                    None,
                    LocationFeatures::new(cx, cy, area).map_err(|e| malformed(format!("object {i}: {e}")))?,
                ),
            };
            match n_classes {
                Some(want) if want != o.probs.len() => {
                    return Err(IngestError::InconsistentClasses { line: line_no, expected: want, got: o.probs.len() })
                }
                _ => n_classes = Some(o.probs.len()),
            }
            let probs = ClassProbs::new(o.probs.clone()).map_err(|e| malformed(format!("object {i}: {e}")))?;
            let v = assemble_feature(&flow, &location, &probs, &self.cfg.weights)
                .map_err(|e| malformed(format!("object {i}: {e}")))?;
            objects.push(v);
            meta.push(ObjectMeta { bbox, location, probs });
        }
        self.n_classes = n_classes;
        Ok(FrameFeatures { t: rec.t, objects, flow, raw_object_meta: Some(meta) })
    }
}

/// Iterator over frames of a newline-delimited source.
///
/// In lenient mode bad lines are skipped and recorded in
/// [`FrameReader::skipped`]; in strict mode the first error is yielded and
/// iteration ends.
pub struct FrameReader<R> {
    reader: R,
    parser: FrameParser,
    line_no: usize,
    buf: Vec<u8>,
    skipped: Vec<IngestError>,
    done: bool,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(reader: R, cfg: IngestConfig) -> Self {
        FrameReader { reader, parser: FrameParser::new(cfg), line_no: 0, buf: Vec::new(), skipped: Vec::new(), done: false }
    }

    pub fn skipped(&self) -> &[IngestError] {
        &self.skipped
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.parser.n_classes()
    }
}

impl<R: BufRead> Iterator for FrameReader<R> {
    type Item = Result<FrameFeatures>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => self.done = true,
                Ok(_) => {
                    self.line_no += 1;
                    match self.parser.parse_line(self.line_no, &self.buf) {
                        Ok(Some(frame)) => return Some(Ok(frame)),
                        Ok(None) => {}
                        Err(e) if self.parser.cfg.mode == ParseMode::Lenient && e.line().is_some() => {
                            self.skipped.push(e)
                        }
                        Err(e) => {
                            self.done = true;
                            return Some(Err(e));
                        }
                    }
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
        None
    }
}

#[derive(Debug, Default)]
pub struct ParsedStream {
    pub frames: Vec<FrameFeatures>,
    pub skipped: Vec<IngestError>,
    pub n_classes: Option<usize>,
}

pub fn parse_stream(reader: impl BufRead, cfg: IngestConfig) -> Result<ParsedStream> {
    let mut it = FrameReader::new(reader, cfg);
    let frames = it.by_ref().collect::<Result<Vec<_>>>()?;
    Ok(ParsedStream { frames, n_classes: it.n_classes(), skipped: it.skipped })
}

pub fn parse_str(text: &str, cfg: IngestConfig) -> Result<ParsedStream> {
    parse_stream(text.as_bytes(), cfg)
}

/// Outcome of a background reader.
#[derive(Debug, Default)]
pub struct ReaderSummary {
    pub frames: usize,
    pub skipped: usize,
}

/// Parses on a separate thread into a channel holding at most `capacity`
/// frames; the reader blocks while the channel is full. Dropping the
/// receiver stops the reader.
pub fn spawn_reader<R: BufRead + Send + 'static>(
    reader: R,
    cfg: IngestConfig,
    capacity: usize,
) -> (Receiver<Result<FrameFeatures>>, JoinHandle<ReaderSummary>) {
    let (tx, rx) = sync_channel(capacity);
    let handle = std::thread::spawn(move || {
        let mut it = FrameReader::new(reader, cfg);
        let mut frames = 0;
        for item in it.by_ref() {
            frames += usize::from(item.is_ok());
            if tx.send(item).is_err() {
                break;
            }
        }
        ReaderSummary { frames, skipped: it.skipped().len() }
    });
    (rx, handle)
}

fn write_json_line(out: &mut impl Write, value: &impl Serialize) -> io::Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(io::Error::other)?;
    out.write_all(b"\n")
}

/// Writes frames with a header line.
pub fn write_stream<'a>(
    mut out: impl Write,
    frames: impl IntoIterator<Item = &'a FrameFeatures>,
    weights: &FeatureWeights,
    n_classes: Option<usize>,
) -> Result<()> {
    write_json_line(
        &mut out,
        &StreamHeader { format: FRAMES_FORMAT.into(), version: FORMAT_VERSION, n_classes },
    )?;
    for f in frames {
        write_json_line(&mut out, &FeatureFrameRecord::from_frame(f, weights)?)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    stream_id: String,
}

fn json_values(text: &[u8]) -> Result<Vec<Value>> {
    serde_json::Deserializer::from_slice(text)
        .into_iter::<Value>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| IngestError::GroundTruth(e.to_string()))
}

fn parse_intervals(v: &Value) -> Result<Vec<(u64, u64)>> {
    serde_json::from_value(v.clone())
        .map_err(|e| IngestError::GroundTruth(format!("expected [[start, end], ...]: {e}")))
}

/// Reads a ground-truth document: a bare interval array, an object with an
/// `intervals` field, or a header line followed by an interval array.
pub fn load_ground_truth(mut reader: impl io::Read) -> Result<GroundTruth> {
    let mut text = Vec::new();
    reader.read_to_end(&mut text)?;
    let values = json_values(&text)?;
    let (stream_id, intervals) = match values.as_slice() {
        [] => (String::new(), Vec::new()),
        [v @ Value::Array(_)] => (String::new(), parse_intervals(v)?),
        [Value::Object(obj)] if obj.contains_key("intervals") => {
            check_gt_header(obj)?;
            (string_field(obj, "stream_id"), parse_intervals(&obj["intervals"])?)
        }
        [Value::Object(obj), v @ Value::Array(_)] => {
            check_gt_header(obj)?;
            (string_field(obj, "stream_id"), parse_intervals(v)?)
        }
        _ => return Err(IngestError::GroundTruth("unrecognized ground-truth layout".into())),
    };
    GroundTruth::new(stream_id, intervals).map_err(|e| IngestError::GroundTruth(e.to_string()))
}

fn string_field(obj: &serde_json::Map<String, Value>, key: &str) -> String {
    obj.get(key).and_then(Value::as_str).unwrap_or_default().to_string()
}

fn check_gt_header(obj: &serde_json::Map<String, Value>) -> Result<()> {
    let format = obj.get("format").and_then(Value::as_str);
    let version = obj.get("version").and_then(Value::as_u64);
    match (format, version) {
        (None, None) => Ok(()),
        (Some(GT_FORMAT), Some(v)) if v == u64::from(FORMAT_VERSION) => Ok(()),
        _ => Err(IngestError::Header { what: "ground truth", msg: format!("{format:?} v{version:?}") }),
    }
}

pub fn write_ground_truth(mut out: impl Write, gt: &GroundTruth) -> Result<()> {
    write_json_line(
        &mut out,
        &FileHeader { format: GT_FORMAT.into(), version: FORMAT_VERSION, stream_id: gt.stream_id.clone() },
    )?;
    write_json_line(&mut out, &gt.intervals)?;
    out.flush()?;
    Ok(())
}

fn write_records<T: Serialize>(
    mut out: impl Write,
    format: &str,
    stream_id: &str,
    items: impl IntoIterator<Item = T>,
) -> Result<()> {
    write_json_line(
        &mut out,
        &FileHeader { format: format.into(), version: FORMAT_VERSION, stream_id: stream_id.into() },
    )?;
    for item in items {
        write_json_line(&mut out, &item)?;
    }
    out.flush()?;
    Ok(())
}

fn read_records<T: for<'de> Deserialize<'de>>(reader: impl BufRead, format: &'static str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in reader.split(b'\n').enumerate() {
        let line = line?;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if let Ok(h) = serde_json::from_slice::<FileHeader>(&line) {
                if h.format != format || h.version != FORMAT_VERSION {
                    return Err(IngestError::Header { what: format, msg: format!("{} v{}", h.format, h.version) });
                }
                continue;
            }
        }
        out.push(
            serde_json::from_slice(&line)
                .map_err(|e| IngestError::Malformed { line: i + 1, msg: e.to_string() })?,
        );
    }
    Ok(out)
}

/// Per-frame `(t, delta, s)` lines.
pub fn write_trace(out: impl Write, stream_id: &str, trace: &[TracePoint]) -> Result<()> {
    write_records(out, TRACE_FORMAT, stream_id, trace)
}

pub fn read_trace(reader: impl BufRead) -> Result<Vec<TracePoint>> {
    read_records(reader, TRACE_FORMAT)
}

pub fn write_alarms(out: impl Write, stream_id: &str, alarms: &[AlarmRecord]) -> Result<()> {
    write_records(out, ALARMS_FORMAT, stream_id, alarms)
}

pub fn read_alarms(reader: impl BufRead) -> Result<Vec<AlarmRecord>> {
    read_records(reader, ALARMS_FORMAT)
}

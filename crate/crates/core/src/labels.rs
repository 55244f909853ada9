//! Multi-annotator arousal traces and the per-frame Gaussian label
//! `N(m_t, s_t)` derived from them.
//!
//! `m_t` is the plain mean over annotators (no evaluator weighting) and
//! `s_t` their unbiased standard deviation. Annotations are taken as given:
//! no normalization or smoothing is applied at ingestion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Annotation frame period in seconds (40 ms).
pub const FRAME_PERIOD_S: f64 = 0.04;

/// Floor applied to label standard deviations before any KL computation.
pub const S_MIN: f64 = 1e-3;

/// Values at most this far outside `[-1, 1]` are clamped with a warning on
/// ingestion; anything further is rejected.
pub const CLAMP_TOLERANCE: f64 = 0.01;

const TIME_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("need at least 2 annotators, got {0}")]
    TooFewAnnotators(usize),
    #[error("trace has no frames")]
    Empty,
    #[error("frame {frame} has {got} annotations, expected {expected}")]
    RaggedFrame { frame: usize, got: usize, expected: usize },
    #[error("annotation at frame {frame}, annotator {annotator} is {value}, outside [-1, 1]")]
    InvalidValue { frame: usize, annotator: usize, value: f64 },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: bad header ({detail})")]
    Header { line: usize, detail: String },
    #[error("line {line}: malformed row ({detail})")]
    MalformedRow { line: usize, detail: String },
    #[error("line {line}: time {time} does not increase")]
    NonMonotonicTime { line: usize, time: f64 },
    #[error("line {line}: time step {step} s, expected {expected} s")]
    TimeGap { line: usize, step: f64, expected: f64 },
    #[error("line {line}: value {value} outside [-1, 1]")]
    OutOfRange { line: usize, value: f64 },
}

/// `T x a` matrix of annotations for one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationTrace {
    recording_id: String,
    frame_period: f64,
    annotators: usize,
    /// Row-major, one row per frame.
    values: Vec<f64>,
}

/// Per-frame `N(m_t, s_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLabel {
    pub m: Vec<f64>,
    pub s: Vec<f64>,
}

impl GaussianLabel {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

impl AnnotationTrace {
    /// Builds a trace from per-frame rows of annotator values.
    pub fn new(recording_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self, LabelError> {
        let first = rows.first().ok_or(LabelError::Empty)?;
        let annotators = first.len();
        if annotators < 2 {
            return Err(LabelError::TooFewAnnotators(annotators));
        }
        let mut values = Vec::with_capacity(rows.len() * annotators);
        for (frame, row) in rows.iter().enumerate() {
            if row.len() != annotators {
                return Err(LabelError::RaggedFrame {
                    frame,
                    got: row.len(),
                    expected: annotators,
                });
            }
            for (annotator, &value) in row.iter().enumerate() {
                if !value.is_finite() || value.abs() > 1.0 {
                    return Err(LabelError::InvalidValue { frame, annotator, value });
                }
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            recording_id: recording_id.into(),
            frame_period: FRAME_PERIOD_S,
            annotators,
            values,
        })
    }

    pub fn recording_id(&self) -> &str {
        &self.recording_id
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn annotators(&self) -> usize {
        self.annotators
    }

    pub fn frames(&self) -> usize {
        self.values.len() / self.annotators
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.annotators..(t + 1) * self.annotators]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.annotators)
    }

    /// Ground-truth mean `m_t` per frame.
    pub fn mean_annotation(&self) -> Vec<f64> {
        self.rows().map(mean).collect()
    }

    /// Unbiased standard deviation `s_t` per frame.
    pub fn perception_uncertainty(&self) -> Vec<f64> {
        self.rows()
            .map(|r| unbiased_std(r).expect("trace has at least two annotators"))
            .collect()
    }

    /// `(m_t, max(s_t, S_MIN))` per frame.
    pub fn label_distribution(&self) -> GaussianLabel {
        GaussianLabel {
            m: self.mean_annotation(),
            s: self.perception_uncertainty().into_iter().map(|s| s.max(S_MIN)).collect(),
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `sqrt(sum (y - mean)^2 / (n - 1))`.
pub fn unbiased_std(values: &[f64]) -> Result<f64, LabelError> {
    if values.len() < 2 {
        return Err(LabelError::TooFewAnnotators(values.len()));
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|y| (y - m).powi(2)).sum();
    Ok((ss / (values.len() - 1) as f64).sqrt())
}

/// Reads a `time_s,ann_1,...,ann_a` CSV. The recording id is the file stem.
pub fn load_annotation_csv(path: &Path) -> Result<AnnotationTrace, LabelError> {
    let text = fs::read_to_string(path).map_err(|e| LabelError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_annotation_csv(&id, &text)
}

pub fn parse_annotation_csv(recording_id: &str, text: &str) -> Result<AnnotationTrace, LabelError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or(LabelError::Header {
        line: 1,
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"time_s") {
        return Err(LabelError::Header {
            line: 1,
            detail: "first column must be time_s".into(),
        });
    }
    for (i, c) in cols.iter().enumerate().skip(1) {
        if *c != format!("ann_{i}") {
            return Err(LabelError::Header {
                line: 1,
                detail: format!("column {} should be ann_{i}, found {c:?}", i + 1),
            });
        }
    }
    let annotators = cols.len() - 1;
    if annotators < 2 {
        return Err(LabelError::TooFewAnnotators(annotators));
    }

    let mut rows = Vec::new();
    let mut prev_time: Option<f64> = None;
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(LabelError::MalformedRow {
                line,
                detail: format!("{} fields, expected {}", fields.len(), cols.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, LabelError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| LabelError::MalformedRow {
                    line,
                    detail: format!("not a finite number: {s:?}"),
                })
        };
        let time = parse(fields[0])?;
        if let Some(prev) = prev_time {
            let step = time - prev;
            if step <= 0.0 {
                return Err(LabelError::NonMonotonicTime { line, time });
            }
            if (step - FRAME_PERIOD_S).abs() > TIME_TOLERANCE {
                return Err(LabelError::TimeGap {
                    line,
                    step,
                    expected: FRAME_PERIOD_S,
                });
            }
        }
        prev_time = Some(time);
        let mut row = Vec::with_capacity(annotators);
        for field in &fields[1..] {
            let value = parse(field)?;
            if value.abs() > 1.0 + CLAMP_TOLERANCE {
                return Err(LabelError::OutOfRange { line, value });
            }
            if value.abs() > 1.0 {
                log::warn!("line {line}: clamping annotation {value} into [-1, 1]");
            }
            row.push(value.clamp(-1.0, 1.0));
        }
        rows.push(row);
    }
    AnnotationTrace::new(recording_id, &rows)
}

/// Serializes a trace in the ingestion CSV format. Values use the shortest
/// round-trip representation.
pub fn format_annotation_csv(trace: &AnnotationTrace) -> String {
    let mut out = String::from("time_s");
    for i in 1..=trace.annotators() {
        let _ = write!(out, ",ann_{i}");
    }
    out.push('\n');
    for (t, row) in trace.rows().enumerate() {
        let _ = write!(out, "{:.2}", t as f64 * FRAME_PERIOD_S);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_annotation_csv(trace: &AnnotationTrace, path: &Path) -> Result<(), LabelError> {
    fs::write(path, format_annotation_csv(trace)).map_err(|e| LabelError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(rows: &[&[f64]]) -> AnnotationTrace {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        AnnotationTrace::new("r", &rows).unwrap()
    }

    #[test]
    fn six_annotator_frame() {
        let t = trace(&[&[0.1, 0.2, 0.3, 0.2, 0.1, 0.3]]);
        assert!((t.mean_annotation()[0] - 0.2).abs() < 1e-12);
        assert!((t.perception_uncertainty()[0] - (0.04f64 / 5.0).sqrt()).abs() < 1e-12);
        assert!((t.perception_uncertainty()[0] - 0.089_443).abs() < 1e-6);
    }

    #[test]
    fn two_annotators_zero_one() {
        let t = trace(&[&[0.0, 1.0]]);
        assert!((t.perception_uncertainty()[0] - 0.707_107).abs() < 1e-6);
        let l = t.label_distribution();
        assert_eq!(l.m, vec![0.5]);
        assert!((l.s[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn agreement_gives_zero_spread_and_floored_label() {
        let t = trace(&[&[0.5; 6]]);
        assert_eq!(t.mean_annotation(), vec![0.5]);
        assert_eq!(t.perception_uncertainty(), vec![0.0]);
        let t = trace(&[&[0.3, 0.3, 0.3]]);
        let l = t.label_distribution();
        assert!((l.m[0] - 0.3).abs() < 1e-15);
        assert_eq!(l.s, vec![S_MIN]);
    }

    #[test]
    fn antisymmetric_pair_has_zero_mean() {
        let t = trace(&[&[-0.4, 0.4]]);
        assert_eq!(t.mean_annotation(), vec![0.0]);
    }

    #[test]
    fn rejects_single_annotator_and_out_of_range() {
        assert_eq!(
            AnnotationTrace::new("r", &[vec![0.1]]),
            Err(LabelError::TooFewAnnotators(1))
        );
        assert!(matches!(
            AnnotationTrace::new("r", &[vec![0.1, 1.5]]),
            Err(LabelError::InvalidValue { .. })
        ));
        assert!(unbiased_std(&[1.0]).is_err());
    }

    #[test]
    fn parses_two_frame_fixture() {
        let t = parse_annotation_csv("fx", "time_s,ann_1,ann_2\n0.00,0.1,0.2\n0.04,0.3,0.4\n").unwrap();
        assert_eq!(t.frames(), 2);
        assert_eq!(t.annotators(), 2);
        assert_eq!(t.frame(1), &[0.3, 0.4]);
    }

    #[test]
    fn time_gap_names_line() {
        let err = parse_annotation_csv("fx", "time_s,ann_1,ann_2\n0.00,0.1,0.2\n0.04,0.3,0.4\n0.12,0,0\n").unwrap_err();
        assert!(matches!(err, LabelError::TimeGap { line: 4, .. }), "{err:?}");
        assert!(err.to_string().starts_with("line 4"));
    }

    #[test]
    fn csv_error_paths() {
        let e = parse_annotation_csv("fx", "time_s,ann_1,ann_2\n0.04,0.1,0.2\n0.00,0.3,0.4\n").unwrap_err();
        assert!(matches!(e, LabelError::NonMonotonicTime { line: 3, .. }));
        let e = parse_annotation_csv("fx", "time_s,ann_1,ann_2\n0.00,0.1\n").unwrap_err();
        assert!(matches!(e, LabelError::MalformedRow { line: 2, .. }));
        let e = parse_annotation_csv("fx", "time_s,ann_1,ann_2\n0.00,0.1,abc\n").unwrap_err();
        assert!(matches!(e, LabelError::MalformedRow { line: 2, .. }));
        let e = parse_annotation_csv("fx", "time_s,ann_1,ann_2\n0.00,0.1,1.5\n").unwrap_err();
        assert!(matches!(e, LabelError::OutOfRange { line: 2, .. }));
        let e = parse_annotation_csv("fx", "t,ann_1,ann_2\n").unwrap_err();
        assert!(matches!(e, LabelError::Header { .. }));
    }

    #[test]
    fn slight_overshoot_is_clamped() {
        let t = parse_annotation_csv("fx", "time_s,ann_1,ann_2\n0.00,1.004,-0.2\n").unwrap();
        assert_eq!(t.frame(0), &[1.0, -0.2]);
    }
}

//! Evaluation metrics, report files and significance comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::infer::{predict_distribution, recording_seed, PredictionDistribution};
use super::network::Model;
use super::ModelError;
use crate::dataset::{Recording, Split};
use crate::labels::{GaussianLabel, FRAME_PERIOD_S};
use crate::losses::{ccc, kl_metric};
use crate::stats::{paired_t_test_one_tailed, Degenerate};

pub const METRICS_HEADER: &str = "system,recording_id,ccc_m,ccc_s,kl";
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const MTL_NOTE: &str = "mtl_pu uses a single fitted scalar adjustment in place of a dynamic tuning layer";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub ccc_m: f64,
    pub ccc_s: Option<f64>,
    pub kl: Option<f64>,
}

/// Scores one recording's prediction against its label distribution.
pub fn score(label: &GaussianLabel, pred: &PredictionDistribution) -> Result<Scores, ModelError> {
    let ccc_m = ccc(&label.m, &pred.m_hat)?;
    let (ccc_s, kl) = match &pred.s_hat {
        Some(s_hat) => (
            Some(ccc(&label.s, s_hat)?),
            Some(kl_metric(&label.m, &label.s, &pred.m_hat, s_hat)?),
        ),
        None => (None, None),
    };
    Ok(Scores { ccc_m, ccc_s, kl })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingMetrics {
    pub system: String,
    pub recording_id: String,
    pub ccc_m: f64,
    pub ccc_s: Option<f64>,
    pub kl: Option<f64>,
}

/// Macro averages over recordings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub system: String,
    pub split: Split,
    pub recordings: usize,
    pub ccc_m: f64,
    pub ccc_s: Option<f64>,
    pub kl: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Vec<RecordingMetrics>,
    pub summary: Summary,
    pub predictions: Vec<(String, PredictionDistribution)>,
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Predicts and scores every recording with `model.config.n_infer` passes.
pub fn evaluate(model: &Model, recordings: &[Recording], split: Split) -> Result<Evaluation, ModelError> {
    if recordings.is_empty() {
        return Err(ModelError::EmptySplit(split.to_string()));
    }
    let system = model.kind.to_string();
    let mut metrics = Vec::with_capacity(recordings.len());
    let mut predictions = Vec::with_capacity(recordings.len());
    for (k, rec) in recordings.iter().enumerate() {
        let pred = predict_distribution(model, &rec.waveform, model.config.n_infer, recording_seed(model, k))?;
        let label = rec.trace.label_distribution();
        if pred.frames() != label.m.len() {
            return Err(ModelError::FrameMismatch {
                id: rec.id.clone(),
                predicted: pred.frames(),
                labels: label.m.len(),
            });
        }
        let s = score(&label, &pred)?;
        log::info!("{system} {}: ccc_m {:.4}", rec.id, s.ccc_m);
        metrics.push(RecordingMetrics {
            system: system.clone(),
            recording_id: rec.id.clone(),
            ccc_m: s.ccc_m,
            ccc_s: s.ccc_s,
            kl: s.kl,
        });
        predictions.push((rec.id.clone(), pred));
    }
    let summary = Summary {
        system: system.clone(),
        split,
        recordings: metrics.len(),
        ccc_m: macro_mean(metrics.iter().map(|m| Some(m.ccc_m))).expect("non-empty"),
        ccc_s: macro_mean(metrics.iter().map(|m| m.ccc_s)),
        kl: macro_mean(metrics.iter().map(|m| m.kl)),
        note: (model.kind == super::SystemKind::MtlPu).then(|| MTL_NOTE.to_string()),
    };
    Ok(Evaluation {
        metrics,
        summary,
        predictions,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_metrics_csv(metrics: &[RecordingMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(out, "{},{},{},{},{}", m.system, m.recording_id, m.ccc_m, opt(m.ccc_s), opt(m.kl));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<RecordingMetrics>, ModelError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(ModelError::Report(format!("metrics header must be '{METRICS_HEADER}'")));
    }
    let num = |s: &str, line: usize| -> Result<Option<f64>, ModelError> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|_| ModelError::Report(format!("line {line}: '{s}' is not a number")))
    };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 5 {
            return Err(ModelError::Report(format!("line {line_no}: expected 5 columns")));
        }
        out.push(RecordingMetrics {
            system: cells[0].to_string(),
            recording_id: cells[1].to_string(),
            ccc_m: num(cells[2], line_no)?
                .ok_or_else(|| ModelError::Report(format!("line {line_no}: ccc_m is required")))?,
            ccc_s: num(cells[3], line_no)?,
            kl: num(cells[4], line_no)?,
        });
    }
    Ok(out)
}

fn prediction_csv(pred: &PredictionDistribution) -> String {
    let mut out = String::from("time_s,m_hat,s_hat\n");
    for t in 0..pred.frames() {
        let s = pred.s_hat.as_ref().map(|s| s[t]);
        let _ = writeln!(out, "{:.2},{},{}", t as f64 * FRAME_PERIOD_S, pred.m_hat[t], opt(s));
    }
    out
}

fn samples_csv(pred: &PredictionDistribution) -> String {
    let mut out = String::from("time_s");
    for i in 1..=pred.samples.len() {
        let _ = write!(out, ",sample_{i}");
    }
    out.push('\n');
    for t in 0..pred.frames() {
        let _ = write!(out, "{:.2}", t as f64 * FRAME_PERIOD_S);
        for row in &pred.samples {
            let _ = write!(out, ",{}", row[t]);
        }
        out.push('\n');
    }
    out
}

fn write(path: &Path, text: &str) -> Result<(), ModelError> {
    fs::write(path, text).map_err(|e| ModelError::io(path, e))
}

/// Writes `metrics.csv`, `summary.json`, `predictions/<id>.csv` and, for
/// sampling systems, `samples/<id>.csv` under `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<(), ModelError> {
    let pred_dir = dir.join("predictions");
    fs::create_dir_all(&pred_dir).map_err(|e| ModelError::io(&pred_dir, e))?;
    write(&dir.join("metrics.csv"), &format_metrics_csv(&eval.metrics))?;
    let summary = serde_json::to_string_pretty(&eval.summary).expect("summary serializes");
    write(&dir.join("summary.json"), &(summary + "\n"))?;
    let with_samples = eval.predictions.iter().any(|(_, p)| !p.samples.is_empty());
    let sample_dir = dir.join("samples");
    if with_samples {
        fs::create_dir_all(&sample_dir).map_err(|e| ModelError::io(&sample_dir, e))?;
    }
    for (id, pred) in &eval.predictions {
        write(&pred_dir.join(format!("{id}.csv")), &prediction_csv(pred))?;
        if !pred.samples.is_empty() {
            write(&sample_dir.join(format!("{id}.csv")), &samples_csv(pred))?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CccM,
    CccS,
    Kl,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::CccM, Metric::CccS, Metric::Kl];

    pub fn name(self) -> &'static str {
        match self {
            Metric::CccM => "ccc_m",
            Metric::CccS => "ccc_s",
            Metric::Kl => "kl",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Kl
    }

    fn get(self, m: &RecordingMetrics) -> Option<f64> {
        match self {
            Metric::CccM => Some(m.ccc_m),
            Metric::CccS => m.ccc_s,
            Metric::Kl => m.kl,
        }
    }
}

/// One direction of one metric: is `better` significantly better than `worse`?
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: Metric,
    pub better: String,
    pub worse: String,
    pub p_value: f64,
    pub significant: bool,
    pub degenerate: Option<Degenerate>,
}

/// Paired one-tailed tests in both directions for every metric both
/// reports carry. Recording sets must match exactly.
pub fn compare(
    name_a: &str,
    a: &[RecordingMetrics],
    name_b: &str,
    b: &[RecordingMetrics],
) -> Result<Vec<ComparisonRow>, ModelError> {
    let index = |rows: &[RecordingMetrics]| -> Result<BTreeMap<String, RecordingMetrics>, ModelError> {
        let mut map = BTreeMap::new();
        for r in rows {
            if map.insert(r.recording_id.clone(), r.clone()).is_some() {
                return Err(ModelError::Report(format!("recording {} listed twice", r.recording_id)));
            }
        }
        Ok(map)
    };
    let (ia, ib) = (index(a)?, index(b)?);
    if !ia.keys().eq(ib.keys()) {
        let only_a: Vec<_> = ia.keys().filter(|k| !ib.contains_key(*k)).cloned().collect();
        let only_b: Vec<_> = ib.keys().filter(|k| !ia.contains_key(*k)).cloned().collect();
        return Err(ModelError::ReportMismatch(format!(
            "only in {name_a}: {only_a:?}; only in {name_b}: {only_b:?}"
        )));
    }
    let mut rows = Vec::new();
    for metric in Metric::ALL {
        let va: Option<Vec<f64>> = ia.values().map(|r| metric.get(r)).collect();
        let vb: Option<Vec<f64>> = ib.values().map(|r| metric.get(r)).collect();
        let (Some(va), Some(vb)) = (va, vb) else { continue };
        for (better, worse, x, y) in [(name_a, name_b, &va, &vb), (name_b, name_a, &vb, &va)] {
            // the test asks whether the first argument is larger
            let t = if metric.higher_is_better() {
                paired_t_test_one_tailed(x, y)?
            } else {
                paired_t_test_one_tailed(y, x)?
            };
            rows.push(ComparisonRow {
                metric,
                better: better.to_string(),
                worse: worse.to_string(),
                p_value: t.p_value,
                significant: t.significant(SIGNIFICANCE_LEVEL),
                degenerate: t.degenerate,
            });
        }
    }
    Ok(rows)
}

pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let flag = match r.degenerate {
            Some(Degenerate::AllZero) => " [no differences]",
            Some(Degenerate::ZeroVariance) => " [constant differences]",
            None => "",
        };
        let verdict = if r.significant {
            "significant"
        } else {
            "not significant"
        };
        let _ = writeln!(
            out,
            "{}: {} better than {}: p = {:.6} -> {verdict} at {SIGNIFICANCE_LEVEL}{flag}",
            r.metric.name(),
            r.better,
            r.worse,
            r.p_value
        );
    }
    out
}

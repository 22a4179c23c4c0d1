//! Prediction analysis: conflicting-set decomposition, length-bucket
//! accuracy, and attention heatmap export.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::data::Example;
use crate::error::{Error, Result};

/// One model's prediction for one example.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub id: usize,
    pub gold: u8,
    pub pred: u8,
    pub model: String,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.gold == self.pred
    }
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: {}", i + 1, e)))?;
        if !(1..=5).contains(&record.gold) || !(1..=5).contains(&record.pred) {
            return Err(Error::Data(format!("line {}: rating outside [1, 5]", i + 1)));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn save_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    for record in records {
        writeln!(out, "{}", serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?)?;
    }
    Ok(())
}

/// Accuracy of a prediction list restricted to a set of example ids; `None`
/// when the set is empty.
pub fn set_accuracy(records: &[PredictionRecord], ids: &[usize]) -> Option<f64> {
    if ids.is_empty() {
        return None;
    }
    let by_id: HashMap<usize, &PredictionRecord> = records.iter().map(|r| (r.id, r)).collect();
    let correct = ids.iter().filter(|id| by_id.get(id).is_some_and(|r| r.correct())).count();
    Some(correct as f64 / ids.len() as f64)
}

/// Per-set accuracies for one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSetAccuracy {
    pub model: String,
    pub overall: f64,
    pub conflicting: Option<f64>,
    pub non_conflicting: Option<f64>,
    pub union_set: Option<f64>,
}

/// Decomposition of a test set by prediction agreement between the
/// review-only and summary-only models. The union set is the conflicting
/// subset where at least one of the two is correct.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetDecomposition {
    pub conflicting: Vec<usize>,
    pub non_conflicting: Vec<usize>,
    pub union_set: Vec<usize>,
    pub accuracies: Vec<ModelSetAccuracy>,
}

impl SetDecomposition {
    pub fn total(&self) -> usize {
        self.conflicting.len() + self.non_conflicting.len()
    }

    pub fn conflicting_fraction(&self) -> f64 {
        self.conflicting.len() as f64 / self.total() as f64
    }

    /// Per-set accuracy rows for an additional model's predictions.
    pub fn accuracy_for(&self, records: &[PredictionRecord]) -> ModelSetAccuracy {
        let model = records.first().map(|r| r.model.clone()).unwrap_or_default();
        let correct = records.iter().filter(|r| r.correct()).count();
        ModelSetAccuracy {
            model,
            overall: correct as f64 / records.len().max(1) as f64,
            conflicting: set_accuracy(records, &self.conflicting),
            non_conflicting: set_accuracy(records, &self.non_conflicting),
            union_set: set_accuracy(records, &self.union_set),
        }
    }
}

/// Split examples into conflicting / non-conflicting sets by comparing the
/// two models' predictions id by id.
pub fn conflicting_set(
    review_preds: &[PredictionRecord],
    summary_preds: &[PredictionRecord],
) -> Result<SetDecomposition> {
    if review_preds.len() != summary_preds.len() {
        return Err(Error::Data(format!(
            "prediction lists differ in length: {} vs {}",
            review_preds.len(),
            summary_preds.len()
        )));
    }
    let by_id: HashMap<usize, &PredictionRecord> = summary_preds.iter().map(|r| (r.id, r)).collect();
    if by_id.len() != summary_preds.len() {
        return Err(Error::Data("duplicate example ids in summary predictions".into()));
    }
    let mut conflicting = Vec::new();
    let mut non_conflicting = Vec::new();
    let mut union_set = Vec::new();
    for review in review_preds {
        let summary = by_id
            .get(&review.id)
            .ok_or_else(|| Error::Data(format!("example id {} missing from summary predictions", review.id)))?;
        if summary.gold != review.gold {
            return Err(Error::Data(format!("example id {} has inconsistent gold ratings", review.id)));
        }
        if review.pred != summary.pred {
            conflicting.push(review.id);
            if review.correct() || summary.correct() {
                union_set.push(review.id);
            }
        } else {
            non_conflicting.push(review.id);
        }
    }
    let mut decomposition = SetDecomposition {
        conflicting,
        non_conflicting,
        union_set,
        accuracies: Vec::new(),
    };
    decomposition.accuracies = vec![
        decomposition.accuracy_for(review_preds),
        decomposition.accuracy_for(summary_preds),
    ];
    Ok(decomposition)
}

/// Accuracy within one half-open review-length interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    /// Exclusive upper edge; `None` for the open-ended last bucket.
    pub hi: Option<usize>,
    pub count: usize,
    pub accuracy: f64,
}

/// Group predictions by review token count into half-open buckets defined by
/// strictly increasing edges; empty buckets are absent from the result.
pub fn length_buckets(
    preds: &[PredictionRecord],
    examples: &[Example],
    edges: &[usize],
) -> Result<Vec<LengthBucket>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("bucket edges must be strictly increasing: {:?}", edges)));
    }
    let bucket_count = edges.len() + 1;
    let mut totals = vec![0usize; bucket_count];
    let mut correct = vec![0usize; bucket_count];
    for pred in preds {
        let example = examples
            .get(pred.id)
            .ok_or_else(|| Error::Data(format!("example id {} not in corpus of {}", pred.id, examples.len())))?;
        let n = example.review.len();
        let bucket = edges.iter().position(|e| n < *e).unwrap_or(edges.len());
        totals[bucket] += 1;
        if pred.correct() {
            correct[bucket] += 1;
        }
    }
    let mut buckets = Vec::new();
    for b in 0..bucket_count {
        if totals[b] == 0 {
            continue;
        }
        buckets.push(LengthBucket {
            lo: if b == 0 { 0 } else { edges[b - 1] },
            hi: edges.get(b).copied(),
            count: totals[b],
            accuracy: correct[b] as f64 / totals[b] as f64,
        });
    }
    Ok(buckets)
}

/// Min-max rescale to [0, 100]. A single weight is all the attention there
/// is and maps to 100; a degenerate span over several tokens (max == min)
/// maps everything to 0 so that nothing is highlighted.
pub fn rescale_weights(weights: &[f64]) -> Vec<f64> {
    if weights.len() == 1 {
        return vec![100.0];
    }
    let min = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; weights.len()];
    }
    weights.iter().map(|w| (w - min) / (max - min) * 100.0).collect()
}

/// Rescaled weights ≥ this value are visualized.
pub const HEATMAP_THRESHOLD: f64 = 50.0;

#[derive(Serialize, Deserialize)]
struct SidecarHead {
    raw: Vec<f64>,
    rescaled: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SidecarLayer {
    label: String,
    heads: Vec<SidecarHead>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    tokens: Vec<String>,
    layers: Vec<SidecarLayer>,
}

/// Write a standalone HTML heatmap plus a JSON sidecar with raw and rescaled
/// weights. Every recorded distribution must assign one weight per token;
/// weights are min-max rescaled to [0, 100] per layer and tokens at or above
/// 50 are colored with intensity proportional to the rescaled weight.
pub fn export_heatmap(trace: &AttentionTrace, tokens: &[String], out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    for layer in &trace.layers {
        for head in &layer.heads {
            if head.cols != tokens.len() || head.rows != 1 {
                return Err(Error::Data(format!(
                    "layer {} stores a {}x{} distribution but there are {} tokens",
                    layer.label,
                    head.rows,
                    head.cols,
                    tokens.len()
                )));
            }
        }
    }

    let mut sidecar = Sidecar { tokens: tokens.to_vec(), layers: Vec::new() };
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    html.push_str("<title>attention heatmap</title>\n<style>\n");
    html.push_str("body { font-family: sans-serif; margin: 2em; }\n");
    html.push_str(".tokens { line-height: 2.2; }\n");
    html.push_str(".tok { padding: 2px 3px; border-radius: 3px; }\n");
    html.push_str("</style>\n</head>\n<body>\n");

    for layer in &trace.layers {
        let mut sidecar_heads = Vec::new();
        html.push_str(&format!("<h3>{}</h3>\n", layer.label));
        for (hi, head) in layer.heads.iter().enumerate() {
            let rescaled = rescale_weights(&head.weights);
            if layer.heads.len() > 1 {
                html.push_str(&format!("<h4>head {}</h4>\n", hi + 1));
            }
            html.push_str("<p class=\"tokens\">");
            for (tok, w) in tokens.iter().zip(&rescaled) {
                if *w >= HEATMAP_THRESHOLD {
                    let alpha = w / 100.0;
                    html.push_str(&format!(
                        "<span class=\"tok\" style=\"background: rgba(255, 96, 0, {:.3})\" title=\"{:.1}\">{}</span> ",
                        alpha,
                        w,
                        html_escape(tok)
                    ));
                } else {
                    html.push_str(&format!("<span class=\"tok\">{}</span> ", html_escape(tok)));
                }
            }
            html.push_str("</p>\n");
            sidecar_heads.push(SidecarHead { raw: head.weights.clone(), rescaled });
        }
        sidecar.layers.push(SidecarLayer { label: layer.label.clone(), heads: sidecar_heads });
    }
    html.push_str("</body>\n</html>\n");

    std::fs::write(out, html)?;
    let sidecar_path = out.with_extension("json");
    let payload = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(sidecar_path, payload)?;
    Ok(())
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Read back the sidecar's raw weights for round-trip checks.
pub fn load_sidecar_raw(path: impl AsRef<Path>) -> Result<Vec<Vec<Vec<f64>>>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
    Ok(sidecar
        .layers
        .into_iter()
        .map(|l| l.heads.into_iter().map(|h| h.raw).collect())
        .collect())
}

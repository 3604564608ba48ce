//! Slide-level metrics: per-class precision/recall/F1, macro and weighted
//! F1, one-vs-rest AUROC and confusion matrices, after projecting both
//! predictions and labels into the evaluated class set.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::PredictionRecord;
use crate::error::{Error, IoContext, Result};
use crate::image::RgbImage;
use crate::manifest::Manifest;
use crate::taxonomy::{argmax, ClassSet, ClassSetName, StainClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_set: ClassSetName,
    pub per_class: Vec<PerClass>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// Binary AUROC for two-class sets, macro one-vs-rest otherwise; `None`
    /// when no class has both positives and negatives.
    pub auroc: Option<f64>,
    /// Raw counts, `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// Row-normalised confusion (rows with no support stay zero).
    pub confusion_normalized: Vec<Vec<f64>>,
    pub n_slides: usize,
    /// Slides skipped because the predictor abstained.
    pub abstained: Vec<String>,
}

/// Re-expresses a distribution over `source` as one over `target`. Every
/// source class must land on a single target class.
pub fn project_between(source: &ClassSet, target: &ClassSet, probs: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != source.len() {
        return Err(Error::InvalidDistribution(format!(
            "{} probabilities for the {}-class set `{}`",
            probs.len(),
            source.len(),
            source.name()
        )));
    }
    if source == target {
        return Ok(probs.to_vec());
    }
    let mut out = vec![0.0; target.len()];
    for (j, &p) in probs.iter().enumerate() {
        let members: Vec<StainClass> = source
            .domain()
            .filter(|c| source.project_index(*c).ok() == Some(j))
            .collect();
        let mut targets: Vec<usize> = members
            .iter()
            .map(|c| target.project_index(*c))
            .collect::<Result<Vec<_>>>()?;
        targets.dedup();
        match targets.as_slice() {
            [t] => out[*t] += p,
            [] if p == 0.0 => {}
            _ => {
                return Err(Error::Projection {
                    label: source.classes()[j].clone(),
                    set: target.name().to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Per-class and averaged scores from label/prediction index pairs.
pub fn classification_scores(truth: &[usize], pred: &[usize], classes: &[String]) -> (Vec<PerClass>, f64, f64, Vec<Vec<usize>>) {
    let c = classes.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[t][p] += 1;
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = (0..c).map(|r| confusion[r][k]).sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(PerClass {
            class: classes[k].clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let supported: Vec<&PerClass> = per_class.iter().filter(|p| p.support > 0).collect();
    let macro_f1 = if supported.is_empty() {
        0.0
    } else {
        supported.iter().map(|p| p.f1).sum::<f64>() / supported.len() as f64
    };
    let total: usize = supported.iter().map(|p| p.support).sum();
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        supported.iter().map(|p| p.f1 * p.support as f64).sum::<f64>() / total as f64
    };
    (per_class, macro_f1, weighted_f1, confusion)
}

pub fn macro_f1(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    let names: Vec<String> = (0..n_classes).map(|i| i.to_string()).collect();
    classification_scores(truth, pred, &names).1
}

/// Area under the ROC curve by the rank statistic, ties counted half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let npos = positive.iter().filter(|p| **p).count();
    let nneg = positive.len() - npos;
    if npos == 0 || nneg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = positive.iter().zip(&ranks).filter(|(p, _)| **p).map(|(_, r)| r).sum();
    Some((rank_sum - (npos * (npos + 1)) as f64 / 2.0) / (npos * nneg) as f64)
}

/// One-vs-rest AUROC averaged over classes with both positives and negatives;
/// for two classes, the plain AUROC of the second class.
pub fn multiclass_auroc(probs: &[Vec<f64>], truth: &[usize], n_classes: usize) -> Option<f64> {
    if n_classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        return auroc(&s, &pos);
    }
    let vals: Vec<f64> = (0..n_classes)
        .filter_map(|k| {
            let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == k).collect();
            auroc(&s, &pos)
        })
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Scores `records` against manifest labels in `target`.
pub fn evaluate(records: &[PredictionRecord], labels: &Manifest, target: &ClassSet) -> Result<EvalReport> {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let mut truth = Vec::new();
    let mut probs = Vec::new();
    let mut abstained = Vec::new();
    for r in sorted {
        let label = labels
            .get(&r.slide_id)
            .ok_or_else(|| Error::Manifest(format!("no label for predicted slide `{}`", r.slide_id)))?
            .fine_label;
        let t = target.project_index(label)?;
        match (&r.probs, r.abstain) {
            (Some(p), false) => {
                let source = ClassSet::by_name(r.class_set);
                probs.push(project_between(&source, target, p)?);
                truth.push(t);
            }
            _ => abstained.push(r.slide_id.clone()),
        }
    }
    if !abstained.is_empty() {
        log::warn!("{} slide(s) abstained and are not scored", abstained.len());
    }
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let (per_class, macro_f1, weighted_f1, confusion) = classification_scores(&truth, &pred, target.classes());
    for p in per_class.iter().filter(|p| p.support == 0) {
        if p.class != crate::taxonomy::OTHER {
            log::debug!("class `{}` has no support and is left out of the macro mean", p.class);
        }
    }
    let confusion_normalized = confusion
        .iter()
        .map(|row| {
            let s: usize = row.iter().sum();
            row.iter().map(|&v| if s > 0 { v as f64 / s as f64 } else { 0.0 }).collect()
        })
        .collect();
    Ok(EvalReport {
        class_set: target.name(),
        auroc: multiclass_auroc(&probs, &truth, target.len()),
        per_class,
        macro_f1,
        weighted_f1,
        confusion,
        confusion_normalized,
        n_slides: truth.len(),
        abstained,
    })
}

/// Evaluation on the external label space `{he_ffpe, he_fs, other}`; every
/// label must be one of the two H&E classes.
pub fn evaluate_external(records: &[PredictionRecord], labels: &Manifest) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Manifest("no predictions to evaluate".into()));
    }
    for r in records {
        let l = labels.label(&r.slide_id)?;
        if !matches!(l, StainClass::HeFfpe | StainClass::HeFs) {
            return Err(Error::Manifest(format!(
                "slide `{}` is labelled {l}, outside the external label space",
                r.slide_id
            )));
        }
    }
    evaluate(records, labels, &ClassSet::external_tcga())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldComparison {
    /// `a - b` macro F1 per fold.
    pub deltas: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

pub fn compare_folds(a: &[EvalReport], b: &[EvalReport]) -> Result<FoldComparison> {
    let fa: Vec<f64> = a.iter().map(|r| r.macro_f1).collect();
    let fb: Vec<f64> = b.iter().map(|r| r.macro_f1).collect();
    compare_fold_scores(&fa, &fb)
}

/// [`compare_folds`] on plain per-fold macro F1 values.
pub fn compare_fold_scores(a: &[f64], b: &[f64]) -> Result<FoldComparison> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument(format!("fold counts differ or are zero: {} vs {}", a.len(), b.len())));
    }
    let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, std) = mean_std(&deltas);
    Ok(FoldComparison { deltas, mean, std })
}

/// Off-diagonal fine-set errors split into those inside a merged pair and
/// the rest.
pub fn merged_pair_errors(fine_confusion: &[Vec<usize>]) -> (usize, usize) {
    let coarse = ClassSet::coarse();
    let (mut inside, mut outside) = (0, 0);
    for (t, row) in fine_confusion.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            if t == p || n == 0 {
                continue;
            }
            let same = coarse.project_index(StainClass::ALL[t]).ok() == coarse.project_index(StainClass::ALL[p]).ok();
            if same {
                inside += n;
            } else {
                outside += n;
            }
        }
    }
    (inside, outside)
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).at(p)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }

    /// Row-normalised confusion as a heat grid: white for values below
    /// 0.01, deepening blue towards 1.
    pub fn render_confusion(&self, cell: u32) -> RgbImage {
        let c = self.confusion_normalized.len() as u32;
        let margin = cell / 2;
        let side = c * cell + 2 * margin;
        let mut img = RgbImage::filled(side, side, crate::image::WHITE);
        for (t, row) in self.confusion_normalized.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                let color = if v < 0.01 {
                    [255, 255, 255]
                } else {
                    let s = v.clamp(0.0, 1.0);
                    [(255.0 - 215.0 * s) as u8, (255.0 - 175.0 * s) as u8, (255.0 - 75.0 * s) as u8]
                };
                for y in 0..cell - 1 {
                    for x in 0..cell - 1 {
                        img.put(margin + p as u32 * cell + x, margin + t as u32 * cell + y, color);
                    }
                }
            }
        }
        // Grid lines.
        for i in 0..=c {
            for k in margin..margin + c * cell {
                let o = margin + i * cell - if i == c { 1 } else { 0 };
                img.put(o, k, [160, 160, 160]);
                img.put(k, o, [160, 160, 160]);
            }
        }
        img
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub class_set: String,
    pub f1: f64,
    pub weighted_f1: f64,
    pub auroc: Option<f64>,
    /// Std of macro F1 over sampling rounds, for k-budget predictions.
    #[serde(default)]
    pub f1_round_std: Option<f64>,
    pub n_slides: usize,
}

/// Inserts or replaces the row keyed by (method, class_set); rows are kept
/// sorted by that key.
pub fn upsert_summary(path: &Path, row: SummaryRow) -> Result<()> {
    let mut rows: BTreeMap<(String, String), SummaryRow> = BTreeMap::new();
    if path.exists() {
        let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
        for r in rd.deserialize::<SummaryRow>() {
            let r = r.map_err(|e| Error::Manifest(e.to_string()))?;
            rows.insert((r.method.clone(), r.class_set.clone()), r);
        }
    }
    rows.insert((row.method.clone(), row.class_set.clone()), row);
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).at(p)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
    for r in rows.values() {
        w.serialize(r).map_err(|e| Error::Manifest(e.to_string()))?;
    }
    w.flush().at(path)
}

//! Pooled confusion matrix, Cohen's κ and accuracy, per-recording κ and
//! grouped reports, plus JSON and SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SleepStage;
use crate::error::{shape_err, Error, Result};
use crate::model::{KindSet, Model};
use crate::train::RecordingSource;

/// Square count matrix: rows are reference classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(shape_err!("confusion matrix must be square and non-empty"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }
}

/// Counts over epochs whose reference label is not `Ignore`.
pub fn confusion(pred: &[SleepStage], truth: &[SleepStage]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(shape_err!(
            "{} predictions for {} reference epochs",
            pred.len(),
            truth.len()
        ));
    }
    let mut cm = ConfusionMatrix::new(SleepStage::CLASSES.len());
    for (p, t) in pred.iter().zip(truth) {
        if let Some(ti) = t.class_index() {
            let pi = p
                .class_index()
                .ok_or_else(|| Error::InvalidArgument("prediction of Ignore for a scored epoch".into()))?;
            cm.add(ti, pi);
        }
    }
    Ok(cm)
}

/// Cohen's κ = (p_o − p_e)/(1 − p_e). Returns 0 with a warning when p_e = 1.
///
/// Evaluated as (N·trace − Σ rᵢcᵢ)/(N² − Σ rᵢcᵢ) in integers with one final
/// division, so rational cases come out correctly rounded.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total() as u128;
    if total == 0 {
        return Err(Error::InvalidArgument("κ of an empty confusion matrix".into()));
    }
    let k = cm.classes();
    let chance: u128 = (0..k)
        .map(|i| {
            let row: u64 = cm.counts[i].iter().sum();
            let col: u64 = cm.counts.iter().map(|r| r[i]).sum();
            row as u128 * col as u128
        })
        .sum();
    let denom = total * total - chance;
    if denom == 0 {
        log::warn!("κ undefined: expected agreement is 1 (single class in reference and prediction); reporting 0");
        return Ok(0.0);
    }
    let numer = (total * cm.trace() as u128) as i128 - chance as i128;
    Ok(numer as f64 / denom as f64)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingScore {
    pub id: String,
    /// `None` when the recording has no scored epochs.
    pub kappa: Option<f64>,
    pub epochs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_digest: String,
    pub subset: KindSet,
    pub n_recordings: usize,
    pub skipped_recordings: usize,
    pub confusion: ConfusionMatrix,
    pub kappa_total: f64,
    pub accuracy_total: f64,
    pub per_recording: Vec<RecordingScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_key: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, MetricsReport>,
}

/// Report over already-computed per-recording matrices.
pub fn report_from(
    config_digest: &str,
    subset: KindSet,
    scored: &[(String, ConfusionMatrix)],
    skipped: usize,
) -> Result<MetricsReport> {
    if scored.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no test recording carries all of {subset} ({skipped} skipped)"
        )));
    }
    let mut pooled = ConfusionMatrix::new(scored[0].1.classes());
    let mut per_recording = Vec::new();
    for (id, cm) in scored {
        pooled.merge(cm);
        per_recording.push(RecordingScore {
            id: id.clone(),
            kappa: if cm.total() > 0 { Some(kappa(cm)?) } else { None },
            epochs: cm.total(),
        });
    }
    Ok(MetricsReport {
        config_digest: config_digest.into(),
        subset,
        n_recordings: scored.len(),
        skipped_recordings: skipped,
        kappa_total: kappa(&pooled)?,
        accuracy_total: accuracy(&pooled)?,
        confusion: pooled,
        per_recording,
        group_key: None,
        groups: BTreeMap::new(),
    })
}

/// Stages every recording of `source` that carries all of `subset`, using only
/// those signals. Recordings missing a requested kind are skipped and counted.
pub fn evaluate(
    model: &Model<f32>,
    source: &dyn RecordingSource,
    subset: KindSet,
    group_by: Option<&str>,
) -> Result<MetricsReport> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("empty modality subset".into()));
    }
    let digest = crate::blob::sha256_hex(serde_json::to_string(&model.config)?.as_bytes());
    let mut scored = Vec::new();
    let mut groups: BTreeMap<String, Vec<(String, ConfusionMatrix)>> = BTreeMap::new();
    let mut skipped = 0;
    for i in 0..source.len() {
        let rec = source.load(i)?;
        if !subset.is_subset(rec.kinds()) {
            skipped += 1;
            continue;
        }
        let pred = model.predict(&rec, subset)?;
        let cm = confusion(&pred.stages, rec.labels())?;
        if let Some(key) = group_by {
            let value = rec.group_keys().get(key).cloned().unwrap_or_else(|| "unknown".into());
            groups
                .entry(value)
                .or_default()
                .push((rec.id().to_string(), cm.clone()));
        }
        scored.push((rec.id().to_string(), cm));
    }
    if skipped > 0 {
        log::warn!("{skipped} recording(s) lack one of {subset} and were skipped");
    }
    let mut report = report_from(&digest, subset, &scored, skipped)?;
    if let Some(key) = group_by {
        report.group_key = Some(key.into());
        for (value, members) in groups {
            report.groups.insert(value, report_from(&digest, subset, &members, 0)?);
        }
    }
    Ok(report)
}

/// Heatmap of row-normalised counts with the raw count in each cell.
pub fn confusion_svg(cm: &ConfusionMatrix, title: &str) -> String {
    let names = ["Wake", "Light", "Deep", "REM"];
    let n = cm.classes();
    let cell = 64;
    let (left, top) = (70, 50);
    let width = left + n * cell + 20;
    let height = top + n * cell + 50;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="14">{}</text>"#,
        xml_escape(title)
    );
    for (i, row) in cm.counts().iter().enumerate() {
        let row_total: u64 = row.iter().sum();
        let label = names.get(i).copied().unwrap_or("?");
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#,
            left - 6,
            top + i * cell + cell / 2 + 4
        );
        for (j, &c) in row.iter().enumerate() {
            let frac = if row_total > 0 {
                c as f64 / row_total as f64
            } else {
                0.0
            };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let text = if frac > 0.5 { "white" } else { "black" };
            let (x, y) = (left + j * cell, top + i * cell);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#888"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{text}">{c}</text>"#,
                x + cell / 2,
                y + cell / 2 + 4
            );
        }
    }
    for j in 0..n {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            left + j * cell + cell / 2,
            top + n * cell + 18,
            names.get(j).copied().unwrap_or("?")
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#,
        left + n * cell / 2,
        top + n * cell + 38
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SleepStage::*;

    fn embed(small: &[[u64; 2]; 2]) -> ConfusionMatrix {
        let mut counts = vec![vec![0; 4]; 4];
        for i in 0..2 {
            for j in 0..2 {
                counts[i][j] = small[i][j];
            }
        }
        ConfusionMatrix::from_counts(counts).unwrap()
    }

    #[test]
    fn hand_tally() {
        let cm = confusion(&[Wake, Light, Deep, Rem], &[Wake, Light, Light, Rem]).unwrap();
        assert_eq!(cm.counts()[0][0], 1);
        assert_eq!(cm.counts()[1][1], 1);
        assert_eq!(cm.counts()[1][2], 1);
        assert_eq!(cm.counts()[3][3], 1);
        assert_eq!(cm.total(), 4);
        assert_eq!(confusion(&[Wake; 3], &[Ignore; 3]).unwrap().total(), 0);
        assert!(confusion(&[Wake; 2], &[Wake; 3]).is_err());
    }

    #[test]
    fn kappa_and_accuracy_examples() {
        let cm = embed(&[[2, 1], [1, 2]]);
        assert_eq!(kappa(&cm).unwrap(), 1.0 / 3.0);
        assert_eq!(accuracy(&cm).unwrap(), 2.0 / 3.0);
        let perfect = confusion(&[Wake, Light, Deep, Rem, Rem], &[Wake, Light, Deep, Rem, Rem]).unwrap();
        assert_eq!(kappa(&perfect).unwrap(), 1.0);
        let uniform = ConfusionMatrix::from_counts(vec![vec![3; 4]; 4]).unwrap();
        assert_eq!(accuracy(&uniform).unwrap(), 0.25);
        assert_eq!(kappa(&uniform).unwrap(), 0.0);
        // Single class everywhere: p_e = 1.
        assert_eq!(kappa(&embed(&[[5, 0], [0, 0]])).unwrap(), 0.0);
        assert!(accuracy(&ConfusionMatrix::new(4)).is_err());
    }

    #[test]
    fn pooled_kappa_is_kappa_of_summed_matrix() {
        let a = embed(&[[4, 1], [0, 3]]);
        let b = embed(&[[1, 2], [2, 5]]);
        let r = report_from(
            "x",
            KindSet::all(),
            &[("a".into(), a.clone()), ("b".into(), b.clone())],
            0,
        )
        .unwrap();
        let mut sum = a;
        sum.merge(&b);
        assert_eq!(r.kappa_total, kappa(&sum).unwrap());
        assert_eq!(r.confusion, sum);
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = confusion_svg(&embed(&[[2, 1], [1, 2]]), "a<b");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<rect").count(), 16);
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
        proptest::collection::vec(proptest::collection::vec(0u64..50, 4), 4)
            .prop_filter("non-empty", |m| m.iter().flatten().sum::<u64>() > 0)
    }

    proptest! {
        #[test]
        fn kappa_invariant_under_relabelling(m in matrix(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
            let mut p = vec![vec![0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    p[perm[i]][perm[j]] = m[i][j];
                }
            }
            let a = kappa(&ConfusionMatrix::from_counts(m).unwrap()).unwrap();
            let b = kappa(&ConfusionMatrix::from_counts(p).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn kappa_bounds(m in matrix()) {
            let cm = ConfusionMatrix::from_counts(m).unwrap();
            let k = kappa(&cm).unwrap();
            let acc = accuracy(&cm).unwrap();
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&k));
            prop_assert!((0.0..=1.0).contains(&acc));
            if k > 0.0 {
                prop_assert!(k <= acc + 1e-12);
            }
        }
    }
}

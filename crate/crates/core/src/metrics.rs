//! Confusion matrices and the per-class and global scores derived from them.
//!
//! A metric whose denominator is zero is `None` and is left out of every
//! average. Per-tile reports are combined by weighting each tile's value for
//! class `i` by that tile's share of the class-`i` ground-truth pixels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ClassId, ClassPalette, LabelMap};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: ClassId, classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no reports to aggregate")]
    EmptyReportList,
    #[error("weights sum to {0}, expected 1")]
    WeightSumInvalid(f64),
    #[error("i/o failure on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `counts[truth * classes + predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(MetricsError::DimensionMismatch(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn add_pixels(&mut self, pred: &[ClassId], truth: &[ClassId]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(MetricsError::DimensionMismatch(format!(
                "{} predicted pixels against {} reference pixels",
                pred.len(),
                truth.len()
            )));
        }
        let c = self.classes;
        if let Some(&label) = pred.iter().chain(truth).find(|&&l| l as usize >= c) {
            return Err(MetricsError::LabelOutOfRange { label, classes: c });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(MetricsError::DimensionMismatch(format!(
                "merging {} classes into {}",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Ground-truth pixel count of a class (row sum).
    pub fn support(&self, class: usize) -> u64 {
        self.counts[class * self.classes..(class + 1) * self.classes].iter().sum()
    }

    /// Pixels predicted as a class (column sum).
    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }
}

pub fn confusion(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(MetricsError::DimensionMismatch(format!(
            "prediction is {}x{}, reference is {}x{}",
            pred.width(), pred.height(), truth.width(), truth.height()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    cm.add_pixels(pred.labels(), truth.labels())?;
    Ok(cm)
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(MetricsError::EmptyMatrix),
        total => Ok(cm.correct() as f64 / total as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub csi: Option<f64>,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// CSI from precision and recall: `1/CSI = 1/P + 1/R - 1`.
pub fn csi_from_precision_recall(precision: f64, recall: f64) -> f64 {
    if precision == 0.0 || recall == 0.0 {
        0.0
    } else {
        1.0 / (1.0 / precision + 1.0 / recall - 1.0)
    }
}

pub fn per_class(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.classes)
        .map(|i| {
            let tp = cm.get(i, i);
            let support = cm.support(i);
            let predicted = cm.predicted(i);
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            // 2TP / (2TP + FP + FN), the harmonic mean of P and R taken
            // straight from the counts.
            let f1 = precision.and(recall).and_then(|_| ratio(2 * tp, support + predicted));
            let csi = ratio(tp, support + predicted - tp);
            ClassMetrics { precision, recall, f1, csi, support }
        })
        .collect()
}

/// One value per metric; `None` when no class defines it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub csi: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Mean of the defined values.
pub fn simple_average(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// `sum(w_i * M_i)` over the defined values, with the weights of undefined
/// values redistributed proportionally. Weights must sum to 1.
pub fn weighted_average(values: &[Option<f64>], weights: &[f64]) -> Result<Option<f64>> {
    if values.len() != weights.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} values against {} weights",
            values.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(MetricsError::WeightSumInvalid(sum));
    }
    Ok(weighted_defined(values, weights))
}

fn weighted_defined(values: &[Option<f64>], weights: &[f64]) -> Option<f64> {
    let (mut acc, mut mass) = (0.0, 0.0);
    for (v, &w) in values.iter().zip(weights) {
        if let Some(v) = v {
            acc += w * v;
            mass += w;
        }
    }
    (mass > 0.0).then(|| acc / mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Scores computed once from the summed confusion matrix.
    Pooled,
    /// Scores computed per tile, then combined by class pixel share.
    PerTile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub oa: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Pixel proportion of each class in the reference.
    pub weights: Vec<f64>,
    pub average: MetricSummary,
    pub weighted_average: MetricSummary,
    pub total_pixels: u64,
}

fn summarize(per_class: &[ClassMetrics], weights: &[f64]) -> (MetricSummary, MetricSummary) {
    let col = |f: fn(&ClassMetrics) -> Option<f64>| per_class.iter().map(f).collect::<Vec<_>>();
    let cols = [col(|m| m.csi), col(|m| m.precision), col(|m| m.recall), col(|m| m.f1)];
    let simple = cols.iter().map(|c| simple_average(c)).collect::<Vec<_>>();
    let weighted = cols.iter().map(|c| weighted_defined(c, weights)).collect::<Vec<_>>();
    let pack = |v: &[Option<f64>]| MetricSummary { csi: v[0], precision: v[1], recall: v[2], f1: v[3] };
    (pack(&simple), pack(&weighted))
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let oa = overall_accuracy(cm)?;
        let total = cm.total();
        let per_class = per_class(cm);
        let weights: Vec<f64> = per_class.iter().map(|m| m.support as f64 / total as f64).collect();
        let (average, weighted_average) = summarize(&per_class, &weights);
        Ok(MetricsReport { protocol: Protocol::Pooled, oa, per_class, weights, average, weighted_average, total_pixels: total })
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }
}

/// Combines per-tile reports. Each tile's value for class `i` is weighted by
/// the tile's share of all class-`i` reference pixels, so recall and OA equal
/// their pooled values. Precision, F1 and CSI can differ from the pooled
/// values when a tile predicts a class it has no reference pixels of, since
/// such a tile carries zero weight for that class.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or(MetricsError::EmptyReportList)?;
    let c = first.classes();
    if reports.iter().any(|r| r.classes() != c) {
        return Err(MetricsError::DimensionMismatch("reports cover different class counts".into()));
    }
    let total: u64 = reports.iter().map(|r| r.total_pixels).sum();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let oa = reports.iter().map(|r| r.oa * r.total_pixels as f64).sum::<f64>() / total as f64;
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|i| {
            let support: u64 = reports.iter().map(|r| r.per_class[i].support).sum();
            let share: Vec<f64> = reports
                .iter()
                .map(|r| if support == 0 { 0.0 } else { r.per_class[i].support as f64 / support as f64 })
                .collect();
            let pick = |f: fn(&ClassMetrics) -> Option<f64>| {
                let vals: Vec<Option<f64>> = reports.iter().map(|r| f(&r.per_class[i])).collect();
                weighted_defined(&vals, &share)
            };
            ClassMetrics {
                precision: pick(|m| m.precision),
                recall: pick(|m| m.recall),
                f1: pick(|m| m.f1),
                csi: pick(|m| m.csi),
                support,
            }
        })
        .collect();
    let weights: Vec<f64> = per_class.iter().map(|m| m.support as f64 / total as f64).collect();
    let (average, weighted_average) = summarize(&per_class, &weights);
    Ok(MetricsReport { protocol: Protocol::PerTile, oa, per_class, weights, average, weighted_average, total_pixels: total })
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", v * 100.0),
        None => "n/a".into(),
    }
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}

pub fn confusion_csv(cm: &ConfusionMatrix, palette: &ClassPalette) -> String {
    let names: Vec<String> = (0..cm.classes()).map(|i| class_name(palette, i)).collect();
    let mut s = String::from("truth\\predicted");
    for n in &names {
        let _ = write!(s, ",{}", csv_field(n));
    }
    s.push('\n');
    for (i, n) in names.iter().enumerate() {
        s.push_str(&csv_field(n));
        for j in 0..cm.classes() {
            let _ = write!(s, ",{}", cm.get(i, j));
        }
        s.push('\n');
    }
    s
}

/// Columns `class,CSI,precision,recall,F1` in percent.
pub fn per_class_csv(report: &MetricsReport, palette: &ClassPalette) -> String {
    let mut s = String::from("class,CSI,precision,recall,F1\n");
    for (i, m) in report.per_class.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_field(&class_name(palette, i)),
            pct(m.csi),
            pct(m.precision),
            pct(m.recall),
            pct(m.f1)
        );
    }
    s
}

fn class_name(palette: &ClassPalette, i: usize) -> String {
    palette.name(i as ClassId).map(str::to_owned).unwrap_or_else(|| format!("class {i}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryBlock {
    pub csi: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Global scores in percent, rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: Protocol,
    pub oa: f64,
    pub average: SummaryBlock,
    pub weighted_average: SummaryBlock,
}

fn round_pct(v: f64) -> f64 {
    (v * 10000.0).round() / 100.0
}

impl From<&MetricsReport> for Summary {
    fn from(r: &MetricsReport) -> Self {
        let block = |m: &MetricSummary| SummaryBlock {
            csi: m.csi.map(round_pct),
            precision: m.precision.map(round_pct),
            recall: m.recall.map(round_pct),
            f1: m.f1.map(round_pct),
        };
        Summary { protocol: r.protocol, oa: round_pct(r.oa), average: block(&r.average), weighted_average: block(&r.weighted_average) }
    }
}

pub fn summary_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(&Summary::from(report)).expect("summary serializes");
    s.push('\n');
    s
}

/// Pixel count of every palette class in a map.
pub fn class_frequencies(map: &LabelMap) -> Vec<u64> {
    let mut counts = vec![0u64; map.palette().len()];
    for &l in map.labels() {
        counts[l as usize] += 1;
    }
    counts
}

/// Columns `class,percent,pixels`.
pub fn class_frequency_csv(counts: &[u64], palette: &ClassPalette) -> String {
    let total: u64 = counts.iter().sum();
    let mut s = String::from("class,percent,pixels\n");
    for (i, &n) in counts.iter().enumerate() {
        let p = if total == 0 { 0.0 } else { n as f64 / total as f64 };
        let _ = writeln!(s, "{},{},{n}", csv_field(&class_name(palette, i)), pct(Some(p)));
    }
    s
}

/// Writes `confusion.csv`, `per_class.csv` and `summary.json` into `dir`.
pub fn write_reports(dir: impl AsRef<Path>, cm: &ConfusionMatrix, report: &MetricsReport, palette: &ClassPalette) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io { path: dir.to_path_buf(), source })?;
    write(&dir.join("confusion.csv"), confusion_csv(cm, palette))?;
    write(&dir.join("per_class.csv"), per_class_csv(report, palette))?;
    write(&dir.join("summary.json"), summary_json(report))
}

pub fn write_class_frequencies(path: impl AsRef<Path>, counts: &[u64], palette: &ClassPalette) -> Result<()> {
    write(path.as_ref(), class_frequency_csv(counts, palette))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: usize, h: usize, labels: Vec<ClassId>, classes: usize) -> LabelMap {
        let names: Vec<String> = (1..classes).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        LabelMap::new(w, h, labels, ClassPalette::from_names(&refs).unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let t = map(3, 2, vec![0, 1, 2, 2, 1, 1], 3);
        let cm = confusion(&t, &t, 3).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 0, 3, 0, 0, 0, 2]);
        assert_eq!(overall_accuracy(&cm).unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let truth = map(2, 2, vec![0, 0, 1, 1], 2);
        let pred = map(2, 2, vec![0, 1, 1, 1], 2);
        let cm = confusion(&pred, &truth, 2).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 2));
    }

    #[test]
    fn oa_hand_arithmetic() {
        let cm = ConfusionMatrix::from_counts(2, vec![50, 10, 10, 30]).unwrap();
        assert!((overall_accuracy(&cm).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(overall_accuracy(&ConfusionMatrix::new(3)), Err(MetricsError::EmptyMatrix)));
    }

    #[test]
    fn all_wrong_two_class_map() {
        let truth = map(2, 1, vec![0, 1], 2);
        let pred = map(2, 1, vec![1, 0], 2);
        assert_eq!(overall_accuracy(&confusion(&pred, &truth, 2).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn absent_class_is_undefined() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 1, 0, 2, 5, 0, 0, 0, 0]).unwrap();
        let pc = per_class(&cm);
        assert_eq!(pc[2], ClassMetrics { precision: None, recall: None, f1: None, csi: None, support: 0 });
        let r = MetricsReport::from_confusion(&cm).unwrap();
        let expected = (pc[0].f1.unwrap() + pc[1].f1.unwrap()) / 2.0;
        assert!((r.average.f1.unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn predicted_but_absent_class() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 0, 0]).unwrap();
        let m = per_class(&cm)[1];
        assert_eq!((m.precision, m.recall, m.f1, m.csi), (Some(0.0), None, None, Some(0.0)));
    }

    #[test]
    fn weighted_average_arithmetic() {
        let v = weighted_average(&[Some(0.8), Some(0.4)], &[0.75, 0.25]).unwrap().unwrap();
        assert!((v - 0.7).abs() < 1e-15);
        assert!(matches!(weighted_average(&[Some(1.0)], &[0.5]), Err(MetricsError::WeightSumInvalid(_))));
    }

    #[test]
    fn label_and_dimension_errors() {
        let a = map(2, 2, vec![0; 4], 3);
        let b = map(1, 4, vec![0; 4], 3);
        assert!(matches!(confusion(&a, &b, 3), Err(MetricsError::DimensionMismatch(_))));
        let c = map(2, 2, vec![0, 1, 2, 2], 3);
        assert!(matches!(confusion(&a, &c, 2), Err(MetricsError::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn single_tile_aggregate_is_identity() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 1, 0, 2, 5, 1, 0, 3, 7]).unwrap();
        let r = MetricsReport::from_confusion(&cm).unwrap();
        let a = aggregate(std::slice::from_ref(&r)).unwrap();
        assert_eq!(a.per_class, r.per_class);
        assert_eq!(a.oa, r.oa);
        assert_eq!(a.protocol, Protocol::PerTile);
        assert!(matches!(aggregate(&[]), Err(MetricsError::EmptyReportList)));
    }

    #[test]
    fn csv_and_json_layout() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 0, 4]).unwrap();
        let r = MetricsReport::from_confusion(&cm).unwrap();
        let pal = ClassPalette::from_names(&["Water, open"]).unwrap();
        let csv = per_class_csv(&r, &pal);
        assert_eq!(csv.lines().next().unwrap(), "class,CSI,precision,recall,F1");
        assert_eq!(csv.lines().nth(1).unwrap(), "No data,75.00,100.00,75.00,85.71");
        assert!(csv.contains("\"Water, open\",80.00,80.00,100.00,88.89"));
        let conf = confusion_csv(&cm, &pal);
        assert_eq!(conf.lines().nth(2).unwrap(), "\"Water, open\",0,4");
        let json: serde_json::Value = serde_json::from_str(&summary_json(&r)).unwrap();
        assert_eq!(json["oa"], 87.5);
        assert_eq!(json["protocol"], "pooled");
        assert!(json["weighted_average"]["f1"].is_number());
    }

    #[test]
    fn frequency_table() {
        let m = map(2, 2, vec![1, 1, 1, 0], 3);
        let counts = class_frequencies(&m);
        assert_eq!(counts, vec![1, 3, 0]);
        let csv = class_frequency_csv(&counts, m.palette());
        assert_eq!(csv.lines().nth(2).unwrap(), "c1,75.00,3");
    }

    fn arb_maps() -> impl Strategy<Value = (usize, Vec<ClassId>, Vec<ClassId>)> {
        (2usize..6, 1usize..40).prop_flat_map(|(c, n)| {
            (Just(c), prop::collection::vec(0..c as ClassId, n), prop::collection::vec(0..c as ClassId, n))
        })
    }

    proptest! {
        #[test]
        fn identities((c, truth, pred) in arb_maps()) {
            let mut cm = ConfusionMatrix::new(c);
            cm.add_pixels(&pred, &truth).unwrap();
            prop_assert_eq!(cm.total() as usize, truth.len());
            let r = MetricsReport::from_confusion(&cm).unwrap();
            let recall: Vec<Option<f64>> = r.per_class.iter().map(|m| m.recall).collect();
            let oa_from_recall: f64 = recall.iter().zip(&r.weights).map(|(v, w)| v.unwrap_or(0.0) * w).sum();
            prop_assert!((oa_from_recall - r.oa).abs() < 1e-12);
            for m in &r.per_class {
                for v in [m.precision, m.recall, m.f1, m.csi].into_iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if let (Some(p), Some(rc), Some(f)) = (m.precision, m.recall, m.f1) {
                    prop_assert!((f - f1_score(p, rc)).abs() < 1e-12);
                }
                if let (Some(p), Some(rc), Some(csi)) = (m.precision, m.recall, m.csi) {
                    if p > 0.0 && rc > 0.0 {
                        prop_assert!((1.0 / csi - (1.0 / p + 1.0 / rc - 1.0)).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn class_permutation((c, truth, pred) in arb_maps(), rot in 0usize..5) {
            let perm = |l: ClassId| ((l as usize + rot) % c) as ClassId;
            let mut a = ConfusionMatrix::new(c);
            a.add_pixels(&pred, &truth).unwrap();
            let mut b = ConfusionMatrix::new(c);
            let (pp, tp): (Vec<_>, Vec<_>) = pred.iter().zip(&truth).map(|(&p, &t)| (perm(p), perm(t))).unzip();
            b.add_pixels(&pp, &tp).unwrap();
            let (ra, rb) = (per_class(&a), per_class(&b));
            for i in 0..c {
                prop_assert_eq!(ra[i], rb[(i + rot) % c]);
            }
        }

        #[test]
        fn per_tile_recall_and_oa_equal_pooled(
            tiles in prop::collection::vec(prop::collection::vec((0u16..4, 0u16..4), 1..30), 1..6)
        ) {
            let mut pooled = ConfusionMatrix::new(4);
            let mut reports = Vec::new();
            for t in &tiles {
                let (p, g): (Vec<_>, Vec<_>) = t.iter().copied().unzip();
                let mut cm = ConfusionMatrix::new(4);
                cm.add_pixels(&p, &g).unwrap();
                pooled.merge(&cm).unwrap();
                reports.push(MetricsReport::from_confusion(&cm).unwrap());
            }
            let agg = aggregate(&reports).unwrap();
            let pool = MetricsReport::from_confusion(&pooled).unwrap();
            prop_assert!((agg.oa - pool.oa).abs() < 1e-12);
            for (a, p) in agg.per_class.iter().zip(&pool.per_class) {
                prop_assert_eq!(a.support, p.support);
                match (a.recall, p.recall) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }
    }
}

//! Dice and IoU with sample-averaged and voxel-pooled aggregation.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, fp, fn_ }
    }

    pub fn is_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, rhs: Confusion) -> Confusion {
        Confusion::new(self.tp + rhs.tp, self.fp + rhs.fp, self.fn_ + rhs.fn_)
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, rhs: Confusion) {
        *self = *self + rhs;
    }
}

fn is_binary<T: Element>(v: T) -> bool {
    v == T::zero() || v == T::one()
}

/// Counts over two binary tensors of the same shape.
pub fn confusion<T: Element>(pred: &Tensor<T>, label: &Tensor<T>) -> Result<Confusion> {
    if pred.shape() != label.shape() {
        return Err(Error::ShapeMismatch {
            expected: label.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    let mut c = Confusion::default();
    for (&p, &l) in pred.data().iter().zip(label.data()) {
        if !is_binary(p) || !is_binary(l) {
            return Err(Error::NonBinary);
        }
        match (p == T::one(), l == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// `(dice, iou)`; an all-zero confusion scores `(1, 1)`.
pub fn dice_iou(c: Confusion) -> (f64, f64) {
    if c.is_empty() {
        return (1.0, 1.0);
    }
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub confusion: Confusion,
    /// The sample had neither predicted nor true positives.
    pub empty_convention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default)]
    pub tag: String,
    pub sample_avg_dice: f64,
    pub voxel_avg_dice: f64,
    pub sample_avg_iou: f64,
    pub voxel_avg_iou: f64,
    pub pooled: Confusion,
    pub per_sample: Vec<SampleScore>,
    /// Number of samples scored with the empty-vs-empty convention.
    pub empty_convention_count: usize,
}

pub fn aggregate(confusions: &[(String, Confusion)]) -> Result<MetricsReport> {
    if confusions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let per_sample: Vec<SampleScore> = confusions
        .iter()
        .map(|(id, c)| {
            let (dice, iou) = dice_iou(*c);
            SampleScore {
                id: id.clone(),
                dice,
                iou,
                confusion: *c,
                empty_convention: c.is_empty(),
            }
        })
        .collect();
    let pooled = confusions
        .iter()
        .fold(Confusion::default(), |acc, (_, c)| acc + *c);
    let (voxel_avg_dice, voxel_avg_iou) = dice_iou(pooled);
    let n = per_sample.len() as f64;
    Ok(MetricsReport {
        tag: String::new(),
        sample_avg_dice: per_sample.iter().map(|s| s.dice).sum::<f64>() / n,
        voxel_avg_dice,
        sample_avg_iou: per_sample.iter().map(|s| s.iou).sum::<f64>() / n,
        voxel_avg_iou,
        pooled,
        empty_convention_count: per_sample.iter().filter(|s| s.empty_convention).count(),
        per_sample,
    })
}

pub const TABLE_COLUMNS: [&str; 4] = [
    "Sample Avg. Dice",
    "Voxel Avg. Dice",
    "Sample Avg. IoU",
    "Voxel Avg. IoU",
];

impl MetricsReport {
    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn values(&self) -> [f64; 4] {
        [
            self.sample_avg_dice,
            self.voxel_avg_dice,
            self.sample_avg_iou,
            self.voxel_avg_iou,
        ]
    }

    /// One-row table; pass several reports to [`render_table`] for more.
    pub fn to_table(&self) -> String {
        render_table(&[(self.tag.as_str(), self)])
    }
}

/// Aligned text table with one row per `(name, report)`.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let name_width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<name_width$}", "Method");
    for col in TABLE_COLUMNS {
        let _ = write!(out, "  {col:>16}");
    }
    out.push('\n');
    for (name, report) in rows {
        let _ = write!(out, "{name:<name_width$}");
        for v in report.values() {
            let _ = write!(out, "  {v:>16.4}");
        }
        out.push('\n');
    }
    let flagged: usize = rows.iter().map(|(_, r)| r.empty_convention_count).sum();
    if flagged > 0 {
        let _ = writeln!(
            out,
            "note: {flagged} sample(s) had no predicted or true lesion voxels and were scored 1.0"
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Tensor<f32> {
        Tensor::new(&[bits.len()], bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let l = mask(&[1, 0, 1, 1, 0]);
        assert_eq!(confusion(&l, &l).unwrap(), Confusion::new(3, 0, 0));
        assert_eq!(
            confusion(&mask(&[0; 5]), &l).unwrap(),
            Confusion::new(0, 0, 3)
        );
        // pred {a, b}, label {b, c}
        let c = confusion(&mask(&[1, 1, 0]), &mask(&[0, 1, 1])).unwrap();
        assert_eq!(c, Confusion::new(1, 1, 1));
        assert!(matches!(
            confusion(&mask(&[1]), &l),
            Err(Error::ShapeMismatch { .. })
        ));
        let half = Tensor::new(&[1], vec![0.5f32]).unwrap();
        assert!(matches!(
            confusion(&half, &mask(&[1])),
            Err(Error::NonBinary)
        ));
    }

    #[test]
    fn dice_iou_examples() {
        let (d, i) = dice_iou(Confusion::new(1, 1, 1));
        assert_eq!(d, 0.5);
        assert!((i - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_iou(Confusion::default()), (1.0, 1.0));
        assert_eq!(dice_iou(Confusion::new(7, 0, 0)), (1.0, 1.0));
    }

    #[test]
    fn pooling_differs_from_sample_mean() {
        let r = aggregate(&[
            ("a".into(), Confusion::new(1, 0, 0)),
            ("b".into(), Confusion::new(1, 1, 1)),
        ])
        .unwrap();
        assert_eq!(r.sample_avg_dice, 0.75);
        assert!((r.voxel_avg_dice - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.empty_convention_count, 0);
    }

    #[test]
    fn single_sample_and_empty() {
        let r = aggregate(&[("a".into(), Confusion::new(3, 2, 1))]).unwrap();
        assert_eq!(r.sample_avg_dice, r.voxel_avg_dice);
        assert_eq!(r.sample_avg_iou, r.voxel_avg_iou);
        assert!(matches!(aggregate(&[]), Err(Error::EmptyInput)));
        let e = aggregate(&[("e".into(), Confusion::default())]).unwrap();
        assert_eq!(e.empty_convention_count, 1);
        assert!(e.to_table().contains("scored 1.0"));
    }

    #[test]
    fn table_has_expected_columns() {
        let r = aggregate(&[("a".into(), Confusion::new(1, 0, 0))])
            .unwrap()
            .with_tag("test");
        let table = r.to_table();
        for col in TABLE_COLUMNS {
            assert!(table.contains(col));
        }
        let json: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json, r);
    }
}

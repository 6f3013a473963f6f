//! Confusion matrices, IoU and the per-class diagnostics report.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{LabelMap, ProbMap};

/// C×C counts, row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    c: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.c + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self) -> u64 {
        (0..self.c).map(|k| self.get(k, k)).sum()
    }

    /// Fraction of evaluated pixels on the diagonal; 0 when nothing was evaluated.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.true_positives() as f64 / total as f64
        }
    }
}

pub fn confusion_matrix(pred: &LabelMap, truth: &LabelMap, c: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = vec![0; c * c];
    for (i, (p, t)) in pred.labels().iter().zip(truth.labels()).enumerate() {
        let Some(t) = *t else { continue };
        let Some(p) = *p else {
            return Err(Error::domain(format!("pixel {i} has no prediction")));
        };
        if t >= c || p >= c {
            return Err(Error::domain(format!(
                "pixel {i}: label {} out of range for {c} classes",
                t.max(p)
            )));
        }
        counts[t * c + p] += 1;
    }
    Ok(ConfusionMatrix { c, counts })
}

/// `TP / (TP + FP + FN)` per class; `None` when the class never occurs in
/// either truth or prediction.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..cm.c).map(|p| cm.get(k, p)).sum::<u64>() - tp;
            let fp: u64 = (0..cm.c).map(|t| cm.get(t, k)).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean over defined classes only.
pub fn mean_iou(iou: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Argmax labels of a probability map.
pub fn predictions(p: &ProbMap) -> LabelMap {
    LabelMap::new((0..p.n()).map(|i| Some(p.argmax(i))).collect())
}

/// Mean of the max probability over pixels predicted as each class.
pub fn mean_prob_per_class(p: &ProbMap) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; p.c()];
    let mut count = vec![0usize; p.c()];
    for i in 0..p.n() {
        let k = p.argmax(i);
        sum[k] += p.row(i)[k];
        count[k] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassFrequency {
    pub fractions: Vec<f64>,
    /// Set when every pixel was abstained.
    pub empty: bool,
}

pub fn class_frequency(labels: &LabelMap, c: usize) -> Result<ClassFrequency> {
    labels.check_range(c)?;
    let mut counts = vec![0usize; c];
    for l in labels.labels().iter().flatten() {
        counts[*l] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Ok(ClassFrequency {
            fractions: vec![0.0; c],
            empty: true,
        });
    }
    Ok(ClassFrequency {
        fractions: counts.iter().map(|&k| k as f64 / total as f64).collect(),
        empty: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub mean_max_prob: Vec<Option<f64>>,
    pub pixel_frequency: Vec<f64>,
    /// Extra `name,value` rows appended after the mIoU row.
    pub extra: Vec<(String, f64)>,
}

impl ClassReport {
    /// Scores predictions `p` against `truth`; frequencies are those of the truth.
    pub fn evaluate(p: &ProbMap, truth: &LabelMap) -> Result<Self> {
        let cm = confusion_matrix(&predictions(p), truth, p.c())?;
        let iou = iou_per_class(&cm);
        Ok(Self {
            miou: mean_iou(&iou),
            iou,
            mean_max_prob: mean_prob_per_class(p),
            pixel_frequency: class_frequency(truth, p.c())?.fractions,
            extra: Vec::new(),
        })
    }
}

fn field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV text: `class,iou,mean_max_prob,frequency`, one row per class, then
/// `miou,<value>,,` and any extra rows in the same two-column form.
pub fn render_report(report: &ClassReport) -> String {
    let mut out = String::from("class,iou,mean_max_prob,frequency\n");
    for k in 0..report.iou.len() {
        let _ = writeln!(
            out,
            "{k},{},{},{:.6}",
            field(report.iou[k]),
            field(report.mean_max_prob.get(k).copied().flatten()),
            report.pixel_frequency.get(k).copied().unwrap_or(0.0)
        );
    }
    let _ = writeln!(out, "miou,{},,", field(report.miou));
    for (name, v) in &report.extra {
        let _ = writeln!(out, "{name},{v:.6},,");
    }
    out
}

pub fn emit_report(report: &ClassReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(report))?;
    Ok(())
}

/// Inverse of [`render_report`], up to the printed precision.
pub fn parse_report(text: &str) -> Result<ClassReport> {
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::config(format!("bad number {s:?} in report")))
        }
    };
    let mut lines = text.lines();
    if lines.next() != Some("class,iou,mean_max_prob,frequency") {
        return Err(Error::config("report header missing"));
    }
    let mut report = ClassReport {
        iou: Vec::new(),
        miou: None,
        mean_max_prob: Vec::new(),
        pixel_frequency: Vec::new(),
        extra: Vec::new(),
    };
    let mut seen_miou = false;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::config(format!(
                "report row {line:?} needs 4 columns"
            )));
        }
        if cols[0] == "miou" {
            report.miou = parse(cols[1])?;
            seen_miou = true;
        } else if seen_miou {
            let v = parse(cols[1])?.ok_or_else(|| Error::config("empty extra row"))?;
            report.extra.push((cols[0].to_string(), v));
        } else {
            report.iou.push(parse(cols[1])?);
            report.mean_max_prob.push(parse(cols[2])?);
            report.pixel_frequency.push(parse(cols[3])?.unwrap_or(0.0));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(v: &[usize]) -> LabelMap {
        LabelMap::from_classes(v)
    }

    fn pm(rows: &[&[f64]]) -> ProbMap {
        ProbMap::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion_matrix(&lm(&[0, 1, 2, 1]), &lm(&[0, 1, 2, 1]), 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p) > 0, t == p);
            }
        }
        let cm = confusion_matrix(&lm(&[0, 0, 1, 1]), &lm(&[0, 1, 1, 1]), 2).unwrap();
        assert_eq!(
            [cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)],
            [1, 0, 1, 2]
        );
        let empty = confusion_matrix(&LabelMap::default(), &LabelMap::default(), 2).unwrap();
        assert_eq!(empty.total(), 0);
    }

    #[test]
    fn confusion_errors_and_abstain() {
        assert!(matches!(
            confusion_matrix(&lm(&[0, 2]), &lm(&[0, 1]), 2),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            confusion_matrix(&lm(&[0]), &lm(&[0, 1]), 2),
            Err(Error::Shape(_))
        ));
        let truth = LabelMap::new(vec![Some(0), None]);
        let cm = confusion_matrix(&lm(&[0, 1]), &truth, 2).unwrap();
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn iou_examples() {
        let cm = confusion_matrix(&lm(&[0, 1, 1]), &lm(&[0, 1, 1]), 2).unwrap();
        assert_eq!(iou_per_class(&cm), vec![Some(1.0), Some(1.0)]);
        let cm = confusion_matrix(&lm(&[0, 0, 1, 1]), &lm(&[0, 1, 1, 1]), 2).unwrap();
        let iou = iou_per_class(&cm);
        assert_eq!(iou[0], Some(0.5));
        assert!((iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mean_iou(&iou).unwrap() - 0.583333).abs() < 1e-6);
        let cm = confusion_matrix(&lm(&[0, 1]), &lm(&[0, 1]), 3).unwrap();
        let iou = iou_per_class(&cm);
        assert_eq!(iou[2], None);
        assert_eq!(mean_iou(&iou), Some(1.0));
    }

    #[test]
    fn mean_prob_examples() {
        let m = mean_prob_per_class(&pm(&[&[0.8, 0.2], &[0.6, 0.4]]));
        assert!((m[0].unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(m[1], None);
        let m = mean_prob_per_class(&pm(&[&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]]));
        assert_eq!(m, vec![None, Some(1.0), None]);
        assert_eq!(mean_prob_per_class(&ProbMap::empty(2)), vec![None, None]);
    }

    #[test]
    fn frequency_examples() {
        assert_eq!(
            class_frequency(&lm(&[0, 0, 1, 1]), 2).unwrap().fractions,
            vec![0.5, 0.5]
        );
        assert_eq!(
            class_frequency(&lm(&[1, 1]), 3).unwrap().fractions,
            vec![0.0, 1.0, 0.0]
        );
        let f = class_frequency(&LabelMap::abstain(3), 2).unwrap();
        assert!(f.empty);
        assert_eq!(f.fractions, vec![0.0, 0.0]);
    }

    #[test]
    fn report_rendering() {
        let p = pm(&[&[0.8, 0.2, 0.0], &[0.6, 0.4, 0.0], &[0.1, 0.9, 0.0]]);
        let mut r = ClassReport::evaluate(&p, &lm(&[0, 1, 1])).unwrap();
        r.extra.push(("accuracy".into(), 2.0 / 3.0));
        let text = render_report(&r);
        assert_eq!(
            text,
            "class,iou,mean_max_prob,frequency\n\
             0,0.500000,0.700000,0.333333\n\
             1,0.500000,0.900000,0.666667\n\
             2,,,0.000000\n\
             miou,0.500000,,\n\
             accuracy,0.666667,,\n"
        );
        let back = parse_report(&text).unwrap();
        assert_eq!(back.iou, r.iou);
        assert_eq!(back.mean_max_prob[2], None);
        assert!((back.extra[0].1 - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(render_report(&back), text);
    }

    proptest! {
        #[test]
        fn miou_permutation_invariant(pairs in prop::collection::vec((0usize..4, 0usize..4), 0..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let cm = confusion_matrix(&lm(&pred), &lm(&truth), 4).unwrap();
            prop_assert!(cm.true_positives() <= cm.total());
            let iou = iou_per_class(&cm);
            for v in iou.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pred2: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            let truth2: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
            let cm2 = confusion_matrix(&lm(&pred2), &lm(&truth2), 4).unwrap();
            prop_assert_eq!(mean_iou(&iou), mean_iou(&iou_per_class(&cm2)));
        }

        #[test]
        fn mean_prob_in_range(z in prop::collection::vec(-5.0f64..5.0, 3..30)) {
            let n = z.len() / 3;
            let t = crate::Tensor::new(vec![n, 3], z[..n * 3].to_vec()).unwrap();
            let p = ProbMap::from_tensor(&crate::autodiff::softmax_rows(&t).unwrap()).unwrap();
            for v in mean_prob_per_class(&p).into_iter().flatten() {
                prop_assert!((1.0 / 3.0 - 1e-12..=1.0).contains(&v));
            }
        }
    }
}

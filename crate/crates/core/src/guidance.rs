//! Multi-level self-produced guidance.
//!
//! The final and low-level heads are averaged into an ensemble; pixels where
//! either head is confident about the ensemble's class become pseudo-labels
//! for the low-level head.

use crate::error::{Error, Result};
use crate::losses::{argmax, cross_entropy, LabelMap, LossResult, ProbMap, TargetLoss};

/// Pseudo-labels produced from the heads' own predictions; `None` abstains.
pub type GuidanceMask = LabelMap;

pub const DEFAULT_DELTA: f64 = 0.95;
pub const DEFAULT_LAMBDA_LOW: f64 = 0.1;

/// Probability maps from the final head and the low-level auxiliary head.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLevelOutput {
    pub final_map: ProbMap,
    pub low_map: ProbMap,
}

impl MultiLevelOutput {
    pub fn new(final_map: ProbMap, low_map: ProbMap) -> Result<Self> {
        if final_map.n() != low_map.n() || final_map.c() != low_map.c() {
            return Err(Error::shape(format!(
                "head maps disagree: {}x{} vs {}x{}",
                final_map.n(),
                final_map.c(),
                low_map.n(),
                low_map.c()
            )));
        }
        Ok(Self { final_map, low_map })
    }

    pub fn swapped(&self) -> Self {
        Self {
            final_map: self.low_map.clone(),
            low_map: self.final_map.clone(),
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            final_map: self.final_map.slice_rows(start, end),
            low_map: self.low_map.slice_rows(start, end),
        }
    }
}

/// `(P_final + P_low) / 2`.
pub fn ensemble_average(m: &MultiLevelOutput) -> Result<ProbMap> {
    let values = m
        .final_map
        .values()
        .iter()
        .zip(m.low_map.values())
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    ProbMap::new(m.final_map.n(), m.final_map.c(), values)
}

/// Assigns `c* = argmax P_ens` wherever `p_final[c*] > δ` or `p_low[c*] > δ`.
pub fn self_guidance(m: &MultiLevelOutput, delta: f64) -> Result<GuidanceMask> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let c = m.final_map.c();
    let mut ens = vec![0.0; c];
    let labels = (0..m.final_map.n())
        .map(|i| {
            let (pf, pl) = (m.final_map.row(i), m.low_map.row(i));
            for ((e, a), b) in ens.iter_mut().zip(pf).zip(pl) {
                *e = (a + b) / 2.0;
            }
            let star = argmax(&ens);
            (pf[star] > delta || pl[star] > delta).then_some(star)
        })
        .collect();
    Ok(LabelMap::new(labels))
}

/// Value and head gradients of `L_T^final(P_final) + λ_low CE(P_low, guidance)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLevelLoss {
    pub value: f64,
    pub final_loss: LossResult,
    /// Cross-entropy against the guidance, already scaled by `λ_low`.
    pub low_loss: LossResult,
    pub mask: GuidanceMask,
}

/// The guidance mask is computed from the current maps and then held fixed,
/// so no gradient flows through the thresholds or the argmax.
pub fn multi_level_target_loss(
    m: &MultiLevelOutput,
    target_loss: TargetLoss,
    lambda_low: f64,
    delta: f64,
) -> Result<MultiLevelLoss> {
    if !(lambda_low >= 0.0) {
        return Err(Error::domain(format!(
            "lambda_low must be nonnegative, got {lambda_low}"
        )));
    }
    let mask = self_guidance(m, delta)?;
    let final_loss = target_loss.evaluate(&m.final_map)?;
    let mut low_loss = cross_entropy(&m.low_map, &mask)?;
    low_loss.value *= lambda_low;
    for g in low_loss.grad.data_mut() {
        *g *= lambda_low;
    }
    Ok(MultiLevelLoss {
        value: final_loss.value + low_loss.value,
        final_loss,
        low_loss,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::max_squares_loss;
    use proptest::prelude::*;

    fn pm(rows: &[&[f64]]) -> ProbMap {
        ProbMap::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn ml(f: &[&[f64]], l: &[&[f64]]) -> MultiLevelOutput {
        MultiLevelOutput::new(pm(f), pm(l)).unwrap()
    }

    #[test]
    fn ensemble_examples() {
        let same = ml(&[&[0.3, 0.7]], &[&[0.3, 0.7]]);
        assert_eq!(ensemble_average(&same).unwrap(), same.final_map);
        let opp = ml(&[&[1.0, 0.0]], &[&[0.0, 1.0]]);
        assert_eq!(ensemble_average(&opp).unwrap().values(), &[0.5, 0.5]);
        let e = ensemble_average(&ml(&[&[0.96, 0.04]], &[&[0.5, 0.5]])).unwrap();
        assert!((e.values()[0] - 0.73).abs() < 1e-15);
        assert!((e.values()[1] - 0.27).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(matches!(
            MultiLevelOutput::new(pm(&[&[0.5, 0.5]]), pm(&[&[0.5, 0.5], &[0.5, 0.5]])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn guidance_examples() {
        let sure = ml(&[&[0.0, 1.0]], &[&[0.0, 1.0]]);
        assert_eq!(self_guidance(&sure, 0.95).unwrap().labels(), &[Some(1)]);
        let unsure = ml(&[&[0.9, 0.1]], &[&[0.9, 0.1]]);
        assert_eq!(self_guidance(&unsure, 0.95).unwrap().labels(), &[None]);
        let one = ml(&[&[0.96, 0.04]], &[&[0.5, 0.5]]);
        assert_eq!(self_guidance(&one, 0.95).unwrap().labels(), &[Some(0)]);
        assert!(self_guidance(&one, 1.0).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let m = ml(&[&[0.75, 0.25]], &[&[0.75, 0.25]]);
        assert_eq!(self_guidance(&m, 0.75).unwrap().labels(), &[None]);
    }

    #[test]
    fn threshold_tested_at_ensemble_class() {
        // final is confident in class 1 but the ensemble picks class 0
        let m = ml(&[&[0.02, 0.98, 0.0]], &[&[1.0, 0.0, 0.0]]);
        // ensemble (0.51, 0.49, 0): c* = 0 and low head clears the threshold
        assert_eq!(self_guidance(&m, 0.95).unwrap().labels(), &[Some(0)]);
        let m = ml(&[&[0.04, 0.96, 0.0]], &[&[0.94, 0.0, 0.06]]);
        // ensemble (0.49, 0.48, 0.03): c* = 0, and neither head exceeds δ there
        // even though the final head is past δ on class 1
        assert_eq!(self_guidance(&m, 0.95).unwrap().labels(), &[None]);
    }

    #[test]
    fn multi_level_degenerate_cases() {
        let m = ml(&[&[0.6, 0.4], &[0.3, 0.7]], &[&[0.5, 0.5], &[0.2, 0.8]]);
        let base = max_squares_loss(&m.final_map).value;
        let r = multi_level_target_loss(&m, TargetLoss::MaxSquares, 0.1, 0.95).unwrap();
        assert_eq!(r.mask.assigned(), 0);
        assert_eq!(r.value, base);
        let sure = ml(&[&[0.99, 0.01]], &[&[0.7, 0.3]]);
        let r = multi_level_target_loss(&sure, TargetLoss::MaxSquares, 0.0, 0.95).unwrap();
        assert_eq!(r.value, max_squares_loss(&sure.final_map).value);
        let r = multi_level_target_loss(&sure, TargetLoss::MaxSquares, 0.1, 0.95).unwrap();
        let expected = max_squares_loss(&sure.final_map).value - 0.1 * 0.7f64.ln();
        assert!((r.value - expected).abs() < 1e-15);
    }

    fn random_output(max_n: usize, max_c: usize) -> impl Strategy<Value = MultiLevelOutput> {
        (1..=max_n, 2..=max_c).prop_flat_map(|(n, c)| {
            (
                prop::collection::vec(-6.0f64..6.0, n * c),
                prop::collection::vec(-6.0f64..6.0, n * c),
            )
                .prop_map(move |(a, b)| {
                    let to_map = |z: Vec<f64>| {
                        let t = crate::Tensor::new(vec![n, c], z).unwrap();
                        ProbMap::from_tensor(&crate::autodiff::softmax_rows(&t).unwrap()).unwrap()
                    };
                    MultiLevelOutput::new(to_map(a), to_map(b)).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn head_swap_symmetry(m in random_output(8, 5), delta in 0.01f64..0.99) {
            prop_assert_eq!(self_guidance(&m, delta).unwrap(), self_guidance(&m.swapped(), delta).unwrap());
        }

        #[test]
        fn monotone_abstention(m in random_output(8, 5), d1 in 0.01f64..0.99, d2 in 0.01f64..0.99) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let a = self_guidance(&m, lo).unwrap();
            let b = self_guidance(&m, hi).unwrap();
            for (x, y) in a.labels().iter().zip(b.labels()) {
                if y.is_some() {
                    prop_assert_eq!(x, y);
                }
            }
        }

        #[test]
        fn ensemble_rows_normalized(m in random_output(8, 5)) {
            let e = ensemble_average(&m).unwrap();
            for row in e.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

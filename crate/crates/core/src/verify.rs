//! Built-in invariant suite run by `maxsq verify`.
//!
//! Every check draws its random cases from a fixed seed, so a failure names
//! a reproducible input.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, softmax_rows, Graph};
use crate::guidance::{multi_level_target_loss, self_guidance, MultiLevelOutput};
use crate::losses::{
    binary_entropy_grad, binary_maxsquare_grad, binary_scaled_entropy_grad, cross_entropy,
    iw_max_squares_loss, loss_node, max_squares_loss, pearson_chi2_uniform, LabelMap, ProbMap,
    TargetLoss,
};
use crate::tensor::Tensor;

const SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl PropertyCheck {
    fn new(name: &'static str, failure: Option<String>, summary: String) -> Self {
        match failure {
            Some(detail) => Self {
                name,
                passed: false,
                detail,
            },
            None => Self {
                name,
                passed: true,
                detail: summary,
            },
        }
    }
}

impl fmt::Display for PropertyCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn random_logits(rng: &mut impl Rng, n: usize, c: usize, scale: f64) -> Tensor {
    let data = (0..n * c)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(vec![n, c], data).expect("shape")
}

fn random_probs(rng: &mut impl Rng, max_n: usize, max_c: usize) -> ProbMap {
    let n = rng.random_range(1..=max_n);
    let c = rng.random_range(2..=max_c);
    let z = random_logits(rng, n, c, 4.0);
    ProbMap::from_tensor(&softmax_rows(&z).expect("c >= 2"))
        .expect("softmax rows are distributions")
}

/// Analytic vs central-difference gradients of every loss through a softmax.
pub fn check_loss_gradients(cases: usize) -> PropertyCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.random_range(1..=16);
        let c = rng.random_range(2..=8);
        let z = random_logits(&mut rng, n, c, 3.0);
        let labels = LabelMap::new(
            (0..n)
                .map(|_| (rng.random_range(0.0..1.0) < 0.8).then(|| rng.random_range(0..c)))
                .collect(),
        );
        let losses: [(&str, TargetLoss); 4] = [
            ("entropy", TargetLoss::Entropy),
            ("scaled", TargetLoss::ScaledEntropy { gamma: 0.1 }),
            ("maxsquare", TargetLoss::MaxSquares),
            ("maxsquare_iw", TargetLoss::IwMaxSquares { alpha: 0.2 }),
        ];
        let mut run = |name: &str,
                       build: &dyn Fn(
            &mut Graph,
            crate::autodiff::NodeId,
        ) -> crate::Result<crate::autodiff::NodeId>| {
            let mut g = Graph::new();
            let err = g
                .param("z", z.clone())
                .and_then(|zi| g.softmax_rows(zi))
                .and_then(|p| build(&mut g, p))
                .and_then(|out| finite_diff_check(&mut g, out, &BTreeMap::new(), 1e-6));
            match err {
                Ok(e) if e <= 1e-6 => {
                    worst = worst.max(e);
                    None
                }
                Ok(e) => Some(format!(
                    "{name} case {case} (N={n}, C={c}, logits {:?}): relative error {e:.3e}",
                    z.data()
                )),
                Err(e) => Some(format!("{name} case {case}: {e}")),
            }
        };
        let y = labels.clone();
        if let Some(f) = run("cross_entropy", &move |g, p| {
            let y = y.clone();
            loss_node(g, p, 0, move |q, _| cross_entropy(q, &y))
        }) {
            return PropertyCheck::new("loss gradients", Some(f), String::new());
        }
        for (name, loss) in losses {
            if let Some(f) = run(name, &move |g, p| {
                loss_node(g, p, 0, move |q, _| loss.evaluate(q))
            }) {
                return PropertyCheck::new("loss gradients", Some(f), String::new());
            }
        }
    }
    PropertyCheck::new(
        "loss gradients",
        None,
        format!("{cases} cases x 5 losses, worst relative error {worst:.2e}"),
    )
}

/// Closed forms at p = 0.9 and the entropy-over-maxsquare dominance sweep.
pub fn check_binary_closed_forms() -> PropertyCheck {
    let name = "binary gradient closed forms";
    let h = |p: f64| -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
    let eps = 1e-6;
    let fd = (h(0.9 + eps) - h(0.9 - eps)) / (2.0 * eps);
    let ent = binary_entropy_grad(0.9).expect("p in (0, 1)");
    if (ent - fd.abs()).abs() > 1e-9 || (ent - 9f64.ln()).abs() > 1e-12 {
        return PropertyCheck::new(
            name,
            Some(format!(
                "entropy gradient at p=0.9 is {ent}, difference quotient {fd}"
            )),
            String::new(),
        );
    }
    let ms = binary_maxsquare_grad(0.9);
    if ms != 1.6 {
        return PropertyCheck::new(
            name,
            Some(format!("maxsquare gradient at p=0.9 is {ms}, expected 1.6")),
            String::new(),
        );
    }
    let mut prev_ratio = 0.0;
    for i in 1..=99 {
        let p = 0.5 + 0.005 * i as f64;
        if p >= 1.0 {
            break;
        }
        let (e, m) = (
            binary_entropy_grad(p).expect("p in (0, 1)"),
            binary_maxsquare_grad(p),
        );
        if e < m {
            return PropertyCheck::new(
                name,
                Some(format!(
                    "entropy gradient {e} < maxsquare gradient {m} at p={p}"
                )),
                String::new(),
            );
        }
        let ratio = e / m;
        if ratio <= prev_ratio {
            return PropertyCheck::new(
                name,
                Some(format!(
                    "gradient ratio not increasing at p={p}: {ratio} after {prev_ratio}"
                )),
                String::new(),
            );
        }
        prev_ratio = ratio;
    }
    PropertyCheck::new(
        name,
        None,
        format!("ln 9 match, maxsquare 1.6, dominance on grid (ratio at end {prev_ratio:.3})"),
    )
}

/// `max_squares = -(mean χ² + 1) / (2C)`.
pub fn check_chi2_identity(cases: usize) -> PropertyCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 1);
    for case in 0..cases {
        let p = random_probs(&mut rng, 16, 8);
        let d = pearson_chi2_uniform(&p);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let expected = -(mean + 1.0) / (2.0 * p.c() as f64);
        let got = max_squares_loss(&p).value;
        if (got - expected).abs() > 1e-12 {
            return PropertyCheck::new(
                "chi-square identity",
                Some(format!(
                    "case {case}: loss {got} vs {expected} for probabilities {:?}",
                    p.values()
                )),
                String::new(),
            );
        }
    }
    PropertyCheck::new(
        "chi-square identity",
        None,
        format!("{cases} random maps within 1e-12"),
    )
}

/// Image-wise weighting with α = 0 is plain maximum squares, bit for bit.
pub fn check_iw_degeneracy(cases: usize) -> PropertyCheck {
    let name = "image-wise weighting at alpha 0";
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 2);
    for case in 0..cases {
        let p = random_probs(&mut rng, 16, 8);
        let a = iw_max_squares_loss(&p, 0.0).expect("alpha in range");
        let b = max_squares_loss(&p);
        let same = a.value.to_bits() == b.value.to_bits()
            && a.grad
                .data()
                .iter()
                .zip(b.grad.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return PropertyCheck::new(
                name,
                Some(format!(
                    "case {case}: {} vs {} for {:?}",
                    a.value,
                    b.value,
                    p.values()
                )),
                String::new(),
            );
        }
    }
    let onehot = ProbMap::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).expect("valid rows");
    let v = iw_max_squares_loss(&onehot, 1.0)
        .expect("alpha in range")
        .value;
    if v != -1.0 {
        return PropertyCheck::new(
            name,
            Some(format!("one-hot pair at alpha 1 gives {v}, expected -1")),
            String::new(),
        );
    }
    PropertyCheck::new(
        name,
        None,
        format!("{cases} random maps bitwise equal, one-hot alpha 1 = -1"),
    )
}

/// The scaled-entropy binary gradient never exceeds `(1 - 2γ) ln((1 - γ) / γ)`.
pub fn check_scaled_entropy_bound(gamma: f64, points: usize) -> PropertyCheck {
    let name = "scaled entropy gradient bound";
    let a = 1.0 - 2.0 * gamma;
    let bound = a * ((1.0 - gamma) / gamma).ln() + 1e-9;
    let mut sup = 0.0f64;
    for i in 0..=points {
        let p = i as f64 / points as f64;
        let g = match binary_scaled_entropy_grad(p, gamma) {
            Ok(g) => g,
            Err(e) => return PropertyCheck::new(name, Some(format!("p={p}: {e}")), String::new()),
        };
        if g > bound {
            return PropertyCheck::new(
                name,
                Some(format!("gradient {g} at p={p} exceeds {bound}")),
                String::new(),
            );
        }
        sup = sup.max(g);
    }
    PropertyCheck::new(
        name,
        None,
        format!("sup {sup:.9} <= {bound:.9} over {} points", points + 1),
    )
}

fn random_output(rng: &mut impl Rng) -> MultiLevelOutput {
    let n = rng.random_range(1..=12);
    let c = rng.random_range(2..=6);
    let scale = rng.random_range(0.5..8.0);
    let mut map = || {
        ProbMap::from_tensor(&softmax_rows(&random_logits(rng, n, c, scale)).expect("c >= 2"))
            .expect("softmax")
    };
    let f = map();
    let l = map();
    MultiLevelOutput::new(f, l).expect("same shape")
}

/// Head-swap symmetry and monotone abstention of the guidance mask.
pub fn check_guidance(cases: usize) -> PropertyCheck {
    let name = "guidance symmetry and monotonicity";
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 3);
    for case in 0..cases {
        let m = random_output(&mut rng);
        let (d1, d2): (f64, f64) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
        let (lo, hi) = (d1.min(d2), d1.max(d2));
        let a = self_guidance(&m, lo).expect("delta in range");
        let b = self_guidance(&m, hi).expect("delta in range");
        if a != self_guidance(&m.swapped(), lo).expect("delta in range") {
            return PropertyCheck::new(
                name,
                Some(format!(
                    "case {case}: swapping heads changes the mask at delta {lo}"
                )),
                String::new(),
            );
        }
        for (i, (x, y)) in a.labels().iter().zip(b.labels()).enumerate() {
            if y.is_some() && x != y {
                return PropertyCheck::new(
                    name,
                    Some(format!(
                        "case {case}, pixel {i}: assigned at delta {hi} but {x:?} at {lo}"
                    )),
                    String::new(),
                );
            }
        }
    }
    PropertyCheck::new(name, None, format!("{cases} random head pairs"))
}

/// With a threshold no head reaches, the multi-level objective is the
/// single-level one.
pub fn check_multi_level_abstain(cases: usize) -> PropertyCheck {
    let name = "multi-level objective with full abstention";
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 4);
    for case in 0..cases {
        let n = rng.random_range(1..=12);
        let c = rng.random_range(2..=6);
        let mut map = || {
            ProbMap::from_tensor(
                &softmax_rows(&random_logits(&mut rng, n, c, 0.5)).expect("c >= 2"),
            )
            .expect("softmax")
        };
        let m = MultiLevelOutput::new(map(), map()).expect("same shape");
        let r = multi_level_target_loss(&m, TargetLoss::MaxSquares, 0.1, 0.999999).expect("valid");
        let single = max_squares_loss(&m.final_map).value;
        if r.mask.assigned() != 0 || (r.value - single).abs() > 1e-12 {
            return PropertyCheck::new(
                name,
                Some(format!(
                    "case {case}: {} assigned, objective {} vs {single}",
                    r.mask.assigned(),
                    r.value
                )),
                String::new(),
            );
        }
    }
    PropertyCheck::new(name, None, format!("{cases} near-uniform head pairs"))
}

pub fn run_suite() -> Vec<PropertyCheck> {
    vec![
        check_loss_gradients(100),
        check_binary_closed_forms(),
        check_chi2_identity(100),
        check_iw_degeneracy(100),
        check_scaled_entropy_bound(0.1, 10_000),
        check_guidance(1000),
        check_multi_level_abstain(100),
    ]
}

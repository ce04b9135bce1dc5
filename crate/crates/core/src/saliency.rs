//! Input-gradient importance, bottom-k / top-k masks and masked-input
//! construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Nonnegative per-feature scores for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap(pub Vec<f64>);

impl ImportanceMap {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }
}

/// Elementwise `|∂L/∂x|`, one map per row of the input gradient.
pub fn importance_scores(input_grad: &Matrix) -> Vec<ImportanceMap> {
    (0..input_grad.rows())
        .map(|r| ImportanceMap(input_grad.row(r).iter().map(|v| v.abs()).collect()))
        .collect()
}

/// How masked features are filled in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ReplacementPolicy {
    /// Uniform draw within the feature's training-set range.
    UniformInRange,
    /// The feature's training-set mean.
    FeatureMean,
    Constant(f64),
}

impl ReplacementPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform_random_in_range" | "uniform" => Ok(ReplacementPolicy::UniformInRange),
            "per_feature_mean" | "mean" => Ok(ReplacementPolicy::FeatureMean),
            other => match other.strip_prefix("constant:").map(str::parse::<f64>) {
                Some(Ok(c)) => Ok(ReplacementPolicy::Constant(c)),
                _ => Err(Error::contract(format!("unknown replacement policy '{s}'"))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            ReplacementPolicy::UniformInRange => "uniform_random_in_range".into(),
            ReplacementPolicy::FeatureMean => "per_feature_mean".into(),
            ReplacementPolicy::Constant(c) => format!("constant:{c}"),
        }
    }
}

/// Per-feature statistics of the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
}

impl FeatureStats {
    /// Column statistics of a `samples × features` matrix.
    pub fn from_samples(x: &Matrix) -> Self {
        let f = x.cols();
        let mut min = vec![f64::INFINITY; f];
        let mut max = vec![f64::NEG_INFINITY; f];
        let mut sum = vec![0.0; f];
        for r in 0..x.rows() {
            for (j, &v) in x.row(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
                sum[j] += v;
            }
        }
        let n = x.rows().max(1) as f64;
        if x.rows() == 0 {
            min.fill(0.0);
            max.fill(0.0);
        }
        FeatureStats {
            min,
            max,
            mean: sum.into_iter().map(|s| s / n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    pub mask: Vec<bool>,
    pub masked_count: usize,
}

impl SaliencyMask {
    pub fn empty(n: usize) -> Self {
        SaliencyMask {
            mask: vec![false; n],
            masked_count: 0,
        }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Self {
        let mut mask = vec![false; n];
        for &i in indices {
            mask[i] = true;
        }
        let masked_count = mask.iter().filter(|&&m| m).count();
        SaliencyMask { mask, masked_count }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// `⌊ratio · n⌋`, robust to the representation error of decimal ratios
/// (0.29 · 100 must give 29).
pub fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor().clamp(0.0, n as f64) as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("mask ratio must lie in [0, 1], got {ratio}")));
    }
    Ok(())
}

/// Masks the `⌊ρ·n⌋` least important features. Ties go to the lower index.
pub fn build_mask(imp: &ImportanceMap, rho: f64) -> Result<SaliencyMask> {
    check_ratio(rho)?;
    let n = imp.len();
    let k = mask_count(rho, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| imp.0[a].total_cmp(&imp.0[b]).then(a.cmp(&b)));
    Ok(SaliencyMask::from_indices(n, &order[..k]))
}

/// Masks the `⌊f·n⌋` most important features (the deletion test). Ties go to
/// the lower index.
pub fn build_top_mask(imp: &ImportanceMap, fraction: f64) -> Result<SaliencyMask> {
    check_ratio(fraction)?;
    let n = imp.len();
    let k = mask_count(fraction, n);
    Ok(SaliencyMask::from_indices(n, &top_indices(imp, k)))
}

/// Indices of the `k` largest scores, ordered by decreasing score then index.
pub fn top_indices(imp: &ImportanceMap, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..imp.len()).collect();
    order.sort_by(|&a, &b| imp.0[b].total_cmp(&imp.0[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Replaces masked features of one sample. Unmasked features are copied
/// bit for bit; the random policy draws in feature-index order from a
/// generator seeded with `seed`.
pub fn apply_mask(
    x: &[f64],
    mask: &SaliencyMask,
    policy: ReplacementPolicy,
    stats: Option<&FeatureStats>,
    seed: u64,
) -> Result<Vec<f64>> {
    if mask.mask.len() != x.len() {
        return Err(Error::Shape {
            op: "apply_mask",
            left: (1, x.len()),
            right: (1, mask.mask.len()),
        });
    }
    let stats = match policy {
        ReplacementPolicy::Constant(_) => None,
        _ => {
            let s = stats.ok_or_else(|| {
                Error::contract(format!("replacement policy {} needs feature statistics", policy.name()))
            })?;
            if s.len() != x.len() {
                return Err(Error::contract("feature statistics do not match the sample width"));
            }
            Some(s)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.to_vec();
    for (j, (o, &m)) in out.iter_mut().zip(&mask.mask).enumerate() {
        if !m {
            continue;
        }
        *o = match (policy, stats) {
            (ReplacementPolicy::Constant(c), _) => c,
            (ReplacementPolicy::FeatureMean, Some(s)) => s.mean[j],
            (ReplacementPolicy::UniformInRange, Some(s)) => {
                let u: f64 = rng.gen();
                s.min[j] + u * (s.max[j] - s.min[j])
            }
            _ => unreachable!("stats checked above"),
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_gives_zero_importance() {
        let maps = importance_scores(&Matrix::zeros(2, 3));
        assert!(maps.iter().all(|m| m.0.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn hand_sorted_mask() {
        let imp = ImportanceMap(vec![8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(build_mask(&imp, 0.0).unwrap().masked_count, 0);
        assert_eq!(build_mask(&imp, 0.25).unwrap().indices(), vec![6, 7]);
        assert_eq!(build_top_mask(&imp, 0.25).unwrap().indices(), vec![0, 1]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let imp = ImportanceMap(vec![1.0; 4]);
        assert_eq!(build_mask(&imp, 0.5).unwrap().indices(), vec![0, 1]);
        assert_eq!(build_top_mask(&imp, 0.5).unwrap().indices(), vec![0, 1]);
    }

    #[test]
    fn mask_count_is_floor() {
        assert_eq!(mask_count(0.29, 100), 29);
        assert_eq!(mask_count(0.25, 7), 1);
        assert_eq!(mask_count(1.0, 7), 7);
        assert!(build_mask(&ImportanceMap(vec![1.0]), 1.5).is_err());
    }

    #[test]
    fn policies() {
        let x = [0.1, 0.2, 0.3];
        assert_eq!(
            apply_mask(&x, &SaliencyMask::empty(3), ReplacementPolicy::FeatureMean, None, 0).unwrap_err().to_string(),
            "contract violated: replacement policy per_feature_mean needs feature statistics"
        );
        let full = SaliencyMask::from_indices(3, &[0, 1, 2]);
        assert_eq!(apply_mask(&x, &full, ReplacementPolicy::Constant(0.0), None, 0).unwrap(), vec![0.0; 3]);
        let stats = FeatureStats { min: vec![0.0; 3], max: vec![1.0, 2.0, 3.0], mean: vec![0.5, 1.0, 1.5] };
        assert_eq!(
            apply_mask(&x, &full, ReplacementPolicy::FeatureMean, Some(&stats), 0).unwrap(),
            vec![0.5, 1.0, 1.5]
        );
        let a = apply_mask(&x, &full, ReplacementPolicy::UniformInRange, Some(&stats), 7).unwrap();
        let b = apply_mask(&x, &full, ReplacementPolicy::UniformInRange, Some(&stats), 7).unwrap();
        assert_eq!(a, b);
        for (j, v) in a.iter().enumerate() {
            assert!(*v >= stats.min[j] && *v <= stats.max[j]);
        }
        assert_eq!(apply_mask(&x, &SaliencyMask::empty(3), ReplacementPolicy::Constant(9.0), None, 1).unwrap(), x);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [ReplacementPolicy::UniformInRange, ReplacementPolicy::FeatureMean, ReplacementPolicy::Constant(0.5)] {
            assert_eq!(ReplacementPolicy::parse(&p.name()).unwrap(), p);
        }
        assert!(ReplacementPolicy::parse("blur").is_err());
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..10.0, 1..40)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn masks_are_nested(s in scores(), r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
            let imp = ImportanceMap(s);
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            let small = build_mask(&imp, lo).unwrap();
            let big = build_mask(&imp, hi).unwrap();
            for (a, b) in small.mask.iter().zip(&big.mask) {
                prop_assert!(!a || *b);
            }
            prop_assert_eq!(small.masked_count, mask_count(lo, imp.len()));
        }

        #[test]
        fn mask_depends_only_on_ranking(s in scores(), rho in 0.0f64..1.0) {
            let imp = ImportanceMap(s.clone());
            let transformed = ImportanceMap(s.iter().map(|v| (v * 3.0 + 1.0).ln()).collect());
            prop_assert_eq!(build_mask(&imp, rho).unwrap(), build_mask(&transformed, rho).unwrap());
            prop_assert_eq!(build_top_mask(&imp, rho).unwrap(), build_top_mask(&transformed, rho).unwrap());
        }

        #[test]
        fn unmasked_values_pass_through(x in prop::collection::vec(-5.0f64..5.0, 8), bits in prop::collection::vec(any::<bool>(), 8), seed in any::<u64>()) {
            let idx: Vec<usize> = bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
            let mask = SaliencyMask::from_indices(8, &idx);
            let stats = FeatureStats { min: vec![-1.0; 8], max: vec![1.0; 8], mean: vec![0.0; 8] };
            let out = apply_mask(&x, &mask, ReplacementPolicy::UniformInRange, Some(&stats), seed).unwrap();
            for j in 0..8 {
                if !bits[j] {
                    prop_assert_eq!(out[j].to_bits(), x[j].to_bits());
                }
            }
        }
    }
}

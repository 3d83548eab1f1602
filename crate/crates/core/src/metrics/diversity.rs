use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{intra_dissimilarity, variance, FeatureSet};
use crate::error::{Error, Result};
use crate::tensor::{matmul, sym_eig, SYM_EIG_MAX_DIM};

/// `exp(−Σ λ log λ)` over the eigenvalues of `K/n`, where `K` is the Gram
/// matrix of the normalised vectors. `0·log 0` is taken as 0.
///
/// The non-zero spectrum of `X̂X̂ᵀ/n` equals that of `X̂ᵀX̂/n`, so the
/// smaller of the two is decomposed. Either way, `min(n, d)` may not exceed
/// [`SYM_EIG_MAX_DIM`].
pub fn vendi_score(s: &FeatureSet) -> Result<f64> {
    let x = s.normalized()?;
    let n = s.len() as f64;
    if s.len().min(s.dim()) > SYM_EIG_MAX_DIM {
        return Err(Error::invalid(format!(
            "vendi_score: min(n, d) = {} exceeds the eigensolver cap {SYM_EIG_MAX_DIM}",
            s.len().min(s.dim())
        )));
    }
    let xt = x.transpose()?;
    let k = if s.len() <= s.dim() {
        matmul(&x, &xt)?
    } else {
        matmul(&xt, &x)?
    };
    let k = symmetrize(k.scale(1.0 / n));
    let entropy: f64 = sym_eig(&k)?
        .into_iter()
        .filter(|&l| l > 0.0)
        .map(|l| -l * l.ln())
        .sum();
    Ok(entropy.exp())
}

fn symmetrize(k: crate::tensor::Tensor) -> crate::tensor::Tensor {
    let kt = k.transpose().expect("square matrix");
    k.add(&kt).expect("same shape").scale(0.5)
}

/// What to do with groups holding a single vector when averaging Vendi
/// scores over groups. A singleton always scores exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingletonPolicy {
    Include,
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedVendi {
    /// `(label, group size, score)` for each group that was scored.
    pub groups: Vec<(String, usize, f64)>,
    /// Unweighted mean of the scored groups.
    pub mean: f64,
}

/// Vendi score per group, then the unweighted mean over groups.
pub fn vendi_by_group(
    groups: &[(String, FeatureSet)],
    singletons: SingletonPolicy,
) -> Result<GroupedVendi> {
    let mut scored = Vec::new();
    for (label, set) in groups {
        if set.len() == 1 && singletons == SingletonPolicy::Skip {
            continue;
        }
        scored.push((label.clone(), set.len(), vendi_score(set)?));
    }
    if scored.is_empty() {
        return Err(Error::invalid("vendi_by_group: no group left to score"));
    }
    let mean = scored.iter().map(|g| g.2).sum::<f64>() / scored.len() as f64;
    Ok(GroupedVendi {
        groups: scored,
        mean,
    })
}

/// At most `max` rows chosen uniformly without replacement, in their original
/// order. Returns the input unchanged when it is already small enough.
pub fn subsample(s: &FeatureSet, max: usize, seed: u64) -> Result<FeatureSet> {
    if max == 0 {
        return Err(Error::invalid("subsample size must be positive"));
    }
    if s.len() <= max {
        return Ok(s.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, s.len(), max).into_vec();
    picked.sort_unstable();
    FeatureSet::new(picked.into_iter().map(|i| s.row(i).to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityMeasure {
    Vendi,
    IntraDissimilarity,
    /// Variance of the raw, unnormalised vectors.
    Variance,
}

impl std::str::FromStr for DiversityMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vendi" => Ok(DiversityMeasure::Vendi),
            "intra_dissimilarity" | "intra-dissimilarity" => Ok(DiversityMeasure::IntraDissimilarity),
            "variance" => Ok(DiversityMeasure::Variance),
            other => Err(Error::invalid(format!("unknown diversity measure '{other}'"))),
        }
    }
}

impl DiversityMeasure {
    pub fn measure(self, s: &FeatureSet) -> Result<f64> {
        match self {
            DiversityMeasure::Vendi => vendi_score(s),
            DiversityMeasure::IntraDissimilarity => intra_dissimilarity(s),
            DiversityMeasure::Variance => Ok(variance(s)),
        }
    }
}

/// `measure(class) / measure(dataset)`.
pub fn diversity_ratio(
    class: &FeatureSet,
    dataset: &FeatureSet,
    measure: DiversityMeasure,
) -> Result<f64> {
    class.check_dim(dataset, "diversity_ratio")?;
    let denom = measure.measure(dataset)?;
    if denom <= 0.0 {
        return Err(Error::invalid(format!(
            "diversity_ratio: dataset diversity is {denom}; the ratio is undefined"
        )));
    }
    Ok(measure.measure(class)? / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set(rows: &[&[f64]]) -> FeatureSet {
        FeatureSet::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn vendi_examples() {
        let same = set(&[&[1.0, 2.0, 3.0][..]; 5]);
        assert!((vendi_score(&same).unwrap() - 1.0).abs() < 1e-10);
        let ortho = set(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert!((vendi_score(&ortho).unwrap() - 3.0).abs() < 1e-10);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mixed = set(&[&[1.0, 0.0], &[0.0, 1.0], &[h, h]]);
        // Closed form: eigenvalues {2/3, 1/3, 0}.
        let want = (-(2.0f64 / 3.0) * (2.0f64 / 3.0).ln() - (1.0f64 / 3.0) * (1.0f64 / 3.0).ln()).exp();
        let got = vendi_score(&mixed).unwrap();
        assert!((got - want).abs() < 1e-10);
        assert!((got - 1.88988).abs() < 1e-4);
    }

    #[test]
    fn vendi_both_spectra_agree() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // n < d and n > d paths on the same vectors padded with zeros.
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let narrow = FeatureSet::from_tensor(x.clone()).unwrap();
        let wide_rows: Vec<Vec<f64>> = narrow
            .rows()
            .map(|r| r.iter().copied().chain([0.0; 5]).collect())
            .collect();
        let wide = FeatureSet::new(wide_rows).unwrap();
        let a = vendi_score(&narrow).unwrap();
        let b = vendi_score(&wide).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} {b}");
    }

    #[test]
    fn vendi_is_duplication_invariant() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = FeatureSet::from_tensor(Tensor::randn(&[7, 12], 1.0, &mut rng)).unwrap();
        let doubled = s.concat(&s).unwrap();
        assert!((vendi_score(&s).unwrap() - vendi_score(&doubled).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn grouped_vendi_policies() {
        let ortho = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let single = set(&[&[1.0, 1.0]]);
        let groups = vec![("a".to_string(), ortho), ("b".to_string(), single)];
        let inc = vendi_by_group(&groups, SingletonPolicy::Include).unwrap();
        assert!((inc.mean - 1.5).abs() < 1e-10);
        let skip = vendi_by_group(&groups, SingletonPolicy::Skip).unwrap();
        assert_eq!(skip.groups.len(), 1);
        assert!((skip.mean - 2.0).abs() < 1e-10);
        assert!(vendi_by_group(&groups[1..], SingletonPolicy::Skip).is_err());
    }

    #[test]
    fn subsample_is_seeded_and_bounded() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 + 1.0]).collect();
        let s = FeatureSet::new(rows).unwrap();
        let a = subsample(&s, 10, 1).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, subsample(&s, 10, 1).unwrap());
        assert_ne!(a, subsample(&s, 10, 2).unwrap());
        assert_eq!(subsample(&s, 100, 1).unwrap(), s);
        assert!(a.rows().zip(a.rows().skip(1)).all(|(x, y)| x[0] < y[0]));
    }

    #[test]
    fn diversity_ratio_examples() {
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let data = FeatureSet::new((0..4).map(e).collect()).unwrap();
        for m in [DiversityMeasure::Vendi, DiversityMeasure::IntraDissimilarity, DiversityMeasure::Variance] {
            assert!((diversity_ratio(&data, &data, m).unwrap() - 1.0).abs() < 1e-12);
        }
        let one = FeatureSet::new(vec![e(0)]).unwrap();
        let r = diversity_ratio(&one, &data, DiversityMeasure::Vendi).unwrap();
        assert!((r - 0.25).abs() < 1e-10);
        let two = FeatureSet::new(vec![e(0), e(1)]).unwrap();
        let r = diversity_ratio(&two, &data, DiversityMeasure::Vendi).unwrap();
        assert!((r - 0.5).abs() < 1e-10);
        let flat = set(&[&[1.0, 0.0, 0.0, 0.0][..]; 3]);
        assert!(diversity_ratio(&two, &flat, DiversityMeasure::Variance).is_err());
        assert_eq!("intra_dissimilarity".parse::<DiversityMeasure>().unwrap(), DiversityMeasure::IntraDissimilarity);
    }
}

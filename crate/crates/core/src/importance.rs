//! Partition-based slot importance and profile diagnostics.
//!
//! For a factor partitioning utterances into `J` groups, the mean code of
//! each group is taken at every slot; the slot's score is the leading
//! eigenvalue of the between-group covariance of those means,
//! `σ_max(X_ℓ)² / (J−1)` with `X_ℓ` the row-centred `J×d` mean matrix.
//! Entropies are in nats.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsq::CodeMatrix;
use crate::error::{Error, Result};
use crate::linalg::largest_singular_value_sq;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Groups of utterance ids sharing one value of a factor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub factor_name: String,
    pub groups: BTreeMap<String, Vec<String>>,
}

impl PartitionSpec {
    pub fn new(factor_name: impl Into<String>, groups: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let part = Self { factor_name: factor_name.into(), groups };
        part.validate()?;
        Ok(part)
    }

    /// Groups utterances by the value of `factor` in their labels.
    pub fn from_labels<'a, I>(factor: &str, labelled: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a BTreeMap<String, String>)>,
    {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, labels) in labelled {
            let value = labels
                .get(factor)
                .ok_or_else(|| Error::input(format!("utterance {id} has no label for factor {factor}")))?;
            groups.entry(value.clone()).or_default().push(id.to_string());
        }
        Self::new(factor, groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.len() < 2 {
            return Err(Error::input(format!("factor {} needs at least 2 groups, found {}", self.factor_name, self.groups.len())));
        }
        let mut seen = BTreeSet::new();
        for (g, ids) in &self.groups {
            if ids.is_empty() {
                return Err(Error::input(format!("group {g} of factor {} is empty", self.factor_name)));
            }
            for id in ids {
                if !seen.insert(id) {
                    return Err(Error::input(format!("utterance {id} appears in more than one group")));
                }
            }
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

/// Per-group mean codes, one `L×d` matrix per group in partition order.
/// Each chunk of a multi-chunk utterance counts as one sample.
pub fn partition_means<T: Scalar>(codes: &BTreeMap<String, Vec<CodeMatrix<T>>>, part: &PartitionSpec) -> Result<Vec<Matrix<T>>> {
    part.validate()?;
    let mut shape: Option<(usize, usize)> = None;
    let mut means = Vec::with_capacity(part.num_groups());
    for ids in part.groups.values() {
        let mut acc: Option<Matrix<f64>> = None;
        let mut count = 0usize;
        for id in ids {
            let chunks = codes.get(id).ok_or_else(|| Error::input(format!("no codes for utterance {id}")))?;
            if chunks.is_empty() {
                return Err(Error::input(format!("utterance {id} has no code chunks")));
            }
            for c in chunks {
                let s = c.codes.shape();
                match shape {
                    None => shape = Some(s),
                    Some(expected) if expected != s => {
                        return Err(Error::input(format!("utterance {id} has codes of shape {s:?}, expected {expected:?}")))
                    }
                    _ => {}
                }
                let c64 = c.codes.cast::<f64>();
                match &mut acc {
                    None => acc = Some(c64),
                    Some(a) => a.add_assign(&c64),
                }
                count += 1;
            }
        }
        let mut mean = acc.expect("groups are non-empty");
        mean.scale(1.0 / count as f64);
        means.push(mean.cast());
    }
    Ok(means)
}

/// Stacks slot `slot` of every group mean into a `J×d` matrix.
pub fn slot_matrix<T: Scalar>(means: &[Matrix<T>], slot: usize) -> Matrix<T> {
    let rows: Vec<Vec<T>> = means.iter().map(|m| m.row(slot).to_vec()).collect();
    Matrix::from_rows(&rows)
}

/// `σ_max(X)² / (J−1)` for the row-centred `J×d` matrix of group means.
pub fn importance_score<T: Scalar>(means: &Matrix<T>) -> Result<T> {
    let j = means.rows();
    if j < 2 {
        return Err(Error::input(format!("importance needs at least 2 groups, got {j}")));
    }
    let centre = means.column_means();
    let x = Matrix::from_fn(j, means.cols(), |r, c| means[(r, c)] - T::lit(centre[c]));
    Ok(largest_singular_value_sq(&x) / T::lit((j - 1) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub factor: String,
    #[serde(rename = "L")]
    pub num_slots: usize,
    pub g: Vec<f64>,
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub provenance: String,
}

impl ImportanceProfile {
    pub fn new(factor: impl Into<String>, g: Vec<f64>) -> Self {
        Self { factor: factor.into(), num_slots: g.len(), g, normalized: false, provenance: String::new() }
    }

    pub fn normalized(&self) -> Result<Self> {
        Ok(Self { g: normalize(&self.g)?, normalized: true, ..self.clone() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if p.g.len() != p.num_slots || p.g.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::input(format!("{}: malformed importance profile", path.display())));
        }
        Ok(p)
    }
}

/// Scores every slot of a coded corpus under one factor partition.
pub fn profile<T: Scalar>(codes: &BTreeMap<String, Vec<CodeMatrix<T>>>, part: &PartitionSpec) -> Result<ImportanceProfile> {
    let means = partition_means(codes, part)?;
    let slots = means[0].rows();
    let g = (0..slots)
        .into_par_iter()
        .map(|l| importance_score(&slot_matrix(&means, l)).map(|s| s.as_f64()))
        .collect::<Result<Vec<f64>>>()?;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric(format!("non-finite importance for factor {}", part.factor_name)));
    }
    Ok(ImportanceProfile::new(part.factor_name.clone(), g))
}

pub fn normalize(g: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = g.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateProfile);
    }
    Ok(g.iter().map(|x| x / total).collect())
}

/// `−Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Mean absolute difference over all ordered pairs divided by twice the mean.
pub fn gini(p: &[f64]) -> f64 {
    let n = p.len();
    let total: f64 = p.iter().sum();
    if n == 0 || total == 0.0 {
        return 0.0;
    }
    let mut sorted = p.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − n + 1) x_(i) for ascending x.
    let pairwise: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - n as f64 + 1.0) * x).sum::<f64>() * 2.0;
    (pairwise / (2.0 * n as f64 * total)).max(0.0)
}

/// 1-based ranks; tied values share their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::input(format!("spearman needs two equal-length profiles of length ≥ 2 ({} vs {})", a.len(), b.len())));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Slot indices ordered by descending score, ties to the lower index.
pub fn descending_order(g: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).unwrap().then(a.cmp(&b)));
    order
}

pub fn top_k(g: &[f64], k: usize) -> Vec<usize> {
    descending_order(g).into_iter().take(k).collect()
}

pub fn jaccard_topk(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > a.len() || k > b.len() {
        return Err(Error::input(format!("top-k cut {k} outside 1..={}", a.len().min(b.len()))));
    }
    let sa: BTreeSet<usize> = top_k(a, k).into_iter().collect();
    let sb: BTreeSet<usize> = top_k(b, k).into_iter().collect();
    Ok(sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64)
}

/// Partial sums of the profile sorted descending.
pub fn cumulative_mass_curve(p: &[f64]) -> Vec<f64> {
    let mut sorted = p.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sorted
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// CSV with header `rank,cumulative_mass`, ranks from 1.
pub fn write_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "rank,cumulative_mass")?;
    for (i, c) in curve.iter().enumerate() {
        writeln!(w, "{},{c}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    pub factor: String,
    pub entropy: f64,
    pub gini: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub a: String,
    pub b: String,
    /// `None` when either profile has constant ranks.
    pub spearman: Option<f64>,
    /// Keyed `jaccard@k`; `None` when `k` exceeds the profile length.
    #[serde(flatten)]
    pub jaccard: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub concentration: Vec<Concentration>,
    pub similarity: Vec<Similarity>,
}

/// Concentration of each normalized profile and similarity of every pair.
pub fn diagnostics(profiles: &[ImportanceProfile], top_ks: &[usize]) -> Result<DiagnosticsReport> {
    let normalized = profiles.iter().map(|p| normalize(&p.g)).collect::<Result<Vec<_>>>()?;
    let concentration = profiles
        .iter()
        .zip(&normalized)
        .map(|(p, n)| Concentration { factor: p.factor.clone(), entropy: entropy(n), gini: gini(n) })
        .collect();
    let mut similarity = Vec::new();
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            let (a, b) = (&normalized[i], &normalized[j]);
            let spearman = match spearman(a, b) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation) => None,
                Err(e) => return Err(e),
            };
            let jaccard = top_ks.iter().map(|&k| (format!("jaccard@{k}"), jaccard_topk(a, b, k).ok())).collect();
            similarity.push(Similarity { a: profiles[i].factor.clone(), b: profiles[j].factor.clone(), spearman, jaccard });
        }
    }
    Ok(DiagnosticsReport { concentration, similarity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn hand_worked_scores() {
        let same = Matrix::from_rows(&[vec![0.3, -0.3], vec![0.3, -0.3]]);
        assert_eq!(importance_score(&same).unwrap(), 0.0);
        let two = Matrix::from_rows(&[vec![-1.0], vec![1.0]]);
        assert_eq!(importance_score(&two).unwrap(), 2.0);
        let three = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]]);
        assert_eq!(importance_score(&three).unwrap(), 1.5);
        assert!(matches!(importance_score(&Matrix::from_rows(&[vec![1.0]])), Err(Error::Input(_))));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 1.0, 1.0]).unwrap(), vec![0.5, 0.25, 0.25]);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::DegenerateProfile)));
    }

    #[test]
    fn concentration_examples() {
        let uniform = vec![1.0 / 250.0; 250];
        assert!(close(entropy(&uniform), 250f64.ln(), 1e-12));
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!(close(entropy(&[0.5, 0.5, 0.0, 0.0]), 2f64.ln(), 1e-15));
        assert!(close(gini(&uniform), 0.0, 1e-12));
        assert!(close(gini(&[0.0, 1.0, 0.0, 0.0]), 0.75, 1e-15));
        assert!(close(gini(&[0.5, 0.3, 0.2]), 0.2, 1e-15));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(close(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap(), 0.8, 1e-15));
        assert!(close(spearman(&[1.0, 2.0, 3.0], &[9.0, 5.0, 1.0]).unwrap(), -1.0, 1e-15));
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation)));
    }

    #[test]
    fn jaccard_examples() {
        let a = [9.0, 8.0, 7.0, 6.0, 5.0, 0.0, 0.0, 0.0, 0.0];
        let b = [9.0, 0.0, 0.0, 0.0, 0.0, 8.0, 7.0, 6.0, 5.0];
        assert!(close(jaccard_topk(&a, &b, 5).unwrap(), 1.0 / 9.0, 1e-15));
        assert_eq!(jaccard_topk(&a, &a, 5).unwrap(), 1.0);
        // All-tied profile: lower indices win the cut.
        assert_eq!(top_k(&[1.0; 6], 3), vec![0, 1, 2]);
    }

    #[test]
    fn curve_examples() {
        assert_eq!(cumulative_mass_curve(&[0.2, 0.5, 0.3]), vec![0.5, 0.8, 1.0]);
        assert_eq!(cumulative_mass_curve(&[0.0, 1.0, 0.0]), vec![1.0, 1.0, 1.0]);
    }

    fn code(rows: &[&[f64]]) -> CodeMatrix<f64> {
        CodeMatrix::from_sphere(&Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()))
    }

    #[test]
    fn means_cancel_and_copy() {
        let s = 0.5f64.sqrt();
        let mut codes = BTreeMap::new();
        codes.insert("a".to_string(), vec![code(&[&[s, s]])]);
        codes.insert("b".to_string(), vec![code(&[&[-s, -s]])]);
        codes.insert("c".to_string(), vec![code(&[&[s, -s]])]);
        let mut groups = BTreeMap::new();
        groups.insert("x".to_string(), vec!["a".to_string(), "b".to_string()]);
        groups.insert("y".to_string(), vec!["c".to_string()]);
        let part = PartitionSpec::new("f", groups).unwrap();
        let m = partition_means(&codes, &part).unwrap();
        assert_eq!(m[0].as_slice(), &[0.0, 0.0]);
        assert_eq!(m[1], codes["c"][0].codes);
    }

    #[test]
    fn partition_validation() {
        let mut groups = BTreeMap::new();
        groups.insert("x".to_string(), vec!["a".to_string()]);
        assert!(PartitionSpec::new("f", groups.clone()).is_err());
        groups.insert("y".to_string(), vec!["a".to_string()]);
        assert!(PartitionSpec::new("f", groups.clone()).is_err());
        groups.insert("y".to_string(), vec![]);
        assert!(PartitionSpec::new("f", groups).is_err());
    }

    #[test]
    fn missing_codes_is_input_error() {
        let mut groups = BTreeMap::new();
        groups.insert("x".to_string(), vec!["a".to_string()]);
        groups.insert("y".to_string(), vec!["b".to_string()]);
        let part = PartitionSpec::new("f", groups).unwrap();
        let codes: BTreeMap<String, Vec<CodeMatrix<f64>>> = BTreeMap::new();
        assert!(matches!(partition_means(&codes, &part), Err(Error::Input(_))));
    }

    fn profile_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..40).prop_filter("positive mass", |v| v.iter().sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn gini_matches_pairwise_sum(p in profile_strategy()) {
            let n = normalize(&p).unwrap();
            let brute: f64 = n.iter().flat_map(|a| n.iter().map(move |b| (a - b).abs())).sum::<f64>() / (2.0 * n.len() as f64);
            prop_assert!(close(gini(&n), brute, 1e-12));
            prop_assert!(gini(&n) <= 1.0 - 1.0 / n.len() as f64 + 1e-12);
        }

        #[test]
        fn entropy_is_bounded(p in profile_strategy()) {
            let n = normalize(&p).unwrap();
            let h = entropy(&n);
            prop_assert!(h >= -1e-15 && h <= (n.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn similarity_is_symmetric(a in profile_strategy(), seed in any::<u64>()) {
            use rand::{SeedableRng, seq::SliceRandom};
            let mut b = a.clone();
            b.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let k = 1 + (seed as usize) % a.len();
            prop_assert_eq!(jaccard_topk(&a, &b, k).unwrap(), jaccard_topk(&b, &a, k).unwrap());
            match (spearman(&a, &b), spearman(&b, &a)) {
                (Ok(x), Ok(y)) => prop_assert!(close(x, y, 1e-15)),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn curve_ends_at_one(p in profile_strategy()) {
            let c = cumulative_mass_curve(&normalize(&p).unwrap());
            prop_assert!(c.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(close(*c.last().unwrap(), 1.0, 1e-12));
        }
    }
}

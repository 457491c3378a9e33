//! Token-space editing by slot swapping.
//!
//! Slot indices are 0-based throughout.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsq::CodeMatrix;
use crate::error::{Error, Result};
use crate::importance::descending_order;
use crate::model::Tokenizer;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Slack on the cumulative-mass comparison so that a profile summing to
/// `1 − ulp` still reaches `γ = 1`.
const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Importance,
    Random,
    Least,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Importance, Policy::Random, Policy::Least];
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Importance => "importance",
            Policy::Random => "random",
            Policy::Least => "least",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "importance" => Ok(Policy::Importance),
            "random" => Ok(Policy::Random),
            "least" => Ok(Policy::Least),
            other => Err(Error::input(format!("unknown policy {other:?} (expected importance, random or least)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapPlan {
    pub policy: Policy,
    pub gamma: Option<f64>,
    /// Selected slots; importance and least plans list them in rank order,
    /// random plans ascending.
    pub slots: Vec<usize>,
    pub seed: Option<u64>,
}

impl SwapPlan {
    pub fn m(&self) -> usize {
        self.slots.len()
    }

    pub fn contains(&self, slot: usize) -> bool {
        self.slots.contains(&slot)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("gamma must lie in (0, 1], got {gamma}")))
    }
}

/// Smallest top-ranked prefix whose normalized mass reaches `gamma`.
pub fn select_slots(gbar: &[f64], gamma: f64) -> Result<SwapPlan> {
    check_gamma(gamma)?;
    if gbar.is_empty() {
        return Err(Error::input("cannot select from an empty profile"));
    }
    let order = descending_order(gbar);
    let mut mass = 0.0;
    let mut m = order.len();
    for (i, &slot) in order.iter().enumerate() {
        mass += gbar[slot];
        if mass >= gamma - MASS_TOLERANCE {
            m = i + 1;
            break;
        }
    }
    Ok(SwapPlan { policy: Policy::Importance, gamma: Some(gamma), slots: order[..m].to_vec(), seed: None })
}

fn check_budget(num_slots: usize, m: usize) -> Result<()> {
    if m == 0 || m > num_slots {
        return Err(Error::input(format!("budget m = {m} outside 1..={num_slots}")));
    }
    Ok(())
}

/// `m` distinct slots drawn uniformly without replacement.
pub fn select_random(num_slots: usize, m: usize, seed: u64) -> Result<SwapPlan> {
    check_budget(num_slots, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots = sample(&mut rng, num_slots, m).into_vec();
    slots.sort_unstable();
    Ok(SwapPlan { policy: Policy::Random, gamma: None, slots, seed: Some(seed) })
}

/// The `m` lowest-scoring slots, ties to the lower index.
pub fn select_least(gbar: &[f64], m: usize) -> Result<SwapPlan> {
    check_budget(gbar.len(), m)?;
    let mut order: Vec<usize> = (0..gbar.len()).collect();
    order.sort_by(|&a, &b| gbar[a].partial_cmp(&gbar[b]).unwrap().then(a.cmp(&b)));
    order.truncate(m);
    Ok(SwapPlan { policy: Policy::Least, gamma: None, slots: order, seed: None })
}

/// Builds a plan for `policy`; the controls take their budget from the
/// importance selection at the same `gamma`.
pub fn plan(policy: Policy, gbar: &[f64], gamma: f64, seed: u64) -> Result<SwapPlan> {
    let guided = select_slots(gbar, gamma)?;
    let mut p = match policy {
        Policy::Importance => return Ok(guided),
        Policy::Random => select_random(gbar.len(), guided.m(), seed)?,
        Policy::Least => select_least(gbar, guided.m())?,
    };
    p.gamma = Some(gamma);
    Ok(p)
}

/// Rows in the plan come from `target`, all others from `source`.
pub fn swap_codes<T: Scalar>(source: &CodeMatrix<T>, target: &CodeMatrix<T>, plan: &SwapPlan) -> Result<CodeMatrix<T>> {
    if source.codes.shape() != target.codes.shape() {
        return Err(Error::input(format!(
            "cannot swap between code matrices of shape {:?} and {:?}",
            source.codes.shape(),
            target.codes.shape()
        )));
    }
    if let Some(&bad) = plan.slots.iter().find(|&&s| s >= source.num_slots()) {
        return Err(Error::input(format!("slot {bad} out of range for {} slots", source.num_slots())));
    }
    let mut out = source.clone();
    for &s in &plan.slots {
        out.codes.row_mut(s).copy_from_slice(target.codes.row(s));
        out.indices[s] = target.indices[s];
    }
    out.reindex();
    Ok(out)
}

/// Applies the plan to each aligned chunk pair; source chunks without a
/// target partner are kept.
pub fn swap_chunks<T: Scalar>(source: &[CodeMatrix<T>], target: &[CodeMatrix<T>], plan: &SwapPlan) -> Result<Vec<CodeMatrix<T>>> {
    source
        .iter()
        .enumerate()
        .map(|(i, s)| match target.get(i) {
            Some(t) => swap_codes(s, t, plan),
            None => Ok(s.clone()),
        })
        .collect()
}

/// Tokenizes both sequences, swaps, and decodes at the source length.
pub fn edit_and_decode<T: Scalar>(tok: &Tokenizer<'_, T>, source: &Matrix<T>, target: &Matrix<T>, plan: &SwapPlan) -> Result<Matrix<T>> {
    let src = tok.tokenize(source)?;
    let tgt = tok.tokenize(target)?;
    tok.detokenize(&swap_chunks(&src, &tgt, plan)?, source.rows())
}

/// Pairs item `i` with item `(i + shift) mod n`.
pub fn cyclic_pairs(n: usize, shift: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i, (i + shift) % n.max(1))).collect()
}

/// Entry of an edit manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub source_id: String,
    pub target_id: String,
    pub policy: Policy,
    pub gamma: f64,
    pub m: usize,
    pub slots: Vec<usize>,
    pub output_path: String,
}

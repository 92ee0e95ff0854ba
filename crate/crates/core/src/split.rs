//! Deterministic, domain-stratified, leakage-free assignment of cases to
//! train/valid/test.
//!
//! The split unit is the case, never the slide or patch: patches from one
//! case landing in two splits is leakage.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::seeding::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self> {
        for v in [train, valid, test] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidValue(format!("ratio must be >= 0, got {v}")));
            }
        }
        if ((train + valid + test) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!(
                "ratios must sum to 1, got {}",
                train + valid + test
            )));
        }
        Ok(SplitRatios { train, valid, test })
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.valid, self.test]
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.7, valid: 0.15, test: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: SplitRatios,
    /// case_id -> split; persisted as a sorted {case_id, split} list.
    #[serde(with = "assignment_list")]
    pub assignments: BTreeMap<String, Split>,
}

mod assignment_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        case_id: String,
        split: Split,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<String, Split>,
        ser: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(case_id, split)| Entry { case_id: case_id.clone(), split: *split })
            .collect();
        entries.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> std::result::Result<BTreeMap<String, Split>, D::Error> {
        let entries = Vec::<Entry>::deserialize(de)?;
        Ok(entries.into_iter().map(|e| (e.case_id, e.split)).collect())
    }
}

impl SplitAssignment {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&data).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Apportion `n` cases to the three splits by the largest-remainder rule:
/// floor(n * ratio) each, leftovers by descending fractional remainder with
/// ties broken in (train, valid, test) order.
fn apportion(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let r = ratios.as_array();
    let mut counts = [0usize; 3];
    let mut remainders = [0f64; 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = n as f64 * r[i];
        counts[i] = exact.floor() as usize;
        remainders[i] = exact - exact.floor();
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    // stable sort keeps the (train, valid, test) tie order
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap());
    let mut leftover = n - assigned;
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Assign cases to splits, stratified by domain tag.
///
/// Within each domain the case list is shuffled with a seed derived from
/// (seed, domain), then filled train-first according to the largest-remainder
/// counts. Identical (manifest, ratios, seed) always yields the identical
/// assignment.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    if manifest.slides.is_empty() {
        return Err(Error::InvalidValue("cannot split an empty manifest".into()));
    }
    let mut assignments = BTreeMap::new();
    for (domain, mut cases) in manifest.cases_by_domain() {
        cases.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &domain, 0));
        cases.shuffle(&mut rng);
        let counts = apportion(cases.len(), &ratios);
        let mut it = cases.into_iter();
        for (split, &count) in Split::ALL.iter().zip(counts.iter()) {
            for case in it.by_ref().take(count) {
                assignments.insert(case, *split);
            }
        }
    }
    Ok(SplitAssignment { seed, ratios, assignments })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageReport {
    /// domain -> split -> case count
    pub per_domain: BTreeMap<String, BTreeMap<Split, usize>>,
    pub n_cases: usize,
}

/// Confirm the assignment covers every manifest case exactly once and report
/// per-domain split counts. A case missing from the assignment is an error.
pub fn verify_no_leakage(
    assignment: &SplitAssignment,
    manifest: &DatasetManifest,
) -> Result<LeakageReport> {
    let mut per_domain: BTreeMap<String, BTreeMap<Split, usize>> = BTreeMap::new();
    let mut n_cases = 0;
    for (domain, cases) in manifest.cases_by_domain() {
        let entry = per_domain.entry(domain.clone()).or_default();
        for case in cases {
            let split = assignment.assignments.get(&case).ok_or_else(|| {
                Error::Integrity(format!("case {case} is not covered by the assignment"))
            })?;
            *entry.entry(*split).or_default() += 1;
            n_cases += 1;
        }
    }
    // a case_id mapping to exactly one split is guaranteed by the map type;
    // the slide-level view cannot leak because slides join on case_id
    Ok(LeakageReport { per_domain, n_cases })
}

//! Memory of top-u query positions.
//!
//! During training every sparse-attention site reports the query indices
//! it selected; the memory keeps them per `(layer, head)` together with the
//! epoch and iteration. Freezing the memory computes one aggregated index
//! list per site, which prediction then reuses instead of re-measuring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::top_u_select;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteKey {
    pub layer: usize,
    pub head: usize,
}

impl SiteKey {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(layer {}, head {})", self.layer, self.head)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Element-wise mean of the sorted index vectors, rounded half-up, with
    /// collisions moved to the nearest unused position.
    Eq3Mean,
    /// The `u` most frequently selected positions, ties to the lower index.
    #[default]
    Frequency,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "eq3_mean" => Ok(Self::Eq3Mean),
            "frequency" => Ok(Self::Frequency),
            other => Err(format!("expected eq3_mean|frequency, got {other:?}")),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Eq3Mean => "eq3_mean",
            Self::Frequency => "frequency",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
struct SiteHistory {
    l_q: usize,
    records: Vec<IndexRecord>,
}

/// One aggregated site, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteEntry {
    pub layer_id: usize,
    pub head_id: usize,
    pub l_q: usize,
    pub u: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub layer_id: usize,
    pub head_id: usize,
    pub epoch_a: usize,
    pub epoch_b: usize,
    pub jaccard: f64,
}

#[derive(Clone, Debug)]
pub struct AttentionIndexMemory {
    sites: BTreeMap<SiteKey, SiteHistory>,
    mode: Aggregation,
    /// Records with `epoch < warmup_epochs` are ignored by aggregation
    /// unless nothing else is available for that site.
    warmup_epochs: usize,
    frozen: Option<BTreeMap<SiteKey, SiteEntry>>,
}

impl Default for AttentionIndexMemory {
    fn default() -> Self {
        Self::new(Aggregation::default(), 1)
    }
}

impl AttentionIndexMemory {
    pub fn new(mode: Aggregation, warmup_epochs: usize) -> Self {
        Self {
            sites: BTreeMap::new(),
            mode,
            warmup_epochs,
            frozen: None,
        }
    }

    pub fn mode(&self) -> Aggregation {
        self.mode
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn keys(&self) -> Vec<SiteKey> {
        match &self.frozen {
            Some(f) => f.keys().copied().collect(),
            None => self.sites.keys().copied().collect(),
        }
    }

    /// Appends one observation. `indices` must be strictly ascending and
    /// below `l_q`, with the same length and `l_q` as earlier records of
    /// the same site.
    pub fn record(
        &mut self,
        key: SiteKey,
        l_q: usize,
        epoch: usize,
        iteration: usize,
        indices: &[usize],
    ) -> Result<()> {
        if self.frozen.is_some() {
            return Err(Error::MemoryFrozen);
        }
        if indices.is_empty() {
            return Err(Error::MalformedIndices(format!("{key}: empty index list")));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::MalformedIndices(format!(
                "{key}: indices must be strictly ascending, got {indices:?}"
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= l_q {
                return Err(Error::MalformedIndices(format!(
                    "{key}: index {last} out of range for L_Q = {l_q}"
                )));
            }
        }
        let site = self.sites.entry(key).or_insert_with(|| SiteHistory {
            l_q,
            records: Vec::new(),
        });
        if let Some(first) = site.records.first() {
            if site.l_q != l_q || first.indices.len() != indices.len() {
                return Err(Error::MalformedIndices(format!(
                    "{key}: expected u = {} over L_Q = {}, got u = {} over L_Q = {l_q}",
                    first.indices.len(),
                    site.l_q,
                    indices.len()
                )));
            }
        }
        site.records.push(IndexRecord {
            epoch,
            iteration,
            indices: indices.to_vec(),
        });
        Ok(())
    }

    pub fn history(&self, key: SiteKey) -> &[IndexRecord] {
        self.sites.get(&key).map_or(&[], |s| &s.records)
    }

    /// Aggregated index list for `key`: `u` distinct ascending positions.
    pub fn aggregate(&self, key: SiteKey) -> Result<Vec<usize>> {
        if let Some(frozen) = &self.frozen {
            return frozen
                .get(&key)
                .map(|e| e.indices.clone())
                .ok_or(Error::MissingSite(key));
        }
        let site = self.sites.get(&key).ok_or(Error::MissingSite(key))?;
        Ok(self.aggregate_site(site))
    }

    fn aggregate_site(&self, site: &SiteHistory) -> Vec<usize> {
        let mut used: Vec<&[usize]> = site
            .records
            .iter()
            .filter(|r| r.epoch >= self.warmup_epochs)
            .map(|r| r.indices.as_slice())
            .collect();
        if used.is_empty() {
            used = site.records.iter().map(|r| r.indices.as_slice()).collect();
        }
        match self.mode {
            Aggregation::Eq3Mean => eq3_mean(&used, site.l_q),
            Aggregation::Frequency => frequency(&used, site.l_q),
        }
    }

    /// Computes every site's aggregate and rejects further records.
    pub fn freeze(&mut self) {
        if self.frozen.is_some() {
            return;
        }
        let frozen = self
            .sites
            .iter()
            .map(|(&key, site)| {
                let indices = self.aggregate_site(site);
                let entry = SiteEntry {
                    layer_id: key.layer,
                    head_id: key.head,
                    l_q: site.l_q,
                    u: indices.len(),
                    indices,
                };
                (key, entry)
            })
            .collect();
        self.frozen = Some(frozen);
    }

    /// Aggregated entries of a frozen memory, ordered by site.
    pub fn entries(&self) -> Result<Vec<SiteEntry>> {
        let frozen = self.frozen.as_ref().ok_or(Error::MemoryNotFrozen)?;
        Ok(frozen.values().cloned().collect())
    }

    pub fn site_len(&self, key: SiteKey) -> Option<usize> {
        match &self.frozen {
            Some(f) => f.get(&key).map(|e| e.l_q),
            None => self.sites.get(&key).map(|s| s.l_q),
        }
    }

    /// Rebuilds a frozen memory from checkpointed entries.
    pub fn from_entries(mode: Aggregation, entries: Vec<SiteEntry>) -> Result<Self> {
        let mut frozen = BTreeMap::new();
        for e in entries {
            let key = SiteKey::new(e.layer_id, e.head_id);
            let ascending = e.indices.windows(2).all(|w| w[0] < w[1]);
            if e.indices.len() != e.u
                || e.u == 0
                || !ascending
                || e.indices.last().is_some_and(|&i| i >= e.l_q)
            {
                return Err(Error::MalformedIndices(format!(
                    "{key}: bad checkpoint entry {:?}",
                    e.indices
                )));
            }
            if frozen.insert(key, e).is_some() {
                return Err(Error::MalformedIndices(format!("{key}: duplicate entry")));
            }
        }
        Ok(Self {
            sites: BTreeMap::new(),
            mode,
            warmup_epochs: 0,
            frozen: Some(frozen),
        })
    }

    /// Jaccard overlap of the union of each epoch's index sets with the
    /// next recorded epoch's, per site. Sites with fewer than two epochs
    /// contribute nothing.
    pub fn stability_report(&self) -> Vec<StabilityRow> {
        let mut rows = Vec::new();
        for (key, site) in &self.sites {
            let mut per_epoch: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            for r in &site.records {
                per_epoch
                    .entry(r.epoch)
                    .or_default()
                    .extend(r.indices.iter().copied());
            }
            let epochs: Vec<_> = per_epoch.iter().collect();
            for pair in epochs.windows(2) {
                let ((&ea, a), (&eb, b)) = (pair[0], pair[1]);
                rows.push(StabilityRow {
                    layer_id: key.layer,
                    head_id: key.head,
                    epoch_a: ea,
                    epoch_b: eb,
                    jaccard: jaccard(a, b),
                });
            }
        }
        rows
    }
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn eq3_mean(records: &[&[usize]], l_q: usize) -> Vec<usize> {
    let u = records[0].len();
    let n = records.len();
    let mut taken = vec![false; l_q];
    let mut out = Vec::with_capacity(u);
    for p in 0..u {
        let sum: usize = records.iter().map(|r| r[p]).sum();
        // floor(sum / n + 1/2), exactly.
        let rounded = ((2 * sum + n) / (2 * n)).min(l_q - 1);
        let slot = nearest_free(&taken, rounded).expect("u <= l_q leaves a free slot");
        taken[slot] = true;
        out.push(slot);
    }
    out.sort_unstable();
    out
}

/// Closest untaken position to `want`, preferring the lower one on ties.
fn nearest_free(taken: &[bool], want: usize) -> Option<usize> {
    if !taken[want] {
        return Some(want);
    }
    for dist in 1..taken.len() {
        if let Some(lo) = want.checked_sub(dist) {
            if !taken[lo] {
                return Some(lo);
            }
        }
        let hi = want + dist;
        if hi < taken.len() && !taken[hi] {
            return Some(hi);
        }
    }
    None
}

fn frequency(records: &[&[usize]], l_q: usize) -> Vec<usize> {
    let u = records[0].len();
    let mut counts = vec![0.0; l_q];
    for r in records {
        for &i in r.iter() {
            counts[i] += 1.0;
        }
    }
    top_u_select(&counts, u).expect("1 <= u <= l_q")
}

//! Solution records, the lineage forest and the population.
//!
//! Every explored solution is kept for the lifetime of a run. Records are
//! identified by a monotone per-run counter so that identical contents reached
//! through different lineages stay distinct.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Maximum stored feedback length in bytes.
pub const FEEDBACK_CAP_BYTES: usize = 16 * 1024;

/// Appended to feedback that was cut at [`FEEDBACK_CAP_BYTES`].
pub const TRUNCATION_MARKER: &str = "\n[feedback truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SolutionId(pub u64);

impl fmt::Display for SolutionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Position of a rollout inside an iteration: which sampled parent it came
/// from and which of the `G` siblings it is.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub batch_index: u32,
    pub rollout_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub id: SolutionId,
    pub parent_id: Option<SolutionId>,
    pub iteration: u64,
    pub content: String,
    pub reward: f64,
    pub valid: bool,
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub diversity: Option<f64>,
    pub mutator_tag: String,
    pub group_key: GroupKey,
    pub content_hash: u64,
}

impl SolutionRecord {
    /// Builds a record, enforcing the reward and feedback invariants: invalid
    /// records score 0, rewards are clamped to be non-negative and feedback is
    /// capped.
    pub fn new(
        id: SolutionId,
        parent_id: Option<SolutionId>,
        iteration: u64,
        content: String,
        reward: f64,
        valid: bool,
        feedback: &str,
    ) -> Self {
        let reward = if valid && reward.is_finite() { reward.max(0.0) } else { 0.0 };
        let content_hash = content_hash(&content);
        Self {
            id,
            parent_id,
            iteration,
            content,
            reward,
            valid,
            feedback: cap_feedback(feedback),
            embedding: None,
            diversity: None,
            mutator_tag: String::new(),
            group_key: GroupKey::default(),
            content_hash,
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.mutator_tag = tag.into();
        self
    }

    pub fn with_group_key(mut self, key: GroupKey) -> Self {
        self.group_key = key;
        self
    }

    pub fn is_root(&self) -> bool {
        self.parent_id.is_none()
    }
}

/// Truncates feedback to [`FEEDBACK_CAP_BYTES`] on a char boundary.
pub fn cap_feedback(feedback: &str) -> String {
    if feedback.len() <= FEEDBACK_CAP_BYTES {
        return feedback.to_string();
    }
    let mut cut = FEEDBACK_CAP_BYTES - TRUNCATION_MARKER.len();
    while !feedback.is_char_boundary(cut) {
        cut -= 1;
    }
    let mut out = String::with_capacity(FEEDBACK_CAP_BYTES);
    out.push_str(&feedback[..cut]);
    out.push_str(TRUNCATION_MARKER);
    out
}

/// First 8 bytes (big-endian) of the SHA-256 digest of `content`.
pub fn content_hash(content: &str) -> u64 {
    let digest = Sha256::digest(content.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(bytes)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("parent {parent} of record {id} is not in the store")]
    DanglingParent { id: SolutionId, parent: SolutionId },
    #[error("record id {0} already exists")]
    DuplicateId(SolutionId),
    #[error("unknown record id {0}")]
    UnknownId(SolutionId),
    #[error("record {id} has iteration {iteration} but its parent is at iteration {parent_iteration}")]
    NonIncreasingIteration { id: SolutionId, iteration: u64, parent_iteration: u64 },
    #[error("population capacity must be positive")]
    ZeroCapacity,
    #[error("population of capacity {capacity} cannot hold {len} members")]
    OverCapacity { capacity: usize, len: usize },
    #[error("duplicate population member {0}")]
    DuplicateMember(SolutionId),
}

/// Parent-pointer forest over every record of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LineageStore {
    records: BTreeMap<SolutionId, SolutionRecord>,
    roots: Vec<SolutionId>,
}

impl LineageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: SolutionRecord) -> Result<SolutionId, ModelError> {
        let id = record.id;
        if self.records.contains_key(&id) {
            return Err(ModelError::DuplicateId(id));
        }
        match record.parent_id {
            Some(parent) => {
                let parent_rec = self
                    .records
                    .get(&parent)
                    .ok_or(ModelError::DanglingParent { id, parent })?;
                if record.iteration <= parent_rec.iteration {
                    return Err(ModelError::NonIncreasingIteration {
                        id,
                        iteration: record.iteration,
                        parent_iteration: parent_rec.iteration,
                    });
                }
            }
            None => self.roots.push(id),
        }
        self.records.insert(id, record);
        Ok(id)
    }

    pub fn get(&self, id: SolutionId) -> Result<&SolutionRecord, ModelError> {
        self.records.get(&id).ok_or(ModelError::UnknownId(id))
    }

    pub fn get_mut(&mut self, id: SolutionId) -> Result<&mut SolutionRecord, ModelError> {
        self.records.get_mut(&id).ok_or(ModelError::UnknownId(id))
    }

    pub fn contains(&self, id: SolutionId) -> bool {
        self.records.contains_key(&id)
    }

    /// Up to `limit` ancestors of `id`, nearest first.
    pub fn ancestor_chain(&self, id: SolutionId, limit: usize) -> Result<Vec<&SolutionRecord>, ModelError> {
        let mut current = self.get(id)?;
        let mut chain = Vec::new();
        while chain.len() < limit {
            let Some(parent) = current.parent_id else { break };
            current = self.get(parent)?;
            chain.push(current);
        }
        Ok(chain)
    }

    pub fn roots(&self) -> &[SolutionId] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in id order, which is also insertion order for a single run.
    pub fn iter(&self) -> impl Iterator<Item = &SolutionRecord> {
        self.records.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut SolutionRecord> {
        self.records.values_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = SolutionId> + '_ {
        self.records.keys().copied()
    }

    /// Ids of records whose content hash collides with another record's.
    pub fn duplicate_contents(&self) -> Vec<Vec<SolutionId>> {
        let mut by_hash: BTreeMap<u64, Vec<SolutionId>> = BTreeMap::new();
        for r in self.records.values() {
            by_hash.entry(r.content_hash).or_default().push(r.id);
        }
        by_hash.into_values().filter(|ids| ids.len() > 1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Population {
    member_ids: Vec<SolutionId>,
    capacity: usize,
}

impl Population {
    pub fn new(capacity: usize) -> Result<Self, ModelError> {
        if capacity == 0 {
            return Err(ModelError::ZeroCapacity);
        }
        Ok(Self { member_ids: Vec::new(), capacity })
    }

    /// Replaces the members, checking capacity, uniqueness and existence.
    pub fn set_members(&mut self, ids: Vec<SolutionId>, store: &LineageStore) -> Result<(), ModelError> {
        if ids.len() > self.capacity {
            return Err(ModelError::OverCapacity { capacity: self.capacity, len: ids.len() });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !store.contains(id) {
                return Err(ModelError::UnknownId(id));
            }
            if !seen.insert(id) {
                return Err(ModelError::DuplicateMember(id));
            }
        }
        self.member_ids = ids;
        Ok(())
    }

    pub fn members(&self) -> &[SolutionId] {
        &self.member_ids
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

use serde::{Deserialize, Serialize};

/// Categorical user attributes.
///
/// `user_id` and `device_id` feed only the gated-expert layer unless the
/// query is configured to include them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserProfile {
    pub age: u32,
    pub gender: u32,
    pub region: u32,
    pub user_id: u32,
    pub device_id: u32,
}

/// One exposure in a user's history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub item: u32,
    pub watch_ratio: f64,
    pub like: bool,
    pub comment: bool,
    pub share: bool,
    pub author: u32,
    pub tag: u32,
    pub ts: u64,
}

impl BehaviorEvent {
    pub fn interacted(&self) -> bool {
        self.like || self.comment || self.share
    }
}

/// Per-item side features for the item tower.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemFeatures {
    pub item: u32,
    pub author: u32,
    pub tag: u32,
    /// In [0, 1].
    pub popularity: f64,
}

/// Everything the user tower reads for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct UserInput {
    pub profile: UserProfile,
    /// Chronological; only the most recent `n_max` events are used.
    pub history: Vec<BehaviorEvent>,
}

impl UserInput {
    pub fn new(profile: UserProfile, history: Vec<BehaviorEvent>) -> Self {
        UserInput { profile, history }
    }

    /// The last `n_max` events.
    pub fn window(&self, n_max: usize) -> &[BehaviorEvent] {
        let start = self.history.len().saturating_sub(n_max);
        &self.history[start..]
    }
}

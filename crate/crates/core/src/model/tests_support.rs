use rand::Rng;

use super::*;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        n_max: 6,
        ffn_hidden: 16,
        quota_hidden: 4,
        vocab: Vocab {
            items: 30,
            authors: 5,
            tags: 4,
            ages: 3,
            genders: 2,
            regions: 3,
            users: 10,
            devices: 10,
        },
        ..ModelConfig::default()
    }
}

pub(crate) fn random_event(rng: &mut impl Rng, ts: u64) -> BehaviorEvent {
    BehaviorEvent {
        item: rng.random_range(0..30),
        watch_ratio: rng.random(),
        like: rng.random(),
        comment: rng.random(),
        share: rng.random(),
        author: rng.random_range(0..5),
        tag: rng.random_range(0..4),
        ts,
    }
}

pub(crate) fn random_input(rng: &mut impl Rng, n: usize) -> UserInput {
    let profile = UserProfile {
        age: rng.random_range(0..3),
        gender: rng.random_range(0..2),
        region: rng.random_range(0..3),
        user_id: rng.random_range(0..10),
        device_id: rng.random_range(0..10),
    };
    UserInput::new(profile, (0..n).map(|t| random_event(rng, t as u64)).collect())
}

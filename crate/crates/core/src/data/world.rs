//! Synthetic short-video world standing in for production logs.
//!
//! Items cluster by tag in a latent space; users prefer one or two tags.
//! Affinity is the latent inner product. Exposures are drawn with
//! probability increasing in affinity, watch ratios from a Beta whose mean
//! rises with affinity and falls with video length, and interaction flags
//! with probability increasing in watch ratio.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BehaviorEvent, ItemFeatures, UserProfile};

use super::config::WorldConfig;
use super::SECONDS_PER_DAY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub profile: UserProfile,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub features: ItemFeatures,
    /// Video length in seconds.
    pub length_s: f64,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub users: Vec<UserRecord>,
    pub items: Vec<ItemRecord>,
    median_length: f64,
}

/// A simulated exposure together with its generating quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimEvent {
    pub user: u32,
    pub event: BehaviorEvent,
    pub length_s: f64,
    /// Per-objective true affinity, ordered (pro_lvr, max_time, vtr).
    pub truth: [f64; 3],
}

impl SimEvent {
    pub fn duration(&self) -> f64 {
        self.event.watch_ratio * self.length_s
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn unit_normal_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    let n = Normal::new(0.0, scale).expect("finite scale");
    (0..dim).map(|_| n.sample(rng)).collect()
}

/// Builds a world; identical configs give identical worlds.
pub fn generate_world(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.latent_dim;
    let norm = 1.0 / (dim as f64).sqrt();

    let tag_centroids: Vec<Vec<f64>> = (0..cfg.n_tags)
        .map(|_| unit_normal_vec(&mut rng, dim, 1.0))
        .collect();
    let author_tag: Vec<usize> = (0..cfg.n_authors)
        .map(|_| rng.random_range(0..cfg.n_tags))
        .collect();
    let author_offset: Vec<Vec<f64>> = (0..cfg.n_authors)
        .map(|_| unit_normal_vec(&mut rng, dim, 0.3))
        .collect();

    let length_dist = LogNormal::new(30f64.ln(), 0.8).expect("valid lognormal");
    let pop_dist = LogNormal::new(0.0, 1.0).expect("valid lognormal");
    let mut raw_pop = Vec::with_capacity(cfg.n_items);
    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let author = rng.random_range(0..cfg.n_authors);
        // Mostly the author's home tag, sometimes another.
        let tag = if rng.random::<f64>() < 0.8 {
            author_tag[author]
        } else {
            rng.random_range(0..cfg.n_tags)
        };
        let noise = unit_normal_vec(&mut rng, dim, 0.4);
        let latent = (0..dim)
            .map(|j| tag_centroids[tag][j] + author_offset[author][j] + noise[j])
            .collect();
        raw_pop.push(pop_dist.sample(&mut rng));
        items.push(ItemRecord {
            features: ItemFeatures {
                item: i as u32,
                author: author as u32,
                tag: tag as u32,
                popularity: 0.0,
            },
            length_s: length_dist.sample(&mut rng).clamp(5.0, 600.0),
            latent,
        });
    }
    let max_pop = raw_pop.iter().copied().fold(0.0, f64::max);
    for (item, p) in items.iter_mut().zip(&raw_pop) {
        item.features.popularity = p / max_pop;
    }

    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let primary = rng.random_range(0..cfg.n_tags);
        let secondary = rng.random_range(0..cfg.n_tags);
        let mix = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.6 };
        let noise = unit_normal_vec(&mut rng, dim, 0.3);
        let latent = (0..dim)
            .map(|j| {
                let pref = mix * tag_centroids[primary][j] + (1.0 - mix) * tag_centroids[secondary][j];
                (pref + noise[j]) * norm * 1.5
            })
            .collect();
        users.push(UserRecord {
            profile: UserProfile {
                age: rng.random_range(0..cfg.n_ages) as u32,
                gender: rng.random_range(0..cfg.n_genders) as u32,
                region: (primary % cfg.n_regions) as u32,
                user_id: u as u32,
                device_id: rng.random_range(0..cfg.n_devices) as u32,
            },
            latent,
        });
    }

    let mut lengths: Vec<f64> = items.iter().map(|i| i.length_s).collect();
    lengths.sort_by(f64::total_cmp);
    let median_length = lengths[lengths.len() / 2];

    Ok(SyntheticWorld {
        config: cfg.clone(),
        users,
        items,
        median_length,
    })
}

impl SyntheticWorld {
    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        let (u, i) = (&self.users[user].latent, &self.items[item].latent);
        u.iter().zip(i).map(|(a, b)| a * b).sum()
    }

    /// Mean of the watch-ratio distribution for a user–item pair.
    pub fn expected_watch_ratio(&self, user: usize, item: usize) -> f64 {
        let len = self.items[item].length_s;
        let len_effect = -0.5 * (len / self.median_length).ln();
        sigmoid(1.2 * self.affinity(user, item) - 2.5 + len_effect)
    }

    /// Per-objective true affinities, ordered (pro_lvr, max_time, vtr).
    ///
    /// vtr tracks the expected watch ratio, pro_lvr the expected watch
    /// duration relative to a typical video, max_time the chance that the
    /// expected duration is a large multiple of a typical one.
    pub fn true_affinities(&self, user: usize, item: usize) -> [f64; 3] {
        let mu = self.expected_watch_ratio(user, item);
        let rel = mu * self.items[item].length_s / self.median_length;
        let pro_lvr = 1.0 - (-rel).exp();
        let max_time = sigmoid(3.0 * (rel - 2.0));
        [pro_lvr, max_time, mu]
    }

    pub fn item_features(&self) -> Vec<ItemFeatures> {
        self.items.iter().map(|i| i.features).collect()
    }

    pub fn profiles(&self) -> Vec<UserProfile> {
        self.users.iter().map(|u| u.profile).collect()
    }
}

/// Simulates per-user chronological exposure streams.
pub fn simulate_events(world: &SyntheticWorld) -> Result<Vec<Vec<SimEvent>>> {
    let cfg = &world.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7e7_5eed_e7e7);
    let span = cfg.n_days as u64 * SECONDS_PER_DAY;
    let slot = span / cfg.events_per_user as u64;
    if slot < 2 {
        return Err(Error::config("events_per_user", "too many events for the time span"));
    }
    let n_items = world.items.len();
    let log_pop: Vec<f64> = world
        .items
        .iter()
        .map(|i| 0.5 * i.features.popularity.max(1e-6).ln())
        .collect();

    let mut streams = Vec::with_capacity(world.users.len());
    for (u, user) in world.users.iter().enumerate() {
        let logits: Vec<f64> = (0..n_items)
            .map(|i| cfg.exposure_sharpness * world.affinity(u, i) + log_pop[i])
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let picker = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;

        let mut stream = Vec::with_capacity(cfg.events_per_user);
        for j in 0..cfg.events_per_user {
            let item = picker.sample(&mut rng);
            let rec = &world.items[item];
            let mu = world.expected_watch_ratio(u, item).clamp(1e-3, 1.0 - 1e-3);
            let kappa = cfg.watch_concentration;
            let beta = Beta::new(mu * kappa, (1.0 - mu) * kappa).expect("positive shape");
            let watch_ratio: f64 = beta.sample(&mut rng).clamp(0.0, 1.0);
            let like = rng.random::<f64>() < sigmoid(6.0 * watch_ratio - 5.0);
            let comment = rng.random::<f64>() < sigmoid(6.0 * watch_ratio - 6.5);
            let share = rng.random::<f64>() < sigmoid(6.0 * watch_ratio - 7.0);
            let ts = j as u64 * slot + rng.random_range(0..slot);
            stream.push(SimEvent {
                user: user.profile.user_id,
                event: BehaviorEvent {
                    item: item as u32,
                    watch_ratio,
                    like,
                    comment,
                    share,
                    author: rec.features.author,
                    tag: rec.features.tag,
                    ts,
                },
                length_s: rec.length_s,
                truth: world.true_affinities(u, item),
            });
        }
        streams.push(stream);
    }
    Ok(streams)
}

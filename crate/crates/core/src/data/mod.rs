//! Synthetic interaction data, objective labels and training batches.

mod batches;
mod config;
mod io;
pub mod labels;
mod world;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{BehaviorEvent, ItemFeatures, UserInput, UserProfile};

pub use batches::{make_batches, positive_indices};
pub use config::{LabelConfig, WorldConfig};
pub use io::{read_dataset, read_jsonl, write_dataset, write_jsonl, DatasetFiles};
pub use world::{generate_world, simulate_events, ItemRecord, SimEvent, SyntheticWorld, UserRecord};

pub const SECONDS_PER_DAY: u64 = 86_400;

/// Objective order used throughout: index 0 is pro_lvr, 1 max_time, 2 vtr.
pub const OBJECTIVE_NAMES: [&str; 3] = ["pro_lvr", "max_time", "vtr"];

/// One exposure as stored in the events file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user: u32,
    pub item: u32,
    pub ts: u64,
    pub watch_ratio: f64,
    pub like: u8,
    pub comment: u8,
    pub share: u8,
    pub author: u32,
    pub tag: u32,
}

/// One exposure with derived labels, as stored in the examples file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub user: u32,
    pub item: u32,
    pub ts: u64,
    pub watch_ratio: f64,
    pub like: u8,
    pub comment: u8,
    pub share: u8,
    pub author: u32,
    pub tag: u32,
    pub l_pro_lvr: u8,
    pub l_max_time: u8,
    pub l_vtr: u8,
    pub pscore: f64,
}

impl LabeledExample {
    pub fn labels(&self) -> [u8; 3] {
        [self.l_pro_lvr, self.l_max_time, self.l_vtr]
    }

    pub fn any_positive(&self) -> bool {
        self.labels().iter().any(|&l| l == 1)
    }

    pub fn event(&self) -> BehaviorEvent {
        BehaviorEvent {
            item: self.item,
            watch_ratio: self.watch_ratio,
            like: self.like == 1,
            comment: self.comment == 1,
            share: self.share == 1,
            author: self.author,
            tag: self.tag,
            ts: self.ts,
        }
    }

    pub fn record(&self) -> EventRecord {
        EventRecord {
            user: self.user,
            item: self.item,
            ts: self.ts,
            watch_ratio: self.watch_ratio,
            like: self.like,
            comment: self.comment,
            share: self.share,
            author: self.author,
            tag: self.tag,
        }
    }
}

/// Users, catalog and labelled exposures, grouped per user in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub users: Vec<UserProfile>,
    pub items: Vec<ItemFeatures>,
    /// `examples[u]` is user `u`'s chronological stream.
    pub examples: Vec<Vec<LabeledExample>>,
    pub holdout_start: u64,
}

/// Position of an example: (user, index within the user's stream).
pub type ExampleRef = (usize, usize);

impl Dataset {
    pub fn n_objectives(&self) -> usize {
        OBJECTIVE_NAMES.len()
    }

    pub fn get(&self, r: ExampleRef) -> &LabeledExample {
        &self.examples[r.0][r.1]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ExampleRef, &LabeledExample)> {
        self.examples
            .iter()
            .enumerate()
            .flat_map(|(u, s)| s.iter().enumerate().map(move |(j, e)| ((u, j), e)))
    }

    /// Examples before the holdout day.
    pub fn train_refs(&self) -> Vec<ExampleRef> {
        self.iter()
            .filter(|(_, e)| e.ts < self.holdout_start)
            .map(|(r, _)| r)
            .collect()
    }

    /// The user's input just before example `r`: profile plus the events
    /// strictly earlier in their stream.
    pub fn user_input_before(&self, r: ExampleRef, n_max: usize) -> UserInput {
        let stream = &self.examples[r.0];
        let start = r.1.saturating_sub(n_max);
        UserInput::new(
            self.users[r.0],
            stream[start..r.1].iter().map(LabeledExample::event).collect(),
        )
    }

    /// The user's most recent training-window events.
    pub fn user_input_at_holdout(&self, user: usize, n_max: usize) -> UserInput {
        let stream = &self.examples[user];
        let end = stream.partition_point(|e| e.ts < self.holdout_start);
        let start = end.saturating_sub(n_max);
        UserInput::new(
            self.users[user],
            stream[start..end].iter().map(LabeledExample::event).collect(),
        )
    }

    /// Fraction of examples positive for each objective.
    pub fn label_shares(&self) -> [f64; 3] {
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for (_, e) in self.iter() {
            total += 1;
            for (c, l) in counts.iter_mut().zip(e.labels()) {
                *c += l as usize;
            }
        }
        counts.map(|c| c as f64 / total.max(1) as f64)
    }

    /// Items positive for each objective within the training window.
    pub fn positive_items(&self) -> Vec<std::collections::BTreeSet<u32>> {
        let mut sets = vec![std::collections::BTreeSet::new(); 3];
        for (_, e) in self.iter().filter(|(_, e)| e.ts < self.holdout_start) {
            for (k, l) in e.labels().iter().enumerate() {
                if *l == 1 {
                    sets[k].insert(e.item);
                }
            }
        }
        sets
    }
}

/// Derives labels and fused scores for simulated streams.
///
/// The fused score is `sum_k c_k * truth_k + noise`, left on the affinity
/// scale so that scores equal to the true affinities fit it exactly with
/// weights `c`.
pub fn label_streams(world: &SyntheticWorld, streams: &[Vec<SimEvent>]) -> Dataset {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    let cfg = &world.config;
    let lc = &cfg.labels;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x95c0_12e5);
    let noise = Normal::new(0.0, cfg.pscore_noise.max(0.0)).expect("finite noise");

    let mut examples: Vec<Vec<LabeledExample>> = Vec::with_capacity(streams.len());
    for stream in streams {
        let durations: Vec<f64> = stream.iter().map(SimEvent::duration).collect();
        let ratios: Vec<f64> = stream.iter().map(|e| e.event.watch_ratio).collect();
        let pro = labels::derive_pro_lvr(&durations, lc.pro_lvr_percentile, lc.pro_lvr_window);
        let max = labels::derive_max_time(&durations, lc.max_time_lookback, lc.max_time_multiplier);
        let vtr = labels::derive_vtr(&ratios, lc.vtr_threshold);
        let rows = stream
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let fused: f64 = s
                    .truth
                    .iter()
                    .zip(&cfg.pscore_coefficients)
                    .map(|(a, c)| a * c)
                    .sum();
                let e = s.event;
                LabeledExample {
                    user: s.user,
                    item: e.item,
                    ts: e.ts,
                    watch_ratio: e.watch_ratio,
                    like: e.like as u8,
                    comment: e.comment as u8,
                    share: e.share as u8,
                    author: e.author,
                    tag: e.tag,
                    l_pro_lvr: pro[t] as u8,
                    l_max_time: max[t] as u8,
                    l_vtr: vtr[t] as u8,
                    pscore: fused + noise.sample(&mut rng),
                }
            })
            .collect();
        examples.push(rows);
    }

    Dataset {
        users: world.profiles(),
        items: world.item_features(),
        examples,
        holdout_start: cfg.holdout_start(),
    }
}

/// World generation, simulation and labelling in one call.
pub fn build_dataset(cfg: &WorldConfig) -> Result<(SyntheticWorld, Dataset)> {
    let world = generate_world(cfg)?;
    let streams = simulate_events(&world)?;
    let ds = label_streams(&world, &streams);
    Ok((world, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_shares_put_max_time_last() {
        let (_, ds) = build_dataset(&WorldConfig::default()).unwrap();
        let [pro, max, vtr] = ds.label_shares();
        assert!(max < pro.min(vtr), "shares pro={pro} max={max} vtr={vtr}");
    }

    #[test]
    fn noiseless_fused_score_is_the_coefficient_mix_of_true_affinities() {
        let cfg = WorldConfig {
            n_users: 30,
            n_items: 100,
            n_devices: 30,
            events_per_user: 40,
            pscore_noise: 0.0,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let streams = simulate_events(&world).unwrap();
        let ds = label_streams(&world, &streams);
        for (stream, sim) in ds.examples.iter().zip(&streams) {
            for (e, s) in stream.iter().zip(sim) {
                let t = world.true_affinities(e.user as usize, e.item as usize);
                assert_eq!(t, s.truth);
                let expect = 0.4 * t[0] + 0.2 * t[1] + 0.4 * t[2];
                assert!((e.pscore - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn labels_are_a_pure_function_of_the_stream() {
        let cfg = WorldConfig {
            n_users: 10,
            n_items: 40,
            n_devices: 10,
            events_per_user: 50,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let streams = simulate_events(&world).unwrap();
        assert_eq!(label_streams(&world, &streams), label_streams(&world, &streams));
    }

    #[test]
    fn top_affinity_decile_watches_longer() {
        let cfg = WorldConfig {
            n_users: 100,
            n_items: 500,
            n_devices: 100,
            events_per_user: 150,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let mut pairs: Vec<(f64, f64)> = simulate_events(&world)
            .unwrap()
            .iter()
            .flatten()
            .map(|e| (world.affinity(e.user as usize, e.event.item as usize), e.event.watch_ratio))
            .collect();
        assert!(pairs.len() >= 10_000);
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let tenth = pairs.len() / 10;
        let mean = |s: &[(f64, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        let bottom = mean(&pairs[..tenth]);
        let top = mean(&pairs[pairs.len() - tenth..]);
        assert!(top > bottom, "top {top} bottom {bottom}");
    }
}

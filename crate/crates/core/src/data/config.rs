use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the synthetic short-video world and of label derivation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_authors: usize,
    pub n_tags: usize,
    pub n_ages: usize,
    pub n_genders: usize,
    pub n_regions: usize,
    pub n_devices: usize,
    pub latent_dim: usize,
    pub events_per_user: usize,
    /// Days covered by the event log; the last one is held out for testing.
    pub n_days: usize,
    pub seed: u64,
    /// How strongly exposures follow affinity.
    pub exposure_sharpness: f64,
    /// Beta concentration of sampled watch ratios.
    pub watch_concentration: f64,
    pub labels: LabelConfig,
    /// Mixture of per-objective true affinities forming the fused score,
    /// ordered (pro_lvr, max_time, vtr).
    pub pscore_coefficients: [f64; 3],
    pub pscore_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Quantile of the recent-window durations a view must exceed.
    pub pro_lvr_percentile: f64,
    pub pro_lvr_window: usize,
    pub max_time_lookback: usize,
    pub max_time_multiplier: f64,
    pub vtr_threshold: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            pro_lvr_percentile: 0.75,
            pro_lvr_window: 100,
            max_time_lookback: 10,
            max_time_multiplier: 2.0,
            vtr_threshold: 0.4,
        }
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_users: 500,
            n_items: 2000,
            n_authors: 200,
            n_tags: 20,
            n_ages: 8,
            n_genders: 3,
            n_regions: 16,
            n_devices: 500,
            latent_dim: 8,
            events_per_user: 120,
            n_days: 6,
            seed: 7,
            exposure_sharpness: 3.0,
            watch_concentration: 6.0,
            labels: LabelConfig::default(),
            pscore_coefficients: [0.4, 0.2, 0.4],
            pscore_noise: 0.01,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_authors", self.n_authors),
            ("n_tags", self.n_tags),
            ("n_ages", self.n_ages),
            ("n_genders", self.n_genders),
            ("n_regions", self.n_regions),
            ("n_devices", self.n_devices),
            ("latent_dim", self.latent_dim),
            ("events_per_user", self.events_per_user),
            ("labels.pro_lvr_window", self.labels.pro_lvr_window),
            ("labels.max_time_lookback", self.labels.max_time_lookback),
        ];
        for (field, v) in counts {
            if v < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.n_days < 2 {
            return Err(Error::config("n_days", "needs at least one training and one holdout day"));
        }
        let l = &self.labels;
        if !(l.pro_lvr_percentile > 0.0 && l.pro_lvr_percentile < 1.0) {
            return Err(Error::config("labels.pro_lvr_percentile", "must lie in (0, 1)"));
        }
        if !(l.max_time_multiplier > 1.0) {
            return Err(Error::config("labels.max_time_multiplier", "must exceed 1"));
        }
        if !(l.vtr_threshold > 0.0 && l.vtr_threshold < 1.0) {
            return Err(Error::config("labels.vtr_threshold", "must lie in (0, 1)"));
        }
        if !(self.exposure_sharpness >= 0.0 && self.exposure_sharpness.is_finite()) {
            return Err(Error::config("exposure_sharpness", "must be finite and nonnegative"));
        }
        if !(self.watch_concentration > 0.0) {
            return Err(Error::config("watch_concentration", "must be positive"));
        }
        if self.pscore_coefficients.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            return Err(Error::config("pscore_coefficients", "must be finite and nonnegative"));
        }
        if !(self.pscore_noise >= 0.0) {
            return Err(Error::config("pscore_noise", "must be nonnegative"));
        }
        Ok(())
    }

    /// Model vocabulary sized to this world's id ranges.
    pub fn vocab(&self) -> crate::model::Vocab {
        crate::model::Vocab {
            items: self.n_items,
            authors: self.n_authors,
            tags: self.n_tags,
            ages: self.n_ages,
            genders: self.n_genders,
            regions: self.n_regions,
            users: self.n_users,
            devices: self.n_devices,
        }
    }

    /// First timestamp of the holdout day.
    pub fn holdout_start(&self) -> u64 {
        (self.n_days as u64 - 1) * super::SECONDS_PER_DAY
    }
}

//! Objective labels derived from a user's chronological exposure stream.
//!
//! Every rule looks only at the current and earlier events, so appending
//! future events never changes a past label.

/// Empirical `p`-quantile with linear interpolation between order
/// statistics (position `(n - 1) * p` in the sorted sample).
pub fn linear_quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Personalised long view: the duration strictly exceeds the `p`-quantile
/// of the previous `min(window, available)` durations. Events with no
/// history are negative.
pub fn derive_pro_lvr(durations: &[f64], p: f64, window: usize) -> Vec<bool> {
    (0..durations.len())
        .map(|t| {
            let start = t.saturating_sub(window);
            match linear_quantile(&durations[start..t], p) {
                Some(q) => durations[t] > q,
                None => false,
            }
        })
        .collect()
}

/// Surprise moment: the duration strictly exceeds `multiplier` times the
/// mean of the previous `lookback` durations. Needs a full lookback.
pub fn derive_max_time(durations: &[f64], lookback: usize, multiplier: f64) -> Vec<bool> {
    (0..durations.len())
        .map(|t| {
            if t < lookback || lookback == 0 {
                return false;
            }
            let mean = durations[t - lookback..t].iter().sum::<f64>() / lookback as f64;
            durations[t] > multiplier * mean
        })
        .collect()
}

/// View-through: the watch ratio reaches `threshold`.
pub fn derive_vtr(watch_ratios: &[f64], threshold: f64) -> Vec<bool> {
    watch_ratios.iter().map(|&w| w >= threshold).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn quantile_rule_on_one_to_hundred() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        // (100 - 1) * 0.75 = 74.25 -> 75 + 0.25 * (76 - 75)
        assert_eq!(linear_quantile(&xs, 0.75), Some(75.25));
        assert_eq!(linear_quantile(&[3.0], 0.75), Some(3.0));
        assert_eq!(linear_quantile(&[], 0.5), None);
    }

    #[test]
    fn pro_lvr_strict_exceedance_and_empty_window() {
        let labels = derive_pro_lvr(&[0.5, 0.5, 0.5, 0.5], 0.75, 100);
        assert_eq!(labels, vec![false; 4]);

        let mut xs: Vec<f64> = (1..=100).map(|v| v as f64 * 0.1).collect();
        xs.push(7.6);
        xs.push(7.525);
        let labels = derive_pro_lvr(&xs, 0.75, 100);
        // Window for index 100 is 0.1..=10.0 with quantile 7.525.
        assert!(labels[100]);
        // Window for index 101 drops 0.1 and adds 7.6; its quantile is larger.
        assert!(!labels[101]);
        assert!(!labels[0]);
    }

    #[test]
    fn pro_lvr_window_is_bounded() {
        // An early huge value falls out of a window of 2.
        let labels = derive_pro_lvr(&[100.0, 1.0, 1.0, 2.0], 0.75, 2);
        assert!(labels[3]);
        let labels = derive_pro_lvr(&[100.0, 1.0, 1.0, 2.0], 0.75, 3);
        assert!(!labels[3]);
    }

    #[test]
    fn max_time_rule() {
        let mut xs = vec![0.2; 10];
        xs.push(0.5);
        assert!(derive_max_time(&xs, 10, 2.0)[10]);

        let mut xs = vec![0.25; 10];
        xs.push(0.5);
        assert!(!derive_max_time(&xs, 10, 2.0)[10], "equality is not exceedance");

        let xs = vec![0.1, 0.1, 5.0];
        assert_eq!(derive_max_time(&xs, 10, 2.0), vec![false; 3]);
    }

    #[test]
    fn vtr_rule() {
        assert_eq!(derive_vtr(&[1.0, 0.0, 0.4, 0.39], 0.4), vec![true, false, true, false]);
        assert_eq!(derive_vtr(&[0.0, 0.3, 1.0], 0.0), vec![true; 3]);
    }

    proptest! {
        #[test]
        fn appending_future_events_keeps_past_labels(
            xs in prop::collection::vec(0.0f64..100.0, 1..60),
            tail in prop::collection::vec(0.0f64..100.0, 1..20),
        ) {
            let mut longer = xs.clone();
            longer.extend(&tail);
            let n = xs.len();
            prop_assert_eq!(&derive_pro_lvr(&xs, 0.75, 20)[..], &derive_pro_lvr(&longer, 0.75, 20)[..n]);
            prop_assert_eq!(&derive_max_time(&xs, 5, 2.0)[..], &derive_max_time(&longer, 5, 2.0)[..n]);
        }
    }
}

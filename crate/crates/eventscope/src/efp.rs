//! Event Frequency Patterns: per-pattern distance profiles over binned event
//! counts and the empirical-survival test that flags frequency anomalies.
//!
//! Distances are plain (magnitude-sensitive) Euclidean between length-M
//! count subsequences; no z-normalization and no FFT acceleration. The
//! profile for a series is the nearest non-overlapping neighbor distance of
//! every sliding window.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EfpError {
    #[error("series for {esp_id:?} has {len} bins, need at least {need} for M={m}")]
    SeriesTooShort {
        esp_id: String,
        len: usize,
        m: usize,
        need: usize,
    },
    #[error("profile for {0:?} is empty")]
    EmptyProfile(String),
    #[error("unknown pattern id {0:?}")]
    UnknownEsp(String),
    #[error("window length {got} does not match M={m}")]
    BadWindowLength { got: usize, m: usize },
    #[error("model file error: {0}")]
    BadModelFile(String),
}

/// Binned event counts for one pattern id over contiguous bins from
/// `origin_ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySeries {
    pub esp_id: String,
    pub origin_ms: i64,
    pub bin_secs: u64,
    pub counts: Vec<u64>,
}

/// Counts labeled events into zero-filled per-pattern frequency series
/// spanning `[origin, horizon)`. Events outside the range are ignored.
pub fn bin_frequencies<'a, I>(
    labeled: I,
    origin_ms: i64,
    bin_secs: u64,
    horizon_ms: i64,
) -> BTreeMap<String, FrequencySeries>
where
    I: IntoIterator<Item = (i64, &'a str)>,
{
    let bin_ms = bin_secs as i64 * 1000;
    let n_bins = if horizon_ms > origin_ms {
        ((horizon_ms - origin_ms + bin_ms - 1) / bin_ms) as usize
    } else {
        0
    };
    let mut series: BTreeMap<String, FrequencySeries> = BTreeMap::new();
    for (time_ms, esp_id) in labeled {
        if time_ms < origin_ms || time_ms >= horizon_ms {
            continue;
        }
        let bin = ((time_ms - origin_ms) / bin_ms) as usize;
        let entry = series
            .entry(esp_id.to_string())
            .or_insert_with(|| FrequencySeries {
                esp_id: esp_id.to_string(),
                origin_ms,
                bin_secs,
                counts: vec![0; n_bins],
            });
        entry.counts[bin] += 1;
    }
    series
}

pub fn euclidean(a: &[u64], b: &[u64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn sliding_windows(counts: &[u64], m: usize) -> Vec<Vec<u64>> {
    if counts.len() < m {
        return Vec::new();
    }
    counts.windows(m).map(|w| w.to_vec()).collect()
}

/// Nearest non-overlapping neighbor distances plus the retained training
/// windows for online queries.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProfile {
    pub esp_id: String,
    pub m: usize,
    pub distances: Vec<f64>,
    pub training_windows: Vec<Vec<u64>>,
}

/// Computes the distance profile: for each window `u`, the minimum Euclidean
/// distance to any window `v` with `|u - v| >= M`, over both past and future
/// neighbors.
pub fn build_profile(series: &FrequencySeries, m: usize) -> Result<DistanceProfile, EfpError> {
    if m < 2 {
        return Err(EfpError::BadWindowLength { got: m, m: 2 });
    }
    let n = series.counts.len();
    if n < 2 * m {
        return Err(EfpError::SeriesTooShort {
            esp_id: series.esp_id.clone(),
            len: n,
            m,
            need: 2 * m,
        });
    }
    let windows = sliding_windows(&series.counts, m);
    let n_windows = windows.len();
    let mut distances = Vec::with_capacity(n_windows);
    for u in 0..n_windows {
        let mut best = f64::INFINITY;
        for (v, other) in windows.iter().enumerate() {
            if u.abs_diff(v) < m {
                continue;
            }
            let d = euclidean(&windows[u], other);
            if d < best {
                best = d;
            }
        }
        distances.push(best);
    }
    Ok(DistanceProfile {
        esp_id: series.esp_id.clone(),
        m,
        distances,
        training_windows: windows,
    })
}

/// Minimum Euclidean distance from a new window to any retained training
/// window. No overlap exclusion: online windows are disjoint from training
/// by construction.
pub fn nearest_distance(profile: &DistanceProfile, w_new: &[u64]) -> Result<f64, EfpError> {
    if w_new.len() != profile.m {
        return Err(EfpError::BadWindowLength {
            got: w_new.len(),
            m: profile.m,
        });
    }
    if profile.training_windows.is_empty() {
        return Err(EfpError::EmptyProfile(profile.esp_id.clone()));
    }
    Ok(profile
        .training_windows
        .iter()
        .map(|w| euclidean(w, w_new))
        .fold(f64::INFINITY, f64::min))
}

/// Empirical survival over the training distances, with the `<=` tie
/// convention: `S(d) = 1 - |{d_u <= d}| / |f_i|`.
pub fn survival(distances: &[f64], d_new: f64) -> Result<f64, EfpError> {
    if distances.is_empty() {
        return Err(EfpError::EmptyProfile(String::new()));
    }
    // |{d > d_new}| / |f_i| equals 1 - ECDF under the <= convention but
    // avoids the floating-point subtraction, keeping ratios like 1/5 exact.
    let above = distances.iter().filter(|&&d| d > d_new).count();
    Ok(above as f64 / distances.len() as f64)
}

/// One per-pattern model entry: the training series plus either a distance
/// profile or, for series too short to profile, an exact-count whitelist.
#[derive(Debug, Clone, PartialEq)]
pub struct EspProfile {
    pub series: FrequencySeries,
    pub kind: ProfileKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileKind {
    Distance(DistanceProfile),
    /// Degenerate fallback for sparse patterns: a window is anomalous iff
    /// its count vector was never observed in training.
    Whitelist { windows: BTreeSet<Vec<u64>> },
}

fn build_whitelist(series: &FrequencySeries, m: usize) -> BTreeSet<Vec<u64>> {
    if series.counts.len() >= m {
        sliding_windows(&series.counts, m).into_iter().collect()
    } else {
        // Pad the short history with leading empty bins.
        let mut window = vec![0; m - series.counts.len()];
        window.extend_from_slice(&series.counts);
        [window].into_iter().collect()
    }
}

/// The full frequency model: one profile per pattern id, sharing bin size,
/// subsequence length M, and significance level alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct EfpModel {
    pub profiles: BTreeMap<String, EspProfile>,
    pub alpha: f64,
    pub bin_secs: u64,
    pub m: usize,
    pub retention_cap: usize,
}

/// Detection verdict for one (pattern, window) test.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVerdict {
    pub esp_id: String,
    pub window_index: usize,
    pub d_new: f64,
    pub survival: f64,
    pub anomalous: bool,
}

impl EfpModel {
    /// Builds profiles from training series; series shorter than `2 * m`
    /// fall back to the exact-count whitelist.
    pub fn build(
        series: BTreeMap<String, FrequencySeries>,
        m: usize,
        alpha: f64,
        bin_secs: u64,
        retention_cap: usize,
    ) -> Result<Self, EfpError> {
        assert!(alpha > 0.0 && alpha < 1.0, "alpha must be in (0, 1)");
        assert!(m >= 2, "M must be at least 2");
        let mut profiles = BTreeMap::new();
        for (esp_id, mut s) in series {
            // The map key is authoritative for the pattern id.
            s.esp_id = esp_id.clone();
            let kind = match build_profile(&s, m) {
                Ok(profile) => ProfileKind::Distance(profile),
                Err(EfpError::SeriesTooShort { .. }) => ProfileKind::Whitelist {
                    windows: build_whitelist(&s, m),
                },
                Err(e) => return Err(e),
            };
            profiles.insert(esp_id, EspProfile { series: s, kind });
        }
        Ok(EfpModel {
            profiles,
            alpha,
            bin_secs,
            m,
            retention_cap,
        })
    }

    /// Tests a new length-M window against the pattern's profile.
    pub fn test_window(
        &self,
        esp_id: &str,
        w_new: &[u64],
        window_index: usize,
    ) -> Result<FrequencyVerdict, EfpError> {
        let profile = self
            .profiles
            .get(esp_id)
            .ok_or_else(|| EfpError::UnknownEsp(esp_id.to_string()))?;
        match &profile.kind {
            ProfileKind::Distance(dp) => {
                let d_new = nearest_distance(dp, w_new)?;
                let s = survival(&dp.distances, d_new)?;
                Ok(FrequencyVerdict {
                    esp_id: esp_id.to_string(),
                    window_index,
                    d_new,
                    survival: s,
                    anomalous: s < self.alpha,
                })
            }
            ProfileKind::Whitelist { windows } => {
                if w_new.len() != self.m {
                    return Err(EfpError::BadWindowLength {
                        got: w_new.len(),
                        m: self.m,
                    });
                }
                let seen = windows.contains(w_new);
                let d_new = windows
                    .iter()
                    .map(|w| euclidean(w, w_new))
                    .fold(f64::INFINITY, f64::min);
                Ok(FrequencyVerdict {
                    esp_id: esp_id.to_string(),
                    window_index,
                    d_new,
                    survival: if seen { 1.0 } else { 0.0 },
                    anomalous: !seen,
                })
            }
        }
    }

    /// Appends a window judged normal to the pattern's profile (caller
    /// contract: never called for anomalous windows). Bounded by the
    /// retention cap with FIFO eviction.
    pub fn update_profile(
        &mut self,
        esp_id: &str,
        w_new: &[u64],
        d_new: f64,
    ) -> Result<(), EfpError> {
        let cap = self.retention_cap;
        let profile = self
            .profiles
            .get_mut(esp_id)
            .ok_or_else(|| EfpError::UnknownEsp(esp_id.to_string()))?;
        match &mut profile.kind {
            ProfileKind::Distance(dp) => {
                if dp.distances.len() == cap {
                    dp.distances.remove(0);
                }
                dp.distances.push(d_new);
                if dp.training_windows.len() == cap {
                    dp.training_windows.remove(0);
                }
                dp.training_windows.push(w_new.to_vec());
            }
            ProfileKind::Whitelist { windows } => {
                windows.insert(w_new.to_vec());
            }
        }
        Ok(())
    }

    /// Trailing training counts, used to seed online detection history so
    /// the first online bins complete a length-M subsequence.
    pub fn trailing_counts(&self, esp_id: &str, n: usize) -> Option<Vec<u64>> {
        self.profiles.get(esp_id).map(|p| {
            let counts = &p.series.counts;
            let start = counts.len().saturating_sub(n);
            counts[start..].to_vec()
        })
    }

    pub fn to_json(&self) -> Value {
        let mut profiles = serde_json::Map::new();
        for (esp_id, p) in &self.profiles {
            let distances: Vec<f64> = match &p.kind {
                ProfileKind::Distance(dp) => dp.distances.clone(),
                ProfileKind::Whitelist { .. } => Vec::new(),
            };
            profiles.insert(
                esp_id.clone(),
                json!({
                    "origin": p.series.origin_ms,
                    "counts": p.series.counts,
                    "distances": distances,
                }),
            );
        }
        json!({
            "bin": self.bin_secs,
            "M": self.m,
            "alpha": self.alpha,
            "profiles": profiles,
        })
    }

    /// Loads a model file; training windows are reconstructed from the
    /// stored counts.
    pub fn from_json(value: &Value, retention_cap: usize) -> Result<Self, EfpError> {
        let bad = |msg: &str| EfpError::BadModelFile(msg.to_string());
        let bin_secs = value
            .get("bin")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing \"bin\""))?;
        let m = value
            .get("M")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing \"M\""))? as usize;
        let alpha = value
            .get("alpha")
            .and_then(Value::as_f64)
            .ok_or_else(|| bad("missing \"alpha\""))?;
        if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
            return Err(bad("alpha must be in (0, 1)"));
        }
        if m < 2 {
            return Err(bad("M must be at least 2"));
        }
        let profiles_json = value
            .get("profiles")
            .and_then(Value::as_object)
            .ok_or_else(|| bad("missing \"profiles\""))?;
        let mut profiles = BTreeMap::new();
        for (esp_id, p) in profiles_json {
            let origin_ms = p
                .get("origin")
                .and_then(Value::as_i64)
                .ok_or_else(|| bad("profile missing \"origin\""))?;
            let counts: Vec<u64> = p
                .get("counts")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("profile missing \"counts\""))?
                .iter()
                .map(|v| v.as_u64().ok_or_else(|| bad("counts must be integers")))
                .collect::<Result<_, _>>()?;
            let distances: Vec<f64> = p
                .get("distances")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("profile missing \"distances\""))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| bad("distances must be numbers")))
                .collect::<Result<_, _>>()?;
            let series = FrequencySeries {
                esp_id: esp_id.clone(),
                origin_ms,
                bin_secs,
                counts,
            };
            let kind = if series.counts.len() >= 2 * m {
                ProfileKind::Distance(DistanceProfile {
                    esp_id: esp_id.clone(),
                    m,
                    distances,
                    training_windows: sliding_windows(&series.counts, m),
                })
            } else {
                ProfileKind::Whitelist {
                    windows: build_whitelist(&series, m),
                }
            };
            profiles.insert(esp_id.clone(), EspProfile { series, kind });
        }
        Ok(EfpModel {
            profiles,
            alpha,
            bin_secs,
            m,
            retention_cap,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(counts: &[u64]) -> FrequencySeries {
        FrequencySeries {
            esp_id: "esp-0000".to_string(),
            origin_ms: 0,
            bin_secs: 60,
            counts: counts.to_vec(),
        }
    }

    #[test]
    fn binning_by_hand() {
        let labeled = [(0, "A"), (10_000, "A"), (70_000, "A")];
        let map = bin_frequencies(labeled, 0, 60, 120_000);
        assert_eq!(map["A"].counts, vec![2, 1]);
    }

    #[test]
    fn binning_zero_fills_full_horizon() {
        let labeled = [(190_000, "B")];
        let map = bin_frequencies(labeled, 0, 60, 300_000);
        assert_eq!(map["B"].counts, vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn binning_omits_unobserved_patterns() {
        let map = bin_frequencies([(0, "A")], 0, 60, 60_000);
        assert!(!map.contains_key("B"));
    }

    #[test]
    fn spike_profile_by_hand() {
        let profile = build_profile(&series(&[1, 1, 1, 1, 5, 1, 1, 1]), 2).unwrap();
        assert_eq!(profile.distances.len(), 7);
        assert_eq!(profile.distances[0], 0.0);
        assert_eq!(profile.distances[3], 4.0);
    }

    #[test]
    fn constant_series_has_zero_distances() {
        let profile = build_profile(&series(&[3; 12]), 3).unwrap();
        assert!(profile.distances.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn too_short_series_rejected() {
        assert!(matches!(
            build_profile(&series(&[1; 5]), 3),
            Err(EfpError::SeriesTooShort { len: 5, need: 6, .. })
        ));
    }

    #[test]
    fn neighbor_candidates_include_past_and_future() {
        // Spike near the start: its only non-overlapping neighbors are in
        // the future, so a forward-only scan would miss them entirely and a
        // backward-only scan would leave d_0 undefined.
        let profile = build_profile(&series(&[9, 9, 1, 1, 1, 1, 1, 1]), 2).unwrap();
        // w_0 = (9,9); nearest valid neighbor is any (1,1) window.
        let expected = euclidean(&[9, 9], &[1, 1]);
        assert_eq!(profile.distances[0], expected);
    }

    #[test]
    fn nearest_distance_by_hand() {
        let profile = DistanceProfile {
            esp_id: "e".to_string(),
            m: 2,
            distances: vec![0.0],
            training_windows: vec![vec![1, 1]],
        };
        assert_eq!(nearest_distance(&profile, &[4, 5]).unwrap(), 5.0);
        assert_eq!(nearest_distance(&profile, &[1, 1]).unwrap(), 0.0);

        let profile = DistanceProfile {
            esp_id: "e".to_string(),
            m: 2,
            distances: vec![0.0],
            training_windows: vec![vec![0, 0], vec![10, 10]],
        };
        assert_eq!(nearest_distance(&profile, &[1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn survival_hand_cases() {
        let f = [0.0, 0.0, 1.0, 1.0, 2.0];
        assert_eq!(survival(&f, 2.0).unwrap(), 0.0);
        assert_eq!(survival(&f, 1.5).unwrap(), 0.2);
        assert_eq!(survival(&f, -1.0).unwrap(), 1.0);
        assert_eq!(survival(&f, 0.0).unwrap(), 0.6);
    }

    fn model_with_distances(distances: Vec<f64>, alpha: f64) -> EfpModel {
        let mut profiles = BTreeMap::new();
        profiles.insert(
            "esp-0000".to_string(),
            EspProfile {
                series: series(&[1; 8]),
                kind: ProfileKind::Distance(DistanceProfile {
                    esp_id: "esp-0000".to_string(),
                    m: 2,
                    distances,
                    training_windows: vec![vec![1, 1], vec![1, 3]],
                }),
            },
        );
        EfpModel {
            profiles,
            alpha,
            bin_secs: 60,
            m: 2,
            retention_cap: 10_000,
        }
    }

    #[test]
    fn test_window_flags_beyond_training_max() {
        let model = model_with_distances(vec![0.0, 0.0, 1.0, 1.0, 2.0], 0.01);
        // (1, 4) is at distance 3 from (1, 1) and 1 from (1, 3): d_new = 1.
        let v = model.test_window("esp-0000", &[1, 4], 7).unwrap();
        assert_eq!(v.d_new, 1.0);
        assert_eq!(v.survival, 0.2);
        assert!(!v.anomalous);

        // d_new = 0 has survival 0.6: normal.
        let v = model.test_window("esp-0000", &[1, 1], 7).unwrap();
        assert_eq!(v.survival, 0.6);
        assert!(!v.anomalous);

        // A window at distance >= the training max is flagged.
        let v = model.test_window("esp-0000", &[1, 99], 7).unwrap();
        assert_eq!(v.survival, 0.0);
        assert!(v.anomalous);
    }

    #[test]
    fn small_profile_only_flags_beyond_max() {
        // With 5 training distances the smallest nonzero survival is 0.2, so
        // alpha = 0.01 can only trigger at survival exactly 0.
        let model = model_with_distances(vec![0.0, 0.0, 1.0, 1.0, 2.0], 0.01);
        for d in [0.0, 0.5, 1.0, 1.5, 1.9] {
            let s = survival(&[0.0, 0.0, 1.0, 1.0, 2.0], d).unwrap();
            assert!(s == 0.0 || s >= 0.2);
            if d < 2.0 {
                assert!(s >= 0.2);
            }
        }
        let v = model.test_window("esp-0000", &[1, 1], 0).unwrap();
        assert!(!v.anomalous);
    }

    #[test]
    fn unknown_esp_rejected() {
        let model = model_with_distances(vec![0.0], 0.01);
        assert!(matches!(
            model.test_window("nope", &[1, 1], 0),
            Err(EfpError::UnknownEsp(_))
        ));
    }

    #[test]
    fn update_appends_and_caps() {
        let mut model = model_with_distances(vec![0.0, 1.0], 0.01);
        model.update_profile("esp-0000", &[2, 2], 0.5).unwrap();
        let dp = match &model.profiles["esp-0000"].kind {
            ProfileKind::Distance(dp) => dp,
            _ => unreachable!(),
        };
        assert_eq!(dp.distances, vec![0.0, 1.0, 0.5]);
        assert_eq!(dp.training_windows.len(), 3);

        let mut model = model_with_distances(vec![0.0, 1.0], 0.01);
        model.retention_cap = 2;
        model.update_profile("esp-0000", &[2, 2], 0.5).unwrap();
        let dp = match &model.profiles["esp-0000"].kind {
            ProfileKind::Distance(dp) => dp,
            _ => unreachable!(),
        };
        assert_eq!(dp.distances, vec![1.0, 0.5]);
        assert_eq!(dp.training_windows.len(), 2);
    }

    #[test]
    fn whitelist_for_sparse_series() {
        let mut input = BTreeMap::new();
        input.insert("sparse".to_string(), series(&[0, 1, 0]));
        let model = EfpModel::build(input, 2, 0.001, 60, 10_000).unwrap();
        let seen = model.test_window("sparse", &[1, 0], 0).unwrap();
        assert!(!seen.anomalous);
        let unseen = model.test_window("sparse", &[5, 5], 0).unwrap();
        assert!(unseen.anomalous);
    }

    #[test]
    fn model_file_round_trip() {
        let mut input = BTreeMap::new();
        input.insert("a".to_string(), series(&[1, 2, 1, 2, 1, 2, 9, 1, 2, 1, 2, 1]));
        input.insert("sparse".to_string(), series(&[0, 1]));
        let model = EfpModel::build(input, 3, 0.001, 60, 10_000).unwrap();
        let text = model.to_json().to_string();
        let loaded =
            EfpModel::from_json(&serde_json::from_str(&text).unwrap(), 10_000).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn scaling_series_scales_distances_linearly() {
        let base: Vec<u64> = vec![1, 3, 2, 5, 1, 0, 4, 2, 3, 1, 2, 6, 1, 3];
        let scaled: Vec<u64> = base.iter().map(|&x| x * 3).collect();
        let p1 = build_profile(&series(&base), 3).unwrap();
        let p2 = build_profile(&series(&scaled), 3).unwrap();
        for (d1, d2) in p1.distances.iter().zip(p2.distances.iter()) {
            assert!((d2 - 3.0 * d1).abs() < 1e-9);
        }
    }
}

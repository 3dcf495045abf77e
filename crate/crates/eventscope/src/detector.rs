//! Online detection over the event stream: pointwise classification against
//! the rule set, per-pattern frequency tests against the distance profiles,
//! window verdicts, and the adaptation loop.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::efp::{EfpError, EfpModel};
use crate::esp::{AdaptationState, EspError, EspSet};
use crate::event_model::{window_events, Event, FieldMapping, TimeWindow, WindowError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Pointwise,
    Frequency,
}

/// Open-box evidence attached to each report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    /// Pointwise: the closest non-matching rule, if any rules exist.
    NearestMiss { rule_id: Option<String> },
    /// Frequency: the tested distance against the training profile.
    Frequency {
        d_new: f64,
        survival: f64,
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub kind: AnomalyKind,
    pub window_start_ms: i64,
    pub window_end_ms: i64,
    /// Pointwise: the unmatched event. Frequency: every event labeled with
    /// the deviating pattern inside the flagged window (may be empty when
    /// the anomaly is a drop to zero).
    pub events: Vec<Event>,
    pub esp_id: Option<String>,
    pub evidence: Evidence,
}

impl AnomalyReport {
    /// Timestamp anomaly nodes carry into the intervention graph: the event
    /// time for pointwise reports, the window end for frequency reports
    /// (tightest sound upper bound for the walk's time filter).
    pub fn anomaly_time_ms(&self) -> i64 {
        match self.kind {
            AnomalyKind::Pointwise => self
                .events
                .first()
                .map(|e| e.time_ms)
                .unwrap_or(self.window_end_ms),
            AnomalyKind::Frequency => self.window_end_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowVerdict {
    pub window_start_ms: i64,
    pub y: bool,
    pub reports: Vec<AnomalyReport>,
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Esp(#[from] EspError),
    #[error(transparent)]
    Efp(#[from] EfpError),
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    /// Detection window length; also the frequency bin width.
    pub delta_secs: u64,
    pub adapt: bool,
    /// T_s: per-window unmatched count a skeleton must exceed.
    pub adapt_threshold: u64,
    /// N_w: consecutive qualifying windows before promotion.
    pub adapt_persistence: u32,
    pub adapt_buffer_cap: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            delta_secs: 60,
            adapt: true,
            adapt_threshold: 5,
            adapt_persistence: 3,
            adapt_buffer_cap: 10_000,
        }
    }
}

/// Trailing per-pattern bin counts (M-1 per pattern) so the current bin
/// completes a length-M subsequence.
pub type History = BTreeMap<String, VecDeque<u64>>;

/// Seeds detection history from the tail of each profile's training series,
/// so the very first online bin already has a full subsequence behind it.
pub fn seed_history(efp: &EfpModel) -> History {
    let need = efp.m - 1;
    let mut history = History::new();
    for esp_id in efp.profiles.keys() {
        let mut tail: VecDeque<u64> = efp
            .trailing_counts(esp_id, need)
            .unwrap_or_default()
            .into();
        while tail.len() < need {
            tail.push_front(0);
        }
        history.insert(esp_id.clone(), tail);
    }
    history
}

struct WindowOutcome {
    verdict: WindowVerdict,
    unmatched: Vec<Event>,
    counts: BTreeMap<String, u64>,
    /// (esp_id, w_new, d_new) for windows the frequency test judged normal.
    normal_freq: Vec<(String, Vec<u64>, f64)>,
}

fn detect_in_window(
    esps: &EspSet,
    efp: &EfpModel,
    window: &TimeWindow,
    history: &History,
    mapping: &FieldMapping,
    window_index: usize,
) -> Result<WindowOutcome, DetectError> {
    let window_end = window.start_ms + window.duration_ms;
    let mut reports = Vec::new();
    let mut unmatched = Vec::new();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut labeled_events: BTreeMap<&str, Vec<&Event>> = BTreeMap::new();

    for event in &window.events {
        let view = event.field_view(mapping);
        match esps.classify_view(&view) {
            Some(esp_id) => {
                *counts.entry(esp_id.to_string()).or_insert(0) += 1;
                labeled_events.entry(esp_id).or_default().push(event);
            }
            None => {
                reports.push(AnomalyReport {
                    kind: AnomalyKind::Pointwise,
                    window_start_ms: window.start_ms,
                    window_end_ms: window_end,
                    events: vec![event.clone()],
                    esp_id: None,
                    evidence: Evidence::NearestMiss {
                        rule_id: esps.nearest_miss(&view).map(str::to_string),
                    },
                });
                unmatched.push(event.clone());
            }
        }
    }

    let mut normal_freq = Vec::new();
    for esp_id in efp.profiles.keys() {
        let Some(tail) = history.get(esp_id) else {
            continue;
        };
        if tail.len() != efp.m - 1 {
            continue;
        }
        let mut w_new: Vec<u64> = tail.iter().copied().collect();
        w_new.push(counts.get(esp_id).copied().unwrap_or(0));
        let verdict = efp.test_window(esp_id, &w_new, window_index)?;
        if verdict.anomalous {
            reports.push(AnomalyReport {
                kind: AnomalyKind::Frequency,
                window_start_ms: window.start_ms,
                window_end_ms: window_end,
                events: labeled_events
                    .get(esp_id.as_str())
                    .map(|evs| evs.iter().map(|e| (*e).clone()).collect())
                    .unwrap_or_default(),
                esp_id: Some(esp_id.clone()),
                evidence: Evidence::Frequency {
                    d_new: verdict.d_new,
                    survival: verdict.survival,
                    alpha: efp.alpha,
                },
            });
        } else {
            normal_freq.push((esp_id.clone(), w_new, verdict.d_new));
        }
    }

    let y = !reports.is_empty();
    Ok(WindowOutcome {
        verdict: WindowVerdict {
            window_start_ms: window.start_ms,
            y,
            reports,
        },
        unmatched,
        counts,
        normal_freq,
    })
}

/// Detects one window: classifies every event, tests every pattern with a
/// complete length-M subsequence, and folds the results into the window's
/// binary verdict.
pub fn detect_window(
    esps: &EspSet,
    efp: &EfpModel,
    window: &TimeWindow,
    history: &History,
    mapping: &FieldMapping,
) -> Result<WindowVerdict, DetectError> {
    Ok(detect_in_window(esps, efp, window, history, mapping, 0)?.verdict)
}

pub struct StreamResult {
    pub verdicts: Vec<WindowVerdict>,
    pub esps: EspSet,
    pub efp: EfpModel,
    /// Rule ids appended by adaptation, in promotion order.
    pub promoted_rules: Vec<String>,
}

/// Runs detection window by window over a time-ordered stream, applying
/// promotions and profile updates at window boundaries.
pub fn run_stream(
    esps: &EspSet,
    efp: &EfpModel,
    events: &[Event],
    mapping: &FieldMapping,
    config: &DetectorConfig,
) -> Result<StreamResult, DetectError> {
    let mut esps = esps.clone();
    let mut efp = efp.clone();
    let delta_ms = config.delta_secs as i64 * 1000;

    let mut result = StreamResult {
        verdicts: Vec::new(),
        esps: esps.clone(),
        efp: efp.clone(),
        promoted_rules: Vec::new(),
    };
    if events.is_empty() {
        return Ok(result);
    }

    // Align windows to the training bin grid so online subsequences
    // continue the training series.
    let grid_anchor = efp
        .profiles
        .values()
        .map(|p| p.series.origin_ms)
        .next()
        .unwrap_or(0);
    let t0 = events[0].time_ms;
    let origin = grid_anchor + (t0 - grid_anchor).div_euclid(delta_ms) * delta_ms;

    let windows = window_events(events, delta_ms, origin)?;
    let mut history = seed_history(&efp);
    let mut adaptation = AdaptationState::new(
        config.adapt_threshold,
        config.adapt_persistence,
        config.adapt_buffer_cap,
    );
    let group_keys = esps.learner_config.effective_group_keys(mapping);

    for (index, window) in windows.iter().enumerate() {
        let outcome = detect_in_window(&esps, &efp, window, &history, mapping, index)?;

        if config.adapt {
            for (esp_id, w_new, d_new) in &outcome.normal_freq {
                efp.update_profile(esp_id, w_new, *d_new)?;
            }
            let promotions = adaptation.record_unmatched(&outcome.unmatched, mapping, &group_keys);
            for promotion in promotions {
                let added = esps.extend_learned(&promotion.events, mapping)?;
                result.promoted_rules.extend(added);
            }
        }

        for (esp_id, tail) in history.iter_mut() {
            tail.push_back(outcome.counts.get(esp_id).copied().unwrap_or(0));
            if tail.len() > efp.m - 1 {
                tail.pop_front();
            }
        }

        result.verdicts.push(outcome.verdict);
    }

    result.esps = esps;
    result.efp = efp;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::efp::bin_frequencies;
    use crate::esp::{learn_esps, LearnerConfig};
    use crate::event_model::parse_event;

    fn mk_event(user: &str, op: &str, region: &str, time_ms: i64) -> Event {
        parse_event(
            &format!(
                r#"{{"actor.user.name":"{user}","api.operation":"{op}","cloud.region":"{region}","resources":["res-1"],"time":{time_ms}}}"#
            ),
            &FieldMapping::default(),
        )
        .unwrap()
    }

    /// Steady training stream: two events per minute of op A, one of op B.
    fn training_events() -> Vec<Event> {
        let mut events = Vec::new();
        for minute in 0..30 {
            let base = minute * 60_000;
            events.push(mk_event("u1", "OpA", "us-east-1", base));
            events.push(mk_event("u1", "OpA", "us-east-1", base + 20_000));
            events.push(mk_event("u2", "OpB", "us-east-1", base + 30_000));
        }
        // Irregular training minutes with distinct magnitudes so each
        // profile's distance distribution has spread: flat windows then sit
        // strictly below the training maximum instead of tying it (the <=
        // ECDF convention flags ties).
        for (minute, extra) in [(10, 6), (20, 9)] {
            for k in 0..extra {
                events.push(mk_event("u1", "OpA", "us-east-1", minute * 60_000 + 40_000 + k * 100));
            }
        }
        for (minute, extra) in [(13, 5), (23, 7)] {
            for k in 0..extra {
                events.push(mk_event("u2", "OpB", "us-east-1", minute * 60_000 + 40_000 + k * 100));
            }
        }
        events.sort_by_key(|e| e.time_ms);
        events
    }

    fn trained_models(events: &[Event]) -> (EspSet, EfpModel) {
        let mapping = FieldMapping::default();
        let esps = learn_esps(events, &mapping, &LearnerConfig::default()).unwrap();
        let labeled: Vec<(i64, String)> = events
            .iter()
            .filter_map(|e| esps.classify(e, &mapping).map(|id| (e.time_ms, id.to_string())))
            .collect();
        let series = bin_frequencies(
            labeled.iter().map(|(t, id)| (*t, id.as_str())),
            0,
            60,
            30 * 60_000,
        );
        let efp = EfpModel::build(series, 6, 1e-3, 60, 10_000).unwrap();
        (esps, efp)
    }

    #[test]
    fn quiet_stream_yields_no_reports() {
        let mapping = FieldMapping::default();
        let train = training_events();
        let (esps, efp) = trained_models(&train);
        let test: Vec<Event> = (30..40)
            .flat_map(|minute| {
                let base = minute * 60_000;
                vec![
                    mk_event("u1", "OpA", "us-east-1", base),
                    mk_event("u1", "OpA", "us-east-1", base + 20_000),
                    mk_event("u2", "OpB", "us-east-1", base + 30_000),
                ]
            })
            .collect();
        let result =
            run_stream(&esps, &efp, &test, &mapping, &DetectorConfig::default()).unwrap();
        for v in &result.verdicts {
            assert!(!v.y, "unexpected reports: {:?}", v.reports);
        }
    }

    #[test]
    fn unmatched_event_is_a_pointwise_report() {
        let mapping = FieldMapping::default();
        let train = training_events();
        let (esps, efp) = trained_models(&train);
        let mut test = vec![
            mk_event("u1", "OpA", "us-east-1", 30 * 60_000),
            mk_event("intruder", "DeleteEverything", "mars-1", 30 * 60_000 + 1000),
        ];
        test.sort_by_key(|e| e.time_ms);
        let result =
            run_stream(&esps, &efp, &test, &mapping, &DetectorConfig::default()).unwrap();
        let flagged: Vec<&WindowVerdict> =
            result.verdicts.iter().filter(|v| v.y).collect();
        assert_eq!(flagged.len(), 1);
        let report = &flagged[0].reports[0];
        assert_eq!(report.kind, AnomalyKind::Pointwise);
        assert_eq!(report.events.len(), 1);
        assert_eq!(report.events[0].actor, "intruder");
        assert!(matches!(report.evidence, Evidence::NearestMiss { .. }));
    }

    #[test]
    fn frequency_burst_is_flagged_with_evidence() {
        let mapping = FieldMapping::default();
        let train = training_events();
        let (esps, efp) = trained_models(&train);
        // 100 OpA events in one minute against a ~2/min baseline.
        let mut test: Vec<Event> = (30..37)
            .flat_map(|minute| {
                let base = minute * 60_000;
                vec![
                    mk_event("u1", "OpA", "us-east-1", base),
                    mk_event("u1", "OpA", "us-east-1", base + 20_000),
                    mk_event("u2", "OpB", "us-east-1", base + 30_000),
                ]
            })
            .collect();
        for k in 0..100 {
            test.push(mk_event("u1", "OpA", "us-east-1", 36 * 60_000 + k * 10));
        }
        test.sort_by_key(|e| e.time_ms);
        let result =
            run_stream(&esps, &efp, &test, &mapping, &DetectorConfig::default()).unwrap();
        let last = result.verdicts.last().unwrap();
        assert!(last.y);
        let report = &last.reports[0];
        assert_eq!(report.kind, AnomalyKind::Frequency);
        assert!(report.events.len() >= 100);
        match report.evidence {
            Evidence::Frequency { d_new, survival, alpha } => {
                assert!(d_new > 90.0);
                assert_eq!(survival, 0.0);
                assert_eq!(alpha, 1e-3);
            }
            _ => panic!("expected frequency evidence"),
        }
    }

    #[test]
    fn adaptation_promotes_then_stops_flagging() {
        let mapping = FieldMapping::default();
        let train = training_events();
        let (esps, efp) = trained_models(&train);
        // New legitimate behavior at 10 events/window for 6 windows, on top
        // of the steady baseline (so no pattern's frequency drops).
        let mut test = Vec::new();
        for minute in 30..36 {
            let base = minute * 60_000;
            test.push(mk_event("u1", "OpA", "us-east-1", base));
            test.push(mk_event("u1", "OpA", "us-east-1", base + 20_000));
            test.push(mk_event("u2", "OpB", "us-east-1", base + 30_000));
            for k in 0..10 {
                test.push(mk_event("deployer", "NewOp", "us-east-1", base + k * 1000));
            }
        }
        test.sort_by_key(|e| e.time_ms);
        let config = DetectorConfig::default();
        let result = run_stream(&esps, &efp, &test, &mapping, &config).unwrap();
        assert!(!result.promoted_rules.is_empty());
        // Flagged until the promotion window (streak reaches N_w = 3), then
        // clean.
        let flags: Vec<bool> = result.verdicts.iter().map(|v| v.y).collect();
        assert_eq!(flags, vec![true, true, true, false, false, false]);

        // With adaptation disabled the behavior is flagged in every window.
        let config = DetectorConfig {
            adapt: false,
            ..DetectorConfig::default()
        };
        let result = run_stream(&esps, &efp, &test, &mapping, &config).unwrap();
        assert!(result.verdicts.iter().all(|v| v.y));
        assert!(result.promoted_rules.is_empty());
    }

    #[test]
    fn replay_is_deterministic() {
        let mapping = FieldMapping::default();
        let train = training_events();
        let (esps, efp) = trained_models(&train);
        let mut test = training_events();
        for e in &mut test {
            e.time_ms += 30 * 60_000;
        }
        test.push(mk_event("x", "Odd", "nowhere", 45 * 60_000));
        test.sort_by_key(|e| e.time_ms);
        let a = run_stream(&esps, &efp, &test, &mapping, &DetectorConfig::default()).unwrap();
        let b = run_stream(&esps, &efp, &test, &mapping, &DetectorConfig::default()).unwrap();
        assert_eq!(a.verdicts, b.verdicts);
        assert_eq!(
            serde_json::to_string(&a.verdicts).unwrap(),
            serde_json::to_string(&b.verdicts).unwrap()
        );
    }

    #[test]
    fn y_equals_or_over_reports() {
        let mapping = FieldMapping::default();
        let train = training_events();
        let (esps, efp) = trained_models(&train);
        let test = vec![mk_event("ghost", "Spooky", "void", 30 * 60_000)];
        let result =
            run_stream(&esps, &efp, &test, &mapping, &DetectorConfig::default()).unwrap();
        for v in &result.verdicts {
            assert_eq!(v.y, !v.reports.is_empty());
        }
    }
}

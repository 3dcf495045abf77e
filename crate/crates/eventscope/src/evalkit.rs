//! Evaluation toolkit: detection metrics (precision / recall / F1),
//! localization accuracy (AC@k, Avg@k), and a deterministic synthetic
//! benchmark generator for three incident classes.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_model::{Event, Scalar};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("verdicts ({verdicts}) and truth ({truth}) lengths differ")]
    LengthMismatch { verdicts: usize, truth: usize },
    #[error("case {0} has an empty root-cause set")]
    EmptyTruth(usize),
    #[error("bad scale: {0}")]
    BadScale(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when a 0/0 precision or recall denominator was reported as 0.
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ac_at: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub avg_at: BTreeMap<usize, f64>,
}

/// Confusion-matrix arithmetic over paired boolean verdicts and labels.
pub fn detection_metrics(verdicts: &[bool], truth: &[bool]) -> Result<MetricsReport, EvalError> {
    if verdicts.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            verdicts: verdicts.len(),
            truth: truth.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&y, &t) in verdicts.iter().zip(truth.iter()) {
        match (y, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        tp,
        fp,
        fn_,
        tn,
        precision,
        recall,
        f1,
        degenerate,
        ac_at: BTreeMap::new(),
        avg_at: BTreeMap::new(),
    })
}

/// One localization case: the ranked actor list and the true root causes.
pub type RclCase = (Vec<String>, BTreeSet<String>);

/// AC@k = (1/|A|) · Σ_a (Σ_{i<k} R^a[i] ∈ V^a_rc) / min(k, |V^a_rc|).
pub fn ac_at_k(cases: &[RclCase], k: usize) -> Result<f64, EvalError> {
    assert!(k >= 1, "k must be >= 1");
    let mut total = 0.0;
    for (index, (ranking, truth)) in cases.iter().enumerate() {
        if truth.is_empty() {
            return Err(EvalError::EmptyTruth(index));
        }
        let hits = ranking
            .iter()
            .take(k)
            .filter(|actor| truth.contains(*actor))
            .count();
        total += hits as f64 / k.min(truth.len()) as f64;
    }
    Ok(total / cases.len().max(1) as f64)
}

/// Avg@k = (1/k) · Σ_{j=1..k} AC@j.
pub fn avg_at_k(cases: &[RclCase], k: usize) -> Result<f64, EvalError> {
    assert!(k >= 1, "k must be >= 1");
    let mut sum = 0.0;
    for j in 1..=k {
        sum += ac_at_k(cases, j)?;
    }
    Ok(sum / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncidentKind {
    SecretDeactivation,
    Dos,
    UnusualActivity,
    None,
}

impl IncidentKind {
    pub const ALL: [IncidentKind; 4] = [
        IncidentKind::SecretDeactivation,
        IncidentKind::Dos,
        IncidentKind::UnusualActivity,
        IncidentKind::None,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: bool,
    pub root_cause_actors: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scale {
    pub actors: usize,
    pub resources: usize,
    pub train_secs: u64,
    pub test_secs: u64,
    pub bin_secs: u64,
}

impl Default for Scale {
    fn default() -> Self {
        Scale {
            actors: 50,
            resources: 200,
            train_secs: 7_200,
            test_secs: 3_600,
            bin_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub kind: IncidentKind,
    pub seed: u64,
    pub train_events: Vec<Event>,
    pub test_events: Vec<Event>,
    pub truth: GroundTruth,
}

const BASELINE_OPS: [&str; 4] = ["ReadData", "WriteData", "ListKeys", "DescribeStack"];
const SECRET_OP: &str = "GetSecret";
const SECRET_RESOURCE: &str = "secret-001";
const REGIONS: [&str; 2] = ["us-east-1", "us-east-2"];

/// Training-only frequency bursts. Distinct magnitudes at well-separated
/// bins give every profile a nonzero distance spread: each burst window's
/// nearest neighbor is an aligned window of a *different* burst, so the
/// training maximum distance sits near the magnitude gap, far above flat
/// Poisson-like noise but far below an incident flood.
const BURSTS: [(u64, u64); 3] = [(40, 30), (60, 45), (80, 60)];

fn actor_name(i: usize) -> String {
    format!("svc-{i:02}")
}

fn resource_name(i: usize) -> String {
    format!("res-{i:03}")
}

struct Generator {
    rng: ChaCha8Rng,
    bin_ms: i64,
    events: Vec<Event>,
}

impl Generator {
    fn emit(&mut self, actor: String, op: &str, resource: &str, status: &str, time_ms: i64) {
        let region = REGIONS[self.rng.gen_range(0..REGIONS.len())];
        let mut extras = BTreeMap::new();
        extras.insert("cloud.region".to_string(), Scalar::Str(region.to_string()));
        extras.insert("status".to_string(), Scalar::Str(status.to_string()));
        self.events.push(Event {
            actor,
            operation: op.to_string(),
            resources: vec![resource.to_string()],
            time_ms,
            extras,
        });
    }

    fn bin_offset(&mut self) -> i64 {
        self.rng.gen_range(0..self.bin_ms)
    }
}

fn kind_id(kind: IncidentKind) -> u64 {
    match kind {
        IncidentKind::SecretDeactivation => 1,
        IncidentKind::Dos => 2,
        IncidentKind::UnusualActivity => 3,
        IncidentKind::None => 4,
    }
}

/// Generates one synthetic case: Poisson-like baseline traffic over fixed
/// per-actor vocabularies and disjoint resource pools, training bursts, and
/// the requested incident injected mid-test. Pure in (kind, seed, scale).
pub fn simulate(kind: IncidentKind, seed: u64, scale: &Scale) -> Result<SyntheticCase, EvalError> {
    let bad = |msg: &str| EvalError::BadScale(msg.to_string());
    if scale.bin_secs == 0 {
        return Err(bad("bin_secs must be positive"));
    }
    if scale.actors < 21 {
        return Err(bad("need at least 21 actors (incident roles use fixed indices)"));
    }
    if scale.resources < scale.actors {
        return Err(bad("need at least one resource per actor"));
    }
    let train_bins = scale.train_secs / scale.bin_secs;
    let test_bins = scale.test_secs / scale.bin_secs;
    if train_bins < 100 {
        return Err(bad("training must cover at least 100 bins"));
    }
    if test_bins < 10 {
        return Err(bad("test must cover at least 10 bins"));
    }

    let bin_ms = scale.bin_secs as i64 * 1000;
    let total_bins = train_bins + test_bins;
    let pool_size = scale.resources / scale.actors;
    let dependents: Vec<usize> = (1..=6).collect();
    let root_secret = 10usize;
    let flooder = 20usize;
    let unusual_actor = 7usize;
    let incident_bin = train_bins + test_bins / 2;
    let incident_ms = incident_bin as i64 * bin_ms;

    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ kind_id(kind)),
        bin_ms,
        events: Vec::new(),
    };

    // Baseline: each actor runs two routine operations on its own resource
    // pool at ~0.2 events/bin each; dependents additionally read the shared
    // secret at ~0.05 events/bin.
    for bin in 0..total_bins {
        let bin_start = bin as i64 * bin_ms;
        for actor in 0..scale.actors {
            for k in 0..2usize {
                let op = BASELINE_OPS[(actor + k) % BASELINE_OPS.len()];
                if g.rng.gen::<f64>() < 0.2 {
                    let resource = resource_name(actor * pool_size + g.rng.gen_range(0..pool_size));
                    let t = bin_start + g.bin_offset();
                    g.emit(actor_name(actor), op, &resource, "Success", t);
                }
            }
        }
        for &dep in &dependents {
            if g.rng.gen::<f64>() < 0.05 {
                let t = bin_start + g.bin_offset();
                g.emit(actor_name(dep), SECRET_OP, SECRET_RESOURCE, "Success", t);
            }
        }
    }

    // Training bursts for every learned pattern (see BURSTS).
    for op in BASELINE_OPS.iter().copied().chain([SECRET_OP]) {
        for &(bin, magnitude) in &BURSTS {
            let bin_start = bin as i64 * bin_ms;
            for _ in 0..magnitude {
                let t = bin_start + g.bin_offset();
                if op == SECRET_OP {
                    g.emit(actor_name(0), op, SECRET_RESOURCE, "Success", t);
                } else {
                    let resource = resource_name(g.rng.gen_range(0..pool_size));
                    g.emit(actor_name(0), op, &resource, "Success", t);
                }
            }
        }
    }

    let mut truth = GroundTruth {
        label: kind != IncidentKind::None,
        root_cause_actors: BTreeSet::new(),
    };
    match kind {
        IncidentKind::SecretDeactivation => {
            // The root actor reconfigures the shared secret; dependents then
            // fail with permission errors on their next access.
            let root = actor_name(root_secret);
            truth.root_cause_actors.insert(root.clone());
            for k in 0..12i64 {
                g.emit(
                    root.clone(),
                    "UpdateSecret",
                    SECRET_RESOURCE,
                    "Success",
                    incident_ms + k * 1_000,
                );
            }
            for (j, &dep) in dependents.iter().enumerate() {
                g.emit(
                    actor_name(dep),
                    SECRET_OP,
                    SECRET_RESOURCE,
                    "AccessDenied",
                    incident_ms + bin_ms + j as i64 * 2_000,
                );
            }
        }
        IncidentKind::Dos => {
            // One actor floods a routine operation on its own resource at
            // far beyond the pattern's baseline rate.
            let actor = actor_name(flooder);
            truth.root_cause_actors.insert(actor.clone());
            let op = BASELINE_OPS[flooder % BASELINE_OPS.len()];
            let resource = resource_name(flooder * pool_size);
            for bin in 0..3i64 {
                let bin_start = incident_ms + bin * bin_ms;
                for k in 0..400 {
                    g.emit(
                        actor.clone(),
                        op,
                        &resource,
                        "Success",
                        bin_start + (k * g.bin_ms) / 400,
                    );
                }
            }
        }
        IncidentKind::UnusualActivity => {
            // A known actor creates a resource in a never-seen region.
            let actor = actor_name(unusual_actor);
            truth.root_cause_actors.insert(actor.clone());
            let mut extras = BTreeMap::new();
            extras.insert(
                "cloud.region".to_string(),
                Scalar::Str("eu-north-7".to_string()),
            );
            extras.insert("status".to_string(), Scalar::Str("Success".to_string()));
            g.events.push(Event {
                actor,
                operation: "CreateResource".to_string(),
                resources: vec!["res-unusual".to_string()],
                time_ms: incident_ms,
                extras,
            });
        }
        IncidentKind::None => {}
    }

    let train_end_ms = train_bins as i64 * bin_ms;
    let mut events = g.events;
    events.sort_by_key(|e| e.time_ms);
    let (train_events, test_events): (Vec<Event>, Vec<Event>) =
        events.into_iter().partition(|e| e.time_ms < train_end_ms);

    Ok(SyntheticCase {
        kind,
        seed,
        train_events,
        test_events,
        truth,
    })
}

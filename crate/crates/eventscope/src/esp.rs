//! Event Semantic Patterns: predicate-tree rules that classify each event as
//! normal (labeled with a pattern id) or a pointwise anomaly.
//!
//! The learner here is the baseline group-and-generalize implementation
//! behind a pluggable surface: it groups events by skeleton keys, then
//! generalizes per-path value sets into `==` / `in` / `like` predicates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use regex::Regex;
use serde_json::{json, Value};
use thiserror::Error;

use crate::event_model::{Event, FieldMapping, Scalar};

/// Flat path -> scalar view of one event, as produced by
/// [`Event::field_view`].
pub type FieldView = BTreeMap<String, Scalar>;

/// Group-key values identifying a pattern family. `None` marks a missing
/// path.
pub type Skeleton = Vec<Option<Scalar>>;

#[derive(Debug, Clone)]
pub enum Predicate {
    Eq {
        path: String,
        value: Scalar,
    },
    Like {
        path: String,
        pattern: String,
        regex: Regex,
    },
    In {
        path: String,
        values: BTreeSet<Scalar>,
    },
    And(Vec<Predicate>),
}

impl PartialEq for Predicate {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (
                Predicate::Eq { path: p1, value: v1 },
                Predicate::Eq { path: p2, value: v2 },
            ) => p1 == p2 && v1 == v2,
            (
                Predicate::Like {
                    path: p1,
                    pattern: s1,
                    ..
                },
                Predicate::Like {
                    path: p2,
                    pattern: s2,
                    ..
                },
            ) => p1 == p2 && s1 == s2,
            (
                Predicate::In {
                    path: p1,
                    values: v1,
                },
                Predicate::In {
                    path: p2,
                    values: v2,
                },
            ) => p1 == p2 && v1 == v2,
            (Predicate::And(a), Predicate::And(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum EspError {
    #[error("no training events")]
    EmptyTraining,
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("schema error in rule {rule_id:?} at {path}: {message}")]
    SchemaError {
        rule_id: Option<String>,
        path: String,
        message: String,
    },
}

/// Compiles a `like` pattern with implicit anchors at both ends.
fn compile_like(pattern: &str) -> Result<Regex, EspError> {
    Regex::new(&format!("^(?:{pattern})$"))
        .map_err(|e| EspError::InvalidRule(format!("bad like pattern {pattern:?}: {e}")))
}

impl Predicate {
    pub fn eq(path: impl Into<String>, value: Scalar) -> Predicate {
        Predicate::Eq {
            path: path.into(),
            value,
        }
    }

    pub fn like(path: impl Into<String>, pattern: impl Into<String>) -> Result<Predicate, EspError> {
        let pattern = pattern.into();
        let regex = compile_like(&pattern)?;
        Ok(Predicate::Like {
            path: path.into(),
            pattern,
            regex,
        })
    }

    pub fn in_set(path: impl Into<String>, values: BTreeSet<Scalar>) -> Result<Predicate, EspError> {
        if values.is_empty() {
            return Err(EspError::InvalidRule("empty in-set".to_string()));
        }
        Ok(Predicate::In {
            path: path.into(),
            values,
        })
    }

    pub fn and(children: Vec<Predicate>) -> Result<Predicate, EspError> {
        if children.is_empty() {
            return Err(EspError::InvalidRule("empty and".to_string()));
        }
        Ok(Predicate::And(children))
    }

    /// Evaluates against a field view. A missing path makes the enclosing
    /// comparison false; the predicate is total over all events.
    pub fn eval(&self, view: &FieldView) -> bool {
        match self {
            Predicate::Eq { path, value } => view.get(path) == Some(value),
            Predicate::Like { path, regex, .. } => view
                .get(path)
                .and_then(Scalar::as_str)
                .map(|s| regex.is_match(s))
                .unwrap_or(false),
            Predicate::In { path, values } => {
                view.get(path).map(|v| values.contains(v)).unwrap_or(false)
            }
            Predicate::And(children) => children.iter().all(|c| c.eval(view)),
        }
    }

    fn count_eq(&self) -> usize {
        match self {
            Predicate::Eq { .. } => 1,
            Predicate::And(children) => children.iter().map(Predicate::count_eq).sum(),
            _ => 0,
        }
    }

    /// (satisfied leaves, total leaves); used for nearest-miss evidence.
    fn leaf_stats(&self, view: &FieldView) -> (usize, usize) {
        match self {
            Predicate::And(children) => children.iter().fold((0, 0), |(s, t), c| {
                let (cs, ct) = c.leaf_stats(view);
                (s + cs, t + ct)
            }),
            leaf => (usize::from(leaf.eval(view)), 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EspRule {
    pub id: String,
    pub root: Predicate,
}

impl EspRule {
    /// Number of `Eq` predicates; more specific rules win classification
    /// ties.
    pub fn specificity(&self) -> usize {
        self.root.count_eq()
    }

    pub fn matches(&self, event: &Event, mapping: &FieldMapping) -> bool {
        self.root.eval(&event.field_view(mapping))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    /// Paths eligible for value generalization. Empty means every observed
    /// path is eligible.
    pub generalize_paths: BTreeSet<String>,
    /// In-sets above this size collapse to a `like` wildcard.
    pub max_set_size: usize,
    /// Paths defining the pattern skeleton. Empty means the mapped operation
    /// path.
    pub group_keys: Vec<String>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            generalize_paths: BTreeSet::new(),
            max_set_size: 8,
            group_keys: Vec::new(),
        }
    }
}

impl LearnerConfig {
    pub fn effective_group_keys(&self, mapping: &FieldMapping) -> Vec<String> {
        if self.group_keys.is_empty() {
            vec![mapping.operation_path.clone()]
        } else {
            self.group_keys.clone()
        }
    }
}

/// The learned normal-behavior model: an ordered rule set.
#[derive(Debug, Clone, PartialEq)]
pub struct EspSet {
    pub rules: Vec<EspRule>,
    pub learner_config: LearnerConfig,
}

impl EspSet {
    pub fn new(rules: Vec<EspRule>, learner_config: LearnerConfig) -> Result<Self, EspError> {
        let mut seen = BTreeSet::new();
        for r in &rules {
            if !seen.insert(r.id.clone()) {
                return Err(EspError::InvalidRule(format!("duplicate rule id {:?}", r.id)));
            }
        }
        Ok(EspSet {
            rules,
            learner_config,
        })
    }

    /// Returns the id of the matching rule with highest specificity, ties
    /// broken by lowest id; `None` marks a pointwise anomaly.
    pub fn classify_view(&self, view: &FieldView) -> Option<&str> {
        self.rules
            .iter()
            .filter(|r| r.root.eval(view))
            .min_by(|a, b| {
                b.specificity()
                    .cmp(&a.specificity())
                    .then_with(|| a.id.cmp(&b.id))
            })
            .map(|r| r.id.as_str())
    }

    pub fn classify(&self, event: &Event, mapping: &FieldMapping) -> Option<&str> {
        self.classify_view(&event.field_view(mapping))
    }

    /// The non-matching rule with the highest satisfied-leaf fraction, as
    /// nearest-miss evidence for pointwise reports.
    pub fn nearest_miss(&self, view: &FieldView) -> Option<&str> {
        self.rules
            .iter()
            .map(|r| {
                let (s, t) = r.root.leaf_stats(view);
                (s as f64 / t.max(1) as f64, &r.id)
            })
            .min_by(|(fa, ida), (fb, idb)| fb.total_cmp(fa).then_with(|| ida.cmp(idb)))
            .map(|(_, id)| id.as_str())
    }

    fn next_rule_index(&self) -> usize {
        self.rules
            .iter()
            .filter_map(|r| r.id.strip_prefix("esp-").and_then(|s| s.parse::<usize>().ok()))
            .max()
            .map(|n| n + 1)
            .unwrap_or(0)
    }

    /// Learns rules from `events` and appends them with fresh ids. Used when
    /// adaptation promotes a persistent unmatched skeleton.
    pub fn extend_learned(
        &mut self,
        events: &[Event],
        mapping: &FieldMapping,
    ) -> Result<Vec<String>, EspError> {
        let learned = learn_esps(events, mapping, &self.learner_config)?;
        let mut next = self.next_rule_index();
        let mut added = Vec::new();
        for mut rule in learned.rules {
            rule.id = format!("esp-{next:04}");
            next += 1;
            added.push(rule.id.clone());
            self.rules.push(rule);
        }
        Ok(added)
    }
}

fn skeleton_of(view: &FieldView, group_keys: &[String]) -> Skeleton {
    group_keys.iter().map(|k| view.get(k).cloned()).collect()
}

/// Learns the baseline rule set: group events by skeleton, generalize each
/// path's observed value set, and emit one rule per group. Every training
/// event matches at least one emitted rule.
pub fn learn_esps(
    events: &[Event],
    mapping: &FieldMapping,
    config: &LearnerConfig,
) -> Result<EspSet, EspError> {
    if events.is_empty() {
        return Err(EspError::EmptyTraining);
    }
    let group_keys = config.effective_group_keys(mapping);
    let views: Vec<FieldView> = events.iter().map(|e| e.field_view(mapping)).collect();

    let mut groups: BTreeMap<Skeleton, Vec<&FieldView>> = BTreeMap::new();
    for view in &views {
        groups
            .entry(skeleton_of(view, &group_keys))
            .or_default()
            .push(view);
    }

    let mut rules = Vec::new();
    for (index, (_, members)) in groups.iter().enumerate() {
        let root = generalize_group(members, mapping, config)?;
        rules.push(EspRule {
            id: format!("esp-{index:04}"),
            root,
        });
    }
    EspSet::new(rules, config.clone())
}

fn generalize_group(
    members: &[&FieldView],
    mapping: &FieldMapping,
    config: &LearnerConfig,
) -> Result<Predicate, EspError> {
    let mut paths: BTreeSet<&String> = BTreeSet::new();
    for view in members {
        paths.extend(view.keys());
    }

    let mut preds = Vec::new();
    for path in paths {
        // Timestamps are never predicate material.
        if *path == mapping.time_path {
            continue;
        }
        let mut values = BTreeSet::new();
        let mut present_in_all = true;
        for view in members {
            match view.get(path) {
                Some(v) => {
                    values.insert(v.clone());
                }
                None => {
                    present_in_all = false;
                    break;
                }
            }
        }
        // A path absent from part of the group stays free: a predicate on it
        // would reject the training events that lack it.
        if !present_in_all {
            continue;
        }
        if values.len() == 1 {
            preds.push(Predicate::eq(
                path.clone(),
                values.into_iter().next().unwrap(),
            ));
            continue;
        }
        let eligible =
            config.generalize_paths.is_empty() || config.generalize_paths.contains(path.as_str());
        if !eligible {
            continue;
        }
        if values.len() <= config.max_set_size {
            preds.push(Predicate::in_set(path.clone(), values)?);
        } else if let Some(strings) = all_strings(&values) {
            preds.push(Predicate::like(path.clone(), generalize_strings(&strings))?);
        }
        // Mixed-type value sets beyond max_set_size stay free.
    }

    if preds.is_empty() {
        // Degenerate group with no shared constrainable path; match on the
        // operation being present so the rule stays total over its members.
        preds.push(Predicate::like(mapping.operation_path.clone(), ".*")?);
    }
    Predicate::and(preds)
}

fn all_strings(values: &BTreeSet<Scalar>) -> Option<Vec<&str>> {
    values.iter().map(Scalar::as_str).collect()
}

/// Builds an anchored pattern from the longest common prefix and suffix of
/// the observed strings, with a character-class or length-bounded middle.
pub fn generalize_strings(values: &[&str]) -> String {
    debug_assert!(!values.is_empty());
    // Work in chars so slicing stays on UTF-8 boundaries.
    let chars: Vec<Vec<char>> = values.iter().map(|v| v.chars().collect()).collect();
    let first = &chars[0];
    let mut prefix_len = first.len();
    let mut suffix_len = first.len();
    for v in &chars[1..] {
        prefix_len = prefix_len.min(common_prefix_len(first, v));
        suffix_len = suffix_len.min(common_suffix_len(first, v));
    }
    // Keep prefix and suffix disjoint within every value.
    let min_len = chars.iter().map(Vec::len).min().unwrap_or(0);
    prefix_len = prefix_len.min(min_len);
    if prefix_len + suffix_len > min_len {
        suffix_len = min_len - prefix_len;
    }

    let prefix: String = first[..prefix_len].iter().collect();
    let suffix: String = first[first.len() - suffix_len..].iter().collect();
    let middles: Vec<String> = chars
        .iter()
        .map(|v| v[prefix_len..v.len() - suffix_len].iter().collect())
        .collect();
    let min_mid = middles.iter().map(|m| m.chars().count()).min().unwrap_or(0);
    let max_mid = middles.iter().map(|m| m.chars().count()).max().unwrap_or(0);

    let middle = if min_mid == 1 && max_mid == 1 {
        let mid_chars: BTreeSet<char> = middles.iter().filter_map(|m| m.chars().next()).collect();
        if mid_chars.iter().all(|c| c.is_ascii_alphanumeric()) && mid_chars.len() <= 16 {
            format!("[{}]", mid_chars.iter().collect::<String>())
        } else {
            ".".to_string()
        }
    } else if min_mid == max_mid {
        format!(".{{{min_mid}}}")
    } else {
        format!(".{{{min_mid},{max_mid}}}")
    };
    format!(
        "^{}{}{}$",
        escape_literal(&prefix),
        middle,
        escape_literal(&suffix)
    )
}

/// Escapes regex metacharacters only, keeping benign punctuation like `-`
/// and `/` readable in emitted patterns.
fn escape_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if matches!(c, '.' | '^' | '$' | '*' | '+' | '?' | '(' | ')' | '[' | ']' | '{' | '}' | '|' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn common_prefix_len(a: &[char], b: &[char]) -> usize {
    a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count()
}

fn common_suffix_len(a: &[char], b: &[char]) -> usize {
    a.iter()
        .rev()
        .zip(b.iter().rev())
        .take_while(|(x, y)| x == y)
        .count()
}

/// Tracks unmatched-behavior streaks and the retained events used to
/// re-learn rules on promotion.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    pending: BTreeMap<Skeleton, PendingSkeleton>,
    /// Per-window count a skeleton must exceed to extend its streak (T_s).
    pub threshold: u64,
    /// Consecutive qualifying windows required for promotion (N_w).
    pub persistence: u32,
    /// FIFO cap on retained unmatched events per skeleton.
    pub buffer_cap: usize,
}

#[derive(Debug, Clone)]
struct PendingSkeleton {
    streak: u32,
    buffer: VecDeque<Event>,
}

/// A skeleton promoted to normal behavior, with its retained events.
#[derive(Debug, Clone)]
pub struct Promotion {
    pub skeleton: Skeleton,
    pub events: Vec<Event>,
}

impl AdaptationState {
    pub fn new(threshold: u64, persistence: u32, buffer_cap: usize) -> Self {
        AdaptationState {
            pending: BTreeMap::new(),
            threshold,
            persistence,
            buffer_cap,
        }
    }

    /// Feeds one window's unmatched events. A skeleton whose count exceeds
    /// `threshold` for `persistence` consecutive windows is promoted and
    /// returned; a window at or below the threshold resets its streak.
    pub fn record_unmatched(
        &mut self,
        unmatched: &[Event],
        mapping: &FieldMapping,
        group_keys: &[String],
    ) -> Vec<Promotion> {
        let mut per_skeleton: BTreeMap<Skeleton, Vec<&Event>> = BTreeMap::new();
        for event in unmatched {
            let view = event.field_view(mapping);
            per_skeleton
                .entry(skeleton_of(&view, group_keys))
                .or_default()
                .push(event);
        }

        // Pending skeletons absent from this window have count 0: streak
        // broken.
        self.pending
            .retain(|skeleton, _| per_skeleton.contains_key(skeleton));

        let mut promotions = Vec::new();
        for (skeleton, events) in per_skeleton {
            let count = events.len() as u64;
            if count <= self.threshold {
                self.pending.remove(&skeleton);
                continue;
            }
            let entry = self
                .pending
                .entry(skeleton.clone())
                .or_insert_with(|| PendingSkeleton {
                    streak: 0,
                    buffer: VecDeque::new(),
                });
            entry.streak += 1;
            for e in events {
                if entry.buffer.len() == self.buffer_cap {
                    entry.buffer.pop_front();
                }
                entry.buffer.push_back(e.clone());
            }
            if entry.streak >= self.persistence {
                let entry = self.pending.remove(&skeleton).unwrap();
                promotions.push(Promotion {
                    skeleton,
                    events: entry.buffer.into_iter().collect(),
                });
            }
        }
        promotions
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

fn predicate_to_json(pred: &Predicate) -> Value {
    match pred {
        Predicate::Eq { path, value } => json!({ "==": [{ "var": path }, value.to_json()] }),
        Predicate::Like { path, pattern, .. } => {
            json!({ "like": [{ "var": path }, pattern] })
        }
        Predicate::In { path, values } => {
            let list: Vec<Value> = values.iter().map(Scalar::to_json).collect();
            json!({ "in": [{ "var": path }, list] })
        }
        Predicate::And(children) => {
            let list: Vec<Value> = children.iter().map(predicate_to_json).collect();
            json!({ "and": list })
        }
    }
}

/// Serializes a rule set to the on-disk jsonLogic-subset array.
pub fn serialize_esps(esps: &EspSet) -> String {
    let rules: Vec<Value> = esps
        .rules
        .iter()
        .map(|r| json!({ "id": r.id, "rule": predicate_to_json(&r.root) }))
        .collect();
    serde_json::to_string_pretty(&Value::Array(rules)).expect("esp serialization")
}

fn schema_error(rule_id: Option<&str>, path: &str, message: impl Into<String>) -> EspError {
    EspError::SchemaError {
        rule_id: rule_id.map(str::to_string),
        path: path.to_string(),
        message: message.into(),
    }
}

fn parse_var(value: &Value, rule_id: Option<&str>, path: &str) -> Result<String, EspError> {
    value
        .get("var")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| schema_error(rule_id, path, "expected {\"var\": <path>}"))
}

fn parse_predicate(value: &Value, rule_id: Option<&str>, path: &str) -> Result<Predicate, EspError> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema_error(rule_id, path, "predicate must be an object"))?;
    if obj.len() != 1 {
        return Err(schema_error(
            rule_id,
            path,
            "predicate must have exactly one operator",
        ));
    }
    let (op, args) = obj.iter().next().unwrap();
    match op.as_str() {
        "and" => {
            let children = args
                .as_array()
                .ok_or_else(|| schema_error(rule_id, path, "\"and\" takes an array"))?;
            if children.is_empty() {
                return Err(schema_error(rule_id, path, "\"and\" must be non-empty"));
            }
            let parsed = children
                .iter()
                .enumerate()
                .map(|(i, c)| parse_predicate(c, rule_id, &format!("{path}/and/{i}")))
                .collect::<Result<Vec<_>, _>>()?;
            Predicate::and(parsed)
        }
        "==" | "like" | "in" => {
            let args = args
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| schema_error(rule_id, path, format!("{op:?} takes [var, arg]")))?;
            let var = parse_var(&args[0], rule_id, path)?;
            match op.as_str() {
                "==" => {
                    let scalar = Scalar::try_from_json(&args[1]).ok_or_else(|| {
                        schema_error(rule_id, path, "\"==\" argument must be a scalar")
                    })?;
                    Ok(Predicate::eq(var, scalar))
                }
                "like" => {
                    let pattern = args[1].as_str().ok_or_else(|| {
                        schema_error(rule_id, path, "\"like\" argument must be a string")
                    })?;
                    Predicate::like(var, pattern)
                }
                _ => {
                    let list = args[1].as_array().ok_or_else(|| {
                        schema_error(rule_id, path, "\"in\" argument must be an array")
                    })?;
                    let mut values = BTreeSet::new();
                    for v in list {
                        let scalar = Scalar::try_from_json(v).ok_or_else(|| {
                            schema_error(rule_id, path, "\"in\" values must be scalars")
                        })?;
                        values.insert(scalar);
                    }
                    Predicate::in_set(var, values)
                }
            }
        }
        other => Err(schema_error(
            rule_id,
            path,
            format!("unknown operator {other:?}"),
        )),
    }
}

/// Parses the on-disk rule array back into an [`EspSet`].
pub fn parse_esps(json_text: &str) -> Result<EspSet, EspError> {
    let value: Value = serde_json::from_str(json_text)
        .map_err(|e| schema_error(None, "/", format!("malformed JSON: {e}")))?;
    let entries = value
        .as_array()
        .ok_or_else(|| schema_error(None, "/", "top-level value must be an array"))?;
    let mut rules = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let id = entry
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| schema_error(None, &format!("/{i}"), "missing \"id\""))?;
        let rule_value = entry
            .get("rule")
            .ok_or_else(|| schema_error(Some(id), &format!("/{i}"), "missing \"rule\""))?;
        let root = parse_predicate(rule_value, Some(id), &format!("/{i}/rule"))?;
        rules.push(EspRule {
            id: id.to_string(),
            root,
        });
    }
    EspSet::new(rules, LearnerConfig::default())
}

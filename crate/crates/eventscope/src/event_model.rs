//! Core event tuple, NDJSON ingestion, and tumbling time windows.
//!
//! An [`Event`] is the structured record (actor, operation, resources, time,
//! extras) everything downstream operates on. Timestamps are normalized to
//! UTC integer milliseconds internally.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

/// A flat scalar value carried by an event field.
#[derive(Debug, Clone)]
pub enum Scalar {
    Null,
    Bool(bool),
    Num(f64),
    Str(String),
}

impl Scalar {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Str(s) => Some(s),
            _ => None,
        }
    }

    fn type_rank(&self) -> u8 {
        match self {
            Scalar::Null => 0,
            Scalar::Bool(_) => 1,
            Scalar::Num(_) => 2,
            Scalar::Str(_) => 3,
        }
    }
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scalar {}

impl PartialOrd for Scalar {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scalar {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Scalar::Null, Scalar::Null) => Ordering::Equal,
            (Scalar::Bool(a), Scalar::Bool(b)) => a.cmp(b),
            (Scalar::Num(a), Scalar::Num(b)) => a.total_cmp(b),
            (Scalar::Str(a), Scalar::Str(b)) => a.cmp(b),
            (a, b) => a.type_rank().cmp(&b.type_rank()),
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Null => write!(f, "null"),
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Num(n) => write!(f, "{n}"),
            Scalar::Str(s) => write!(f, "{s}"),
        }
    }
}

impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Scalar::Null => serializer.serialize_unit(),
            Scalar::Bool(b) => serializer.serialize_bool(*b),
            Scalar::Num(n) => serializer.serialize_f64(*n),
            Scalar::Str(s) => serializer.serialize_str(s),
        }
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        Scalar::try_from_json(&value)
            .ok_or_else(|| D::Error::custom("expected a scalar JSON value"))
    }
}

impl Scalar {
    pub fn try_from_json(value: &Value) -> Option<Scalar> {
        match value {
            Value::Null => Some(Scalar::Null),
            Value::Bool(b) => Some(Scalar::Bool(*b)),
            Value::Number(n) => n.as_f64().map(Scalar::Num),
            Value::String(s) => Some(Scalar::Str(s.clone())),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Scalar::Null => Value::Null,
            Scalar::Bool(b) => Value::Bool(*b),
            Scalar::Num(n) => serde_json::Number::from_f64(*n)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            Scalar::Str(s) => Value::String(s.clone()),
        }
    }
}

/// One structured event record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub actor: String,
    pub operation: String,
    pub resources: Vec<String>,
    /// UTC epoch milliseconds.
    pub time_ms: i64,
    /// All non-mapped leaf fields, keyed by dotted path.
    pub extras: BTreeMap<String, Scalar>,
}

/// Binds a concrete event schema to the abstract (actor, operation,
/// resources, time) tuple via dotted JSON paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldMapping {
    pub actor_path: String,
    pub operation_path: String,
    pub resources_path: String,
    pub time_path: String,
}

impl Default for FieldMapping {
    fn default() -> Self {
        FieldMapping {
            actor_path: "actor.user.name".to_string(),
            operation_path: "api.operation".to_string(),
            resources_path: "resources".to_string(),
            time_path: "time".to_string(),
        }
    }
}

impl FieldMapping {
    pub fn validate(&self) -> Result<(), ParseError> {
        let paths = [
            &self.actor_path,
            &self.operation_path,
            &self.resources_path,
            &self.time_path,
        ];
        for p in &paths {
            if p.is_empty() {
                return Err(ParseError::BadMapping("empty path".to_string()));
            }
        }
        for i in 0..paths.len() {
            for j in i + 1..paths.len() {
                if paths[i] == paths[j] {
                    return Err(ParseError::BadMapping(format!(
                        "duplicate path {:?}",
                        paths[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("missing mapped field {0:?}")]
    MissingField(String),
    #[error("field {0:?} must be a non-empty string")]
    EmptyField(String),
    #[error("bad timestamp: {0}")]
    BadTimestamp(String),
    #[error("bad field mapping: {0}")]
    BadMapping(String),
}

/// Flattens a JSON value into dotted-path leaves. Arrays are indexed
/// (`path.0`, `path.1`), so a literal dotted key and the equivalent nested
/// object flatten to the same path.
pub fn flatten_json(value: &Value) -> BTreeMap<String, Scalar> {
    let mut out = BTreeMap::new();
    flatten_into(value, String::new(), &mut out);
    out
}

fn flatten_into(value: &Value, prefix: String, out: &mut BTreeMap<String, Scalar>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(v, path, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                let path = if prefix.is_empty() {
                    i.to_string()
                } else {
                    format!("{prefix}.{i}")
                };
                flatten_into(v, path, out);
            }
        }
        other => {
            if let Some(s) = Scalar::try_from_json(other) {
                out.insert(prefix, s);
            }
        }
    }
}

/// Parses an RFC 3339 string or integer epoch milliseconds into epoch ms.
pub fn parse_time(value: &Scalar) -> Result<i64, ParseError> {
    match value {
        Scalar::Str(s) => DateTime::parse_from_rfc3339(s)
            .map(|dt| dt.with_timezone(&Utc).timestamp_millis())
            .map_err(|e| ParseError::BadTimestamp(format!("{s:?}: {e}"))),
        Scalar::Num(n) => {
            if n.fract() == 0.0 && n.abs() < 9.0e15 {
                Ok(*n as i64)
            } else {
                Err(ParseError::BadTimestamp(format!("{n} is not epoch ms")))
            }
        }
        other => Err(ParseError::BadTimestamp(format!("{other}"))),
    }
}

/// Renders epoch milliseconds as an RFC 3339 UTC string.
pub fn format_time(time_ms: i64) -> String {
    Utc.timestamp_millis_opt(time_ms)
        .single()
        .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Millis, true))
        .unwrap_or_else(|| time_ms.to_string())
}

const RESOURCE_ID_KEYS: [&str; 3] = ["uid", "id", "name"];

/// Parses one JSON object into an [`Event`] per the field mapping.
///
/// Nested resource objects are reduced to their first string identifier
/// (`uid`, then `id`, then `name`). An absent resources path yields an empty
/// list; the other three mapped paths are required.
pub fn parse_event(json_text: &str, mapping: &FieldMapping) -> Result<Event, ParseError> {
    let value: Value =
        serde_json::from_str(json_text).map_err(|e| ParseError::MalformedJson(e.to_string()))?;
    if !value.is_object() {
        return Err(ParseError::MalformedJson(
            "top-level value is not an object".to_string(),
        ));
    }
    parse_event_value(&value, mapping)
}

pub fn parse_event_value(value: &Value, mapping: &FieldMapping) -> Result<Event, ParseError> {
    let flat = flatten_json(value);

    let string_field = |path: &str| -> Result<String, ParseError> {
        match flat.get(path) {
            None => Err(ParseError::MissingField(path.to_string())),
            Some(Scalar::Str(s)) if !s.is_empty() => Ok(s.clone()),
            Some(_) => Err(ParseError::EmptyField(path.to_string())),
        }
    };

    let actor = string_field(&mapping.actor_path)?;
    let operation = string_field(&mapping.operation_path)?;
    let time_scalar = flat
        .get(&mapping.time_path)
        .ok_or_else(|| ParseError::MissingField(mapping.time_path.clone()))?;
    let time_ms = parse_time(time_scalar)?;

    let resources = extract_resources(&flat, &mapping.resources_path)?;

    let resource_prefix = format!("{}.", mapping.resources_path);
    let mut extras = BTreeMap::new();
    for (path, scalar) in flat {
        if path == mapping.actor_path
            || path == mapping.operation_path
            || path == mapping.time_path
            || path == mapping.resources_path
            || path.starts_with(&resource_prefix)
        {
            continue;
        }
        extras.insert(path, scalar);
    }

    Ok(Event {
        actor,
        operation,
        resources,
        time_ms,
        extras,
    })
}

fn extract_resources(
    flat: &BTreeMap<String, Scalar>,
    resources_path: &str,
) -> Result<Vec<String>, ParseError> {
    // Single string at the mapped path counts as one resource.
    if let Some(Scalar::Str(s)) = flat.get(resources_path) {
        if s.is_empty() {
            return Err(ParseError::EmptyField(resources_path.to_string()));
        }
        return Ok(vec![s.clone()]);
    }

    let prefix = format!("{resources_path}.");
    let mut by_index: BTreeMap<usize, Vec<(&str, &Scalar)>> = BTreeMap::new();
    for (path, scalar) in flat.range(prefix.clone()..) {
        let Some(rest) = path.strip_prefix(&prefix) else {
            break;
        };
        let (index_part, tail) = match rest.split_once('.') {
            Some((head, tail)) => (head, Some(tail)),
            None => (rest, None),
        };
        let Ok(index) = index_part.parse::<usize>() else {
            continue;
        };
        by_index
            .entry(index)
            .or_default()
            .push((tail.unwrap_or(""), scalar));
    }

    let mut resources = Vec::new();
    for (index, fields) in by_index {
        let id = resource_identifier(&fields);
        match id {
            Some(s) if !s.is_empty() => resources.push(s),
            _ => {
                return Err(ParseError::EmptyField(format!(
                    "{resources_path}.{index}"
                )))
            }
        }
    }
    Ok(resources)
}

fn resource_identifier(fields: &[(&str, &Scalar)]) -> Option<String> {
    // Bare string entry.
    if let Some((_, Scalar::Str(s))) = fields.iter().find(|(tail, _)| tail.is_empty()) {
        return Some(s.clone());
    }
    for key in RESOURCE_ID_KEYS {
        if let Some((_, Scalar::Str(s))) = fields.iter().find(|(tail, _)| *tail == key) {
            return Some(s.clone());
        }
    }
    // Fall back to the first string-valued field of the object.
    fields.iter().find_map(|(_, s)| match s {
        Scalar::Str(v) => Some(v.clone()),
        _ => None,
    })
}

impl Event {
    /// Re-serializes the event into a source-style JSON object under the
    /// given mapping. `parse_event` on the result yields a field-equal event.
    pub fn to_json(&self, mapping: &FieldMapping) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert(
            mapping.actor_path.clone(),
            Value::String(self.actor.clone()),
        );
        obj.insert(
            mapping.operation_path.clone(),
            Value::String(self.operation.clone()),
        );
        obj.insert(
            mapping.resources_path.clone(),
            Value::Array(
                self.resources
                    .iter()
                    .map(|r| Value::String(r.clone()))
                    .collect(),
            ),
        );
        obj.insert(
            mapping.time_path.clone(),
            Value::String(format_time(self.time_ms)),
        );
        for (path, scalar) in &self.extras {
            obj.insert(path.clone(), scalar.to_json());
        }
        Value::Object(obj)
    }

    /// Flat field view used by rule matching: extras plus the mapped tuple
    /// fields re-exposed under their paths. Resources appear as
    /// `<resources_path>.<i>`.
    pub fn field_view(&self, mapping: &FieldMapping) -> BTreeMap<String, Scalar> {
        let mut view = self.extras.clone();
        view.insert(
            mapping.actor_path.clone(),
            Scalar::Str(self.actor.clone()),
        );
        view.insert(
            mapping.operation_path.clone(),
            Scalar::Str(self.operation.clone()),
        );
        view.insert(
            mapping.time_path.clone(),
            Scalar::Str(format_time(self.time_ms)),
        );
        for (i, r) in self.resources.iter().enumerate() {
            view.insert(
                format!("{}.{}", mapping.resources_path, i),
                Scalar::Str(r.clone()),
            );
        }
        view
    }
}

#[derive(Debug, Error)]
pub enum NdjsonError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: ParseError,
    },
}

/// Whether per-line parse failures abort ingestion or are skipped and
/// counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadMode {
    Strict,
    Lenient,
}

/// Lazy NDJSON reader; blank lines are skipped, errors carry line numbers.
pub struct NdjsonReader<R: BufRead> {
    reader: R,
    mapping: FieldMapping,
    line: usize,
}

impl<R: BufRead> NdjsonReader<R> {
    pub fn new(reader: R, mapping: FieldMapping) -> Self {
        NdjsonReader {
            reader,
            mapping,
            line: 0,
        }
    }
}

impl<R: BufRead> Iterator for NdjsonReader<R> {
    type Item = Result<Event, NdjsonError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let mut buf = String::new();
            self.line += 1;
            match self.reader.read_line(&mut buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(NdjsonError::Io(e))),
            }
            let trimmed = buf.trim();
            if trimmed.is_empty() {
                continue;
            }
            return Some(
                parse_event(trimmed, &self.mapping).map_err(|source| NdjsonError::Line {
                    line: self.line,
                    source,
                }),
            );
        }
    }
}

/// Reads a whole NDJSON source. Returns the events and, in lenient mode, the
/// number of skipped lines.
pub fn read_ndjson<R: BufRead>(
    reader: R,
    mapping: &FieldMapping,
    mode: ReadMode,
) -> Result<(Vec<Event>, usize), NdjsonError> {
    let mut events = Vec::new();
    let mut skipped = 0;
    for item in NdjsonReader::new(reader, mapping.clone()) {
        match item {
            Ok(event) => events.push(event),
            Err(e @ NdjsonError::Io(_)) => return Err(e),
            Err(e) => match mode {
                ReadMode::Strict => return Err(e),
                ReadMode::Lenient => skipped += 1,
            },
        }
    }
    Ok((events, skipped))
}

/// A tumbling window of events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_ms: i64,
    pub duration_ms: i64,
    pub events: Vec<Event>,
}

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("events are not sorted by time: {0} ms after {1} ms")]
    UnsortedInput(i64, i64),
    #[error("window duration must be positive")]
    BadDuration,
}

/// Assigns time-ordered events to tumbling windows aligned to `origin_ms`.
///
/// Every event lands in the window with index `floor((t - origin) / delta)`;
/// empty windows between occupied ones are emitted so downstream frequency
/// bins see zero counts.
pub fn window_events(
    events: &[Event],
    delta_ms: i64,
    origin_ms: i64,
) -> Result<Vec<TimeWindow>, WindowError> {
    if delta_ms <= 0 {
        return Err(WindowError::BadDuration);
    }
    if events.is_empty() {
        return Ok(Vec::new());
    }
    let mut last = i64::MIN;
    for e in events {
        if e.time_ms < last {
            return Err(WindowError::UnsortedInput(last, e.time_ms));
        }
        last = e.time_ms;
    }

    let index_of = |t: i64| (t - origin_ms).div_euclid(delta_ms);
    let first_idx = index_of(events[0].time_ms);
    let last_idx = index_of(events[events.len() - 1].time_ms);
    let mut windows: Vec<TimeWindow> = (first_idx..=last_idx)
        .map(|i| TimeWindow {
            start_ms: origin_ms + i * delta_ms,
            duration_ms: delta_ms,
            events: Vec::new(),
        })
        .collect();
    for e in events {
        let slot = (index_of(e.time_ms) - first_idx) as usize;
        windows[slot].events.push(e.clone());
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn fig2_json() -> &'static str {
        r#"{ "actor.user.name": "merlinary",
             "api.operation": "UpdateInstances",
             "api.request.data": { "force": true },
             "resources": [ { "uid": "prod-04242345432" } ],
             "cloud.region": "us-east-1",
             "time": "2025-05-19T17:38:32Z",
             "error": null }"#
    }

    #[test]
    fn parses_ocsf_style_event() {
        let event = parse_event(fig2_json(), &FieldMapping::default()).unwrap();
        assert_eq!(event.actor, "merlinary");
        assert_eq!(event.operation, "UpdateInstances");
        assert_eq!(event.resources, vec!["prod-04242345432".to_string()]);
        assert_eq!(
            event.time_ms,
            DateTime::parse_from_rfc3339("2025-05-19T17:38:32Z")
                .unwrap()
                .timestamp_millis()
        );
        assert_eq!(
            event.extras.get("cloud.region"),
            Some(&Scalar::Str("us-east-1".to_string()))
        );
        assert_eq!(
            event.extras.get("api.request.data.force"),
            Some(&Scalar::Bool(true))
        );
        assert_eq!(event.extras.get("error"), Some(&Scalar::Null));
    }

    #[test]
    fn missing_time_is_an_error() {
        let json = r#"{"actor.user.name":"a","api.operation":"op","resources":[]}"#;
        let err = parse_event(json, &FieldMapping::default()).unwrap_err();
        assert!(matches!(err, ParseError::MissingField(p) if p == "time"));
    }

    #[test]
    fn empty_resources_accepted() {
        let json = r#"{"actor.user.name":"a","api.operation":"op","resources":[],"time":1000}"#;
        let event = parse_event(json, &FieldMapping::default()).unwrap();
        assert!(event.resources.is_empty());
    }

    #[test]
    fn epoch_millis_timestamp() {
        let json = r#"{"actor.user.name":"a","api.operation":"op","time":1747676312000}"#;
        let event = parse_event(json, &FieldMapping::default()).unwrap();
        assert_eq!(event.time_ms, 1_747_676_312_000);
    }

    #[test]
    fn nested_actor_path_equivalent_to_literal_key() {
        let json = r#"{"actor":{"user":{"name":"a"}},"api.operation":"op","time":0}"#;
        let event = parse_event(json, &FieldMapping::default()).unwrap();
        assert_eq!(event.actor, "a");
    }

    #[test]
    fn malformed_json_rejected() {
        assert!(matches!(
            parse_event("{not json", &FieldMapping::default()),
            Err(ParseError::MalformedJson(_))
        ));
    }

    #[test]
    fn json_round_trip_is_field_equal() {
        let mapping = FieldMapping::default();
        let event = parse_event(fig2_json(), &mapping).unwrap();
        let text = event.to_json(&mapping).to_string();
        let reparsed = parse_event(&text, &mapping).unwrap();
        assert_eq!(event, reparsed);
    }

    #[test]
    fn ndjson_blank_lines_skipped() {
        let src = "{\"actor.user.name\":\"a\",\"api.operation\":\"x\",\"time\":0}\n\n{\"actor.user.name\":\"b\",\"api.operation\":\"y\",\"time\":1}\n";
        let (events, skipped) =
            read_ndjson(Cursor::new(src), &FieldMapping::default(), ReadMode::Strict).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn ndjson_lenient_counts_skips() {
        let src = "{\"actor.user.name\":\"a\",\"api.operation\":\"x\",\"time\":0}\nnot json\n{\"actor.user.name\":\"b\",\"api.operation\":\"y\",\"time\":1}\n";
        let (events, skipped) = read_ndjson(
            Cursor::new(src),
            &FieldMapping::default(),
            ReadMode::Lenient,
        )
        .unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn ndjson_strict_reports_line_number() {
        let src = "{\"actor.user.name\":\"a\",\"api.operation\":\"x\",\"time\":0}\nnot json\n";
        let err = read_ndjson(Cursor::new(src), &FieldMapping::default(), ReadMode::Strict)
            .unwrap_err();
        assert!(matches!(err, NdjsonError::Line { line: 2, .. }));
    }

    #[test]
    fn ndjson_empty_source() {
        let (events, skipped) =
            read_ndjson(Cursor::new(""), &FieldMapping::default(), ReadMode::Strict).unwrap();
        assert!(events.is_empty());
        assert_eq!(skipped, 0);
    }

    fn event_at(ms: i64) -> Event {
        Event {
            actor: "a".to_string(),
            operation: "op".to_string(),
            resources: Vec::new(),
            time_ms: ms,
            extras: BTreeMap::new(),
        }
    }

    #[test]
    fn tumbling_windows_by_hand() {
        let events = vec![event_at(0), event_at(30_000), event_at(70_000)];
        let windows = window_events(&events, 60_000, 0).unwrap();
        assert_eq!(windows.len(), 2);
        assert_eq!(windows[0].start_ms, 0);
        assert_eq!(windows[0].events.len(), 2);
        assert_eq!(windows[1].start_ms, 60_000);
        assert_eq!(windows[1].events.len(), 1);
    }

    #[test]
    fn empty_middle_window_emitted() {
        let events = vec![event_at(0), event_at(130_000)];
        let windows = window_events(&events, 60_000, 0).unwrap();
        assert_eq!(windows.len(), 3);
        assert!(windows[1].events.is_empty());
    }

    #[test]
    fn single_event_window() {
        let windows = window_events(&[event_at(42_000)], 60_000, 0).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].events.len(), 1);
    }

    #[test]
    fn unsorted_input_rejected() {
        let events = vec![event_at(10), event_at(5)];
        assert!(matches!(
            window_events(&events, 60_000, 0),
            Err(WindowError::UnsortedInput(_, _))
        ));
    }

    #[test]
    fn window_partition_preserves_events() {
        let events: Vec<Event> = [3_i64, 70, 70, 200, 450, 999]
            .iter()
            .map(|s| event_at(s * 1000))
            .collect();
        let windows = window_events(&events, 60_000, 0).unwrap();
        let total: usize = windows.iter().map(|w| w.events.len()).sum();
        assert_eq!(total, events.len());
        for w in &windows {
            for e in &w.events {
                assert!(e.time_ms >= w.start_ms && e.time_ms < w.start_ms + w.duration_ms);
            }
        }
    }
}

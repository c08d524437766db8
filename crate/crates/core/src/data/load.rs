use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde_json::{json, Value};

use super::records::{InteractionRecord, ItemRecord, Location, Record, Review};
use super::registry::{AttributeSpec, ParseRule, SchemaRegistry};
use super::{io_err, DataError, Result};
use crate::embed::tokenize;
use crate::modality::Modality;
use crate::numeric::MAX_TIMESTAMP;

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Text(String),
    Categorical(Vec<String>),
    Images(Vec<String>),
    Number(f64),
    Timestamp(i64),
    Geo { lat: f64, lon: f64 },
}

impl AttrValue {
    pub fn modality(&self) -> Modality {
        match self {
            AttrValue::Text(_) => Modality::Text,
            AttrValue::Categorical(_) => Modality::Categorical,
            AttrValue::Images(_) => Modality::Image,
            AttrValue::Number(_) => Modality::Number,
            AttrValue::Timestamp(_) => Modality::Timestamp,
            AttrValue::Geo { .. } => Modality::Geopoint,
        }
    }
}

/// An item with its present attributes as `(slot, value)` in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub attrs: Vec<(usize, AttrValue)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    /// Dense item index.
    pub item: usize,
    pub timestamp: i64,
    pub location: Option<Location>,
    pub review: Option<Review>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub id: String,
    /// Chronological; equal timestamps keep file order.
    pub events: Vec<Event>,
}

/// Items sorted by id (the dense index follows that order) and user
/// histories sorted by user id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub registry: SchemaRegistry,
    pub items: Vec<Item>,
    pub users: Vec<UserHistory>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Abort on the first malformed line, unknown attribute, bad value or
    /// dangling reference instead of counting and skipping it.
    pub strict: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    pub items: usize,
    pub interactions: usize,
    pub malformed: usize,
    pub unknown_attributes: usize,
    pub bad_values: usize,
    pub dropped_values: usize,
    pub dangling: usize,
    pub empty_items: usize,
    /// First few problems, for logging.
    pub issues: Vec<String>,
}

impl LoadReport {
    const MAX_ISSUES: usize = 20;

    fn note(&mut self, e: &DataError) {
        if self.issues.len() < Self::MAX_ISSUES {
            self.issues.push(e.to_string());
        }
    }

    pub fn violations(&self) -> usize {
        self.malformed + self.unknown_attributes + self.bad_values + self.dangling + self.empty_items
    }
}

fn as_str_list(raw: &Value) -> std::result::Result<Vec<String>, String> {
    match raw {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(xs) => xs
            .iter()
            .map(|x| x.as_str().map(str::to_string).ok_or_else(|| format!("expected strings, got {x}")))
            .collect(),
        other => Err(format!("expected string or array of strings, got {other}")),
    }
}

fn non_blank(xs: Vec<String>) -> Vec<String> {
    xs.into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_number(raw: &Value, rule: ParseRule) -> std::result::Result<f64, String> {
    let x = match raw {
        Value::Number(n) => n.as_f64().ok_or("number out of range")?,
        Value::String(s) => {
            let t = s.trim();
            let cleaned: String = match rule {
                ParseRule::Currency => t
                    .chars()
                    .filter(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | 'e' | 'E' | '+'))
                    .collect(),
                ParseRule::Percent => t.trim_end_matches('%').trim().to_string(),
                _ => t.to_string(),
            };
            let v: f64 = cleaned.parse().map_err(|_| format!("cannot parse `{s}` as a number"))?;
            if rule == ParseRule::Percent {
                v / 100.0
            } else {
                v
            }
        }
        other => return Err(format!("expected number, got {other}")),
    };
    if x.is_finite() {
        Ok(x)
    } else {
        Err("non-finite number".into())
    }
}

fn parse_timestamp(raw: &Value, rule: ParseRule) -> std::result::Result<i64, String> {
    let t = match (raw, rule) {
        (Value::Number(n), ParseRule::UnixMs) => n.as_i64().ok_or("expected integer milliseconds")?.div_euclid(1000),
        (Value::Number(n), _) => n.as_i64().ok_or("expected integer seconds")?,
        (Value::String(s), ParseRule::IsoDate) => {
            let s = s.trim();
            if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
                dt.timestamp()
            } else if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
                dt.and_utc().timestamp()
            } else if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
                d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp()
            } else {
                return Err(format!("cannot parse `{s}` as a date"));
            }
        }
        (Value::String(s), ParseRule::UnixMs) => s.trim().parse::<i64>().map_err(|e| e.to_string())?.div_euclid(1000),
        (Value::String(s), _) => s.trim().parse::<i64>().map_err(|e| e.to_string())?,
        (other, _) => return Err(format!("expected timestamp, got {other}")),
    };
    if (0..MAX_TIMESTAMP).contains(&t) {
        Ok(t)
    } else {
        Err(format!("timestamp {t} outside [1970, 2100)"))
    }
}

fn parse_geo(raw: &Value) -> std::result::Result<(f64, f64), String> {
    let (lat, lon) = match raw {
        Value::Object(m) => (
            m.get("lat").and_then(Value::as_f64),
            m.get("lon").and_then(Value::as_f64),
        ),
        Value::Array(xs) if xs.len() == 2 => (xs[0].as_f64(), xs[1].as_f64()),
        other => return Err(format!("expected {{lat, lon}}, got {other}")),
    };
    check_geo(lat.ok_or("missing lat")?, lon.ok_or("missing lon")?)
}

fn check_geo(lat: f64, lon: f64) -> std::result::Result<(f64, f64), String> {
    if (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon) {
        Ok((lat, lon))
    } else {
        Err(format!("coordinates ({lat}, {lon}) out of range"))
    }
}

/// `Ok(None)` means the value is absent (null, blank, or no tokens).
fn parse_value(spec: &AttributeSpec, raw: &Value) -> std::result::Result<Option<AttrValue>, String> {
    if raw.is_null() {
        return Ok(None);
    }
    let v = match spec.modality {
        Modality::Text => {
            let s = match (raw, spec.parse) {
                (Value::Object(m), ParseRule::Flatten) => m
                    .iter()
                    .map(|(k, v)| match v {
                        Value::String(s) => format!("{k}: {s}"),
                        other => format!("{k}: {other}"),
                    })
                    .collect::<Vec<_>>()
                    .join("; "),
                (Value::Array(_), ParseRule::Join | ParseRule::Plain) => non_blank(as_str_list(raw)?).join(" "),
                (Value::String(s), _) => s.trim().to_string(),
                (Value::Number(n), _) => n.to_string(),
                (other, _) => return Err(format!("expected text, got {other}")),
            };
            if tokenize(&s).next().is_none() {
                return Ok(None);
            }
            AttrValue::Text(s)
        }
        Modality::Categorical => {
            let labels = match (raw, spec.parse) {
                (Value::String(s), ParseRule::MultiLabel) => s.split(',').map(str::to_string).collect(),
                _ => as_str_list(raw)?,
            };
            let labels: Vec<String> = non_blank(labels)
                .into_iter()
                .filter(|l| tokenize(l).next().is_some())
                .collect();
            if labels.is_empty() {
                return Ok(None);
            }
            AttrValue::Categorical(labels)
        }
        Modality::Image => {
            let refs = non_blank(as_str_list(raw)?);
            if refs.is_empty() {
                return Ok(None);
            }
            AttrValue::Images(refs)
        }
        Modality::Number => AttrValue::Number(parse_number(raw, spec.parse)?),
        Modality::Timestamp => AttrValue::Timestamp(parse_timestamp(raw, spec.parse)?),
        Modality::Geopoint => {
            let (lat, lon) = parse_geo(raw)?;
            AttrValue::Geo { lat, lon }
        }
    };
    Ok(Some(v))
}

fn value_to_json(spec: &AttributeSpec, v: &AttrValue, out: &mut BTreeMap<String, Value>) {
    let j = match v {
        AttrValue::Text(s) => json!(s),
        AttrValue::Categorical(ls) => json!(ls),
        AttrValue::Images(rs) => json!(rs),
        AttrValue::Number(x) => json!(x),
        AttrValue::Timestamp(t) => json!(t),
        AttrValue::Geo { lat, lon } => {
            if spec.source.len() == 2 {
                out.insert(spec.source[0].clone(), json!(lat));
                out.insert(spec.source[1].clone(), json!(lon));
                return;
            }
            json!({ "lat": lat, "lon": lon })
        }
    };
    out.insert(spec.name.clone(), j);
}

struct Builder<'a> {
    registry: &'a SchemaRegistry,
    opts: LoadOptions,
    report: LoadReport,
}

impl Builder<'_> {
    /// Strict mode turns a recoverable problem into an error.
    fn problem(&mut self, e: DataError) -> Result<()> {
        if self.opts.strict {
            return Err(e);
        }
        self.report.note(&e);
        Ok(())
    }

    fn item(&mut self, line: usize, rec: &ItemRecord) -> Result<Option<Item>> {
        let mut consumed = BTreeSet::new();
        let mut attrs = Vec::new();
        for (slot, spec) in self.registry.item_attributes() {
            let raw = if spec.source.len() == 2 {
                let (lat, lon) = (rec.attributes.get(&spec.source[0]), rec.attributes.get(&spec.source[1]));
                consumed.extend(spec.source.iter().map(String::as_str));
                match (lat, lon) {
                    (None | Some(Value::Null), None | Some(Value::Null)) => None,
                    (Some(a), Some(b)) => Some(json!([a, b])),
                    _ => Some(json!("half of a coordinate pair")),
                }
            } else {
                consumed.insert(spec.name.as_str());
                rec.attributes.get(&spec.name).cloned()
            };
            let Some(raw) = raw else { continue };
            match parse_value(spec, &raw) {
                Ok(Some(v)) => attrs.push((slot, v)),
                Ok(None) => self.report.dropped_values += 1,
                Err(msg) => {
                    self.report.bad_values += 1;
                    self.problem(DataError::BadValue {
                        line,
                        name: spec.name.clone(),
                        msg,
                    })?;
                }
            }
        }
        for name in rec.attributes.keys() {
            if !consumed.contains(name.as_str()) {
                self.report.unknown_attributes += 1;
                self.problem(DataError::UnknownAttribute {
                    line,
                    name: name.clone(),
                })?;
            }
        }
        if attrs.is_empty() {
            self.report.empty_items += 1;
            self.problem(DataError::EmptyItem(rec.item_id.clone()))?;
            return Ok(None);
        }
        Ok(Some(Item {
            id: rec.item_id.clone(),
            attrs,
        }))
    }
}

impl Dataset {
    pub fn from_records(
        records: impl IntoIterator<Item = (usize, Record)>,
        registry: &SchemaRegistry,
        opts: LoadOptions,
    ) -> Result<(Self, LoadReport)> {
        let mut b = Builder {
            registry,
            opts,
            report: LoadReport::default(),
        };
        let mut items: BTreeMap<String, Item> = BTreeMap::new();
        let mut interactions: Vec<(usize, InteractionRecord)> = Vec::new();
        for (line, rec) in records {
            b.report.lines += 1;
            match rec {
                Record::Item(r) => {
                    if items.contains_key(&r.item_id) {
                        b.report.malformed += 1;
                        b.problem(DataError::DuplicateItem { line, item: r.item_id })?;
                        continue;
                    }
                    if let Some(item) = b.item(line, &r)? {
                        items.insert(item.id.clone(), item);
                    }
                }
                Record::Interaction(r) => interactions.push((line, r)),
            }
        }
        let items: Vec<Item> = items.into_values().collect();
        let index: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();

        let mut users: BTreeMap<String, Vec<Event>> = BTreeMap::new();
        for (line, r) in interactions {
            let Some(&item) = index.get(r.item_id.as_str()) else {
                b.report.dangling += 1;
                b.problem(DataError::DanglingItem { line, item: r.item_id })?;
                continue;
            };
            if !(0..MAX_TIMESTAMP).contains(&r.timestamp) {
                b.report.malformed += 1;
                b.problem(DataError::Malformed {
                    line,
                    msg: format!("timestamp {} outside [1970, 2100)", r.timestamp),
                })?;
                continue;
            }
            if let Some(loc) = r.location {
                if let Err(msg) = check_geo(loc.lat, loc.lon) {
                    b.report.malformed += 1;
                    b.problem(DataError::Malformed { line, msg })?;
                    continue;
                }
            }
            users.entry(r.user_id).or_default().push(Event {
                item,
                timestamp: r.timestamp,
                location: r.location,
                review: r.review.filter(|rv| !rv.is_empty()),
            });
            b.report.interactions += 1;
        }
        let users = users
            .into_iter()
            .map(|(id, mut events)| {
                events.sort_by_key(|e| e.timestamp);
                UserHistory { id, events }
            })
            .collect();
        b.report.items = items.len();
        Ok((
            Self {
                registry: registry.clone(),
                items,
                users,
            },
            b.report,
        ))
    }

    pub fn load(path: &Path, registry: &SchemaRegistry, opts: LoadOptions) -> Result<(Self, LoadReport)> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        let mut records = Vec::new();
        let mut malformed = 0;
        let mut issues = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(&line) {
                Ok(r) => records.push((i + 1, r)),
                Err(e) => {
                    let err = DataError::Malformed {
                        line: i + 1,
                        msg: e.to_string(),
                    };
                    if opts.strict {
                        return Err(err);
                    }
                    malformed += 1;
                    issues.push(err.to_string());
                }
            }
        }
        let (ds, mut report) = Self::from_records(records, registry, opts)?;
        report.lines += malformed;
        report.malformed += malformed;
        issues.extend(std::mem::take(&mut report.issues));
        issues.truncate(LoadReport::MAX_ISSUES);
        report.issues = issues;
        Ok((ds, report))
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.items.binary_search_by(|it| it.id.as_str().cmp(id)).ok()
    }

    pub fn n_interactions(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::with_capacity(self.items.len() + self.n_interactions());
        for item in &self.items {
            let mut attributes = BTreeMap::new();
            for (slot, v) in &item.attrs {
                value_to_json(self.registry.item_attribute(*slot), v, &mut attributes);
            }
            out.push(Record::Item(ItemRecord {
                item_id: item.id.clone(),
                attributes,
            }));
        }
        for u in &self.users {
            for e in &u.events {
                out.push(Record::Interaction(InteractionRecord {
                    user_id: u.id.clone(),
                    item_id: self.items[e.item].id.clone(),
                    timestamp: e.timestamp,
                    location: e.location,
                    review: e.review.clone(),
                }));
            }
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_records(path, &self.to_records())
    }

    /// Keeps only the given interactions (`keep[u][k]` for event `k` of user
    /// `u`), then drops users and items left without interactions.
    pub fn retain(&self, keep: &[Vec<bool>]) -> Self {
        let mut used = vec![false; self.items.len()];
        for (u, flags) in self.users.iter().zip(keep) {
            for (e, &k) in u.events.iter().zip(flags) {
                if k {
                    used[e.item] = true;
                }
            }
        }
        let mut remap = vec![usize::MAX; self.items.len()];
        let mut items = Vec::new();
        for (i, it) in self.items.iter().enumerate() {
            if used[i] {
                remap[i] = items.len();
                items.push(it.clone());
            }
        }
        let users = self
            .users
            .iter()
            .zip(keep)
            .filter_map(|(u, flags)| {
                let events: Vec<Event> = u
                    .events
                    .iter()
                    .zip(flags)
                    .filter(|(_, &k)| k)
                    .map(|(e, _)| Event {
                        item: remap[e.item],
                        ..e.clone()
                    })
                    .collect();
                (!events.is_empty()).then(|| UserHistory {
                    id: u.id.clone(),
                    events,
                })
            })
            .collect();
        Self {
            registry: self.registry.clone(),
            items,
            users,
        }
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("records serialize");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

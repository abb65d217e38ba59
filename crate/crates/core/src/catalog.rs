//! Instances, context strategies, observed interactions, and their file formats.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// A task input with its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub text: String,
    pub gold: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demo {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Anchor,
    Evolved,
}

/// A composite context: instruction, demonstrations, reasoning format and
/// output constraints.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextStrategy {
    pub id: String,
    pub instruction: String,
    pub demos: Vec<Demo>,
    pub reasoning_format: String,
    pub output_constraints: String,
    pub origin: Origin,
    pub round: u32,
}

/// The four text components of a strategy, without identity or provenance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StrategyBody {
    pub instruction: String,
    pub demos: Vec<Demo>,
    pub reasoning_format: String,
    pub output_constraints: String,
}

impl ContextStrategy {
    pub fn from_body(
        id: impl Into<String>,
        body: StrategyBody,
        origin: Origin,
        round: u32,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            instruction: body.instruction,
            demos: body.demos,
            reasoning_format: body.reasoning_format,
            output_constraints: body.output_constraints,
            origin,
            round,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn body(&self) -> StrategyBody {
        StrategyBody {
            instruction: self.instruction.clone(),
            demos: self.demos.clone(),
            reasoning_format: self.reasoning_format.clone(),
            output_constraints: self.output_constraints.clone(),
        }
    }

    /// Copy of this strategy re-labelled as a round-0 anchor.
    pub fn as_anchor(&self, id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            origin: Origin::Anchor,
            round: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidRecord("strategy id is empty".into()));
        }
        if self.origin == Origin::Anchor && self.round != 0 {
            return Err(Error::InvalidRecord(format!(
                "anchor strategy `{}` has round {} (anchors are round 0)",
                self.id, self.round
            )));
        }
        Ok(())
    }

    /// True when the four text components are identical.
    pub fn same_components(&self, other: &Self) -> bool {
        self.instruction == other.instruction
            && self.demos == other.demos
            && self.reasoning_format == other.reasoning_format
            && self.output_constraints == other.output_constraints
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub instance_id: String,
    pub context_id: String,
    pub reward: f64,
    pub round: u32,
}

impl InteractionRecord {
    pub fn new(
        instance_id: impl Into<String>,
        context_id: impl Into<String>,
        reward: f64,
        round: u32,
    ) -> Result<Self> {
        let r = Self {
            instance_id: instance_id.into(),
            context_id: context_id.into(),
            reward,
            round,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::InvalidRecord(format!(
                "reward {} for ({}, {}) is outside [0, 1]",
                self.reward, self.instance_id, self.context_id
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Canonical text
// ---------------------------------------------------------------------------

const H_INSTRUCTION: &str = "INSTRUCTION:";
const H_DEMOS: &str = "DEMOS:";
const H_REASONING: &str = "REASONING:";
const H_OUTPUT: &str = "OUTPUT_CONSTRAINTS:";
const NO_DEMOS: &str = "(none)";

fn demo_header(n: usize, part: &str) -> String {
    format!("DEMO {n} {part}:")
}

/// Lines that would be read back as structure. Such lines inside a field, and
/// lines starting with a backslash, get one leading backslash.
fn is_structural(line: &str) -> bool {
    if matches!(
        line,
        H_INSTRUCTION | H_DEMOS | H_REASONING | H_OUTPUT | NO_DEMOS
    ) {
        return true;
    }
    parse_demo_header(line).is_some()
}

fn parse_demo_header(line: &str) -> Option<(usize, bool)> {
    let rest = line.strip_prefix("DEMO ")?;
    let (num, part) = rest.split_once(' ')?;
    if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let n = num.parse().ok()?;
    match part {
        "INPUT:" => Some((n, true)),
        "OUTPUT:" => Some((n, false)),
        _ => None,
    }
}

fn push_field(out: &mut String, text: &str) {
    for line in text.split('\n') {
        if line.starts_with('\\') || is_structural(line) {
            out.push('\\');
        }
        out.push_str(line);
        out.push('\n');
    }
}

/// Canonical LF-terminated rendering of a strategy's components. Identity and
/// provenance fields are not part of the text.
pub fn serialize_strategy(p: &ContextStrategy) -> String {
    serialize_body(&p.body())
}

pub fn serialize_body(b: &StrategyBody) -> String {
    let mut out = String::new();
    out.push_str(H_INSTRUCTION);
    out.push('\n');
    push_field(&mut out, &b.instruction);
    out.push_str(H_DEMOS);
    out.push('\n');
    if b.demos.is_empty() {
        out.push_str(NO_DEMOS);
        out.push('\n');
    }
    for (i, d) in b.demos.iter().enumerate() {
        out.push_str(&demo_header(i + 1, "INPUT"));
        out.push('\n');
        push_field(&mut out, &d.input);
        out.push_str(&demo_header(i + 1, "OUTPUT"));
        out.push('\n');
        push_field(&mut out, &d.output);
    }
    out.push_str(H_REASONING);
    out.push('\n');
    push_field(&mut out, &b.reasoning_format);
    out.push_str(H_OUTPUT);
    out.push('\n');
    push_field(&mut out, &b.output_constraints);
    out
}

/// Inverse of [`serialize_body`].
pub fn parse_strategy_text(text: &str) -> Result<StrategyBody> {
    let body = text
        .strip_suffix('\n')
        .ok_or_else(|| Error::CanonicalParse("text must end with a newline".into()))?;
    let mut lines = body.split('\n').peekable();

    let expect = |got: Option<&str>, want: &str| -> Result<()> {
        match got {
            Some(l) if l == want => Ok(()),
            other => Err(Error::CanonicalParse(format!(
                "expected `{want}`, found {other:?}"
            ))),
        }
    };

    // Collects escaped field lines up to the next structural line.
    fn field<'a>(lines: &mut std::iter::Peekable<impl Iterator<Item = &'a str>>) -> String {
        let mut parts: Vec<&str> = Vec::new();
        while let Some(&l) = lines.peek() {
            if !l.starts_with('\\') && is_structural(l) {
                break;
            }
            parts.push(l.strip_prefix('\\').unwrap_or(l));
            lines.next();
        }
        parts.join("\n")
    }

    expect(lines.next(), H_INSTRUCTION)?;
    let instruction = field(&mut lines);
    expect(lines.next(), H_DEMOS)?;
    let mut demos = Vec::new();
    if lines.peek() == Some(&NO_DEMOS) {
        lines.next();
    } else {
        loop {
            match lines.peek().copied().and_then(parse_demo_header) {
                Some((n, true)) if n == demos.len() + 1 => {
                    lines.next();
                }
                _ => break,
            }
            let input = field(&mut lines);
            expect(lines.next(), &demo_header(demos.len() + 1, "OUTPUT"))?;
            let output = field(&mut lines);
            demos.push(Demo { input, output });
        }
    }
    expect(lines.next(), H_REASONING)?;
    let reasoning_format = field(&mut lines);
    expect(lines.next(), H_OUTPUT)?;
    let output_constraints = field(&mut lines);
    if let Some(extra) = lines.next() {
        return Err(Error::CanonicalParse(format!("trailing content {extra:?}")));
    }
    Ok(StrategyBody {
        instruction,
        demos,
        reasoning_format,
        output_constraints,
    })
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("records always serialize");
        buf.push(b'\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn append_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for item in items {
        let mut line = serde_json::to_vec(item).expect("records always serialize");
        line.push(b'\n');
        file.write_all(&line).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn check_unique<'a>(kind: &'static str, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId {
                kind,
                id: id.to_string(),
            });
        }
    }
    Ok(())
}

pub fn load_catalog(path: &Path) -> Result<Vec<ContextStrategy>> {
    let catalog: Vec<ContextStrategy> = read_jsonl(path)?;
    for (i, s) in catalog.iter().enumerate() {
        s.validate().map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    check_unique("context", catalog.iter().map(|s| s.id.as_str()))?;
    Ok(catalog)
}

pub fn save_catalog(catalog: &[ContextStrategy], path: &Path) -> Result<()> {
    check_unique("context", catalog.iter().map(|s| s.id.as_str()))?;
    write_jsonl(path, catalog)
}

pub fn load_instances(path: &Path) -> Result<Vec<InstanceRecord>> {
    let instances: Vec<InstanceRecord> = read_jsonl(path)?;
    check_unique("instance", instances.iter().map(|s| s.id.as_str()))?;
    Ok(instances)
}

pub fn save_instances(instances: &[InstanceRecord], path: &Path) -> Result<()> {
    check_unique("instance", instances.iter().map(|s| s.id.as_str()))?;
    write_jsonl(path, instances)
}

pub fn load_interactions(path: &Path) -> Result<InteractionSet> {
    let records: Vec<InteractionRecord> = read_jsonl(path)?;
    let mut set = InteractionSet::default();
    for (i, r) in records.into_iter().enumerate() {
        r.validate().map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        set.insert(r);
    }
    Ok(set)
}

pub fn save_interactions(set: &InteractionSet, path: &Path) -> Result<()> {
    write_jsonl(path, set.records())
}

// ---------------------------------------------------------------------------
// Interaction set
// ---------------------------------------------------------------------------

/// Observed rewards keyed by `(instance_id, context_id)`, iterated in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionSet {
    entries: BTreeMap<(String, String), InteractionRecord>,
}

/// Ids a dataset-bound interaction set may reference.
#[derive(Debug, Clone, Default)]
pub struct KnownIds {
    pub instances: HashSet<String>,
    pub contexts: HashSet<String>,
}

impl KnownIds {
    pub fn new(instances: &[InstanceRecord], catalog: &[ContextStrategy]) -> Self {
        Self {
            instances: instances.iter().map(|i| i.id.clone()).collect(),
            contexts: catalog.iter().map(|c| c.id.clone()).collect(),
        }
    }

    pub fn check(&self, r: &InteractionRecord) -> Result<()> {
        if !self.instances.contains(&r.instance_id) {
            return Err(Error::UnknownId {
                kind: "instance",
                id: r.instance_id.clone(),
            });
        }
        if !self.contexts.contains(&r.context_id) {
            return Err(Error::UnknownId {
                kind: "context",
                id: r.context_id.clone(),
            });
        }
        Ok(())
    }
}

impl InteractionSet {
    pub fn from_records(records: impl IntoIterator<Item = InteractionRecord>) -> Self {
        let mut s = Self::default();
        for r in records {
            s.insert(r);
        }
        s
    }

    /// Inserts under the round-wins rule: an existing entry is replaced unless
    /// it carries a strictly larger round.
    pub fn insert(&mut self, r: InteractionRecord) {
        let key = (r.instance_id.clone(), r.context_id.clone());
        match self.entries.get(&key) {
            Some(existing) if existing.round > r.round => {}
            _ => {
                self.entries.insert(key, r);
            }
        }
    }

    pub fn get(&self, instance: &str, context: &str) -> Option<&InteractionRecord> {
        self.entries
            .get(&(instance.to_string(), context.to_string()))
    }

    pub fn reward(&self, instance: &str, context: &str) -> Option<f64> {
        self.get(instance, context).map(|r| r.reward)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.entries.values()
    }

    /// Observations grouped by instance id (both levels in id order).
    pub fn by_instance(&self) -> BTreeMap<&str, Vec<&InteractionRecord>> {
        let mut out: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
        for r in self.entries.values() {
            out.entry(r.instance_id.as_str()).or_default().push(r);
        }
        out
    }

    pub fn check_ids(&self, known: &KnownIds) -> Result<()> {
        self.records().try_for_each(|r| known.check(r))
    }
}

/// `base ∪ delta` under the round-wins rule, rejecting records with unknown ids.
pub fn merge_interactions(
    base: &InteractionSet,
    delta: &[InteractionRecord],
    known: &KnownIds,
) -> Result<InteractionSet> {
    for r in delta {
        known.check(r)?;
        r.validate()?;
    }
    let mut out = base.clone();
    for r in delta {
        out.insert(r.clone());
    }
    Ok(out)
}

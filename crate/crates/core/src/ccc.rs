//! Clarity / Complexity / Connection visibility metric.
//!
//! All three components are averages over the modified methods of one app:
//!
//! * Clarity is 1 when any injected snippet contains an explicit `nop`,
//!   otherwise the mean of `e^|l| / (e^|l| + |s|)`, where `|l|` is the number
//!   of injected instructions and `|s|` the host's original instruction count.
//! * Complexity is the mean of the per-snippet [`ComplexityClass`] values.
//! * Connection is the mean of the per-snippet [`ConnectionClass`] values.
//!
//! The final score is `w1*C1 + w2*(1 - C2) + w3*(1 - C3)`.
//!
//! `|l|` and `|s|` count instruction lines only. Labels, directives, comments
//! and blank lines are never counted; a loop `:start`/`:end` pair adds nothing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::smali::{is_conditional_branch, is_goto, is_switch, SmaliClass, SmaliLine, SmaliMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityClass {
    StraightLine,
    FunctionOrConditional,
    LoopOrNestedCondition,
    RecursionOrComplex,
}

impl ComplexityClass {
    pub fn value(self) -> f64 {
        match self {
            ComplexityClass::StraightLine => 0.0,
            ComplexityClass::FunctionOrConditional => 0.33,
            ComplexityClass::LoopOrNestedCondition => 0.66,
            ComplexityClass::RecursionOrComplex => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionClass {
    NoAttachment,
    OneOriginalVariable,
    MultipleOriginalVariables,
}

impl ConnectionClass {
    pub fn value(self) -> f64 {
        match self {
            ConnectionClass::NoAttachment => 0.0,
            ConnectionClass::OneOriginalVariable => 0.5,
            ConnectionClass::MultipleOriginalVariables => 1.0,
        }
    }

    pub fn from_count(n: usize) -> Self {
        match n {
            0 => ConnectionClass::NoAttachment,
            1 => ConnectionClass::OneOriginalVariable,
            _ => ConnectionClass::MultipleOriginalVariables,
        }
    }
}

/// One injected snippet and the method that hosts it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSite {
    #[serde(rename = "method")]
    pub host_method_ref: String,
    #[serde(rename = "l_count")]
    pub injected_instruction_count: usize,
    #[serde(rename = "s_count")]
    pub original_instruction_count: usize,
    #[serde(rename = "explicit_nop")]
    pub contains_explicit_nop: bool,
    #[serde(rename = "complexity_class")]
    pub complexity: ComplexityClass,
    #[serde(rename = "connection_class")]
    pub connection: ConnectionClass,
    /// Half-open `[start, end)` ranges of injected lines in the modified
    /// method body.
    #[serde(rename = "spans", default, skip_serializing_if = "Vec::is_empty")]
    pub injected_line_spans: Vec<[usize; 2]>,
}

impl InjectionSite {
    fn clarity_ratio(&self) -> f64 {
        // e^l / (e^l + s), rearranged so large l cannot overflow.
        let l = self.injected_instruction_count as f64;
        let s = self.original_instruction_count as f64;
        1.0 / (1.0 + s * (-l).exp())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionManifest {
    pub app_id: String,
    pub sites: Vec<InjectionSite>,
    /// Placeholder opcodes chosen by the optimizer, in template order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<Vec<String>>,
}

impl InjectionManifest {
    pub fn new(app_id: impl Into<String>) -> Self {
        InjectionManifest {
            app_id: app_id.into(),
            sites: Vec::new(),
            assignment: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    fn check(&self) -> Result<(), MetricError> {
        if self.sites.is_empty() {
            return Err(MetricError::EmptyManifest);
        }
        match self
            .sites
            .iter()
            .position(|s| s.injected_instruction_count == 0)
        {
            Some(i) => Err(MetricError::EmptySite(i)),
            None => Ok(()),
        }
    }

    fn mean(&self, f: impl Fn(&InjectionSite) -> f64) -> f64 {
        self.sites.iter().map(f).sum::<f64>() / self.sites.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for CccWeights {
    fn default() -> Self {
        CccWeights {
            w1: 0.4,
            w2: 0.2,
            w3: 0.4,
        }
    }
}

impl CccWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self, MetricError> {
        let w = CccWeights { w1, w2, w3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let in_range = [self.w1, self.w2, self.w3]
            .iter()
            .all(|w| (0.0..=1.0).contains(w));
        if in_range && (self.w1 + self.w2 + self.w3 - 1.0).abs() <= 1e-9 {
            Ok(())
        } else {
            Err(MetricError::InvalidWeights(self.w1, self.w2, self.w3))
        }
    }

    pub fn combine(&self, c1: f64, c2: f64, c3: f64) -> f64 {
        self.w1 * c1 + self.w2 * (1.0 - c2) + self.w3 * (1.0 - c3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccReport {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub weights: CccWeights,
    pub ccc: f64,
}

impl CccReport {
    pub fn from_components(c1: f64, c2: f64, c3: f64, weights: CccWeights) -> Self {
        CccReport {
            c1,
            c2,
            c3,
            weights,
            ccc: weights.combine(c1, c2, c3),
        }
    }

    /// Component-wise mean of per-app reports; `None` for an empty slice.
    pub fn mean(reports: &[CccReport]) -> Option<CccReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&CccReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(CccReport::from_components(
            avg(|r| r.c1),
            avg(|r| r.c2),
            avg(|r| r.c3),
            first.weights,
        ))
    }
}

pub fn clarity(manifest: &InjectionManifest) -> Result<f64, MetricError> {
    manifest.check()?;
    if manifest.sites.iter().any(|s| s.contains_explicit_nop) {
        return Ok(1.0);
    }
    Ok(manifest.mean(InjectionSite::clarity_ratio))
}

pub fn complexity(manifest: &InjectionManifest) -> Result<f64, MetricError> {
    manifest.check()?;
    Ok(manifest.mean(|s| s.complexity.value()))
}

pub fn connection(manifest: &InjectionManifest) -> Result<f64, MetricError> {
    manifest.check()?;
    Ok(manifest.mean(|s| s.connection.value()))
}

pub fn ccc(manifest: &InjectionManifest, weights: CccWeights) -> Result<CccReport, MetricError> {
    weights.validate()?;
    Ok(CccReport::from_components(
        clarity(manifest)?,
        complexity(manifest)?,
        connection(manifest)?,
        weights,
    ))
}

/// Identity of the method hosting a snippet, used to spot self-calls.
#[derive(Debug, Clone, Default)]
pub struct CallGraphHint {
    /// `Lpkg/Class;->name(desc)` of the host, if known.
    pub host_ref: Option<String>,
}

impl CallGraphHint {
    pub fn for_method(class_name: &str, method: &SmaliMethod) -> Self {
        CallGraphHint {
            host_ref: Some(method.ref_id(class_name)),
        }
    }
}

/// Heuristic control-flow classification of an injected snippet.
///
/// A branch is a back-edge when its target label is defined earlier in the
/// snippet. Targets outside the snippet count as forward.
pub fn classify_complexity(snippet: &[SmaliLine], hint: &CallGraphHint) -> ComplexityClass {
    let mut labels_seen: BTreeSet<&str> = BTreeSet::new();
    let mut conditionals = 0usize;
    let mut forward_gotos = 0usize;
    let mut back_edges = 0usize;
    let mut recursive = false;

    for line in snippet {
        if let Some(label) = line.label_name() {
            labels_seen.insert(label);
            continue;
        }
        let Some(op) = line.opcode() else { continue };
        if let Some(host) = &hint.host_ref {
            if op.starts_with("invoke") && line.operands.iter().any(|o| o == host) {
                recursive = true;
            }
        }
        let is_back = line
            .branch_target()
            .is_some_and(|t| labels_seen.contains(t));
        if is_back {
            back_edges += 1;
        } else if is_conditional_branch(op) || is_switch(op) {
            conditionals += 1;
        } else if is_goto(op) {
            forward_gotos += 1;
        }
    }

    if recursive || back_edges >= 2 {
        ComplexityClass::RecursionOrComplex
    } else if back_edges == 1 || conditionals >= 2 {
        ComplexityClass::LoopOrNestedCondition
    } else if conditionals == 1 || forward_gotos > 0 {
        ComplexityClass::FunctionOrConditional
    } else {
        ComplexityClass::StraightLine
    }
}

/// Registers of the host before injection that count as original variables:
/// anything its instructions touch plus its argument registers.
pub fn original_variables(host: &SmaliMethod) -> BTreeSet<u32> {
    let mut vars = host.referenced_registers();
    if let (Some(locals), Some(total)) = (host.local_registers(), host.registers_declared) {
        vars.extend(locals..total);
    }
    vars
}

/// Counts distinct original variables the snippet reads or writes. Snippet
/// registers must be named in the host's (pre-injection) frame.
pub fn classify_connection(snippet: &[SmaliLine], host: &SmaliMethod) -> ConnectionClass {
    let originals = original_variables(host);
    let used: BTreeSet<u32> = snippet
        .iter()
        .filter(|l| l.is_instruction())
        .flat_map(|l| l.registers())
        .filter_map(|r| host.register_index(r))
        .filter(|idx| originals.contains(idx))
        .collect();
    ConnectionClass::from_count(used.len())
}

/// Indices of `modified` lines absent from a longest common subsequence with
/// `original`, compared on trimmed text.
fn added_lines(original: &[SmaliLine], modified: &[SmaliLine]) -> Vec<usize> {
    let (n, m) = (original.len(), modified.len());
    let key = |l: &SmaliLine| l.raw.trim().to_string();
    let a: Vec<String> = original.iter().map(key).collect();
    let b: Vec<String> = modified.iter().map(key).collect();
    let mut table = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i][j] = if a[i] == b[j] {
                table[i + 1][j + 1] + 1
            } else {
                table[i + 1][j].max(table[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut added = Vec::new();
    while j < m {
        if i < n && a[i] == b[j] {
            i += 1;
            j += 1;
        } else if i < n && table[i + 1][j] >= table[i][j + 1] {
            i += 1;
        } else {
            added.push(j);
            j += 1;
        }
    }
    added
}

fn spans(indices: &[usize]) -> Vec<[usize; 2]> {
    let mut out: Vec<[usize; 2]> = Vec::new();
    for &i in indices {
        match out.last_mut() {
            Some(span) if span[1] == i => span[1] = i + 1,
            _ => out.push([i, i + 1]),
        }
    }
    out
}

/// Rebuilds a manifest by diffing each method of `modified` against the
/// method of the same name and descriptor in `original`. Every method whose
/// diff adds at least one instruction becomes one site. Methods that exist
/// only in `modified` are ignored.
pub fn manifest_from_diff(
    app_id: impl Into<String>,
    original: &SmaliClass,
    modified: &SmaliClass,
) -> InjectionManifest {
    let mut manifest = InjectionManifest::new(app_id);
    for method in &modified.methods {
        let Some(host) = original
            .methods
            .iter()
            .find(|m| m.name == method.name && m.descriptor == method.descriptor)
        else {
            continue;
        };
        let added = added_lines(&host.lines, &method.lines);
        let snippet: Vec<SmaliLine> = added.iter().map(|&i| method.lines[i].clone()).collect();
        let l = snippet.iter().filter(|x| x.is_instruction()).count();
        if l == 0 {
            continue;
        }
        manifest.sites.push(InjectionSite {
            host_method_ref: host.ref_id(&original.class_name),
            injected_instruction_count: l,
            original_instruction_count: host.instruction_count(),
            contains_explicit_nop: snippet.iter().any(|x| x.opcode() == Some("nop")),
            complexity: classify_complexity(
                &snippet,
                &CallGraphHint::for_method(&original.class_name, host),
            ),
            connection: classify_connection(&snippet, host),
            injected_line_spans: spans(&added),
        });
    }
    manifest
}

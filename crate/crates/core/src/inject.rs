//! Injection of the three NOP-style attacks into Smali methods.
//!
//! * Simple NOP: `nop` lines right after the first original instruction.
//! * SIO: `const A, c1; const B, c2; x A, A, B; x A, A, B` at method entry.
//! * IMI: `const G, 0x1; if-eqz G, :L; x G, S1, S2; x G, S1, S2; :L` at method
//!   entry. The guard is never zero, so the payload runs and its results are
//!   dead.
//!
//! Payload registers are either non-argument locals, which are dead at entry
//! because the verifier forces the original code to write them before any
//! read, or fresh scratch registers. Adding scratch registers shifts the
//! argument registers up by the same amount, so every `vN` reference to an
//! argument in the original body is renumbered; `pN` names stay valid as-is.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ccc::{
    classify_complexity, classify_connection, CallGraphHint, InjectionManifest, InjectionSite,
};
use crate::opcodes::{method_layout, OpcodeTable};
use crate::smali::{parameter_types, parse_register, App, LineKind, SmaliLine, SmaliMethod};

/// Arithmetic ops usable as the `x` placeholders.
pub const PAYLOAD_WHITELIST: &[&str] = &[
    "add-int", "sub-int", "mul-int", "xor-int", "and-int", "or-int",
];

/// Highest register addressable by every instruction format once the frame
/// grows (4-bit formats).
pub const NIBBLE_REGISTER_CAP: u32 = 16;
/// Highest register addressable by the formats the payload itself uses.
pub const BYTE_REGISTER_CAP: u32 = 256;

pub const DEFAULT_NOP_COUNT: usize = 3;
const INDENT: &str = "    ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[serde(rename = "nop")]
    SimpleNop,
    Sio,
    Imi,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::SimpleNop => "nop",
            AttackKind::Sio => "sio",
            AttackKind::Imi => "imi",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nop" | "simple-nop" | "simplenop" => Ok(AttackKind::SimpleNop),
            "sio" => Ok(AttackKind::Sio),
            "imi" => Ok(AttackKind::Imi),
            other => Err(format!("unknown attack variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackVariant {
    pub kind: AttackKind,
    /// Mnemonics for the `x` slots (SIO/IMI).
    pub payload_opcodes: Vec<String>,
    /// Number of `nop` lines (SimpleNop).
    pub nop_count: usize,
}

impl AttackVariant {
    pub fn simple_nop(count: usize) -> Self {
        AttackVariant {
            kind: AttackKind::SimpleNop,
            payload_opcodes: Vec::new(),
            nop_count: count,
        }
    }

    pub fn sio(payload: &[&str]) -> Self {
        Self::with_payload(AttackKind::Sio, payload)
    }

    pub fn imi(payload: &[&str]) -> Self {
        Self::with_payload(AttackKind::Imi, payload)
    }

    fn with_payload(kind: AttackKind, payload: &[&str]) -> Self {
        AttackVariant {
            kind,
            payload_opcodes: payload.iter().map(|s| s.to_string()).collect(),
            nop_count: 0,
        }
    }

    /// The standard two-slot variant for `kind`, filled with `add-int`.
    pub fn default_for(kind: AttackKind) -> Self {
        match kind {
            AttackKind::SimpleNop => Self::simple_nop(DEFAULT_NOP_COUNT),
            _ => Self::with_payload(kind, &[PAYLOAD_WHITELIST[0]; 2]),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            AttackKind::SimpleNop if self.nop_count == 0 => {
                Err("nop_count must be at least 1".into())
            }
            AttackKind::SimpleNop => Ok(()),
            _ if self.payload_opcodes.is_empty() => {
                Err("payload must contain at least one opcode".into())
            }
            _ => match self
                .payload_opcodes
                .iter()
                .find(|op| !PAYLOAD_WHITELIST.contains(&op.as_str()))
            {
                Some(op) => Err(format!("`{op}` is not an injectable payload opcode")),
                None => Ok(()),
            },
        }
    }

    /// Injected instruction count per method.
    pub fn injected_len(&self) -> usize {
        match self.kind {
            AttackKind::SimpleNop => self.nop_count,
            _ => 2 + self.payload_opcodes.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    NoBody,
    NoRegisterDirective,
    UnparsableDescriptor,
    RegisterBudgetExhausted { needed: u32, cap: u32 },
    OutsideHorizon,
    NotSelected,
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SkipReason::NoBody => f.write_str("method has no body"),
            SkipReason::NoRegisterDirective => f.write_str("no .registers/.locals directive"),
            SkipReason::UnparsableDescriptor => f.write_str("unparsable descriptor"),
            SkipReason::RegisterBudgetExhausted { needed, cap } => {
                write!(f, "needs {needed} registers, format cap is {cap}")
            }
            SkipReason::OutsideHorizon => f.write_str("method starts beyond the opcode horizon"),
            SkipReason::NotSelected => f.write_str("not selected by plan"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub method: String,
    #[serde(flatten)]
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    MethodEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MethodSelector {
    /// Only methods whose opcodes start before this sequence position.
    pub horizon: Option<usize>,
    /// Only methods declaring at most this many registers.
    pub max_registers: Option<u32>,
    /// Only methods with these names, when set.
    pub names: Option<Vec<String>>,
}

impl MethodSelector {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn none() -> Self {
        MethodSelector {
            names: Some(Vec::new()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub variant: AttackVariant,
    pub method_selector: MethodSelector,
    pub placement: Placement,
    pub seed: u64,
}

impl InjectionPlan {
    pub fn new(variant: AttackVariant, seed: u64) -> Self {
        InjectionPlan {
            variant,
            method_selector: MethodSelector::all(),
            placement: Placement::MethodEntry,
            seed,
        }
    }
}

/// Result of injecting one method.
#[derive(Debug, Clone, PartialEq)]
pub struct Injected {
    pub method: SmaliMethod,
    pub site: InjectionSite,
    /// Scratch registers added to the frame.
    pub added_registers: u32,
}

/// Rewrites register tokens in an instruction or debug-local directive,
/// leaving every other byte of the line untouched.
fn rename_line(line: &SmaliLine, map: &dyn Fn(u32) -> u32) -> SmaliLine {
    let renames = match line.kind {
        LineKind::Instruction => true,
        LineKind::Directive => {
            let t = line.raw.trim_start();
            t.starts_with(".local ")
                || t.starts_with(".end local")
                || t.starts_with(".restart local")
        }
        _ => false,
    };
    if !renames {
        return line.clone();
    }
    let raw = &line.raw;
    let mut out = String::with_capacity(raw.len() + 4);
    let mut in_str = false;
    let mut escaped = false;
    let mut word_start: Option<usize> = None;
    let mut changed = false;
    let flush = |out: &mut String, word: &str, changed: &mut bool| match parse_register(word) {
        Some(('v', n)) => {
            let m = map(n);
            *changed |= m != n;
            out.push_str(&format!("v{m}"));
        }
        _ => out.push_str(word),
    };
    let mut comment_at = None;
    for (i, c) in raw.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            out.push(c);
            continue;
        }
        let sep = c.is_whitespace() || matches!(c, ',' | '{' | '}' | '"' | '#');
        if sep {
            if let Some(s) = word_start.take() {
                flush(&mut out, &raw[s..i], &mut changed);
            }
            if c == '#' {
                comment_at = Some(i);
                break;
            }
            if c == '"' {
                in_str = true;
            }
            out.push(c);
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    match (comment_at, word_start) {
        (Some(i), _) => out.push_str(&raw[i..]),
        (None, Some(s)) => flush(&mut out, &raw[s..], &mut changed),
        _ => {}
    }
    if changed {
        SmaliLine::parse(&out)
    } else {
        line.clone()
    }
}

/// Index of the first code line (instruction or label) in the body.
fn entry_index(method: &SmaliMethod) -> usize {
    method
        .lines
        .iter()
        .position(|l| matches!(l.kind, LineKind::Instruction | LineKind::Label))
        .unwrap_or(method.lines.len())
}

fn is_terminator(op: &str) -> bool {
    op.starts_with("return") || op.starts_with("goto") || op == "throw"
}

/// Inserts `count` explicit `nop` lines after the first original instruction
/// (before it if it ends the block; after a following `move-result*`).
pub fn inject_simple_nop(
    class_name: &str,
    method: &SmaliMethod,
    count: usize,
) -> Result<Injected, SkipReason> {
    if !method.has_body() {
        return Err(SkipReason::NoBody);
    }
    let instr: Vec<usize> = method
        .lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_instruction())
        .map(|(i, _)| i)
        .collect();
    let first = instr[0];
    let first_op = method.lines[first].opcode().unwrap_or_default();
    let at = if is_terminator(first_op) {
        first
    } else {
        match instr.get(1) {
            Some(&next)
                if method.lines[next]
                    .opcode()
                    .is_some_and(|o| o.starts_with("move-result")) =>
            {
                next + 1
            }
            _ => first + 1,
        }
    };
    let indent = method.lines[first].indent().to_string();
    let snippet: Vec<SmaliLine> = (0..count)
        .map(|_| SmaliLine::instruction(&indent, "nop"))
        .collect();
    let site = make_site(class_name, method, &snippet, at);
    let mut out = method.clone();
    out.lines.splice(at..at, snippet);
    Ok(Injected {
        method: out,
        site,
        added_registers: 0,
    })
}

fn make_site(
    class_name: &str,
    host: &SmaliMethod,
    snippet: &[SmaliLine],
    at: usize,
) -> InjectionSite {
    InjectionSite {
        host_method_ref: host.ref_id(class_name),
        injected_instruction_count: snippet.iter().filter(|l| l.is_instruction()).count(),
        original_instruction_count: host.instruction_count(),
        contains_explicit_nop: snippet.iter().any(|l| l.opcode() == Some("nop")),
        complexity: classify_complexity(snippet, &CallGraphHint::for_method(class_name, host)),
        connection: classify_connection(snippet, host),
        injected_line_spans: vec![[at, at + snippet.len()]],
    }
}

/// Frame facts needed to place a payload at method entry.
struct Frame {
    total: u32,
    locals: u32,
    /// Argument registers holding int-typed values, in host naming.
    int_args: Vec<u32>,
}

fn frame(method: &SmaliMethod) -> Result<Frame, SkipReason> {
    if !method.has_body() {
        return Err(SkipReason::NoBody);
    }
    let total = method
        .registers_declared
        .ok_or(SkipReason::NoRegisterDirective)?;
    let types = parameter_types(&method.descriptor).ok_or(SkipReason::UnparsableDescriptor)?;
    let locals = method
        .local_registers()
        .ok_or(SkipReason::UnparsableDescriptor)?;
    let mut next = locals + u32::from(!method.is_static());
    let mut int_args = Vec::new();
    for t in &types {
        if t == "I" {
            int_args.push(next);
        }
        next += if t == "J" || t == "D" { 2 } else { 1 };
    }
    Ok(Frame {
        total,
        locals,
        int_args,
    })
}

/// Picks `needed` payload registers: dead locals first, then scratch indices
/// numbered from the top of the host frame. Returns them with the scratch
/// count.
fn allocate(frame: &Frame, needed: u32) -> Result<(Vec<u32>, u32), SkipReason> {
    let from_locals = needed.min(frame.locals);
    let scratch = needed - from_locals;
    let regs: Vec<u32> = (0..from_locals)
        .chain(frame.total..frame.total + scratch)
        .collect();
    let new_total = frame.total + scratch;
    let cap = if scratch > 0 {
        NIBBLE_REGISTER_CAP
    } else {
        BYTE_REGISTER_CAP
    };
    if new_total > cap {
        return Err(SkipReason::RegisterBudgetExhausted {
            needed: new_total,
            cap,
        });
    }
    Ok((regs, scratch))
}

/// Places a host-named snippet at method entry, growing the frame by
/// `scratch` registers and renumbering as needed.
fn place_at_entry(
    class_name: &str,
    method: &SmaliMethod,
    snippet_text: &[String],
    frame: &Frame,
    scratch: u32,
) -> Injected {
    let snippet: Vec<SmaliLine> = snippet_text.iter().map(|t| SmaliLine::parse(t)).collect();
    let at = entry_index(method);
    let site = make_site(class_name, method, &snippet, at);

    let (locals, total) = (frame.locals, frame.total);
    let host_to_new = move |n: u32| {
        if n < locals {
            n
        } else if n < total {
            n + scratch
        } else {
            n - total + locals
        }
    };
    let mut out = method.clone();
    if scratch > 0 {
        out.lines = out
            .lines
            .iter()
            .map(|l| rename_line(l, &host_to_new))
            .collect();
        out.set_register_total(total + scratch);
    }
    let placed: Vec<SmaliLine> = snippet
        .iter()
        .map(|l| rename_line(l, &host_to_new))
        .collect();
    out.lines.splice(at..at, placed);
    Injected {
        method: out,
        site,
        added_registers: scratch,
    }
}

fn fmt_const(v: i32) -> String {
    if v < 0 {
        format!("-0x{:X}", v.unsigned_abs())
    } else {
        format!("0x{v:X}")
    }
}

/// Simple opcode attack: two constant loads followed by the payload ops, each
/// `x A, A, B`. `A` and `B` are dead locals where available.
pub fn inject_sio(
    class_name: &str,
    method: &SmaliMethod,
    payload: &[&str],
    constants: [i32; 2],
) -> Result<Injected, SkipReason> {
    let fr = frame(method)?;
    let (regs, scratch) = allocate(&fr, 2)?;
    let (a, b) = (regs[0], regs[1]);
    let mut text = vec![
        format!("{INDENT}const v{a}, {}", fmt_const(constants[0])),
        format!("{INDENT}const v{b}, {}", fmt_const(constants[1])),
    ];
    text.extend(
        payload
            .iter()
            .map(|x| format!("{INDENT}{x} v{a}, v{a}, v{b}")),
    );
    Ok(place_at_entry(class_name, method, &text, &fr, scratch))
}

/// Impossible-if attack: `const G, 0x1; if-eqz G, :L; x G, S1, S2 ...; :L`.
/// The sources are the first two int arguments when present, otherwise the
/// guard itself.
pub fn inject_imi(
    class_name: &str,
    method: &SmaliMethod,
    payload: &[&str],
) -> Result<Injected, SkipReason> {
    let fr = frame(method)?;
    let (regs, scratch) = allocate(&fr, 1)?;
    let g = regs[0];
    let (s1, s2) = match fr.int_args.as_slice() {
        [x, y, ..] => (*x, *y),
        [x] => (*x, g),
        [] => (g, g),
    };
    let label = fresh_label(method, "impossible");
    let mut text = vec![
        format!("{INDENT}const v{g}, 0x1"),
        format!("{INDENT}if-eqz v{g}, :{label}"),
    ];
    text.extend(
        payload
            .iter()
            .map(|x| format!("{INDENT}    {x} v{g}, v{s1}, v{s2}")),
    );
    text.push(format!("{INDENT}:{label}"));
    Ok(place_at_entry(class_name, method, &text, &fr, scratch))
}

fn fresh_label(method: &SmaliMethod, base: &str) -> String {
    let existing: BTreeSet<&str> = method.lines.iter().filter_map(|l| l.label_name()).collect();
    if !existing.contains(base) {
        return base.to_string();
    }
    (1..)
        .map(|i| format!("{base}_{i}"))
        .find(|c| !existing.contains(c.as_str()))
        .expect("unbounded label space")
}

/// Injects one method according to a variant.
pub fn inject_method(
    class_name: &str,
    method: &SmaliMethod,
    variant: &AttackVariant,
    constants: [i32; 2],
) -> Result<Injected, SkipReason> {
    let payload: Vec<&str> = variant.payload_opcodes.iter().map(String::as_str).collect();
    match variant.kind {
        AttackKind::SimpleNop => inject_simple_nop(class_name, method, variant.nop_count),
        AttackKind::Sio => inject_sio(class_name, method, &payload, constants),
        AttackKind::Imi => inject_imi(class_name, method, &payload),
    }
}

/// Removes an injection and undoes register renumbering.
pub fn strip_injection(
    modified: &SmaliMethod,
    site: &InjectionSite,
    added_registers: u32,
) -> SmaliMethod {
    let mut out = modified.clone();
    for [start, end] in site.injected_line_spans.iter().rev() {
        out.lines.drain(*start..*end);
    }
    if added_registers > 0 {
        let total = out.registers_declared.unwrap_or(0);
        let locals = out.local_registers().unwrap_or(0) - added_registers;
        let new_to_host = move |n: u32| if n < locals { n } else { n - added_registers };
        out.lines = out
            .lines
            .iter()
            .map(|l| rename_line(l, &new_to_host))
            .collect();
        out.set_register_total(total - added_registers);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub app: App,
    pub manifest: InjectionManifest,
    pub skipped: Vec<SkipRecord>,
    /// `(class_index, method_index)` of each site, parallel to the manifest.
    pub locations: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InjectError {
    #[error("invalid attack variant: {0}")]
    InvalidVariant(String),
    #[error("empty manifest: no method was injected")]
    EmptyManifest { skipped: Vec<SkipRecord> },
}

/// Applies a plan to every selected method of an app.
pub fn apply_attack(app: &App, plan: &InjectionPlan) -> Result<AttackOutcome, InjectError> {
    plan.variant
        .validate()
        .map_err(InjectError::InvalidVariant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let sel = &plan.method_selector;
    let starts: Option<Vec<((usize, usize), usize)>> = sel.horizon.map(|_| {
        let (_, spans) = method_layout(app, &OpcodeTable::dalvik());
        spans
            .iter()
            .map(|s| ((s.class_index, s.method_index), s.start))
            .collect()
    });

    let mut out = app.clone();
    let mut manifest = InjectionManifest::new(app.id.clone());
    let mut skipped = Vec::new();
    let mut locations = Vec::new();
    for ci in app.sorted_class_indices() {
        let class = &app.classes[ci];
        for (mi, method) in class.methods.iter().enumerate() {
            let id = method.ref_id(&class.class_name);
            let selected = sel.names.as_ref().is_none_or(|n| n.contains(&method.name))
                && sel
                    .max_registers
                    .is_none_or(|cap| method.registers_declared.is_some_and(|r| r <= cap));
            if !selected {
                skipped.push(SkipRecord {
                    method: id,
                    reason: SkipReason::NotSelected,
                });
                continue;
            }
            if let (Some(h), Some(starts)) = (sel.horizon, &starts) {
                let within = starts.iter().any(|(loc, s)| *loc == (ci, mi) && *s < h);
                if !within {
                    let reason = if method.has_body() {
                        SkipReason::OutsideHorizon
                    } else {
                        SkipReason::NoBody
                    };
                    skipped.push(SkipRecord { method: id, reason });
                    continue;
                }
            }
            let constants = [rng.gen_range(1..0x80), rng.gen_range(1..0x80)];
            match inject_method(&class.class_name, method, &plan.variant, constants) {
                Ok(inj) => {
                    out.classes[ci].methods[mi] = inj.method;
                    manifest.sites.push(inj.site);
                    locations.push((ci, mi));
                }
                Err(reason) => skipped.push(SkipRecord { method: id, reason }),
            }
        }
    }
    if manifest.is_empty() {
        return Err(InjectError::EmptyManifest { skipped });
    }
    Ok(AttackOutcome {
        app: out,
        manifest,
        skipped,
        locations,
    })
}

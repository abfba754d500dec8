//! Line-oriented Smali model.
//!
//! A Smali file is read one line at a time and every line is kept verbatim, so
//! serialization is a plain join of the raw text. Each line is tagged with a
//! [`LineKind`]; instruction lines additionally carry their mnemonic, operand
//! tokens and the registers they read and write.
//!
//! Only [`LineKind::Instruction`] lines count toward a method's size. Labels,
//! directives, comments and data-block payload never do.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::SmaliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LineKind {
    Blank,
    Comment,
    Directive,
    Label,
    Instruction,
    /// Body of a data block (`.annotation`, `.array-data`, `.packed-switch`,
    /// `.sparse-switch`, `.subannotation`) that is neither a directive nor code.
    Payload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmaliLine {
    pub raw: String,
    pub kind: LineKind,
    pub opcode: Option<String>,
    pub operands: Vec<String>,
    pub registers_read: BTreeSet<String>,
    pub registers_written: BTreeSet<String>,
}

impl SmaliLine {
    /// Classifies a single line outside of any data block.
    pub fn parse(raw: &str) -> Self {
        let trimmed = raw.trim_start();
        let kind = match trimmed.chars().next() {
            None => LineKind::Blank,
            Some('#') => LineKind::Comment,
            Some('.') => LineKind::Directive,
            Some(':') => LineKind::Label,
            Some(_) => LineKind::Instruction,
        };
        if kind == LineKind::Instruction {
            Self::instruction_from(raw)
        } else {
            Self::bare(raw, kind)
        }
    }

    fn bare(raw: &str, kind: LineKind) -> Self {
        SmaliLine {
            raw: raw.to_string(),
            kind,
            opcode: None,
            operands: Vec::new(),
            registers_read: BTreeSet::new(),
            registers_written: BTreeSet::new(),
        }
    }

    fn payload(raw: &str) -> Self {
        let trimmed = raw.trim_start();
        let kind = match trimmed.chars().next() {
            None => LineKind::Blank,
            Some('#') => LineKind::Comment,
            Some('.') => LineKind::Directive,
            _ => LineKind::Payload,
        };
        Self::bare(raw, kind)
    }

    fn instruction_from(raw: &str) -> Self {
        let code = strip_comment(raw.trim());
        let (opcode, rest) = match code.find(char::is_whitespace) {
            Some(idx) => (&code[..idx], code[idx..].trim()),
            None => (code, ""),
        };
        let operands = split_operands(rest);
        let registers = operand_registers(&operands);
        let (registers_read, registers_written) = register_effects(opcode, &registers);
        SmaliLine {
            raw: raw.to_string(),
            kind: LineKind::Instruction,
            opcode: Some(opcode.to_string()),
            operands,
            registers_read,
            registers_written,
        }
    }

    /// Builds an instruction line with the given indentation.
    pub fn instruction(indent: &str, text: &str) -> Self {
        Self::parse(&format!("{indent}{text}"))
    }

    pub fn is_instruction(&self) -> bool {
        self.kind == LineKind::Instruction
    }

    pub fn opcode(&self) -> Option<&str> {
        self.opcode.as_deref()
    }

    /// Name of the label defined by this line, without the leading colon.
    pub fn label_name(&self) -> Option<&str> {
        if self.kind != LineKind::Label {
            return None;
        }
        let t = strip_comment(self.raw.trim());
        Some(t.trim_start_matches(':').trim())
    }

    /// Label targeted by a branch or goto, without the leading colon.
    pub fn branch_target(&self) -> Option<&str> {
        let op = self.opcode()?;
        if !(is_conditional_branch(op) || is_goto(op)) {
            return None;
        }
        self.operands
            .iter()
            .rev()
            .find(|o| o.starts_with(':'))
            .map(|o| o.trim_start_matches(':'))
    }

    /// Every register name touched by the line.
    pub fn registers(&self) -> impl Iterator<Item = &String> {
        self.registers_read.union(&self.registers_written)
    }

    pub fn indent(&self) -> &str {
        let len = self.raw.len() - self.raw.trim_start().len();
        &self.raw[..len]
    }

    fn directive_name(&self) -> Option<&str> {
        if self.kind != LineKind::Directive {
            return None;
        }
        self.raw.split_whitespace().next()
    }
}

impl fmt::Display for SmaliLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

pub fn is_conditional_branch(op: &str) -> bool {
    op.starts_with("if-")
}

pub fn is_goto(op: &str) -> bool {
    op == "goto" || op.starts_with("goto/")
}

pub fn is_switch(op: &str) -> bool {
    op == "packed-switch" || op == "sparse-switch"
}

/// Removes a trailing `#` comment that is not inside a string literal.
fn strip_comment(s: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if in_str => escaped = true,
            '"' => in_str = !in_str,
            '#' if !in_str => return s[..i].trim_end(),
            _ => {}
        }
    }
    s
}

/// Splits operands on top-level commas, keeping `{...}` groups and string
/// literals intact.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for c in s.chars() {
        if in_str {
            cur.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_str = true;
                cur.push(c);
            }
            '{' => {
                depth += 1;
                cur.push(c);
            }
            '}' => {
                depth = depth.saturating_sub(1);
                cur.push(c);
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

pub(crate) fn parse_register(tok: &str) -> Option<(char, u32)> {
    let mut chars = tok.chars();
    let prefix = chars.next()?;
    if prefix != 'v' && prefix != 'p' {
        return None;
    }
    let digits = chars.as_str();
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().map(|n| (prefix, n))
}

/// Register operands in source order; brace lists and `{vA .. vB}` ranges are
/// expanded.
fn operand_registers(operands: &[String]) -> Vec<String> {
    let mut regs = Vec::new();
    for op in operands {
        if let Some(inner) = op.strip_prefix('{').and_then(|o| o.strip_suffix('}')) {
            if let Some((lo, hi)) = inner.split_once("..") {
                if let (Some((pl, l)), Some((ph, h))) =
                    (parse_register(lo.trim()), parse_register(hi.trim()))
                {
                    if pl == ph && l <= h {
                        regs.extend((l..=h).map(|n| format!("{pl}{n}")));
                    }
                }
            } else {
                regs.extend(
                    inner
                        .split(',')
                        .map(str::trim)
                        .filter(|t| parse_register(t).is_some())
                        .map(str::to_string),
                );
            }
        } else if parse_register(op).is_some() {
            regs.push(op.clone());
        }
    }
    regs
}

const READ_ONLY_PREFIXES: &[&str] = &[
    "if-",
    "aput",
    "iput",
    "sput",
    "return",
    "throw",
    "monitor-",
    "invoke",
    "filled-new-array",
    "fill-array-data",
    "packed-switch",
    "sparse-switch",
    "goto",
    "nop",
];

fn register_effects(opcode: &str, regs: &[String]) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut read = BTreeSet::new();
    let mut written = BTreeSet::new();
    let Some((first, rest)) = regs.split_first() else {
        return (read, written);
    };
    if READ_ONLY_PREFIXES.iter().any(|p| opcode.starts_with(p)) {
        read.extend(regs.iter().cloned());
    } else if opcode.ends_with("/2addr") || opcode == "check-cast" {
        read.insert(first.clone());
        written.insert(first.clone());
        read.extend(rest.iter().cloned());
    } else {
        written.insert(first.clone());
        read.extend(rest.iter().cloned());
    }
    (read, written)
}

/// Number of argument registers implied by a method descriptor; `this` is
/// included for instance methods.
pub fn parameter_registers(descriptor: &str, is_static: bool) -> Option<u32> {
    let types = parameter_types(descriptor)?;
    let words: u32 = types
        .iter()
        .map(|t| if t == "J" || t == "D" { 2 } else { 1 })
        .sum();
    Some(words + u32::from(!is_static))
}

/// Parameter type descriptors in order, e.g. `(ILjava/lang/String;[J)V` gives
/// `["I", "Ljava/lang/String;", "[J"]`.
pub fn parameter_types(descriptor: &str) -> Option<Vec<String>> {
    let inner = descriptor.strip_prefix('(')?;
    let end = inner.find(')')?;
    let mut params = Vec::new();
    let bytes = &inner.as_bytes()[..end];
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        while i < bytes.len() && bytes[i] == b'[' {
            i += 1;
        }
        match bytes.get(i)? {
            b'L' => {
                let semi = inner[i..end].find(';')?;
                i += semi + 1;
            }
            b'Z' | b'B' | b'S' | b'C' | b'I' | b'J' | b'F' | b'D' => i += 1,
            _ => return None,
        }
        params.push(inner[start..i].to_string());
    }
    Some(params)
}

/// Return type descriptor, ignoring any stray trailing `;` after a primitive.
pub fn return_type(descriptor: &str) -> Option<&str> {
    let (_, ret) = descriptor.split_once(')')?;
    if ret.starts_with('L') || ret.starts_with('[') {
        Some(ret)
    } else {
        Some(ret.trim_end_matches(';'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmaliMethod {
    /// Lines between the previous member and this method's `.method` line.
    pub leading: Vec<SmaliLine>,
    pub header: SmaliLine,
    pub name: String,
    pub descriptor: String,
    pub access_flags: Vec<String>,
    /// Total register count, from `.registers` or derived from `.locals`.
    pub registers_declared: Option<u32>,
    pub lines: Vec<SmaliLine>,
    pub footer: SmaliLine,
    /// 1-based line number of the `.method` line in the source file.
    pub start_line: usize,
}

impl SmaliMethod {
    pub fn instruction_count(&self) -> usize {
        self.lines.iter().filter(|l| l.is_instruction()).count()
    }

    pub fn instructions(&self) -> impl Iterator<Item = &SmaliLine> {
        self.lines.iter().filter(|l| l.is_instruction())
    }

    pub fn is_static(&self) -> bool {
        self.access_flags.iter().any(|f| f == "static")
    }

    pub fn has_body(&self) -> bool {
        !self
            .access_flags
            .iter()
            .any(|f| f == "abstract" || f == "native")
            && self.instruction_count() > 0
    }

    pub fn parameter_registers(&self) -> Option<u32> {
        parameter_registers(&self.descriptor, self.is_static())
    }

    /// Registers that are not argument registers.
    pub fn local_registers(&self) -> Option<u32> {
        self.registers_declared?
            .checked_sub(self.parameter_registers()?)
    }

    /// Maps `vN`/`pN` to the underlying frame index.
    pub fn register_index(&self, name: &str) -> Option<u32> {
        match parse_register(name)? {
            ('v', n) => Some(n),
            (_, n) => Some(self.local_registers()? + n),
        }
    }

    /// Frame indices of every register referenced by an instruction line.
    pub fn referenced_registers(&self) -> BTreeSet<u32> {
        self.instructions()
            .flat_map(|l| l.registers())
            .filter_map(|r| self.register_index(r))
            .collect()
    }

    /// Index into `lines` of the `.registers`/`.locals` directive, if any.
    pub fn register_directive(&self) -> Option<usize> {
        self.lines
            .iter()
            .position(|l| matches!(l.directive_name(), Some(".registers" | ".locals")))
    }

    pub fn ref_id(&self, class_name: &str) -> String {
        format!("{class_name}->{}{}", self.name, self.descriptor)
    }

    fn from_header(header: SmaliLine, start_line: usize) -> Result<Self, SmaliError> {
        let mut tokens: Vec<&str> = strip_comment(header.raw.trim())
            .split_whitespace()
            .skip(1)
            .collect();
        let sig = tokens
            .pop()
            .ok_or(SmaliError::MalformedMethod { line: start_line })?;
        let paren = sig
            .find('(')
            .ok_or(SmaliError::MalformedMethod { line: start_line })?;
        Ok(SmaliMethod {
            leading: Vec::new(),
            name: sig[..paren].to_string(),
            descriptor: sig[paren..].to_string(),
            access_flags: tokens.into_iter().map(str::to_string).collect(),
            header,
            registers_declared: None,
            lines: Vec::new(),
            footer: SmaliLine::parse(".end method"),
            start_line,
        })
    }

    fn resolve_register_directive(&mut self) {
        let Some(idx) = self.register_directive() else {
            return;
        };
        let line = &self.lines[idx];
        let mut parts = strip_comment(line.raw.trim()).split_whitespace();
        let directive = parts.next();
        let Some(count) = parts.next().and_then(|n| n.parse::<u32>().ok()) else {
            return;
        };
        self.registers_declared = match directive {
            Some(".locals") => self.parameter_registers().map(|p| count + p),
            _ => Some(count),
        };
    }

    /// Rewrites the register-count directive so the frame holds `total`
    /// registers, preserving the directive flavour and indentation.
    pub fn set_register_total(&mut self, total: u32) -> bool {
        let Some(idx) = self.register_directive() else {
            return false;
        };
        let line = &self.lines[idx];
        let indent = line.indent().to_string();
        let is_locals = line.directive_name() == Some(".locals");
        let comment = line
            .raw
            .find('#')
            .map(|i| format!("      {}", &line.raw[i..]))
            .unwrap_or_default();
        let text = if is_locals {
            let Some(params) = self.parameter_registers() else {
                return false;
            };
            format!("{indent}.locals {}{comment}", total - params)
        } else {
            format!("{indent}.registers {total}{comment}")
        };
        self.lines[idx] = SmaliLine::parse(&text);
        self.registers_declared = Some(total);
        true
    }

    fn write_to(&self, out: &mut String) {
        for line in self
            .leading
            .iter()
            .chain(std::iter::once(&self.header))
            .chain(&self.lines)
            .chain(std::iter::once(&self.footer))
        {
            out.push_str(&line.raw);
            out.push('\n');
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmaliClass {
    pub class_name: String,
    pub super_name: String,
    pub preamble: Vec<SmaliLine>,
    pub methods: Vec<SmaliMethod>,
    /// Lines after the last method.
    pub trailer: Vec<SmaliLine>,
}

impl SmaliClass {
    pub fn method(&self, name: &str) -> Option<&SmaliMethod> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn method_mut(&mut self, name: &str) -> Option<&mut SmaliMethod> {
        self.methods.iter_mut().find(|m| m.name == name)
    }

    pub fn line_count(&self) -> usize {
        self.preamble.len()
            + self.trailer.len()
            + self
                .methods
                .iter()
                .map(|m| m.leading.len() + m.lines.len() + 2)
                .sum::<usize>()
    }
}

const BLOCK_DIRECTIVES: &[(&str, &str)] = &[
    (".annotation", ".end annotation"),
    (".subannotation", ".end subannotation"),
    (".array-data", ".end array-data"),
    (".packed-switch", ".end packed-switch"),
    (".sparse-switch", ".end sparse-switch"),
];

/// Parses one Smali class file.
///
/// Every input line ends up in exactly one [`SmaliLine`], in order. A missing
/// `.class` directive or an unterminated method is an error.
pub fn parse_class(text: &str) -> Result<SmaliClass, SmaliError> {
    let mut class_name = None;
    let mut super_name = String::new();
    let mut pending: Vec<SmaliLine> = Vec::new();
    let mut preamble: Option<Vec<SmaliLine>> = None;
    let mut methods: Vec<SmaliMethod> = Vec::new();
    let mut current: Option<SmaliMethod> = None;
    let mut block_end: Option<&'static str> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);

        if let Some(end) = block_end {
            let line = SmaliLine::payload(raw);
            if strip_comment(line.raw.trim()) == end {
                block_end = None;
            }
            match current.as_mut() {
                Some(m) => m.lines.push(line),
                None => pending.push(line),
            }
            continue;
        }

        let line = SmaliLine::parse(raw);
        match line.directive_name() {
            Some(".method") => {
                if let Some(open) = &current {
                    return Err(SmaliError::UnterminatedMethod {
                        line: open.start_line,
                        name: open.name.clone(),
                    });
                }
                let mut method = SmaliMethod::from_header(line, lineno)?;
                if preamble.is_none() {
                    preamble = Some(std::mem::take(&mut pending));
                } else {
                    method.leading = std::mem::take(&mut pending);
                }
                current = Some(method);
                continue;
            }
            Some(".end") if line.raw.split_whitespace().nth(1) == Some("method") => {
                let mut method = current
                    .take()
                    .ok_or(SmaliError::StrayEndMethod { line: lineno })?;
                method.footer = line;
                method.resolve_register_directive();
                methods.push(method);
                continue;
            }
            Some(".class") => {
                if let Some(name) = strip_comment(line.raw.trim()).split_whitespace().last() {
                    class_name.get_or_insert_with(|| name.to_string());
                }
            }
            Some(".super") => {
                if let Some(name) = strip_comment(line.raw.trim()).split_whitespace().nth(1) {
                    super_name = name.to_string();
                }
            }
            Some(name) => {
                block_end = BLOCK_DIRECTIVES
                    .iter()
                    .find(|(open, _)| *open == name)
                    .map(|(_, end)| *end);
            }
            None => {}
        }
        match current.as_mut() {
            Some(m) => m.lines.push(line),
            None => pending.push(line),
        }
    }

    if let Some(open) = current {
        return Err(SmaliError::UnterminatedMethod {
            line: open.start_line,
            name: open.name,
        });
    }
    let class_name = class_name.ok_or(SmaliError::MissingClass)?;
    let (preamble, trailer) = match preamble {
        Some(p) => (p, pending),
        None => (pending, Vec::new()),
    };
    Ok(SmaliClass {
        class_name,
        super_name,
        preamble,
        methods,
        trailer,
    })
}

pub fn serialize_class(class: &SmaliClass) -> String {
    let mut out = String::new();
    for line in &class.preamble {
        out.push_str(&line.raw);
        out.push('\n');
    }
    for method in &class.methods {
        method.write_to(&mut out);
    }
    for line in &class.trailer {
        out.push_str(&line.raw);
        out.push('\n');
    }
    out
}

/// One app: every class parsed from a directory tree of `.smali` files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct App {
    pub id: String,
    pub classes: Vec<SmaliClass>,
}

impl App {
    pub fn new(id: impl Into<String>, classes: Vec<SmaliClass>) -> Self {
        App {
            id: id.into(),
            classes,
        }
    }

    /// Classes sorted by name, the order used for sequence extraction.
    pub fn sorted_class_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.classes.len()).collect();
        idx.sort_by(|&a, &b| self.classes[a].class_name.cmp(&self.classes[b].class_name));
        idx
    }

    pub fn method_count(&self) -> usize {
        self.classes.iter().map(|c| c.methods.len()).sum()
    }
}

/// Relative output path for a class, following apktool's layout.
pub fn class_file_path(class_name: &str) -> PathBuf {
    let inner = class_name
        .strip_prefix('L')
        .and_then(|c| c.strip_suffix(';'))
        .unwrap_or(class_name);
    PathBuf::from(format!("{inner}.smali"))
}

pub fn load_app(dir: &Path) -> Result<App, SmaliError> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|e| e == "smali"))
        .collect();
    files.sort();
    let mut classes = Vec::with_capacity(files.len());
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|source| SmaliError::Io {
            path: path.clone(),
            source,
        })?;
        classes.push(parse_class(&text).map_err(|e| SmaliError::InFile {
            path: path.clone(),
            source: Box::new(e),
        })?);
    }
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(App::new(id, classes))
}

pub fn write_app(app: &App, dir: &Path) -> Result<(), SmaliError> {
    for class in &app.classes {
        let path = dir.join(class_file_path(&class.class_name));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| SmaliError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(&path, serialize_class(class))
            .map_err(|source| SmaliError::Io { path, source })?;
    }
    Ok(())
}

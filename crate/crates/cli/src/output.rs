//! JSON and CSV emission. CSV files start with a `# nopvis <table> v1`
//! comment, and every CSV written to disk gets a JSON mirror next to it.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use clap::ValueEnum;

use crate::{Failure, Global};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

pub struct Table {
    name: &'static str,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    notes: Vec<String>,
}

impl Table {
    pub fn new(name: &'static str, header: &[&str]) -> Self {
        Table {
            name,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn note(&mut self, note: String) {
        self.notes.push(note);
    }

    pub fn to_csv(&self) -> anyhow::Result<String> {
        let mut buf = Vec::new();
        writeln!(buf, "# nopvis {} v{SCHEMA_VERSION}", self.name)?;
        for n in &self.notes {
            writeln!(buf, "# {n}")?;
        }
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let buf = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(String::from_utf8(buf)?)
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn emit(g: &Global, doc: &serde_json::Value, table: &Table) -> Result<(), Failure> {
    let json_text = serde_json::to_string_pretty(doc).expect("serializable") + "\n";
    let text = match g.format {
        Format::Json => json_text.clone(),
        Format::Csv => table.to_csv()?,
    };
    match &g.out {
        None => print!("{text}"),
        Some(path) => {
            write(path, &text)?;
            if g.format == Format::Csv {
                write(&path.with_extension("json"), &json_text)?;
            }
        }
    }
    Ok(())
}

//! Result emission: human-readable text or JSON lines with stable field
//! names. All rows are fully built before printing so ordering can be made
//! deterministic regardless of how they were produced.

use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Format::Text),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(format!("unknown format '{}' (expected text|jsonl)", other)),
        }
    }
}

/// One emitted result row: a text rendering and a JSON record sharing the
/// same data.
pub struct Row {
    pub text: String,
    pub record: serde_json::Value,
}

pub struct Sink {
    format: Format,
    rows: Vec<Row>,
    /// Free-form lines shown only in text mode (headers, separators).
    notes: Vec<(usize, String)>,
}

impl Sink {
    pub fn new(format: Format) -> Self {
        Sink { format, rows: Vec::new(), notes: Vec::new() }
    }

    pub fn row(&mut self, text: String, record: serde_json::Value) {
        self.rows.push(Row { text, record });
    }

    /// Text-only line, anchored before the next row.
    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push((self.rows.len(), text.into()));
    }

    /// Write everything out. JSON rows are one object per line; `Map` is
    /// ordered, so repeated runs are byte-identical.
    pub fn flush(self, w: &mut impl Write) -> std::io::Result<()> {
        match self.format {
            Format::Text => {
                let mut notes = self.notes.iter().peekable();
                for (i, row) in self.rows.iter().enumerate() {
                    while notes.peek().is_some_and(|(at, _)| *at == i) {
                        writeln!(w, "{}", notes.next().unwrap().1)?;
                    }
                    writeln!(w, "{}", row.text)?;
                }
                for (_, n) in notes {
                    writeln!(w, "{}", n)?;
                }
            }
            Format::Jsonl => {
                for row in &self.rows {
                    writeln!(w, "{}", row.record)?;
                }
            }
        }
        Ok(())
    }
}

/// Pointers and other 64-bit quantities rendered as fixed-width hex for
/// stable, alignment-friendly output.
pub fn hex64(v: u64) -> String {
    format!("{:#018x}", v)
}

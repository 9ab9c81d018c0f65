//! Versioned flat-table text checkpoints.
//!
//! ```text
//! # comment lines are ignored
//! format <kind> v1
//! width <values per row>
//! rows <n>
//! <question> <step> <history> [<token>] <v_0> ... <v_{width-1}>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! store followed by load reproduces every value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::envsim::ContextKey;
use crate::error::{Error, Result};

pub(crate) struct Table {
    pub width: usize,
    pub rows: Vec<(Vec<u64>, Vec<f64>)>,
}

pub(crate) fn render(kind: &str, key_len: usize, table: &Table) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format {kind} v1");
    let _ = writeln!(out, "width {}", table.width);
    let _ = writeln!(out, "rows {}", table.rows.len());
    for (key, values) in &table.rows {
        debug_assert_eq!(key.len(), key_len);
        let mut fields: Vec<String> = key.iter().map(u64::to_string).collect();
        fields.extend(values.iter().map(|v| format!("{v:?}")));
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

pub(crate) fn parse(kind: &str, key_len: usize, text: &str, path: &Path) -> Result<Table> {
    let perr = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));

    let mut header = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| perr(format!("missing `{name}` header")))?;
        line.strip_prefix(name)
            .map(|rest| rest.trim().to_string())
            .ok_or_else(|| perr(format!("expected `{name}`, found `{line}`")))
    };
    let format = header("format")?;
    if format != format!("{kind} v1") {
        return Err(perr(format!("unsupported format `{format}`")));
    }
    let width: usize = header("width")?
        .parse()
        .map_err(|e| perr(format!("bad width: {e}")))?;
    let n_rows: usize = header("rows")?
        .parse()
        .map_err(|e| perr(format!("bad row count: {e}")))?;

    let mut rows = Vec::with_capacity(n_rows);
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != key_len + width {
            return Err(perr(format!(
                "row has {} fields, expected {}",
                fields.len(),
                key_len + width
            )));
        }
        let key = fields[..key_len]
            .iter()
            .map(|f| f.parse::<u64>().map_err(|e| perr(format!("bad key `{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let values = fields[key_len..]
            .iter()
            .map(|f| {
                let v = f
                    .parse::<f64>()
                    .map_err(|e| perr(format!("bad value `{f}`: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(perr(format!("non-finite value `{f}`")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((key, values));
    }
    if rows.len() != n_rows {
        return Err(perr(format!(
            "header declares {n_rows} rows, found {}",
            rows.len()
        )));
    }
    Ok(Table { width, rows })
}

pub(crate) fn context_fields(ctx: &ContextKey) -> [u64; 3] {
    [u64::from(ctx.question), u64::from(ctx.step), ctx.history]
}

pub(crate) fn context_from_fields(f: &[u64]) -> Option<ContextKey> {
    Some(ContextKey {
        question: u32::try_from(f[0]).ok()?,
        step: u32::try_from(f[1]).ok()?,
        history: f[2],
    })
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

//! Restricted MPS import: binary columns with `N`, `L`, `G` and `E` rows.
//!
//! `G` rows are negated into `<=` form and `E` rows are split into a `<=`
//! and a negated `<=` row. `BOUNDS` may only restate the 0-1 box (`BV`,
//! `LO 0`, `UP 1`). `RANGES` is rejected.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{IpInstance, Sense, SparseRow};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RowKind {
    Objective,
    Le,
    Ge,
    Eq,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    ObjSense,
    Rows,
    Columns,
    Rhs,
    Bounds,
}

pub fn read_mps(path: impl AsRef<Path>) -> Result<IpInstance> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mps(&text)
}

pub fn parse_mps(text: &str) -> Result<IpInstance> {
    let mut name = String::from("mps");
    let mut sense = Sense::Minimize;
    let mut section = Section::None;

    let mut row_index: HashMap<String, usize> = HashMap::new();
    let mut row_kinds: Vec<RowKind> = Vec::new();
    let mut objective_row: Option<usize> = None;
    let mut col_index: HashMap<String, usize> = HashMap::new();
    let mut coefs: Vec<HashMap<usize, f64>> = Vec::new();
    let mut c: Vec<f64> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut seen_end = false;

    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        if raw.trim().is_empty() || raw.starts_with('*') {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        let header = !raw.starts_with(' ') && !raw.starts_with('\t');
        if header {
            match tokens[0] {
                "NAME" => {
                    name = tokens.get(1).map_or_else(String::new, |s| s.to_string());
                    section = Section::None;
                }
                "OBJSENSE" => {
                    section = Section::ObjSense;
                    if let Some(s) = tokens.get(1) {
                        sense = parse_sense(ln, s)?;
                    }
                }
                "ROWS" => section = Section::Rows,
                "COLUMNS" => section = Section::Columns,
                "RHS" => section = Section::Rhs,
                "BOUNDS" => section = Section::Bounds,
                "RANGES" => return Err(Error::parse(ln, "RANGES section is not supported")),
                "ENDATA" => {
                    seen_end = true;
                    break;
                }
                other => return Err(Error::parse(ln, format!("unknown section `{other}`"))),
            }
            continue;
        }

        match section {
            Section::None => return Err(Error::parse(ln, "data line outside of a section")),
            Section::ObjSense => sense = parse_sense(ln, tokens[0])?,
            Section::Rows => {
                if tokens.len() != 2 {
                    return Err(Error::parse(ln, "expected `<type> <row name>`"));
                }
                let kind = match tokens[0] {
                    "N" => RowKind::Objective,
                    "L" => RowKind::Le,
                    "G" => RowKind::Ge,
                    "E" => RowKind::Eq,
                    other => return Err(Error::parse(ln, format!("unknown row type `{other}`"))),
                };
                if kind == RowKind::Objective && objective_row.is_some() {
                    // extra free rows carry no constraint information
                    continue;
                }
                let idx = row_kinds.len();
                if row_index.insert(tokens[1].to_string(), idx).is_some() {
                    return Err(Error::parse(ln, format!("duplicate row `{}`", tokens[1])));
                }
                if kind == RowKind::Objective {
                    objective_row = Some(idx);
                }
                row_kinds.push(kind);
                coefs.push(HashMap::new());
                rhs.push(0.0);
            }
            Section::Columns => {
                if tokens.contains(&"'MARKER'") {
                    continue;
                }
                if tokens.len() != 3 && tokens.len() != 5 {
                    return Err(Error::parse(ln, "expected `<col> <row> <value> [<row> <value>]`"));
                }
                let next = col_index.len();
                let col = *col_index.entry(tokens[0].to_string()).or_insert(next);
                if col == c.len() {
                    c.push(0.0);
                }
                for pair in tokens[1..].chunks(2) {
                    let row = *row_index
                        .get(pair[0])
                        .ok_or_else(|| Error::parse(ln, format!("unknown row `{}`", pair[0])))?;
                    let value = parse_number(ln, pair[1])?;
                    if Some(row) == objective_row {
                        c[col] += value;
                    } else {
                        *coefs[row].entry(col).or_insert(0.0) += value;
                    }
                }
            }
            Section::Rhs => {
                if tokens.len() != 3 && tokens.len() != 5 {
                    return Err(Error::parse(ln, "expected `<set> <row> <value> [<row> <value>]`"));
                }
                for pair in tokens[1..].chunks(2) {
                    let row = *row_index
                        .get(pair[0])
                        .ok_or_else(|| Error::parse(ln, format!("unknown row `{}`", pair[0])))?;
                    if Some(row) != objective_row {
                        rhs[row] = parse_number(ln, pair[1])?;
                    }
                }
            }
            Section::Bounds => {
                let kind = tokens[0];
                let col = tokens
                    .get(2)
                    .and_then(|n| col_index.get(*n))
                    .ok_or_else(|| Error::parse(ln, "bound on unknown column"))?;
                let value = tokens.get(3).map(|v| parse_number(ln, v)).transpose()?;
                let ok = match (kind, value) {
                    ("BV", _) => true,
                    ("LO", Some(v)) => v == 0.0,
                    ("UP", Some(v)) => v == 1.0,
                    _ => false,
                };
                if !ok {
                    return Err(Error::parse(
                        ln,
                        format!("bound `{kind}` on column {col} is not a 0-1 bound"),
                    ));
                }
            }
        }
    }
    if !seen_end {
        return Err(Error::parse(text.lines().count(), "missing ENDATA"));
    }
    if c.is_empty() {
        return Err(Error::parse(0, "no columns"));
    }

    let mut rows: Vec<SparseRow> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    for (k, kind) in row_kinds.iter().enumerate() {
        let mut row: SparseRow = coefs[k]
            .iter()
            .filter(|(_, &a)| a != 0.0)
            .map(|(&j, &a)| (j, a))
            .collect();
        row.sort_by_key(|&(j, _)| j);
        let negated = || row.iter().map(|&(j, a)| (j, -a)).collect::<SparseRow>();
        let pieces: Vec<(SparseRow, f64)> = match kind {
            RowKind::Objective => continue,
            RowKind::Le => vec![(row.clone(), rhs[k])],
            RowKind::Ge => vec![(negated(), -rhs[k])],
            RowKind::Eq => vec![(row.clone(), rhs[k]), (negated(), -rhs[k])],
        };
        for (r, rb) in pieces {
            if r.is_empty() {
                if rb < 0.0 {
                    return Err(Error::InvalidInstance(format!(
                        "row {k} has no entries and is infeasible"
                    )));
                }
                continue;
            }
            rows.push(r);
            b.push(rb);
        }
    }
    IpInstance::new(name, c, rows, b, sense)
}

fn parse_number(ln: usize, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::parse(ln, format!("`{s}` is not a number")))
}

fn parse_sense(ln: usize, s: &str) -> Result<Sense> {
    match s {
        "MIN" | "MINIMIZE" => Ok(Sense::Minimize),
        "MAX" | "MAXIMIZE" => Ok(Sense::Maximize),
        other => Err(Error::parse(ln, format!("unknown objective sense `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_VAR: &str = "\
NAME          TINY
OBJSENSE
    MAX
ROWS
 N  obj
 L  cap
 G  cover
 E  link
COLUMNS
    MARKER                 'MARKER'                 'INTORG'
    x         obj       3.0        cap       2.0
    x         cover     1.0        link      1.0
    y         obj       2.0        cap       1.0
    y         cover     1.0        link     -1.0
    MARKER                 'MARKER'                 'INTEND'
RHS
    RHS       cap       2.0        cover     1.0
BOUNDS
 BV BND       x
 UP BND       y         1
ENDATA
";

    #[test]
    fn imports_hand_written_program() {
        let parsed = parse_mps(TWO_VAR).unwrap();
        let expected = IpInstance::new(
            "TINY",
            vec![3.0, 2.0],
            vec![
                vec![(0, 2.0), (1, 1.0)],
                vec![(0, -1.0), (1, -1.0)],
                vec![(0, 1.0), (1, -1.0)],
                vec![(0, -1.0), (1, 1.0)],
            ],
            vec![2.0, -1.0, 0.0, 0.0],
            Sense::Maximize,
        )
        .unwrap();
        assert_eq!(parsed, expected);
    }

    #[test]
    fn rejects_general_bounds() {
        let text = TWO_VAR.replace(" UP BND       y         1", " UP BND       y         5");
        assert!(matches!(parse_mps(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_unknown_row() {
        let text = TWO_VAR.replace("y         obj       2.0", "y         nope      2.0");
        assert!(parse_mps(&text).is_err());
    }
}

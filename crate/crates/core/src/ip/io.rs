use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{IpInstance, Sense, Solution, SparseRow};
use crate::error::{Error, Result};

pub const INSTANCE_HEADER: &str = "ipdiff-instance v1";
pub const SOLUTION_HEADER: &str = "ipdiff-solution v1";

pub fn format_bits(x: &Solution) -> String {
    x.bits().iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn parse_bits(s: &str) -> Option<Solution> {
    s.chars()
        .map(|ch| match ch {
            '0' => Some(false),
            '1' => Some(true),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()
        .map(Solution::new)
}

fn join_reals(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        // `{}` prints the shortest representation that parses back exactly
        write!(out, "{v}").unwrap();
    }
    out
}

impl IpInstance {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{INSTANCE_HEADER}").unwrap();
        writeln!(out, "name={}", self.name()).unwrap();
        writeln!(out, "sense={}", self.sense()).unwrap();
        writeln!(out, "n={}", self.n()).unwrap();
        writeln!(out, "m={}", self.m()).unwrap();
        writeln!(out, "c={}", join_reals(self.c())).unwrap();
        writeln!(out, "b={}", join_reals(self.b())).unwrap();
        for (k, row) in self.rows().iter().enumerate() {
            write!(out, "row {k}:").unwrap();
            for &(j, a) in row {
                write!(out, " {j}:{a}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<IpInstance> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (ln, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
        if header != INSTANCE_HEADER {
            return Err(Error::parse(ln, format!("expected header `{INSTANCE_HEADER}`")));
        }

        let mut field = |key: &str| -> Result<(usize, String)> {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(0, format!("missing field `{key}`")))?;
            let rest = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| Error::parse(ln, format!("expected `{key}=`")))?;
            Ok((ln, rest.to_string()))
        };

        let (_, name) = field("name")?;
        let (ln, sense) = field("sense")?;
        let sense = match sense.trim() {
            "min" => Sense::Minimize,
            "max" => Sense::Maximize,
            other => return Err(Error::parse(ln, format!("unknown sense `{other}`"))),
        };
        let (ln, n) = field("n")?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::parse(ln, format!("field n: `{n}` is not a count")))?;
        let (ln, m) = field("m")?;
        let m: usize = m
            .trim()
            .parse()
            .map_err(|_| Error::parse(ln, format!("field m: `{m}` is not a count")))?;
        let (ln, c) = field("c")?;
        let c = parse_reals(ln, "c", &c, n)?;
        let (ln, b) = field("b")?;
        let b = parse_reals(ln, "b", &b, m)?;

        let mut rows: Vec<SparseRow> = Vec::with_capacity(m);
        for (ln, line) in lines {
            let rest = line
                .strip_prefix("row ")
                .ok_or_else(|| Error::parse(ln, "expected `row <k>:`"))?;
            let (idx, entries) = rest
                .split_once(':')
                .ok_or_else(|| Error::parse(ln, "expected `row <k>:`"))?;
            let k: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::parse(ln, format!("bad row index `{idx}`")))?;
            if k != rows.len() {
                return Err(Error::parse(
                    ln,
                    format!("row {k} out of order, expected row {}", rows.len()),
                ));
            }
            let mut row = SparseRow::new();
            for tok in entries.split_whitespace() {
                let (j, a) = tok
                    .split_once(':')
                    .ok_or_else(|| Error::parse(ln, format!("bad entry `{tok}`")))?;
                let j: usize = j
                    .parse()
                    .map_err(|_| Error::parse(ln, format!("bad variable index `{j}`")))?;
                if j >= n {
                    return Err(Error::parse(
                        ln,
                        format!("row {k}: variable index {j} out of range (n = {n})"),
                    ));
                }
                let a: f64 = a
                    .parse()
                    .map_err(|_| Error::parse(ln, format!("bad coefficient `{a}`")))?;
                row.push((j, a));
            }
            rows.push(row);
        }
        if rows.len() != m {
            return Err(Error::parse(0, format!("expected {m} rows, found {}", rows.len())));
        }
        IpInstance::new(name, c, rows, b, sense)
    }
}

fn parse_reals(line: usize, key: &str, s: &str, expected: usize) -> Result<Vec<f64>> {
    let values = s
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::parse(line, format!("field {key}: `{tok}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(Error::parse(
            line,
            format!("field {key}: expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

pub fn read_instance(path: impl AsRef<Path>) -> Result<IpInstance> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    IpInstance::from_text(&text)
}

pub fn write_instance(inst: &IpInstance, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, inst.to_text()).map_err(|e| Error::io(path, e))
}

pub fn write_solution(x: &Solution, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format!("{SOLUTION_HEADER}\nn={}\nx={}\n", x.len(), format_bits(x));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_solution(path: impl AsRef<Path>) -> Result<Solution> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.first() != Some(&SOLUTION_HEADER) {
        return Err(Error::parse(1, format!("expected header `{SOLUTION_HEADER}`")));
    }
    let n: usize = lines
        .get(1)
        .and_then(|l| l.strip_prefix("n="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(2, "expected `n=<int>`"))?;
    let x = lines
        .get(2)
        .and_then(|l| l.strip_prefix("x="))
        .and_then(parse_bits)
        .ok_or_else(|| Error::parse(3, "expected `x=<bits>`"))?;
    if x.len() != n {
        return Err(Error::parse(3, format!("expected {n} bits, found {}", x.len())));
    }
    Ok(x)
}

//! `GPTGRAPH v1` text format.
//!
//! ```text
//! GPTGRAPH v1 d=<int> t=<int>
//! g <n> <m>
//! <n lines of d space-separated decimals>
//! e <i> <j>            (m lines)
//! y <t decimals>
//! ```
//!
//! Decimals are written with 17 significant digits, which round-trips every
//! finite `f64` exactly. `t=0` marks an unlabelled dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{GraphError, GraphSample, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "GPTGRAPH";
const VERSION: &str = "v1";

fn push_decimal(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

/// Serialises samples. All samples must share feature width and label arity.
pub fn format_graphs(samples: &[GraphSample]) -> Result<String> {
    let d = samples.first().map_or(0, GraphSample::feature_dim);
    let t = samples.first().map_or(0, GraphSample::label_arity);
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION} d={d} t={t}");
    for g in samples {
        if g.feature_dim() != d {
            return Err(GraphError::FeatureWidth {
                expected: d,
                got: g.feature_dim(),
            });
        }
        if g.label_arity() != t {
            return Err(GraphError::LabelArity {
                expected: t,
                got: g.label_arity(),
            });
        }
        let _ = writeln!(out, "g {} {}", g.n(), g.edges().len());
        for i in 0..g.n() {
            for (k, v) in g.features().row(i).iter().enumerate() {
                if k > 0 {
                    out.push(' ');
                }
                push_decimal(&mut out, *v);
            }
            out.push('\n');
        }
        for &(i, j) in g.edges() {
            let _ = writeln!(out, "e {i} {j}");
        }
        out.push('y');
        for v in g.label().unwrap_or(&[]) {
            out.push(' ');
            push_decimal(&mut out, *v);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_graph_file(path: impl AsRef<Path>, samples: &[GraphSample]) -> Result<()> {
    fs::write(path, format_graphs(samples)?)?;
    Ok(())
}

pub fn read_graph_file(path: impl AsRef<Path>) -> Result<Vec<GraphSample>> {
    parse_graphs(&fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        self.inner.next().map(|(i, l)| {
            self.last = i + 1;
            (i + 1, l.trim_end_matches('\r'))
        })
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next().ok_or_else(|| GraphError::Parse {
            line: self.last + 1,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_header_field(line: usize, token: Option<&str>, key: &str) -> Result<usize> {
    token
        .and_then(|t| t.strip_prefix(key))
        .and_then(|t| t.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(line, format!("header field `{key}=<int>` missing or malformed")))
}

fn parse_decimals(line: usize, tokens: &[&str], expected: usize) -> Result<Vec<f64>> {
    if tokens.len() != expected {
        return Err(parse_err(line, format!("expected {expected} values, found {}", tokens.len())));
    }
    tokens
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| parse_err(line, format!("`{t}` is not a decimal"))))
        .collect()
}

/// Parses a `GPTGRAPH v1` document.
pub fn parse_graphs(text: &str) -> Result<Vec<GraphSample>> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (ln, header) = lines.expect("header")?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(MAGIC) || tokens.next() != Some(VERSION) {
        return Err(parse_err(ln, format!("expected `{MAGIC} {VERSION} d=<int> t=<int>`")));
    }
    let d = parse_header_field(ln, tokens.next(), "d")?;
    let t = parse_header_field(ln, tokens.next(), "t")?;
    if tokens.next().is_some() {
        return Err(parse_err(ln, "trailing tokens in header"));
    }
    let mut samples = Vec::new();
    while let Some((ln, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let (n, m) = match tokens.as_slice() {
            ["g", n, m] => (
                n.parse::<usize>().map_err(|_| parse_err(ln, "bad node count"))?,
                m.parse::<usize>().map_err(|_| parse_err(ln, "bad edge count"))?,
            ),
            _ => return Err(parse_err(ln, "expected `g <n> <m>`")),
        };
        let mut features = Vec::with_capacity(n * d);
        for _ in 0..n {
            let (ln, row) = lines.expect("a feature row")?;
            let tokens: Vec<&str> = row.split_whitespace().collect();
            features.extend(parse_decimals(ln, &tokens, d)?);
        }
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let (ln, row) = lines.expect("an edge line")?;
            let (i, j) = match row.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["e", i, j] => (
                    i.parse::<usize>().map_err(|_| parse_err(ln, "bad edge endpoint"))?,
                    j.parse::<usize>().map_err(|_| parse_err(ln, "bad edge endpoint"))?,
                ),
                _ => return Err(parse_err(ln, "expected `e <i> <j>`")),
            };
            if i >= n || j >= n {
                return Err(GraphError::Validation {
                    line: ln,
                    msg: format!("edge ({i}, {j}) out of range for a {n}-node graph"),
                });
            }
            edges.push((i, j));
        }
        let (yl, yline) = lines.expect("a label line")?;
        let tokens: Vec<&str> = yline.split_whitespace().collect();
        if tokens.first() != Some(&"y") {
            return Err(parse_err(yl, "expected `y <t decimals>`"));
        }
        let label = parse_decimals(yl, &tokens[1..], t)?;
        let feats = Tensor::new(vec![n, d], features).expect("row counts checked");
        let sample = GraphSample::new(feats, edges, (t > 0).then_some(label)).map_err(|e| GraphError::Validation {
            line: ln,
            msg: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_is_empty() {
        assert!(parse_graphs("GPTGRAPH v1 d=3 t=1\n").unwrap().is_empty());
    }

    #[test]
    fn out_of_range_edge_reports_line() {
        let mut text = String::from("GPTGRAPH v1 d=1 t=1\ng 6 1\n");
        for _ in 0..6 {
            text.push_str("0.5\n");
        }
        text.push_str("e 5 9\ny 1\n");
        match parse_graphs(&text) {
            Err(GraphError::Validation { line, .. }) => assert_eq!(line, 9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let text = "GPTGRAPH v1 d=2 t=0\ng 1 0\n1.0 abc\ny\n";
        assert!(matches!(parse_graphs(text), Err(GraphError::Parse { line: 3, .. })));
        let text = "GPTGRAPH v2 d=2 t=0\n";
        assert!(matches!(parse_graphs(text), Err(GraphError::Parse { line: 1, .. })));
        let text = "GPTGRAPH v1 d=1 t=0\ng 2 0\n1.0\n";
        assert!(matches!(parse_graphs(text), Err(GraphError::Parse { line: 4, .. })));
    }

    #[test]
    fn unlabelled_round_trip() {
        let g = GraphSample::new(Tensor::from_rows(&[vec![-0.0, 1e-300]]).unwrap(), vec![], None).unwrap();
        let text = format_graphs(std::slice::from_ref(&g)).unwrap();
        assert!(text.starts_with("GPTGRAPH v1 d=2 t=0\n"));
        let back = parse_graphs(&text).unwrap();
        assert!(back[0].features().bit_eq(g.features()));
        assert_eq!(back[0].label(), None);
    }
}

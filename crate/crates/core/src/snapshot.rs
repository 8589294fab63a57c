//! Plain-text model snapshots.
//!
//! ```text
//! sensorsched-snapshot 1
//! A 2 2
//! 1.1 0.2
//! 0 0.7
//! Q 2 2
//! ...
//! sensor 1 sample_prob 0.5 distance 120
//! C 1 2
//! ...
//! R 1 1
//! ...
//! ```
//!
//! Numbers use the shortest representation that parses back to the same
//! `f64`, so a snapshot round-trips exactly. Lines starting with `#` are
//! comments.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::linmodel::{ProcessModel, SensorModel};

const MAGIC: &str = "sensorsched-snapshot 1";

fn write_matrix(out: &mut String, name: &str, m: &Mat) {
    let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub fn render_snapshot(model: &ProcessModel, sensors: &[SensorModel]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    write_matrix(&mut out, "A", model.a());
    write_matrix(&mut out, "Q", model.q());
    for s in sensors {
        let _ = writeln!(
            out,
            "sensor {} sample_prob {} distance {}",
            s.id(),
            s.sample_prob(),
            s.distance()
        );
        write_matrix(&mut out, "C", s.c());
        write_matrix(&mut out, "R", s.r());
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, &'a str)>> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with('#')),
        );
        Self { inner: it.peekable() }
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .ok_or_else(|| Error::Parse("snapshot ends unexpectedly".into()))
    }

    fn peek(&mut self) -> Option<&(usize, &'a str)> {
        self.inner.peek()
    }

    fn matrix(&mut self, name: &str) -> Result<Mat> {
        let (no, header) = self.next()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let dims = match parts.as_slice() {
            [n, r, c] if *n == name => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()),
            _ => None,
        };
        let (rows, cols) =
            dims.ok_or_else(|| Error::Parse(format!("line {no}: expected `{name} <rows> <cols>`")))?;
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            let (no, line) = self.next()?;
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {no}: {e}")))?;
            if vals.len() != cols {
                return Err(Error::Parse(format!("line {no}: expected {cols} values, got {}", vals.len())));
            }
            for (j, v) in vals.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }
}

pub fn parse_snapshot(text: &str) -> Result<(ProcessModel, Vec<SensorModel>)> {
    let mut lines = Lines::new(text);
    let (no, magic) = lines.next()?;
    if magic != MAGIC {
        return Err(Error::Parse(format!("line {no}: not a model snapshot")));
    }
    let a = lines.matrix("A")?;
    let q = lines.matrix("Q")?;
    let model = ProcessModel::new(a, q)?;
    let mut sensors = Vec::new();
    while lines.peek().is_some() {
        let (no, header) = lines.next()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            ["sensor", id, "sample_prob", p, "distance", d] => {
                match (id.parse::<usize>(), p.parse::<f64>(), d.parse::<f64>()) {
                    (Ok(id), Ok(p), Ok(d)) => Some((id, p, d)),
                    _ => None,
                }
            }
            _ => None,
        };
        let (id, p, d) = parsed.ok_or_else(|| {
            Error::Parse(format!("line {no}: expected `sensor <id> sample_prob <p> distance <d>`"))
        })?;
        let c = lines.matrix("C")?;
        let r = lines.matrix("R")?;
        sensors.push(SensorModel::new(id, c, r, p, d)?);
    }
    Ok((model, sensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{generate_system, GenerationConfig};

    #[test]
    fn roundtrip_is_exact() {
        let (model, sensors) = generate_system(3, &GenerationConfig::default()).unwrap();
        let text = render_snapshot(&model, &sensors);
        let (m2, s2) = parse_snapshot(&text).unwrap();
        assert_eq!(m2, model);
        assert_eq!(s2, sensors);
        assert_eq!(render_snapshot(&m2, &s2), text);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let text = "# hand written\nsensorsched-snapshot 1\n\nA 1 1\n0.5\nQ 1 1\n1\nsensor 1 sample_prob 0.5 distance 100\nC 1 1\n1\nR 1 1\n2\n";
        let (m, s) = parse_snapshot(text).unwrap();
        assert_eq!(m.a()[(0, 0)], 0.5);
        assert_eq!(s[0].r()[(0, 0)], 2.0);
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(parse_snapshot("hello").is_err());
        assert!(parse_snapshot("sensorsched-snapshot 1\nA 1 2\n1\n").is_err());
        assert!(parse_snapshot("sensorsched-snapshot 1\nA 1 1\nx\n").is_err());
    }
}

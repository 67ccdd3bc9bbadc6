//! Plain-text format for [`AttentionParams`].
//!
//! ```text
//! d 3
//! tau 1
//! v22 0.3333333333333333
//! m11 3 3
//! 3 0 0
//! 0 3 0
//! 0 0 3
//! m21 3
//! 0 0 0
//! v21 3
//! 0 0 0
//! ```
//!
//! Matrices are written row-major, one row per line, values separated by
//! single spaces. Floats use the shortest representation that parses back
//! to the same `f64`, so a write/read round trip is exact.

use std::fmt::Write as _;

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn params_to_string(p: &AttentionParams) -> String {
    let d = p.dim();
    let mut s = String::new();
    let _ = writeln!(s, "d {d}");
    let _ = writeln!(s, "tau {}", p.tau);
    let _ = writeln!(s, "v22 {}", p.v22);
    let _ = writeln!(s, "m11 {d} {d}");
    for r in 0..d {
        let _ = writeln!(s, "{}", join(p.m11.row(r).iter().copied()));
    }
    let _ = writeln!(s, "m21 {d}");
    let _ = writeln!(s, "{}", join(p.m21.iter().copied()));
    let _ = writeln!(s, "v21 {d}");
    let _ = writeln!(s, "{}", join(p.v21.iter().copied()));
    s
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        path: format!("line {line}"),
        message: message.into(),
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<Vec<&'a str>> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Ok(line.split_whitespace().collect());
        }
        Err(parse_err(self.last + 1, "unexpected end of input"))
    }

    fn numbers(&mut self, n: usize) -> Result<Vec<f64>> {
        let tokens = self.next()?;
        if tokens.len() != n {
            return Err(parse_err(self.last, format!("expected {n} values, got {}", tokens.len())));
        }
        tokens
            .iter()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(self.last, format!("{t:?}: {e}"))))
            .collect()
    }

    fn keyed(&mut self, key: &str, arity: usize) -> Result<Vec<&'a str>> {
        let tokens = self.next()?;
        if tokens.first() != Some(&key) || tokens.len() != arity + 1 {
            return Err(parse_err(
                self.last,
                format!("expected `{key}` with {arity} value(s), got {:?}", tokens.join(" ")),
            ));
        }
        Ok(tokens[1..].to_vec())
    }

    fn keyed_num<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let tok = self.keyed(key, 1)?[0];
        tok.parse()
            .map_err(|e: T::Err| parse_err(self.last, format!("{key}: {e}")))
    }

    fn dims(&mut self, key: &str, expected: &[usize]) -> Result<()> {
        let toks = self.keyed(key, expected.len())?;
        for (t, want) in toks.iter().zip(expected) {
            if t.parse::<usize>().ok() != Some(*want) {
                return Err(parse_err(self.last, format!("{key} has shape {toks:?}, expected {expected:?}")));
            }
        }
        Ok(())
    }
}

pub fn params_from_str(text: &str) -> Result<AttentionParams> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let d: usize = lines.keyed_num("d")?;
    if d == 0 {
        return Err(parse_err(lines.last, "d must be >= 1"));
    }
    let tau: f64 = lines.keyed_num("tau")?;
    let v22: f64 = lines.keyed_num("v22")?;
    lines.dims("m11", &[d, d])?;
    let mut m11 = Mat::zeros(d, d);
    for r in 0..d {
        for (c, v) in lines.numbers(d)?.into_iter().enumerate() {
            m11[(r, c)] = v;
        }
    }
    lines.dims("m21", &[d])?;
    let m21 = Vector::from_vec(lines.numbers(d)?);
    lines.dims("v21", &[d])?;
    let v21 = Vector::from_vec(lines.numbers(d)?);
    AttentionParams::new(m11, m21, v21, v22, tau)
}

pub fn write_params(p: &AttentionParams, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, params_to_string(p))?;
    Ok(())
}

pub fn read_params(path: &std::path::Path) -> Result<AttentionParams> {
    params_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_example_parses() {
        let text = "d 3\ntau 1\nv22 0.3333333333333333\nm11 3 3\n3 0 0\n0 3 0\n0 0 3\nm21 3\n0 0 0\nv21 3\n0 0 0\n";
        let p = params_from_str(text).unwrap();
        assert_eq!(p.m11, Mat::identity(3, 3) * 3.0);
        assert_eq!(p.v22, 1.0 / 3.0);
        assert_eq!(params_to_string(&p), text);
    }

    #[test]
    fn malformed_input_names_the_line() {
        let bad = "d 2\ntau 1\nv22 0.5\nm11 2 2\n1 0\n0\nm21 2\n0 0\nv21 2\n0 0\n";
        let err = params_from_str(bad).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "line 6"), "{err}");
        assert!(params_from_str("d 2\ntau 1\n").is_err());
        assert!(params_from_str("d 2\ntau -1\nv22 0\nm11 2 2\n1 0\n0 1\nm21 2\n0 0\nv21 2\n0 0\n").is_err());
        assert!(params_from_str("d 2\ntau 1\nv22 0\nm11 3 3\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            d in 1usize..6,
            seed in any::<u64>(),
            tau in 1e-3f64..1e3,
            v22 in -1e3f64..1e3,
        ) {
            use rand::Rng;
            let mut rng = crate::gaussian::RngStream::new(seed, 0).rng();
            let mut f = || rng.random_range(-1e6..1e6) * 10f64.powi(rng.random_range(-20..5));
            let p = AttentionParams::new(
                Mat::from_fn(d, d, |_, _| f()),
                Vector::from_fn(d, |_, _| f()),
                Vector::from_fn(d, |_, _| f()),
                v22,
                tau,
            ).unwrap();
            prop_assert_eq!(params_from_str(&params_to_string(&p)).unwrap(), p);
        }
    }
}

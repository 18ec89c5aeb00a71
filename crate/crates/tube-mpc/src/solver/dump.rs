//! Plain-text serialization of [`QpProblem`] for offline cross-checking.
//!
//! The format is line oriented and self-describing:
//!
//! ```text
//! qp-dump v1
//! constant 0.5
//! matrix H 2 2
//! 2 0
//! 0 2
//! vector g 2
//! -1 -1
//! matrix C 1 2
//! 1 1
//! vector l 1
//! 1
//! vector u 1
//! inf
//! end
//! ```
//!
//! Sections appear in exactly this order. Floats use Rust's shortest
//! round-trip formatting, so write-then-parse reproduces the problem bit for
//! bit; `inf`/`-inf` are legal bounds, NaN is rejected on both sides. The
//! parser is total: it never panics and enforces size caps before
//! allocating, so arbitrary input is safe to feed it.

use super::{QpProblem, SolveError};
use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;
use thiserror::Error;

pub const FORMAT_HEADER: &str = "qp-dump v1";
/// Caps keep hostile inputs from requesting huge allocations. Problems from
/// this crate are far below them (a horizon-30 plan has 91 variables).
pub const MAX_VARS: usize = 512;
pub const MAX_ROWS: usize = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct DumpParseError {
    /// 1-based line number the error was detected on.
    pub line: usize,
    pub kind: DumpErrorKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DumpErrorKind {
    #[error("expected header `{FORMAT_HEADER}`")]
    BadHeader,
    #[error("expected `{0}`")]
    Expected(&'static str),
    #[error("bad integer")]
    BadInteger,
    #[error("bad float")]
    BadFloat,
    #[error("dimensions exceed caps ({MAX_VARS} vars, {MAX_ROWS} rows)")]
    TooLarge,
    #[error("wrong number of entries on line")]
    WrongCount,
    #[error("unexpected end of input")]
    Truncated,
    #[error("trailing content after `end`")]
    Trailing,
    #[error("inconsistent problem: {0}")]
    Invalid(String),
}

/// Serialize a problem. Fails only if the data contains NaN, which
/// [`QpProblem::new`] already rejects.
pub fn write_qp(problem: &QpProblem) -> Result<String, SolveError> {
    let d = problem.num_vars();
    let k = problem.num_constraints();
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_HEADER}");
    write_float_line(&mut out, "constant", &[problem.constant])?;
    let _ = writeln!(out, "matrix H {d} {d}");
    for r in 0..d {
        write_row(&mut out, problem.h.row(r).iter())?;
    }
    let _ = writeln!(out, "vector g {d}");
    write_row(&mut out, problem.g.iter())?;
    let _ = writeln!(out, "matrix C {k} {d}");
    for r in 0..k {
        write_row(&mut out, problem.c.row(r).iter())?;
    }
    let _ = writeln!(out, "vector l {k}");
    if k > 0 {
        write_row(&mut out, problem.lower.iter())?;
    }
    let _ = writeln!(out, "vector u {k}");
    if k > 0 {
        write_row(&mut out, problem.upper.iter())?;
    }
    out.push_str("end\n");
    Ok(out)
}

fn write_float_line<'a>(
    out: &mut String,
    name: &str,
    values: impl IntoIterator<Item = &'a f64>,
) -> Result<(), SolveError> {
    out.push_str(name);
    for v in values {
        if v.is_nan() {
            return Err(SolveError::NotANumber("dump"));
        }
        let _ = write!(out, " {v}");
    }
    out.push('\n');
    Ok(())
}

fn write_row<'a>(
    out: &mut String,
    values: impl IntoIterator<Item = &'a f64>,
) -> Result<(), SolveError> {
    let mut first = true;
    for v in values {
        if v.is_nan() {
            return Err(SolveError::NotANumber("dump"));
        }
        if !first {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
        first = false;
    }
    out.push('\n');
    Ok(())
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    number: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str, DumpParseError> {
        self.number += 1;
        self.inner.next().ok_or(DumpParseError {
            line: self.number,
            kind: DumpErrorKind::Truncated,
        })
    }

    fn err(&self, kind: DumpErrorKind) -> DumpParseError {
        DumpParseError {
            line: self.number,
            kind,
        }
    }
}

pub fn parse_qp(text: &str) -> Result<QpProblem, DumpParseError> {
    let mut lines = Lines {
        inner: text.lines(),
        number: 0,
    };

    if lines.next()?.trim_end() != FORMAT_HEADER {
        return Err(lines.err(DumpErrorKind::BadHeader));
    }

    let constant_line = lines.next()?;
    let mut parts = constant_line.split_whitespace();
    if parts.next() != Some("constant") {
        return Err(lines.err(DumpErrorKind::Expected("constant")));
    }
    let constant = parse_float(parts.next(), &lines)?;
    if parts.next().is_some() {
        return Err(lines.err(DumpErrorKind::WrongCount));
    }

    let (hd, hd2) = matrix_header(&mut lines, "H")?;
    if hd != hd2 {
        return Err(lines.err(DumpErrorKind::Invalid("H not square".into())));
    }
    if hd == 0 || hd > MAX_VARS {
        return Err(lines.err(DumpErrorKind::TooLarge));
    }
    let h = read_matrix(&mut lines, hd, hd)?;

    let gd = vector_header(&mut lines, "g")?;
    if gd != hd {
        return Err(lines.err(DumpErrorKind::Invalid("g length != H size".into())));
    }
    let g = read_vector(&mut lines, gd)?;

    let (ck, cd) = matrix_header(&mut lines, "C")?;
    if cd != hd || ck > MAX_ROWS {
        return Err(lines.err(DumpErrorKind::TooLarge));
    }
    let c = read_matrix(&mut lines, ck, cd)?;

    let lk = vector_header(&mut lines, "l")?;
    if lk != ck {
        return Err(lines.err(DumpErrorKind::Invalid("l length != C rows".into())));
    }
    let lower = if lk > 0 {
        read_vector(&mut lines, lk)?
    } else {
        DVector::zeros(0)
    };

    let uk = vector_header(&mut lines, "u")?;
    if uk != ck {
        return Err(lines.err(DumpErrorKind::Invalid("u length != C rows".into())));
    }
    let upper = if uk > 0 {
        read_vector(&mut lines, uk)?
    } else {
        DVector::zeros(0)
    };

    if lines.next()?.trim_end() != "end" {
        return Err(lines.err(DumpErrorKind::Expected("end")));
    }
    if lines.inner.next().is_some() {
        return Err(DumpParseError {
            line: lines.number + 1,
            kind: DumpErrorKind::Trailing,
        });
    }

    QpProblem::new(h, g, c, lower, upper, constant).map_err(|e| DumpParseError {
        line: lines.number,
        kind: DumpErrorKind::Invalid(e.to_string()),
    })
}

fn matrix_header(
    lines: &mut Lines<'_>,
    name: &'static str,
) -> Result<(usize, usize), DumpParseError> {
    let line = lines.next()?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some("matrix") || parts.next() != Some(name) {
        return Err(lines.err(DumpErrorKind::Expected(name)));
    }
    let rows = parse_usize(parts.next(), lines)?;
    let cols = parse_usize(parts.next(), lines)?;
    if parts.next().is_some() {
        return Err(lines.err(DumpErrorKind::WrongCount));
    }
    Ok((rows, cols))
}

fn vector_header(lines: &mut Lines<'_>, name: &'static str) -> Result<usize, DumpParseError> {
    let line = lines.next()?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some("vector") || parts.next() != Some(name) {
        return Err(lines.err(DumpErrorKind::Expected(name)));
    }
    let len = parse_usize(parts.next(), lines)?;
    if parts.next().is_some() {
        return Err(lines.err(DumpErrorKind::WrongCount));
    }
    Ok(len)
}

fn read_matrix(
    lines: &mut Lines<'_>,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>, DumpParseError> {
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let line = lines.next()?;
        let mut count = 0;
        for (i, tok) in line.split_whitespace().enumerate() {
            if i >= cols {
                return Err(lines.err(DumpErrorKind::WrongCount));
            }
            m[(r, i)] = parse_float(Some(tok), lines)?;
            count += 1;
        }
        if count != cols {
            return Err(lines.err(DumpErrorKind::WrongCount));
        }
    }
    Ok(m)
}

fn read_vector(lines: &mut Lines<'_>, len: usize) -> Result<DVector<f64>, DumpParseError> {
    let line = lines.next()?;
    let mut v = DVector::zeros(len);
    let mut count = 0;
    for (i, tok) in line.split_whitespace().enumerate() {
        if i >= len {
            return Err(lines.err(DumpErrorKind::WrongCount));
        }
        v[i] = parse_float(Some(tok), lines)?;
        count += 1;
    }
    if count != len {
        return Err(lines.err(DumpErrorKind::WrongCount));
    }
    Ok(v)
}

fn parse_usize(tok: Option<&str>, lines: &Lines<'_>) -> Result<usize, DumpParseError> {
    tok.and_then(|t| t.parse::<usize>().ok())
        .ok_or_else(|| lines.err(DumpErrorKind::BadInteger))
}

fn parse_float(tok: Option<&str>, lines: &Lines<'_>) -> Result<f64, DumpParseError> {
    let v = tok
        .and_then(|t| t.parse::<f64>().ok())
        .ok_or_else(|| lines.err(DumpErrorKind::BadFloat))?;
    if v.is_nan() {
        return Err(lines.err(DumpErrorKind::BadFloat));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> QpProblem {
        QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_column_slice(&[-1.0, 0.25]),
            DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, -1.0, 0.0, 1.0]),
            DVector::from_column_slice(&[1.0, f64::NEG_INFINITY, -0.125]),
            DVector::from_column_slice(&[f64::INFINITY, 2.0, 0.75]),
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let p = sample();
        let text = write_qp(&p).unwrap();
        let q = parse_qp(&text).unwrap();
        assert_eq!(p, q);
        // And the serialization of the reparse is byte-identical.
        assert_eq!(text, write_qp(&q).unwrap());
    }

    #[test]
    fn roundtrip_preserves_awkward_floats() {
        let values = [
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            -f64::MAX,
            1e-300,
            0.1 + 0.2,
            -0.0,
        ];
        for &v in &values {
            let p = QpProblem::new(
                DMatrix::from_element(1, 1, 2.0),
                DVector::from_element(1, v),
                DMatrix::zeros(0, 1),
                DVector::zeros(0),
                DVector::zeros(0),
                v,
            )
            .unwrap();
            let q = parse_qp(&write_qp(&p).unwrap()).unwrap();
            assert_eq!(p.g[0].to_bits(), q.g[0].to_bits(), "value {v}");
        }
    }

    #[test]
    fn format_is_stable() {
        let p = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]),
            DVector::from_column_slice(&[-1.0, -1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, f64::INFINITY),
            0.5,
        )
        .unwrap();
        let expected = "\
qp-dump v1
constant 0.5
matrix H 2 2
2 0
0 2
vector g 2
-1 -1
matrix C 1 2
1 1
vector l 1
1
vector u 1
inf
end
";
        assert_eq!(write_qp(&p).unwrap(), expected);
    }

    #[test]
    fn zero_row_problems_roundtrip() {
        let p = QpProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -4.0),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DVector::zeros(0),
            4.0,
        )
        .unwrap();
        assert_eq!(parse_qp(&write_qp(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn rejects_bad_header() {
        let err = parse_qp("qp-dump v2\n").unwrap_err();
        assert_eq!(err.line, 1);
        assert_eq!(err.kind, DumpErrorKind::BadHeader);
        assert!(parse_qp("").is_err());
    }

    #[test]
    fn rejects_truncation_anywhere() {
        let text = write_qp(&sample()).unwrap();
        // Dropping any proper suffix must produce an error, never a panic.
        // (Only the final newline is optional.)
        for cut in 0..text.len() - 1 {
            assert!(parse_qp(&text[..cut]).is_err(), "cut at {cut}");
        }
        assert!(parse_qp(text.trim_end()).is_ok());
    }

    #[test]
    fn rejects_nan_and_bad_tokens() {
        let text = write_qp(&sample()).unwrap();
        let poisoned = text.replace("matrix H 2 2\n2 0.5", "matrix H 2 2\nNaN 0.5");
        let err = parse_qp(&poisoned).unwrap_err();
        assert_eq!(err.kind, DumpErrorKind::BadFloat);

        let garbled = text.replace("vector g 2", "vector g two");
        assert_eq!(parse_qp(&garbled).unwrap_err().kind, DumpErrorKind::BadInteger);
    }

    #[test]
    fn rejects_oversized_dimensions() {
        let text = format!(
            "{FORMAT_HEADER}\nconstant 0\nmatrix H {n} {n}\n",
            n = MAX_VARS + 1
        );
        let err = parse_qp(&text).unwrap_err();
        assert_eq!(err.kind, DumpErrorKind::TooLarge);
    }

    #[test]
    fn rejects_wrong_entry_counts_and_trailing_text() {
        let text = write_qp(&sample()).unwrap();
        let short = text.replace("vector g 2\n-1 0.25", "vector g 2\n-1");
        assert_eq!(parse_qp(&short).unwrap_err().kind, DumpErrorKind::WrongCount);

        let long = format!("{text}extra\n");
        assert_eq!(parse_qp(&long).unwrap_err().kind, DumpErrorKind::Trailing);
    }

    #[test]
    fn rejects_inconsistent_problems() {
        // Crossed bounds survive parsing but fail problem validation.
        let text = write_qp(&sample())
            .unwrap()
            .replace("vector l 3\n1 -inf -0.125", "vector l 3\n1 -inf 10");
        match parse_qp(&text).unwrap_err().kind {
            DumpErrorKind::Invalid(msg) => assert!(msg.contains("row 2"), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn arbitrary_noise_is_handled() {
        for seed in 0u8..=20 {
            let noise: String = (0..200)
                .map(|i| ((seed as usize * 31 + i * 17) % 96 + 32) as u8 as char)
                .collect();
            let _ = parse_qp(&noise);
        }
    }
}

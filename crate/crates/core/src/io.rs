//! CSV plumbing shared by the artifact readers and writers.
//!
//! Every artifact may start with `#` comment lines (the CLI echoes its
//! configuration there); readers skip them.

use std::io::{Read, Write};

pub fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(out)
}

pub fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input)
}

/// Reads a headed CSV of numbers into rows, checking the header.
pub fn read_numeric_csv<R: Read>(input: R, expected: &[&str]) -> crate::Result<Vec<Vec<f64>>> {
    let mut rd = csv_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != expected {
        return Err(crate::Error::Header {
            expected: expected.join(","),
            actual: header.join(","),
        });
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| crate::Error::Config(format!("bad number {f:?}: {e}")))
            })
            .collect::<crate::Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_comment_lines() {
        let text = "# seed = 1\nx, y\n1, 2\n# trailing\n3,4\n";
        let rows = read_numeric_csv(text.as_bytes(), &["x", "y"]).unwrap();
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn rejects_wrong_header() {
        assert!(read_numeric_csv("a,b\n1,2\n".as_bytes(), &["x", "y"]).is_err());
    }
}

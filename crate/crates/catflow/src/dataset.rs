//! Dataset text format.
//!
//! ```text
//! K D n seed
//! x_1 x_2 ... x_D
//! ...
//! ```
//!
//! One header line, then `n` lines of `D` space-separated class indices, each
//! line ending in `\n`. Writing then reading reproduces the file byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use catflow_core::numerics::CategoricalBatch;

use crate::error::{format_err, io_err, Result};

/// A batch with the seed it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub data: CategoricalBatch,
    pub seed: u64,
}

pub fn to_text(data: &CategoricalBatch, seed: u64) -> String {
    let mut s = format!("{} {} {} {}\n", data.classes(), data.dims(), data.batch(), seed);
    for row in data.rows() {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse(text: &str, path: &Path) -> Result<DatasetFile> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| format_err(path, "empty file"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 {
        return Err(format_err(path, "header must be `K D n seed`"));
    }
    let num = |i: usize, what: &str| -> Result<u64> {
        fields[i].parse().map_err(|_| format_err(path, format!("header: cannot parse {what} '{}'", fields[i])))
    };
    let (k, d, n, seed) = (num(0, "K")? as usize, num(1, "D")? as usize, num(2, "n")? as usize, num(3, "seed")?);
    if k < 2 || d == 0 {
        return Err(format_err(path, "header: need K >= 2 and D >= 1"));
    }
    let mut data = Vec::with_capacity(n * d);
    let mut count = 0;
    for (i, line) in lines {
        let before = data.len();
        for tok in line.split(' ') {
            let v: usize = tok.parse().map_err(|_| format_err(path, format!("line {}: bad index '{tok}'", i + 1)))?;
            if v >= k {
                return Err(format_err(path, format!("line {}: index {v} is not below K = {k}", i + 1)));
            }
            data.push(v);
        }
        if data.len() - before != d {
            return Err(format_err(path, format!("line {}: expected {d} indices", i + 1)));
        }
        count += 1;
    }
    if count != n {
        return Err(format_err(path, format!("header promises {n} samples but the file has {count}")));
    }
    Ok(DatasetFile { data: CategoricalBatch::new(n, d, k, data)?, seed })
}

pub fn read(path: &Path) -> Result<DatasetFile> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse(&text, path)
}

pub fn write(path: &Path, data: &CategoricalBatch, seed: u64) -> Result<()> {
    fs::write(path, to_text(data, seed)).map_err(io_err(path))
}

pub fn write_to(mut out: impl Write, data: &CategoricalBatch, seed: u64) -> std::io::Result<()> {
    out.write_all(to_text(data, seed).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn roundtrip_is_byte_exact() {
        let x = CategoricalBatch::new(3, 2, 8, vec![0, 7, 3, 4, 1, 1]).unwrap();
        let text = to_text(&x, 42);
        assert_eq!(text, "8 2 3 42\n0 7\n3 4\n1 1\n");
        let back = parse(&text, &PathBuf::from("x")).unwrap();
        assert_eq!(back.data, x);
        assert_eq!(to_text(&back.data, back.seed), text);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let p = PathBuf::from("x");
        for bad in ["", "8 2 1\n0 1\n", "8 2 2 0\n0 1\n", "8 2 1 0\n0 8\n", "8 2 1 0\n0 1 2\n", "8 2 1 0\n0  1\n"] {
            assert!(parse(bad, &p).is_err(), "{bad:?}");
        }
    }
}

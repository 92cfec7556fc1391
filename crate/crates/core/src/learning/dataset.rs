//! Sample matrices and the `PCDS` file format.
//!
//! ```text
//! magic "PCDS" | num_samples u64 | num_vars u32 | num_cats u32 | num_samples × num_vars u16 (row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::LearningError;
use crate::format::{checked_len, read_magic, read_u16, read_u32, read_u64, write_u32, write_u64, FormatError};

pub const MAGIC: &[u8; 4] = b"PCDS";

/// Row-major matrix of category indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    num_vars: usize,
    num_cats: usize,
    data: Vec<u16>,
}

impl Dataset {
    /// Checks the shape and every category.
    pub fn new(num_vars: usize, num_cats: usize, data: Vec<u16>) -> Result<Self, LearningError> {
        if num_vars == 0 || !data.len().is_multiple_of(num_vars) {
            return Err(LearningError::DimMismatch { what: "entries per row", expected: num_vars, found: data.len() });
        }
        if let Some(i) = data.iter().position(|&v| v as usize >= num_cats) {
            return Err(LearningError::CategoryOutOfRange {
                sample: i / num_vars,
                var: i % num_vars,
                value: data[i],
                num_cats,
            });
        }
        Ok(Self { num_vars, num_cats, data })
    }

    pub fn from_rows(rows: &[Vec<u16>], num_vars: usize, num_cats: usize) -> Result<Self, LearningError> {
        if let Some(r) = rows.iter().find(|r| r.len() != num_vars) {
            return Err(LearningError::DimMismatch { what: "row length", expected: num_vars, found: r.len() });
        }
        Self::new(num_vars, num_cats, rows.concat())
    }

    pub fn num_samples(&self) -> usize {
        self.data.len() / self.num_vars
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_cats(&self) -> usize {
        self.num_cats
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u16] {
        &self.data[i * self.num_vars..(i + 1) * self.num_vars]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[u16]> + '_ {
        self.data.chunks(self.num_vars)
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(indices.len() * self.num_vars);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Dataset { num_vars: self.num_vars, num_cats: self.num_cats, data }
    }

    /// First `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let (a, b) = self.data.split_at(n.min(self.num_samples()) * self.num_vars);
        (
            Dataset { num_vars: self.num_vars, num_cats: self.num_cats, data: a.to_vec() },
            Dataset { num_vars: self.num_vars, num_cats: self.num_cats, data: b.to_vec() },
        )
    }

    pub fn write_pcds(&self, w: &mut impl Write) -> Result<(), FormatError> {
        let mut buf = Vec::with_capacity(20 + self.data.len() * 2);
        buf.extend_from_slice(MAGIC);
        write_u64(&mut buf, self.num_samples() as u64)?;
        write_u32(&mut buf, self.num_vars as u32)?;
        write_u32(&mut buf, self.num_cats as u32)?;
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pcds(r: &mut impl Read) -> Result<Self, FormatError> {
        read_magic(r, MAGIC)?;
        let n = read_u64(r)?;
        let nv = read_u32(r)? as usize;
        let nc = read_u32(r)? as usize;
        let total = checked_len(n.saturating_mul(nv as u64), "entry")?;
        let mut data = Vec::with_capacity(total);
        for _ in 0..total {
            data.push(read_u16(r)?);
        }
        Self::new(nv, nc, data).map_err(|e| FormatError::Malformed(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_pcds(&mut v).expect("writing to memory");
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let bytes = std::fs::read(path)?;
        Self::read_pcds(&mut bytes.as_slice())
    }

    /// Comma-separated integers, one sample per line. Blank lines and lines
    /// starting with `#` are skipped. The category count defaults to one more
    /// than the largest value seen.
    pub fn from_csv(text: &str, num_cats: Option<usize>) -> Result<Self, FormatError> {
        let mut data = Vec::new();
        let mut width = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Result<Vec<u16>, _> = line.split(',').map(|f| f.trim().parse::<u16>()).collect();
            let row = row.map_err(|e| FormatError::Malformed(format!("line {}: {e}", lineno + 1)))?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(FormatError::Malformed(format!("line {}: expected {w} fields", lineno + 1)));
                }
                _ => {}
            }
            data.extend(row);
        }
        let nv = width.ok_or_else(|| FormatError::Malformed("no samples in CSV".into()))?;
        let nc = num_cats.unwrap_or_else(|| data.iter().copied().max().unwrap_or(0) as usize + 1);
        Self::new(nv, nc, data).map_err(|e| FormatError::Malformed(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in self.rows() {
            let fields: Vec<String> = r.iter().map(u16::to_string).collect();
            s.push_str(&fields.join(","));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcds_round_trip_is_byte_identical() {
        let d = Dataset::new(3, 4, vec![0, 1, 2, 3, 3, 0]).unwrap();
        let bytes = d.to_bytes();
        let back = Dataset::read_pcds(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"PCDS");
    }

    #[test]
    fn csv_import_checks_rows() {
        let d = Dataset::from_csv("# header\n0,1\n1,1\n\n", None).unwrap();
        assert_eq!((d.num_samples(), d.num_vars(), d.num_cats()), (2, 2, 2));
        assert_eq!(Dataset::from_csv(&d.to_csv(), Some(2)).unwrap(), d);
        assert!(Dataset::from_csv("0,1\n1\n", None).is_err());
        assert!(Dataset::from_csv("0,5\n", Some(2)).is_err());
    }

    #[test]
    fn out_of_range_categories_are_located() {
        let err = Dataset::new(2, 2, vec![0, 1, 1, 2]).unwrap_err();
        assert_eq!(err, LearningError::CategoryOutOfRange { sample: 1, var: 1, value: 2, num_cats: 2 });
    }
}

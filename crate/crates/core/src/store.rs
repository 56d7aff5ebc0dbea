//! Versioned container files for trained artifacts.
//!
//! Layout: a text manifest (`BAE-CONTAINER <version>`, a kind line, `meta`
//! lines, `array` lines with shapes, `end`), the arrays as little-endian
//! `f64` in column-major order, then `checksum sha256 <hex>` over every
//! preceding byte.

use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{BaeError, Result};

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &str = "BAE-CONTAINER";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    meta: Vec<(String, String)>,
    arrays: Vec<(String, DMatrix<f64>)>,
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(BaeError::Store(format!(
            "{what} `{s}` must be a non-empty word"
        )));
    }
    Ok(())
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn push_array(&mut self, name: &str, array: DMatrix<f64>) {
        self.arrays.push((name.to_string(), array));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| BaeError::Store(format!("missing meta entry `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| BaeError::Store(format!("cannot parse meta `{key}` = `{v}`")))
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn array(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| BaeError::Store(format!("missing array `{name}`")))
    }

    pub fn array_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<&DMatrix<f64>> {
        let a = self.array(name)?;
        if a.shape() != (rows, cols) {
            return Err(BaeError::Store(format!(
                "array `{name}` is {}x{}, expected {rows}x{cols}",
                a.nrows(),
                a.ncols()
            )));
        }
        Ok(a)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_token(&self.kind, "kind")?;
        let mut head = format!("{MAGIC} {CONTAINER_VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            check_token(k, "meta key")?;
            if v.contains('\n') {
                return Err(BaeError::Store(format!("meta `{k}` spans lines")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, a) in &self.arrays {
            check_token(name, "array name")?;
            head.push_str(&format!("array {name} {} {}\n", a.nrows(), a.ncols()));
        }
        head.push_str("end\n");
        let mut bytes = head.into_bytes();
        for (_, a) in &self.arrays {
            for v in a.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = hex::encode(Sha256::digest(&bytes));
        bytes.extend_from_slice(format!("checksum sha256 {digest}\n").as_bytes());
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let len = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| BaeError::Store("truncated manifest".into()))?;
            let line = std::str::from_utf8(&rest[..len])
                .map_err(|_| BaeError::Store("manifest is not UTF-8".into()))?
                .to_string();
            *pos += len + 1;
            Ok(line)
        };
        let first = next_line(&mut pos)?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| BaeError::Store("not a container file".into()))?;
        if version != CONTAINER_VERSION.to_string() {
            return Err(BaeError::Store(format!(
                "container version {version} is not supported (expected {CONTAINER_VERSION})"
            )));
        }
        let kind_line = next_line(&mut pos)?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| BaeError::Store("missing kind line".into()))?
            .to_string();
        let mut container = Container::new(&kind);
        let mut shapes = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                container.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("array ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let parsed = match parts.as_slice() {
                    [name, r, c] => r
                        .parse::<usize>()
                        .ok()
                        .zip(c.parse::<usize>().ok())
                        .map(|s| (name.to_string(), s)),
                    _ => None,
                };
                shapes.push(
                    parsed.ok_or_else(|| BaeError::Store(format!("bad array line `{line}`")))?,
                );
            } else {
                return Err(BaeError::Store(format!(
                    "unexpected manifest line `{line}`"
                )));
            }
        }
        let payload: usize = shapes
            .iter()
            .map(|(_, (r, c))| r.checked_mul(*c).and_then(|n| n.checked_mul(8)))
            .try_fold(0usize, |acc, n| n.and_then(|n| acc.checked_add(n)))
            .ok_or_else(|| BaeError::Store("array sizes overflow".into()))?;
        let body_end = pos
            .checked_add(payload)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| BaeError::Store("truncated array data".into()))?;
        let trailer = std::str::from_utf8(&bytes[body_end..])
            .map_err(|_| BaeError::Store("bad checksum trailer".into()))?;
        let digest = trailer
            .strip_prefix("checksum sha256 ")
            .and_then(|t| t.strip_suffix('\n'))
            .ok_or_else(|| BaeError::Store("missing or truncated checksum trailer".into()))?;
        if digest != hex::encode(Sha256::digest(&bytes[..body_end])) {
            return Err(BaeError::Store("checksum mismatch".into()));
        }
        for (name, (r, c)) in shapes {
            let n = r * c;
            let values = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().expect("chunk of eight bytes")));
            container
                .arrays
                .push((name, DMatrix::from_iterator(r, c, values)));
            pos += 8 * n;
        }
        Ok(container)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| BaeError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| BaeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.set_meta("count", 2);
        c.set_meta("note", "two words");
        c.push_array(
            "a",
            DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.1, 1e300]),
        );
        c.push_array("empty", DMatrix::zeros(4, 0));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta("note").unwrap(), "two words");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let idx = bytes.len() - 80;
        flipped[idx] ^= 1;
        assert!(Container::from_bytes(&flipped).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 10]).is_err());
        assert!(Container::from_bytes(&bytes[..40]).is_err());
        let versioned = String::from_utf8_lossy(&bytes).replacen("CONTAINER 1", "CONTAINER 9", 1);
        let err = Container::from_bytes(versioned.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}

//! Flat `key = value` text files.
//!
//! One entry per line, `#` starts a comment, nested keys use dotted names.
//! Vectors are comma-separated; matrices are comma-separated rows joined by `;`.
//! Environments, policies and experiment configs all use this format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatFile {
    entries: Vec<(String, String, usize)>,
}

impl FlatFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut file = FlatFile::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    Some(line_no),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(Some(line_no), "empty key"));
            }
            if file.get(key).is_some() {
                return Err(Error::parse(
                    Some(line_no),
                    format!("duplicate key `{key}`"),
                ));
            }
            file.entries
                .push((key.to_string(), value.trim().to_string(), line_no));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value, 0)),
        }
    }

    pub fn set_vec(&mut self, key: &str, values: &[f64]) {
        self.set(key, join(values));
    }

    pub fn set_matrix(&mut self, key: &str, m: &Matrix) {
        let rows: Vec<String> = m.iter_rows().map(join).collect();
        self.set(key, rows.join(";"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, _, l)| *l)
            .filter(|l| *l > 0)
    }

    fn err(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        Error::parse(self.line_of(key), format!("`{key}`: {msg}"))
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::parse(None, format!("missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| self.err(key, e)),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn vec(&self, key: &str) -> Result<Vec<f64>> {
        parse_vec(self.require(key)?).map_err(|m| self.err(key, m))
    }

    pub fn vec_opt(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => parse_vec(v).map(Some).map_err(|m| self.err(key, m)),
        }
    }

    pub fn matrix(&self, key: &str) -> Result<Matrix> {
        let text = self.require(key)?;
        let rows = text
            .split(';')
            .map(parse_vec)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|m| self.err(key, m))?;
        Matrix::from_rows(&rows).ok_or_else(|| self.err(key, "ragged matrix rows"))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v, _) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_vec(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .map_err(|e| format!("bad number `{t}`: {e}"))
        })
        .collect()
}

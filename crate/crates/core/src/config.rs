//! Plain-text `key = value` configuration with `include = path` support.
//!
//! Lines are trimmed; empty lines and lines starting with `#` are ignored.
//! `include = other.cfg` splices another file in place (paths are relative
//! to the including file). Later assignments override earlier ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

const MAX_INCLUDE_DEPTH: usize = 16;

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::new();
        c.merge_file(path, &mut Vec::new())?;
        Ok(c)
    }

    /// Parse text whose includes resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c = Self::new();
        c.merge_text(text, base_dir, "<text>", &mut Vec::new())?;
        Ok(c)
    }

    fn merge_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<()> {
        let canon = path.canonicalize().map_err(|e| Error::io(path, e))?;
        if stack.contains(&canon) {
            return Err(Error::Config(format!("include cycle through {}", path.display())));
        }
        if stack.len() >= MAX_INCLUDE_DEPTH {
            return Err(Error::Config(format!("includes nested deeper than {MAX_INCLUDE_DEPTH}")));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        stack.push(canon);
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let r = self.merge_text(&text, &base, &path.display().to_string(), stack);
        stack.pop();
        r
    }

    fn merge_text(&mut self, text: &str, base: &Path, origin: &str, stack: &mut Vec<PathBuf>) -> Result<()> {
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("{origin}:{}: expected key = value, got {line:?}", ln + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("{origin}:{}: empty key", ln + 1)));
            }
            if k == "include" {
                self.merge_file(&base.join(v), stack)?;
            } else {
                self.values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Typed lookup with a default for missing keys.
    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}"))),
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}"))))
            .transpose()
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid list entry {s:?} for {key}")))
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_comments_and_overrides() {
        let c = Config::parse("# comment\na = 1\n\nb= x y \na=2\nl = 1, 2,3\n", Path::new(".")).unwrap();
        assert_eq!(c.get("a", 0u32).unwrap(), 2);
        assert_eq!(c.get_str("b"), Some("x y"));
        assert_eq!(c.get("missing", 7.5f64).unwrap(), 7.5);
        assert_eq!(c.get_list::<usize>("l", &[]).unwrap(), vec![1, 2, 3]);
        assert!(c.get::<u32>("b", 0).is_err());
        assert!(Config::parse("novalue\n", Path::new(".")).is_err());
    }

    #[test]
    fn includes_resolve_relative_and_detect_cycles() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/base.cfg"), "x = 1\ny = 1\n").unwrap();
        std::fs::write(dir.path().join("main.cfg"), "include = sub/base.cfg\ny = 2\n").unwrap();
        let c = Config::load(&dir.path().join("main.cfg")).unwrap();
        assert_eq!(c.get("x", 0).unwrap(), 1);
        assert_eq!(c.get("y", 0).unwrap(), 2);
        std::fs::write(dir.path().join("a.cfg"), "include = b.cfg\n").unwrap();
        std::fs::write(dir.path().join("b.cfg"), "include = a.cfg\n").unwrap();
        assert!(matches!(Config::load(&dir.path().join("a.cfg")), Err(Error::Config(_))));
    }
}

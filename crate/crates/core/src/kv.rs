//! Flat `key = value` text format with `[section]` headers.
//!
//! Used for config files, checkpoint headers, run manifests and metric
//! reports. Lines starting with `#` are comments. Keys inside a section are
//! reported as `section.key`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(Error::Config(format!(
                    "line {}: unterminated section header: {line}",
                    lineno + 1
                )));
            }
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value, got: {line}",
                lineno + 1
            )));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        map.insert(full, value.trim().to_string());
    }
    Ok(map)
}

/// Render a map back to text. Keys of the form `section.key` are grouped
/// under their `[section]`; bare keys come first.
pub fn render(map: &KvMap) -> String {
    let mut out = String::new();
    let mut current = String::new();
    // BTreeMap order groups keys of a section together; bare keys (no dot in
    // the section position) sort wherever they fall, so emit them first.
    for (k, v) in map.iter().filter(|(k, _)| !k.contains('.')) {
        out.push_str(&format!("{k} = {v}\n"));
    }
    for (k, v) in map.iter().filter(|(k, _)| k.contains('.')) {
        let (section, key) = k.split_once('.').unwrap();
        if section != current {
            out.push_str(&format!("[{section}]\n"));
            current = section.to_string();
        }
        out.push_str(&format!("{key} = {v}\n"));
    }
    out
}

pub fn get_parsed<T: std::str::FromStr>(map: &KvMap, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing key: {key}")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {raw}")))
}

pub fn get_parsed_or<T: std::str::FromStr>(map: &KvMap, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("invalid value for {key}: {raw}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_and_comments() {
        let text = "# top\nname = demo\n[model]\nw = 100\nd1 = 64\n[train]\nlr = 0.005\n";
        let map = parse(text).unwrap();
        assert_eq!(map.get("name").unwrap(), "demo");
        assert_eq!(map.get("model.w").unwrap(), "100");
        assert_eq!(map.get("train.lr").unwrap(), "0.005");
    }

    #[test]
    fn round_trip() {
        let text = "plain = 1\n[a]\nx = 2\ny = 3\n[b]\nz = 4\n";
        let map = parse(text).unwrap();
        let rendered = render(&map);
        assert_eq!(parse(&rendered).unwrap(), map);
    }

    #[test]
    fn bad_lines_are_rejected() {
        assert!(parse("novalue\n").is_err());
        assert!(parse("[unterminated\n").is_err());
    }
}

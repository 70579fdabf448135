//! Flat `key=value` text with dotted keys.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses lines of `key=value`; blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn dump(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parses one override of the form `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

pub fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

/// `a,b,c` lists; the empty string is the empty list.
pub fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| value(key, p)).collect()
}

pub fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `DIMxCOUNT`, e.g. `256x4`.
pub fn dims(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .trim()
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("bad value {v:?} for {key}: expected DIMxCOUNT")))?;
    Ok((value(key, a)?, value(key, b)?))
}

pub fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key {key}"))
}

/// 64-bit FNV-1a.
pub fn fingerprint(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = parse("# c\n a.b = 3 \n\nx=y=z\n").unwrap();
        assert_eq!(kv, vec![("a.b".into(), "3".into()), ("x".into(), "y=z".into())]);
        assert!(parse("nokey").is_err());
    }

    #[test]
    fn dims_and_lists() {
        assert_eq!(dims("k", "256x4").unwrap(), (256, 4));
        assert_eq!(list::<usize>("k", "5,512").unwrap(), vec![5, 512]);
        assert!(list::<usize>("k", "").unwrap().is_empty());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fingerprint(""), 0xcbf29ce484222325);
        assert_eq!(fingerprint("a"), 0xaf63dc4c8601ec8c);
    }
}

//! Locating JSON payloads inside free-form model output.
//!
//! Models wrap answers in prose and code fences. The scanner below walks the
//! text looking for a balanced `{...}` (or `[...]`) region, honouring string
//! literals and escapes, and returns the first region that parses.

use serde_json::Value;

/// Byte range of the balanced region starting at `open`, or `None` if the
/// brackets never close.
fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let (opener, closer) = match bytes[open] {
        b'{' => (b'{', b'}'),
        b'[' => (b'[', b']'),
        _ => return None,
    };
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[open..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            _ if b == opener => depth += 1,
            _ if b == closer => {
                depth -= 1;
                if depth == 0 {
                    return Some(open + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn first_value(raw: &str, openers: &[u8]) -> Option<Value> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while start < bytes.len() {
        let pos = bytes[start..].iter().position(|b| openers.contains(b))?;
        let open = start + pos;
        if let Some(end) = balanced_end(bytes, open) {
            if let Ok(v) = serde_json::from_str::<Value>(&raw[open..end]) {
                return Some(v);
            }
        }
        start = open + 1;
    }
    None
}

/// First parseable JSON object embedded in `raw`.
pub fn first_object(raw: &str) -> Option<serde_json::Map<alloc::string::String, Value>> {
    match first_value(raw, b"{") {
        Some(Value::Object(map)) => Some(map),
        _ => None,
    }
}

/// First parseable JSON object or array embedded in `raw`, whichever comes first.
pub fn first_object_or_array(raw: &str) -> Option<Value> {
    first_value(raw, b"{[")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_object() {
        let m = first_object(r#"{"a":"b"}"#).unwrap();
        assert_eq!(m["a"], "b");
    }

    #[test]
    fn fenced_with_prose() {
        let m = first_object("Here you go: ```json {\"x\":\"y\"}```").unwrap();
        assert_eq!(m["x"], "y");
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_depth() {
        let m = first_object(r#"noise {"k":"a } b {", "n":{"z":1}} tail }"#).unwrap();
        assert_eq!(m["k"], "a } b {");
        assert_eq!(m["n"]["z"], 1);
    }

    #[test]
    fn skips_unparseable_region() {
        let m = first_object(r#"{not json} then {"ok":"1"}"#).unwrap();
        assert_eq!(m["ok"], "1");
    }

    #[test]
    fn no_json() {
        assert!(first_object("no json here").is_none());
        assert!(first_object("{ unterminated").is_none());
    }

    #[test]
    fn array_detected() {
        let v = first_object_or_array(r#"order: ["s1","s0"]"#).unwrap();
        assert!(v.is_array());
    }
}

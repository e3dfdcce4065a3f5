//! `--dotted.key value` overrides applied to a JSON config before parsing.

use serde_json::Value;

/// Pairs up `--a.b value` arguments. Values that parse as JSON are used as
/// such (`3`, `true`, `[1,2]`); anything else is taken as a string.
pub fn parse(args: &[String]) -> Result<Vec<(String, Value)>, String> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            return Err(format!("expected --key, got `{flag}`"));
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => (key, it.next().ok_or_else(|| format!("--{key} needs a value"))?.clone()),
        };
        if key.is_empty() {
            return Err("empty override key".into());
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.push((key.to_string(), value));
    }
    Ok(out)
}

/// Sets `path` (dot-separated; numeric parts index arrays) in `root`,
/// creating objects along the way.
pub fn apply(root: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| format!("`{path}`: `{part}` is not an index"))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| format!("`{path}`: index {idx} out of {len}"))?
            }
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().unwrap().entry(*part).or_insert(Value::Null)
            }
            Value::Object(map) => map.entry(*part).or_insert(Value::Null),
            _ => return Err(format!("`{path}`: `{part}` is inside a scalar")),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_and_indexed() {
        let mut v = json!({"model": {"hidden": 64}, "stages": [{"lr": 0.1}, {"lr": 0.2}]});
        let args: Vec<String> = ["--model.hidden", "32", "--stages.1.lr=0.5", "--output_dir", "runs/a"]
            .map(String::from)
            .to_vec();
        for (k, val) in parse(&args).unwrap() {
            apply(&mut v, &k, val).unwrap();
        }
        assert_eq!(v, json!({"model": {"hidden": 32}, "stages": [{"lr": 0.1}, {"lr": 0.5}], "output_dir": "runs/a"}));
    }

    #[test]
    fn bad_input() {
        assert!(parse(&["hidden".into()]).is_err());
        assert!(parse(&["--seed".into()]).is_err());
        let mut v = json!({"stages": [1]});
        assert!(apply(&mut v, "stages.3", json!(0)).is_err());
        assert!(apply(&mut v, "stages.0.lr", json!(0)).is_err());
    }
}

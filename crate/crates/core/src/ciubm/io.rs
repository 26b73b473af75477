//! Line-delimited dataset file: `user  query  target  b1,b2,…  label`,
//! tab-separated, decimal keys, empty behavior field allowed.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{BehaviorSample, CiubmError};

pub fn write_dataset<W: Write>(mut out: W, samples: &[BehaviorSample]) -> Result<(), CiubmError> {
    let mut line = String::new();
    for s in samples {
        line.clear();
        let _ = write!(line, "{}\t{}\t{}\t", s.user_key, s.query_key, s.target_key);
        for (i, b) in s.behavior_keys.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            let _ = write!(line, "{b}");
        }
        let _ = writeln!(line, "\t{}", s.label);
        out.write_all(line.as_bytes())
            .map_err(|e| CiubmError::Io(e.to_string()))?;
    }
    out.flush().map_err(|e| CiubmError::Io(e.to_string()))
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<BehaviorSample>, CiubmError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CiubmError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CiubmError::Parse { line: idx + 1, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        }
        let key = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(format!("bad {what} {s:?}")));
        let behavior_keys = if fields[3].is_empty() {
            Vec::new()
        } else {
            fields[3]
                .split(',')
                .map(|b| key(b, "behavior key"))
                .collect::<Result<_, _>>()?
        };
        let label = match fields[4] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        };
        out.push(BehaviorSample {
            user_key: key(fields[0], "user key")?,
            query_key: key(fields[1], "query key")?,
            target_key: key(fields[2], "target key")?,
            behavior_keys,
            label,
        });
    }
    Ok(out)
}

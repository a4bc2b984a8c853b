//! Allocation trace files and fragmentation report CSV.
//!
//! One event per line: `alloc <id> <size> <short|long>` or `free <id>`.
//! `#` starts a comment. A `# capacity <bytes>` comment sets the default
//! heap capacity for the trace.

use std::fmt::Write as _;

use thiserror::Error;
use zerodp_core::fragsim::{AllocEvent, FragReport, Lifetime, Policy};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraceFile {
    pub capacity: Option<u64>,
    pub events: Vec<AllocEvent>,
}

pub fn parse_trace(text: &str) -> Result<TraceFile, ParseError> {
    let mut out = TraceFile::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |reason: String| ParseError { line, reason };
        let (body, comment) = match raw.split_once('#') {
            Some((b, c)) => (b, Some(c)),
            None => (raw, None),
        };
        if let Some(c) = comment {
            let mut words = c.split_whitespace();
            if words.next() == Some("capacity") {
                let v = words
                    .next()
                    .ok_or_else(|| err("capacity needs a value".into()))?;
                out.capacity = Some(v.parse().map_err(|_| err(format!("bad capacity {v:?}")))?);
            }
        }
        let words: Vec<&str> = body.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["alloc", id, size, class] => {
                let size: u64 = size
                    .parse()
                    .map_err(|_| err(format!("bad size {size:?}")))?;
                let lifetime = match *class {
                    "short" => Lifetime::Short,
                    "long" => Lifetime::Long,
                    other => {
                        return Err(err(format!(
                            "lifetime must be short or long, got {other:?}"
                        )))
                    }
                };
                out.events.push(AllocEvent::alloc(*id, size, lifetime));
            }
            ["free", id] => out.events.push(AllocEvent::free(*id)),
            _ => return Err(err(format!("cannot parse {:?}", raw.trim()))),
        }
    }
    Ok(out)
}

pub fn write_trace(capacity: Option<u64>, events: &[AllocEvent]) -> String {
    let mut s = String::new();
    if let Some(c) = capacity {
        let _ = writeln!(s, "# capacity {c}");
    }
    for e in events {
        let _ = writeln!(s, "{e}");
    }
    s
}

fn opt(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const FRAG_HEADER: &str = "policy,capacity,events,oom,failing_request,free_at_failure,free_at_failure_pct,max_contiguous_at_failure,peak_allocated,reserved,free_final,largest_free_final,holes_examined";

pub fn frag_csv(capacity: u64, reports: &[(Policy, FragReport)]) -> String {
    let mut s = String::from("# schema=1\n");
    s.push_str(FRAG_HEADER);
    s.push('\n');
    for (policy, r) in reports {
        let pct = r
            .free_at_failure
            .map(|f| format!("{:.1}", 100.0 * f as f64 / capacity.max(1) as f64))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            policy.name(),
            capacity,
            r.events,
            r.oom,
            opt(r.failing_request),
            opt(r.free_at_failure),
            pct,
            opt(r.max_contiguous_at_failure),
            r.peak_allocated,
            r.reserved,
            r.free_final,
            r.largest_free_final,
            r.holes_examined
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use zerodp_core::fragsim::interleaving_fixture;

    #[test]
    fn round_trip() {
        let (cap, events) = interleaving_fixture();
        let text = write_trace(Some(cap), &events);
        let parsed = parse_trace(&text).unwrap();
        assert_eq!(parsed.capacity, Some(cap));
        assert_eq!(parsed.events, events);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_trace("alloc a 1 short\nalloc b x long\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(parse_trace("alloc a 1 medium").is_err());
        assert!(parse_trace("release a").is_err());
        assert_eq!(parse_trace("# nothing\n\n").unwrap(), TraceFile::default());
    }
}

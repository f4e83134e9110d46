//! `whitelist.txt`: one `fn:block:idx` per line, `#` comments.

use anyhow::{anyhow, Result};
use specvm_core::analyze::Whitelist;

use crate::config::Header;

pub fn render(w: &Whitelist, header: &Header, sources: &[String]) -> String {
    let mut s = format!("# svm_header {}\n", header.to_line());
    s.push_str(&format!("# criteria: {}\n", w.provenance));
    for src in sources {
        s.push_str(&format!("# source: {src}\n"));
    }
    for b in &w.branches {
        s.push_str(&format!("{b}\n"));
    }
    s
}

pub fn parse(text: &str) -> Result<Whitelist> {
    let mut w = Whitelist::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(c) = line.strip_prefix("# criteria:") {
            w.provenance = c.trim().to_string();
        }
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let id = line.parse().map_err(|_| anyhow!("line {}: expected fn:block:idx, got {line:?}", n + 1))?;
        w.branches.insert(id);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SessionConfig;

    #[test]
    fn round_trip() {
        let w = Whitelist {
            branches: ["main:mid:3".parse().unwrap(), "f:a:0".parse().unwrap()].into(),
            provenance: "min_branch_execs=100".into(),
        };
        let text = render(&w, &Header::new(&SessionConfig::default()), &["t.jsonl".into()]);
        assert!(text.starts_with("# svm_header {\"svm_header\""));
        assert_eq!(parse(&text).unwrap(), w);
        assert!(parse("main:x\n").is_err());
    }
}

//! `report.json` and `report.txt`.

use serde::Serialize;
use specvm_core::analyze::{render_text, Report, Whitelist};

use crate::config::Header;
use crate::trace::hex;

#[derive(Serialize)]
struct FindingJson {
    offending: String,
    kind: &'static str,
    controllability: &'static str,
    min_order: usize,
    triggers: u64,
    distinct_inputs: usize,
    signatures: Vec<String>,
    addresses: Vec<String>,
    sequences: Vec<Vec<String>>,
    inputs: Vec<String>,
}

#[derive(Serialize)]
struct BranchJson {
    branch: String,
    executions: u64,
    whitelisted: bool,
    vulnerabilities: Vec<String>,
}

fn strings<T: ToString>(xs: &[T]) -> Vec<String> {
    xs.iter().map(ToString::to_string).collect()
}

/// JSON object whose first line carries the header.
pub fn render_json(r: &Report, w: &Whitelist, header: &Header) -> String {
    let findings: Vec<FindingJson> = r
        .findings
        .iter()
        .map(|f| FindingJson {
            offending: f.offending.to_string(),
            kind: f.kind.name(),
            controllability: f.controllability.name(),
            min_order: f.min_order,
            triggers: f.triggers,
            distinct_inputs: f.distinct_inputs,
            signatures: strings(&f.signatures),
            addresses: f.addresses.iter().map(|a| hex(*a)).collect(),
            sequences: f.sequences.iter().map(|s| strings(s)).collect(),
            inputs: strings(&f.inputs),
        })
        .collect();
    let branches: Vec<BranchJson> = r
        .branches
        .iter()
        .map(|b| BranchJson {
            branch: b.branch.to_string(),
            executions: b.executions,
            whitelisted: w.contains(&b.branch),
            vulnerabilities: strings(&b.vulnerabilities),
        })
        .collect();
    let header = serde_json::to_string(header).expect("header serializes");
    format!(
        "{{\"svm_header\":{header},\n\"findings\":{},\n\"branches\":{}}}\n",
        serde_json::to_string_pretty(&findings).expect("findings serialize"),
        serde_json::to_string_pretty(&branches).expect("branches serialize"),
    )
}

pub fn render_txt(r: &Report, header: &Header) -> String {
    format!("# svm_header {}\n{}", header.to_line(), render_text(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SessionConfig;

    #[test]
    fn json_is_valid_and_header_first() {
        let r = Report { findings: Vec::new(), branches: Vec::new() };
        let text = render_json(&r, &Whitelist::default(), &Header::new(&SessionConfig::default()));
        assert!(text.lines().next().unwrap().starts_with("{\"svm_header\":{\"version\""));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["findings"].as_array().unwrap().is_empty());
    }
}

//! Line-delimited JSON traces: a header line, then one record per line.

use std::io::Write;

use anyhow::{anyhow, Result};
use serde::{Deserialize, Serialize};
use specvm_core::analyze::{Referent, TraceRecord};
use specvm_core::detect::{CodeDetail, ViolationKind};
use specvm_core::isa::InstructionId;
use specvm_core::vm::AccessKind;

use crate::config::Header;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdJson {
    #[serde(rename = "fn")]
    pub func: String,
    pub block: String,
    pub idx: u32,
}

impl From<&InstructionId> for IdJson {
    fn from(id: &InstructionId) -> Self {
        IdJson { func: id.func.clone(), block: id.block.clone(), idx: id.idx }
    }
}

impl From<IdJson> for InstructionId {
    fn from(j: IdJson) -> Self {
        InstructionId::new(j.func, j.block, j.idx)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferentJson {
    pub base: u64,
    pub size: u64,
    pub site: IdJson,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DetailJson {
    BadRet { value: String },
    BadJtab { index: u64, len: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordJson {
    pub kind: String,
    pub offending: IdJson,
    pub addr: String,
    pub referent: Option<ReferentJson>,
    pub offset: Option<i64>,
    pub class: Option<String>,
    pub detail: Option<DetailJson>,
    pub branches: Vec<IdJson>,
    pub order: usize,
    pub input_id: String,
    pub run: u64,
}

pub fn hex(v: u64) -> String {
    format!("{v:#x}")
}

pub fn parse_hex(s: &str) -> Result<u64> {
    let digits = s.strip_prefix("0x").ok_or_else(|| anyhow!("expected 0x-prefixed hex, got {s:?}"))?;
    Ok(u64::from_str_radix(digits, 16)?)
}

fn access_kind(name: &str) -> Result<AccessKind> {
    [AccessKind::Valid, AccessKind::Redzone, AccessKind::Unmapped, AccessKind::Scratch]
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| anyhow!("unknown access class {name:?}"))
}

impl From<&TraceRecord> for RecordJson {
    fn from(r: &TraceRecord) -> Self {
        RecordJson {
            kind: r.kind.name().to_string(),
            offending: (&r.offending).into(),
            addr: hex(r.addr),
            referent: r.referent.as_ref().map(|x| ReferentJson { base: x.base, size: x.size, site: (&x.site).into() }),
            offset: r.offset,
            class: r.class.map(|c| c.name().to_string()),
            detail: r.detail.map(|d| match d {
                CodeDetail::BadRet { value } => DetailJson::BadRet { value: hex(value) },
                CodeDetail::BadJtab { index, len } => DetailJson::BadJtab { index, len },
            }),
            branches: r.branches.iter().map(Into::into).collect(),
            order: r.order,
            input_id: r.input_id.to_string(),
            run: r.run,
        }
    }
}

impl TryFrom<RecordJson> for TraceRecord {
    type Error = anyhow::Error;

    fn try_from(j: RecordJson) -> Result<Self> {
        let detail = match j.detail {
            None => None,
            Some(DetailJson::BadRet { value }) => Some(CodeDetail::BadRet { value: parse_hex(&value)? }),
            Some(DetailJson::BadJtab { index, len }) => Some(CodeDetail::BadJtab { index, len }),
        };
        if j.order != j.branches.len() {
            return Err(anyhow!("order {} disagrees with {} branches", j.order, j.branches.len()));
        }
        Ok(TraceRecord {
            kind: ViolationKind::from_name(&j.kind).ok_or_else(|| anyhow!("unknown kind {:?}", j.kind))?,
            offending: j.offending.into(),
            addr: parse_hex(&j.addr)?,
            class: j.class.as_deref().map(access_kind).transpose()?,
            referent: j.referent.map(|x| Referent { base: x.base, size: x.size, site: x.site.into() }),
            offset: j.offset,
            detail,
            branches: j.branches.into_iter().map(Into::into).collect(),
            order: j.order,
            input_id: j.input_id.parse().map_err(|_| anyhow!("bad input id {:?}", j.input_id))?,
            run: j.run,
        })
    }
}

pub fn record_line(r: &TraceRecord) -> String {
    serde_json::to_string(&RecordJson::from(r)).expect("record serializes")
}

pub fn parse_record(line: &str) -> Result<TraceRecord> {
    serde_json::from_str::<RecordJson>(line)?.try_into()
}

/// Problem found while reading a trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct TraceFile {
    pub header: Option<Header>,
    pub records: Vec<TraceRecord>,
    pub errors: Vec<LineError>,
}

/// Parses a whole trace; bad lines are reported and skipped.
pub fn parse_trace(text: &str) -> TraceFile {
    let mut t = TraceFile::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if n == 0 {
            if let Some(h) = Header::from_line(line) {
                t.header = Some(h);
                continue;
            }
        }
        match parse_record(line) {
            Ok(r) => t.records.push(r),
            Err(e) => t.errors.push(LineError { line: n + 1, message: e.to_string() }),
        }
    }
    t
}

/// Appends records to a stream that already holds a header line.
pub struct TraceWriter<W: Write> {
    out: W,
    pub records: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: &Header) -> std::io::Result<Self> {
        writeln!(out, "{}", header.to_line())?;
        Ok(TraceWriter { out, records: 0 })
    }

    pub fn write(&mut self, r: &TraceRecord) -> std::io::Result<()> {
        self.records += 1;
        writeln!(self.out, "{}", record_line(r))
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SessionConfig;
    use specvm_core::fuzz::InputId;

    fn sample() -> TraceRecord {
        TraceRecord {
            kind: ViolationKind::DataOob,
            offending: "main:body:2".parse().unwrap(),
            addr: 0x101098,
            class: Some(AccessKind::Redzone),
            referent: Some(Referent { base: 0x101010, size: 128, site: "main:entry:1".parse().unwrap() }),
            offset: Some(136),
            detail: None,
            branches: vec!["main:entry:4".parse().unwrap()],
            order: 1,
            input_id: InputId(0xdead),
            run: 3,
        }
    }

    #[test]
    fn schema() {
        let line = record_line(&sample());
        assert_eq!(
            line,
            r#"{"kind":"DATA-OOB","offending":{"fn":"main","block":"body","idx":2},"addr":"0x101098","referent":{"base":1052688,"size":128,"site":{"fn":"main","block":"entry","idx":1}},"offset":136,"class":"REDZONE","detail":null,"branches":[{"fn":"main","block":"entry","idx":4}],"order":1,"input_id":"000000000000dead","run":3}"#
        );
        assert_eq!(parse_record(&line).unwrap(), sample());
    }

    #[test]
    fn code_ptr_round_trip() {
        let mut r = sample();
        r.kind = ViolationKind::CodePtr;
        r.class = None;
        r.referent = None;
        r.offset = None;
        r.detail = Some(CodeDetail::BadRet { value: 0x41 });
        assert_eq!(parse_record(&record_line(&r)).unwrap(), r);
    }

    #[test]
    fn bad_lines_are_skipped() {
        let mut w = TraceWriter::new(Vec::new(), &Header::new(&SessionConfig::default())).unwrap();
        w.write(&sample()).unwrap();
        let mut text = String::from_utf8(w.into_inner()).unwrap();
        text.push_str("{not json\n");
        text.push_str(&record_line(&sample()));
        let t = parse_trace(&text);
        assert!(t.header.is_some());
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.errors.len(), 1);
        assert_eq!(t.errors[0].line, 3);
    }
}

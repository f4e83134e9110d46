//! The `svm` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 architectural
//! crash (`run`), 3 violations with `--strict`, 4 `analyze` skipped
//! malformed trace lines.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use specvm_core::analyze::{aggregate, build_whitelist, render_report, TraceRecord, Whitelist};
use specvm_core::asm::{emit_text, parse_program};
use specvm_core::fixtures::{builtin_gadget, gadget_ids};
use specvm_core::fuzz::InputId;
use specvm_core::harden::{harden, instrumented_branches, verify_hardening, HardenError};
use specvm_core::isa::{InstructionId, Program};
use specvm_core::oracle::{enumerate_records, OracleConfig};
use specvm_core::spec::{run_with_exposure, BranchStats};
use specvm_core::vm::Image;

use crate::config::{Header, IdentityArg, ModeArg, ScheduleArg, SessionConfig, SEED_ENV};
use crate::session::{run_session, SessionPaths, SessionSummary};
use crate::{corpus, report, trace, whitelist};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CRASH: u8 = 2;
pub const EXIT_VIOLATIONS: u8 = 3;
pub const EXIT_PARTIAL: u8 = 4;

/// Error with a machine-readable code for the one-line diagnostic.
#[derive(Debug)]
pub struct Diag {
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for Diag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Diag {}

fn diag(code: &'static str, message: impl Into<String>) -> anyhow::Error {
    Diag { code, message: message.into() }.into()
}

#[derive(Parser, Debug)]
#[command(name = "svm", version, about = "Speculation-exposing VM: assemble, run, fuzz, analyze, harden")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct SpecArgs {
    /// Speculation window in counted instructions.
    #[arg(long)]
    pub window: Option<u64>,
    /// Instruction chunk charged against the window at once.
    #[arg(long)]
    pub stride: Option<u64>,
    /// Maximum nesting order of mispredictions.
    #[arg(long)]
    pub max_order: Option<u32>,
    /// Base of the prioritized order schedule.
    #[arg(long)]
    pub order_base: Option<u64>,
    /// Run purely architecturally.
    #[arg(long)]
    pub no_spec: bool,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    /// Architectural step limit per run.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Violation identity used for dedup and classification.
    #[arg(long, value_enum)]
    pub identity: Option<IdentityArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Against {
    /// Branches whose edges go through hardening trampolines.
    Instrumented,
    /// Every conditional branch.
    All,
    /// Branches left alone by the hardening pass.
    Uninstrumented,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Assemble and validate; print the canonical listing.
    Asm {
        file: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run one input under exposure and print its violations.
    Run {
        file: PathBuf,
        /// Input bytes; empty input if omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Exit 3 if any violation is found.
        #[arg(long)]
        strict: bool,
        /// Print the memory layout first.
        #[arg(long)]
        print_layout: bool,
        /// Also write a trace file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Coverage-guided fuzzing session.
    Fuzz {
        file: PathBuf,
        /// Seed files or directories of seed files.
        #[arg(long)]
        seeds: Vec<PathBuf>,
        #[arg(long)]
        runs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Session directory holding corpus/, crashes/, trace.jsonl, session.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        crashes: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Summary file; defaults to session.json next to the trace.
        #[arg(long)]
        session: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Aggregate traces into a report and a whitelist.
    Analyze {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// report.json path; the text report goes next to it.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        whitelist: Option<PathBuf>,
        /// Session summaries with branch statistics; defaults to
        /// session.json beside the first trace.
        #[arg(long)]
        session: Vec<PathBuf>,
        /// Program, to list branches that never executed.
        #[arg(long)]
        program: Option<PathBuf>,
        #[arg(long, value_enum)]
        identity: Option<IdentityArg>,
        #[arg(long)]
        min_branch_execs: Option<u64>,
        #[arg(long)]
        min_vuln_triggers: Option<u64>,
        /// Treat UNCONTROLLED findings as non-benign.
        #[arg(long)]
        no_benign_uncontrolled: bool,
    },
    /// Insert fences or SLH masking for non-whitelisted branches.
    Harden {
        file: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        whitelist: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Replay inputs and report violations attributable to a branch set.
    Verify {
        file: PathBuf,
        /// Corpus directories (every file is an input).
        #[arg(long)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "instrumented")]
        against: Against,
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Exhaustive path enumeration for one input.
    Oracle {
        file: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        max_order: u32,
        #[arg(long)]
        window: Option<u64>,
        #[arg(long)]
        stride: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, value_enum)]
        identity: Option<IdentityArg>,
    },
    /// Builtin gadget corpus.
    Gadgets {
        #[command(subcommand)]
        action: GadgetAction,
    },
}

#[derive(Subcommand, Debug)]
pub enum GadgetAction {
    List,
    Emit {
        id: u32,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the triggering input here.
        #[arg(long)]
        trigger: Option<PathBuf>,
        /// Write the safe input here.
        #[arg(long)]
        safe: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn main<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("svm: error[usage]: {first}");
            eprint!("{e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let code = e.downcast_ref::<Diag>().map_or("error", |d| d.code);
            eprintln!("svm: error[{code}]: {}", one_line(&e.to_string()));
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn one_line(s: &str) -> String {
    s.lines().collect::<Vec<_>>().join("; ")
}

fn base_config(path: Option<&Path>, schedule: ScheduleArg) -> Result<SessionConfig> {
    let mut c = SessionConfig { schedule, ..SessionConfig::default() };
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        c.apply_file(&text).map_err(|e| diag("config", format!("{}: {e:#}", p.display())))?;
    }
    c.apply_env_seed(std::env::var(SEED_ENV).ok().as_deref()).map_err(|e| diag("config", format!("{e:#}")))?;
    Ok(c)
}

fn apply_spec(c: &mut SessionConfig, a: &SpecArgs) {
    if let Some(v) = a.window {
        c.window = v;
    }
    if let Some(v) = a.stride {
        c.stride = v;
    }
    if let Some(v) = a.max_order {
        c.max_order = v;
    }
    if let Some(v) = a.order_base {
        c.order_base = v;
    }
    if a.no_spec {
        c.spec = false;
    }
    if let Some(v) = a.schedule {
        c.schedule = v;
    }
    if let Some(v) = a.max_steps {
        c.max_steps = v;
    }
    if let Some(v) = a.identity {
        c.identity = v;
    }
}

fn checked(c: SessionConfig) -> Result<SessionConfig> {
    c.validate().map_err(|e| diag("config", format!("{e:#}")))?;
    Ok(c)
}

pub fn load_program(path: &Path) -> Result<Program> {
    let text = fs::read_to_string(path).map_err(|e| diag("io", format!("reading {}: {e}", path.display())))?;
    parse_program(&text).map_err(|e| {
        let detail: Vec<String> = e.0.iter().map(|d| format!("{}: {d}", path.display())).collect();
        diag("parse", detail.join("; "))
    })
}

fn read_input(path: Option<&Path>) -> Result<Vec<u8>> {
    match path {
        Some(p) => fs::read(p).map_err(|e| diag("io", format!("reading {}: {e}", p.display()))),
        None => Ok(Vec::new()),
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text).map_err(|e| diag("io", format!("writing {}: {e}", p.display())))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Asm { file, output } => {
            let p = load_program(&file)?;
            write_out(output.as_deref(), &emit_text(&p))?;
            Ok(EXIT_OK)
        }
        Command::Run { file, input, strict, print_layout, trace, spec } => {
            let mut c = base_config(cfg_path, ScheduleArg::Fixed)?;
            apply_spec(&mut c, &spec);
            let c = checked(c)?;
            cmd_run(&file, input.as_deref(), strict, print_layout, trace.as_deref(), &c)
        }
        Command::Fuzz { file, seeds, runs, seed, workers, max_len, out, corpus, crashes, trace, session, spec } => {
            let mut c = base_config(cfg_path, ScheduleArg::Prioritized)?;
            apply_spec(&mut c, &spec);
            if let Some(v) = runs {
                c.runs = v;
            }
            if let Some(v) = seed {
                c.seed = v;
            }
            if let Some(v) = workers {
                c.workers = v;
            }
            if let Some(v) = max_len {
                c.max_len = v;
            }
            let c = checked(c)?;
            let base = match &out {
                Some(d) => SessionPaths::in_dir(d),
                None => SessionPaths::in_dir(Path::new(".")),
            };
            let corpus_dir = corpus.unwrap_or(base.corpus);
            let crashes = crashes.unwrap_or_else(|| match out {
                Some(_) => base.crashes.clone(),
                None => corpus_dir.parent().unwrap_or(Path::new(".")).join("crashes"),
            });
            let trace = trace.unwrap_or(base.trace);
            let summary = session.unwrap_or_else(|| trace.parent().unwrap_or(Path::new(".")).join("session.json"));
            let paths = SessionPaths { corpus: corpus_dir, crashes, trace, summary };
            cmd_fuzz(&file, &seeds, &c, &paths)
        }
        Command::Analyze {
            traces,
            output,
            text,
            whitelist,
            session,
            program,
            identity,
            min_branch_execs,
            min_vuln_triggers,
            no_benign_uncontrolled,
        } => {
            let mut c = base_config(cfg_path, ScheduleArg::Prioritized)?;
            if let Some(v) = identity {
                c.identity = v;
            }
            if let Some(v) = min_branch_execs {
                c.min_branch_execs = v;
            }
            if let Some(v) = min_vuln_triggers {
                c.min_vuln_triggers = v;
            }
            if no_benign_uncontrolled {
                c.uncontrolled_benign = false;
            }
            let c = checked(c)?;
            let text = text.or_else(|| output.as_ref().map(|o| o.with_extension("txt")));
            cmd_analyze(&traces, output.as_deref(), text.as_deref(), whitelist.as_deref(), &session, program.as_deref(), &c)
        }
        Command::Harden { file, mode, whitelist, output } => {
            let mut c = base_config(cfg_path, ScheduleArg::Prioritized)?;
            if let Some(m) = mode {
                c.mode = m;
            }
            let c = checked(c)?;
            cmd_harden(&file, whitelist.as_deref(), output.as_deref(), &c)
        }
        Command::Verify { file, corpus, input, against, strict, spec } => {
            let mut c = base_config(cfg_path, ScheduleArg::Fixed)?;
            apply_spec(&mut c, &spec);
            let c = checked(c)?;
            cmd_verify(&file, &corpus, &input, against, strict, &c)
        }
        Command::Oracle { file, input, max_order, window, stride, max_steps, identity } => {
            let mut c = base_config(cfg_path, ScheduleArg::Fixed)?;
            apply_spec(&mut c, &SpecArgs { window, stride, max_steps, identity, ..SpecArgs::default() });
            c.max_order = max_order;
            let c = checked(c)?;
            cmd_oracle(&file, input.as_deref(), &c)
        }
        Command::Gadgets { action } => cmd_gadgets(action),
    }
}

fn print_records(records: &[TraceRecord]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    for r in records {
        writeln!(out, "{}", trace::record_line(r))?;
    }
    Ok(())
}

fn cmd_run(file: &Path, input: Option<&Path>, strict: bool, layout: bool, trace_out: Option<&Path>, c: &SessionConfig) -> Result<u8> {
    let p = load_program(file)?;
    let bytes = read_input(input)?;
    let vm = c.vm_config();
    if layout {
        let l = vm.layout;
        println!("scratch 0x0..{:#x}", l.scratch_size);
        println!("data {:#x} (+{} bytes)", l.data_base, p.data.len());
        println!("stack {:#x}..{:#x}", l.stack_base, l.stack_top);
        println!("heap {:#x}..{:#x} redzone {}", l.heap_base, l.heap_base + l.heap_limit, l.redzone);
        println!("referent window {}", l.referent_window);
    }
    let image = Image::new(&p, vm.layout);
    let x = run_with_exposure(&image, &bytes, &vm, &c.spec_config(), &mut BranchStats::default())
        .map_err(|e| diag("engine", e.to_string()))?;
    let id = InputId::of(&bytes);
    let mode = c.identity.into();
    let records: Vec<TraceRecord> = specvm_core::fuzz::run_records(&x.trace, mode)
        .into_iter()
        .map(|v| TraceRecord::from_violation(v, &p, id, 1))
        .collect();
    print_records(&records)?;
    if let Some(path) = trace_out {
        let mut w = trace::TraceWriter::new(Vec::new(), &Header::new(c))?;
        for r in &records {
            w.write(r)?;
        }
        write_out(Some(path), &String::from_utf8(w.into_inner())?)?;
    }
    let halted = x.result.machine.cpu.halted;
    eprintln!(
        "svm: run: steps={} halted={} violations={} speculative-steps={}",
        x.result.steps,
        halted,
        records.len(),
        x.trace.spec_steps
    );
    if let Some(f) = x.result.fault {
        eprintln!("svm: error[crash]: {} at {}", f.kind.name(), p.id_of(f.at));
        return Ok(EXIT_CRASH);
    }
    Ok(if strict && !records.is_empty() { EXIT_VIOLATIONS } else { EXIT_OK })
}

fn read_seeds(paths: &[PathBuf]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            out.extend(corpus::load_raw(p)?);
        } else {
            out.push(read_input(Some(p))?);
        }
    }
    Ok(out)
}

fn cmd_fuzz(file: &Path, seeds: &[PathBuf], c: &SessionConfig, paths: &SessionPaths) -> Result<u8> {
    let p = load_program(file)?;
    let seeds = read_seeds(seeds)?;
    let s = run_session(&p, &seeds, c, paths)?;
    println!(
        "runs {} corpus {} edges {} keys {} records {} crashes {} ({:.0} runs/s)",
        s.runs, s.corpus, s.edges, s.keys, s.records, s.crashes, s.runs_per_sec
    );
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    traces: &[PathBuf],
    output: Option<&Path>,
    text_out: Option<&Path>,
    wl_out: Option<&Path>,
    sessions: &[PathBuf],
    program: Option<&Path>,
    c: &SessionConfig,
) -> Result<u8> {
    let mut records = Vec::new();
    let mut partial = false;
    for t in traces {
        let text = fs::read_to_string(t).map_err(|e| diag("io", format!("reading {}: {e}", t.display())))?;
        let parsed = trace::parse_trace(&text);
        for e in &parsed.errors {
            eprintln!("svm: warning[malformed-record]: {}:{}: {}", t.display(), e.line, e.message);
            partial = true;
        }
        records.extend(parsed.records);
    }
    let mut sessions = sessions.to_vec();
    if sessions.is_empty() {
        let guess = traces[0].parent().unwrap_or(Path::new(".")).join("session.json");
        if guess.exists() {
            sessions.push(guess);
        }
    }
    let mut stats: std::collections::BTreeMap<InstructionId, u64> = Default::default();
    for s in &sessions {
        let summary = SessionSummary::load(s)?;
        for (b, n) in summary.branch_stats {
            let id: InstructionId =
                b.parse().map_err(|_| diag("parse", format!("{}: bad branch id {b:?}", s.display())))?;
            *stats.entry(id).or_insert(0) += n;
        }
    }
    let program = program.map(load_program).transpose()?;
    let criteria = c.criteria();
    let findings = aggregate(&records, c.identity.into());
    let w = build_whitelist(&findings, &stats, &criteria);
    let r = render_report(&findings, &stats, program.as_ref(), &criteria);
    let header = Header::new(c);
    match output {
        Some(o) => write_out(Some(o), &report::render_json(&r, &w, &header))?,
        None if text_out.is_none() => print!("{}", specvm_core::analyze::render_text(&r)),
        None => {}
    }
    if let Some(t) = text_out {
        write_out(Some(t), &report::render_txt(&r, &header))?;
    }
    if let Some(path) = wl_out {
        if stats.is_empty() {
            eprintln!("svm: warning[no-branch-stats]: no session summary found; whitelist is empty");
        }
        let mut sources: Vec<String> = traces.iter().map(|t| t.display().to_string()).collect();
        sources.extend(sessions.iter().map(|s| s.display().to_string()));
        write_out(Some(path), &whitelist::render(&w, &header, &sources))?;
    }
    eprintln!(
        "svm: analyze: records={} findings={} whitelisted={}",
        records.len(),
        findings.len(),
        w.branches.len()
    );
    Ok(if partial { EXIT_PARTIAL } else { EXIT_OK })
}

fn cmd_harden(file: &Path, wl: Option<&Path>, output: Option<&Path>, c: &SessionConfig) -> Result<u8> {
    let p = load_program(file)?;
    let w = match wl {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| diag("io", format!("reading {}: {e}", path.display())))?;
            whitelist::parse(&text).map_err(|e| diag("parse", format!("{}: {e}", path.display())))?
        }
        None => Whitelist::default(),
    };
    let h = harden(&p, c.mode.into(), &w).map_err(|e| match e {
        HardenError::MaskRegisterInUse { .. } => diag("mask-register-in-use", e.to_string()),
    })?;
    for id in &h.summary.unresolved {
        eprintln!("svm: warning[unknown-branch]: whitelist entry {id} names no branch");
    }
    let s = &h.summary;
    let summary = format!(
        "{{\"mode\":\"{}\",\"total\":{},\"instrumented\":{},\"whitelisted\":{}}}",
        c.mode.to_possible_value().expect("value").get_name(),
        s.total,
        s.instrumented,
        s.whitelisted
    );
    let text = format!("; svm_header {}\n; harden {summary}\n{}", Header::new(c).to_line(), emit_text(&h.program));
    write_out(output, &text)?;
    if output.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(EXIT_OK)
}

fn cmd_verify(file: &Path, dirs: &[PathBuf], inputs: &[PathBuf], against: Against, strict: bool, c: &SessionConfig) -> Result<u8> {
    let p = load_program(file)?;
    let mut all: Vec<Vec<u8>> = Vec::new();
    for d in dirs {
        all.extend(corpus::load_raw(d)?);
    }
    for i in inputs {
        all.push(read_input(Some(i))?);
    }
    if all.is_empty() {
        all.push(Vec::new());
    }
    let fenced = instrumented_branches(&p);
    let set: BTreeSet<_> = match against {
        Against::Instrumented => fenced,
        Against::All => p.branches().into_iter().collect(),
        Against::Uninstrumented => p.branches().into_iter().filter(|b| !fenced.contains(b)).collect(),
    };
    let mode = c.identity.into();
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for input in &all {
        let found = verify_hardening(&p, [input.as_slice()], &c.spec_config(), &c.vm_config(), &set)
            .map_err(|e| diag("engine", e.to_string()))?;
        for v in found {
            if seen.insert((specvm_core::detect::dedup_key(&v, mode), v.branches.clone())) {
                records.push(TraceRecord::from_violation(&v, &p, InputId::of(input), 0));
            }
        }
    }
    print_records(&records)?;
    eprintln!("svm: verify: inputs={} branches={} residual={}", all.len(), set.len(), records.len());
    Ok(if strict && !records.is_empty() { EXIT_VIOLATIONS } else { EXIT_OK })
}

fn cmd_oracle(file: &Path, input: Option<&Path>, c: &SessionConfig) -> Result<u8> {
    let p = load_program(file)?;
    let bytes = read_input(input)?;
    let image = Image::new(&p, c.vm_config().layout);
    let cfg = OracleConfig {
        max_order: c.max_order,
        window: c.window,
        stride: c.stride,
        vm: c.vm_config(),
        mode: c.identity.into(),
    };
    let set = enumerate_records(&image, &bytes, &cfg).map_err(|e| diag("enumeration-too-large", e.to_string()))?;
    let id = InputId::of(&bytes);
    let records: Vec<TraceRecord> = set.iter().map(|v| TraceRecord::from_violation(v, &p, id, 0)).collect();
    print_records(&records)?;
    Ok(EXIT_OK)
}

fn cmd_gadgets(action: GadgetAction) -> Result<u8> {
    match action {
        GadgetAction::List => {
            for id in gadget_ids() {
                let g = builtin_gadget(id).expect("builtin id");
                println!(
                    "{id:>2}  {} {} order {}  {}",
                    g.expected.offending,
                    g.expected.kind.name(),
                    g.expected.min_order,
                    g.title
                );
            }
        }
        GadgetAction::Emit { id, output, trigger, safe } => {
            let g = builtin_gadget(id).map_err(|e| diag("usage", e.to_string()))?;
            write_out(output.as_deref(), g.source)?;
            if let Some(t) = trigger {
                fs::write(&t, &g.trigger).map_err(|e| diag("io", format!("writing {}: {e}", t.display())))?;
            }
            if let Some(s) = safe {
                fs::write(&s, &g.safe).map_err(|e| diag("io", format!("writing {}: {e}", s.display())))?;
            }
        }
    }
    Ok(EXIT_OK)
}

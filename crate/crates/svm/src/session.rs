//! Fuzzing sessions with on-disk corpus, crashes, trace and summary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use specvm_core::analyze::TraceRecord;
use specvm_core::detect::IdentityMode;
use specvm_core::fuzz::{fuzz_loop, run_records, FuzzState, RunEvent, RunSink};
use specvm_core::isa::{Loc, Program};
use specvm_core::spec::{run_with_exposure, BranchCounter, BranchStats};
use specvm_core::vm::Image;

use crate::config::{Header, SessionConfig, VERSION};
use crate::corpus;
use crate::trace::TraceWriter;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionPaths {
    pub corpus: PathBuf,
    pub crashes: PathBuf,
    pub trace: PathBuf,
    pub summary: PathBuf,
}

impl SessionPaths {
    /// `corpus/`, `crashes/`, `trace.jsonl` and `session.json` under `dir`.
    pub fn in_dir(dir: &Path) -> SessionPaths {
        SessionPaths {
            corpus: dir.join("corpus"),
            crashes: dir.join("crashes"),
            trace: dir.join("trace.jsonl"),
            summary: dir.join("session.json"),
        }
    }
}

/// Contents of `session.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub version: String,
    pub seed: u64,
    pub runs: u64,
    pub edges: usize,
    pub keys: usize,
    pub corpus: usize,
    pub crashes: u64,
    pub records: u64,
    pub wall_time_secs: f64,
    pub runs_per_sec: f64,
    /// Runs in which each branch executed, by `fn:block:idx`.
    pub branch_stats: BTreeMap<String, u64>,
    pub config: SessionConfig,
}

impl SessionSummary {
    pub fn load(path: &Path) -> Result<SessionSummary> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

struct Sink<'a> {
    program: &'a Program,
    mode: IdentityMode,
    trace: TraceWriter<BufWriter<File>>,
    paths: &'a SessionPaths,
}

impl RunSink for Sink<'_> {
    type Error = anyhow::Error;

    fn on_run(&mut self, e: &RunEvent<'_>) -> Result<()> {
        let id = e.absorbed.id;
        for v in run_records(&e.exposure.trace, self.mode) {
            self.trace.write(&TraceRecord::from_violation(v, self.program, id, e.run))?;
        }
        if let Some(reason) = e.absorbed.kept {
            corpus::save(&self.paths.corpus, id, reason, e.input)?;
        }
        if e.absorbed.crash.is_some() {
            corpus::save_crash(&self.paths.crashes, id, e.input)?;
        }
        Ok(())
    }
}

struct SharedStats<'a>(&'a Mutex<BranchStats>);

impl BranchCounter for SharedStats<'_> {
    fn observe(&mut self, branch: Loc) -> u64 {
        self.0.lock().expect("stats lock").observe(branch)
    }
}

struct Shared<'a> {
    state: FuzzState,
    sink: Sink<'a>,
    claimed: u64,
}

/// Runs a campaign. Seeds come first, followed by any entries already in
/// the corpus directory. With one worker the trace is a pure function of
/// (program, seeds, existing corpus, config).
pub fn run_session(program: &Program, seeds: &[Vec<u8>], cfg: &SessionConfig, paths: &SessionPaths) -> Result<SessionSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let fuzz = cfg.fuzz_config()?;
    let spec = cfg.spec_config();
    let vm = cfg.vm_config();
    let image = Image::new(program, vm.layout);

    let mut all_seeds = seeds.to_vec();
    all_seeds.extend(corpus::load(&paths.corpus)?.into_iter().map(|s| s.bytes));
    fs::create_dir_all(&paths.corpus).with_context(|| format!("creating {}", paths.corpus.display()))?;
    if let Some(parent) = paths.trace.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = File::create(&paths.trace).with_context(|| format!("creating {}", paths.trace.display()))?;
    let trace = TraceWriter::new(BufWriter::new(file), &Header::new(cfg))?;
    let mut sink = Sink { program, mode: fuzz.identity, trace, paths };
    let mut state = FuzzState::new();
    let mut stats = BranchStats::default();

    if fuzz.workers <= 1 {
        fuzz_loop(&image, &all_seeds, &mut state, &mut stats, &fuzz, &spec, &vm, &mut sink).map_err(|e| anyhow!("{e}"))?;
    } else {
        let seed_only = specvm_core::fuzz::FuzzConfig { max_runs: 0, ..fuzz.clone() };
        fuzz_loop(&image, &all_seeds, &mut state, &mut stats, &seed_only, &spec, &vm, &mut sink)
            .map_err(|e| anyhow!("{e}"))?;
        let claimed = state.runs;
        let shared = Mutex::new(Shared { state, sink, claimed });
        let stats_lock = Mutex::new(stats);
        let errors: Mutex<Vec<anyhow::Error>> = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for w in 0..fuzz.workers {
                let (shared, stats_lock, errors, image, fuzz) = (&shared, &stats_lock, &errors, &image, &fuzz);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(fuzz.seed ^ (w as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    let mut counter = SharedStats(stats_lock);
                    loop {
                        let child = {
                            let mut g = shared.lock().expect("session lock");
                            if g.claimed >= fuzz.max_runs {
                                break;
                            }
                            g.claimed += 1;
                            g.state.next_child(fuzz, &mut rng)
                        };
                        let result = run_with_exposure(image, &child, &vm, &spec, &mut counter)
                            .map_err(|e| anyhow!("engine: {e}"))
                            .and_then(|x| {
                                let mut g = shared.lock().expect("session lock");
                                let absorbed = g.state.absorb(&child, &x, fuzz.identity, false);
                                let event = RunEvent { run: g.state.runs, input: &child, exposure: &x, absorbed: &absorbed };
                                g.sink.on_run(&event)
                            });
                        if let Err(e) = result {
                            errors.lock().expect("error lock").push(e);
                            shared.lock().expect("session lock").claimed = u64::MAX;
                            break;
                        }
                    }
                });
            }
        });
        if let Some(e) = errors.into_inner().expect("error lock").into_iter().next() {
            return Err(e);
        }
        let g = shared.into_inner().expect("session lock");
        state = g.state;
        sink = g.sink;
        stats = stats_lock.into_inner().expect("stats lock");
    }
    sink.trace.flush()?;

    let wall = started.elapsed().as_secs_f64();
    let summary = SessionSummary {
        version: VERSION.to_string(),
        seed: fuzz.seed,
        runs: state.runs,
        edges: state.coverage.len(),
        keys: state.keys.len(),
        corpus: state.corpus.len(),
        crashes: state.crashes,
        records: sink.trace.records,
        wall_time_secs: wall,
        runs_per_sec: if wall > 0.0 { state.runs as f64 / wall } else { 0.0 },
        branch_stats: stats.counts.iter().map(|(b, n)| (program.id_of(*b).to_string(), *n)).collect(),
        config: cfg.clone(),
    };
    if let Some(parent) = paths.summary.parent() {
        fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(&paths.summary, json + "\n").with_context(|| format!("writing {}", paths.summary.display()))?;
    Ok(summary)
}

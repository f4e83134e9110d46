//! Random small programs for differential testing.
//!
//! Programs are built from snippets that read input bytes, compute indices,
//! touch heap objects near their bounds, branch on input-derived values and
//! call a helper. Control flow is forward except for one optional bounded
//! loop, so runs stay short.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::asm::parse_program;
use crate::isa::Program;

/// Limits for [`random_program`].
#[derive(Clone, Copy, Debug)]
pub struct GenConfig {
    pub max_insts: usize,
    pub max_input: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { max_insts: 40, max_input: 8 }
    }
}

const CONDS: [&str; 6] = ["eq", "ne", "lt", "le", "gt", "ge"];
const OPS: [&str; 9] = ["add", "sub", "mul", "and", "or", "xor", "shl", "shr", "div"];

struct Gen<'r, R: Rng + ?Sized> {
    rng: &'r mut R,
    cfg: GenConfig,
    budget: usize,
    sizes: [u64; 2],
    /// Index register and base of a guarded access for the next block.
    guard: Option<(String, &'static str)>,
}

impl<R: Rng + ?Sized> Gen<'_, R> {
    /// Scratch registers; r1 and r2 hold heap bases, r13 the loop counter.
    fn reg(&mut self) -> String {
        format!("r{}", self.rng.gen_range(3..13))
    }

    fn base(&mut self) -> &'static str {
        if self.rng.gen_bool(0.5) {
            "r1"
        } else {
            "r2"
        }
    }

    fn small(&mut self) -> u64 {
        *[0u64, 1, 2, 3, 7, 8, 15, 16, 24, 31, 32, 64, 255].choose(self.rng).unwrap()
    }

    fn input_off(&mut self) -> usize {
        self.rng.gen_range(0..self.cfg.max_input.max(1))
    }

    fn operand(&mut self) -> String {
        if self.rng.gen_bool(0.5) {
            self.reg()
        } else {
            format!("{}", self.small())
        }
    }

    fn snippet(&mut self, in_helper: bool) -> Vec<String> {
        let mut out = Vec::new();
        let choice = self.rng.gen_range(0..12);
        match choice {
            0 | 1 => out.push(format!("input {}, {}", self.reg(), self.input_off())),
            2 => out.push(format!("const {}, {}", self.reg(), self.small())),
            3 => {
                let op = OPS.choose(self.rng).unwrap();
                out.push(format!("{op} {}, {}, {}", self.reg(), self.reg(), self.operand()));
            }
            4 | 5 => {
                // Input-indexed load: base + (byte << 3).
                let (i, a, d) = (self.reg(), self.reg(), self.reg());
                let base = self.base();
                out.push(format!("input {i}, {}", self.input_off()));
                out.push(format!("shl {i}, {i}, 3"));
                out.push(format!("add {a}, {base}, {i}"));
                out.push(format!("load {d}, {a}, {}", self.small()));
            }
            6 => {
                let base = self.base();
                out.push(format!("load {}, {base}, {}", self.reg(), self.small()));
            }
            7 => {
                let base = self.base();
                out.push(format!("store {base}, {}, {}", self.small(), self.reg()));
            }
            8 => {
                let (i, a) = (self.reg(), self.reg());
                let base = self.base();
                out.push(format!("input {i}, {}", self.input_off()));
                out.push(format!("add {a}, {base}, {i}"));
                out.push(format!("store {a}, 0, {}", self.reg()));
            }
            9 if !in_helper => out.push(String::from("call f")),
            10 => {
                out.push(format!("cmp {}, {}", self.reg(), self.operand()));
                let c = CONDS.choose(self.rng).unwrap();
                out.push(format!("setcc {}, {c}", self.reg()));
            }
            11 if self.rng.gen_bool(0.3) => out.push(String::from("fence")),
            _ => out.push(format!("mov {}, {}", self.reg(), self.reg())),
        }
        out
    }

    fn body(&mut self, lines: &mut Vec<String>, in_helper: bool) {
        let n = self.rng.gen_range(0..4);
        for _ in 0..n {
            let s = self.snippet(in_helper);
            if s.len() > self.budget {
                break;
            }
            self.budget -= s.len();
            lines.extend(s);
        }
    }

    fn compare(&mut self) -> String {
        if self.rng.gen_bool(0.7) {
            format!("cmp {}, {}", self.reg(), self.small())
        } else {
            format!("cmp {}, {}", self.reg(), self.reg())
        }
    }

    fn program(&mut self) -> String {
        let blocks = self.rng.gen_range(2..7);
        let helper = self.rng.gen_bool(0.4);
        let loop_block = if blocks > 2 && self.rng.gen_bool(0.3) { Some(self.rng.gen_range(1..blocks - 1)) } else { None };
        // Reserve room for every terminator, the prologue and the helper.
        self.budget = self.cfg.max_insts.saturating_sub(2 * blocks + 5);
        let mut src = String::from("fn main:\n");
        for b in 0..blocks {
            let mut lines = Vec::new();
            if b == 0 {
                let (s1, s2) = (8 * self.rng.gen_range(1..9), 8 * self.rng.gen_range(1..9));
                lines.push(format!("alloc r2, {s2}"));
                lines.push(format!("alloc r1, {s1}"));
                lines.push(String::from("const r13, 0"));
                self.sizes = [s1, s2];
            }
            if let Some((i, base)) = self.guard.take() {
                let (t, a, d) = (self.reg(), self.reg(), self.reg());
                lines.push(format!("shl {t}, {i}, 3"));
                lines.push(format!("add {a}, {base}, {t}"));
                lines.push(format!("load {d}, {a}, 0"));
            }
            self.body(&mut lines, false);
            if Some(b) == loop_block {
                lines.push(String::from("add r13, r13, 1"));
                lines.push(format!("cmp r13, {}", self.rng.gen_range(2..5)));
                lines.push(format!("br lt, b{b}, b{}", b + 1));
            } else if b + 1 == blocks {
                lines.push(String::from("halt"));
            } else {
                let kind = self.rng.gen_range(0..10);
                let fwd = |g: &mut Self| format!("b{}", g.rng.gen_range(b + 1..blocks));
                if kind < 3 && b + 2 < blocks && self.budget >= 5 {
                    // Bounds check guarding an indexed load in the next block.
                    self.budget -= 5;
                    let i = self.reg();
                    let base = self.base();
                    let bound = self.sizes[(base == "r2") as usize] / 8;
                    lines.push(format!("input {i}, {}", self.input_off()));
                    lines.push(format!("cmp {i}, {bound}"));
                    let skip = self.rng.gen_range(b + 2..blocks);
                    lines.push(format!("br lt, b{}, b{skip}", b + 1));
                    self.guard = Some((i, base));
                } else if kind < 7 {
                    lines.push(self.compare());
                    let c = CONDS.choose(self.rng).unwrap();
                    let (x, y) = (fwd(self), fwd(self));
                    lines.push(format!("br {c}, {x}, {y}"));
                } else if kind < 9 {
                    lines.push(format!("jmp {}", fwd(self)));
                } else {
                    let n = self.rng.gen_range(1..4);
                    let targets: Vec<String> = (0..n).map(|_| fwd(self)).collect();
                    lines.push(format!("jtab {}, [{}]", self.reg(), targets.join(", ")));
                }
            }
            src += &format!("b{b}:\n");
            for l in lines {
                src += &format!("  {l}\n");
            }
        }
        if helper {
            let mut lines = Vec::new();
            self.body(&mut lines, true);
            src += "fn f:\nh0:\n";
            for l in lines {
                src += &format!("  {l}\n");
            }
            src += "  ret\n";
        } else {
            src = src.replace("  call f\n", "");
        }
        src
    }
}

/// Source text of a random valid program.
pub fn random_source<R: Rng + ?Sized>(rng: &mut R, cfg: GenConfig) -> String {
    let mut g = Gen { rng, cfg, budget: 0, sizes: [8, 8], guard: None };
    g.program()
}

/// A random valid program with at most `cfg.max_insts` instructions.
pub fn random_program<R: Rng + ?Sized>(rng: &mut R, cfg: GenConfig) -> Program {
    let src = random_source(rng, cfg);
    parse_program(&src).expect("generator emits valid programs")
}

pub fn random_input<R: Rng + ?Sized>(rng: &mut R, cfg: GenConfig) -> Vec<u8> {
    let len = rng.gen_range(0..=cfg.max_input);
    (0..len)
        .map(|_| if rng.gen_bool(0.5) { rng.gen_range(0..24) } else { rng.gen() })
        .collect()
}

//! Seeded generator for (program, summary) pairs over the mini-language.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RawPair, Task};
use crate::error::{Error, Result};
use crate::minilang::{pretty_print, AstNode, NodeKind, OPERATORS};

const IDENTIFIERS: [&str; 16] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub max_stmts: usize,
    pub max_expr_depth: usize,
    pub identifier_pool_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 100,
            max_stmts: 3,
            max_expr_depth: 2,
            identifier_pool_size: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("synth {what}")))
            }
        };
        check(self.count > 0, "count must be > 0")?;
        check((1..=8).contains(&self.max_stmts), "max_stmts must be in [1, 8]")?;
        check(
            (1..=4).contains(&self.max_expr_depth),
            "max_expr_depth must be in [1, 4]",
        )?;
        check(
            (2..=16).contains(&self.identifier_pool_size),
            "identifier_pool_size must be in [2, 16]",
        )
    }
}

struct Generator<'c> {
    cfg: &'c SynthConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn ident(&mut self) -> &'static str {
        IDENTIFIERS[self.rng.gen_range(0..self.cfg.identifier_pool_size)]
    }

    fn leaf(&mut self) -> AstNode {
        if self.rng.gen_bool(0.65) {
            AstNode::ident(self.ident())
        } else {
            AstNode::number(&self.rng.gen_range(0..10).to_string())
        }
    }

    fn expr(&mut self, depth: usize) -> AstNode {
        if depth <= 1 || self.rng.gen_bool(0.4) {
            return self.leaf();
        }
        let ops = self.rng.gen_range(1..=2);
        let mut lhs = self.leaf();
        for _ in 0..ops {
            let op = OPERATORS[self.rng.gen_range(0..OPERATORS.len())];
            let rhs = if depth > 2 && self.rng.gen_bool(0.3) {
                self.expr(depth - 1)
            } else {
                self.leaf()
            };
            lhs = AstNode::binary(op, lhs, rhs);
        }
        lhs
    }

    fn assign(&mut self) -> AstNode {
        let target = self.ident();
        let depth = self.cfg.max_expr_depth;
        AstNode::assign(target, self.expr(depth))
    }

    fn statement(&mut self, allow_if: bool) -> AstNode {
        if allow_if && self.rng.gen_bool(0.2) {
            let cond = self.expr(self.cfg.max_expr_depth.min(2));
            let body_len = self.rng.gen_range(1..=2);
            let body = (0..body_len).map(|_| self.assign()).collect();
            AstNode::if_stmt(cond, body)
        } else {
            self.assign()
        }
    }

    fn program(&mut self) -> AstNode {
        let n = self.rng.gen_range(1..=self.cfg.max_stmts);
        let mut stmts: Vec<AstNode> = (0..n - 1).map(|_| self.statement(true)).collect();
        let depth = self.cfg.max_expr_depth;
        stmts.push(AstNode::ret(self.expr(depth)));
        AstNode::program(stmts)
    }
}

fn op_word(op: &str) -> &'static str {
    match op {
        "+" => "sum",
        "-" => "difference",
        "*" => "product",
        "/" => "quotient",
        "<" => "less",
        ">" => "greater",
        _ => "operation",
    }
}

fn describe(expr: &AstNode, out: &mut Vec<String>) {
    match expr.kind {
        NodeKind::Identifier => out.push(expr.label.clone()),
        NodeKind::Number => out.push("constant".into()),
        NodeKind::BinaryOp if expr.children.iter().all(|c| c.kind.is_leaf()) => {
            out.push(op_word(&expr.label).into());
            out.push("of".into());
            describe(&expr.children[0], out);
            out.push("and".into());
            describe(&expr.children[1], out);
        }
        _ => {
            out.push(op_word(&expr.label).into());
            out.push("expression".into());
        }
    }
}

fn summarize_statements(stmts: &[AstNode], out: &mut Vec<String>) {
    for (i, stmt) in stmts.iter().enumerate() {
        if i > 0 {
            out.push("then".into());
        }
        match stmt.kind {
            NodeKind::Assign => {
                out.push("set".into());
                out.push(stmt.children[0].label.clone());
                out.push("to".into());
                describe(&stmt.children[1], out);
            }
            NodeKind::Return => {
                out.push("return".into());
                describe(&stmt.children[0], out);
            }
            NodeKind::If => {
                out.push("when".into());
                describe(&stmt.children[0], out);
                out.push("do".into());
                summarize_statements(&stmt.children[1].children, out);
                out.push("end".into());
            }
            _ => {}
        }
    }
}

/// Deterministic English template for a program, e.g.
/// `a = 1 ; return a ;` becomes `set a to constant then return a`.
pub fn summarize(program: &AstNode) -> String {
    let mut out = Vec::new();
    summarize_statements(&program.children, &mut out);
    out.join(" ")
}

/// The programs behind `synth_generate`, in order.
pub fn synth_program(cfg: &SynthConfig) -> Vec<AstNode> {
    let mut gen = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    (0..cfg.count).map(|_| gen.program()).collect()
}

/// Program/summary pairs; for generation the direction is reversed.
pub fn synth_generate(cfg: &SynthConfig, task: Task) -> Result<Vec<RawPair>> {
    cfg.validate()?;
    Ok(synth_program(cfg)
        .iter()
        .map(|prog| {
            let code = pretty_print(prog);
            let summary = summarize(prog);
            match task {
                Task::Summarization => RawPair {
                    src: code,
                    tgt: summary,
                },
                Task::Generation => RawPair {
                    src: summary,
                    tgt: code,
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::{parse_source, tokenize};

    #[test]
    fn deterministic_for_same_config() {
        let cfg = SynthConfig {
            seed: 7,
            count: 3,
            ..SynthConfig::default()
        };
        assert_eq!(
            synth_generate(&cfg, Task::Summarization).unwrap(),
            synth_generate(&cfg, Task::Summarization).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let a = SynthConfig {
            seed: 1,
            count: 20,
            ..SynthConfig::default()
        };
        let b = SynthConfig { seed: 2, ..a };
        assert_ne!(
            synth_generate(&a, Task::Summarization).unwrap(),
            synth_generate(&b, Task::Summarization).unwrap()
        );
    }

    #[test]
    fn zero_count_is_rejected() {
        let cfg = SynthConfig {
            count: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(
            synth_generate(&cfg, Task::Summarization),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn out_of_range_settings_are_rejected() {
        let base = SynthConfig::default();
        for bad in [
            SynthConfig { max_stmts: 0, ..base },
            SynthConfig { max_stmts: 9, ..base },
            SynthConfig { max_expr_depth: 5, ..base },
            SynthConfig { identifier_pool_size: 1, ..base },
            SynthConfig { identifier_pool_size: 17, ..base },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn every_generated_source_parses() {
        for (seed, depth, stmts) in [(0, 4, 8), (1, 1, 1), (2, 3, 5)] {
            let cfg = SynthConfig {
                seed,
                count: 1000,
                max_stmts: stmts,
                max_expr_depth: depth,
                identifier_pool_size: 16,
            };
            for pair in synth_generate(&cfg, Task::Summarization).unwrap() {
                parse_source(&pair.src).unwrap_or_else(|e| panic!("{}: {e}", pair.src));
                assert!(!pair.tgt.is_empty());
            }
        }
    }

    #[test]
    fn printed_programs_round_trip() {
        let cfg = SynthConfig {
            seed: 3,
            count: 500,
            max_stmts: 6,
            max_expr_depth: 4,
            identifier_pool_size: 8,
        };
        for prog in synth_program(&cfg) {
            assert!(prog.is_well_formed());
            let text = pretty_print(&prog);
            let reparsed = crate::minilang::parse(&tokenize(&text).unwrap()).unwrap();
            assert_eq!(reparsed, prog, "{text}");
        }
    }

    #[test]
    fn generation_reverses_direction() {
        let cfg = SynthConfig {
            seed: 5,
            count: 4,
            ..SynthConfig::default()
        };
        let summ = synth_generate(&cfg, Task::Summarization).unwrap();
        let gen = synth_generate(&cfg, Task::Generation).unwrap();
        for (s, g) in summ.iter().zip(&gen) {
            assert_eq!(s.src, g.tgt);
            assert_eq!(s.tgt, g.src);
        }
    }

    #[test]
    fn summary_template() {
        let (_, ast) = parse_source("a = 1 ; if ( a < b ) { c = a * 2 ; } return a + ( b - c ) ;").unwrap();
        assert_eq!(
            summarize(&ast),
            "set a to constant then when less of a and b do set c to product of a and constant end then return sum expression"
        );
    }
}

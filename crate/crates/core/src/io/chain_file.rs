//! Chain file: sectioned text, one module table entry per distinct module.
//!
//! ```text
//! devchain-chain v1
//! @@ config
//! <run config as TOML>
//! @@ estimator
//! @@ modules <count>
//! @@ slots
//! @@ reuse_index
//! @@ decisions
//! @@ curves
//! @@ archive <count>
//! @@ end sha256=<digest of everything above this line>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::tables::{parse_curves, parse_decision_log, render_curves, render_decision_log};
use super::{fmt_f64, parse_f64, read_text, sha256_hex, write_text};
use crate::chain::{ArchivedModule, ChainModule, ChainState};
use crate::domain::RunConfig;
use crate::error::{Error, Result};
use crate::scorer::{AgeEstimator, FitRecord};
use crate::transformer::{Frame, HiddenLayer, ProvenanceRecord, ReversibleTransformer, StageMap};

pub const CHAIN_VERSION: &str = "v1";
const MAGIC: &str = "devchain-chain";
const SECTIONS: [&str; 8] = [
    "config",
    "estimator",
    "modules",
    "slots",
    "reuse_index",
    "decisions",
    "curves",
    "archive",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedChain {
    pub chain: ChainState,
    pub estimator: Option<AgeEstimator>,
}

fn floats(tag: &str, values: impl IntoIterator<Item = f64>) -> String {
    let mut s = tag.to_string();
    for v in values {
        s.push(' ');
        s.push_str(&fmt_f64(v));
    }
    s
}

fn push_map(out: &mut Vec<String>, name: &str, m: &StageMap) {
    out.push(format!(
        "{name} {} {} {}",
        m.dim(),
        m.hidden_width(),
        m.factored
    ));
    // nalgebra stores column-major; rows are written explicitly.
    out.push(floats("weight", m.weight.transpose().iter().copied()));
    out.push(floats("bias", m.bias.iter().copied()));
    out.push(floats("center", m.center.iter().copied()));
    if let Some(h) = &m.hidden {
        out.push(floats("hidden_input", h.input.transpose().iter().copied()));
        out.push(floats("hidden_offset", h.offset.iter().copied()));
        out.push(floats("hidden_output", h.output.transpose().iter().copied()));
    }
}

fn push_module(out: &mut Vec<String>, m: &ChainModule) {
    let t = &m.transformer;
    out.push(format!(
        "module {} origin {} {} trained_steps {}",
        m.id, m.origin.0, m.origin.1, t.trained_steps
    ));
    let mut prov = String::from("provenance");
    for p in &t.provenance {
        prov.push_str(&format!(" {}:{}:{}", p.source_stage, p.target_stage, p.steps));
    }
    out.push(prov);
    match &t.frame {
        None => out.push("frame none".into()),
        Some(f) => {
            out.push(format!("frame {}", f.dim()));
            out.push(floats("origin", f.origin.iter().copied()));
            out.push(floats("whiten", f.whiten.transpose().iter().copied()));
            out.push(floats("unwhiten", f.unwhiten.transpose().iter().copied()));
        }
    }
    push_map(out, "forward", &t.forward);
    push_map(out, "backward", &t.backward);
}

/// Full chain file text, digest line included.
pub fn render_chain(chain: &ChainState, estimator: Option<&AgeEstimator>) -> Result<String> {
    let mut out = vec![format!("{MAGIC} {CHAIN_VERSION}"), "@@ config".into()];
    let config = toml::to_string(&chain.config)
        .map_err(|e| Error::ChainFile(format!("cannot serialize config: {e}")))?;
    out.extend(config.lines().map(str::to_string));

    out.push("@@ estimator".into());
    match estimator {
        None => out.push("none".into()),
        Some(g) => {
            out.push(floats("weights", g.weights.iter().copied()));
            out.push(floats("bias", [g.bias]));
            out.push(floats("ridge", [g.ridge]));
            out.push(format!("fit {} {}", g.record.n_samples, g.record.seed));
        }
    }

    out.push(format!("@@ modules {}", chain.modules.len()));
    for m in chain.modules.values() {
        push_module(&mut out, m);
    }

    out.push("@@ slots".into());
    out.push(
        chain
            .slots
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    out.push("@@ reuse_index".into());
    out.push(chain.reuse_index.to_string());
    out.push("@@ decisions".into());
    out.extend(render_decision_log(&chain.decision_log)?.lines().map(str::to_string));
    out.push("@@ curves".into());
    out.extend(render_curves(&chain.curves)?.lines().map(str::to_string));
    out.push(format!("@@ archive {}", chain.archive.len()));
    for a in &chain.archive {
        out.push(format!("released {}", a.iteration));
        push_module(&mut out, &a.module);
    }

    let mut body = out.join("\n");
    body.push('\n');
    let digest = sha256_hex(body.as_bytes());
    body.push_str(&format!("@@ end sha256={digest}\n"));
    Ok(body)
}

pub fn save_chain(path: &Path, chain: &ChainState, estimator: Option<&AgeEstimator>) -> Result<()> {
    write_text(path, &render_chain(chain, estimator)?)
}

pub fn load_chain(path: &Path) -> Result<LoadedChain> {
    read_chain(&read_text(path)?)
}

/// Line cursor over one section.
struct Section<'a> {
    name: &'static str,
    lines: &'a [&'a str],
    pos: usize,
}

impl<'a> Section<'a> {
    fn err(&self, m: impl std::fmt::Display) -> Error {
        Error::ChainFile(format!("section '{}': {m}", self.name))
    }

    fn next(&mut self) -> Result<&'a str> {
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of section"))?;
        self.pos += 1;
        Ok(line)
    }

    fn tagged(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(self.err(format!("expected '{tag}', got '{line}'")));
        }
        Ok(parts.collect())
    }

    fn floats(&mut self, tag: &str, n: usize) -> Result<Vec<f64>> {
        let parts = self.tagged(tag)?;
        if parts.len() != n {
            return Err(self.err(format!("'{tag}' has {} values, expected {n}", parts.len())));
        }
        parts
            .iter()
            .map(|p| parse_f64(p).ok_or_else(|| self.err(format!("'{tag}': bad number '{p}'"))))
            .collect()
    }

    fn int<T: std::str::FromStr>(&self, text: &str) -> Result<T> {
        text.parse()
            .map_err(|_| self.err(format!("bad integer '{text}'")))
    }

    fn rest(&self) -> String {
        let mut s = self.lines[self.pos..].join("\n");
        s.push('\n');
        s
    }

    fn map(&mut self, tag: &str) -> Result<StageMap> {
        let head = self.tagged(tag)?;
        if head.len() != 3 {
            return Err(self.err(format!("'{tag}' header needs d, hidden width, factored")));
        }
        let d: usize = self.int(head[0])?;
        let h: usize = self.int(head[1])?;
        let factored = match head[2] {
            "true" => true,
            "false" => false,
            other => return Err(self.err(format!("bad factored flag '{other}'"))),
        };
        let weight = DMatrix::from_row_slice(d, d, &self.floats("weight", d * d)?);
        let bias = DVector::from_vec(self.floats("bias", d)?);
        let center = DVector::from_vec(self.floats("center", d)?);
        let hidden = if h > 0 {
            Some(HiddenLayer {
                input: DMatrix::from_row_slice(h, d, &self.floats("hidden_input", h * d)?),
                offset: DVector::from_vec(self.floats("hidden_offset", h)?),
                output: DMatrix::from_row_slice(d, h, &self.floats("hidden_output", d * h)?),
            })
        } else {
            None
        };
        Ok(StageMap {
            weight,
            bias,
            center,
            hidden,
            factored,
            basis: None,
        })
    }

    fn frame(&mut self) -> Result<Option<Frame>> {
        let head = self.tagged("frame")?;
        if head == ["none"] {
            return Ok(None);
        }
        let d: usize = self.int(head.first().copied().unwrap_or(""))?;
        Ok(Some(Frame {
            origin: DVector::from_vec(self.floats("origin", d)?),
            whiten: DMatrix::from_row_slice(d, d, &self.floats("whiten", d * d)?),
            unwhiten: DMatrix::from_row_slice(d, d, &self.floats("unwhiten", d * d)?),
        }))
    }

    fn module(&mut self) -> Result<ChainModule> {
        let head = self.tagged("module")?;
        if head.len() != 6 || head[1] != "origin" || head[4] != "trained_steps" {
            return Err(self.err("malformed module header"));
        }
        let id = self.int(head[0])?;
        let origin = (self.int(head[2])?, self.int(head[3])?);
        let trained_steps = self.int(head[5])?;
        let mut provenance = Vec::new();
        for p in self.tagged("provenance")? {
            let f: Vec<&str> = p.split(':').collect();
            if f.len() != 3 {
                return Err(self.err(format!("bad provenance entry '{p}'")));
            }
            provenance.push(ProvenanceRecord {
                source_stage: self.int(f[0])?,
                target_stage: self.int(f[1])?,
                steps: self.int(f[2])?,
            });
        }
        let frame = self.frame()?;
        let mut forward = self.map("forward")?;
        let mut backward = self.map("backward")?;
        if let Some(f) = &frame {
            for m in [&mut forward, &mut backward] {
                if m.factored {
                    m.basis = Some((f.whiten.clone(), f.unwhiten.clone()));
                }
            }
        }
        if forward.dim() != backward.dim() || frame.as_ref().is_some_and(|f| f.dim() != forward.dim()) {
            return Err(self.err(format!("module {id}: inconsistent dimensions")));
        }
        Ok(ChainModule {
            id,
            origin,
            transformer: ReversibleTransformer {
                frame,
                forward,
                backward,
                trained_steps,
                provenance,
            },
        })
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.lines.len() {
            return Err(self.err(format!("unexpected line '{}'", self.lines[self.pos])));
        }
        Ok(())
    }
}

/// Parses chain file text, checking version, completeness and digest.
pub fn read_chain(text: &str) -> Result<LoadedChain> {
    let lines: Vec<&str> = text.lines().collect();
    let first = lines.first().copied().unwrap_or("");
    match first.split_once(' ') {
        Some((MAGIC, CHAIN_VERSION)) => {}
        Some((MAGIC, other)) => {
            return Err(Error::ChainFile(format!("unsupported version '{other}'")))
        }
        _ => return Err(Error::ChainFile("not a chain file (missing version tag)".into())),
    }

    // (name, count argument, first body line, end line)
    let mut found: Vec<(&str, Option<&str>, usize)> = Vec::new();
    let mut end: Option<(usize, &str)> = None;
    for (i, line) in lines.iter().enumerate().skip(1) {
        if let Some(rest) = line.strip_prefix("@@ ") {
            let (name, arg) = match rest.split_once(' ') {
                Some((n, a)) => (n, Some(a)),
                None => (rest, None),
            };
            if name == "end" {
                end = Some((i, arg.unwrap_or("")));
                break;
            }
            found.push((name, arg, i + 1));
        }
    }
    for (k, expected) in SECTIONS.iter().enumerate() {
        match found.get(k) {
            Some((name, _, _)) if name == expected => {}
            Some((name, _, _)) => {
                return Err(Error::ChainFile(format!(
                    "expected section '{expected}', found '{name}'"
                )))
            }
            None => {
                let last = k.checked_sub(1).map(|j| SECTIONS[j]).unwrap_or("header");
                return Err(Error::ChainFile(format!(
                    "truncated: section '{last}' incomplete, section '{expected}' missing"
                )));
            }
        }
    }
    let (end_line, end_arg) = end.ok_or_else(|| {
        Error::ChainFile("truncated: section 'archive' incomplete, end marker missing".into())
    })?;
    if found.len() != SECTIONS.len() {
        return Err(Error::ChainFile(format!("unknown section '{}'", found[SECTIONS.len()].0)));
    }
    let claimed = end_arg
        .strip_prefix("sha256=")
        .ok_or_else(|| Error::ChainFile("end marker lacks digest".into()))?;
    let body_len: usize = lines[..end_line].iter().map(|l| l.len() + 1).sum();
    if text.len() < body_len || sha256_hex(&text.as_bytes()[..body_len]) != claimed {
        return Err(Error::ChainFile("digest mismatch".into()));
    }

    let section = |k: usize| {
        let start = found[k].2;
        let stop = found.get(k + 1).map(|f| f.2 - 1).unwrap_or(end_line);
        Section {
            name: SECTIONS[k],
            lines: &lines[start..stop],
            pos: 0,
        }
    };
    let count = |k: usize| -> Result<usize> {
        found[k]
            .1
            .and_then(|a| a.parse().ok())
            .ok_or_else(|| Error::ChainFile(format!("section '{}' lacks a count", SECTIONS[k])))
    };

    let config_text = section(0).rest();
    let config: RunConfig = toml::from_str(&config_text)
        .map_err(|e| Error::ChainFile(format!("section 'config': {e}")))?;

    let mut s = section(1);
    let estimator = if s.lines == ["none"] {
        None
    } else {
        let weights = s.tagged("weights")?;
        let weights: Vec<f64> = weights
            .iter()
            .map(|p| parse_f64(p).ok_or_else(|| s.err(format!("bad weight '{p}'"))))
            .collect::<Result<_>>()?;
        let bias = s.floats("bias", 1)?[0];
        let ridge = s.floats("ridge", 1)?[0];
        let fit = s.tagged("fit")?;
        if fit.len() != 2 {
            return Err(s.err("'fit' needs sample count and seed"));
        }
        let record = FitRecord {
            n_samples: s.int(fit[0])?,
            seed: s.int(fit[1])?,
            fingerprints: Default::default(),
        };
        s.done()?;
        Some(AgeEstimator {
            weights: DVector::from_vec(weights),
            bias,
            ridge,
            record,
        })
    };

    let mut s = section(2);
    let mut modules = BTreeMap::new();
    for _ in 0..count(2)? {
        let m = s.module()?;
        if modules.insert(m.id, m).is_some() {
            return Err(s.err("duplicate module id"));
        }
    }
    s.done()?;

    let mut s = section(3);
    let slot_line = s.next()?;
    let slots = slot_line
        .split_whitespace()
        .map(|t| s.int(t))
        .collect::<Result<Vec<usize>>>()?;
    s.done()?;

    let mut s = section(4);
    let line = s.next()?;
    let reuse_index = s.int(line)?;
    s.done()?;

    let decision_log = parse_decision_log(&section(5).rest(), "chain file section 'decisions'")?;
    let curves = parse_curves(&section(6).rest(), "chain file section 'curves'")?;

    let mut s = section(7);
    let mut archive = Vec::new();
    for _ in 0..count(7)? {
        let head = s.tagged("released")?;
        let iteration = s.int(head.first().copied().unwrap_or(""))?;
        archive.push(ArchivedModule {
            module: s.module()?,
            iteration,
        });
    }
    s.done()?;

    let chain = ChainState {
        target_means: config.run_target_means(),
        modules,
        slots,
        reuse_index,
        decision_log,
        config,
        curves,
        archive,
    };
    chain.check_invariants(false)?;
    Ok(LoadedChain { chain, estimator })
}

//! Compact development descriptor, e.g.
//! `F_{55→65}(F_{45→55}(F^2_{25→35}(F_{15→25}(x))))`.

use std::fmt;

use super::ModuleId;
use crate::error::{Error, Result};

/// One run of consecutive slots sharing a module.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorTerm {
    pub module: ModuleId,
    /// First slot of the run (1-based).
    pub first_slot: usize,
    pub exponent: usize,
    pub source_age: f64,
    pub target_age: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    /// Innermost (earliest slot) first.
    pub terms: Vec<DescriptorTerm>,
}

/// Integral ages print without a fractional part.
pub fn format_age(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

impl Descriptor {
    pub fn from_slots(slots: &[ModuleId], target_means: &[f64]) -> Self {
        let mut terms: Vec<DescriptorTerm> = Vec::new();
        for (j, &id) in slots.iter().enumerate() {
            match terms.last_mut() {
                Some(t) if t.module == id => t.exponent += 1,
                _ => terms.push(DescriptorTerm {
                    module: id,
                    first_slot: j + 1,
                    exponent: 1,
                    source_age: target_means[j],
                    target_age: target_means[j + 1],
                }),
            }
        }
        Self { terms }
    }

    /// Slot count covered.
    pub fn n_slots(&self) -> usize {
        self.terms.iter().map(|t| t.exponent).sum()
    }

    /// Expands back to a per-slot module list.
    pub fn to_slots(&self) -> Vec<ModuleId> {
        self.terms
            .iter()
            .flat_map(|t| std::iter::repeat_n(t.module, t.exponent))
            .collect()
    }

    pub fn render(&self) -> String {
        self.to_string()
    }

    /// Reads a rendered descriptor back as `(source, target, exponent)`
    /// triples, innermost first.
    pub fn parse_rendered(text: &str) -> Result<Vec<(f64, f64, usize)>> {
        let err = |m: &str| Error::InvalidArgument(format!("descriptor: {m}"));
        let mut rest = text.trim();
        let mut outer = Vec::new();
        while rest != "x" {
            let body = rest.strip_prefix("F").ok_or_else(|| err("expected 'F'"))?;
            let (exponent, body) = match body.strip_prefix('^') {
                Some(b) => {
                    let end = b.find('_').ok_or_else(|| err("missing '_'"))?;
                    let e = b[..end].parse().map_err(|_| err("bad exponent"))?;
                    (e, &b[end..])
                }
                None => (1, body),
            };
            let body = body.strip_prefix("_{").ok_or_else(|| err("expected '_{'"))?;
            let close = body.find('}').ok_or_else(|| err("missing '}'"))?;
            let (src, tgt) = body[..close]
                .split_once('→')
                .ok_or_else(|| err("missing arrow"))?;
            let src: f64 = src.parse().map_err(|_| err("bad source age"))?;
            let tgt: f64 = tgt.parse().map_err(|_| err("bad target age"))?;
            let inner = body[close + 1..]
                .strip_prefix('(')
                .and_then(|b| b.strip_suffix(')'))
                .ok_or_else(|| err("unbalanced parentheses"))?;
            outer.push((src, tgt, exponent));
            rest = inner;
        }
        outer.reverse();
        Ok(outer)
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::from("x");
        for t in &self.terms {
            let power = if t.exponent > 1 {
                format!("^{}", t.exponent)
            } else {
                String::new()
            };
            s = format!(
                "F{power}_{{{}→{}}}({s})",
                format_age(t.source_age),
                format_age(t.target_age)
            );
        }
        f.write_str(&s)
    }
}

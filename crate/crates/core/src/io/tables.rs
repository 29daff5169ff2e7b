use std::path::Path;

use csv::{ReaderBuilder, StringRecord, Trim, WriterBuilder};

use super::{fmt_f64, parse_f64, read_text, write_text};
use crate::chain::{CurvePoint, DecisionRecord, Direction, EvalRow, Outcome, Role, RowKind};
use crate::domain::{DomainSequence, Sample, StageDataset};
use crate::error::{Error, Result};

const STAGE_HEADER: [&str; 3] = ["stage_index", "target_mean_age", "d"];

fn reader(text: &str) -> csv::Reader<&[u8]> {
    ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(Trim::All)
        .from_reader(text.as_bytes())
}

fn line_of(rec: &StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn to_csv(rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses one or more stage blocks. Each block is the metadata header
/// `stage_index,target_mean_age,d`, one metadata row, the feature header
/// `f0,...,f{d-1}`, then one row per sample.
pub fn parse_stages(text: &str, file: &str) -> Result<Vec<StageDataset>> {
    let perr = |line: usize, m: String| Error::parse(file, line, m);
    let mut records = reader(text).into_records().peekable();
    let mut stages = Vec::new();
    while let Some(rec) = records.next() {
        let rec = rec?;
        let line = line_of(&rec);
        let cols: Vec<&str> = rec.iter().collect();
        let mut pos = [0usize; 3];
        for (k, name) in STAGE_HEADER.iter().enumerate() {
            pos[k] = cols
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| perr(line, format!("missing column '{name}'")))?;
        }
        let meta = records
            .next()
            .ok_or_else(|| perr(line + 1, "missing stage metadata row".into()))??;
        let mline = line_of(&meta);
        let field = |k: usize| {
            meta.get(pos[k])
                .ok_or_else(|| perr(mline, format!("missing value for '{}'", STAGE_HEADER[k])))
        };
        let stage_index: usize = field(0)?
            .parse()
            .map_err(|_| perr(mline, "stage_index must be a non-negative integer".into()))?;
        let target = parse_f64(field(1)?)
            .ok_or_else(|| perr(mline, "target_mean_age is not a number".into()))?;
        let d: usize = field(2)?
            .parse()
            .map_err(|_| perr(mline, "d must be a positive integer".into()))?;
        let fh = records
            .next()
            .ok_or_else(|| perr(mline + 1, "missing feature header".into()))??;
        let fline = line_of(&fh);
        if fh.len() != d || fh.iter().enumerate().any(|(c, name)| name != format!("f{c}")) {
            return Err(perr(fline, format!("feature header must be f0..f{}", d.saturating_sub(1))));
        }
        let mut samples = Vec::new();
        while let Some(next) = records.peek() {
            let is_header = match next {
                Ok(r) => r.get(0).is_some_and(|c| STAGE_HEADER.contains(&c)),
                Err(_) => false,
            };
            if is_header {
                break;
            }
            let row = records.next().expect("peeked")?;
            let rline = line_of(&row);
            if row.len() != d {
                return Err(perr(rline, format!("expected {d} features, got {}", row.len())));
            }
            let mut features = Vec::with_capacity(d);
            for (c, v) in row.iter().enumerate() {
                features.push(parse_f64(v).ok_or_else(|| perr(rline, format!("f{c} is not a number")))?);
            }
            samples.push(Sample::new(features).map_err(|e| perr(rline, e.to_string()))?);
        }
        stages.push(StageDataset::new(stage_index, samples, target));
    }
    Ok(stages)
}

fn stage_block(stage: &StageDataset, d: usize) -> Vec<Vec<String>> {
    let mut rows = vec![
        STAGE_HEADER.iter().map(|s| s.to_string()).collect(),
        vec![
            stage.stage_index.to_string(),
            fmt_f64(stage.target_mean_age),
            d.to_string(),
        ],
        (0..d).map(|c| format!("f{c}")).collect(),
    ];
    rows.extend(
        stage
            .samples
            .iter()
            .map(|s| s.features().iter().map(|v| fmt_f64(*v)).collect()),
    );
    rows
}

fn assemble(mut stages: Vec<StageDataset>) -> Result<DomainSequence> {
    stages.sort_by_key(|s| s.stage_index);
    let d = stages.iter().find_map(StageDataset::dim).unwrap_or(0);
    DomainSequence::new(stages, d)
}

/// Writes every stage of `seq` into one multi-block file.
pub fn write_stage_file(path: &Path, seq: &DomainSequence) -> Result<()> {
    let rows = seq
        .stages()
        .iter()
        .flat_map(|s| stage_block(s, seq.dimension()));
    write_text(path, &to_csv(rows)?)
}

/// Reads a multi-block stage file and validates the result.
pub fn read_stage_file(path: &Path) -> Result<DomainSequence> {
    assemble(parse_stages(&read_text(path)?, &path.display().to_string())?)
}

/// Writes `stage_{i}.csv` per stage and, if given, `labels.csv`.
pub fn write_stage_dir(dir: &Path, seq: &DomainSequence, labels: Option<&[Vec<f64>]>) -> Result<()> {
    for s in seq.stages() {
        let path = dir.join(format!("stage_{}.csv", s.stage_index));
        write_text(&path, &to_csv(stage_block(s, seq.dimension()))?)?;
    }
    if let Some(labels) = labels {
        write_labels(&dir.join("labels.csv"), seq, labels)?;
    }
    Ok(())
}

/// Reads every `stage_*.csv` in `dir` and validates the sequence.
pub fn read_stage_dir(dir: &Path) -> Result<DomainSequence> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stages = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("stage_") && name.ends_with(".csv") {
            stages.extend(parse_stages(&read_text(&path)?, &path.display().to_string())?);
        }
    }
    if stages.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no stage_*.csv files in {}",
            dir.display()
        )));
    }
    assemble(stages)
}

pub fn write_labels(path: &Path, seq: &DomainSequence, labels: &[Vec<f64>]) -> Result<()> {
    if labels.len() != seq.n_stages() {
        return Err(Error::InvalidArgument("one label vector per stage required".into()));
    }
    let mut rows = vec![vec!["stage_index".into(), "row".into(), "true_age".into()]];
    for (stage, ages) in seq.stages().iter().zip(labels) {
        for (r, a) in ages.iter().enumerate() {
            rows.push(vec![stage.stage_index.to_string(), r.to_string(), fmt_f64(*a)]);
        }
    }
    write_text(path, &to_csv(rows)?)
}

/// Labels grouped per stage in stage order; rows must be listed in order.
pub fn read_labels(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = path.display().to_string();
    let table = Table::parse(&read_text(path)?, &file, &["stage_index", "row", "true_age"])?;
    let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
    for row in &table.rows {
        let stage: usize = row.int("stage_index")?;
        let r: usize = row.int("row")?;
        let age = row.float("true_age")?;
        if out.last().map(|(s, _)| *s) != Some(stage) {
            out.push((stage, Vec::new()));
        }
        let ages = &mut out.last_mut().unwrap().1;
        if r != ages.len() {
            return Err(row.err(format!("row {r} out of order")));
        }
        ages.push(age);
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out.into_iter().map(|(_, v)| v).collect())
}

/// A headed CSV with named-column access and line-numbered errors.
struct Table {
    rows: Vec<Row>,
}

struct Row {
    file: String,
    line: usize,
    header: std::rc::Rc<Vec<String>>,
    rec: StringRecord,
}

impl Table {
    fn parse(text: &str, file: &str, required: &[&str]) -> Result<Table> {
        let mut records = reader(text).into_records();
        let head = records
            .next()
            .ok_or_else(|| Error::parse(file, 1, "empty file"))??;
        let header: Vec<String> = head.iter().map(str::to_string).collect();
        for name in required {
            if !header.iter().any(|h| h == name) {
                return Err(Error::parse(file, 1, format!("missing column '{name}'")));
            }
        }
        let header = std::rc::Rc::new(header);
        let mut rows = Vec::new();
        for rec in records {
            let rec = rec?;
            let line = line_of(&rec);
            if rec.len() != header.len() {
                return Err(Error::parse(
                    file,
                    line,
                    format!("expected {} fields, got {}", header.len(), rec.len()),
                ));
            }
            rows.push(Row {
                file: file.to_string(),
                line,
                header: header.clone(),
                rec,
            });
        }
        Ok(Table { rows })
    }
}

impl Row {
    fn err(&self, m: String) -> Error {
        Error::parse(self.file.clone(), self.line, m)
    }

    fn get(&self, name: &str) -> Result<&str> {
        let idx = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| self.err(format!("missing column '{name}'")))?;
        Ok(self.rec.get(idx).unwrap_or(""))
    }

    fn int(&self, name: &str) -> Result<usize> {
        self.get(name)?
            .parse()
            .map_err(|_| self.err(format!("{name} is not an integer")))
    }

    fn opt_int(&self, name: &str) -> Result<Option<usize>> {
        let v = self.get(name)?;
        if v.is_empty() {
            Ok(None)
        } else {
            self.int(name).map(Some)
        }
    }

    fn float(&self, name: &str) -> Result<f64> {
        parse_f64(self.get(name)?).ok_or_else(|| self.err(format!("{name} is not a number")))
    }

    fn opt_float(&self, name: &str) -> Result<Option<f64>> {
        let v = self.get(name)?;
        if v.is_empty() {
            Ok(None)
        } else {
            self.float(name).map(Some)
        }
    }

    fn flag(&self, name: &str) -> Result<bool> {
        match self.get(name)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(self.err(format!("{name}: expected true/false, got '{other}'"))),
        }
    }

    fn parsed<T>(&self, name: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        let v = self.get(name)?;
        f(v).ok_or_else(|| self.err(format!("{name}: unrecognized value '{v}'")))
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_f(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

const DECISION_COLUMNS: [&str; 13] = [
    "iteration",
    "reuse_index",
    "baseline_module",
    "recycled_module",
    "e_baseline",
    "e_recycled",
    "epsilon",
    "mode",
    "outcome",
    "baseline_sigma_floored",
    "recycled_sigma_floored",
    "forgetting_error",
    "reuse_index_after",
];

pub(crate) fn decision_rows(log: &[DecisionRecord]) -> Vec<Vec<String>> {
    let mut rows = vec![DECISION_COLUMNS.iter().map(|s| s.to_string()).collect()];
    for r in log {
        rows.push(vec![
            r.iteration.to_string(),
            r.reuse_index.to_string(),
            r.baseline_module.to_string(),
            opt(r.recycled_module),
            fmt_f64(r.e_baseline),
            opt_f(r.e_recycled),
            fmt_f64(r.epsilon),
            r.mode.as_str().into(),
            r.outcome.as_str().into(),
            r.baseline_sigma_floored.to_string(),
            r.recycled_sigma_floored.to_string(),
            opt_f(r.forgetting_error),
            r.reuse_index_after.to_string(),
        ]);
    }
    rows
}

pub(crate) fn render_decision_log(log: &[DecisionRecord]) -> Result<String> {
    to_csv(decision_rows(log))
}

pub(crate) fn parse_decision_log(text: &str, file: &str) -> Result<Vec<DecisionRecord>> {
    let table = Table::parse(text, file, &DECISION_COLUMNS)?;
    table
        .rows
        .iter()
        .map(|r| {
            Ok(DecisionRecord {
                iteration: r.int("iteration")?,
                reuse_index: r.int("reuse_index")?,
                baseline_module: r.int("baseline_module")?,
                recycled_module: r.opt_int("recycled_module")?,
                e_baseline: r.float("e_baseline")?,
                e_recycled: r.opt_float("e_recycled")?,
                epsilon: r.float("epsilon")?,
                mode: r.parsed("mode", |s| s.parse().ok())?,
                outcome: r.parsed("outcome", Outcome::parse)?,
                baseline_sigma_floored: r.flag("baseline_sigma_floored")?,
                recycled_sigma_floored: r.flag("recycled_sigma_floored")?,
                forgetting_error: r.opt_float("forgetting_error")?,
                reuse_index_after: r.int("reuse_index_after")?,
            })
        })
        .collect()
}

pub fn write_decision_log(path: &Path, log: &[DecisionRecord]) -> Result<()> {
    write_text(path, &render_decision_log(log)?)
}

pub fn read_decision_log(path: &Path) -> Result<Vec<DecisionRecord>> {
    parse_decision_log(&read_text(path)?, &path.display().to_string())
}

const EVAL_COLUMNS: [&str; 12] = [
    "direction",
    "kind",
    "module",
    "slot",
    "start_stage",
    "end_stage",
    "input_mean_age",
    "target",
    "reached_mean",
    "reached_std",
    "mean_abs_error",
    "in_chain",
];

pub fn write_evaluation_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut out = vec![EVAL_COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    for r in rows {
        out.push(vec![
            r.direction.as_str().into(),
            r.kind.as_str().into(),
            opt(r.module),
            opt(r.slot),
            r.start_stage.to_string(),
            r.end_stage.to_string(),
            fmt_f64(r.input_mean_age),
            fmt_f64(r.target),
            fmt_f64(r.reached_mean),
            fmt_f64(r.reached_std),
            fmt_f64(r.mean_abs_error),
            r.in_chain.to_string(),
        ]);
    }
    write_text(path, &to_csv(out)?)
}

pub fn read_evaluation_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let table = Table::parse(&read_text(path)?, &path.display().to_string(), &EVAL_COLUMNS)?;
    table
        .rows
        .iter()
        .map(|r| {
            Ok(EvalRow {
                direction: r.parsed("direction", Direction::parse)?,
                kind: r.parsed("kind", RowKind::parse)?,
                module: r.opt_int("module")?,
                slot: r.opt_int("slot")?,
                start_stage: r.int("start_stage")?,
                end_stage: r.int("end_stage")?,
                input_mean_age: r.float("input_mean_age")?,
                target: r.float("target")?,
                reached_mean: r.float("reached_mean")?,
                reached_std: r.float("reached_std")?,
                mean_abs_error: r.float("mean_abs_error")?,
                in_chain: r.flag("in_chain")?,
            })
        })
        .collect()
}

const CURVE_COLUMNS: [&str; 9] = [
    "module",
    "role",
    "slot",
    "step",
    "trained_steps",
    "normalized_error",
    "mean_age",
    "std_dev",
    "mean_abs_error",
];

pub(crate) fn curve_rows(points: &[CurvePoint]) -> Vec<Vec<String>> {
    let mut out = vec![CURVE_COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    for p in points {
        out.push(vec![
            p.module.to_string(),
            p.role.as_str().into(),
            p.slot.to_string(),
            p.step.to_string(),
            p.trained_steps.to_string(),
            fmt_f64(p.normalized_error),
            fmt_f64(p.mean_age),
            fmt_f64(p.std_dev),
            fmt_f64(p.mean_abs_error),
        ]);
    }
    out
}

pub(crate) fn render_curves(points: &[CurvePoint]) -> Result<String> {
    to_csv(curve_rows(points))
}

pub(crate) fn parse_curves(text: &str, file: &str) -> Result<Vec<CurvePoint>> {
    let table = Table::parse(text, file, &CURVE_COLUMNS)?;
    table
        .rows
        .iter()
        .map(|r| {
            Ok(CurvePoint {
                module: r.int("module")?,
                role: r.parsed("role", Role::parse)?,
                slot: r.int("slot")?,
                step: r.int("step")?,
                trained_steps: r.int("trained_steps")?,
                normalized_error: r.float("normalized_error")?,
                mean_age: r.float("mean_age")?,
                std_dev: r.float("std_dev")?,
                mean_abs_error: r.float("mean_abs_error")?,
            })
        })
        .collect()
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    write_text(path, &render_curves(points)?)
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    parse_curves(&read_text(path)?, &path.display().to_string())
}

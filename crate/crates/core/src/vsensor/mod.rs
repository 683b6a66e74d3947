//! Virtual sensors: arithmetic expressions over stored series, evaluated
//! lazily on a fixed grid and cached back into the store as int64 readings.

pub mod expr;

pub use expr::{parse_expr, ArithError, BinOp, Expr, SyntaxError};

use crate::model::{convert, LevelDictionary, SensorMetadata, SidError, Topic, Unit};
use crate::storage::StorageError;
use std::collections::HashMap;
use thiserror::Error;

/// Definition of one virtual sensor.
///
/// Evaluation happens on the grid `t_zero_ns + k * eval_interval_ns`;
/// results are quantized to `round(value / scale)` for storage under the
/// sensor's own id, which makes re-evaluation reproducible bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct VSensorDef {
    pub topic: Topic,
    pub expr: Expr,
    pub unit: Unit,
    pub eval_interval_ns: u64,
    pub t_zero_ns: u64,
    pub scale: f64,
}

impl VSensorDef {
    pub fn validate(&self) -> Result<(), VsError> {
        if self.eval_interval_ns == 0 {
            return Err(VsError::BadDef("eval interval must be positive".into()));
        }
        if self.scale == 0.0 || !self.scale.is_finite() {
            return Err(VsError::BadDef("scale must be non-zero and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum VsError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("unknown operand {0}")]
    UnknownOperand(Topic),
    #[error("dependency cycle: {}", format_cycle(.0))]
    CycleDetected(Vec<Topic>),
    #[error("bad virtual sensor definition: {0}")]
    BadDef(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Sid(#[from] SidError),
}

fn format_cycle(cycle: &[Topic]) -> String {
    cycle.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" -> ")
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("timestamp {0} outside the sampled range")]
pub struct OutOfRange(pub u64);

/// Linear interpolation over a timestamp-ascending series.
///
/// A timestamp matching a sample returns that sample exactly; anything
/// outside the series' span is refused rather than extrapolated.
pub fn interpolate(series: &[(u64, f64)], t: u64) -> Result<f64, OutOfRange> {
    let idx = series.partition_point(|&(ts, _)| ts < t);
    if let Some(&(ts, v)) = series.get(idx) {
        if ts == t {
            return Ok(v);
        }
    }
    if idx == 0 || idx >= series.len() {
        return Err(OutOfRange(t));
    }
    let (t0, v0) = series[idx - 1];
    let (t1, v1) = series[idx];
    let frac = (t - t0) as f64 / (t1 - t0) as f64;
    Ok(v0 + (v1 - v0) * frac)
}

/// Where evaluation finds raw series and writes cached results.
pub trait SeriesSource {
    fn raw_series(&self, sid: crate::model::SensorId, t0: u64, t1: u64) -> Result<Vec<(u64, i64)>, StorageError>;
    fn write_back(&self, sid: crate::model::SensorId, records: &[(u64, i64)]) -> Result<(), StorageError>;
}

impl SeriesSource for crate::storage::Store {
    fn raw_series(&self, sid: crate::model::SensorId, t0: u64, t1: u64) -> Result<Vec<(u64, i64)>, StorageError> {
        self.query(sid, t0, t1)
    }

    fn write_back(&self, sid: crate::model::SensorId, records: &[(u64, i64)]) -> Result<(), StorageError> {
        self.insert_batch(sid, records)
    }
}

/// Where evaluation resolves operand topics.
pub trait MetaSource {
    fn sensor_meta(&self, topic: &Topic) -> Option<SensorMetadata>;
    fn vsensor_def(&self, topic: &Topic) -> Option<VSensorDef>;
}

/// Checks a definition against the current metadata: fields sane, every
/// operand known (physical or virtual), and no dependency cycle once this
/// definition is in place.
pub fn validate_define(def: &VSensorDef, meta: &dyn MetaSource) -> Result<(), VsError> {
    def.validate()?;
    let mut stack = vec![def.topic.clone()];
    check_operands(&def.expr, meta, Some(def), &mut stack)
}

fn check_operands(
    expr: &Expr,
    meta: &dyn MetaSource,
    pending: Option<&VSensorDef>,
    stack: &mut Vec<Topic>,
) -> Result<(), VsError> {
    for operand in expr.operands() {
        // The pending definition shadows any stored one with the same topic.
        let vdef = if pending.is_some_and(|d| d.topic == operand) {
            pending.cloned()
        } else {
            meta.vsensor_def(&operand)
        };
        match vdef {
            Some(vdef) => {
                if let Some(at) = stack.iter().position(|t| *t == operand) {
                    let mut cycle = stack[at..].to_vec();
                    cycle.push(operand);
                    return Err(VsError::CycleDetected(cycle));
                }
                stack.push(operand.clone());
                check_operands(&vdef.expr, meta, pending, stack)?;
                stack.pop();
            }
            None => {
                if meta.sensor_meta(&operand).is_none() {
                    return Err(VsError::UnknownOperand(operand));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct EvalOutput {
    /// Grid points with values, ascending, already quantized to the
    /// definition's scale.
    pub points: Vec<(u64, f64)>,
    /// Grid points skipped because an operand had no bracketing samples.
    pub skipped_gap: u64,
    /// Grid points skipped by exact-zero division or a non-finite result.
    pub skipped_div_zero: u64,
    /// Grid points whose quantized value did not fit an i64.
    pub skipped_range: u64,
}

pub struct EvalCtx<'a> {
    pub meta: &'a dyn MetaSource,
    pub dict: &'a LevelDictionary,
    pub series: &'a dyn SeriesSource,
}

/// Grid timestamps `t_zero + k * interval` inside `[t0, t1)`.
pub fn grid_points(t_zero: u64, interval: u64, t0: u64, t1: u64) -> Vec<u64> {
    if t1 <= t0 || interval == 0 {
        return Vec::new();
    }
    let first = if t0 <= t_zero {
        t_zero as u128
    } else {
        let delta = (t0 - t_zero) as u128;
        let ivl = interval as u128;
        t_zero as u128 + delta.div_ceil(ivl) * ivl
    };
    let mut out = Vec::new();
    let mut g = first;
    while g < t1 as u128 {
        out.push(g as u64);
        g += interval as u128;
    }
    out
}

/// Evaluates `def` over `[t0, t1)`.
///
/// Grid points already present under the sensor's own id are reused
/// without touching any operand; missing ones are computed from operand
/// series fetched with one operand-interval of slack on each side, then
/// written back. The returned values are exactly what a raw fetch of the
/// sensor would now see, scaled.
pub fn evaluate(def: &VSensorDef, t0: u64, t1: u64, ctx: &EvalCtx) -> Result<EvalOutput, VsError> {
    let mut stack = Vec::new();
    evaluate_inner(def, t0, t1, ctx, &mut stack)
}

fn evaluate_inner(
    def: &VSensorDef,
    t0: u64,
    t1: u64,
    ctx: &EvalCtx,
    stack: &mut Vec<Topic>,
) -> Result<EvalOutput, VsError> {
    def.validate()?;
    if stack.iter().any(|t| *t == def.topic) {
        let mut cycle = stack.clone();
        cycle.push(def.topic.clone());
        return Err(VsError::CycleDetected(cycle));
    }
    stack.push(def.topic.clone());
    let result = evaluate_body(def, t0, t1, ctx, stack);
    stack.pop();
    result
}

fn evaluate_body(
    def: &VSensorDef,
    t0: u64,
    t1: u64,
    ctx: &EvalCtx,
    stack: &mut Vec<Topic>,
) -> Result<EvalOutput, VsError> {
    let grid = grid_points(def.t_zero_ns, def.eval_interval_ns, t0, t1);
    let mut out = EvalOutput::default();
    if grid.is_empty() {
        return Ok(out);
    }
    let own_sid = ctx.dict.encode(&def.topic)?;
    let cached: HashMap<u64, i64> = ctx
        .series
        .raw_series(own_sid, grid[0], grid[grid.len() - 1] + 1)?
        .into_iter()
        .collect();
    let missing: Vec<u64> = grid.iter().copied().filter(|g| !cached.contains_key(g)).collect();

    let mut computed: Vec<(u64, i64)> = Vec::new();
    if !missing.is_empty() {
        // Operand series over the full window plus slack, scaled and
        // converted into this sensor's frame.
        let operands = def.expr.operands();
        let mut series: HashMap<Topic, Vec<(u64, f64)>> = HashMap::with_capacity(operands.len());
        for operand in &operands {
            let fetched = fetch_operand(def, operand, t0, t1, ctx, stack)?;
            series.insert(operand.clone(), fetched);
        }
        'grid: for &g in &missing {
            let mut env: HashMap<&Topic, f64> = HashMap::with_capacity(operands.len());
            for operand in &operands {
                match interpolate(&series[operand], g) {
                    Ok(v) => {
                        env.insert(operand, v);
                    }
                    Err(OutOfRange(_)) => {
                        out.skipped_gap += 1;
                        continue 'grid;
                    }
                }
            }
            let value = match def.expr.eval(&|t| env.get(t).copied().unwrap_or(f64::NAN)) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(ArithError::DivisionByZero) => {
                    out.skipped_div_zero += 1;
                    continue;
                }
            };
            let quant = (value / def.scale).round();
            if !quant.is_finite() || quant < i64::MIN as f64 || quant > i64::MAX as f64 {
                out.skipped_range += 1;
                continue;
            }
            computed.push((g, quant as i64));
        }
        if !computed.is_empty() {
            ctx.series.write_back(own_sid, &computed)?;
        }
    }

    let computed_map: HashMap<u64, i64> = computed.into_iter().collect();
    for &g in &grid {
        let raw = cached.get(&g).or_else(|| computed_map.get(&g));
        if let Some(&raw) = raw {
            out.points.push((g, raw as f64 * def.scale));
        }
    }
    Ok(out)
}

fn fetch_operand(
    def: &VSensorDef,
    operand: &Topic,
    t0: u64,
    t1: u64,
    ctx: &EvalCtx,
    stack: &mut Vec<Topic>,
) -> Result<Vec<(u64, f64)>, VsError> {
    if let Some(vdef) = ctx.meta.vsensor_def(operand) {
        let slack = vdef.eval_interval_ns;
        let inner = evaluate_inner(&vdef, t0.saturating_sub(slack), t1.saturating_add(slack), ctx, stack)?;
        return Ok(convert_series(inner.points, &vdef.unit, &def.unit));
    }
    if let Some(meta) = ctx.meta.sensor_meta(operand) {
        let slack = meta.interval_ns;
        let rows = match ctx.dict.lookup(operand) {
            // Known sensor that never produced data: empty series.
            None => Vec::new(),
            Some(sid) => ctx
                .series
                .raw_series(sid, t0.saturating_sub(slack), t1.saturating_add(slack))?,
        };
        let scaled: Vec<(u64, f64)> = rows
            .into_iter()
            .map(|(ts, raw)| (ts, raw as f64 * meta.scale))
            .collect();
        return Ok(convert_series(scaled, &meta.unit, &def.unit));
    }
    Err(VsError::UnknownOperand(operand.clone()))
}

/// Converts operand values into the evaluating sensor's unit when the
/// dimensions agree, otherwise into the base unit of the operand's own
/// dimension (a ratio of two powers is dimensionless, but both sides must
/// agree on watts first).
fn convert_series(points: Vec<(u64, f64)>, from: &Unit, target: &Unit) -> Vec<(u64, f64)> {
    let to = if from.dimension == target.dimension {
        target.clone()
    } else {
        from.dimension.base()
    };
    if from == &to {
        return points;
    }
    points
        .into_iter()
        .map(|(ts, v)| (ts, convert(v, from, &to).expect("dimensions checked")))
        .collect()
}

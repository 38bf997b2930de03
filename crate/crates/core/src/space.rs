//! The discretized cut-in scenario grid and real-valued fields over it.
//!
//! A scenario is the pair `(R, Rdot)` of range and range rate at the cut-in
//! moment. Range bins are half-open `(lo, hi]` and represented by their right
//! endpoint; range-rate nodes include both ends of the interval. Cells are laid
//! out row-major with the range index outermost:
//! `flat = i_r * n_rdot + i_rdot`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounds and steps of the grid as they appear in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub r_step: f64,
    pub rdot_min: f64,
    pub rdot_max: f64,
    pub rdot_step: f64,
}

impl Default for GridConfig {
    /// Range in (0, 90] m by 2 m, range rate in [-20, 10] m/s by 0.4 m/s.
    fn default() -> Self {
        GridConfig {
            r_min: 0.0,
            r_max: 90.0,
            r_step: 2.0,
            rdot_min: -20.0,
            rdot_max: 10.0,
            rdot_step: 0.4,
        }
    }
}

/// Relative slack allowed when checking that a span is a whole number of steps.
const STEP_SLACK: f64 = 1e-9;

/// Rounds a step quotient to the nearest integer when rounding error alone
/// separates them, so cell edges bin the same way on any grid origin.
fn snap(u: f64) -> f64 {
    let k = u.round();
    if (u - k).abs() <= STEP_SLACK * k.abs().max(1.0) {
        k
    } else {
        u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpace {
    r_min: f64,
    r_step: f64,
    rdot_min: f64,
    rdot_step: f64,
    n_r: usize,
    n_rdot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScenarioIndex {
    pub i_r: usize,
    pub i_rdot: usize,
    pub flat: usize,
}

impl ScenarioSpace {
    /// Builds the grid, rejecting non-positive steps and unordered bounds.
    pub fn new(cfg: &GridConfig) -> Result<Self> {
        let finite = [
            ("r_min", cfg.r_min),
            ("r_max", cfg.r_max),
            ("r_step", cfg.r_step),
            ("rdot_min", cfg.rdot_min),
            ("rdot_max", cfg.rdot_max),
            ("rdot_step", cfg.rdot_step),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
        }
        if cfg.r_step <= 0.0 {
            return Err(Error::config("r_step", "must be positive"));
        }
        if cfg.rdot_step <= 0.0 {
            return Err(Error::config("rdot_step", "must be positive"));
        }
        if cfg.r_max <= cfg.r_min {
            return Err(Error::config("r_max", "must exceed r_min"));
        }
        if cfg.rdot_max < cfg.rdot_min {
            return Err(Error::config("rdot_max", "must not be below rdot_min"));
        }
        let n_r = whole_steps(cfg.r_max - cfg.r_min, cfg.r_step)
            .ok_or_else(|| Error::config("r_step", "range span is not a whole number of steps"))?;
        let n_rdot = whole_steps(cfg.rdot_max - cfg.rdot_min, cfg.rdot_step)
            .ok_or_else(|| {
                Error::config("rdot_step", "range-rate span is not a whole number of steps")
            })?
            + 1;
        Ok(ScenarioSpace {
            r_min: cfg.r_min,
            r_step: cfg.r_step,
            rdot_min: cfg.rdot_min,
            rdot_step: cfg.rdot_step,
            n_r,
            n_rdot,
        })
    }

    pub(crate) fn from_parts(
        r_min: f64,
        r_step: f64,
        rdot_min: f64,
        rdot_step: f64,
        n_r: usize,
        n_rdot: usize,
    ) -> Result<Self> {
        if !(r_step > 0.0 && rdot_step > 0.0 && n_r > 0 && n_rdot > 0)
            || !r_min.is_finite()
            || !rdot_min.is_finite()
        {
            return Err(Error::config("grid", "invalid serialized grid parameters"));
        }
        Ok(ScenarioSpace {
            r_min,
            r_step,
            rdot_min,
            rdot_step,
            n_r,
            n_rdot,
        })
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n_rdot(&self) -> usize {
        self.n_rdot
    }

    pub fn n_total(&self) -> usize {
        self.n_r * self.n_rdot
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn r_step(&self) -> f64 {
        self.r_step
    }

    pub fn rdot_min(&self) -> f64 {
        self.rdot_min
    }

    pub fn rdot_step(&self) -> f64 {
        self.rdot_step
    }

    pub fn r_max(&self) -> f64 {
        self.r_min + self.n_r as f64 * self.r_step
    }

    pub fn rdot_max(&self) -> f64 {
        self.rdot_min + (self.n_rdot - 1) as f64 * self.rdot_step
    }

    /// Span of cell centers along each axis; used to bound GP length scales.
    pub fn extent(&self) -> [f64; 2] {
        [
            ((self.n_r - 1) as f64 * self.r_step).max(self.r_step),
            ((self.n_rdot - 1) as f64 * self.rdot_step).max(self.rdot_step),
        ]
    }

    pub fn steps(&self) -> [f64; 2] {
        [self.r_step, self.rdot_step]
    }

    pub fn index(&self, i_r: usize, i_rdot: usize) -> Result<ScenarioIndex> {
        if i_r >= self.n_r {
            return Err(Error::Range {
                index: i_r,
                limit: self.n_r,
            });
        }
        if i_rdot >= self.n_rdot {
            return Err(Error::Range {
                index: i_rdot,
                limit: self.n_rdot,
            });
        }
        Ok(ScenarioIndex {
            i_r,
            i_rdot,
            flat: i_r * self.n_rdot + i_rdot,
        })
    }

    pub fn from_flat(&self, flat: usize) -> Result<ScenarioIndex> {
        if flat >= self.n_total() {
            return Err(Error::Range {
                index: flat,
                limit: self.n_total(),
            });
        }
        Ok(ScenarioIndex {
            i_r: flat / self.n_rdot,
            i_rdot: flat % self.n_rdot,
            flat,
        })
    }

    /// Cell center `(R, Rdot)` of an index.
    pub fn scenario(&self, idx: ScenarioIndex) -> Result<(f64, f64)> {
        let idx = self.index(idx.i_r, idx.i_rdot)?;
        Ok(self.center_unchecked(idx.i_r, idx.i_rdot))
    }

    pub fn scenario_of_flat(&self, flat: usize) -> Result<(f64, f64)> {
        self.scenario(self.from_flat(flat)?)
    }

    fn center_unchecked(&self, i_r: usize, i_rdot: usize) -> (f64, f64) {
        (
            self.r_min + (i_r + 1) as f64 * self.r_step,
            self.rdot_min + i_rdot as f64 * self.rdot_step,
        )
    }

    /// Inverse of [`ScenarioSpace::scenario`] on cell centers.
    pub fn scenario_to_index(&self, r: f64, rdot: f64) -> Result<ScenarioIndex> {
        let fr = ((r - self.r_min) / self.r_step).round() - 1.0;
        let fd = ((rdot - self.rdot_min) / self.rdot_step).round();
        if !(fr >= 0.0 && fd >= 0.0) {
            return Err(Error::NotACellCenter { r, rdot });
        }
        let (i_r, i_rdot) = (fr as usize, fd as usize);
        let idx = self
            .index(i_r, i_rdot)
            .map_err(|_| Error::NotACellCenter { r, rdot })?;
        let (cr, cd) = self.center_unchecked(i_r, i_rdot);
        let tol_r = 1e-9 * self.r_step;
        let tol_d = 1e-9 * self.rdot_step;
        if (cr - r).abs() > tol_r || (cd - rdot).abs() > tol_d {
            return Err(Error::NotACellCenter { r, rdot });
        }
        Ok(idx)
    }

    /// Cell containing an observed event, or `None` when it lies outside the
    /// grid bounds. Range ties go to the lower bin, range-rate ties to the
    /// lower node.
    pub fn bin(&self, r: f64, rdot: f64) -> Option<ScenarioIndex> {
        if !(r.is_finite() && rdot.is_finite()) {
            return None;
        }
        if !(r > self.r_min && r <= self.r_max()) {
            return None;
        }
        if !(rdot >= self.rdot_min && rdot <= self.rdot_max()) {
            return None;
        }
        let i_r = (snap((r - self.r_min) / self.r_step).ceil() as usize)
            .saturating_sub(1)
            .min(self.n_r - 1);
        let i_rdot = (snap((rdot - self.rdot_min) / self.rdot_step - 0.5).ceil().max(0.0) as usize)
            .min(self.n_rdot - 1);
        self.index(i_r, i_rdot).ok()
    }

    /// Whether an event lies inside the grid bounds.
    pub fn contains(&self, r: f64, rdot: f64) -> bool {
        self.bin(r, rdot).is_some()
    }

    /// All cells in flat order.
    pub fn indices(&self) -> impl Iterator<Item = ScenarioIndex> + '_ {
        (0..self.n_total()).map(move |flat| ScenarioIndex {
            i_r: flat / self.n_rdot,
            i_rdot: flat % self.n_rdot,
            flat,
        })
    }

    /// All cell centers in flat order.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        self.indices()
            .map(|i| {
                let (r, d) = self.center_unchecked(i.i_r, i.i_rdot);
                [r, d]
            })
            .collect()
    }
}

fn whole_steps(span: f64, step: f64) -> Option<usize> {
    let ratio = span / step;
    let n = ratio.round();
    if (ratio - n).abs() > STEP_SLACK * n.max(1.0) {
        return None;
    }
    Some(n as usize)
}

/// A real value per grid cell, in flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioField {
    space: ScenarioSpace,
    values: Vec<f64>,
}

const FIELD_MAGIC: &[u8; 4] = b"ATSF";
const FIELD_VERSION: u32 = 1;

impl ScenarioField {
    pub fn new(space: ScenarioSpace, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.n_total() {
            return Err(Error::Shape(format!(
                "{} values for a grid of {} cells",
                values.len(),
                space.n_total()
            )));
        }
        Ok(ScenarioField { space, values })
    }

    pub fn constant(space: ScenarioSpace, value: f64) -> Self {
        ScenarioField {
            space,
            values: vec![value; space.n_total()],
        }
    }

    pub fn zeros(space: ScenarioSpace) -> Self {
        Self::constant(space, 0.0)
    }

    pub fn from_fn(space: ScenarioSpace, f: impl Fn(ScenarioIndex) -> f64) -> Self {
        let values = space.indices().map(f).collect();
        ScenarioField { space, values }
    }

    pub fn space(&self) -> &ScenarioSpace {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, idx: ScenarioIndex) -> f64 {
        self.values[idx.flat]
    }

    pub fn at(&self, flat: usize) -> f64 {
        self.values[flat]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        compensated_sum(self.values.iter().copied())
    }

    pub fn ensure_same_space(&self, other: &ScenarioField) -> Result<()> {
        if self.space != other.space {
            return Err(Error::Shape(
                "fields are defined on different scenario spaces".into(),
            ));
        }
        Ok(())
    }

    /// Elementwise combination of two fields on the same space.
    pub fn zip_with(&self, other: &ScenarioField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_space(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(ScenarioField {
            space: self.space,
            values,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScenarioField {
            space: self.space,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rescales a non-negative field so it sums to one.
    pub fn normalized(&self) -> Result<Self> {
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numerical(
                "cannot normalize a field with negative or non-finite values".into(),
            ));
        }
        let total = self.sum();
        if total <= 0.0 {
            return Err(Error::Numerical("cannot normalize an all-zero field".into()));
        }
        let mut out = self.map(|v| v / total);
        // one corrective pass absorbs the rounding of the division
        let residual = 1.0 - out.sum();
        if residual != 0.0 {
            if let Some((k, _)) = out
                .values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
            {
                out.values[k] += residual;
            }
        }
        Ok(out)
    }

    /// True when the field is non-negative and sums to one within `tol`.
    pub fn is_distribution(&self, tol: f64) -> bool {
        self.values.iter().all(|v| *v >= 0.0 && v.is_finite()) && (self.sum() - 1.0).abs() <= tol
    }

    // --- serialization -----------------------------------------------------

    /// Writes the field as CSV with header `i_r,i_rdot,R,Rdot,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
        w.write_record(["i_r", "i_rdot", "R", "Rdot", "value"])
            .map_err(io)?;
        for idx in self.space.indices() {
            let (r, d) = self.space.center_unchecked(idx.i_r, idx.i_rdot);
            w.write_record([
                idx.i_r.to_string(),
                idx.i_rdot.to_string(),
                r.to_string(),
                d.to_string(),
                self.values[idx.flat].to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::Numerical(format!("csv flush failed: {e}")))?;
        Ok(())
    }

    /// Reads a CSV written by [`ScenarioField::write_csv`] onto `space`.
    pub fn read_csv<R: Read>(space: ScenarioSpace, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut values = vec![f64::NAN; space.n_total()];
        let mut seen = vec![false; space.n_total()];
        for (k, rec) in rdr.records().enumerate() {
            let line = k as u64 + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                reason: e.to_string(),
            })?;
            if rec.len() != 5 {
                return Err(Error::Parse {
                    line,
                    reason: format!("expected 5 columns, found {}", rec.len()),
                });
            }
            let parse_usize = |s: &str| {
                s.trim().parse::<usize>().map_err(|e| Error::Parse {
                    line,
                    reason: e.to_string(),
                })
            };
            let i_r = parse_usize(&rec[0])?;
            let i_rdot = parse_usize(&rec[1])?;
            let value: f64 = rec[4].trim().parse().map_err(|e| Error::Parse {
                line,
                reason: format!("{e}"),
            })?;
            let idx = space.index(i_r, i_rdot)?;
            values[idx.flat] = value;
            seen[idx.flat] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Parse {
                line: 0,
                reason: format!("cell {missing} missing from csv"),
            });
        }
        ScenarioField::new(space, values)
    }

    /// Compact little-endian encoding: magic `ATSF`, version (u32), `n_r` and
    /// `n_rdot` (u64), the four grid parameters `r_min, r_step, rdot_min,
    /// rdot_step` (f64), then the values in flat order (f64).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 16 + 32 + 8 * self.values.len());
        out.extend_from_slice(FIELD_MAGIC);
        out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.space.n_r as u64).to_le_bytes());
        out.extend_from_slice(&(self.space.n_rdot as u64).to_le_bytes());
        for p in [
            self.space.r_min,
            self.space.r_step,
            self.space.rdot_min,
            self.space.rdot_step,
        ] {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one field from the front of `bytes`, returning it together
    /// with the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let bad = |reason: &str| Error::Format {
            path: "<bytes>".into(),
            reason: reason.to_string(),
        };
        let mut cur = ByteCursor::new(bytes);
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != FIELD_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != FIELD_VERSION {
            return Err(bad("unsupported field version"));
        }
        let n_r = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let n_rdot = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let mut params = [0.0; 4];
        for p in &mut params {
            *p = cur.f64().ok_or_else(|| bad("truncated header"))?;
        }
        let space = ScenarioSpace::from_parts(params[0], params[1], params[2], params[3], n_r, n_rdot)?;
        let n = space.n_total();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(cur.f64().ok_or_else(|| bad("truncated values"))?);
        }
        Ok((ScenarioField { space, values }, cur.pos))
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (field, used) = Self::from_bytes(&bytes).map_err(|e| relabel(e, path))?;
        if used != bytes.len() {
            return Err(Error::Format {
                path: path.into(),
                reason: "trailing bytes after field".into(),
            });
        }
        Ok(field)
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

pub(crate) fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.into(),
            reason,
        },
        other => other,
    }
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Neumaier summation; fields hold thousands of terms of very different size.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

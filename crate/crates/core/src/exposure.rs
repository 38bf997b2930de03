//! Naturalistic exposure distribution P(x) over the scenario grid.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{ScenarioField, ScenarioSpace};

/// One recorded cut-in: range (m) and range rate (m/s) at the cut-in moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutInEvent {
    pub range: f64,
    pub range_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureModel {
    pub p_x: ScenarioField,
    pub n_events_used: u64,
    pub n_events_rejected: u64,
}

impl ExposureModel {
    /// Histogram of the in-bounds events; out-of-bounds events are counted
    /// as rejected.
    pub fn from_events<'a>(
        space: ScenarioSpace,
        events: impl IntoIterator<Item = &'a CutInEvent>,
    ) -> Result<Self> {
        let mut counts = vec![0u64; space.n_total()];
        let mut used = 0u64;
        let mut rejected = 0u64;
        for ev in events {
            match space.bin(ev.range, ev.range_rate) {
                Some(idx) => {
                    counts[idx.flat] += 1;
                    used += 1;
                }
                None => rejected += 1,
            }
        }
        Self::from_counts(space, counts, used, rejected)
    }

    fn from_counts(space: ScenarioSpace, counts: Vec<u64>, used: u64, rejected: u64) -> Result<Self> {
        if used == 0 {
            return Err(Error::EmptyData(format!(
                "no in-bounds cut-in events ({rejected} rejected)"
            )));
        }
        let total = used as f64;
        let values = counts.into_iter().map(|c| c as f64 / total).collect();
        let p_x = ScenarioField::new(space, values)?.normalized()?;
        Ok(ExposureModel {
            p_x,
            n_events_used: used,
            n_events_rejected: rejected,
        })
    }

    /// Streams a `range,range_rate` CSV into a histogram.
    pub fn ingest_csv<R: Read>(space: ScenarioSpace, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                reason: e.to_string(),
            })?
            .clone();
        if headers.len() != 2 || &headers[0] != "range" || &headers[1] != "range_rate" {
            return Err(Error::Parse {
                line: 1,
                reason: format!(
                    "expected header `range,range_rate`, found `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut counts = vec![0u64; space.n_total()];
        let mut used = 0u64;
        let mut rejected = 0u64;
        let mut record = csv::StringRecord::new();
        loop {
            let line = rdr.position().line();
            let more = rdr.read_record(&mut record).map_err(|e| Error::Parse {
                line: e.position().map(|p| p.line()).unwrap_or(line),
                reason: e.to_string(),
            })?;
            if !more {
                break;
            }
            let line = record.position().map(|p| p.line()).unwrap_or(line);
            if record.len() != 2 {
                return Err(Error::Parse {
                    line,
                    reason: format!("expected 2 columns, found {}", record.len()),
                });
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| Error::Parse {
                    line,
                    reason: format!("{what} `{s}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        reason: format!("{what} `{s}` is not finite"),
                    });
                }
                Ok(v)
            };
            let r = parse(&record[0], "range")?;
            let d = parse(&record[1], "range_rate")?;
            match space.bin(r, d) {
                Some(idx) => {
                    counts[idx.flat] += 1;
                    used += 1;
                }
                None => rejected += 1,
            }
        }
        Self::from_counts(space, counts, used, rejected)
    }
}

pub fn write_events_csv<W: Write>(events: &[CutInEvent], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
    w.write_record(["range", "range_rate"]).map_err(err)?;
    for ev in events {
        w.write_record([ev.range.to_string(), ev.range_rate.to_string()])
            .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Numerical(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// A bivariate Gaussian with independent axes, optionally truncated to a box
/// of `trunc_sigma` standard deviations around its mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: [f64; 2],
    pub std: [f64; 2],
    #[serde(default)]
    pub trunc_sigma: Option<f64>,
}

impl MixtureComponent {
    /// Whether `(r, rdot)` lies in the component's own truncation box.
    pub fn admits(&self, r: f64, rdot: f64) -> bool {
        match self.trunc_sigma {
            None => true,
            Some(k) => {
                (r - self.mean[0]).abs() <= k * self.std[0]
                    && (rdot - self.mean[1]).abs() <= k * self.std[1]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticNdd {
    pub n_events: u64,
    pub components: Vec<MixtureComponent>,
}

impl Default for SyntheticNdd {
    /// A broad car-following population plus a small, tight cluster of
    /// aggressive short-gap cut-ins.
    fn default() -> Self {
        SyntheticNdd {
            n_events: 414_770,
            components: vec![
                MixtureComponent {
                    weight: 0.96,
                    mean: [40.0, 0.0],
                    std: [12.0, 2.5],
                    trunc_sigma: None,
                },
                MixtureComponent {
                    weight: 0.04,
                    mean: [8.0, -6.0],
                    std: [4.0, 2.0],
                    trunc_sigma: Some(1.0),
                },
            ],
        }
    }
}

impl SyntheticNdd {
    pub fn validate(&self) -> Result<()> {
        if self.n_events == 0 {
            return Err(Error::config("exposure.n_events", "must be at least 1"));
        }
        if self.components.is_empty() {
            return Err(Error::config("exposure.components", "need at least one component"));
        }
        for c in &self.components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::config("exposure.components.weight", "must be positive"));
            }
            if !(c.std[0] > 0.0 && c.std[1] > 0.0) {
                return Err(Error::config("exposure.components.std", "must be positive"));
            }
            if !(c.mean[0].is_finite() && c.mean[1].is_finite()) {
                return Err(Error::config("exposure.components.mean", "must be finite"));
            }
            if let Some(k) = c.trunc_sigma {
                if !(k > 0.0) {
                    return Err(Error::config(
                        "exposure.components.trunc_sigma",
                        "must be positive",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Draws `n_events` cut-ins. Each event picks a component by weight and is
    /// redrawn from that component until it lies inside the grid and the
    /// component's truncation box.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        space: &ScenarioSpace,
        rng: &mut R,
    ) -> Result<Vec<CutInEvent>> {
        self.validate()?;
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut out = Vec::with_capacity(self.n_events as usize);
        for _ in 0..self.n_events {
            let mut u = rng.random::<f64>() * total;
            let mut comp = &self.components[self.components.len() - 1];
            for c in &self.components {
                if u < c.weight {
                    comp = c;
                    break;
                }
                u -= c.weight;
            }
            out.push(draw_component(comp, space, rng)?);
        }
        Ok(out)
    }

    pub fn exposure<R: Rng + ?Sized>(&self, space: &ScenarioSpace, rng: &mut R) -> Result<ExposureModel> {
        let events = self.generate(space, rng)?;
        ExposureModel::from_events(*space, &events)
    }
}

const MAX_REDRAWS: usize = 1_000_000;

fn draw_component<R: Rng + ?Sized>(
    c: &MixtureComponent,
    space: &ScenarioSpace,
    rng: &mut R,
) -> Result<CutInEvent> {
    for _ in 0..MAX_REDRAWS {
        let zr: f64 = rng.sample(StandardNormal);
        let zd: f64 = rng.sample(StandardNormal);
        let r = c.mean[0] + c.std[0] * zr;
        let d = c.mean[1] + c.std[1] * zd;
        if space.contains(r, d) && c.admits(r, d) {
            return Ok(CutInEvent {
                range: r,
                range_rate: d,
            });
        }
    }
    Err(Error::config(
        "exposure.components",
        "component has negligible mass inside the grid",
    ))
}

use crate::error::{Error, Result};
use crate::losses::{DirectionReport, LossReport};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const TRACE_HEADER: &str = "step,dir,adv_g,adv_dc,adv_df,cyc,percep,total";

/// Per-step losses of a run, two CSV rows (`AB`, `BA`) per step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub reports: Vec<LossReport>,
}

impl LossTrace {
    pub fn push(&mut self, r: LossReport) {
        self.reports.push(r);
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn last(&self) -> Option<&LossReport> {
        self.reports.last()
    }

    /// Drops reports after `step`.
    pub fn truncate_to(&mut self, step: u64) {
        self.reports.retain(|r| r.step <= step);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.reports {
            for (dir, d) in [("AB", &r.ab), ("BA", &r.ba)] {
                let _ = writeln!(
                    s,
                    "{},{dir},{},{},{},{},{},{}",
                    r.step, d.adv_g, d.adv_d_coarse, d.adv_d_fine, d.cyc, d.percep, d.total_g
                );
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<LossTrace> {
        let bad = |line: usize, m: &str| Error::Parse {
            what: "trace csv",
            offset: line,
            message: m.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(bad(0, "missing header"));
        }
        let mut trace = LossTrace::default();
        let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        if rows.len() % 2 != 0 {
            return Err(bad(rows.len(), "odd number of rows"));
        }
        let parse_row = |i: usize, row: &str, dir: &str| -> Result<(u64, DirectionReport)> {
            let f: Vec<&str> = row.split(',').collect();
            if f.len() != 8 || f[1] != dir {
                return Err(bad(i + 1, "malformed row"));
            }
            let v: Vec<f64> = f[2..]
                .iter()
                .map(|x| x.parse::<f64>().map_err(|_| bad(i + 1, "bad number")))
                .collect::<Result<_>>()?;
            let step = f[0].parse().map_err(|_| bad(i + 1, "bad step"))?;
            Ok((
                step,
                DirectionReport {
                    adv_g: v[0],
                    adv_d_coarse: v[1],
                    adv_d_fine: v[2],
                    cyc: v[3],
                    percep: v[4],
                    total_g: v[5],
                },
            ))
        };
        for (k, pair) in rows.chunks(2).enumerate() {
            let (step, ab) = parse_row(2 * k, pair[0], "AB")?;
            let (step_ba, ba) = parse_row(2 * k + 1, pair[1], "BA")?;
            if step != step_ba {
                return Err(bad(2 * k + 2, "AB and BA rows disagree on step"));
            }
            trace.push(LossReport { step, ab, ba });
        }
        Ok(trace)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<LossTrace> {
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

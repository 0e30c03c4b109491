//! Right-censored survival data.
//!
//! Each subject carries an observed time `V = min(T, C)`, an event flag
//! `δ = 1{T ≤ C}` and a covariate path. Paths are piecewise constant and
//! left-continuous: the value attached to segment `k` holds on
//! `(breakpoints[k], breakpoints[k+1]]`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePath {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl CovariatePath {
    /// A time-fixed covariate vector.
    pub fn fixed(z: Vec<f64>) -> Self {
        CovariatePath {
            breakpoints: vec![0.0],
            values: vec![z],
        }
    }

    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(Error::invalid(
                "covariate path needs one value per breakpoint and at least one segment",
            ));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::invalid("covariate path must start at time 0"));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("covariate breakpoints must be strictly increasing"));
        }
        let d = values[0].len();
        if values.iter().any(|v| v.len() != d) {
            return Err(Error::invalid("covariate path segments differ in dimension"));
        }
        if values.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("covariate values must be finite"));
        }
        Ok(CovariatePath { breakpoints, values })
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_fixed(&self) -> bool {
        self.values.len() == 1
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Index of the segment whose value applies at `t` (left-continuous).
    pub fn segment_at(&self, t: f64) -> usize {
        // last k with breakpoints[k] < t; t <= 0 falls in segment 0
        self.breakpoints
            .partition_point(|&b| b < t)
            .saturating_sub(1)
    }

    pub fn at(&self, t: f64) -> &[f64] {
        &self.values[self.segment_at(t)]
    }

    fn truncate_after(&mut self, v: f64) {
        let keep = self.breakpoints.partition_point(|&b| b < v).max(1);
        self.breakpoints.truncate(keep);
        self.values.truncate(keep);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Observed time `V`.
    pub time: f64,
    /// `δ`: true when `time` is an observed failure.
    pub event: bool,
    pub z: CovariatePath,
}

impl Subject {
    pub fn new(id: impl Into<String>, time: f64, event: bool, z: CovariatePath) -> Self {
        Subject {
            id: id.into(),
            time,
            event,
            z,
        }
    }

    /// `Y(t) = 1{V ≥ t}`.
    pub fn at_risk(&self, t: f64) -> bool {
        self.time >= t
    }

    /// `N(t) = 1{V ≤ t, δ = 1}`.
    pub fn counting(&self, t: f64) -> bool {
        self.event && self.time <= t
    }
}

/// Validated, immutable collection of subjects on `[0, τ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    subjects: Vec<Subject>,
    tau: f64,
    d: usize,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Validates subjects and censors anything beyond `tau` (default: the largest time).
    pub fn new(
        mut subjects: Vec<Subject>,
        tau: Option<f64>,
        covariate_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::invalid("dataset has no subjects"));
        }
        let d = subjects[0].z.dim();
        for s in &subjects {
            if !(s.time > 0.0) || !s.time.is_finite() {
                return Err(Error::invalid(format!(
                    "subject {}: time must be positive and finite, got {}",
                    s.id, s.time
                )));
            }
            if s.z.dim() != d {
                return Err(Error::invalid(format!(
                    "subject {}: covariate dimension {} differs from {d}",
                    s.id,
                    s.z.dim()
                )));
            }
            if s.z.values.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("subject {}: NaN covariate", s.id)));
            }
        }
        let max_time = subjects.iter().map(|s| s.time).fold(0.0, f64::max);
        let tau = match tau {
            Some(t) if t > 0.0 && t.is_finite() => t,
            Some(t) => return Err(Error::invalid(format!("tau must be positive, got {t}"))),
            None => max_time,
        };
        for s in &mut subjects {
            if s.time > tau {
                s.time = tau;
                s.event = false;
            }
            s.z.truncate_after(s.time);
        }
        if !subjects.iter().any(|s| s.event) {
            return Err(Error::invalid("dataset has zero events"));
        }
        let covariate_names = match covariate_names {
            Some(names) if names.len() == d => names,
            Some(names) => {
                return Err(Error::invalid(format!(
                    "{} covariate names for dimension {d}",
                    names.len()
                )))
            }
            None => (1..=d).map(|j| format!("z{j}")).collect(),
        };
        Ok(Dataset {
            subjects,
            tau,
            d,
            covariate_names,
        })
    }

    /// Fixed-covariate dataset from parallel columns.
    pub fn from_columns(
        times: &[f64],
        events: &[bool],
        covariates: &[Vec<f64>],
        tau: Option<f64>,
    ) -> Result<Self> {
        if times.len() != events.len() || times.len() != covariates.len() {
            return Err(Error::invalid("column lengths differ"));
        }
        let subjects = times
            .iter()
            .zip(events)
            .zip(covariates)
            .enumerate()
            .map(|(i, ((&t, &e), z))| {
                Subject::new((i + 1).to_string(), t, e, CovariatePath::fixed(z.clone()))
            })
            .collect();
        Dataset::new(subjects, tau, None)
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn has_fixed_covariates(&self) -> bool {
        self.subjects.iter().all(|s| s.z.is_fixed())
    }

    /// Same subjects restricted to a subset of covariate columns.
    pub fn select_covariates(&self, columns: &[usize]) -> Result<Dataset> {
        if columns.iter().any(|&c| c >= self.d) {
            return Err(Error::invalid("covariate column out of range"));
        }
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let values = s
                    .z
                    .values
                    .iter()
                    .map(|v| columns.iter().map(|&c| v[c]).collect())
                    .collect();
                Subject {
                    z: CovariatePath {
                        breakpoints: s.z.breakpoints.clone(),
                        values,
                    },
                    ..s.clone()
                }
            })
            .collect();
        let names = columns
            .iter()
            .map(|&c| self.covariate_names[c].clone())
            .collect();
        Dataset::new(subjects, Some(self.tau), Some(names))
    }

    /// Writes the counting-process (long) layout `id,start,stop,status,cov*`.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "start".into(), "stop".into(), "status".into()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for s in &self.subjects {
            let k = s.z.breakpoints.len();
            for seg in 0..k {
                let start = s.z.breakpoints[seg];
                let stop = if seg + 1 < k {
                    s.z.breakpoints[seg + 1]
                } else {
                    s.time
                };
                let status = u8::from(seg + 1 == k && s.event);
                let mut rec = vec![s.id.clone(), start.to_string(), stop.to_string(), status.to_string()];
                rec.extend(s.z.values[seg].iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the wide layout `time,status,cov*`. Only valid for fixed covariates.
    pub fn write_wide_csv<W: Write>(&self, out: W) -> Result<()> {
        if !self.has_fixed_covariates() {
            return Err(Error::invalid(
                "wide layout needs time-fixed covariates; use the long layout",
            ));
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string(), "status".into()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for s in &self.subjects {
            let mut rec = vec![s.time.to_string(), u8::from(s.event).to_string()];
            rec.extend(s.z.values[0].iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Distinct observed failure times with their multiplicities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureGrid {
    pub times: Vec<f64>,
    pub counts: Vec<usize>,
}

impl FailureGrid {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of `t` on the grid, if it is a failure time.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = self.times.partition_point(|&x| x < t);
        (k < self.times.len() && self.times[k] == t).then_some(k)
    }

    /// Number of grid times `≤ t`.
    pub fn count_le(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x <= t)
    }
}

pub fn failure_grid(data: &Dataset) -> FailureGrid {
    grid_from_times(data.subjects.iter().filter(|s| s.event).map(|s| s.time))
}

pub(crate) fn grid_from_times(events: impl Iterator<Item = f64>) -> FailureGrid {
    let mut ts: Vec<f64> = events.collect();
    ts.sort_by(|a, b| a.total_cmp(b));
    let mut times: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for t in ts {
        match times.last() {
            Some(&last) if last == t => *counts.last_mut().unwrap() += 1,
            _ => {
                times.push(t);
                counts.push(1);
            }
        }
    }
    FailureGrid { times, counts }
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {what} from {field:?}"),
    })
}

fn parse_status(field: &str, line: usize) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            line,
            msg: format!("invalid status {other:?} (expected 0 or 1)"),
        }),
    }
}

fn parse_covariates(rec: &csv::StringRecord, from: usize, line: usize) -> Result<Vec<f64>> {
    rec.iter()
        .skip(from)
        .map(|f| {
            let x = parse_f64(f, line, "covariate")?;
            if x.is_nan() {
                return Err(Error::Parse {
                    line,
                    msg: "NaN covariate".into(),
                });
            }
            Ok(x)
        })
        .collect()
}

fn check_header(found: &csv::StringRecord, want: &[&str]) -> Result<()> {
    for (i, w) in want.iter().enumerate() {
        match found.get(i) {
            Some(f) if f.trim().eq_ignore_ascii_case(w) => {}
            other => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("header column {} should be {w:?}, found {other:?}", i + 1),
                })
            }
        }
    }
    Ok(())
}

/// Reads `time,status,cov*` (one subject per row, fixed covariates).
pub fn read_wide_csv<R: Read>(input: R, tau: Option<f64>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    check_header(&header, &["time", "status"])?;
    let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut subjects = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let time = parse_f64(&rec[0], line, "time")?;
        if !(time > 0.0) {
            return Err(Error::Parse {
                line,
                msg: format!("nonpositive time {time}"),
            });
        }
        let event = parse_status(&rec[1], line)?;
        let z = parse_covariates(&rec, 2, line)?;
        subjects.push(Subject::new((row + 1).to_string(), time, event, CovariatePath::fixed(z)));
    }
    Dataset::new(subjects, tau, Some(names))
}

/// Reads `id,start,stop,status,cov*` (counting-process layout, time-varying covariates).
pub fn read_long_csv<R: Read>(input: R, tau: Option<f64>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    check_header(&header, &["id", "start", "stop", "status"])?;
    let names: Vec<String> = header.iter().skip(4).map(str::to_string).collect();

    struct Row {
        line: usize,
        start: f64,
        stop: f64,
        event: bool,
        z: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "inconsistent covariate dimension: expected {} fields, found {}",
                    header.len(),
                    rec.len()
                ),
            });
        }
        let id = rec[0].to_string();
        let r = Row {
            line,
            start: parse_f64(&rec[1], line, "start")?,
            stop: parse_f64(&rec[2], line, "stop")?,
            event: parse_status(&rec[3], line)?,
            z: parse_covariates(&rec, 4, line)?,
        };
        if !(r.stop > r.start) {
            return Err(Error::Parse {
                line,
                msg: format!("interval ({}, {}] is empty", r.start, r.stop),
            });
        }
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push(r);
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap();
        rows.sort_by(|a, b| a.start.total_cmp(&b.start));
        if rows[0].start != 0.0 {
            return Err(Error::Parse {
                line: rows[0].line,
                msg: format!("id {id}: first interval must start at 0 (gap)"),
            });
        }
        for w in rows.windows(2) {
            if w[1].start > w[0].stop {
                return Err(Error::Parse {
                    line: w[1].line,
                    msg: format!("id {id}: gap between {} and {}", w[0].stop, w[1].start),
                });
            }
            if w[1].start < w[0].stop {
                return Err(Error::Parse {
                    line: w[1].line,
                    msg: format!("id {id}: overlapping intervals at {}", w[1].start),
                });
            }
            if w[0].event {
                return Err(Error::Parse {
                    line: w[0].line,
                    msg: format!("id {id}: event before final interval"),
                });
            }
        }
        let last = rows.last().unwrap();
        let (time, event) = (last.stop, last.event);
        let breakpoints = rows.iter().map(|r| r.start).collect();
        let values = rows.into_iter().map(|r| r.z).collect();
        let z = CovariatePath::piecewise(breakpoints, values)?;
        subjects.push(Subject::new(id, time, event, z));
    }
    Dataset::new(subjects, tau, Some(names))
}

pub fn load_wide_csv(path: impl AsRef<Path>, tau: Option<f64>) -> Result<Dataset> {
    read_wide_csv(std::fs::File::open(path)?, tau)
}

pub fn load_long_csv(path: impl AsRef<Path>, tau: Option<f64>) -> Result<Dataset> {
    read_long_csv(std::fs::File::open(path)?, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wide(s: &str, tau: Option<f64>) -> Result<Dataset> {
        read_wide_csv(s.as_bytes(), tau)
    }

    fn long(s: &str) -> Result<Dataset> {
        read_long_csv(s.as_bytes(), None)
    }

    #[test]
    fn wide_basic() {
        let d = wide("time,status,x\n1,1,0\n2,0,1\n3,1,0\n", None).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.d(), 1);
        assert_eq!(d.n_events(), 2);
        assert_eq!(d.tau(), 3.0);
        assert_eq!(d.covariate_names(), ["x"]);
    }

    #[test]
    fn wide_invalid_status() {
        let err = wide("time,status,x\n1,2,0\n", None).unwrap_err();
        assert!(err.to_string().contains("invalid status"), "{err}");
    }

    #[test]
    fn wide_rejects_bad_rows() {
        assert!(wide("time,status,x\n0,1,0\n", None).is_err());
        assert!(wide("time,status,x\n-1,1,0\n", None).is_err());
        assert!(wide("time,status,x\n1,1,NaN\n", None).is_err());
        assert!(wide("time,status,x\n1,1,abc\n", None).is_err());
        assert!(wide("time,status,x\n1,0,0\n2,0,1\n", None)
            .unwrap_err()
            .to_string()
            .contains("zero events"));
        assert!(wide("t,status,x\n1,1,0\n", None).is_err());
    }

    #[test]
    fn wide_horizon_truncation() {
        let d = wide("time,status,x\n1,1,0\n3,1,5\n", Some(2.0)).unwrap();
        let s = &d.subjects()[1];
        assert_eq!(s.time, 2.0);
        assert!(!s.event);
        assert_eq!(d.tau(), 2.0);
    }

    #[test]
    fn long_two_segments() {
        let d = long("id,start,stop,status,z\n7,0,1,0,0\n7,1,2,1,1\n").unwrap();
        let s = &d.subjects()[0];
        assert_eq!(s.id, "7");
        assert_eq!(s.time, 2.0);
        assert!(s.event);
        assert_eq!(s.z.at(0.5), [0.0]);
        assert_eq!(s.z.at(1.0), [0.0]);
        assert_eq!(s.z.at(1.5), [1.0]);
        assert_eq!(s.z.at(2.0), [1.0]);
    }

    #[test]
    fn long_gap_and_friends() {
        let err = long("id,start,stop,status,z\n1,0,1,0,0\n1,2,3,1,0\n").unwrap_err();
        assert!(err.to_string().contains("gap"), "{err}");
        let err = long("id,start,stop,status,z\n1,0,2,0,0\n1,1,3,1,0\n").unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
        let err = long("id,start,stop,status,z\n1,0,1,1,0\n1,1,3,0,0\n").unwrap_err();
        assert!(err.to_string().contains("event before final"), "{err}");
        let err = long("id,start,stop,status,z\n1,0,1,1,0,5\n").unwrap_err();
        assert!(err.to_string().contains("dimension"), "{err}");
    }

    #[test]
    fn long_single_row_is_fixed() {
        let d = read_long_csv("id,start,stop,status,z\n1,0,5,0,2\n2,0,1,1,0\n".as_bytes(), None)
            .unwrap();
        let s = &d.subjects()[0];
        assert!(s.z.is_fixed());
        assert_eq!(s.time, 5.0);
        assert!(!s.event);
        assert_eq!(s.z.at(3.0), [2.0]);
    }

    #[test]
    fn grid_dedups() {
        let d = Dataset::from_columns(
            &[1.0, 3.0, 3.0, 4.0],
            &[true, true, true, false],
            &[vec![], vec![], vec![], vec![]],
            None,
        )
        .unwrap();
        let g = failure_grid(&d);
        assert_eq!(g.times, [1.0, 3.0]);
        assert_eq!(g.counts, [1, 2]);
        let d = Dataset::from_columns(&[2.0, 5.0], &[true, false], &[vec![], vec![]], None).unwrap();
        assert_eq!(failure_grid(&d).times, [2.0]);
        assert_eq!(failure_grid(&d).counts, [1]);
    }

    #[test]
    fn counting_process_views() {
        let s = Subject::new("a", 2.0, true, CovariatePath::fixed(vec![]));
        assert!(s.at_risk(2.0));
        assert!(!s.at_risk(2.0001));
        assert!(!s.counting(1.999));
        assert!(s.counting(2.0));
        let c = Subject::new("b", 2.0, false, CovariatePath::fixed(vec![]));
        assert!(!c.counting(10.0));
    }

    #[test]
    fn path_truncated_at_horizon() {
        let z = CovariatePath::piecewise(vec![0.0, 1.0, 3.0], vec![vec![0.0], vec![1.0], vec![2.0]])
            .unwrap();
        let d = Dataset::new(vec![Subject::new("x", 5.0, true, z)], Some(2.0), None).unwrap_err();
        // the only event is pushed past tau, so no events remain
        assert!(d.to_string().contains("zero events"));
    }
}

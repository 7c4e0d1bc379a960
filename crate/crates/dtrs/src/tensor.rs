//! Sparse temporal tensor storage and subgroup schemes.
//!
//! Data are kept in long form: a d-mode tensor cell `(i_1, .., i_d)` holds a
//! short time series of observations, and most cells are empty. Cells are
//! stored in a sorted map so that all iteration over the data is
//! deterministic regardless of input order.
//!
//! Index convention: subject indices and subgroup labels are 1-based in all
//! external files (CSV columns, schema JSON) and 0-based everywhere in this
//! crate's APIs. The conversion happens exactly once, inside ingestion and
//! export.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations of one tensor cell, kept sorted by strictly increasing time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellSeries {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl CellSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A sparse tensor-valued time series on the unit time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalTensor {
    dims: Vec<u32>,
    cells: BTreeMap<Vec<u32>, CellSeries>,
    num_obs: usize,
}

impl TemporalTensor {
    /// Creates an empty tensor with the given mode sizes (all at least 1).
    pub fn new(dims: Vec<u32>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&n| n == 0) {
            return Err(Error::Shape {
                msg: format!("tensor dims must be nonempty and positive, got {dims:?}"),
            });
        }
        Ok(TemporalTensor {
            dims,
            cells: BTreeMap::new(),
            num_obs: 0,
        })
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    /// Number of nonempty cells `N`.
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_observations(&self) -> usize {
        self.num_obs
    }

    /// Inserts one observation; `cell` is 0-based, `t` must lie in `[0, 1]`,
    /// and `(cell, t)` must not already be present.
    pub fn insert(&mut self, cell: &[u32], t: f64, value: f64) -> Result<()> {
        if cell.len() != self.dims.len() {
            return Err(Error::Shape {
                msg: format!(
                    "cell {cell:?} has {} indices, tensor order is {}",
                    cell.len(),
                    self.dims.len()
                ),
            });
        }
        for (k, (&i, &n)) in cell.iter().zip(&self.dims).enumerate() {
            if i >= n {
                return Err(Error::IndexRange {
                    what: format!("mode {} subject", k + 1),
                    got: i as usize + 1,
                    max: n as usize,
                });
            }
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Bounds {
                what: "observation time".into(),
                value: t,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !value.is_finite() {
            return Err(Error::Bounds {
                what: "observation value".into(),
                value,
                lo: f64::NEG_INFINITY,
                hi: f64::INFINITY,
            });
        }
        let series = self.cells.entry(cell.to_vec()).or_default();
        match series.times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(_) => {
                return Err(Error::DuplicateObservation {
                    cell: cell.iter().map(|&i| i + 1).collect(),
                    time: t,
                })
            }
            Err(pos) => {
                series.times.insert(pos, t);
                series.values.insert(pos, value);
            }
        }
        self.num_obs += 1;
        Ok(())
    }

    pub fn get(&self, cell: &[u32]) -> Option<&CellSeries> {
        self.cells.get(cell)
    }

    /// All nonempty cells in sorted index order.
    pub fn cells(&self) -> impl Iterator<Item = (&[u32], &CellSeries)> {
        self.cells.iter().map(|(k, v)| (k.as_slice(), v))
    }

    /// Every observation as `(cell, time, value)`, cells sorted, times
    /// ascending within a cell.
    pub fn iter_observations(&self) -> impl Iterator<Item = (&[u32], f64, f64)> {
        self.cells().flat_map(|(cell, series)| {
            series
                .times
                .iter()
                .zip(&series.values)
                .map(move |(&t, &y)| (cell, t, y))
        })
    }

    /// The index set of nonempty cells whose mode-`k` coordinate equals
    /// `subject` (0-based).
    pub fn cells_with_subject(&self, mode: usize, subject: u32) -> Result<Vec<Vec<u32>>> {
        if mode >= self.dims.len() {
            return Err(Error::IndexRange {
                what: "mode".into(),
                got: mode + 1,
                max: self.dims.len(),
            });
        }
        if subject >= self.dims[mode] {
            return Err(Error::IndexRange {
                what: format!("mode {} subject", mode + 1),
                got: subject as usize + 1,
                max: self.dims[mode] as usize,
            });
        }
        Ok(self
            .cells
            .keys()
            .filter(|c| c[mode] == subject)
            .cloned()
            .collect())
    }

    /// Sorted distinct observation times.
    pub fn distinct_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self
            .cells
            .values()
            .flat_map(|s| s.times.iter().copied())
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        times
    }

    /// Splits off the observations at the last `count` distinct time points
    /// (a forward-validation split). Both halves must end up nonempty.
    pub fn split_trailing_times(&self, count: usize) -> Result<(TemporalTensor, TemporalTensor)> {
        let times = self.distinct_times();
        if count == 0 || count >= times.len() {
            return Err(Error::EmptySplit {
                msg: format!(
                    "cannot hold out {count} of {} distinct time points",
                    times.len()
                ),
            });
        }
        let threshold = times[times.len() - count];
        let mut head = TemporalTensor::new(self.dims.clone())?;
        let mut tail = TemporalTensor::new(self.dims.clone())?;
        for (cell, t, y) in self.iter_observations() {
            let target = if t < threshold { &mut head } else { &mut tail };
            target.insert(cell, t, y)?;
        }
        Ok((head, tail))
    }
}

/// Assignment of time points to time subgroups. Stored labels are 1-based
/// (matching external files); accessors return 0-based group indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeGroups {
    /// Every time point in one group.
    Single,
    /// Half-open intervals `[0,b_1), [b_1,b_2), .., [b_(G-1), 1]` with a
    /// label per interval; labels may repeat (periodic calendars).
    Intervals { breakpoints: Vec<f64>, labels: Vec<u32> },
    /// `units` equal slices of `[0, 1]` labeled cyclically modulo `groups`
    /// (e.g. 24 months labeled by 12 calendar months).
    Periodic { units: u32, groups: u32 },
}

impl TimeGroups {
    fn validate(&self) -> Result<()> {
        match self {
            TimeGroups::Single => Ok(()),
            TimeGroups::Intervals {
                breakpoints,
                labels,
            } => {
                let mut prev = 0.0;
                for &b in breakpoints {
                    if !b.is_finite() || b <= prev || b >= 1.0 {
                        return Err(Error::Config {
                            msg: "time-group breakpoints must be strictly increasing inside (0, 1)"
                                .into(),
                        });
                    }
                    prev = b;
                }
                if labels.len() != breakpoints.len() + 1 {
                    return Err(Error::Config {
                        msg: format!(
                            "expected {} interval labels, got {}",
                            breakpoints.len() + 1,
                            labels.len()
                        ),
                    });
                }
                if labels.iter().any(|&l| l == 0) {
                    return Err(Error::Config {
                        msg: "time-group labels are 1-based and must be positive".into(),
                    });
                }
                Ok(())
            }
            TimeGroups::Periodic { units, groups } => {
                if *groups == 0 || *units == 0 || units % groups != 0 {
                    return Err(Error::Config {
                        msg: format!(
                            "periodic time groups need units divisible by groups, got {units}/{groups}"
                        ),
                    });
                }
                Ok(())
            }
        }
    }

    /// Number of distinct time groups `m`.
    pub fn num_groups(&self) -> usize {
        match self {
            TimeGroups::Single => 1,
            TimeGroups::Intervals { labels, .. } => {
                *labels.iter().max().expect("validated nonempty") as usize
            }
            TimeGroups::Periodic { groups, .. } => *groups as usize,
        }
    }

    /// 0-based group of a time point in `[0, 1]`.
    pub fn group_of(&self, t: f64) -> usize {
        debug_assert!((0.0..=1.0).contains(&t));
        match self {
            TimeGroups::Single => 0,
            TimeGroups::Intervals {
                breakpoints,
                labels,
            } => {
                let idx = breakpoints.partition_point(|&b| b <= t);
                labels[idx] as usize - 1
            }
            TimeGroups::Periodic { units, groups } => {
                let unit = ((t * f64::from(*units)).floor() as u32).min(units - 1);
                (unit % groups) as usize
            }
        }
    }
}

/// Known subgroup memberships: one label per subject per mode, plus the
/// time-group rule. Cold-start forecasting only needs these labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupScheme {
    mode_groups: Vec<Vec<u32>>,
    num_mode_groups: Vec<usize>,
    time_groups: TimeGroups,
}

impl SubgroupScheme {
    /// Builds a scheme from 0-based per-subject labels.
    pub fn new(mode_groups: Vec<Vec<u32>>, time_groups: TimeGroups) -> Result<Self> {
        if mode_groups.is_empty() || mode_groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Shape {
                msg: "subgroup scheme needs at least one labeled subject per mode".into(),
            });
        }
        time_groups.validate()?;
        let num_mode_groups = mode_groups
            .iter()
            .map(|g| *g.iter().max().unwrap() as usize + 1)
            .collect();
        Ok(SubgroupScheme {
            mode_groups,
            num_mode_groups,
            time_groups,
        })
    }

    /// Trivial scheme: every subject in group 0, a single time group.
    pub fn uniform(dims: &[u32]) -> Self {
        SubgroupScheme::new(
            dims.iter().map(|&n| vec![0; n as usize]).collect(),
            TimeGroups::Single,
        )
        .expect("uniform scheme over valid dims")
    }

    pub fn order(&self) -> usize {
        self.mode_groups.len()
    }

    pub fn num_subjects(&self, mode: usize) -> usize {
        self.mode_groups[mode].len()
    }

    /// 0-based subgroup of a subject.
    pub fn mode_group(&self, mode: usize, subject: u32) -> Result<usize> {
        let groups = self.mode_groups.get(mode).ok_or_else(|| Error::IndexRange {
            what: "mode".into(),
            got: mode + 1,
            max: self.mode_groups.len(),
        })?;
        groups
            .get(subject as usize)
            .map(|&g| g as usize)
            .ok_or_else(|| Error::ColdStartUnresolvable {
                msg: format!(
                    "subject {} of mode {} has no subgroup assignment (known: 1..={})",
                    subject + 1,
                    mode + 1,
                    groups.len()
                ),
            })
    }

    pub fn num_mode_groups(&self, mode: usize) -> usize {
        self.num_mode_groups[mode]
    }

    /// 0-based labels for every subject of one mode.
    pub fn mode_group_labels(&self, mode: usize) -> &[u32] {
        &self.mode_groups[mode]
    }

    pub fn time_groups(&self) -> &TimeGroups {
        &self.time_groups
    }

    pub fn time_group(&self, t: f64) -> usize {
        self.time_groups.group_of(t)
    }

    pub fn num_time_groups(&self) -> usize {
        self.time_groups.num_groups()
    }
}

/// Column layout and subgroup metadata for long-format CSV files.
///
/// `dims` and `mode_groups` are optional declarations used when some
/// subjects never appear in the file (cold-start subjects must still get
/// dimensions and subgroup labels). `mode_groups` labels are 1-based, as are
/// all indices in the file itself. `time_range` declares the raw time span
/// mapped onto `[0, 1]`; by default the observed min/max is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub modes: Vec<String>,
    pub time: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_groups: Option<Vec<Vec<u32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_groups: Option<TimeGroups>,
}

impl CsvSchema {
    fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config {
                msg: "schema needs at least one mode column".into(),
            });
        }
        if !self.groups.is_empty() && self.groups.len() != self.modes.len() {
            return Err(Error::Config {
                msg: format!(
                    "expected {} group columns (one per mode), got {}",
                    self.modes.len(),
                    self.groups.len()
                ),
            });
        }
        if let Some(dims) = &self.dims {
            if dims.len() != self.modes.len() || dims.iter().any(|&n| n == 0) {
                return Err(Error::Config {
                    msg: format!("declared dims {dims:?} do not match {} modes", self.modes.len()),
                });
            }
        }
        if let Some(maps) = &self.mode_groups {
            if maps.len() != self.modes.len() {
                return Err(Error::Config {
                    msg: "declared mode_groups must cover every mode".into(),
                });
            }
            if maps.iter().any(|m| m.iter().any(|&l| l == 0)) {
                return Err(Error::Config {
                    msg: "mode_groups labels are 1-based and must be positive".into(),
                });
            }
        }
        if let Some((lo, hi)) = self.time_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config {
                    msg: format!("time_range ({lo}, {hi}) must be finite with lo < hi"),
                });
            }
        }
        if let Some(tg) = &self.time_groups {
            tg.validate()?;
        }
        Ok(())
    }
}

/// Result of CSV ingestion: the tensor on rescaled time, the subgroup
/// scheme, and the raw time span that was mapped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestResult {
    pub tensor: TemporalTensor,
    pub scheme: SubgroupScheme,
    pub time_range: (f64, f64),
    pub rows: usize,
}

struct RawRow {
    line: u64,
    indices: Vec<u32>,
    groups: Vec<Option<u32>>,
    time: f64,
    value: f64,
}

/// Reads a long-format CSV file per the schema.
pub fn ingest_long_csv(path: &Path, schema: &CsvSchema) -> Result<IngestResult> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_long_reader(file, schema, &path.display().to_string())
}

/// As [`ingest_long_csv`] over any reader; `origin` names the source in
/// error messages.
pub fn ingest_long_reader<R: io::Read>(
    reader: R,
    schema: &CsvSchema,
    origin: &str,
) -> Result<IngestResult> {
    schema.validate()?;
    let parse = |line: u64, msg: String| Error::Parse {
        path: origin.to_string(),
        line: line as usize,
        msg,
    };

    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse(1, format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse(1, format!("missing column '{name}'")))
    };
    let mode_cols: Vec<usize> = schema.modes.iter().map(|m| col(m)).collect::<Result<_>>()?;
    let time_col = col(&schema.time)?;
    let value_col = col(&schema.value)?;
    let group_cols: Vec<usize> = schema.groups.iter().map(|g| col(g)).collect::<Result<_>>()?;

    let d = schema.modes.len();
    let mut rows: Vec<RawRow> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse(line, format!("malformed record: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let mut indices = Vec::with_capacity(d);
        for (k, &c) in mode_cols.iter().enumerate() {
            let raw = field(c);
            let idx: u32 = raw.parse().map_err(|_| {
                parse(line, format!("column '{}': invalid index '{raw}'", schema.modes[k]))
            })?;
            if idx == 0 {
                return Err(parse(
                    line,
                    format!("column '{}': indices are 1-based, got 0", schema.modes[k]),
                ));
            }
            indices.push(idx);
        }
        let mut groups = Vec::with_capacity(group_cols.len());
        for (k, &c) in group_cols.iter().enumerate() {
            let raw = field(c);
            if raw.is_empty() {
                groups.push(None);
                continue;
            }
            let label: u32 = raw.parse().map_err(|_| {
                parse(line, format!("column '{}': invalid subgroup '{raw}'", schema.groups[k]))
            })?;
            if label == 0 {
                return Err(parse(
                    line,
                    format!("column '{}': subgroup labels are 1-based, got 0", schema.groups[k]),
                ));
            }
            groups.push(Some(label));
        }
        let time: f64 = field(time_col)
            .parse()
            .map_err(|_| parse(line, format!("invalid time '{}'", field(time_col))))?;
        let value: f64 = field(value_col)
            .parse()
            .map_err(|_| parse(line, format!("invalid value '{}'", field(value_col))))?;
        if !time.is_finite() {
            return Err(parse(line, format!("non-finite time {time}")));
        }
        if !value.is_finite() {
            return Err(parse(line, format!("non-finite value {value}")));
        }
        rows.push(RawRow {
            line,
            indices,
            groups,
            time,
            value,
        });
    }
    if rows.is_empty() {
        return Err(parse(0, "no data rows".into()));
    }

    // Dimensions: observed maxima, possibly extended by declaration.
    let mut dims = vec![0u32; d];
    for row in &rows {
        for (k, &i) in row.indices.iter().enumerate() {
            dims[k] = dims[k].max(i);
        }
    }
    if let Some(declared) = &schema.dims {
        for k in 0..d {
            if dims[k] > declared[k] {
                return Err(Error::IndexRange {
                    what: format!("mode {} subject", k + 1),
                    got: dims[k] as usize,
                    max: declared[k] as usize,
                });
            }
            dims[k] = declared[k];
        }
    }

    // Raw time span mapped onto [0, 1].
    let (lo, hi) = schema.time_range.unwrap_or_else(|| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in &rows {
            lo = lo.min(row.time);
            hi = hi.max(row.time);
        }
        (lo, hi)
    });
    if !(lo < hi) {
        return Err(Error::Config {
            msg: format!("degenerate time range ({lo}, {hi}); declare time_range in the schema"),
        });
    }

    // Subgroup labels: declared map, overridden consistently by group columns.
    let mut labels: Vec<Vec<Option<u32>>> = dims
        .iter()
        .map(|&n| vec![None; n as usize])
        .collect();
    if let Some(maps) = &schema.mode_groups {
        for k in 0..d {
            if maps[k].len() != dims[k] as usize {
                return Err(Error::Shape {
                    msg: format!(
                        "mode_groups[{}] has {} labels for dimension {}",
                        k + 1,
                        maps[k].len(),
                        dims[k]
                    ),
                });
            }
            for (s, &l) in maps[k].iter().enumerate() {
                labels[k][s] = Some(l);
            }
        }
    }
    for row in &rows {
        for (k, g) in row.groups.iter().enumerate() {
            let Some(label) = g else { continue };
            let slot = &mut labels[k][row.indices[k] as usize - 1];
            match slot {
                None => *slot = Some(*label),
                Some(existing) if existing != label => {
                    return Err(parse(
                        row.line,
                        format!(
                            "conflicting subgroup for mode {} subject {}: {} vs {}",
                            k + 1,
                            row.indices[k],
                            existing,
                            label
                        ),
                    ));
                }
                Some(_) => {}
            }
        }
    }
    let mode_groups: Vec<Vec<u32>> = labels
        .into_iter()
        .map(|g| g.into_iter().map(|l| l.unwrap_or(1) - 1).collect())
        .collect();

    let time_groups = schema.time_groups.clone().unwrap_or(TimeGroups::Single);
    let scheme = SubgroupScheme::new(mode_groups, time_groups)?;

    let mut tensor = TemporalTensor::new(dims)?;
    let span = hi - lo;
    for row in &rows {
        let t = (row.time - lo) / span;
        if !(0.0..=1.0).contains(&t) {
            return Err(parse(
                row.line,
                format!("time {} outside declared range [{lo}, {hi}]", row.time),
            ));
        }
        let cell: Vec<u32> = row.indices.iter().map(|&i| i - 1).collect();
        tensor.insert(&cell, t, row.value)?;
    }

    Ok(IngestResult {
        rows: rows.len(),
        tensor,
        scheme,
        time_range: (lo, hi),
    })
}

/// Writes a tensor back to long CSV. Indices and subgroup labels are
/// emitted 1-based; times are mapped from `[0, 1]` back to the raw range.
pub fn export_long_csv<W: io::Write>(
    tensor: &TemporalTensor,
    scheme: &SubgroupScheme,
    schema: &CsvSchema,
    time_range: (f64, f64),
    writer: W,
) -> Result<()> {
    schema.validate()?;
    let io_err = |e: csv::Error| Error::Io {
        path: "<csv writer>".into(),
        source: std::io::Error::other(e),
    };
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = schema.modes.iter().map(String::as_str).collect();
    header.extend(schema.groups.iter().map(String::as_str));
    header.push(&schema.time);
    header.push(&schema.value);
    wtr.write_record(&header).map_err(io_err)?;

    let (lo, hi) = time_range;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for (cell, t, y) in tensor.iter_observations() {
        record.clear();
        record.extend(cell.iter().map(|&i| (i + 1).to_string()));
        if !schema.groups.is_empty() {
            for (k, &i) in cell.iter().enumerate() {
                let g = scheme.mode_group(k, i)?;
                record.push((g + 1).to_string());
            }
        }
        record.push((lo + t * (hi - lo)).to_string());
        record.push(y.to_string());
        wtr.write_record(&record).map_err(io_err)?;
    }
    wtr.flush().map_err(|e| Error::Io {
        path: "<csv writer>".into(),
        source: e,
    })?;
    Ok(())
}

//! Sampled generator-speed time series and its on-disk format.
//!
//! A series is stored as a delimited text file with header
//! `time,g<ID>,g<ID>,...` and one row per reporting tick, plus a TOML
//! sidecar (`<stem>.meta.toml`) carrying the reporting rate, meter set,
//! seed and units.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Free-form description of where a record came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: Vec<String>,
}

/// `T × c` matrix of generator speeds, one column per metered generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesRecord {
    values: DMatrix<f64>,
    reporting_rate: f64,
    start_time: f64,
    meter_set: Vec<usize>,
    column_ids: Vec<String>,
    pub metadata: RecordMetadata,
}

impl TimeSeriesRecord {
    /// `meter_set[c]` is the generator index of column `c`; `column_ids[c]`
    /// its label.
    pub fn new(
        values: DMatrix<f64>,
        reporting_rate: f64,
        start_time: f64,
        meter_set: Vec<usize>,
        column_ids: Vec<String>,
        metadata: RecordMetadata,
    ) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::invalid(format!(
                "a record needs at least 2 ticks, got {}",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::invalid("a record needs at least one column"));
        }
        if meter_set.len() != values.ncols() || column_ids.len() != values.ncols() {
            return Err(Error::invalid(
                "meter set and column ids must have one entry per column",
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (t, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::invalid(format!(
                "non-finite value at tick {t}, column {c}"
            )));
        }
        if !(reporting_rate.is_finite() && reporting_rate > 0.0) {
            return Err(Error::invalid("reporting rate must be positive"));
        }
        let mut seen = HashSet::new();
        if let Some(d) = meter_set.iter().find(|m| !seen.insert(**m)) {
            return Err(Error::invalid(format!("generator {d} appears twice in the meter set")));
        }
        Ok(TimeSeriesRecord {
            values,
            reporting_rate,
            start_time,
            meter_set,
            column_ids,
            metadata,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Number of ticks `T`.
    pub fn ticks(&self) -> usize {
        self.values.nrows()
    }

    pub fn reporting_rate(&self) -> f64 {
        self.reporting_rate
    }

    /// Seconds between ticks.
    pub fn tick_interval(&self) -> f64 {
        1.0 / self.reporting_rate
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    /// Time stamp of tick `k`.
    pub fn time(&self, k: usize) -> f64 {
        self.start_time + k as f64 / self.reporting_rate
    }

    /// Generator index of every column.
    pub fn meter_set(&self) -> &[usize] {
        &self.meter_set
    }

    pub fn column_ids(&self) -> &[String] {
        &self.column_ids
    }

    /// Column position of generator `g`, if metered.
    pub fn column_of(&self, generator: usize) -> Option<usize> {
        self.meter_set.iter().position(|&m| m == generator)
    }

    /// Copy with replaced values (same shape).
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(Error::invalid("replacement values change the record shape"));
        }
        Self::new(
            values,
            self.reporting_rate,
            self.start_time,
            self.meter_set.clone(),
            self.column_ids.clone(),
            self.metadata.clone(),
        )
    }

    /// Ticks `start..start + len` as a new record.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.ticks() {
            return Err(Error::invalid(format!(
                "window {start}..{} exceeds the record's {} ticks",
                start + len,
                self.ticks()
            )));
        }
        Self::new(
            self.values.rows(start, len).into_owned(),
            self.reporting_rate,
            self.time(start),
            self.meter_set.clone(),
            self.column_ids.clone(),
            self.metadata.clone(),
        )
    }

    /// Keeps the columns of the given generators, in the given order:
    /// `z(t) = S_M ω(t)`.
    pub fn restrict_to_meters(&self, meters: &[usize]) -> Result<Self> {
        if meters.is_empty() {
            return Err(Error::invalid("cannot restrict a record to an empty meter set"));
        }
        let cols = meters
            .iter()
            .map(|&g| {
                self.column_of(g).ok_or_else(|| {
                    Error::invalid(format!("generator {g} is not a column of this record"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            self.values.select_columns(&cols),
            self.reporting_rate,
            self.start_time,
            meters.to_vec(),
            cols.iter().map(|&c| self.column_ids[c].clone()).collect(),
            self.metadata.clone(),
        )
    }

    /// Drops the columns of the given generators.
    pub fn drop_meters(&self, dropped: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = self
            .meter_set
            .iter()
            .copied()
            .filter(|g| !dropped.contains(g))
            .collect();
        if keep.is_empty() {
            return Err(Error::invalid("every meter was dropped"));
        }
        self.restrict_to_meters(&keep)
    }

    /// Writes `path` (delimited text) and its metadata sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header: Vec<String> = self.column_ids.iter().map(|id| format!("g{id}")).collect();
        write_columns(path, "time", &header, self.start_time, self.reporting_rate, &self.values)?;
        let meta = SeriesMeta {
            reporting_rate: self.reporting_rate,
            start_time: self.start_time,
            meter_set: self.meter_set.clone(),
            generator_ids: self.column_ids.clone(),
            units: self.metadata.units.clone(),
            seed: self.metadata.seed,
            provenance: self.metadata.provenance.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::config(e.to_string()))?;
        let side = sidecar_path(path);
        std::fs::write(&side, text).map_err(|e| Error::io(side, e))
    }

    /// Reads a series written by [`TimeSeriesRecord::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let meta_text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: SeriesMeta = toml::from_str(&meta_text)
            .map_err(|e| Error::config(format!("{}: {e}", side.display())))?;
        let (header, rows) = read_columns(path)?;
        if header.len() != meta.generator_ids.len() + 1 {
            return Err(Error::config(format!(
                "{}: {} data columns but {} generator ids in the sidecar",
                path.display(),
                header.len().saturating_sub(1),
                meta.generator_ids.len()
            )));
        }
        for (h, id) in header.iter().skip(1).zip(&meta.generator_ids) {
            if *h != format!("g{id}") {
                return Err(Error::config(format!(
                    "{}: column `{h}` does not match generator id `{id}`",
                    path.display()
                )));
            }
        }
        let ncols = meta.generator_ids.len();
        let values = DMatrix::from_fn(rows.len(), ncols, |t, c| rows[t][c + 1]);
        Self::new(
            values,
            meta.reporting_rate,
            meta.start_time,
            meta.meter_set,
            meta.generator_ids,
            RecordMetadata {
                units: meta.units,
                seed: meta.seed,
                provenance: meta.provenance,
            },
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesMeta {
    reporting_rate: f64,
    start_time: f64,
    meter_set: Vec<usize>,
    generator_ids: Vec<String>,
    units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default)]
    provenance: Vec<String>,
}

/// `series.csv` → `series.meta.toml`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.toml"))
}

/// Writes a leading time column followed by the given columns.
pub(crate) fn write_columns(
    path: &Path,
    time_header: &str,
    header: &[String],
    start_time: f64,
    rate: f64,
    values: &DMatrix<f64>,
) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut head = vec![time_header.to_string()];
    head.extend(header.iter().cloned());
    w.write_record(&head).map_err(csv_err)?;
    let mut row = Vec::with_capacity(header.len() + 1);
    for t in 0..values.nrows() {
        row.clear();
        row.push((start_time + t as f64 / rate).to_string());
        row.extend((0..values.ncols()).map(|c| values[(t, c)].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::config(format!(
                        "{}: row {}: `{s}` is not a number",
                        path.display(),
                        line + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(Error::config(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                line + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cols: usize) -> TimeSeriesRecord {
        let values = DMatrix::from_fn(4, cols, |t, c| (t * 10 + c) as f64 + 0.125);
        TimeSeriesRecord::new(
            values,
            30.0,
            0.0,
            (0..cols).collect(),
            (1..=cols).map(|i| i.to_string()).collect(),
            RecordMetadata::default(),
        )
        .unwrap()
    }

    #[test]
    fn restrict_identity_and_projection() {
        let r = rec(5);
        assert_eq!(r.restrict_to_meters(&[0, 1, 2, 3, 4]).unwrap(), r);
        let one = r.restrict_to_meters(&[3]).unwrap();
        assert_eq!(one.values().ncols(), 1);
        assert_eq!(one.values().column(0), r.values().column(3));
        assert_eq!(one.meter_set(), &[3]);
    }

    #[test]
    fn restrict_composes() {
        let r = rec(5);
        let twice = r.restrict_to_meters(&[1, 4]).unwrap().restrict_to_meters(&[1]).unwrap();
        assert_eq!(twice, r.restrict_to_meters(&[1]).unwrap());
    }

    #[test]
    fn restrict_errors() {
        let r = rec(3);
        assert!(r.restrict_to_meters(&[]).is_err());
        assert!(r.restrict_to_meters(&[7]).is_err());
    }

    #[test]
    fn rejects_nan_and_short() {
        let mut v = DMatrix::zeros(3, 1);
        v[(1, 0)] = f64::NAN;
        let err = TimeSeriesRecord::new(v, 1.0, 0.0, vec![0], vec!["1".into()], Default::default());
        assert!(err.is_err());
        let short = TimeSeriesRecord::new(
            DMatrix::zeros(1, 1),
            1.0,
            0.0,
            vec![0],
            vec!["1".into()],
            Default::default(),
        );
        assert!(short.is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let mut r = rec(3);
        r.metadata.seed = Some(9);
        r.metadata.units = "p.u.".into();
        r.save(&p).unwrap();
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("time,g1,g2,g3\n"));
        assert!(dir.path().join("s.meta.toml").exists());
        assert_eq!(TimeSeriesRecord::load(&p).unwrap(), r);
    }
}

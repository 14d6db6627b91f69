//! The dataset tensor and long-form CSV ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io;
use std::path::Path;

use chrono::NaiveDate;

use crate::data::schema;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Daily values `[T, F, C]` with their date, feature and city labels.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherCube {
    values: Tensor,
    dates: Vec<NaiveDate>,
    features: Vec<String>,
    cities: Vec<String>,
}

impl WeatherCube {
    pub fn new(values: Tensor, dates: Vec<NaiveDate>, features: Vec<String>, cities: Vec<String>) -> Result<Self> {
        let want = [dates.len(), features.len(), cities.len()];
        if values.shape() != want {
            return Err(Error::dim(format!(
                "cube values {:?} do not match {} dates × {} features × {} cities",
                values.shape(),
                want[0],
                want[1],
                want[2]
            )));
        }
        for w in dates.windows(2) {
            if w[0].succ_opt() != Some(w[1]) {
                return Err(Error::Ingestion(format!(
                    "dates must be consecutive days: {} is followed by {}",
                    w[0], w[1]
                )));
            }
        }
        for (kind, names) in [("feature", &features), ("city", &cities)] {
            let unique: BTreeSet<_> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::config(format!("duplicate {kind} name in {names:?}")));
            }
        }
        if !values.is_finite() {
            return Err(Error::Numerical("cube contains non-finite values".into()));
        }
        Ok(WeatherCube {
            values,
            dates,
            features,
            cities,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn cities(&self) -> &[String] {
        &self.cities
    }

    pub fn days(&self) -> usize {
        self.dates.len()
    }

    pub fn get(&self, day: usize, feature: usize, city: usize) -> f64 {
        self.values.get(&[day, feature, city])
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::config(format!("unknown feature `{name}`; known: {}", self.features.join(", "))))
    }

    pub fn city_index(&self, name: &str) -> Result<usize> {
        self.cities
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::config(format!("unknown city `{name}`; known: {}", self.cities.join(", "))))
    }

    pub fn city_indices<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.city_index(n.as_ref())).collect()
    }

    /// Values of one `(feature, city)` column over all days.
    pub fn column(&self, feature: usize, city: usize) -> Vec<f64> {
        (0..self.days()).map(|t| self.get(t, feature, city)).collect()
    }

    /// Same labels, new values of identical shape.
    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        Self::new(values, self.dates.clone(), self.features.clone(), self.cities.clone())
    }

    /// Days `start .. start + len`.
    pub fn slice_days(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.days() {
            return Err(Error::config(format!(
                "day range {start}..{} outside 0..{}",
                start + len,
                self.days()
            )));
        }
        let plane = self.features.len() * self.cities.len();
        let data = self.values.data()[start * plane..(start + len) * plane].to_vec();
        Self::new(
            Tensor::new(&[len, self.features.len(), self.cities.len()], data)?,
            self.dates[start..start + len].to_vec(),
            self.features.clone(),
            self.cities.clone(),
        )
    }

    /// Long-form CSV: one row per (date, city), categorical codes written
    /// back as their symbols. Re-reading it reproduces the cube bitwise.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string(), "city".to_string()];
        header.extend(self.features.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        let vocabs: Vec<_> = self.features.iter().map(|f| schema::vocabulary(f)).collect();
        for (t, date) in self.dates.iter().enumerate() {
            for (c, city) in self.cities.iter().enumerate() {
                let mut row = vec![date.format(DATE_FORMAT).to_string(), city.clone()];
                for (f, vocab) in vocabs.iter().enumerate() {
                    let v = self.get(t, f, c);
                    row.push(match vocab {
                        Some(voc) => voc
                            .symbol(v as usize)
                            .filter(|_| v >= 0.0 && v.fract() == 0.0)
                            .ok_or_else(|| {
                                Error::Ingestion(format!("{} code {v} has no symbol", voc.feature))
                            })?
                            .to_string(),
                        None => format!("{v}"),
                    });
                }
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Ingestion(format!("{other:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillKind {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Imputation {
    pub date: NaiveDate,
    pub city: String,
    pub feature: String,
    pub kind: FillKind,
}

/// What ingestion did besides copying values.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows_read: usize,
    /// Rows for cities outside the requested list.
    pub rows_skipped: usize,
    pub imputations: Vec<Imputation>,
    /// Per categorical feature, how often each symbol occurred.
    pub vocabulary_hits: BTreeMap<String, BTreeMap<String, usize>>,
}

impl IngestReport {
    pub fn forward_fills(&self) -> usize {
        self.imputations.iter().filter(|i| i.kind == FillKind::Forward).count()
    }

    pub fn backward_fills(&self) -> usize {
        self.imputations.iter().filter(|i| i.kind == FillKind::Backward).count()
    }
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows read: {}", self.rows_read)?;
        writeln!(f, "rows skipped: {}", self.rows_skipped)?;
        writeln!(
            f,
            "imputations: {} ({} forward-fill, {} backward-fill)",
            self.imputations.len(),
            self.forward_fills(),
            self.backward_fills()
        )?;
        for i in &self.imputations {
            let kind = match i.kind {
                FillKind::Forward => "forward-fill",
                FillKind::Backward => "backward-fill",
            };
            writeln!(f, "  {} {} {}: {kind}", i.date.format(DATE_FORMAT), i.city, i.feature)?;
        }
        for (feature, hits) in &self.vocabulary_hits {
            let total: usize = hits.values().sum();
            writeln!(f, "vocabulary {feature}: {total} hits, {} distinct symbols", hits.len())?;
            for (sym, n) in hits {
                writeln!(f, "  {sym}: {n}")?;
            }
        }
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "N/A" | "-")
}

/// Reads the long-form CSV `date,city,<features…>`.
///
/// `cities` fixes the city axis (rows for other cities are skipped);
/// without it the sorted distinct cities of the file are used. `features`
/// selects and orders feature columns; without it the header order is kept.
pub fn read_dataset<R: io::Read>(
    reader: R,
    cities: Option<&[String]>,
    features: Option<&[String]>,
) -> Result<(WeatherCube, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < 3 || header[0] != "date" || header[1] != "city" {
        return Err(Error::Ingestion(
            "line 1: header must start with `date,city` followed by feature columns".into(),
        ));
    }
    let features: Vec<String> = match features {
        Some(f) => f.to_vec(),
        None => header[2..].to_vec(),
    };
    let columns: Vec<usize> = features
        .iter()
        .map(|f| {
            header
                .iter()
                .position(|h| h == f)
                .filter(|&i| i >= 2)
                .ok_or_else(|| Error::Ingestion(format!("line 1: missing feature column `{f}`")))
        })
        .collect::<Result<_>>()?;
    let vocabs: Vec<_> = features.iter().map(|f| schema::vocabulary(f)).collect();

    let mut report = IngestReport::default();
    let mut rows: BTreeMap<NaiveDate, BTreeMap<String, (u64, Vec<Option<f64>>)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        report.rows_read += 1;
        let date_text = record.get(0).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(date_text, DATE_FORMAT)
            .map_err(|_| Error::Ingestion(format!("line {line}: invalid date `{date_text}`")))?;
        let city = record.get(1).unwrap_or("").trim().to_string();
        if city.is_empty() {
            return Err(Error::Ingestion(format!("line {line}: empty city")));
        }
        if cities.is_some_and(|cs| !cs.contains(&city)) {
            report.rows_skipped += 1;
            continue;
        }
        let mut cells = Vec::with_capacity(features.len());
        for ((name, &col), vocab) in features.iter().zip(&columns).zip(&vocabs) {
            let raw = record.get(col).unwrap_or("");
            if is_missing(raw) {
                cells.push(None);
                continue;
            }
            let value = match vocab {
                Some(voc) => {
                    let code = voc.index(raw).ok_or_else(|| {
                        Error::Ingestion(format!(
                            "line {line}, column `{name}`: unknown symbol `{}`",
                            raw.trim()
                        ))
                    })?;
                    *report
                        .vocabulary_hits
                        .entry(name.clone())
                        .or_default()
                        .entry(raw.trim().to_string())
                        .or_default() += 1;
                    code as f64
                }
                None => raw
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::Ingestion(format!("line {line}, column `{name}`: not a number `{}`", raw.trim()))
                    })?,
            };
            cells.push(Some(value));
        }
        if let Some((prev, _)) = rows.entry(date).or_default().insert(city.clone(), (line, cells)) {
            return Err(Error::Ingestion(format!(
                "line {line}: duplicate row for {date_text} / {city} (first seen on line {prev})"
            )));
        }
    }

    let (first, last) = match (rows.keys().next(), rows.keys().next_back()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::Ingestion("no data rows".into())),
    };
    let dates: Vec<NaiveDate> = first.iter_days().take_while(|d| *d <= last).collect();
    let gaps: Vec<String> = dates
        .iter()
        .filter(|d| !rows.contains_key(d))
        .map(|d| d.format(DATE_FORMAT).to_string())
        .collect();
    if !gaps.is_empty() {
        const SHOWN: usize = 20;
        let mut list = gaps.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
        if gaps.len() > SHOWN {
            list.push_str(&format!(" and {} more", gaps.len() - SHOWN));
        }
        return Err(Error::Ingestion(format!("{} missing date(s): {list}", gaps.len())));
    }

    let cities: Vec<String> = match cities {
        Some(cs) => cs.to_vec(),
        None => rows
            .values()
            .flat_map(|m| m.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    for city in &cities {
        if !rows.values().any(|m| m.contains_key(city)) {
            return Err(Error::Ingestion(format!("no rows for city `{city}`")));
        }
    }

    let (t_len, f_len, c_len) = (dates.len(), features.len(), cities.len());
    let mut cells: Vec<Option<f64>> = vec![None; t_len * f_len * c_len];
    for (t, date) in dates.iter().enumerate() {
        let day = &rows[date];
        for (c, city) in cities.iter().enumerate() {
            if let Some((_, row)) = day.get(city) {
                for (f, v) in row.iter().enumerate() {
                    cells[(t * f_len + f) * c_len + c] = *v;
                }
            }
        }
    }

    // Forward-fill, then back-fill the leading gap, per (feature, city).
    let idx = |t: usize, f: usize, c: usize| (t * f_len + f) * c_len + c;
    for f in 0..f_len {
        for c in 0..c_len {
            let mut last = None;
            for t in 0..t_len {
                match cells[idx(t, f, c)] {
                    Some(v) => last = Some(v),
                    None => {
                        if let Some(v) = last {
                            cells[idx(t, f, c)] = Some(v);
                            report.imputations.push(Imputation {
                                date: dates[t],
                                city: cities[c].clone(),
                                feature: features[f].clone(),
                                kind: FillKind::Forward,
                            });
                        }
                    }
                }
            }
            let first_known = (0..t_len).find_map(|t| cells[idx(t, f, c)]).ok_or_else(|| {
                Error::Ingestion(format!("column {} / {} has no values at all", features[f], cities[c]))
            })?;
            for t in 0..t_len {
                if cells[idx(t, f, c)].is_some() {
                    break;
                }
                cells[idx(t, f, c)] = Some(first_known);
                report.imputations.push(Imputation {
                    date: dates[t],
                    city: cities[c].clone(),
                    feature: features[f].clone(),
                    kind: FillKind::Backward,
                });
            }
        }
    }
    report
        .imputations
        .sort_by(|a, b| (a.date, &a.city, &a.feature).cmp(&(b.date, &b.city, &b.feature)));

    let data: Vec<f64> = cells.into_iter().map(|v| v.unwrap_or_default()).collect();
    let values = Tensor::new(&[t_len, f_len, c_len], data)?;
    Ok((WeatherCube::new(values, dates, features, cities)?, report))
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    cities: Option<&[String]>,
    features: Option<&[String]>,
) -> Result<(WeatherCube, IngestReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    read_dataset(io::BufReader::new(file), cities, features)
}

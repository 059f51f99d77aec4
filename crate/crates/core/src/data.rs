//! County-month panels: CSV ingestion, validation and derived covariates.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing mandatory column(s): {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("duplicate observation for unit {unit} month {month}")]
    DuplicateKey { unit: String, month: String },
    #[error("{bad} of {total} rows could not be used (limit 1%); first problems: {}", .examples.join("; "))]
    TooManyBadRows {
        bad: usize,
        total: usize,
        examples: Vec<String>,
    },
    #[error("cross-sectional column `{column}` varies within unit {unit}")]
    NotConstant { unit: String, column: String },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("empty panel")]
    Empty,
}

/// Month 0 is March 2020.
pub const BASE_YEAR: i32 = 2020;
pub const BASE_MONTH: i32 = 3;

/// Mandatory columns of the panel CSV.
pub const MANDATORY_COLUMNS: [&str; 6] = ["fips", "month", "deaths", "popsize", "latitude", "longitude"];

/// Optional columns of the canonical header, in canonical order.
pub const CANONICAL_OPTIONAL: [&str; 10] = [
    "median_age",
    "median_income",
    "prop_poverty",
    "area_sqmi",
    "white_hi_inc_hh",
    "poc_lo_inc_hh",
    "total_hh",
    "rep_votes",
    "dem_votes",
    "total_votes",
];

/// Cross-sectional measures that must not vary within a unit.
pub const CROSS_SECTIONAL: [&str; 10] = CANONICAL_OPTIONAL;

/// Columns computed at load time; never written back out.
pub const DERIVED_COLUMNS: [&str; 4] = ["ICEraceinc", "political_lean", "log10_density", "offset"];

/// Names under which the month index is exposed to formulas.
pub const TIME_ALIASES: [&str; 3] = ["month", "time", "date"];

/// Index of Concentration at the Extremes: `(privileged − deprived) / total`.
pub fn ice(privileged: f64, deprived: f64, total: f64) -> Result<f64, DataError> {
    if !(total > 0.0) || !total.is_finite() {
        return Err(DataError::Invalid(format!("ICE total must be positive, got {total}")));
    }
    if !(privileged >= 0.0 && deprived >= 0.0) {
        return Err(DataError::Invalid("ICE counts must be non-negative".into()));
    }
    if privileged + deprived > total {
        return Err(DataError::Invalid(format!(
            "ICE counts {privileged} + {deprived} exceed total {total}"
        )));
    }
    Ok((privileged - deprived) / total)
}

/// `(rep − dem) / total`: 1 is all-Republican, −1 all-Democratic.
pub fn political_lean(rep_votes: f64, dem_votes: f64, total_votes: f64) -> Result<f64, DataError> {
    if !(total_votes > 0.0) || !total_votes.is_finite() {
        return Err(DataError::Invalid(format!(
            "total votes must be positive, got {total_votes}"
        )));
    }
    if !(rep_votes >= 0.0 && dem_votes >= 0.0) || rep_votes + dem_votes > total_votes {
        return Err(DataError::Invalid(format!(
            "votes {rep_votes} + {dem_votes} inconsistent with total {total_votes}"
        )));
    }
    Ok((rep_votes - dem_votes) / total_votes)
}

/// `log(popsize / 1e5 / 12)`: one month of exposure in units of 100,000 person-years.
pub fn person_years_offset(popsize: u64) -> Result<f64, DataError> {
    if popsize == 0 {
        return Err(DataError::Invalid("popsize must be positive".into()));
    }
    Ok((popsize as f64 / 1e5 / 12.0).ln())
}

/// Crude monthly rate per 100,000 person-years.
pub fn crude_rate(deaths: u64, popsize: u64) -> f64 {
    deaths as f64 / (popsize as f64 / 1e5 / 12.0)
}

pub fn parse_month(text: &str) -> Result<i32, DataError> {
    let bad = || DataError::Invalid(format!("month `{text}` is not YYYY-MM"));
    let (y, m) = text.trim().split_once('-').ok_or_else(bad)?;
    if y.len() != 4 || m.len() != 2 {
        return Err(bad());
    }
    let y: i32 = y.parse().map_err(|_| bad())?;
    let m: i32 = m.parse().map_err(|_| bad())?;
    if !(1..=12).contains(&m) {
        return Err(bad());
    }
    Ok((y - BASE_YEAR) * 12 + (m - BASE_MONTH))
}

pub fn format_month(index: i32) -> String {
    let total = BASE_YEAR * 12 + (BASE_MONTH - 1) + index;
    format!("{:04}-{:02}", total.div_euclid(12), total.rem_euclid(12) + 1)
}

/// One unit-month observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub unit_id: String,
    pub month_index: i32,
    pub deaths: u64,
    pub popsize: u64,
    pub latitude: f64,
    pub longitude: f64,
    /// `None` marks an absent value.
    pub covariates: BTreeMap<String, Option<f64>>,
}

/// Long-format unit × month table, stored column-wise and sorted by `(unit, month)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    unit_ids: Vec<String>,
    months: Vec<i32>,
    deaths: Vec<u64>,
    popsize: Vec<u64>,
    latitude: Vec<f64>,
    longitude: Vec<f64>,
    covariates: BTreeMap<String, Vec<Option<f64>>>,
}

impl Panel {
    /// Validate and sort rows. Derived columns are not computed here.
    pub fn from_rows(mut rows: Vec<PanelRow>) -> Result<Panel, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        rows.sort_by(|a, b| (&a.unit_id, a.month_index).cmp(&(&b.unit_id, b.month_index)));
        for w in rows.windows(2) {
            if w[0].unit_id == w[1].unit_id && w[0].month_index == w[1].month_index {
                return Err(DataError::DuplicateKey {
                    unit: w[0].unit_id.clone(),
                    month: format_month(w[0].month_index),
                });
            }
        }
        let names: BTreeSet<String> = rows
            .iter()
            .flat_map(|r| r.covariates.keys().cloned())
            .collect();
        let mut panel = Panel {
            unit_ids: Vec::with_capacity(rows.len()),
            months: Vec::with_capacity(rows.len()),
            deaths: Vec::with_capacity(rows.len()),
            popsize: Vec::with_capacity(rows.len()),
            latitude: Vec::with_capacity(rows.len()),
            longitude: Vec::with_capacity(rows.len()),
            covariates: names.iter().map(|n| (n.clone(), Vec::with_capacity(rows.len()))).collect(),
        };
        for row in rows {
            check_row(&row)?;
            for (name, col) in panel.covariates.iter_mut() {
                col.push(row.covariates.get(name).copied().flatten());
            }
            panel.unit_ids.push(row.unit_id);
            panel.months.push(row.month_index);
            panel.deaths.push(row.deaths);
            panel.popsize.push(row.popsize);
            panel.latitude.push(row.latitude);
            panel.longitude.push(row.longitude);
        }
        panel.check_cross_sectional()?;
        Ok(panel)
    }

    fn check_cross_sectional(&self) -> Result<(), DataError> {
        for name in CROSS_SECTIONAL {
            let Some(col) = self.covariates.get(name) else { continue };
            let mut first: HashMap<&str, f64> = HashMap::new();
            for (unit, v) in self.unit_ids.iter().zip(col) {
                let Some(v) = v else { continue };
                match first.get(unit.as_str()) {
                    Some(&seen) if seen != *v => {
                        return Err(DataError::NotConstant {
                            unit: unit.clone(),
                            column: name.to_string(),
                        })
                    }
                    Some(_) => {}
                    None => {
                        first.insert(unit, *v);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn months(&self) -> &[i32] {
        &self.months
    }

    pub fn deaths(&self) -> &[u64] {
        &self.deaths
    }

    pub fn popsize(&self) -> &[u64] {
        &self.popsize
    }

    pub fn latitude(&self) -> &[f64] {
        &self.latitude
    }

    pub fn longitude(&self) -> &[f64] {
        &self.longitude
    }

    pub fn covariates(&self) -> &BTreeMap<String, Vec<Option<f64>>> {
        &self.covariates
    }

    pub fn row(&self, i: usize) -> PanelRow {
        PanelRow {
            unit_id: self.unit_ids[i].clone(),
            month_index: self.months[i],
            deaths: self.deaths[i],
            popsize: self.popsize[i],
            latitude: self.latitude[i],
            longitude: self.longitude[i],
            covariates: self
                .covariates
                .iter()
                .map(|(k, v)| (k.clone(), v[i]))
                .collect(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = PanelRow> + '_ {
        (0..self.len()).map(|i| self.row(i))
    }

    /// Distinct unit ids in sorted order.
    pub fn units(&self) -> Vec<String> {
        let mut u = self.unit_ids.clone();
        u.dedup();
        u
    }

    /// Numeric view of a column. The month index is available as `month`,
    /// `time` and `date`; a covariate of the same name takes precedence.
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        if let Some(c) = self.covariates.get(name) {
            return Some(c.clone());
        }
        let wrap = |v: Vec<f64>| Some(v.into_iter().map(Some).collect());
        match name {
            n if TIME_ALIASES.contains(&n) => wrap(self.months.iter().map(|&m| m as f64).collect()),
            "deaths" => wrap(self.deaths.iter().map(|&d| d as f64).collect()),
            "popsize" => wrap(self.popsize.iter().map(|&p| p as f64).collect()),
            "latitude" => wrap(self.latitude.clone()),
            "longitude" => wrap(self.longitude.clone()),
            _ => None,
        }
    }

    /// Keep only units listed in `roster`.
    pub fn retain_units(&self, roster: &BTreeSet<String>) -> Result<Panel, DataError> {
        let rows: Vec<PanelRow> = self.rows().filter(|r| roster.contains(&r.unit_id)).collect();
        Panel::from_rows(rows)
    }

    /// Append ICEraceinc, political_lean, log10_density and offset where their
    /// inputs are present. Rows with unusable inputs get an absent value.
    pub fn with_derived_columns(mut self) -> Panel {
        let n = self.len();
        let get = |p: &Panel, name: &str, i: usize| p.covariates.get(name).and_then(|c| c[i]);
        let mut ice_col = Vec::with_capacity(n);
        let mut lean_col = Vec::with_capacity(n);
        let mut density_col = Vec::with_capacity(n);
        let mut offset_col = Vec::with_capacity(n);
        for i in 0..n {
            ice_col.push(
                match (
                    get(&self, "white_hi_inc_hh", i),
                    get(&self, "poc_lo_inc_hh", i),
                    get(&self, "total_hh", i),
                ) {
                    (Some(a), Some(b), Some(t)) => ice(a, b, t).ok(),
                    _ => None,
                },
            );
            lean_col.push(
                match (
                    get(&self, "rep_votes", i),
                    get(&self, "dem_votes", i),
                    get(&self, "total_votes", i),
                ) {
                    (Some(r), Some(d), Some(t)) => political_lean(r, d, t).ok(),
                    _ => None,
                },
            );
            density_col.push(match get(&self, "area_sqmi", i) {
                Some(area) if area > 0.0 => Some((self.popsize[i] as f64 / area).log10()),
                _ => None,
            });
            offset_col.push(person_years_offset(self.popsize[i]).ok());
        }
        let has = |p: &Panel, cols: &[&str]| cols.iter().all(|c| p.covariates.contains_key(*c));
        if has(&self, &["white_hi_inc_hh", "poc_lo_inc_hh", "total_hh"]) {
            self.covariates.insert("ICEraceinc".into(), ice_col);
        }
        if has(&self, &["rep_votes", "dem_votes", "total_votes"]) {
            self.covariates.insert("political_lean".into(), lean_col);
        }
        if has(&self, &["area_sqmi"]) {
            self.covariates.insert("log10_density".into(), density_col);
        }
        self.covariates.insert("offset".into(), offset_col);
        self
    }
}

fn check_row(row: &PanelRow) -> Result<(), DataError> {
    if row.popsize == 0 {
        return Err(DataError::Invalid(format!(
            "unit {} month {}: popsize must be positive",
            row.unit_id,
            format_month(row.month_index)
        )));
    }
    if row.deaths > row.popsize {
        return Err(DataError::Invalid(format!(
            "unit {} month {}: deaths {} exceed popsize {}",
            row.unit_id,
            format_month(row.month_index),
            row.deaths,
            row.popsize
        )));
    }
    if !row.latitude.is_finite() || !row.longitude.is_finite() {
        return Err(DataError::Invalid(format!("unit {}: non-finite coordinates", row.unit_id)));
    }
    if row.unit_id.is_empty() {
        return Err(DataError::Invalid("empty unit id".into()));
    }
    Ok(())
}

/// Rows that were read but not kept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    /// `(line number, reason)`; line 1 is the header.
    pub dropped: Vec<(usize, String)>,
    /// Units removed by the roster filter.
    pub units_filtered: usize,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "read {} rows, kept {}, dropped {}, units filtered by roster {}",
            self.rows_read,
            self.rows_kept,
            self.dropped.len(),
            self.units_filtered
        )?;
        for (line, why) in &self.dropped {
            writeln!(f, "  line {line}: {why}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Keep only these units (e.g. the contiguous-US roster).
    pub roster: Option<BTreeSet<String>>,
}

pub fn load_panel(path: &Path, options: &LoadOptions) -> Result<(Panel, LoadReport), DataError> {
    let file = std::fs::File::open(path)?;
    load_panel_from_reader(file, options)
}

pub fn load_panel_from_reader<R: Read>(
    reader: R,
    options: &LoadOptions,
) -> Result<(Panel, LoadReport), DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let missing: Vec<String> = MANDATORY_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingColumns(missing));
    }
    let idx = |name: &str| headers.iter().position(|h| h == name).expect("checked above");
    let (i_fips, i_month, i_deaths, i_pop, i_lat, i_lon) = (
        idx("fips"),
        idx("month"),
        idx("deaths"),
        idx("popsize"),
        idx("latitude"),
        idx("longitude"),
    );
    let covariate_cols: Vec<(usize, &String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !MANDATORY_COLUMNS.contains(&h.as_str()) && !DERIVED_COLUMNS.contains(&h.as_str()))
        .collect();

    let mut report = LoadReport::default();
    let mut rows = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        report.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                report.dropped.push((line, e.to_string()));
                continue;
            }
        };
        match parse_record(&record, [i_fips, i_month, i_deaths, i_pop, i_lat, i_lon], &covariate_cols) {
            Ok(row) => {
                if let Err(e) = check_row(&row) {
                    report.dropped.push((line, e.to_string()));
                } else {
                    rows.push(row);
                }
            }
            Err(why) => report.dropped.push((line, why)),
        }
    }
    // more than 1% unusable rows is fatal
    if report.dropped.len() * 100 > report.rows_read {
        return Err(DataError::TooManyBadRows {
            bad: report.dropped.len(),
            total: report.rows_read,
            examples: report
                .dropped
                .iter()
                .take(5)
                .map(|(l, w)| format!("line {l}: {w}"))
                .collect(),
        });
    }
    if let Some(roster) = &options.roster {
        let before: BTreeSet<&String> = rows.iter().map(|r| &r.unit_id).collect();
        let before = before.len();
        rows.retain(|r| roster.contains(&r.unit_id));
        let after: BTreeSet<&String> = rows.iter().map(|r| &r.unit_id).collect();
        report.units_filtered = before - after.len();
    }
    report.rows_kept = rows.len();
    let panel = Panel::from_rows(rows)?.with_derived_columns();
    Ok((panel, report))
}

fn parse_record(
    record: &csv::StringRecord,
    [i_fips, i_month, i_deaths, i_pop, i_lat, i_lon]: [usize; 6],
    covariate_cols: &[(usize, &String)],
) -> Result<PanelRow, String> {
    let field = |i: usize| record.get(i).unwrap_or("");
    let num = |i: usize, name: &str| -> Result<f64, String> {
        field(i)
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("{name}: cannot parse `{}`", field(i)))
    };
    let count = |i: usize, name: &str| -> Result<u64, String> {
        field(i)
            .parse::<u64>()
            .map_err(|_| format!("{name}: `{}` is not a non-negative integer", field(i)))
    };
    let unit_id = field(i_fips).to_string();
    if unit_id.is_empty() {
        return Err("fips: empty".into());
    }
    let month_index = parse_month(field(i_month)).map_err(|e| e.to_string())?;
    let mut covariates = BTreeMap::new();
    for &(i, name) in covariate_cols {
        let raw = field(i);
        let v = if raw.is_empty() || raw == "NA" {
            None
        } else {
            Some(num(i, name)?)
        };
        covariates.insert(name.clone(), v);
    }
    Ok(PanelRow {
        unit_id,
        month_index,
        deaths: count(i_deaths, "deaths")?,
        popsize: count(i_pop, "popsize")?,
        latitude: num(i_lat, "latitude")?,
        longitude: num(i_lon, "longitude")?,
        covariates,
    })
}

/// Write the panel in the canonical CSV layout. Derived columns are omitted;
/// they are recomputed on load.
pub fn write_panel<W: Write>(panel: &Panel, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut extra: Vec<&String> = Vec::new();
    for name in CANONICAL_OPTIONAL {
        if let Some((k, _)) = panel.covariates.get_key_value(name) {
            extra.push(k);
        }
    }
    for k in panel.covariates.keys() {
        if !CANONICAL_OPTIONAL.contains(&k.as_str()) && !DERIVED_COLUMNS.contains(&k.as_str()) {
            extra.push(k);
        }
    }
    let mut header: Vec<&str> = MANDATORY_COLUMNS.to_vec();
    header.extend(extra.iter().map(|s| s.as_str()));
    wtr.write_record(&header)?;
    for i in 0..panel.len() {
        let mut rec: Vec<String> = vec![
            panel.unit_ids[i].clone(),
            format_month(panel.months[i]),
            panel.deaths[i].to_string(),
            panel.popsize[i].to_string(),
            panel.latitude[i].to_string(),
            panel.longitude[i].to_string(),
        ];
        for name in &extra {
            rec.push(match panel.covariates[*name][i] {
                Some(v) => v.to_string(),
                None => String::new(),
            });
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

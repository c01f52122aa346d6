//! Per-scene AOI counts, yearly averages per location and year-over-year change.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use chrono::{Datelike, NaiveDate};
use serde::Serialize;
use thiserror::Error;

use crate::detection::Detection;
use crate::geometry::{point_in_polygon, AoiPolygon};
use crate::ingestion::{parse_iso_date, Location};
use crate::Scalar;

pub const COUNTS_HEADER: &str = "scene_id,location_id,capture_date,aoi,count";
pub const TREND_HEADER: &str = "location_id,year_a,year_b,avg_count_a,avg_count_b,change_ratio";

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("no count records for location '{location_id}' in {year}")]
    NoData { location_id: String, year: i32 },
    #[error("no location has counts in both {0} and {1}")]
    NoOverlap(i32, i32),
    #[error("counts CSV row {row}: {message}")]
    Parse { row: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountRecord {
    pub scene_id: String,
    pub location_id: String,
    pub capture_date: NaiveDate,
    pub aoi_name: String,
    pub count: usize,
}

/// Detections whose box center lies in the polygon, boundary included.
pub fn count_in_aoi<T: Scalar>(detections: &[Detection<T>], aoi: &AoiPolygon<T>) -> usize {
    detections
        .iter()
        .filter(|d| point_in_polygon(d.bbox().center(), aoi))
        .count()
}

/// Per-scene totals (summed over AOIs) for one location and year.
fn scene_totals<'a>(records: &'a [CountRecord], location_id: &str, year: i32) -> BTreeMap<&'a str, usize> {
    let mut totals = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.location_id == location_id && r.capture_date.year() == year)
    {
        *totals.entry(r.scene_id.as_str()).or_insert(0) += r.count;
    }
    totals
}

/// Mean vehicle count over a location's scenes captured in `year`.
///
/// A scene with several AOI rows contributes the sum of those rows.
pub fn yearly_average(records: &[CountRecord], location_id: &str, year: i32) -> Result<f64, AnalyticsError> {
    let totals = scene_totals(records, location_id, year);
    if totals.is_empty() {
        return Err(AnalyticsError::NoData {
            location_id: location_id.to_owned(),
            year,
        });
    }
    Ok(totals.values().sum::<usize>() as f64 / totals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendRow {
    pub location_id: String,
    pub year_a: i32,
    pub year_b: i32,
    pub avg_count_a: f64,
    pub avg_count_b: f64,
    pub change_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedLocation {
    pub location_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendReport {
    pub year_a: i32,
    pub year_b: i32,
    /// Ordered by `location_id`.
    pub rows: Vec<TrendRow>,
    pub skipped: Vec<SkippedLocation>,
    /// Unweighted mean of the per-location change ratios; `None` if no ratio is defined.
    pub overall_change: Option<f64>,
}

/// Year-over-year change per location, `(avg_b - avg_a) / avg_a`.
///
/// Locations missing either year, or with a zero average in `year_a`, are
/// listed under `skipped` instead of being given a ratio.
pub fn change_report(records: &[CountRecord], year_a: i32, year_b: i32) -> Result<TrendReport, AnalyticsError> {
    let locations: BTreeSet<&str> = records.iter().map(|r| r.location_id.as_str()).collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut with_both = 0;
    for loc in locations {
        let a = yearly_average(records, loc, year_a);
        let b = yearly_average(records, loc, year_b);
        let (avg_a, avg_b) = match (a, b) {
            (Ok(a), Ok(b)) => (a, b),
            (a, b) => {
                let mut missing: Vec<String> = [(a.is_err(), year_a), (b.is_err(), year_b)]
                    .iter()
                    .filter(|(m, _)| *m)
                    .map(|(_, y)| y.to_string())
                    .collect();
                missing.dedup();
                skipped.push(SkippedLocation {
                    location_id: loc.to_owned(),
                    reason: format!("no counts in {}", missing.join(" and ")),
                });
                continue;
            }
        };
        with_both += 1;
        if avg_a == 0.0 {
            skipped.push(SkippedLocation {
                location_id: loc.to_owned(),
                reason: format!("average count in {year_a} is zero; change ratio undefined"),
            });
            continue;
        }
        rows.push(TrendRow {
            location_id: loc.to_owned(),
            year_a,
            year_b,
            avg_count_a: avg_a,
            avg_count_b: avg_b,
            change_ratio: (avg_b - avg_a) / avg_a,
        });
    }
    if with_both == 0 {
        return Err(AnalyticsError::NoOverlap(year_a, year_b));
    }
    // TODO: an image-level alternative (pooled scene counts across locations) behind a trend flag.
    let overall_change = if rows.is_empty() {
        None
    } else {
        Some(rows.iter().map(|r| r.change_ratio).sum::<f64>() / rows.len() as f64)
    };
    Ok(TrendReport {
        year_a,
        year_b,
        rows,
        skipped,
        overall_change,
    })
}

pub fn density_per_km2(count: usize, location: &Location) -> f64 {
    count as f64 / location.area_km2
}

/// Counts CSV body (header plus one line per record), in record order.
pub fn write_counts(records: &[CountRecord]) -> String {
    let mut out = String::from(COUNTS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&r.scene_id),
            csv_field(&r.location_id),
            r.capture_date.format("%Y-%m-%d"),
            csv_field(&r.aoi_name),
            r.count
        ));
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Parse a counts CSV; `#` comment lines (run metadata, errors) are ignored.
pub fn parse_counts<R: Read>(reader: R) -> Result<Vec<CountRecord>, AnalyticsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let bad = |row: usize, message: String| AnalyticsError::Parse { row, message };
    let headers = rdr.headers().map_err(|e| bad(0, e.to_string()))?.clone();
    let expected: Vec<&str> = COUNTS_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(bad(0, format!("expected header '{COUNTS_HEADER}'")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        let capture_date = parse_iso_date(&rec[2]).map_err(|m| bad(row, format!("capture_date: {m}")))?;
        let count = rec[4]
            .parse()
            .map_err(|_| bad(row, format!("count: '{}' is not a non-negative integer", &rec[4])))?;
        out.push(CountRecord {
            scene_id: rec[0].to_owned(),
            location_id: rec[1].to_owned(),
            capture_date,
            aoi_name: rec[3].to_owned(),
            count,
        });
    }
    Ok(out)
}

pub fn write_trend_csv(report: &TrendReport) -> String {
    let mut out = String::from(TREND_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.location_id),
            r.year_a,
            r.year_b,
            r.avg_count_a,
            r.avg_count_b,
            r.change_ratio
        ));
    }
    match report.overall_change {
        Some(v) => out.push_str(&format!("# overall_change={v}\n")),
        None => out.push_str("# overall_change=undefined\n"),
    }
    for s in &report.skipped {
        out.push_str(&format!("# skipped {}: {}\n", s.location_id, s.reason));
    }
    out
}

pub fn write_trend_json(report: &TrendReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("trend report serializes");
    s.push('\n');
    s
}

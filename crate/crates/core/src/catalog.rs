//! Earthquake catalog ingestion, deduplication, filtering and 3×3 gridding.

use std::collections::HashSet;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One earthquake record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEvent {
    /// UTC, truncated to whole seconds.
    pub time: DateTime<Utc>,
    pub latitude: f64,
    pub longitude: f64,
    /// Kilometres; carried through to the events file, unused by the model.
    pub depth: Option<f64>,
    pub magnitude: f64,
}

impl CatalogEvent {
    /// Validates the record invariants.
    pub fn new(
        time: DateTime<Utc>,
        latitude: f64,
        longitude: f64,
        depth: Option<f64>,
        magnitude: f64,
    ) -> Result<Self> {
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(Error::Domain(format!("latitude {latitude} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&longitude) {
            return Err(Error::Domain(format!("longitude {longitude} outside [-180, 180]")));
        }
        if !magnitude.is_finite() || magnitude < 0.0 {
            return Err(Error::Domain(format!("magnitude {magnitude} must be finite and ≥ 0")));
        }
        if let Some(d) = depth {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::Domain(format!("depth {d} must be finite and ≥ 0")));
            }
        }
        if time <= earliest_time() {
            return Err(Error::Domain(format!("time {time} is not after 1900-01-01")));
        }
        Ok(CatalogEvent {
            time: time.with_nanosecond(0).unwrap_or(time),
            latitude,
            longitude,
            depth,
            magnitude,
        })
    }

    fn dedup_key(&self) -> (i64, u64, u64, u64) {
        (
            self.time.timestamp(),
            self.latitude.to_bits(),
            self.longitude.to_bits(),
            self.magnitude.to_bits(),
        )
    }
}

fn earliest_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(1900, 1, 1, 0, 0, 0).unwrap()
}

/// Header names used to locate the catalog columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub time: String,
    pub latitude: String,
    pub longitude: String,
    /// Optional column; absent headers simply yield `depth = None`.
    pub depth: String,
    pub magnitude: String,
}

impl Default for ColumnMapping {
    /// USGS export names.
    fn default() -> Self {
        ColumnMapping {
            time: "time".into(),
            latitude: "latitude".into(),
            longitude: "longitude".into(),
            depth: "depth".into(),
            magnitude: "mag".into(),
        }
    }
}

/// A row that could not be turned into an event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line number in the source file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedCatalog {
    pub events: Vec<CatalogEvent>,
    pub rejects: Vec<Reject>,
}

/// Parses a time stamp in RFC 3339 (USGS) form, or `YYYY-MM-DD HH:MM:SS[.f]`,
/// or a bare date.
pub fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y/%m/%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc())
}

/// Reads a comma-delimited catalog with a header row.
///
/// Rows whose mandatory fields do not parse land in `rejects` with their
/// line number; a missing mandatory column is a configuration error.
pub fn parse_catalog<R: Read>(source: R, columns: &ColumnMapping) -> Result<ParsedCatalog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        find(name).ok_or_else(|| Error::Config(format!("catalog is missing required column `{name}`")))
    };
    let (ti, lai, loi, mi) = (
        need(&columns.time)?,
        need(&columns.latitude)?,
        need(&columns.longitude)?,
        need(&columns.magnitude)?,
    );
    let di = find(&columns.depth);

    let mut out = ParsedCatalog::default();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.rejects.push(Reject {
                    line,
                    reason: format!("unreadable row: {e}"),
                });
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        match parse_row(&record, ti, lai, loi, di, mi) {
            Ok(ev) => out.events.push(ev),
            Err(reason) => out.rejects.push(Reject { line, reason }),
        }
    }
    Ok(out)
}

fn parse_row(
    record: &csv::StringRecord,
    ti: usize,
    lai: usize,
    loi: usize,
    di: Option<usize>,
    mi: usize,
) -> std::result::Result<CatalogEvent, String> {
    let field = |i: usize, name: &str| record.get(i).ok_or_else(|| format!("missing field `{name}`"));
    let number = |i: usize, name: &str| -> std::result::Result<f64, String> {
        let raw = field(i, name)?;
        raw.parse::<f64>()
            .map_err(|_| format!("unparseable {name} `{raw}`"))
    };
    let raw_time = field(ti, "time")?;
    let time = parse_time(raw_time).ok_or_else(|| format!("unparseable time `{raw_time}`"))?;
    let latitude = number(lai, "latitude")?;
    let longitude = number(loi, "longitude")?;
    let magnitude = number(mi, "magnitude")?;
    let depth = match di.and_then(|i| record.get(i)).filter(|s| !s.is_empty()) {
        Some(raw) => Some(
            raw.parse::<f64>()
                .map_err(|_| format!("unparseable depth `{raw}`"))?,
        ),
        None => None,
    };
    CatalogEvent::new(time, latitude, longitude, depth, magnitude).map_err(|e| e.to_string())
}

pub fn format_time(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Writes events in the default column layout, optionally tagged by region.
pub fn write_events<W: Write>(sink: W, events: &[CatalogEvent], regions: Option<&[RegionId]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["time", "latitude", "longitude", "depth", "mag"];
    if regions.is_some() {
        header.push("region");
    }
    w.write_record(&header)?;
    for (i, ev) in events.iter().enumerate() {
        let mut row = vec![
            format_time(&ev.time),
            ev.latitude.to_string(),
            ev.longitude.to_string(),
            ev.depth.map(|d| d.to_string()).unwrap_or_default(),
            ev.magnitude.to_string(),
        ];
        if let Some(r) = regions {
            row.push(r[i].index().to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<events>", e))?;
    Ok(())
}

pub fn write_rejects<W: Write>(sink: W, rejects: &[Reject]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["line", "reason"])?;
    for r in rejects {
        w.write_record([r.line.to_string(), r.reason.clone()])?;
    }
    w.flush().map_err(|e| Error::io("<rejects>", e))?;
    Ok(())
}

/// Drops exact repeats of `(time, latitude, longitude, magnitude)`, keeping
/// the first occurrence.
pub fn deduplicate(events: &[CatalogEvent]) -> Vec<CatalogEvent> {
    let mut seen = HashSet::with_capacity(events.len());
    events
        .iter()
        .filter(|e| seen.insert(e.dedup_key()))
        .cloned()
        .collect()
}

/// Closed UTC interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeRange {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self> {
        if start >= end {
            return Err(Error::Domain(format!("time range start {start} is not before end {end}")));
        }
        Ok(TimeRange { start, end })
    }

    /// 1966-01-15 through 2021-05-22 (end of day).
    pub fn study_period() -> Self {
        TimeRange {
            start: Utc.with_ymd_and_hms(1966, 1, 15, 0, 0, 0).unwrap(),
            end: Utc.with_ymd_and_hms(2021, 5, 22, 23, 59, 59).unwrap(),
        }
    }

    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        self.start <= *t && *t <= self.end
    }
}

/// Magnitude cut of the study catalog.
pub const STUDY_MIN_MAGNITUDE: f64 = 3.5;

/// Keeps events with `magnitude ≥ min_magnitude`, time inside the closed
/// range, and location inside the grid box (all edges inclusive).
pub fn filter_events(
    events: &[CatalogEvent],
    min_magnitude: f64,
    range: &TimeRange,
    grid: &RegionGrid,
) -> Vec<CatalogEvent> {
    events
        .iter()
        .filter(|e| e.magnitude >= min_magnitude && range.contains(&e.time) && grid.contains(e.latitude, e.longitude))
        .cloned()
        .collect()
}

/// 1-based region label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RegionId(u8);

impl RegionId {
    pub const COUNT: u8 = 9;

    pub fn new(index: u8) -> Result<Self> {
        if (1..=Self::COUNT).contains(&index) {
            Ok(RegionId(index))
        } else {
            Err(Error::Domain(format!("region index {index} outside 1..=9")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = RegionId> {
        (1..=Self::COUNT).map(RegionId)
    }
}

impl TryFrom<u8> for RegionId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        RegionId::new(v)
    }
}

impl From<RegionId> for u8 {
    fn from(r: RegionId) -> u8 {
        r.0
    }
}

impl std::fmt::Display for RegionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Equal-width 3×3 latitude/longitude partition of a bounding box.
///
/// Cells are numbered row-major from the north-west corner; `numbering`
/// relabels that order (entry `k` is the label of row-major cell `k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub numbering: Vec<u8>,
}

impl RegionGrid {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let grid = RegionGrid {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            rows: 3,
            cols: 3,
            numbering: (1..=9).collect(),
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Mainland China study box: latitude 23–45°, longitude 75–119°.
    pub fn study_area() -> Self {
        Self::new(23.0, 45.0, 75.0, 119.0).expect("static bounds are valid")
    }

    pub fn with_numbering(mut self, numbering: Vec<u8>) -> Result<Self> {
        self.numbering = numbering;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(Error::Config(format!(
                "invalid grid box lat {}..{} lon {}..{}",
                self.lat_min, self.lat_max, self.lon_min, self.lon_max
            )));
        }
        if self.rows != 3 || self.cols != 3 {
            return Err(Error::Config("region grid must be 3×3".into()));
        }
        let mut sorted = self.numbering.clone();
        sorted.sort_unstable();
        if sorted != (1..=9).collect::<Vec<u8>>() {
            return Err(Error::Config(format!(
                "region numbering {:?} is not a permutation of 1..=9",
                self.numbering
            )));
        }
        Ok(())
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }

    pub fn lat_edges(&self) -> Vec<f64> {
        edges(self.lat_min, self.lat_max, self.rows)
    }

    pub fn lon_edges(&self) -> Vec<f64> {
        edges(self.lon_min, self.lon_max, self.cols)
    }

    /// `(row, col)` of the cell holding a point; row 0 is the northern band.
    pub fn cell(&self, lat: f64, lon: f64) -> Result<(usize, usize)> {
        if !self.contains(lat, lon) {
            return Err(Error::Domain(format!("point ({lat}, {lon}) is outside the grid box")));
        }
        let band = interval_index(&self.lat_edges(), lat);
        let col = interval_index(&self.lon_edges(), lon);
        Ok((self.rows - 1 - band, col))
    }

    pub fn assign(&self, lat: f64, lon: f64) -> Result<RegionId> {
        let (row, col) = self.cell(lat, lon)?;
        RegionId::new(self.numbering[row * self.cols + col])
    }

    /// Bounding box `(lat_min, lat_max, lon_min, lon_max)` of one region.
    pub fn region_bounds(&self, region: RegionId) -> (f64, f64, f64, f64) {
        let k = self
            .numbering
            .iter()
            .position(|&l| l == region.index())
            .expect("numbering is a permutation");
        let (row, col) = (k / self.cols, k % self.cols);
        let (lat, lon) = (self.lat_edges(), self.lon_edges());
        let band = self.rows - 1 - row;
        (lat[band], lat[band + 1], lon[col], lon[col + 1])
    }
}

fn edges(min: f64, max: f64, parts: usize) -> Vec<f64> {
    (0..=parts)
        .map(|i| if i == parts { max } else { min + (max - min) * i as f64 / parts as f64 })
        .collect()
}

/// Index `i` with `edges[i] ≤ x < edges[i+1]`; the last interval is closed.
fn interval_index(edges: &[f64], x: f64) -> usize {
    let parts = edges.len() - 1;
    (1..parts).take_while(|&i| x >= edges[i]).count()
}

pub fn assign_region(event: &CatalogEvent, grid: &RegionGrid) -> Result<RegionId> {
    grid.assign(event.latitude, event.longitude)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(time: &str, lat: f64, lon: f64, mag: f64) -> CatalogEvent {
        CatalogEvent::new(parse_time(time).unwrap(), lat, lon, None, mag).unwrap()
    }

    #[test]
    fn parses_usgs_row() {
        let src = "time,latitude,longitude,depth,mag\n1966-03-07T21:29:14Z,37.35,114.92,9,7.0\n";
        let parsed = parse_catalog(src.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(parsed.rejects, vec![]);
        assert_eq!(parsed.events.len(), 1);
        let e = &parsed.events[0];
        assert_eq!(format_time(&e.time), "1966-03-07T21:29:14Z");
        assert_eq!((e.latitude, e.longitude, e.depth, e.magnitude), (37.35, 114.92, Some(9.0), 7.0));
    }

    #[test]
    fn header_only_is_empty() {
        let parsed = parse_catalog("time,latitude,longitude,depth,mag\n".as_bytes(), &ColumnMapping::default()).unwrap();
        assert!(parsed.events.is_empty());
        assert!(parsed.rejects.is_empty());
    }

    #[test]
    fn bad_magnitude_is_rejected_with_line() {
        let src = "time,latitude,longitude,depth,mag\n1970-01-01T00:00:00Z,30,100,10,abc\n";
        let parsed = parse_catalog(src.as_bytes(), &ColumnMapping::default()).unwrap();
        assert!(parsed.events.is_empty());
        assert_eq!(parsed.rejects.len(), 1);
        assert_eq!(parsed.rejects[0].line, 2);
        assert!(parsed.rejects[0].reason.contains("abc"));
    }

    #[test]
    fn missing_column_names_it() {
        let err = parse_catalog("time,latitude,longitude\n".as_bytes(), &ColumnMapping::default()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("`mag`")), "{err}");
    }

    #[test]
    fn custom_mapping_and_missing_depth_column() {
        let cols = ColumnMapping {
            time: "origin".into(),
            latitude: "lat".into(),
            longitude: "lon".into(),
            depth: "dep".into(),
            magnitude: "ms".into(),
        };
        let src = "origin,lat,lon,ms\n2001-11-14 09:26:10,35.9,90.5,8.1\n";
        let parsed = parse_catalog(src.as_bytes(), &cols).unwrap();
        assert_eq!(parsed.events.len(), 1);
        assert_eq!(parsed.events[0].depth, None);
    }

    #[test]
    fn out_of_range_and_pre_1900_rows_rejected() {
        let src = "time,latitude,longitude,depth,mag\n\
                   1970-01-01T00:00:00Z,95,100,10,4\n\
                   1899-06-01T00:00:00Z,30,100,10,4\n\
                   1970-01-01T00:00:00Z,30,100,,4\n";
        let parsed = parse_catalog(src.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(parsed.events.len(), 1);
        assert_eq!(parsed.rejects.iter().map(|r| r.line).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn dedup_examples() {
        let a = ev("1970-01-01T00:00:00Z", 30.0, 100.0, 4.0);
        let b = ev("1970-01-01T00:00:00Z", 30.0, 100.0, 4.5);
        assert_eq!(deduplicate(&[a.clone(), a.clone()]), vec![a.clone()]);
        assert_eq!(deduplicate(&[a.clone(), b.clone()]), vec![a, b]);
        assert!(deduplicate(&[]).is_empty());
    }

    #[test]
    fn filter_examples() {
        let grid = RegionGrid::study_area();
        let range = TimeRange::study_period();
        let at_threshold = ev("1980-01-01T00:00:00Z", 30.0, 100.0, 3.5);
        let south = ev("1980-01-01T00:00:00Z", 22.9, 100.0, 5.0);
        let north_edge = ev("1980-01-01T00:00:00Z", 45.0, 100.0, 5.0);
        let early = ev("1966-01-14T23:59:59Z", 30.0, 100.0, 5.0);
        let kept = filter_events(&[at_threshold.clone(), south, north_edge.clone(), early], 3.5, &range, &grid);
        assert_eq!(kept, vec![at_threshold, north_edge]);
    }

    #[test]
    fn region_examples() {
        let grid = RegionGrid::study_area();
        assert_eq!(grid.assign(44.0, 76.0).unwrap().index(), 1);
        assert_eq!(grid.assign(23.0, 75.0).unwrap().index(), 7);
        assert_eq!(grid.assign(45.0, 119.0).unwrap().index(), 3);
        assert!(matches!(grid.assign(22.0, 80.0), Err(Error::Domain(_))));
    }

    #[test]
    fn interior_edges_belong_to_upper_cell() {
        let grid = RegionGrid::study_area();
        let lat = grid.lat_edges();
        let lon = grid.lon_edges();
        assert!((lat[1] - 30.333_333_333_333_33).abs() < 1e-12);
        assert!((lon[2] - 104.333_333_333_333_33).abs() < 1e-12);
        // on the first interior latitude edge: middle band, so row 1
        assert_eq!(grid.cell(lat[1], 80.0).unwrap(), (1, 0));
        assert_eq!(grid.cell(30.0, lon[1]).unwrap(), (2, 1));
    }

    #[test]
    fn numbering_is_a_permutation() {
        let grid = RegionGrid::study_area().with_numbering(vec![9, 8, 7, 6, 5, 4, 3, 2, 1]).unwrap();
        assert_eq!(grid.assign(44.0, 76.0).unwrap().index(), 9);
        assert!(RegionGrid::study_area().with_numbering(vec![1; 9]).is_err());
        let (a, b, c, d) = grid.region_bounds(RegionId::new(9).unwrap());
        assert_eq!((b, c), (45.0, 75.0));
        assert!(a < b && c < d);
    }
}

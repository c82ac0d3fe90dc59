//! Station and grid time series: ingestion, thresholds, censoring,
//! collocation and the lagged exceedance covariates.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::quantile;

/// Mean Earth radius used for the equirectangular projection.
const EARTH_RADIUS_KM: f64 = 6371.0;

/// Minimum number of present values needed for a threshold or MRL table.
pub const MIN_THRESHOLD_VALUES: usize = 20;

/// Planar location in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        self.distance_sq(other).sqrt()
    }

    #[inline]
    pub fn distance_sq(&self, other: &Location) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordSystem {
    /// `easting_km,northing_km`
    ProjectedKm,
    /// `lon,lat` in degrees; projected at the domain's mean latitude.
    LonLat,
}

/// Map from file coordinates to planar kilometres. Lon/lat inputs use an
/// equirectangular projection at the data's mean latitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: CoordSystem,
    pub lat0_rad: f64,
}

impl Projection {
    pub fn project(&self, a: f64, b: f64) -> Location {
        match self.coords {
            CoordSystem::ProjectedKm => Location::new(a, b),
            CoordSystem::LonLat => Location::new(
                EARTH_RADIUS_KM * a.to_radians() * self.lat0_rad.cos(),
                EARTH_RADIUS_KM * b.to_radians(),
            ),
        }
    }
}

/// One in situ monitoring site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSeries {
    pub id: String,
    pub location: Location,
    /// Strictly increasing day indices (days since 1970-01-01).
    pub timestamps: Vec<i64>,
    pub values: Vec<Option<f64>>,
    pub threshold: f64,
    pub censored: Vec<Option<f64>>,
}

impl StationSeries {
    pub fn new(
        id: impl Into<String>,
        location: Location,
        timestamps: Vec<i64>,
        values: Vec<Option<f64>>,
        threshold: f64,
    ) -> Result<Self> {
        let id = id.into();
        if timestamps.len() != values.len() {
            return Err(Error::Input(format!(
                "station {id}: {} timestamps but {} values",
                timestamps.len(),
                values.len()
            )));
        }
        check_increasing(&timestamps, &id)?;
        if !threshold.is_finite() {
            return Err(Error::Input(format!("station {id}: threshold must be finite")));
        }
        let censored = censor(&values, threshold);
        Ok(Self { id, location, timestamps, values, threshold, censored })
    }

    pub fn present_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn n_present(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn n_exceedances(&self) -> usize {
        self.censored.iter().flatten().filter(|v| **v > 0.0).count()
    }

    /// `(timestamp, censored value)` for every day with an observation.
    pub fn observed(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.timestamps
            .iter()
            .zip(&self.censored)
            .filter_map(|(t, c)| c.map(|c| (*t, c)))
    }
}

/// One remote-sensing grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSeries {
    pub cell_id: u64,
    pub location: Location,
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
    pub threshold: f64,
    pub censored: Vec<f64>,
    pub exceed_indicator: Vec<u8>,
}

impl GridSeries {
    pub fn new(
        cell_id: u64,
        location: Location,
        timestamps: Vec<i64>,
        values: Vec<f64>,
        threshold: f64,
    ) -> Result<Self> {
        let label = format!("cell {cell_id}");
        if timestamps.len() != values.len() {
            return Err(Error::Input(format!("{label}: timestamps and values differ in length")));
        }
        check_increasing(&timestamps, &label)?;
        if !threshold.is_finite() {
            return Err(Error::Input(format!("{label}: threshold must be finite")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("{label}: grid values must be finite")));
        }
        let censored: Vec<f64> = values.iter().map(|&v| censor_value(v, threshold)).collect();
        let exceed_indicator = censored.iter().map(|&c| u8::from(c > 0.0)).collect();
        Ok(Self { cell_id, location, timestamps, values, threshold, censored, exceed_indicator })
    }

    pub fn index_of(&self, t: i64) -> Option<usize> {
        self.timestamps.binary_search(&t).ok()
    }

    /// Indicator of a remote-sensing exceedance on day `t`; zero outside the
    /// cell's record.
    pub fn indicator_at(&self, t: i64) -> f64 {
        self.index_of(t).map_or(0.0, |k| f64::from(self.exceed_indicator[k]))
    }

    /// Rows of the lagged covariate matrix for arbitrary days `times`.
    pub fn covariate_rows(&self, times: &[i64]) -> Vec<[f64; 4]> {
        times
            .iter()
            .map(|&t| [1.0, self.indicator_at(t - 1), self.indicator_at(t), self.indicator_at(t + 1)])
            .collect()
    }
}

fn check_increasing(ts: &[i64], label: &str) -> Result<()> {
    if let Some(w) = ts.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Input(format!(
            "{label}: timestamps must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// A station paired with the grid cell whose centroid is nearest, plus the
/// covariate matrix of the exceedance-probability regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocatedPair {
    pub station: StationSeries,
    pub grid: GridSeries,
    /// One row per station timestamp: `[1, x*(t-1) > 0, x*(t) > 0, x*(t+1) > 0]`.
    pub w: Vec<[f64; 4]>,
}

impl CollocatedPair {
    pub fn new(station: StationSeries, grid: GridSeries) -> Result<Self> {
        let w = build_w(&station, &grid)?;
        Ok(Self { station, grid, w })
    }
}

/// Covariate matrix with calendar-day lags. Lags outside the cell's record
/// are zero; the same-day term must exist in the grid record.
pub fn build_w(station: &StationSeries, grid: &GridSeries) -> Result<Vec<[f64; 4]>> {
    let (k0, k1) = match (grid.timestamps.first(), grid.timestamps.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::Input(format!("cell {} has no data", grid.cell_id))),
    };
    station
        .timestamps
        .iter()
        .map(|&t| {
            let k = grid.index_of(t).ok_or_else(|| {
                Error::Input(format!(
                    "station {}: day {} has no matching record in cell {}",
                    station.id, t, grid.cell_id
                ))
            })?;
            let lag = if t - 1 >= k0 { grid.indicator_at(t - 1) } else { 0.0 };
            let lead = if t + 1 <= k1 { grid.indicator_at(t + 1) } else { 0.0 };
            Ok([1.0, lag, f64::from(grid.exceed_indicator[k]), lead])
        })
        .collect()
}

#[inline]
pub fn censor_value(v: f64, threshold: f64) -> f64 {
    if v > threshold {
        v - threshold
    } else {
        0.0
    }
}

/// Excess over `threshold`, zero at or below it; missing stays missing.
pub fn censor(values: &[Option<f64>], threshold: f64) -> Vec<Option<f64>> {
    values.iter().map(|v| v.map(|v| censor_value(v, threshold))).collect()
}

/// Type-7 empirical quantile of the present values at level `q`.
pub fn compute_threshold(values: &[f64], q: f64, site: &str) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("threshold quantile must lie in (0, 1), got {q}")));
    }
    if values.len() < MIN_THRESHOLD_VALUES {
        return Err(Error::Input(format!(
            "site {site}: {} values present, need at least {MIN_THRESHOLD_VALUES} for a threshold",
            values.len()
        )));
    }
    Ok(quantile(values, q))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MrlRow {
    pub threshold: f64,
    pub mean_excess: f64,
    pub count: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Mean residual life table: mean excess over each candidate threshold with
/// a normal-approximation 95% band. Candidates with no excesses are omitted.
pub fn mean_residual_life(values: &[f64], candidates: &[f64]) -> Result<Vec<MrlRow>> {
    if values.len() < MIN_THRESHOLD_VALUES {
        return Err(Error::Input(format!(
            "mean residual life needs at least {MIN_THRESHOLD_VALUES} values, got {}",
            values.len()
        )));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for &u in candidates {
        let ex: Vec<f64> = values.iter().filter(|&&v| v > u).map(|&v| v - u).collect();
        if ex.is_empty() {
            continue;
        }
        let n = ex.len() as f64;
        let m = ex.iter().sum::<f64>() / n;
        let half = if ex.len() > 1 {
            let var = ex.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        rows.push(MrlRow { threshold: u, mean_excess: m, count: ex.len(), lower: m - half, upper: m + half });
    }
    Ok(rows)
}

/// `n` evenly spaced candidate thresholds between the median and the 98th
/// percentile of `values`.
pub fn mrl_candidates(values: &[f64], n: usize) -> Vec<f64> {
    if values.is_empty() || n == 0 {
        return Vec::new();
    }
    let lo = quantile(values, 0.5);
    let hi = quantile(values, 0.98);
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Id of the cell whose centroid is closest; ties go to the smaller id.
pub fn nearest_centroid(location: &Location, cells: &[GridSeries]) -> Result<u64> {
    cells
        .iter()
        .map(|c| (location.distance_sq(&c.location), c.cell_id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
        .ok_or_else(|| Error::Input("no grid cells to collocate with".into()))
}

/// Pair every station with its nearest cell.
pub fn collocate(stations: &[StationSeries], cells: &[GridSeries]) -> Result<Vec<CollocatedPair>> {
    stations
        .iter()
        .map(|s| {
            let id = nearest_centroid(&s.location, cells)?;
            let cell = cells.iter().find(|c| c.cell_id == id).expect("id from the same slice");
            CollocatedPair::new(s.clone(), cell.clone())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub coverage_min: f64,
    pub quantile: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { coverage_min: 0.75, quantile: 0.80 }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub stations: Vec<StationSeries>,
    pub grids: Vec<GridSeries>,
    /// Maps file coordinates to kilometres.
    pub projection: Projection,
    /// Stations removed by the coverage filter.
    pub dropped: Vec<String>,
}

pub fn day_index(date: NaiveDate) -> i64 {
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
    (date - epoch).num_days()
}

pub fn date_of(day: i64) -> NaiveDate {
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
    epoch + chrono::Duration::days(day)
}

fn parse_date(s: &str) -> Option<i64> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok().map(day_index)
}

fn coord_header(a: &str, b: &str) -> Option<CoordSystem> {
    match (a.trim(), b.trim()) {
        ("easting_km", "northing_km") => Some(CoordSystem::ProjectedKm),
        ("lon", "lat") => Some(CoordSystem::LonLat),
        _ => None,
    }
}

struct RawStation {
    loc: (f64, f64),
    days: BTreeMap<i64, Option<f64>>,
}

struct RawCell {
    loc: (f64, f64),
    days: BTreeMap<i64, f64>,
}

fn read_records(path: &Path) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_f64(field: &str, path: &Path, line: usize, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse { path: path.into(), line, msg: format!("bad {what} '{field}'") })
}

fn parse_station_file(path: &Path) -> Result<(CoordSystem, BTreeMap<String, RawStation>)> {
    let recs = read_records(path)?;
    let perr = |line: usize, msg: String| Error::Parse { path: path.into(), line, msg };
    let mut it = recs.into_iter();
    let (line, head) = it.next().ok_or_else(|| perr(1, "empty station file".into()))?;
    if head.len() != 3 || head.get(0) != Some("id") {
        return Err(perr(line, "expected metadata header 'id,easting_km,northing_km' or 'id,lon,lat'".into()));
    }
    let coords = coord_header(&head[1], &head[2])
        .ok_or_else(|| perr(line, format!("unknown coordinate columns '{},{}'", &head[1], &head[2])))?;
    let mut stations: BTreeMap<String, RawStation> = BTreeMap::new();
    let mut in_data = false;
    for (line, rec) in it {
        if rec.len() != 3 {
            return Err(perr(line, format!("expected 3 fields, found {}", rec.len())));
        }
        if !in_data {
            if &rec[0] == "id" && &rec[1] == "date" && &rec[2] == "value" {
                in_data = true;
                continue;
            }
            let id = rec[0].to_string();
            if id.is_empty() {
                return Err(perr(line, "empty station id".into()));
            }
            let x = parse_f64(&rec[1], path, line, "coordinate")?;
            let y = parse_f64(&rec[2], path, line, "coordinate")?;
            if stations.insert(id.clone(), RawStation { loc: (x, y), days: BTreeMap::new() }).is_some() {
                return Err(perr(line, format!("station '{id}' declared twice")));
            }
            continue;
        }
        let st = stations
            .get_mut(&rec[0])
            .ok_or_else(|| perr(line, format!("station '{}' not declared in metadata block", &rec[0])))?;
        let day = parse_date(&rec[1]).ok_or_else(|| perr(line, format!("bad date '{}'", &rec[1])))?;
        let value = if rec[2].is_empty() { None } else { Some(parse_f64(&rec[2], path, line, "value")?) };
        if st.days.insert(day, value).is_some() {
            return Err(perr(line, format!("duplicate record for station '{}' on {}", &rec[0], &rec[1])));
        }
    }
    if !in_data {
        return Err(perr(0, "missing 'id,date,value' data header".into()));
    }
    Ok((coords, stations))
}

fn parse_grid_file(path: &Path) -> Result<(CoordSystem, BTreeMap<u64, RawCell>)> {
    let recs = read_records(path)?;
    let perr = |line: usize, msg: String| Error::Parse { path: path.into(), line, msg };
    let mut it = recs.into_iter();
    let (line, head) = it.next().ok_or_else(|| perr(1, "empty grid file".into()))?;
    if head.len() != 5 || head.get(0) != Some("cell_id") || head.get(3) != Some("date") || head.get(4) != Some("value") {
        return Err(perr(line, "expected header 'cell_id,easting_km,northing_km,date,value'".into()));
    }
    let coords = coord_header(&head[1], &head[2])
        .ok_or_else(|| perr(line, format!("unknown coordinate columns '{},{}'", &head[1], &head[2])))?;
    let mut cells: BTreeMap<u64, RawCell> = BTreeMap::new();
    for (line, rec) in it {
        if rec.len() != 5 {
            return Err(perr(line, format!("expected 5 fields, found {}", rec.len())));
        }
        let id: u64 = rec[0].parse().map_err(|_| perr(line, format!("bad cell id '{}'", &rec[0])))?;
        let x = parse_f64(&rec[1], path, line, "coordinate")?;
        let y = parse_f64(&rec[2], path, line, "coordinate")?;
        let day = parse_date(&rec[3]).ok_or_else(|| perr(line, format!("bad date '{}'", &rec[3])))?;
        if rec[4].is_empty() {
            return Err(perr(line, "grid values may not be missing".into()));
        }
        let v = parse_f64(&rec[4], path, line, "value")?;
        let cell = cells.entry(id).or_insert_with(|| RawCell { loc: (x, y), days: BTreeMap::new() });
        if cell.loc != (x, y) {
            return Err(perr(line, format!("cell {id} changes centroid")));
        }
        if cell.days.insert(day, v).is_some() {
            return Err(perr(line, format!("duplicate record for cell {id} on {}", &rec[3])));
        }
    }
    if cells.is_empty() {
        return Err(perr(line, "grid file has no data rows".into()));
    }
    Ok((coords, cells))
}

/// Read both inputs, drop poorly covered stations, threshold and censor.
pub fn load_dataset(station_file: &Path, grid_file: &Path, config: &DataConfig) -> Result<Dataset> {
    let (scoords, raw_stations) = parse_station_file(station_file)?;
    let (gcoords, raw_cells) = parse_grid_file(grid_file)?;
    if scoords != gcoords {
        return Err(Error::Input("station and grid files use different coordinate systems".into()));
    }
    if !(config.coverage_min >= 0.0 && config.coverage_min <= 1.0) {
        return Err(Error::Config(format!("coverage_min must lie in [0, 1], got {}", config.coverage_min)));
    }
    let projection = match scoords {
        CoordSystem::ProjectedKm => Projection { coords: scoords, lat0_rad: 0.0 },
        CoordSystem::LonLat => {
            let lats: Vec<f64> = raw_stations
                .values()
                .map(|s| s.loc.1)
                .chain(raw_cells.values().map(|c| c.loc.1))
                .collect();
            Projection { coords: scoords, lat0_rad: (lats.iter().sum::<f64>() / lats.len() as f64).to_radians() }
        }
    };
    let project = |(a, b): (f64, f64)| projection.project(a, b);

    let first = raw_stations.values().filter_map(|s| s.days.keys().next()).min().copied();
    let last = raw_stations.values().filter_map(|s| s.days.keys().next_back()).max().copied();
    let period = match (first, last) {
        (Some(a), Some(b)) => (b - a + 1) as f64,
        _ => return Err(Error::Input("station file has no observations".into())),
    };

    let mut stations = Vec::new();
    let mut dropped = Vec::new();
    for (id, raw) in raw_stations {
        let present: Vec<f64> = raw.days.values().flatten().copied().collect();
        let coverage = present.len() as f64 / period;
        if coverage <= config.coverage_min {
            log::info!("dropping station {id}: coverage {coverage:.3} <= {}", config.coverage_min);
            dropped.push(id);
            continue;
        }
        let u = compute_threshold(&present, config.quantile, &id)?;
        let (ts, vs): (Vec<i64>, Vec<Option<f64>>) = raw.days.into_iter().unzip();
        stations.push(StationSeries::new(id, project(raw.loc), ts, vs, u)?);
    }

    let mut grids = Vec::with_capacity(raw_cells.len());
    for (id, raw) in raw_cells {
        let (ts, vs): (Vec<i64>, Vec<f64>) = raw.days.into_iter().unzip();
        let u = compute_threshold(&vs, config.quantile, &format!("cell {id}"))?;
        grids.push(GridSeries::new(id, project(raw.loc), ts, vs, u)?);
    }
    Ok(Dataset { stations, grids, projection, dropped })
}

/// Write stations in the two-block station CSV layout.
pub fn write_station_csv<W: std::io::Write>(out: W, stations: &[StationSeries]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record(["id", "easting_km", "northing_km"])?;
    for s in stations {
        w.write_record([s.id.clone(), fmt_num(s.location.x), fmt_num(s.location.y)])?;
    }
    w.write_record(["id", "date", "value"])?;
    for s in stations {
        for (t, v) in s.timestamps.iter().zip(&s.values) {
            let v = v.map(fmt_num).unwrap_or_default();
            w.write_record([s.id.clone(), date_of(*t).to_string(), v])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_grid_csv<W: std::io::Write>(out: W, grids: &[GridSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cell_id", "easting_km", "northing_km", "date", "value"])?;
    for g in grids {
        for (t, v) in g.timestamps.iter().zip(&g.values) {
            w.write_record([
                g.cell_id.to_string(),
                fmt_num(g.location.x),
                fmt_num(g.location.y),
                date_of(*t).to_string(),
                fmt_num(*v),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest decimal form that parses back to the same bits.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Ensure site ids are unique.
pub fn check_unique_ids(stations: &[StationSeries]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in stations {
        if !seen.insert(&s.id) {
            return Err(Error::Input(format!("duplicate station id '{}'", s.id)));
        }
    }
    Ok(())
}

//! Occurrence ingestion, the environmental raster, and the species catalog.
//!
//! Each occurrence record becomes one single-positive training sample. The
//! catalog keeps the per-species presence counts `n_p(s)`, the total sample
//! count `n`, and the derived species weights `w_s = n / n_p(s)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_location, LocationEncoder};

/// One presence observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceRecord {
    pub lon: f64,
    pub lat: f64,
    pub species_id: usize,
}

/// Geographic extent of a raster, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl GeoBounds {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }
}

/// Rectangular raster of `F` environmental features.
///
/// Cells are stored row-major: row 0 is the southernmost row (starting at
/// `lat_min`), column 0 the westernmost (starting at `lon_min`), and cell
/// `row * width + col` holds `F` contiguous values.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvGrid {
    width: usize,
    height: usize,
    bounds: GeoBounds,
    n_features: usize,
    values: Vec<f64>,
}

impl EnvGrid {
    pub fn new(
        width: usize,
        height: usize,
        bounds: GeoBounds,
        n_features: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config("grid", "width and height must be at least 1"));
        }
        if n_features == 0 {
            return Err(Error::config("grid", "feature count must be at least 1"));
        }
        if !(bounds.lon_min < bounds.lon_max && bounds.lat_min < bounds.lat_max) {
            return Err(Error::config("grid", "bounds must satisfy min < max"));
        }
        if bounds.lon_min < -180.0 || bounds.lon_max > 180.0 || bounds.lat_min < -90.0 || bounds.lat_max > 90.0 {
            return Err(Error::config("grid", "bounds exceed valid coordinate ranges"));
        }
        if values.len() != width * height * n_features {
            return Err(Error::Shape(format!(
                "grid expects {} values, got {}",
                width * height * n_features,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid values".into()));
        }
        Ok(Self {
            width,
            height,
            bounds,
            n_features,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bounds(&self) -> GeoBounds {
        self.bounds
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn cell_size(&self) -> (f64, f64) {
        (
            (self.bounds.lon_max - self.bounds.lon_min) / self.width as f64,
            (self.bounds.lat_max - self.bounds.lat_min) / self.height as f64,
        )
    }

    /// Index of the cell containing the point. A point on a shared edge
    /// resolves to the cell with the lower index along that axis.
    pub fn cell_index(&self, lon: f64, lat: f64) -> Result<usize> {
        if !lon.is_finite() || !lat.is_finite() || !self.bounds.contains(lon, lat) {
            return Err(Error::OutOfBounds { lon, lat });
        }
        let (dx, dy) = self.cell_size();
        let axis = |offset: f64, step: f64, n: usize| -> usize {
            let k = (offset / step).ceil() as i64 - 1;
            k.clamp(0, n as i64 - 1) as usize
        };
        let col = axis(lon - self.bounds.lon_min, dx, self.width);
        let row = axis(lat - self.bounds.lat_min, dy, self.height);
        Ok(row * self.width + col)
    }

    pub fn cell_features(&self, cell: usize) -> &[f64] {
        let start = cell * self.n_features;
        &self.values[start..start + self.n_features]
    }

    /// `(lon_min, lon_max, lat_min, lat_max)` of one cell.
    pub fn cell_extent(&self, cell: usize) -> (f64, f64, f64, f64) {
        let (dx, dy) = self.cell_size();
        let col = (cell % self.width) as f64;
        let row = (cell / self.width) as f64;
        let lon0 = self.bounds.lon_min + col * dx;
        let lat0 = self.bounds.lat_min + row * dy;
        (lon0, lon0 + dx, lat0, lat0 + dy)
    }

    /// Uniform point strictly inside a cell.
    pub fn jitter_in_cell<R: Rng + ?Sized>(&self, cell: usize, rng: &mut R) -> (f64, f64) {
        let (lon0, lon1, lat0, lat1) = self.cell_extent(cell);
        let u: f64 = rng.sample(rand_distr::Open01);
        let v: f64 = rng.sample(rand_distr::Open01);
        (lon0 + u * (lon1 - lon0), lat0 + v * (lat1 - lat0))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let b = self.bounds;
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            writeln!(out, "width,height,lon_min,lon_max,lat_min,lat_max,features")?;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.width, self.height, b.lon_min, b.lon_max, b.lat_min, b.lat_max, self.n_features
            )?;
            for cell in 0..self.cell_count() {
                let row: Vec<String> = self.cell_features(cell).iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", row.join(","))?;
            }
            out.flush()
        };
        write(&mut out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut rows = reader.records();
        let meta = rows
            .next()
            .ok_or_else(|| parse_err(2, "missing grid metadata row".into()))??;
        if meta.len() != 7 {
            return Err(parse_err(2, format!("expected 7 metadata fields, got {}", meta.len())));
        }
        let field = |i: usize| -> Result<f64> {
            meta[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(2, format!("field {i}: {e}")))
        };
        let width = field(0)? as usize;
        let height = field(1)? as usize;
        let bounds = GeoBounds {
            lon_min: field(2)?,
            lon_max: field(3)?,
            lat_min: field(4)?,
            lat_max: field(5)?,
        };
        let n_features = field(6)? as usize;
        let mut values = Vec::with_capacity(width * height * n_features);
        for (i, row) in rows.enumerate() {
            let line = i + 3;
            let row = row?;
            if row.len() != n_features {
                return Err(parse_err(line, format!("expected {n_features} values, got {}", row.len())));
            }
            for v in row.iter() {
                values.push(v.trim().parse::<f64>().map_err(|e| parse_err(line, e.to_string()))?);
            }
        }
        EnvGrid::new(width, height, bounds, n_features, values)
    }
}

/// Per-species presence counts and the derived imbalance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesCatalog {
    counts: Vec<usize>,
    total: usize,
    weights: Vec<f64>,
}

impl SpeciesCatalog {
    /// Builds a catalog from per-species counts; `n` is their sum since every
    /// record is its own sample.
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        let missing: Vec<usize> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(s, _)| s)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingSpecies(missing));
        }
        let total: usize = counts.iter().sum();
        let weights = counts.iter().map(|&c| total as f64 / c as f64).collect();
        Ok(Self {
            counts,
            total,
            weights,
        })
    }

    pub fn species_count(&self) -> usize {
        self.counts.len()
    }

    /// `n_p(s)` for every species.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Total number of presence samples `n`.
    pub fn total(&self) -> usize {
        self.total
    }

    /// `w_s = n / n_p(s)`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `freq(s) = 1 / w_s`.
    pub fn frequency(&self, species: usize) -> f64 {
        self.counts[species] as f64 / self.total as f64
    }

    /// Species whose weight is exactly 1, for which the full weighted loss is singular.
    pub fn full_weighted_ineligible(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= self.total)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn check_full_weighted(&self) -> Result<()> {
        match self.full_weighted_ineligible().first() {
            Some(&species) => Err(Error::SingularWeight {
                species,
                weight: self.weights[species],
            }),
            None => Ok(()),
        }
    }
}

/// One single-positive multi-label training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: Vec<f64>,
    pub positive: usize,
}

/// Presence-absence evaluation sites with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    locations: Vec<(f64, f64)>,
    features: Array2<f64>,
    labels: Array2<bool>,
}

impl EvalSet {
    /// `labels` is `sites × S`. Features are assembled exactly as for training samples.
    pub fn new(
        locations: Vec<(f64, f64)>,
        labels: Array2<bool>,
        grid: &EnvGrid,
        encoder: Option<LocationEncoder>,
    ) -> Result<Self> {
        if labels.nrows() != locations.len() {
            return Err(Error::Shape(format!(
                "{} label rows for {} sites",
                labels.nrows(),
                locations.len()
            )));
        }
        let dim = feature_dim(grid, encoder);
        let mut features = Array2::zeros((locations.len(), dim));
        for (i, &(lon, lat)) in locations.iter().enumerate() {
            let row = site_features(grid, encoder, lon, lat)?;
            features.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok(Self {
            locations,
            features,
            labels,
        })
    }

    pub fn site_count(&self) -> usize {
        self.locations.len()
    }

    pub fn species_count(&self) -> usize {
        self.labels.ncols()
    }

    pub fn locations(&self) -> &[(f64, f64)] {
        &self.locations
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array2<bool> {
        &self.labels
    }

    pub fn species_labels(&self, species: usize) -> Vec<bool> {
        self.labels.column(species).to_vec()
    }

    /// Species whose label column is constant; AUC is undefined for them.
    pub fn constant_species(&self) -> Vec<usize> {
        (0..self.species_count())
            .filter(|&s| {
                let col = self.labels.column(s);
                col.iter().all(|&l| l) || col.iter().all(|&l| !l)
            })
            .collect()
    }

    /// Writes `site_id,lon,lat` and `site_id,species_id,label` files.
    pub fn write_csv(&self, sites_path: &Path, labels_path: &Path) -> Result<()> {
        let mut sites = csv::Writer::from_path(sites_path)?;
        sites.write_record(["site_id", "lon", "lat"])?;
        for (i, (lon, lat)) in self.locations.iter().enumerate() {
            sites.write_record([i.to_string(), lon.to_string(), lat.to_string()])?;
        }
        sites.flush().map_err(|e| Error::io(sites_path, e))?;

        let mut labels = csv::Writer::from_path(labels_path)?;
        labels.write_record(["site_id", "species_id", "label"])?;
        for ((site, species), &label) in self.labels.indexed_iter() {
            labels.write_record([site.to_string(), species.to_string(), u8::from(label).to_string()])?;
        }
        labels.flush().map_err(|e| Error::io(labels_path, e))?;
        Ok(())
    }

    /// Reads the two evaluation files. Every `(site, species)` pair for
    /// species in `[0, species_count)` must be present.
    pub fn read_csv(
        sites_path: &Path,
        labels_path: &Path,
        species_count: usize,
        grid: &EnvGrid,
        encoder: Option<LocationEncoder>,
    ) -> Result<Self> {
        #[derive(Deserialize)]
        struct SiteRow {
            site_id: usize,
            lon: f64,
            lat: f64,
        }
        #[derive(Deserialize)]
        struct LabelRow {
            site_id: usize,
            species_id: usize,
            label: u8,
        }
        let parse_err = |path: &Path, line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };

        let mut by_id = BTreeMap::new();
        let mut reader = csv::Reader::from_path(sites_path)?;
        for (i, row) in reader.deserialize::<SiteRow>().enumerate() {
            let row = row.map_err(|e| parse_err(sites_path, i + 2, e.to_string()))?;
            if by_id.insert(row.site_id, (row.lon, row.lat)).is_some() {
                return Err(parse_err(sites_path, i + 2, format!("duplicate site {}", row.site_id)));
            }
        }
        let ids: Vec<usize> = by_id.keys().copied().collect();
        let position: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let locations: Vec<(f64, f64)> = by_id.values().copied().collect();

        let mut labels = Array2::from_elem((locations.len(), species_count), false);
        let mut seen = Array2::from_elem((locations.len(), species_count), false);
        let mut reader = csv::Reader::from_path(labels_path)?;
        for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| parse_err(labels_path, line, e.to_string()))?;
            let site = *position
                .get(&row.site_id)
                .ok_or_else(|| parse_err(labels_path, line, format!("unknown site {}", row.site_id)))?;
            if row.species_id >= species_count {
                return Err(Error::InvalidSpecies { line });
            }
            if row.label > 1 {
                return Err(parse_err(labels_path, line, format!("label must be 0 or 1, got {}", row.label)));
            }
            labels[[site, row.species_id]] = row.label == 1;
            seen[[site, row.species_id]] = true;
        }
        if let Some(((site, species), _)) = seen.indexed_iter().find(|(_, &v)| !v) {
            return Err(parse_err(
                labels_path,
                0,
                format!("no label for site {} species {species}", ids[site]),
            ));
        }
        EvalSet::new(locations, labels, grid, encoder)
    }
}

/// Parses an occurrence CSV with header `lon,lat,species_id`.
pub fn load_occurrences_csv(path: &Path) -> Result<Vec<OccurrenceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_occurrences(file, path)
}

fn read_occurrences<R: std::io::Read>(input: R, path: &Path) -> Result<Vec<OccurrenceRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = reader.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != ["lon", "lat", "species_id"] {
        return Err(parse_err(1, format!("expected header lon,lat,species_id, got {}", names.join(","))));
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        if row.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, got {}", row.len())));
        }
        let coord = |k: usize| {
            row[k]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("{}: {e}", names[k])))
        };
        let lon = coord(0)?;
        let lat = coord(1)?;
        let species: i64 = row[2]
            .trim()
            .parse()
            .map_err(|_| Error::InvalidSpecies { line })?;
        if species < 0 {
            return Err(Error::InvalidSpecies { line });
        }
        if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::CoordinateOutOfRange { line, lon, lat });
        }
        records.push(OccurrenceRecord {
            lon,
            lat,
            species_id: species as usize,
        });
    }
    Ok(records)
}

pub fn write_occurrences_csv(path: &Path, records: &[OccurrenceRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["lon", "lat", "species_id"])?;
    for r in records {
        writer.write_record([r.lon.to_string(), r.lat.to_string(), r.species_id.to_string()])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Keeps at most `cap` records per species, chosen uniformly without
/// replacement. Surviving records keep their input order.
pub fn cap_per_species<R: Rng + ?Sized>(
    records: &[OccurrenceRecord],
    cap: usize,
    rng: &mut R,
) -> Result<Vec<OccurrenceRecord>> {
    if cap == 0 {
        return Err(Error::config("cap", "must be at least 1"));
    }
    let mut by_species: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_species.entry(r.species_id).or_default().push(i);
    }
    let mut keep = vec![false; records.len()];
    for indices in by_species.values() {
        if indices.len() <= cap {
            indices.iter().for_each(|&i| keep[i] = true);
        } else {
            for k in rand::seq::index::sample(rng, indices.len(), cap) {
                keep[indices[k]] = true;
            }
        }
    }
    Ok(records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| *r)
        .collect())
}

/// Counts presences per species. Every species in `[0, species_count)` must
/// have at least one record.
pub fn build_catalog(records: &[OccurrenceRecord], species_count: usize) -> Result<SpeciesCatalog> {
    let mut counts = vec![0usize; species_count];
    for (i, r) in records.iter().enumerate() {
        if r.species_id >= species_count {
            return Err(Error::config(
                "species_id",
                format!("record {i} has species {} but S = {species_count}", r.species_id),
            ));
        }
        counts[r.species_id] += 1;
    }
    SpeciesCatalog::from_counts(counts)
}

/// Environmental feature vector of the cell containing `(lon, lat)`.
pub fn extract_features(grid: &EnvGrid, lon: f64, lat: f64) -> Result<Vec<f64>> {
    let cell = grid.cell_index(lon, lat)?;
    Ok(grid.cell_features(cell).to_vec())
}

/// Input dimension `D` of feature vectors assembled from this grid.
pub fn feature_dim(grid: &EnvGrid, encoder: Option<LocationEncoder>) -> usize {
    grid.n_features() + encoder.map_or(0, |_| 4)
}

/// Location encoding (if enabled) followed by the environmental features.
pub fn site_features(grid: &EnvGrid, encoder: Option<LocationEncoder>, lon: f64, lat: f64) -> Result<Vec<f64>> {
    let env = grid.cell_features(grid.cell_index(lon, lat)?);
    let mut out = Vec::with_capacity(feature_dim(grid, encoder));
    if encoder.is_some() {
        out.extend_from_slice(&encode_location(lon, lat));
    }
    out.extend_from_slice(env);
    Ok(out)
}

/// Turns occurrence records into training samples plus the species catalog.
pub fn assemble_dataset(
    records: &[OccurrenceRecord],
    grid: &EnvGrid,
    encoder: Option<LocationEncoder>,
    species_count: usize,
) -> Result<(Vec<TrainSample>, SpeciesCatalog)> {
    let samples = records
        .iter()
        .map(|r| {
            Ok(TrainSample {
                features: site_features(grid, encoder, r.lon, r.lat)?,
                positive: r.species_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let catalog = build_catalog(records, species_count)?;
    Ok((samples, catalog))
}

/// A group of species whose presence count falls in `(lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBucket {
    /// Exclusive lower edge; `None` for the first bucket.
    pub lower: Option<usize>,
    /// Inclusive upper edge; `None` for the open-ended last bucket.
    pub upper: Option<usize>,
    pub species: Vec<usize>,
}

impl FrequencyBucket {
    pub fn label(&self) -> String {
        match (self.lower, self.upper) {
            (None, Some(u)) => format!("<={u}"),
            (Some(l), Some(u)) => format!("({l},{u}]"),
            (Some(l), None) => format!(">{l}"),
            (None, None) => "all".to_string(),
        }
    }
}

/// Partitions species into `edges.len() + 1` buckets by training count.
/// A species goes to the first bucket whose upper edge is at least its count.
pub fn group_by_frequency(catalog: &SpeciesCatalog, edges: &[usize]) -> Result<Vec<FrequencyBucket>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("bucket_edges", "must be strictly ascending"));
    }
    let mut buckets: Vec<FrequencyBucket> = (0..=edges.len())
        .map(|i| FrequencyBucket {
            lower: i.checked_sub(1).map(|j| edges[j]),
            upper: edges.get(i).copied(),
            species: Vec::new(),
        })
        .collect();
    for (s, &count) in catalog.counts().iter().enumerate() {
        let b = edges.iter().position(|&e| count <= e).unwrap_or(edges.len());
        buckets[b].species.push(s);
    }
    Ok(buckets)
}

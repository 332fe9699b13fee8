//! Tabular multi-channel data: CSV ingestion, export and standardization.
//!
//! A channel file is UTF-8 CSV with a header row. The first column holds the
//! sample id and every other column one feature; decimals use `.`. Numbers
//! are written in scientific notation with 17 significant digits, which
//! parses back to the identical `f64`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::synthetic::{ScenarioSpec, SyntheticDataset};

/// File name of the manifest written next to exported channel files.
pub const MANIFEST_FILE: &str = "dataset.json";
/// File name of the ground-truth sidecar of exported synthetic data.
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Formats a value with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-feature shift and scale applied to one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelData {
    pub name: String,
    pub features: Vec<String>,
    /// `S x d`, rows in the order of the dataset ids.
    pub values: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiChannelDataset {
    pub ids: Vec<String>,
    pub channels: Vec<ChannelData>,
    /// One record per channel once standardized.
    pub standardization: Option<Vec<Standardization>>,
}

impl MultiChannelDataset {
    /// Wraps matrices with generated ids (`s00001`, …) and feature names.
    pub fn from_matrices(names: &[String], matrices: &[Matrix]) -> Result<Self> {
        if names.len() != matrices.len() || matrices.is_empty() {
            return Err(Error::Shape(format!(
                "{} names for {} channels",
                names.len(),
                matrices.len()
            )));
        }
        let s = matrices[0].rows();
        let width = s.max(1).to_string().len();
        let ids = (1..=s).map(|k| format!("s{k:0width$}")).collect();
        let channels = names
            .iter()
            .zip(matrices)
            .map(|(name, m)| ChannelData {
                name: name.clone(),
                features: (1..=m.cols()).map(|j| format!("{name}_f{j}")).collect(),
                values: m.clone(),
            })
            .collect();
        let ds = Self {
            ids,
            channels,
            standardization: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.ids.len();
        for ch in &self.channels {
            if ch.values.rows() != s {
                return Err(Error::Channel {
                    channel: ch.name.clone(),
                    message: format!("{} rows for {s} sample ids", ch.values.rows()),
                });
            }
            if ch.features.len() != ch.values.cols() {
                return Err(Error::Channel {
                    channel: ch.name.clone(),
                    message: format!(
                        "{} feature names for {} columns",
                        ch.features.len(),
                        ch.values.cols()
                    ),
                });
            }
        }
        if let Some(records) = &self.standardization {
            if records.len() != self.channels.len() {
                return Err(Error::Shape("one standardization record per channel".into()));
            }
            for (r, ch) in records.iter().zip(&self.channels) {
                if r.std.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Channel {
                        channel: ch.name.clone(),
                        message: "non-positive standard deviation in record".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.ids.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn matrices(&self) -> Vec<Matrix> {
        self.channels.iter().map(|c| c.values.clone()).collect()
    }

    /// Row positions of the given ids.
    pub fn rows_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        let index: BTreeMap<&str, usize> =
            self.ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown sample id {id:?}")))
            })
            .collect()
    }
}

fn parse_err(path: &Path, e: csv::Error) -> Error {
    Error::parse(path, e.to_string())
}

/// Contents of one channel file: sample ids, feature names and rows.
type ChannelFile = (Vec<String>, Vec<String>, Vec<Vec<f64>>);

fn read_channel(path: &Path) -> Result<ChannelFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(Error::parse(path, "empty file"));
    }
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(Error::parse(path, "header needs an id column and at least one feature"));
    }
    let features: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, e))?;
        let line = r + 2;
        let id = record[0].trim().to_string();
        let mut row = Vec::with_capacity(features.len());
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::parse(
                    path,
                    format!("row {line}, column {:?}: {cell:?} is not a number", features[j]),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    format!("row {line}, column {:?}: non-finite value", features[j]),
                ));
            }
            row.push(v);
        }
        ids.push(id);
        rows.push(row);
    }
    if ids.is_empty() {
        return Err(Error::parse(path, "no data rows"));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::parse(path, format!("duplicate sample id {dup:?}")));
    }
    Ok((ids, features, rows))
}

fn channel_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads channel files and aligns their rows by sorted sample id. Each
/// channel is named after its file stem.
pub fn load_channels<P: AsRef<Path>>(paths: &[P]) -> Result<MultiChannelDataset> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no channel files given".into()));
    }
    let mut loaded = Vec::with_capacity(paths.len());
    for p in paths {
        let path = p.as_ref();
        loaded.push((path.to_path_buf(), read_channel(path)?));
    }
    let mut ids: Vec<String> = loaded[0].1 .0.clone();
    ids.sort();
    let reference: BTreeSet<&String> = ids.iter().collect();
    for (path, (other, _, _)) in &loaded[1..] {
        let other: BTreeSet<&String> = other.iter().collect();
        let missing: Vec<&str> = reference.difference(&other).map(|s| s.as_str()).collect();
        let extra: Vec<&str> = other.difference(&reference).map(|s| s.as_str()).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Channel {
                channel: channel_name(path),
                message: format!(
                    "sample ids differ from {}: missing {missing:?}, unexpected {extra:?}",
                    loaded[0].0.display()
                ),
            });
        }
    }
    let mut channels = Vec::with_capacity(loaded.len());
    for (path, (file_ids, features, rows)) in loaded {
        let pos: BTreeMap<&str, usize> =
            file_ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
        let mut data = Vec::with_capacity(ids.len() * features.len());
        for id in &ids {
            data.extend_from_slice(&rows[pos[id.as_str()]]);
        }
        channels.push(ChannelData {
            name: channel_name(&path),
            values: Matrix::from_vec(ids.len(), features.len(), data)?,
            features,
        });
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = channels.iter().find(|c| !seen.insert(c.name.clone())) {
        return Err(Error::InvalidArgument(format!("two channel files named {:?}", dup.name)));
    }
    Ok(MultiChannelDataset {
        ids,
        channels,
        standardization: None,
    })
}

/// Writes one channel in the format read by [`load_channels`].
pub fn write_channel_csv(path: &Path, ids: &[String], features: &[String], values: &Matrix) -> Result<()> {
    if ids.len() != values.rows() || features.len() != values.cols() {
        return Err(Error::Shape(format!(
            "{} ids and {} features for a {}x{} matrix",
            ids.len(),
            features.len(),
            values.rows(),
            values.cols()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e))?;
    let mut header = vec!["id".to_string()];
    header.extend_from_slice(features);
    w.write_record(&header).map_err(|e| parse_err(path, e))?;
    for (k, id) in ids.iter().enumerate() {
        let mut rec = Vec::with_capacity(features.len() + 1);
        rec.push(id.clone());
        rec.extend(values.row(k).iter().map(|&v| format_f64(v)));
        w.write_record(&rec).map_err(|e| parse_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every channel as `<dir>/<name>.csv` and returns the paths.
pub fn write_dataset(ds: &MultiChannelDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.channels
        .iter()
        .map(|ch| {
            let path = dir.join(format!("{}.csv", ch.name));
            write_channel_csv(&path, &ds.ids, &ch.features, &ch.values)?;
            Ok(path)
        })
        .collect()
}

/// Centers each feature and divides by its population standard deviation.
pub fn standardize(ds: &MultiChannelDataset) -> Result<MultiChannelDataset> {
    if ds.standardization.is_some() {
        return Err(Error::InvalidArgument("dataset is already standardized".into()));
    }
    let n = ds.samples() as f64;
    let mut out = ds.clone();
    let mut records = Vec::with_capacity(ds.channels.len());
    for ch in &mut out.channels {
        let (rows, cols) = ch.values.shape();
        let mean = ch.values.col_means();
        let mut std = vec![0.0; cols];
        for k in 0..rows {
            for (j, s) in std.iter_mut().enumerate() {
                let d = ch.values.get(k, j) - mean[j];
                *s += d * d;
            }
        }
        for (j, s) in std.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            // a feature whose spread is at rounding level is constant
            if !(*s > 1e-12 * mean[j].abs().max(f64::MIN_POSITIVE)) {
                return Err(Error::Channel {
                    channel: ch.name.clone(),
                    message: format!("feature {:?} has zero variance", ch.features[j]),
                });
            }
        }
        for k in 0..rows {
            for (j, v) in ch.values.row_mut(k).iter_mut().enumerate() {
                *v = (*v - mean[j]) / std[j];
            }
        }
        records.push(Standardization { mean, std });
    }
    out.standardization = Some(records);
    Ok(out)
}

/// Applies an existing record to new data, e.g. held-out samples.
pub fn apply_standardization(ds: &MultiChannelDataset, records: &[Standardization]) -> Result<MultiChannelDataset> {
    transform(ds, records, |v, m, s| (v - m) / s).map(|mut out| {
        out.standardization = Some(records.to_vec());
        out
    })
}

/// Undoes [`standardize`].
pub fn inverse_standardize(ds: &MultiChannelDataset) -> Result<MultiChannelDataset> {
    let records = ds
        .standardization
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dataset is not standardized".into()))?;
    let mut out = transform(ds, records, |v, m, s| v * s + m)?;
    out.standardization = None;
    Ok(out)
}

fn transform(
    ds: &MultiChannelDataset,
    records: &[Standardization],
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<MultiChannelDataset> {
    if records.len() != ds.channels.len() {
        return Err(Error::Shape(format!(
            "{} standardization records for {} channels",
            records.len(),
            ds.channels.len()
        )));
    }
    let mut out = ds.clone();
    for (ch, r) in out.channels.iter_mut().zip(records) {
        if r.mean.len() != ch.values.cols() || r.std.len() != ch.values.cols() {
            return Err(Error::Channel {
                channel: ch.name.clone(),
                message: format!("standardization record has the wrong width for {} features", ch.values.cols()),
            });
        }
        for k in 0..ch.values.rows() {
            for (j, v) in ch.values.row_mut(k).iter_mut().enumerate() {
                *v = f(*v, r.mean[j], r.std[j]);
            }
        }
    }
    Ok(out)
}

/// Generating quantities of an exported synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: ScenarioSpec,
    pub ids: Vec<String>,
    /// `S x l` latent draws.
    pub latent: Matrix,
    /// `d x l` map per channel.
    pub maps: Vec<Matrix>,
    pub noise_scale: f64,
}

impl GroundTruth {
    /// Noiseless signal `z Gᵀ` of every channel.
    pub fn signals(&self) -> Result<Vec<Matrix>> {
        self.maps
            .iter()
            .map(|g| crate::linalg::matmul_bt(&self.latent, g))
            .collect()
    }
}

/// Lists the channel files of a directory in channel order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub channels: Vec<String>,
    #[serde(default)]
    pub ground_truth: Option<String>,
}

/// Channel names used for exported synthetic data.
pub fn synthetic_names(channels: usize) -> Vec<String> {
    crate::optim::default_names(channels)
}

/// Wraps a synthetic dataset with ids and names.
pub fn synthetic_to_dataset(ds: &SyntheticDataset) -> Result<MultiChannelDataset> {
    MultiChannelDataset::from_matrices(&synthetic_names(ds.channels.len()), &ds.channels)
}

/// Writes the channel files, the manifest and the ground-truth sidecar.
pub fn export_synthetic(ds: &SyntheticDataset, dir: &Path) -> Result<MultiChannelDataset> {
    let table = synthetic_to_dataset(ds)?;
    write_dataset(&table, dir)?;
    let truth = GroundTruth {
        spec: ds.spec.clone(),
        ids: table.ids.clone(),
        latent: ds.latent.clone(),
        maps: ds.maps.clone(),
        noise_scale: ds.noise_scale,
    };
    write_json(&dir.join(GROUND_TRUTH_FILE), &truth)?;
    let manifest = Manifest {
        channels: table.channels.iter().map(|c| format!("{}.csv", c.name)).collect(),
        ground_truth: Some(GROUND_TRUTH_FILE.to_string()),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(table)
}

/// Loads a data directory: the channels listed in its manifest, or every
/// `*.csv` file in name order when there is no manifest.
pub fn load_dir(dir: &Path) -> Result<(MultiChannelDataset, Option<GroundTruth>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let manifest: Manifest = read_json(&manifest_path)?;
        let paths: Vec<PathBuf> = manifest.channels.iter().map(|c| dir.join(c)).collect();
        let ds = load_channels(&paths)?;
        let truth = match &manifest.ground_truth {
            Some(f) => Some(read_json::<GroundTruth>(&dir.join(f))?),
            None => None,
        };
        if let Some(t) = &truth {
            if t.ids.len() != ds.samples() {
                return Err(Error::parse(dir.join(GROUND_TRUTH_FILE), "sample count differs from the channels"));
            }
        }
        return Ok((ds, truth));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::parse(dir, "no channel CSV files"));
    }
    Ok((load_channels(&paths)?, None))
}

/// Reads a two-column `id,class` file and returns the class of each of
/// `ids`, in order.
pub fn load_labels(path: &Path, ids: &[String]) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(path, e))?;
    if header.len() != 2 {
        return Err(Error::parse(path, "labels need exactly two columns: id,class"));
    }
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(path, e))?;
        if map
            .insert(record[0].trim().to_string(), record[1].trim().to_string())
            .is_some()
        {
            return Err(Error::parse(path, format!("duplicate id {:?}", &record[0])));
        }
    }
    let missing: Vec<&str> = ids
        .iter()
        .filter(|id| !map.contains_key(*id))
        .map(|s| s.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::parse(path, format!("no label for ids {missing:?}")));
    }
    Ok(ids.iter().map(|id| map[id].clone()).collect())
}

pub fn write_labels(path: &Path, ids: &[String], labels: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e))?;
    w.write_record(["id", "class"]).map_err(|e| parse_err(path, e))?;
    for (id, l) in ids.iter().zip(labels) {
        w.write_record([id, l]).map_err(|e| parse_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_scenario;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn rows_are_aligned_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "id,x,y\nb,2,20\na,1,10\nc,3,30\n");
        let b = write(dir.path(), "b.csv", "id,u\nc,-3\na,-1\nb,-2\n");
        let ds = load_channels(&[a, b]).unwrap();
        assert_eq!(ds.ids, vec!["a", "b", "c"]);
        assert_eq!(ds.channels[0].values.row(1), &[2.0, 20.0]);
        assert_eq!(ds.channels[1].values.col(0), vec![-1.0, -2.0, -3.0]);
        assert_eq!(ds.names(), vec!["a", "b"]);
        assert_eq!(ds.channels[0].features, vec!["x", "y"]);
    }

    #[test]
    fn mismatched_ids_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "id,x\na,1\nb,2\nc,3\n");
        let b = write(dir.path(), "b.csv", "id,u\na,1\nb,2\n");
        let err = load_channels(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("\"c\"") && err.contains('b'), "{err}");
    }

    #[test]
    fn bad_cells_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "id,x,y\na,1,2\nb,oops,3\n");
        let err = load_channels(&[a]).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("\"x\"") && err.contains("oops"), "{err}");
        let e = write(dir.path(), "e.csv", "");
        assert!(load_channels(&[e]).unwrap_err().to_string().contains("empty"));
        let h = write(dir.path(), "h.csv", "id,x\n");
        assert!(load_channels(&[h]).is_err());
        let d = write(dir.path(), "d.csv", "id,x\na,1\na,2\n");
        assert!(load_channels(&[d]).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn export_then_load_is_bit_exact() {
        let spec = ScenarioSpec {
            channels: 2,
            dim: 5,
            latent_dim: 2,
            samples: 40,
            snr: 3.0,
            replication: 2,
        };
        let ds = generate_scenario(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_synthetic(&ds, dir.path()).unwrap();
        let (back, truth) = load_dir(dir.path()).unwrap();
        for (c, x) in ds.channels.iter().enumerate() {
            assert_eq!(back.channels[c].values.as_slice(), x.as_slice());
        }
        let truth = truth.unwrap();
        assert_eq!(truth.latent, ds.latent);
        assert_eq!(truth.signals().unwrap(), ds.signals);
    }

    #[test]
    fn extreme_values_round_trip() {
        let vals = [
            0.1,
            1.0 / 3.0,
            -2.0f64.powi(-1074),
            f64::MAX,
            f64::MIN_POSITIVE,
            123456789.123456789,
            -0.0,
        ];
        for v in vals {
            assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn standardize_moments_and_inverse() {
        let spec = ScenarioSpec {
            channels: 2,
            dim: 3,
            latent_dim: 1,
            samples: 200,
            snr: 1.0,
            replication: 1,
        };
        let raw = synthetic_to_dataset(&generate_scenario(&spec).unwrap()).unwrap();
        let mut shifted = raw.clone();
        shifted.channels[0].values = raw.channels[0].values.map(|v| 50.0 + 7.0 * v);
        let z = standardize(&shifted).unwrap();
        for ch in &z.channels {
            for j in 0..ch.values.cols() {
                let col = ch.values.col(j);
                let m = col.iter().sum::<f64>() / 200.0;
                let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 200.0).sqrt();
                assert!(m.abs() <= 1e-12);
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
        let back = inverse_standardize(&z).unwrap();
        for (a, b) in back.channels.iter().zip(&shifted.channels) {
            assert!(a.values.max_abs_diff(&b.values) <= 1e-10);
        }
        assert!(standardize(&z).is_err());
    }

    #[test]
    fn constant_feature_is_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let ds = MultiChannelDataset::from_matrices(&["ch".into()], &[m]).unwrap();
        let err = standardize(&ds).unwrap_err().to_string();
        assert!(err.contains("ch_f2"), "{err}");
    }

    #[test]
    fn labels_follow_dataset_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "labels.csv", "id,class\nb,AD\na,CN\n");
        let ids = vec!["a".to_string(), "b".to_string()];
        assert_eq!(load_labels(&p, &ids).unwrap(), vec!["CN", "AD"]);
        let more = vec!["a".to_string(), "z".to_string()];
        assert!(load_labels(&p, &more).unwrap_err().to_string().contains("\"z\""));
    }
}

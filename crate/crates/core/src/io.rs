//! File formats: Newick trees, curve and coefficient CSVs, JSON metadata.
//!
//! Every writer goes through a temporary file in the target directory
//! followed by a rename, so readers never observe a partial file.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::ancestor::FunctionValuedPosterior;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::simcore::{unit_grid, BasisSet, FunctionalDataset};
use crate::tree::{parse_newick, Phylogeny};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<S: Serialize + ?Sized>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<D: DeserializeOwned>(path: impl AsRef<Path>) -> Result<D> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_tree<T: Real>(path: impl AsRef<Path>, t: &Phylogeny<T>) -> Result<()> {
    let mut text = t.to_newick();
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_tree<T: Real>(path: impl AsRef<Path>) -> Result<Phylogeny<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let t = parse_newick(&text)?;
    if t.has_missing_lengths() {
        log::warn!("{}: missing branch lengths were set to 0", path.display());
    }
    Ok(t)
}

/// Labeled table: header `first,prefix_1,...,prefix_m`, one row per label.
fn write_table<T: Real>(
    path: &Path,
    first: &str,
    prefix: &str,
    labels: &[String],
    values: ArrayView2<'_, T>,
) -> Result<()> {
    if labels.len() != values.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            values.nrows()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![first.to_string()];
    header.extend((1..=values.ncols()).map(|j| format!("{prefix}_{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (label, row) in labels.iter().zip(values.rows()) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn read_table<T: Real>(path: &Path, first: &str, prefix: &str) -> Result<(Vec<String>, Array2<T>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected: Vec<String> = std::iter::once(first.to_string())
        .chain((1..header.len()).map(|j| format!("{prefix}_{j}")))
        .collect();
    if header.len() < 2 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format(format!(
            "{}: expected header `{first},{prefix}_1,...`, found `{}`",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let m = header.len() - 1;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        labels.push(rec[0].to_string());
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!(
                    "{}: row {}, column {}: `{field}` is not a number",
                    path.display(),
                    i + 1,
                    j + 2
                ))
            })?;
            values.push(T::lit(v));
        }
    }
    let n = labels.len();
    let values = Array2::from_shape_vec((n, m), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok((labels, values))
}

/// Header `taxon,x_1,...,x_G`.
pub fn write_dataset<T: Real>(path: impl AsRef<Path>, d: &FunctionalDataset<T>) -> Result<()> {
    write_table(path.as_ref(), "taxon", "x", &d.taxa, d.traits.view())
}

/// Reads a dataset written by [`write_dataset`]; the grid is taken to be
/// equispaced on `[0, 1]`.
pub fn read_dataset<T: Real>(path: impl AsRef<Path>) -> Result<FunctionalDataset<T>> {
    let (taxa, traits) = read_table(path.as_ref(), "taxon", "x")?;
    let g = traits.ncols();
    FunctionalDataset::new(traits, taxa, unit_grid(g))
}

/// Mixing coefficients `k × n` stored one taxon per line: `taxon,c_1,...,c_k`.
pub fn write_mixing<T: Real>(path: impl AsRef<Path>, taxa: &[String], values: ArrayView2<'_, T>) -> Result<()> {
    write_table(path.as_ref(), "taxon", "c", taxa, values.t())
}

/// Inverse of [`write_mixing`]: returns the taxa and the `k × n` matrix.
pub fn read_mixing<T: Real>(path: impl AsRef<Path>) -> Result<(Vec<String>, Array2<T>)> {
    let (taxa, v) = read_table(path.as_ref(), "taxon", "c")?;
    Ok((taxa, v.reversed_axes().as_standard_layout().to_owned()))
}

/// Basis `k × G`: header `basis,x_1,...,x_G`, rows `phi_1..phi_k`.
pub fn write_basis<T: Real>(path: impl AsRef<Path>, b: &BasisSet<T>) -> Result<()> {
    let names: Vec<String> = (1..=b.k()).map(|i| format!("phi_{i}")).collect();
    write_table(path.as_ref(), "basis", "x", &names, b.functions.view())
}

pub fn read_basis<T: Real>(path: impl AsRef<Path>) -> Result<BasisSet<T>> {
    let (_, f) = read_table(path.as_ref(), "basis", "x")?;
    let g = f.ncols();
    BasisSet::new(f, unit_grid(g))
}

/// Plain numeric columns, one header name per column.
pub fn write_columns<T: Real>(path: impl AsRef<Path>, names: &[&str], columns: &[Array1<T>]) -> Result<()> {
    let path = path.as_ref();
    let n = columns.first().map_or(0, |c| c.len());
    if names.len() != columns.len() || columns.iter().any(|c| c.len() != n) {
        return Err(Error::DimensionMismatch("ragged columns".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(names).map_err(|e| csv_err(path, e))?;
    for i in 0..n {
        w.write_record(columns.iter().map(|c| c[i].to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Columns `x,mean,phylo_sd,nonphylo_sd`; the last is zero away from tips.
pub fn write_posterior<T: Real>(path: impl AsRef<Path>, p: &FunctionValuedPosterior<T>) -> Result<()> {
    let x = Array1::from(p.grid.clone());
    let nonphylo = p.nonphylo_sd().unwrap_or_else(|| Array1::zeros(x.len()));
    write_columns(
        path,
        &["x", "mean", "phylo_sd", "nonphylo_sd"],
        &[x, p.mean_curve.clone(), p.phylo_sd(), nonphylo],
    )
}

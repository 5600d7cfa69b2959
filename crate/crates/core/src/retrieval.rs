//! Descriptor retrieval: ranking a gallery for a query and the Recall@K,
//! R-Precision and mAP metrics over a query set.
//!
//! Average precision is the interpolation-free mean of precision at the rank
//! of every relevant item. Scores tie-break by ascending id, so rankings are
//! fully deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{format_float, write_atomic};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::invalid(format!("unknown metric {other:?}, expected cosine or euclidean"))),
        }
    }
}

/// `M` labelled descriptors of dimension `D` with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    descriptors: Tensor,
    labels: Vec<i64>,
    ids: Vec<u64>,
}

impl DescriptorSet {
    pub fn new(descriptors: Tensor, labels: Vec<i64>, ids: Vec<u64>) -> Result<Self> {
        if descriptors.rank() != 2 {
            return Err(Error::invalid(format!("descriptors must be [M, D], got {:?}", descriptors.dims())));
        }
        let m = descriptors.dims()[0];
        if m < 2 {
            return Err(Error::invalid(format!("a descriptor set needs at least 2 items, got {m}")));
        }
        if labels.len() != m || ids.len() != m {
            return Err(Error::invalid(format!(
                "{m} descriptors but {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(m);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!("duplicate id {dup}")));
        }
        Ok(DescriptorSet {
            descriptors,
            labels,
            ids,
        })
    }

    /// Ids `0..M`.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<i64>) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("descriptor rows have different lengths"));
        }
        let t = Tensor::new(vec![m, d], rows.concat())?;
        Self::new(t, labels, (0..m as u64).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.dims()[1]
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        self.descriptors.row(i)
    }

    pub fn descriptors(&self) -> &Tensor {
        &self.descriptors
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gallery indices, best match first.
fn rank_indices(query: &[f64], gallery: &DescriptorSet, metric: Metric) -> Result<Vec<usize>> {
    if query.len() != gallery.dim() {
        return Err(Error::invalid(format!(
            "query has dimension {}, gallery {}",
            query.len(),
            gallery.dim()
        )));
    }
    // Larger key is better for both metrics.
    let keys: Vec<f64> = match metric {
        Metric::Cosine => {
            let qn = norm(query);
            if qn == 0.0 {
                return Err(Error::invalid("cosine ranking needs a nonzero query"));
            }
            (0..gallery.len())
                .map(|i| {
                    let g = gallery.descriptor(i);
                    let gn = norm(g);
                    if gn == 0.0 {
                        return Err(Error::invalid(format!("gallery item {} has zero norm", gallery.ids[i])));
                    }
                    Ok(dot(query, g) / (qn * gn))
                })
                .collect::<Result<_>>()?
        }
        Metric::Euclidean => (0..gallery.len())
            .map(|i| {
                let d2: f64 = query
                    .iter()
                    .zip(gallery.descriptor(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                -d2
            })
            .collect(),
    };
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| match keys[b].total_cmp(&keys[a]) {
        Ordering::Equal => gallery.ids[a].cmp(&gallery.ids[b]),
        o => o,
    });
    Ok(order)
}

/// Gallery ids sorted by similarity, ties by ascending id.
pub fn rank_gallery(query: &[f64], gallery: &DescriptorSet, metric: Metric) -> Result<Vec<u64>> {
    Ok(rank_indices(query, gallery, metric)?
        .into_iter()
        .map(|i| gallery.ids[i])
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u64,
    pub label: i64,
    /// Same-label gallery items, excluding the query itself when requested.
    pub relevant: usize,
    /// 1-based rank of the first relevant item; `None` for skipped queries.
    pub first_hit: Option<usize>,
    pub r_precision: Option<f64>,
    pub average_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub metric: Metric,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub r_precision: f64,
    pub map_score: f64,
    /// Queries that contributed to the scores.
    pub evaluated: usize,
    /// Queries with no relevant gallery item.
    pub skipped: usize,
    pub per_query: Vec<QueryRecord>,
}

fn same_set(a: &DescriptorSet, b: &DescriptorSet) -> bool {
    a.ids == b.ids && a.descriptors == b.descriptors
}

/// Scores every query against the gallery and macro-averages over the
/// queries that have at least one relevant item.
pub fn evaluate(
    queries: &DescriptorSet,
    gallery: &DescriptorSet,
    ks: &[usize],
    self_exclude: bool,
    metric: Metric,
) -> Result<RetrievalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks must be a non-empty list of positive ranks"));
    }
    if queries.dim() != gallery.dim() {
        return Err(Error::invalid(format!(
            "query dimension {} differs from gallery dimension {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    if !self_exclude && same_set(queries, gallery) {
        return Err(Error::invalid(
            "queries and gallery are the same set; enable self exclusion",
        ));
    }

    let per_query: Vec<QueryRecord> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let (id, label) = (queries.ids[q], queries.labels[q]);
            let order = rank_indices(queries.descriptor(q), gallery, metric)?;
            let hits: Vec<bool> = order
                .into_iter()
                .filter(|&g| !(self_exclude && gallery.ids[g] == id))
                .map(|g| gallery.labels[g] == label)
                .collect();
            let relevant = hits.iter().filter(|&&h| h).count();
            if relevant == 0 {
                return Ok(QueryRecord {
                    id,
                    label,
                    relevant,
                    first_hit: None,
                    r_precision: None,
                    average_precision: None,
                });
            }
            let first_hit = hits.iter().position(|&h| h).map(|p| p + 1);
            let in_top_r = hits[..relevant].iter().filter(|&&h| h).count();
            let mut found = 0usize;
            let mut precision_sum = 0.0;
            for (rank, _) in hits.iter().enumerate().filter(|(_, &h)| h) {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
            Ok(QueryRecord {
                id,
                label,
                relevant,
                first_hit,
                r_precision: Some(in_top_r as f64 / relevant as f64),
                average_precision: Some(precision_sum / relevant as f64),
            })
        })
        .collect::<Result<_>>()?;

    let scored: Vec<&QueryRecord> = per_query.iter().filter(|r| r.first_hit.is_some()).collect();
    let skipped = per_query.len() - scored.len();
    if scored.is_empty() {
        return Err(Error::invalid("no query label appears in the gallery"));
    }
    if skipped > 0 {
        log::warn!("{skipped} queries have no relevant gallery item and were skipped");
    }
    let n = scored.len() as f64;
    let mut recall_at_k = BTreeMap::new();
    for &k in ks {
        let hit = scored.iter().filter(|r| r.first_hit.is_some_and(|f| f <= k)).count();
        recall_at_k.insert(k, hit as f64 / n);
    }
    let r_precision = scored.iter().map(|r| r.r_precision.unwrap_or(0.0)).sum::<f64>() / n;
    let map_score = scored.iter().map(|r| r.average_precision.unwrap_or(0.0)).sum::<f64>() / n;
    Ok(RetrievalReport {
        metric,
        recall_at_k,
        r_precision,
        map_score,
        evaluated: scored.len(),
        skipped,
        per_query,
    })
}

/// CSV text with header `id,label,d0..d{D-1}`.
pub fn descriptors_to_csv(set: &DescriptorSet) -> String {
    let rows: Vec<&[f64]> = (0..set.len()).map(|i| set.descriptor(i)).collect();
    descriptor_rows_to_csv(&set.ids, &set.labels, &rows)
}

/// Same format as [`descriptors_to_csv`] without the set invariants, for
/// writers that may emit a single row.
pub fn descriptor_rows_to_csv(ids: &[u64], labels: &[i64], rows: &[&[f64]]) -> String {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut out = String::from("id,label");
    for d in 0..dim {
        out.push_str(&format!(",d{d}"));
    }
    out.push('\n');
    for ((id, label), row) in ids.iter().zip(labels).zip(rows) {
        out.push_str(&format!("{id},{label}"));
        for &v in row.iter() {
            out.push(',');
            out.push_str(&format_float(v));
        }
        out.push('\n');
    }
    out
}

/// Parses descriptor CSV; `source` names the input in error messages.
pub fn descriptors_from_csv(text: &str, source: &str) -> Result<DescriptorSet> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let dim = header.len().saturating_sub(2);
    let expected: Vec<String> = ["id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..dim).map(|d| format!("d{d}")))
        .collect();
    if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(1, "header must be id,label,d0,d1,...".into()));
    }
    let (mut ids, mut labels, mut values) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        ids.push(record[0].parse::<u64>().map_err(|_| parse_err(line, format!("bad id {:?}", &record[0])))?);
        labels.push(record[1].parse::<i64>().map_err(|_| parse_err(line, format!("bad label {:?}", &record[1])))?);
        for (d, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field.parse().map_err(|_| parse_err(line, format!("bad value {field:?} in d{d}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value in d{d}")));
            }
            values.push(v);
        }
    }
    let m = ids.len();
    let t = Tensor::new(vec![m, dim], values).map_err(|e| parse_err(0, e.to_string()))?;
    DescriptorSet::new(t, labels, ids).map_err(|e| parse_err(0, e.to_string()))
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    descriptors_from_csv(&text, &path.display().to_string())
}

pub fn write_descriptors(path: &Path, set: &DescriptorSet) -> Result<()> {
    write_atomic(path, descriptors_to_csv(set).as_bytes())
}

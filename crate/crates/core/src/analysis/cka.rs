//! Linear-kernel CKA and the HSIC estimator it normalizes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, pairwise_sum, Tensor};
use crate::vit::AttentionRecord;

/// Below this ratio of centered to raw self-HSIC a representation counts as
/// constant across samples (relative spread under about 1e-6).
const DEGENERATE_RATIO: f64 = 1e-24;

/// `s × s` symmetric Gram matrix over `s` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    size: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    /// `X Xᵀ` for an `[s, n]` representation.
    pub fn linear(x: &Tensor) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::invalid(format!("representation must be [samples, features], got {:?}", x.dims())));
        }
        let (s, n) = (x.dims()[0], x.dims()[1]);
        let mut values = matmul_nt(x.data(), x.data(), s, n, s);
        // Mirror the upper triangle so the matrix is exactly symmetric.
        for i in 0..s {
            for j in 0..i {
                values[i * s + j] = values[j * s + i];
            }
        }
        Ok(GramMatrix { size: s, values })
    }

    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size || size == 0 {
            return Err(Error::invalid(format!("{} values for a {size}×{size} Gram matrix", values.len())));
        }
        for i in 0..size {
            for j in 0..i {
                let (a, b) = (values[i * size + j], values[j * size + i]);
                if (a - b).abs() > 1e-10 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::invalid(format!("Gram matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(GramMatrix { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    /// `Hc K Hc` with `Hc = I − (1/s) 11ᵀ`.
    fn double_centered(&self) -> Vec<f64> {
        let s = self.size;
        let inv = 1.0 / s as f64;
        let row_means: Vec<f64> = self.values.chunks(s).map(|r| pairwise_sum(r) * inv).collect();
        let grand = pairwise_sum(&row_means) * inv;
        let mut out = Vec::with_capacity(s * s);
        for i in 0..s {
            for j in 0..s {
                // Symmetric input: column means equal row means.
                out.push(self.values[i * s + j] - row_means[i] - row_means[j] + grand);
            }
        }
        out
    }
}

/// `trace(K Hc L Hc) / (s − 1)²`, computed as the elementwise product of
/// the two double-centered matrices, which makes it exactly symmetric in
/// its arguments.
pub fn hsic(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    if k.size != l.size {
        return Err(Error::invalid(format!("Gram sizes differ: {} vs {}", k.size, l.size)));
    }
    if k.size < 2 {
        return Err(Error::invalid("hsic needs at least 2 samples"));
    }
    Ok(centered_product(&k.double_centered(), &l.double_centered(), k.size))
}

fn centered_product(kc: &[f64], lc: &[f64], s: usize) -> f64 {
    let products: Vec<f64> = kc.iter().zip(lc).map(|(a, b)| a * b).collect();
    let denom = (s - 1) as f64;
    pairwise_sum(&products) / (denom * denom)
}

/// Linear CKA between two `[s, ·]` representations of the same samples.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (kx, ky) = (GramMatrix::linear(x)?, GramMatrix::linear(y)?);
    if kx.size != ky.size {
        return Err(Error::invalid(format!("sample counts differ: {} vs {}", kx.size, ky.size)));
    }
    if kx.size < 3 {
        return Err(Error::invalid(format!("cka needs at least 3 samples, got {}", kx.size)));
    }
    let s = kx.size;
    let (xc, yc) = (kx.double_centered(), ky.double_centered());
    let hxx = centered_product(&xc, &xc, s);
    let hyy = centered_product(&yc, &yc, s);
    for (name, h, g) in [("first", hxx, &kx), ("second", hyy, &ky)] {
        let raw = centered_product(&g.values, &g.values, s);
        if !(h > DEGENERATE_RATIO * raw) {
            return Err(Error::DegenerateInput(format!(
                "{name} representation is constant across samples"
            )));
        }
    }
    let hxy = centered_product(&xc, &yc, s);
    Ok((hxy / (hxx * hyy).sqrt()).max(0.0))
}

/// Inter-head CKA for one block, averaged over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSimilarityReport {
    pub block: usize,
    pub images: usize,
    /// `heads × heads`; `None` where every image was skipped for that pair.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Mean CKA of each head to the other heads.
    pub per_head_mean: Vec<Option<f64>>,
    /// Mean of the per-head means.
    pub overall_mean: Option<f64>,
    /// Image-pair evaluations skipped for a constant head representation.
    pub skipped_pairs: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| pairwise_sum(&v) / v.len() as f64)
}

pub(crate) fn check_records(records: &[AttentionRecord], block: usize) -> Result<usize> {
    let first = records.first().ok_or_else(|| Error::invalid("no attention records"))?;
    if block >= first.blocks.len() {
        return Err(Error::invalid(format!(
            "block {block} out of range for a {}-block model",
            first.blocks.len()
        )));
    }
    let heads = first.heads();
    for (i, r) in records.iter().enumerate() {
        if r.blocks.len() != first.blocks.len()
            || r.grid_side != first.grid_side
            || r.blocks[block].attention.len() != heads
            || r.blocks[block].head_outputs.len() != heads
        {
            return Err(Error::invalid(format!("record {i} has a different shape from record 0")));
        }
    }
    Ok(heads)
}

/// Per image, every head pair's CKA over tokens of the pre-projection head
/// outputs; pairs are then averaged over the images where they were defined.
pub fn inter_head_cka(records: &[AttentionRecord], block: usize) -> Result<HeadSimilarityReport> {
    let heads = check_records(records, block)?;
    let per_image: Vec<Vec<Option<f64>>> = records
        .par_iter()
        .map(|r| {
            let outs = &r.blocks[block].head_outputs;
            let mut pairs = Vec::with_capacity(heads * (heads - 1) / 2);
            for a in 0..heads {
                for b in a + 1..heads {
                    pairs.push(match cka(&outs[a], &outs[b]) {
                        Ok(v) => Some(v),
                        Err(Error::DegenerateInput(_)) => None,
                        Err(e) => return Err(e),
                    });
                }
            }
            Ok(pairs)
        })
        .collect::<Result<_>>()?;

    let mut matrix = vec![vec![None; heads]; heads];
    let mut skipped = 0;
    let mut idx = 0;
    for a in 0..heads {
        matrix[a][a] = Some(1.0);
        for b in a + 1..heads {
            let values: Vec<f64> = per_image.iter().filter_map(|p| p[idx]).collect();
            skipped += per_image.len() - values.len();
            let m = mean(values);
            matrix[a][b] = m;
            matrix[b][a] = m;
            idx += 1;
        }
    }
    let per_head_mean: Vec<Option<f64>> = (0..heads)
        .map(|a| mean((0..heads).filter(|&b| b != a).filter_map(|b| matrix[a][b])))
        .collect();
    let overall_mean = mean(per_head_mean.iter().flatten().copied());
    if skipped > 0 {
        log::warn!("block {block}: skipped {skipped} head-pair evaluations with constant representations");
    }
    Ok(HeadSimilarityReport {
        block,
        images: records.len(),
        matrix,
        per_head_mean,
        overall_mean,
        skipped_pairs: skipped,
    })
}

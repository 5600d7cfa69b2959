//! Attention head mean distance: the expected pixel distance between a query
//! patch and the patches it attends to.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};
use crate::vit::AttentionRecord;

use super::cka::check_records;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDistanceReport {
    pub block: usize,
    pub images: usize,
    pub patch_size: usize,
    /// Mean distance in pixels per head; `None` if every query was skipped.
    pub per_head: Vec<Option<f64>>,
    /// Mean of the per-head distances.
    pub block_mean: Option<f64>,
    /// Queries whose whole attention mass sat on the class token.
    pub skipped_queries: usize,
}

/// Mean over patch queries of one `[N²+1, N²+1]` attention matrix, with the
/// class-token row and column dropped and rows renormalized. Returns the
/// mean (if any query survived) and the number of skipped queries.
pub fn attention_mean_distance(attention: &Tensor, grid_side: usize, patch_size: usize) -> Result<(Option<f64>, usize)> {
    let n = grid_side * grid_side;
    let t = n + 1;
    if attention.dims() != [t, t] {
        return Err(Error::invalid(format!(
            "attention is {:?}, expected [{t}, {t}] for a {grid_side}×{grid_side} grid",
            attention.dims()
        )));
    }
    let r = patch_size as f64;
    let mut per_query = Vec::with_capacity(n);
    let mut skipped = 0;
    let mut weighted = vec![0.0; n];
    for q in 0..n {
        let row = &attention.row(q + 1)[1..];
        let mass = pairwise_sum(row);
        if !(mass > 0.0) {
            skipped += 1;
            continue;
        }
        let (qr, qc) = ((q / grid_side) as f64, (q % grid_side) as f64);
        for (k, (w, &a)) in weighted.iter_mut().zip(row).enumerate() {
            let (kr, kc) = ((k / grid_side) as f64, (k % grid_side) as f64);
            *w = a / mass * r * (qr - kr).hypot(qc - kc);
        }
        per_query.push(pairwise_sum(&weighted));
    }
    let mean = (!per_query.is_empty()).then(|| pairwise_sum(&per_query) / per_query.len() as f64);
    Ok((mean, skipped))
}

/// Per head: mean over queries, then over images.
pub fn head_mean_distance(records: &[AttentionRecord], block: usize, patch_size: usize) -> Result<HeadDistanceReport> {
    let heads = check_records(records, block)?;
    if patch_size == 0 {
        return Err(Error::invalid("patch_size must be positive"));
    }
    let grid = records[0].grid_side;
    let per_image: Vec<Vec<(Option<f64>, usize)>> = records
        .par_iter()
        .map(|r| {
            r.blocks[block]
                .attention
                .iter()
                .map(|a| attention_mean_distance(a, grid, patch_size))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut skipped = 0;
    let per_head: Vec<Option<f64>> = (0..heads)
        .map(|h| {
            skipped += per_image.iter().map(|img| img[h].1).sum::<usize>();
            let values: Vec<f64> = per_image.iter().filter_map(|img| img[h].0).collect();
            (!values.is_empty()).then(|| pairwise_sum(&values) / values.len() as f64)
        })
        .collect();
    let present: Vec<f64> = per_head.iter().flatten().copied().collect();
    let block_mean = (!present.is_empty()).then(|| pairwise_sum(&present) / present.len() as f64);
    if skipped > 0 {
        log::warn!("block {block}: skipped {skipped} queries with all attention on the class token");
    }
    Ok(HeadDistanceReport {
        block,
        images: records.len(),
        patch_size,
        per_head,
        block_mean,
        skipped_queries: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::test_support::record_with_attention;
    use crate::rng::Rng;

    fn identity(t: usize) -> Tensor {
        let mut m = Tensor::zeros(&[t, t]);
        for i in 0..t {
            m.data_mut()[i * t + i] = 1.0;
        }
        m
    }

    /// Direct double loop over query/key grid positions.
    fn brute(a: &Tensor, n: usize, r: f64) -> f64 {
        let t = n * n + 1;
        let mut total = 0.0;
        for q in 1..t {
            let mass: f64 = (1..t).map(|k| a.data()[q * t + k]).sum();
            let mut d = 0.0;
            for k in 1..t {
                let (dy, dx) = (((q - 1) / n) as f64 - ((k - 1) / n) as f64, ((q - 1) % n) as f64 - ((k - 1) % n) as f64);
                d += a.data()[q * t + k] / mass * r * (dy * dy + dx * dx).sqrt();
            }
            total += d;
        }
        total / (n * n) as f64
    }

    fn random_attention(rng: &mut Rng, t: usize) -> Tensor {
        let mut data: Vec<f64> = (0..t * t).map(|_| rng.uniform()).collect();
        for row in data.chunks_mut(t) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(vec![t, t], data).unwrap()
    }

    #[test]
    fn identity_attention_is_zero() {
        let (d, skipped) = attention_mean_distance(&identity(17), 4, 16).unwrap();
        assert_eq!(d, Some(0.0));
        assert_eq!(skipped, 0);
    }

    #[test]
    fn uniform_two_by_two() {
        let uniform = Tensor::filled(&[5, 5], 0.2);
        let (d, _) = attention_mean_distance(&uniform, 2, 16).unwrap();
        let expected = (0.0 + 16.0 + 16.0 + 16.0 * 2f64.sqrt()) / 4.0;
        assert!((d.unwrap() - 13.657).abs() <= 1e-3);
        assert!((d.unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn concentrated_on_one_token() {
        let (n, target) = (3, 4);
        let t = n * n + 1;
        let mut a = Tensor::zeros(&[t, t]);
        for q in 0..t {
            a.data_mut()[q * t + target + 1] = 1.0;
        }
        let (d, _) = attention_mean_distance(&a, n, 8).unwrap();
        let expected: f64 = (0..n * n)
            .map(|i| {
                let (dy, dx) = ((i / n) as f64 - (target / n) as f64, (i % n) as f64 - (target % n) as f64);
                8.0 * (dy * dy + dx * dx).sqrt()
            })
            .sum::<f64>()
            / (n * n) as f64;
        assert!((d.unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn random_attention_matches_brute_force() {
        let mut rng = Rng::new(9);
        for n in 1..5 {
            let a = random_attention(&mut rng, n * n + 1);
            let (d, _) = attention_mean_distance(&a, n, 4).unwrap();
            assert!((d.unwrap() - brute(&a, n, 4.0)).abs() <= 1e-10);
        }
    }

    #[test]
    fn class_only_queries_are_skipped() {
        let t = 5;
        let mut a = identity(t);
        a.data_mut()[t + 1] = 0.0;
        a.data_mut()[t] = 1.0;
        let (d, skipped) = attention_mean_distance(&a, 2, 16).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(d, Some(0.0));
    }

    #[test]
    fn translation_leaves_report_unchanged() {
        // Queries in the top-left 2×2 of a 4×4 grid attend within that
        // window; everything else points at the class token and is skipped.
        let (n, t) = (4, 17);
        let mut rng = Rng::new(10);
        let window = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let weights: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.uniform() + 0.01).collect()).collect();
        let build = |shift: (usize, usize)| {
            let mut a = Tensor::zeros(&[t, t]);
            for q in 0..n * n {
                a.data_mut()[(q + 1) * t] = 1.0;
            }
            for (qi, &(qr, qc)) in window.iter().enumerate() {
                let q = (qr + shift.0) * n + qc + shift.1;
                a.data_mut()[(q + 1) * t] = 0.0;
                for (ki, &(kr, kc)) in window.iter().enumerate() {
                    let k = (kr + shift.0) * n + kc + shift.1;
                    a.data_mut()[(q + 1) * t + k + 1] = weights[qi][ki];
                }
            }
            a
        };
        let base = head_mean_distance(&[record_with_attention(4, vec![build((0, 0))])], 0, 16).unwrap();
        let moved = head_mean_distance(&[record_with_attention(4, vec![build((2, 1))])], 0, 16).unwrap();
        assert!((base.per_head[0].unwrap() - moved.per_head[0].unwrap()).abs() <= 1e-10);
        assert_eq!(base.skipped_queries, 12);
    }

    #[test]
    fn report_averages_over_images_and_stays_in_range() {
        let mut rng = Rng::new(11);
        let records: Vec<_> = (0..3)
            .map(|_| record_with_attention(3, vec![random_attention(&mut rng, 10), identity(10)]))
            .collect();
        let report = head_mean_distance(&records, 0, 8).unwrap();
        let expected: f64 = records
            .iter()
            .map(|r| brute(&r.blocks[0].attention[0], 3, 8.0))
            .sum::<f64>()
            / 3.0;
        assert!((report.per_head[0].unwrap() - expected).abs() <= 1e-10);
        assert_eq!(report.per_head[1], Some(0.0));
        let bound = 8.0 * 3.0 * 2f64.sqrt();
        assert!(report.per_head.iter().flatten().all(|&d| (0.0..=bound).contains(&d)));
        assert!((report.block_mean.unwrap() - report.per_head[0].unwrap() / 2.0).abs() <= 1e-12);
    }
}

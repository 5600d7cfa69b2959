//! Diagnostics over captured attention: inter-head CKA similarity and
//! attention head mean distance.

mod cka;
mod distance;

pub use cka::{cka, hsic, inter_head_cka, GramMatrix, HeadSimilarityReport};
pub use distance::{attention_mean_distance, head_mean_distance, HeadDistanceReport};

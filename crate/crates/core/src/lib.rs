//! Few-shot classification with intra-task mutual attention on a compact
//! Vision Transformer.
//!
//! The pipeline encodes support and query images with the first `L − 1`
//! transformer blocks, averages support tokens into class prototypes, swaps
//! patch tokens between each prototype and the query, and lets the final
//! block's CLS token attend over the swapped sequence. Query-to-class scores
//! are sums of cosine similarities between the enhanced CLS vectors.

pub mod episode;
pub mod error;
pub mod eval;
pub mod image;
pub mod mutual_attention;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};

//! Intra-task mutual attention.
//!
//! Support images of a class are encoded by the first `L − 1` blocks and
//! averaged into a prototype token sequence. For every class `i` the query and
//! the prototype exchange patch tokens:
//!
//! ```text
//! P'_i = [CLS_i^p | query patches]      Q'_i = [CLS^q | prototype_i patches]
//! ```
//!
//! and the final block's CLS token attends over each combined sequence, giving
//! `CLS_{p,i}` and `CLS_{q,i}`. The query's score for class `j` is
//! `Σ_i cos(CLS_{q,i}, CLS_{p,j})`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Var};
use crate::vit::{
    attend, encode_batch, encoder_block, feed_forward, BlockVars, FinalAttention, ModelConfig,
    ParamVars, ScoreForm, TokenSequence, LAYER_NORM_EPS,
};

/// Which scoring head sits on top of the shared backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Patch-token swap before the final block, summed cosine scores.
    #[default]
    Imaformer,
    /// All blocks run on each image alone; cosine between final CLS vectors.
    Vanilla,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Imaformer => "imaformer",
            Variant::Vanilla => "vanilla",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imaformer" => Ok(Variant::Imaformer),
            "vanilla" => Ok(Variant::Vanilla),
            other => Err(Error::InvalidArgument {
                op: "variant",
                reason: format!("unknown variant {other:?} (expected imaformer or vanilla)"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub tokens: TokenSequence,
}

/// Scores of one query against every class, with the CLS vectors they came from.
#[derive(Clone, Debug)]
pub struct QueryScores {
    /// `N` raw scores.
    pub scores: Var,
    /// `CLS_{q,i}` for each class `i` (the single plain CLS for [`Variant::Vanilla`]).
    pub query_cls: Vec<Var>,
    /// `CLS_{p,j}` for each class `j`.
    pub proto_cls: Vec<Var>,
}

fn check_same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_mismatch(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Elementwise mean of `K` token sequences.
pub fn prototype_tokens(tape: &mut Tape, support: &[TokenSequence]) -> Result<TokenSequence> {
    let Some(first) = support.first() else {
        return Err(Error::InvalidArgument {
            op: "prototype_tokens",
            reason: "no support sequences (K = 0)".into(),
        });
    };
    if support.len() == 1 {
        return Ok(*first);
    }
    for s in &support[1..] {
        check_same_shape(tape, "prototype_tokens", first.cls, s.cls)?;
        check_same_shape(tape, "prototype_tokens", first.patches, s.patches)?;
    }
    let inv = 1.0 / support.len() as f64;
    let cls: Vec<Var> = support.iter().map(|s| s.cls).collect();
    let patches: Vec<Var> = support.iter().map(|s| s.patches).collect();
    let cls = tape.add_n(&cls)?;
    let patches = tape.add_n(&patches)?;
    Ok(TokenSequence {
        cls: tape.scale(cls, inv),
        patches: tape.scale(patches, inv),
    })
}

/// `(P', Q') = ([proto.cls | query.patches], [query.cls | proto.patches])`.
pub fn swap_tokens(
    tape: &Tape,
    proto: &TokenSequence,
    query: &TokenSequence,
) -> Result<(TokenSequence, TokenSequence)> {
    check_same_shape(tape, "swap_tokens", proto.cls, query.cls)?;
    check_same_shape(tape, "swap_tokens", proto.patches, query.patches)?;
    Ok((
        TokenSequence {
            cls: proto.cls,
            patches: query.patches,
        },
        TokenSequence {
            cls: query.cls,
            patches: proto.patches,
        },
    ))
}

/// Key/value projections of a patch block for the final layer. Layer norm and
/// the projections act row by row, so a block's keys and values can be
/// computed once and reused by every CLS token that attends to it.
#[derive(Clone, Copy, Debug)]
pub struct PatchCache {
    patches: Var,
    keys: Var,
    values: Var,
}

/// The final transformer block, read as class attention.
pub struct FinalLayer<'a> {
    block: BlockVars,
    config: &'a ModelConfig,
}

impl<'a> FinalLayer<'a> {
    pub fn new(pv: &ParamVars, config: &'a ModelConfig) -> Self {
        Self {
            block: pv.block(config.depth - 1),
            config,
        }
    }

    fn normed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.config.mechanism.residual {
            tape.layer_norm(x, self.block.ln1_gamma, self.block.ln1_beta, LAYER_NORM_EPS)
        } else {
            Ok(x)
        }
    }

    fn project(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn cache(&self, tape: &mut Tape, patches: Var) -> Result<PatchCache> {
        let h = self.normed(tape, patches)?;
        Ok(PatchCache {
            patches,
            keys: self.project(tape, h, self.block.wk, self.block.bk)?,
            values: self.project(tape, h, self.block.wv, self.block.bv)?,
        })
    }

    /// Final CLS vector (`1×d`) for the sequence `[cls | cache.patches]`.
    pub fn attend_cls(&self, tape: &mut Tape, cls: Var, cache: &PatchCache) -> Result<Var> {
        let mech = self.config.mechanism;
        if mech.residual && mech.final_attention == FinalAttention::FullSelfAttention {
            let seq = tape.concat_rows(&[cls, cache.patches])?;
            let n = tape.shape(seq)[0];
            let d = self.config.dim;
            let out = encoder_block(tape, seq, n, &self.block, self.config.heads)?;
            return tape.slice2d(out, 0, 1, 0, d);
        }
        let b = &self.block;
        let h = self.normed(tape, cls)?;
        let q = self.project(tape, h, b.wq, b.bq)?;
        let k_cls = self.project(tape, h, b.wk, b.bk)?;
        let v_cls = self.project(tape, h, b.wv, b.bv)?;
        let keys = tape.concat_rows(&[k_cls, cache.keys])?;
        let values = tape.concat_rows(&[v_cls, cache.values])?;
        let attn = attend(tape, q, keys, values, self.config.heads)?;
        if !mech.residual {
            return feed_forward(tape, attn, b);
        }
        let attn = self.project(tape, attn, b.wo, b.bo)?;
        let x = tape.add(cls, attn)?;
        let h2 = tape.layer_norm(x, b.ln2_gamma, b.ln2_beta, LAYER_NORM_EPS)?;
        let f = feed_forward(tape, h2, b)?;
        tape.add(x, f)
    }
}

/// Final-layer CLS vector of a token sequence: the CLS token is the only
/// attention query, keys and values span `[cls | patches]`.
pub fn final_class_attention(
    tape: &mut Tape,
    seq: &TokenSequence,
    pv: &ParamVars,
    config: &ModelConfig,
) -> Result<Var> {
    let layer = FinalLayer::new(pv, config);
    let cache = layer.cache(tape, seq.patches)?;
    layer.attend_cls(tape, seq.cls, &cache)
}

/// Scores queries against a fixed set of prototypes, sharing the prototypes'
/// patch projections across queries.
pub struct MutualAttention<'a> {
    layer: FinalLayer<'a>,
    protos: Vec<ClassPrototype>,
    proto_caches: Vec<PatchCache>,
}

impl<'a> MutualAttention<'a> {
    pub fn new(
        tape: &mut Tape,
        protos: &[ClassPrototype],
        pv: &ParamVars,
        config: &'a ModelConfig,
    ) -> Result<Self> {
        if protos.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "episode_scores",
                reason: format!("need at least 2 classes, got {}", protos.len()),
            });
        }
        let layer = FinalLayer::new(pv, config);
        let proto_caches = protos
            .iter()
            .map(|p| layer.cache(tape, p.tokens.patches))
            .collect::<Result<_>>()?;
        Ok(Self {
            layer,
            protos: protos.to_vec(),
            proto_caches,
        })
    }

    pub fn score(&self, tape: &mut Tape, query: &TokenSequence) -> Result<QueryScores> {
        let query_cache = self.layer.cache(tape, query.patches)?;
        let mut query_cls = Vec::with_capacity(self.protos.len());
        let mut proto_cls = Vec::with_capacity(self.protos.len());
        for (proto, proto_cache) in self.protos.iter().zip(&self.proto_caches) {
            let (p_swapped, q_swapped) = swap_tokens(tape, &proto.tokens, query)?;
            debug_assert_eq!(p_swapped.patches, query_cache.patches);
            debug_assert_eq!(q_swapped.patches, proto_cache.patches);
            proto_cls.push(self.layer.attend_cls(tape, p_swapped.cls, &query_cache)?);
            query_cls.push(self.layer.attend_cls(tape, q_swapped.cls, proto_cache)?);
        }
        let n = self.protos.len();
        let mut scores = Vec::with_capacity(n);
        for j in 0..n {
            let s = match self.layer.config.mechanism.score {
                ScoreForm::Summed => {
                    let terms = query_cls
                        .iter()
                        .map(|&q| tape.cosine(q, proto_cls[j]))
                        .collect::<Result<Vec<_>>>()?;
                    tape.add_n(&terms)?
                }
                ScoreForm::Diagonal => tape.cosine(query_cls[j], proto_cls[j])?,
            };
            scores.push(s);
        }
        Ok(QueryScores {
            scores: tape.stack(&scores)?,
            query_cls,
            proto_cls,
        })
    }
}

/// Scores one query against `N ≥ 2` class prototypes.
pub fn episode_scores(
    tape: &mut Tape,
    protos: &[ClassPrototype],
    query: &TokenSequence,
    pv: &ParamVars,
    config: &ModelConfig,
) -> Result<QueryScores> {
    MutualAttention::new(tape, protos, pv, config)?.score(tape, query)
}

/// Baseline scores: `cos(query CLS, prototype CLS_j)` with final CLS vectors
/// computed without any token exchange.
pub fn vanilla_scores(tape: &mut Tape, proto_cls: &[Var], query_cls: Var) -> Result<QueryScores> {
    if proto_cls.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "vanilla_scores",
            reason: format!("need at least 2 classes, got {}", proto_cls.len()),
        });
    }
    let scores = proto_cls
        .iter()
        .map(|&p| tape.cosine(query_cls, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryScores {
        scores: tape.stack(&scores)?,
        query_cls: vec![query_cls],
        proto_cls: proto_cls.to_vec(),
    })
}

/// `softmax(τ · scores)`.
pub fn classify(tape: &mut Tape, scores: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument {
            op: "classify",
            reason: format!("temperature must be positive, got {temperature}"),
        });
    }
    let scaled = tape.scale(scores, temperature);
    tape.softmax(scaled, 0)
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Support images grouped by episode-local class, plus query images.
pub struct EpisodeImages<'a> {
    pub support: Vec<Vec<&'a Image>>,
    pub queries: Vec<&'a Image>,
}

/// Encodes every image of an episode in one batch and scores each query under
/// `variant`. Returned scores are in query order.
pub fn score_episode(
    tape: &mut Tape,
    images: &EpisodeImages<'_>,
    pv: &ParamVars,
    config: &ModelConfig,
    variant: Variant,
) -> Result<Vec<QueryScores>> {
    let shots: Vec<usize> = images.support.iter().map(Vec::len).collect();
    if shots.contains(&0) {
        return Err(Error::InvalidArgument {
            op: "score_episode",
            reason: "every class needs at least one support image".into(),
        });
    }
    let mut all: Vec<&Image> = images.support.iter().flatten().copied().collect();
    let n_support = all.len();
    all.extend(images.queries.iter().copied());
    let seqs = encode_batch(tape, &all, pv, config, config.depth - 1)?;
    let (support_seqs, query_seqs) = seqs.split_at(n_support);

    let mut grouped = Vec::with_capacity(shots.len());
    let mut offset = 0;
    for &k in &shots {
        grouped.push(&support_seqs[offset..offset + k]);
        offset += k;
    }

    match variant {
        Variant::Imaformer => {
            let protos = grouped
                .iter()
                .enumerate()
                .map(|(class_id, seqs)| {
                    Ok(ClassPrototype {
                        class_id,
                        tokens: prototype_tokens(tape, seqs)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mech = MutualAttention::new(tape, &protos, pv, config)?;
            query_seqs.iter().map(|q| mech.score(tape, q)).collect()
        }
        Variant::Vanilla => {
            let layer = FinalLayer::new(pv, config);
            let final_cls = |tape: &mut Tape, seq: &TokenSequence| -> Result<Var> {
                let cache = layer.cache(tape, seq.patches)?;
                layer.attend_cls(tape, seq.cls, &cache)
            };
            let mut proto_cls = Vec::with_capacity(grouped.len());
            for seqs in &grouped {
                let cls = seqs
                    .iter()
                    .map(|s| final_cls(tape, s))
                    .collect::<Result<Vec<_>>>()?;
                proto_cls.push(if cls.len() == 1 {
                    cls[0]
                } else {
                    let sum = tape.add_n(&cls)?;
                    tape.scale(sum, 1.0 / cls.len() as f64)
                });
            }
            query_seqs
                .iter()
                .map(|q| {
                    let qc = final_cls(tape, q)?;
                    vanilla_scores(tape, &proto_cls, qc)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(tape: &mut Tape, rng: &mut ChaCha8Rng, m: usize, d: usize) -> TokenSequence {
        let mut t = |r: usize| {
            Tensor::new(vec![r, d], (0..r * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let cls = t(1);
        let patches = t(m);
        TokenSequence {
            cls: tape.constant(cls),
            patches: tape.constant(patches),
        }
    }

    #[test]
    fn prototype_of_one_is_identity() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_seq(&mut tape, &mut rng, 4, 8);
        assert_eq!(prototype_tokens(&mut tape, &[s]).unwrap(), s);
        assert!(prototype_tokens(&mut tape, &[]).is_err());
    }

    #[test]
    fn prototype_of_opposites_is_zero() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_seq(&mut tape, &mut rng, 4, 8);
        let neg = TokenSequence {
            cls: tape.scale(a.cls, -1.0),
            patches: tape.scale(a.patches, -1.0),
        };
        let p = prototype_tokens(&mut tape, &[a, neg]).unwrap();
        assert!(tape.value(p.cls).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(p.patches).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prototype_matches_mean_oracle() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seqs: Vec<_> = (0..5).map(|_| random_seq(&mut tape, &mut rng, 4, 8)).collect();
        let p = prototype_tokens(&mut tape, &seqs).unwrap();
        for i in 0..32 {
            let mut s = 0.0;
            for q in &seqs {
                s += tape.value(q.patches).data()[i];
            }
            assert!((tape.value(p.patches).data()[i] - s / 5.0).abs() < 1e-14);
        }
        for i in 0..8 {
            let mean = seqs.iter().map(|q| tape.value(q.cls).data()[i]).sum::<f64>() / 5.0;
            assert!((tape.value(p.cls).data()[i] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn prototype_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_seq(&mut tape, &mut rng, 4, 8);
        let b = random_seq(&mut tape, &mut rng, 3, 8);
        assert!(prototype_tokens(&mut tape, &[a, b]).is_err());
    }

    #[test]
    fn swap_reads_off_components() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_seq(&mut tape, &mut rng, 4, 8);
        let q = random_seq(&mut tape, &mut rng, 4, 8);
        let (ps, qs) = swap_tokens(&tape, &p, &q).unwrap();
        assert_eq!((ps.cls, ps.patches), (p.cls, q.patches));
        assert_eq!((qs.cls, qs.patches), (q.cls, p.patches));
        let (ps2, qs2) = swap_tokens(&tape, &ps, &qs).unwrap();
        assert_eq!(ps2.patches, p.patches);
        assert_eq!(qs2.patches, q.patches);
        let (a, b) = swap_tokens(&tape, &p, &p).unwrap();
        assert_eq!(a, p);
        assert_eq!(b, p);
        let bad = random_seq(&mut tape, &mut rng, 5, 8);
        assert!(swap_tokens(&tape, &p, &bad).is_err());
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        // Every key equal: each head's softmax is uniform, so the output is the
        // mean of the value rows regardless of the query.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        let k = tape.constant(Tensor::new(vec![5, 8], row.repeat(5)).unwrap());
        let vals: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = tape.constant(Tensor::new(vec![5, 8], vals.clone()).unwrap());
        let q = tape.constant(Tensor::new(vec![1, 8], (0..8).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap());
        let out = crate::vit::attend(&mut tape, q, k, v, 2).unwrap();
        for j in 0..8 {
            let mean = (0..5).map(|r| vals[r * 8 + j]).sum::<f64>() / 5.0;
            assert!((tape.value(out).data()[j] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn classify_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.3; 5]));
        let p = classify(&mut tape, s, 10.0).unwrap();
        assert!(tape.value(p).data().iter().all(|v| (v - 0.2).abs() < 1e-15));

        let s = tape.constant(Tensor::vector(vec![5.0, -5.0, -5.0, -5.0, -5.0]));
        let p = classify(&mut tape, s, 1.0).unwrap();
        let expected = 1.0 / (1.0 + 4.0 * (-10.0f64).exp());
        assert!((tape.value(p).data()[0] - expected).abs() < 1e-15);
        assert!((tape.value(p).data()[0] - 1.0).abs() < 2e-4);
        assert!(classify(&mut tape, s, 0.0).is_err());
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(predict(&[0.2, 0.2]), 0);
        assert_eq!(predict(&[-1.0, -3.0, 4.0]), 2);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("vanilla".parse::<Variant>().unwrap(), Variant::Vanilla);
        assert_eq!("imaformer".parse::<Variant>().unwrap(), Variant::Imaformer);
        assert!("other".parse::<Variant>().is_err());
    }
}

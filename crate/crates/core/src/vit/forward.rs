use super::{
    block_param_index, BlockParam, ModelConfig, ModelParams, CLS_TOKEN, LAYER_NORM_EPS,
    PATCH_BIAS, PATCH_WEIGHT, POS_EMBED,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor, Var};

/// One CLS row (`1×d`) plus `M` patch rows (`M×d`), kept as separate values
/// so swapping patch blocks is structural.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub cls: Var,
    pub patches: Var,
}

/// Model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamVars {
    /// Records every parameter; `trainable[i]` marks tensors that receive
    /// gradients (none when `trainable` is `None`).
    pub fn record(tape: &mut Tape, params: &ModelParams, trainable: Option<&[bool]>) -> Self {
        let vars = params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let rg = trainable.is_some_and(|m| m[i]);
                tape.leaf(t.clone(), rg)
            })
            .collect();
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn block(&self, b: usize) -> BlockVars {
        let v = |p| self.vars[block_param_index(b, p)];
        BlockVars {
            ln1_gamma: v(BlockParam::Ln1Gamma),
            ln1_beta: v(BlockParam::Ln1Beta),
            wq: v(BlockParam::Wq),
            bq: v(BlockParam::Bq),
            wk: v(BlockParam::Wk),
            bk: v(BlockParam::Bk),
            wv: v(BlockParam::Wv),
            bv: v(BlockParam::Bv),
            wo: v(BlockParam::Wo),
            bo: v(BlockParam::Bo),
            ln2_gamma: v(BlockParam::Ln2Gamma),
            ln2_beta: v(BlockParam::Ln2Beta),
            w1: v(BlockParam::W1),
            b1: v(BlockParam::B1),
            w2: v(BlockParam::W2),
            b2: v(BlockParam::B2),
        }
    }
}

/// Splits an image into non-overlapping square patches in raster order. Each
/// row is one patch flattened channel-major, then row-major within the patch.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::InvalidArgument {
            op: "patchify",
            reason: format!("{h}×{w} image not divisible into {patch_size}-pixel patches"),
        });
    }
    let (ph, pw) = (h / patch_size, w / patch_size);
    let row_len = c * patch_size * patch_size;
    let mut out = Vec::with_capacity(ph * pw * row_len);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        out.push(image.get(ch, py * patch_size + y, px * patch_size + x) as f64);
                    }
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, row_len], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    patch_size: usize,
) -> Result<Image> {
    let (rows, cols) = patches.dims2()?;
    if patch_size == 0
        || height % patch_size != 0
        || width % patch_size != 0
        || rows != (height / patch_size) * (width / patch_size)
        || cols != channels * patch_size * patch_size
    {
        return Err(Error::InvalidArgument {
            op: "unpatchify",
            reason: format!("{rows}×{cols} patches do not tile a {channels}×{height}×{width} image"),
        });
    }
    let mut img = Image::filled(channels, height, width, 0.0);
    let pw = width / patch_size;
    for r in 0..rows {
        let (py, px) = (r / pw, r % pw);
        let row = patches.row(r);
        let mut k = 0;
        for ch in 0..channels {
            for y in 0..patch_size {
                for x in 0..patch_size {
                    img.set(ch, py * patch_size + y, px * patch_size + x, row[k] as f32);
                    k += 1;
                }
            }
        }
    }
    Ok(img)
}

/// Stacks the patch rows of several images into one `(B·M)×P` matrix.
pub fn patchify_batch(images: &[&Image], config: &ModelConfig) -> Result<Tensor> {
    let m = config.num_patches();
    let p = config.patch_dim();
    let mut data = Vec::with_capacity(images.len() * m * p);
    for img in images {
        let expected = (config.channels, config.image_size, config.image_size);
        if img.dims() != expected {
            return Err(Error::InvalidArgument {
                op: "encode",
                reason: format!("image dims {:?}, model expects {expected:?}", img.dims()),
            });
        }
        data.extend(patchify(img, config.patch_size)?.into_data());
    }
    Tensor::new(vec![images.len() * m, p], data)
}

/// Linear patch projection, CLS prepend and positional embedding for a batch
/// of `batch` images whose patch rows are stacked in `patch_rows`. Returns
/// `(batch·(M+1))×d` tokens, image-major.
pub fn embed(
    tape: &mut Tape,
    patch_rows: Var,
    batch: usize,
    pv: &ParamVars,
    config: &ModelConfig,
) -> Result<Var> {
    let m = config.num_patches();
    let d = config.dim;
    let (rows, width) = tape.value(patch_rows).dims2()?;
    if rows != batch * m || width != config.patch_dim() {
        return Err(Error::ShapeMismatch {
            op: "embed",
            lhs: vec![rows, width],
            rhs: vec![batch * m, config.patch_dim()],
        });
    }
    let proj = tape.matmul(patch_rows, pv.get(PATCH_WEIGHT))?;
    let proj = tape.add_row(proj, pv.get(PATCH_BIAS))?;
    let cls = tape.reshape(pv.get(CLS_TOKEN), vec![1, d])?;
    let mut seqs = Vec::with_capacity(batch);
    for b in 0..batch {
        let patches = tape.slice2d(proj, b * m, m, 0, d)?;
        let seq = tape.concat_rows(&[cls, patches])?;
        seqs.push(tape.add(seq, pv.get(POS_EMBED))?);
    }
    if seqs.len() == 1 {
        Ok(seqs[0])
    } else {
        tape.concat_rows(&seqs)
    }
}

/// Multi-head scaled dot-product attention for one sequence. `q` holds the
/// projected queries (`r×d`), `k`/`v` the projected keys and values (`n×d`);
/// each head sees a contiguous `d/heads` column block and logits are scaled by
/// `1/√(d/heads)`. Returns the concatenated head outputs (`r×d`), before any
/// output projection.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (rq, d) = tape.value(q).dims2()?;
    let (rk, dk) = tape.value(k).dims2()?;
    if dk != d || tape.value(v).dims2()? != (rk, d) || d % heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "attend",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice2d(q, 0, rq, h * dh, dh)?;
        let kh = tape.slice2d(k, 0, rk, h * dh, dh)?;
        let vh = tape.slice2d(v, 0, rk, h * dh, dh)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax(logits, 1)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// `W₂·GELU(W₁x + b₁) + b₂`, row-wise.
pub fn feed_forward(tape: &mut Tape, x: Var, block: &BlockVars) -> Result<Var> {
    let h = tape.matmul(x, block.w1)?;
    let h = tape.add_row(h, block.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, block.w2)?;
    tape.add_row(o, block.b2)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Pre-norm transformer block applied independently to each of the
/// `rows / seq_len` sequences stacked in `x`:
/// `x ← x + MHSA(LN(x))`, then `x ← x + FFN(LN(x))`.
pub fn encoder_block(
    tape: &mut Tape,
    x: Var,
    seq_len: usize,
    block: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let (rows, d) = tape.value(x).dims2()?;
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::InvalidArgument {
            op: "encoder_block",
            reason: format!("{rows} rows are not a whole number of {seq_len}-token sequences"),
        });
    }
    let h = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta, LAYER_NORM_EPS)?;
    let q = linear(tape, h, block.wq, block.bq)?;
    let k = linear(tape, h, block.wk, block.bk)?;
    let v = linear(tape, h, block.wv, block.bv)?;
    let batch = rows / seq_len;
    let mut per_seq = Vec::with_capacity(batch);
    for s in 0..batch {
        let r0 = s * seq_len;
        let qs = tape.slice2d(q, r0, seq_len, 0, d)?;
        let ks = tape.slice2d(k, r0, seq_len, 0, d)?;
        let vs = tape.slice2d(v, r0, seq_len, 0, d)?;
        per_seq.push(attend(tape, qs, ks, vs, heads)?);
    }
    let attn = if batch == 1 {
        per_seq[0]
    } else {
        tape.concat_rows(&per_seq)?
    };
    let attn = linear(tape, attn, block.wo, block.bo)?;
    let x = tape.add(x, attn)?;
    let h = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta, LAYER_NORM_EPS)?;
    let f = feed_forward(tape, h, block)?;
    tape.add(x, f)
}

/// Embeds a batch of images and runs the first `blocks` transformer blocks,
/// returning one token sequence per image.
pub fn encode_batch(
    tape: &mut Tape,
    images: &[&Image],
    pv: &ParamVars,
    config: &ModelConfig,
    blocks: usize,
) -> Result<Vec<TokenSequence>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    if blocks > config.depth {
        return Err(Error::Config(format!(
            "requested {blocks} blocks of a depth-{} model",
            config.depth
        )));
    }
    let rows = patchify_batch(images, config)?;
    let rows = tape.constant(rows);
    let mut x = embed(tape, rows, images.len(), pv, config)?;
    let n = config.num_patches() + 1;
    for b in 0..blocks {
        x = encoder_block(tape, x, n, &pv.block(b), config.heads)?;
    }
    let d = config.dim;
    (0..images.len())
        .map(|i| {
            Ok(TokenSequence {
                cls: tape.slice2d(x, i * n, 1, 0, d)?,
                patches: tape.slice2d(x, i * n + 1, n - 1, 0, d)?,
            })
        })
        .collect()
}

/// Encodes one image with the first `L − 1` blocks.
pub fn encode_stage1(
    tape: &mut Tape,
    image: &Image,
    pv: &ParamVars,
    config: &ModelConfig,
) -> Result<TokenSequence> {
    Ok(encode_batch(tape, &[image], pv, config, config.depth - 1)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(cfg: &ModelConfig, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        Image::new(
            cfg.channels,
            cfg.image_size,
            cfg.image_size,
            (0..n).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    /// Params with every entry random, so biases and norms are exercised.
    fn dense_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let base = ModelParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let tensors = base
            .tensors()
            .iter()
            .map(|t| {
                let data = t.data().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect();
        ModelParams::from_tensors(cfg.clone(), tensors).unwrap()
    }

    // Straight-line reference: plain loops over rows, heads and keys.
    mod oracle {
        use super::*;

        pub fn mat(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
            let (k, n) = (w.shape()[0], w.shape()[1]);
            x.iter()
                .map(|row| {
                    (0..n)
                        .map(|j| {
                            let mut s = b.data()[j];
                            for t in 0..k {
                                s += row[t] * w.data()[t * n + j];
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        }

        pub fn ln(x: &[Vec<f64>], g: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    let d = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / d;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| {
                            (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g.data()[j] + b.data()[j]
                        })
                        .collect()
                })
                .collect()
        }

        pub fn block(x: &[Vec<f64>], p: &ModelParams, b: usize, heads: usize) -> Vec<Vec<f64>> {
            let g = |q| p.block(b, q);
            let h = ln(x, g(BlockParam::Ln1Gamma), g(BlockParam::Ln1Beta));
            let q = mat(&h, g(BlockParam::Wq), g(BlockParam::Bq));
            let k = mat(&h, g(BlockParam::Wk), g(BlockParam::Bk));
            let v = mat(&h, g(BlockParam::Wv), g(BlockParam::Bv));
            let d = x[0].len();
            let dh = d / heads;
            let n = x.len();
            let mut att = vec![vec![0.0; d]; n];
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                for i in 0..n {
                    let logits: Vec<f64> = (0..n)
                        .map(|j| {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in cols.clone() {
                        att[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                    }
                }
            }
            let o = mat(&att, g(BlockParam::Wo), g(BlockParam::Bo));
            let x1: Vec<Vec<f64>> = x
                .iter()
                .zip(&o)
                .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
                .collect();
            let h2 = ln(&x1, g(BlockParam::Ln2Gamma), g(BlockParam::Ln2Beta));
            let f1 = mat(&h2, g(BlockParam::W1), g(BlockParam::B1));
            let f1: Vec<Vec<f64>> = f1
                .iter()
                .map(|r| r.iter().map(|&v| v * 0.5 * (1.0 + libm::erf(v / 2f64.sqrt()))).collect())
                .collect();
            let f2 = mat(&f1, g(BlockParam::W2), g(BlockParam::B2));
            x1.iter()
                .zip(&f2)
                .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
                .collect()
        }

        pub fn embed(img: &Image, p: &ModelParams, cfg: &ModelConfig) -> Vec<Vec<f64>> {
            let ps = cfg.patch_size;
            let side = cfg.image_size / ps;
            let mut rows = Vec::new();
            for py in 0..side {
                for px in 0..side {
                    let mut r = Vec::new();
                    for c in 0..cfg.channels {
                        for y in 0..ps {
                            for x in 0..ps {
                                r.push(img.get(c, py * ps + y, px * ps + x) as f64);
                            }
                        }
                    }
                    rows.push(r);
                }
            }
            let proj = mat(&rows, p.get(PATCH_WEIGHT), p.get(PATCH_BIAS));
            let mut seq = vec![p.get(CLS_TOKEN).data().to_vec()];
            seq.extend(proj);
            let pos = p.get(POS_EMBED);
            for (i, row) in seq.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += pos.row(i)[j];
                }
            }
            seq
        }
    }

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        let (r, _) = t.dims2().unwrap();
        (0..r).map(|i| t.row(i).to_vec()).collect()
    }

    fn max_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
        let flat: Vec<f64> = b.iter().flatten().copied().collect();
        a.data()
            .iter()
            .zip(&flat)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn patchify_counts_and_round_trip() {
        let img = Image::filled(3, 32, 32, 0.5);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[16, 192]);
        let big = Image::filled(3, 224, 224, 0.0);
        assert_eq!(patchify(&big, 16).unwrap().shape(), &[196, 768]);
        let cfg = ModelConfig::desk();
        let img = random_image(&cfg, 3);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(unpatchify(&p, 3, 32, 32, 8).unwrap(), img);
        assert!(patchify(&Image::filled(1, 30, 32, 0.0), 8).is_err());
    }

    #[test]
    fn patchify_is_raster_and_channel_major() {
        let mut img = Image::filled(2, 4, 4, 0.0);
        img.set(1, 0, 2, 7.0); // channel 1, patch (0,1), pixel (0,0)
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(1)[4], 7.0);
    }

    #[test]
    fn embed_zero_image() {
        let cfg = ModelConfig::micro();
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        params.tensors_mut()[POS_EMBED] = Tensor::zeros(&[5, 8]);
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let img = Image::filled(3, 8, 8, 0.0);
        let seq = encode_batch(&mut tape, &[&img], &pv, &cfg, 0).unwrap()[0];
        assert!(tape.value(seq.patches).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(seq.cls).data(), params.get(CLS_TOKEN).data());
    }

    #[test]
    fn embed_identical_patches_differ_after_positions() {
        let cfg = ModelConfig::micro();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let img = Image::filled(3, 8, 8, 0.3);
        let rows = tape.constant(patchify(&img, 4).unwrap());
        let proj = tape.matmul(rows, pv.get(PATCH_WEIGHT)).unwrap();
        assert_eq!(tape.value(proj).row(0), tape.value(proj).row(3));
        let seq = encode_batch(&mut tape, &[&img], &pv, &cfg, 0).unwrap()[0];
        let p = tape.value(seq.patches);
        assert_ne!(p.row(0), p.row(3));
    }

    #[test]
    fn embed_matches_loop_oracle() {
        let cfg = ModelConfig::micro();
        let params = dense_params(&cfg, 4);
        let img = random_image(&cfg, 5);
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let rows = tape.constant(patchify(&img, cfg.patch_size).unwrap());
        let x = embed(&mut tape, rows, 1, &pv, &cfg).unwrap();
        assert!(max_diff(tape.value(x), &oracle::embed(&img, &params, &cfg)) < 1e-12);
    }

    #[test]
    fn encoder_block_identity_when_outputs_zeroed() {
        let cfg = ModelConfig::micro();
        let mut params = dense_params(&cfg, 6);
        *params.block_mut(0, BlockParam::Wo) = Tensor::zeros(&[8, 8]);
        *params.block_mut(0, BlockParam::Bo) = Tensor::zeros(&[8]);
        *params.block_mut(0, BlockParam::W2) = Tensor::zeros(&[16, 8]);
        *params.block_mut(0, BlockParam::B2) = Tensor::zeros(&[8]);
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let x = tape.constant(Tensor::new(vec![5, 8], (0..40).map(|i| i as f64 * 0.1).collect()).unwrap());
        let y = encoder_block(&mut tape, x, 5, &pv.block(0), cfg.heads).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(&[&[0.3, -1.2, 2.0, 0.1]]));
        let k = tape.constant(Tensor::matrix(&[&[5.0, 1.0, -3.0, 0.7]]));
        let v = tape.constant(Tensor::matrix(&[&[1.0, 2.0, 3.0, 4.0]]));
        let out = attend(&mut tape, q, k, v, 2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn encoder_block_matches_loop_oracle() {
        let cfg = ModelConfig::micro();
        let params = dense_params(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = Tensor::new(vec![10, 8], (0..80).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let x = tape.constant(xs.clone());
        // two stacked 5-token sequences
        let y = encoder_block(&mut tape, x, 5, &pv.block(1), cfg.heads).unwrap();
        let rows = to_rows(&xs);
        let mut expected = oracle::block(&rows[..5], &params, 1, cfg.heads);
        expected.extend(oracle::block(&rows[5..], &params, 1, cfg.heads));
        assert!(max_diff(tape.value(y), &expected) < 1e-10);
    }

    #[test]
    fn encoder_block_is_permutation_equivariant() {
        let cfg = ModelConfig::micro();
        let params = dense_params(&cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = Tensor::new(vec![5, 8], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let perm = [0usize, 3, 1, 4, 2];
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| xs.row(r).to_vec()).collect();
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let a = tape.constant(xs);
        let b = tape.constant(Tensor::new(vec![5, 8], permuted).unwrap());
        let ya = encoder_block(&mut tape, a, 5, &pv.block(0), 2).unwrap();
        let yb = encoder_block(&mut tape, b, 5, &pv.block(0), 2).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            for (u, v) in tape.value(yb).row(i).iter().zip(tape.value(ya).row(r)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stage1_matches_straight_line_reimplementation() {
        let cfg = ModelConfig {
            depth: 3,
            ..ModelConfig::micro()
        };
        let params = dense_params(&cfg, 12);
        let img = random_image(&cfg, 13);
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let seq = encode_stage1(&mut tape, &img, &pv, &cfg).unwrap();
        let mut x = oracle::embed(&img, &params, &cfg);
        for b in 0..cfg.depth - 1 {
            x = oracle::block(&x, &params, b, cfg.heads);
        }
        assert!(max_diff(tape.value(seq.cls), &x[..1]) < 1e-10);
        assert!(max_diff(tape.value(seq.patches), &x[1..]) < 1e-10);
    }

    #[test]
    fn stage1_depth_two_applies_one_block() {
        let cfg = ModelConfig::micro();
        let params = dense_params(&cfg, 14);
        let img = random_image(&cfg, 15);
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let seq = encode_stage1(&mut tape, &img, &pv, &cfg).unwrap();
        let x = oracle::block(&oracle::embed(&img, &params, &cfg), &params, 0, cfg.heads);
        assert!(max_diff(tape.value(seq.patches), &x[1..]) < 1e-10);
    }

    #[test]
    fn batching_is_bitwise_neutral() {
        let cfg = ModelConfig::micro();
        let params = dense_params(&cfg, 16);
        let a = random_image(&cfg, 17);
        let b = random_image(&cfg, 18);
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let batch = encode_batch(&mut tape, &[&a, &b, &a], &pv, &cfg, 1).unwrap();
        let single = encode_stage1(&mut tape, &b, &pv, &cfg).unwrap();
        assert_eq!(tape.value(batch[1].cls), tape.value(single.cls));
        assert_eq!(tape.value(batch[1].patches), tape.value(single.patches));
        assert_eq!(tape.value(batch[0].patches), tape.value(batch[2].patches));
    }

    #[test]
    fn encode_rejects_wrong_image_dims() {
        let cfg = ModelConfig::micro();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &params, None);
        let img = Image::filled(1, 8, 8, 0.0);
        assert!(encode_stage1(&mut tape, &img, &pv, &cfg).is_err());
    }
}

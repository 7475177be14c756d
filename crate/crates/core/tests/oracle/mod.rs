//! Straight-line reference implementation on nested `Vec`s. Shares no code
//! with the tape; used to cross-check the library's forward pass.
#![allow(dead_code)]

use imaformer::image::Image;
use imaformer::tensor::Tensor;
use imaformer::vit::{block_param_index, BlockParam, ModelConfig, ModelParams};

pub type Mat = Vec<Vec<f64>>;

const EPS: f64 = 1e-6;

fn bp(p: &ModelParams, b: usize, which: BlockParam) -> &Tensor {
    p.get(block_param_index(b, which))
}

pub fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), n_in);
            (0..n_out)
                .map(|j| b.data()[j] + (0..n_in).map(|i| row[i] * w.data()[i * n_out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + EPS).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Multi-head scaled dot-product attention, before the output projection.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    q.iter()
        .map(|qr| {
            let mut out = vec![0.0; d];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kr| cols.clone().map(|c| qr[c] * kr[c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&logits);
                for (wi, vr) in w.iter().zip(v) {
                    for c in cols.clone() {
                        out[c] += wi * vr[c];
                    }
                }
            }
            out
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn ffn(x: &Mat, p: &ModelParams, b: usize) -> Mat {
    let h: Mat = linear(x, bp(p, b, BlockParam::W1), bp(p, b, BlockParam::B1))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(&h, bp(p, b, BlockParam::W2), bp(p, b, BlockParam::B2))
}

pub fn block(x: &Mat, p: &ModelParams, b: usize, heads: usize) -> Mat {
    let h = layer_norm(x, bp(p, b, BlockParam::Ln1Gamma), bp(p, b, BlockParam::Ln1Beta));
    let q = linear(&h, bp(p, b, BlockParam::Wq), bp(p, b, BlockParam::Bq));
    let k = linear(&h, bp(p, b, BlockParam::Wk), bp(p, b, BlockParam::Bk));
    let v = linear(&h, bp(p, b, BlockParam::Wv), bp(p, b, BlockParam::Bv));
    let a = linear(&attention(&q, &k, &v, heads), bp(p, b, BlockParam::Wo), bp(p, b, BlockParam::Bo));
    let x = add(x, &a);
    let h2 = layer_norm(&x, bp(p, b, BlockParam::Ln2Gamma), bp(p, b, BlockParam::Ln2Beta));
    add(&x, &ffn(&h2, p, b))
}

/// `[cls; patch embeddings] + positions` for one image.
pub fn embed(img: &Image, p: &ModelParams, cfg: &ModelConfig) -> Mat {
    let ps = cfg.patch_size;
    let g = cfg.image_size / ps;
    let mut rows = vec![p.get(2).data().to_vec()];
    let mut patches = Vec::new();
    for py in 0..g {
        for px in 0..g {
            let mut r = Vec::new();
            for c in 0..cfg.channels {
                for y in 0..ps {
                    for x in 0..ps {
                        r.push(img.get(c, py * ps + y, px * ps + x) as f64);
                    }
                }
            }
            patches.push(r);
        }
    }
    rows.extend(linear(&patches, p.get(0), p.get(1)));
    let pos = p.get(3);
    for (i, r) in rows.iter_mut().enumerate() {
        for (j, v) in r.iter_mut().enumerate() {
            *v += pos.data()[i * cfg.dim + j];
        }
    }
    rows
}

/// Token sequence after all blocks but the last.
pub fn stage1(img: &Image, p: &ModelParams) -> Mat {
    let cfg = p.config();
    let mut x = embed(img, p, cfg);
    for b in 0..cfg.depth - 1 {
        x = block(&x, p, b, cfg.heads);
    }
    x
}

/// Final-layer CLS for the sequence `[cls; patches]`, with only the CLS row
/// acting as a query.
pub fn final_cls(cls: &[f64], patches: &[Vec<f64>], p: &ModelParams) -> Vec<f64> {
    let cfg = p.config();
    let b = cfg.depth - 1;
    let mut seq = vec![cls.to_vec()];
    seq.extend(patches.iter().cloned());
    let residual = cfg.mechanism.residual;
    let h = if residual {
        layer_norm(&seq, bp(p, b, BlockParam::Ln1Gamma), bp(p, b, BlockParam::Ln1Beta))
    } else {
        seq.clone()
    };
    let q = linear(&h[..1].to_vec(), bp(p, b, BlockParam::Wq), bp(p, b, BlockParam::Bq));
    let k = linear(&h, bp(p, b, BlockParam::Wk), bp(p, b, BlockParam::Bk));
    let v = linear(&h, bp(p, b, BlockParam::Wv), bp(p, b, BlockParam::Bv));
    let a = attention(&q, &k, &v, cfg.heads);
    if !residual {
        return ffn(&a, p, b).remove(0);
    }
    let a = linear(&a, bp(p, b, BlockParam::Wo), bp(p, b, BlockParam::Bo));
    let x = add(&vec![cls.to_vec()], &a);
    let h2 = layer_norm(&x, bp(p, b, BlockParam::Ln2Gamma), bp(p, b, BlockParam::Ln2Beta));
    add(&x, &ffn(&h2, p, b)).remove(0)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn mean_mat(seqs: &[Mat]) -> Mat {
    let k = seqs.len() as f64;
    let mut out = vec![vec![0.0; seqs[0][0].len()]; seqs[0].len()];
    for s in seqs {
        for (o, r) in out.iter_mut().zip(s) {
            for (a, b) in o.iter_mut().zip(r) {
                *a += b / k;
            }
        }
    }
    out
}

/// Summed (or diagonal) mutual-attention scores of one query against the
/// classes whose stage-1 support sequences are given.
pub fn mutual_scores(support: &[Vec<Mat>], query: &Mat, p: &ModelParams, diagonal: bool) -> Vec<f64> {
    let protos: Vec<Mat> = support.iter().map(|s| mean_mat(s)).collect();
    let q: Vec<Vec<f64>> = protos.iter().map(|pr| final_cls(&query[0], &pr[1..], p)).collect();
    let pc: Vec<Vec<f64>> = protos.iter().map(|pr| final_cls(&pr[0], &query[1..], p)).collect();
    (0..protos.len())
        .map(|j| {
            if diagonal {
                cosine(&q[j], &pc[j])
            } else {
                q.iter().map(|qi| cosine(qi, &pc[j])).sum()
            }
        })
        .collect()
}

/// Baseline: cosine between the query's final CLS and the mean support CLS.
pub fn vanilla_scores(support: &[Vec<Mat>], query: &Mat, p: &ModelParams) -> Vec<f64> {
    let qc = final_cls(&query[0], &query[1..], p);
    support
        .iter()
        .map(|seqs| {
            let cls: Vec<Mat> = seqs.iter().map(|s| vec![final_cls(&s[0], &s[1..], p)]).collect();
            let proto = mean_mat(&cls).remove(0);
            cosine(&qc, &proto)
        })
        .collect()
}

/// Mean silhouette coefficient with Euclidean distance, by brute force.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mean_to = |c: usize| -> Option<f64> {
            let ds: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i && labels[j] == c)
                .map(|(_, q)| dist(p, q))
                .collect();
            (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64)
        };
        let Some(a) = mean_to(labels[i]) else { continue };
        let b = classes
            .iter()
            .filter(|&&c| c != labels[i])
            .filter_map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / points.len() as f64
}

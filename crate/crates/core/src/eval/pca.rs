use crate::error::{Error, Result};

const TOL: f64 = 1e-9;
const MAX_ITERS: usize = 1000;

/// Projection of row vectors onto their leading principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, leading first. Sign is fixed so that the largest
    /// absolute entry is positive.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub explained: Vec<f64>,
    /// Per-row coordinates in component space.
    pub coords: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalise(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Centres `rows` and finds `k` components by power iteration on the sample
/// covariance, deflating after each one.
pub fn pca_project(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || k == 0 || k > d {
        return Err(Error::InvalidArgument {
            op: "pca_project",
            reason: format!("need ≥ 2 rows and 1 ≤ k ≤ dim, got {n} rows, dim {d}, k {k}"),
        });
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument {
            op: "pca_project",
            reason: "rows have different lengths".into(),
        });
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n as f64);
    }
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j] / (n - 1) as f64;
            }
        }
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for c in 0..k {
        // Deterministic start that is unlikely to be orthogonal to the target.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + c) % 7) as f64 * 0.1).collect();
        for u in &components {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        normalise(&mut v);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITERS {
            let mut w: Vec<f64> = cov.iter().map(|row| dot(row, &v)).collect();
            for u in &components {
                let p = dot(&w, u);
                w.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
            lambda = normalise(&mut w);
            if lambda == 0.0 {
                break;
            }
            let delta = v
                .iter()
                .zip(&w)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = w;
            if delta < TOL {
                break;
            }
        }
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(lambda);
    }
    let coords = centred
        .iter()
        .map(|r| components.iter().map(|u| dot(r, u)).collect())
        .collect();
    Ok(Pca {
        mean,
        components,
        explained,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_axis_aligned_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                vec![
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.1..0.1),
                ]
            })
            .collect();
        let p = pca_project(&rows, 2).unwrap();
        assert!(p.components[0][0].abs() > 0.99);
        assert!(p.components[1][1].abs() > 0.99);
        assert!(p.explained[0] > p.explained[1]);
        assert!(dot(&p.components[0], &p.components[1]).abs() < 1e-8);
        assert_eq!(p.coords.len(), 400);
    }

    #[test]
    fn projection_preserves_in_plane_points() {
        // Points lie exactly in a 2-D plane, so two components reconstruct them.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = [0.6, 0.0, 0.8, 0.0];
        let b = [0.0, 1.0, 0.0, 0.0];
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let (s, t): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
                (0..4).map(|i| 5.0 + s * a[i] + t * b[i]).collect()
            })
            .collect();
        let p = pca_project(&rows, 2).unwrap();
        for (r, c) in rows.iter().zip(&p.coords) {
            for i in 0..4 {
                let rec = p.mean[i] + c[0] * p.components[0][i] + c[1] * p.components[1][i];
                assert!((rec - r[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(pca_project(&[vec![1.0, 2.0]], 1).is_err());
        assert!(pca_project(&[vec![1.0], vec![2.0]], 2).is_err());
        assert!(pca_project(&[vec![1.0, 2.0], vec![2.0]], 1).is_err());
    }
}

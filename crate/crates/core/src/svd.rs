//! Thin SVD by one-sided Jacobi rotations.
//!
//! Columns of a working copy of `A` are rotated pairwise until all are
//! mutually orthogonal; their norms are then the singular values. The method
//! is slow for large matrices but accurate to working precision even for
//! rank-deficient inputs, which is the common case for kernel slices built
//! from a few factor pairs.

/// One singular triplet `(σ, u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriplet {
    pub value: f64,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

const MAX_SWEEPS: usize = 80;

/// All `min(rows, cols)` singular triplets of a row-major `rows×cols`
/// matrix, sorted by descending singular value (ties keep column order).
/// Left vectors of zero singular values are zero.
pub fn svd(rows: usize, cols: usize, data: &[f64]) -> Vec<SingularTriplet> {
    assert_eq!(data.len(), rows * cols, "matrix data does not match {rows}x{cols}");
    if rows < cols {
        // work on the transpose so the rotated dimension is the short one
        let mut t = vec![0.0; data.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = data[i * cols + j];
            }
        }
        return svd(cols, rows, &t)
            .into_iter()
            .map(|s| SingularTriplet {
                value: s.value,
                left: s.right,
                right: s.left,
            })
            .collect();
    }

    // column-major working copies: a[j] is column j
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| data[i * cols + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols).map(|j| (0..cols).map(|i| f64::from(i == j)).collect()).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut out: Vec<SingularTriplet> = a
        .into_iter()
        .zip(v)
        .map(|(col, right)| {
            let value = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            let left = if value > 0.0 {
                col.iter().map(|x| x / value).collect()
            } else {
                vec![0.0; rows]
            };
            SingularTriplet { value, left, right }
        })
        .collect();
    out.sort_by(|x, y| y.value.total_cmp(&x.value));
    out
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

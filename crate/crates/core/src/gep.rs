//! Generalized elementwise products and the kernels they induce.
//!
//! Two orientations appear and are never converted implicitly:
//!
//! * depthwise-then-pointwise factors ([`DpconvFactors`]) share the input
//!   channel axis: `K[i,j,m,n] = D[i,j,m] · P[m,n]` with `P` stored `M×N`;
//! * pointwise-then-depthwise factors ([`FalconFactors`]) share the output
//!   channel axis: `K[i,j,m,n] = P[n,m] · D[i,j,n]` with `P` stored `N×M`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One pointwise/depthwise pair of a rank-k factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct FalconPair {
    /// `N×M` channel-mixing matrix.
    pub pointwise: Tensor,
    /// `D×D×N` per-output-channel spatial filters.
    pub depthwise: Tensor,
}

/// Rank-k pointwise-then-depthwise factors of a `D×D×M×N` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FalconFactors {
    pairs: Vec<FalconPair>,
}

impl FalconFactors {
    pub fn new(pairs: Vec<FalconPair>) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(Error::Shape("rank-k factors need at least one pair".into()));
        };
        check_falcon_pair(first)?;
        for (r, pair) in pairs.iter().enumerate().skip(1) {
            if pair.pointwise.shape() != first.pointwise.shape()
                || pair.depthwise.shape() != first.depthwise.shape()
            {
                return Err(Error::Shape(format!(
                    "pair {r} has shapes {:?}/{:?}, pair 0 has {:?}/{:?}",
                    pair.pointwise.shape(),
                    pair.depthwise.shape(),
                    first.pointwise.shape(),
                    first.depthwise.shape()
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn single(pointwise: Tensor, depthwise: Tensor) -> Result<Self> {
        Self::new(vec![FalconPair {
            pointwise,
            depthwise,
        }])
    }

    /// All-zero factors of the given geometry.
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize, rank: usize) -> Result<Self> {
        let pairs = (0..rank)
            .map(|_| {
                Ok(FalconPair {
                    pointwise: Tensor::zeros(&[out_channels, in_channels])?,
                    depthwise: Tensor::zeros(&[kernel, kernel, out_channels])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn rank(&self) -> usize {
        self.pairs.len()
    }

    pub fn kernel_size(&self) -> usize {
        self.pairs[0].depthwise.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.pairs[0].pointwise.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.pairs[0].pointwise.shape()[0]
    }

    /// Shape of the kernel these factors induce.
    pub fn kernel_shape(&self) -> [usize; 4] {
        let d = self.kernel_size();
        [d, d, self.in_channels(), self.out_channels()]
    }

    pub fn pairs(&self) -> &[FalconPair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<FalconPair> {
        self.pairs
    }
}

fn check_falcon_pair(pair: &FalconPair) -> Result<()> {
    pair.pointwise.expect_ndim(2)?;
    pair.depthwise.expect_ndim(3)?;
    let dw = pair.depthwise.shape();
    if dw[0] != dw[1] {
        return Err(Error::Shape(format!("depthwise kernel {dw:?} is not square")));
    }
    if dw[2] != pair.pointwise.shape()[0] {
        return Err(Error::Shape(format!(
            "depthwise channels {} differ from pointwise output channels {}",
            dw[2],
            pair.pointwise.shape()[0]
        )));
    }
    Ok(())
}

/// Depthwise-then-pointwise factors of a `D×D×M×N` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct DpconvFactors {
    depthwise: Tensor,
    pointwise: Tensor,
}

impl DpconvFactors {
    /// `depthwise` is `D×D×M`, `pointwise` is `M×N`.
    pub fn new(depthwise: Tensor, pointwise: Tensor) -> Result<Self> {
        depthwise.expect_ndim(3)?;
        pointwise.expect_ndim(2)?;
        let dw = depthwise.shape();
        if dw[0] != dw[1] {
            return Err(Error::Shape(format!("depthwise kernel {dw:?} is not square")));
        }
        if dw[2] != pointwise.shape()[0] {
            return Err(Error::Shape(format!(
                "depthwise channels {} differ from pointwise input channels {}",
                dw[2],
                pointwise.shape()[0]
            )));
        }
        Ok(Self {
            depthwise,
            pointwise,
        })
    }

    pub fn depthwise(&self) -> &Tensor {
        &self.depthwise
    }

    pub fn pointwise(&self) -> &Tensor {
        &self.pointwise
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.depthwise, self.pointwise)
    }

    pub fn kernel_size(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.pointwise.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.shape()[1]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        let d = self.kernel_size();
        [d, d, self.in_channels(), self.out_channels()]
    }
}

/// GEP of a `p`-way tensor `a` (last axis `M`) and a `q`-way tensor `b`
/// (first axis `M`): `out[i…,m,j…] = a[i…,m] · b[m,j…]`.
pub fn gep_general(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let common = *a.shape().last().expect("tensors have at least one axis");
    if b.shape()[0] != common {
        return Err(Error::Shape(format!(
            "common axis mismatch: last axis of {:?} vs first axis of {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let lead: usize = a.shape()[..a.ndim() - 1].iter().product();
    let tail: usize = b.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(lead * common * tail);
    for l in 0..lead {
        for m in 0..common {
            let av = a.data()[l * common + m];
            data.extend(b.data()[m * tail..(m + 1) * tail].iter().map(|bv| av * bv));
        }
    }
    let mut shape = a.shape().to_vec();
    shape.extend_from_slice(&b.shape()[1..]);
    Tensor::new(shape, data)
}

/// `K[i,j,m,n] = D[i,j,m] · P[m,n]`.
pub fn gep_dpconv(f: &DpconvFactors) -> Result<Tensor> {
    let [d, _, m, n] = f.kernel_shape();
    let dw = f.depthwise.data();
    let pw = f.pointwise.data();
    let mut data = Vec::with_capacity(d * d * m * n);
    for tap in 0..d * d {
        for mi in 0..m {
            let dv = dw[tap * m + mi];
            data.extend(pw[mi * n..(mi + 1) * n].iter().map(|p| dv * p));
        }
    }
    Tensor::new(vec![d, d, m, n], data)
}

/// `K[i,j,m,n] = P[n,m] · D[i,j,n]` for rank-1 factors.
pub fn gep_falcon(f: &FalconFactors) -> Result<Tensor> {
    if f.rank() != 1 {
        return Err(Error::Shape(format!(
            "expected rank-1 factors, got rank {}",
            f.rank()
        )));
    }
    let mut out = Tensor::zeros(&f.kernel_shape())?;
    accumulate_falcon_pair(&mut out, &f.pairs[0]);
    Ok(out)
}

/// Sum over `r` (ascending) of the rank-1 kernels of each pair.
pub fn gep_rank_k(f: &FalconFactors) -> Result<Tensor> {
    let mut out = Tensor::zeros(&f.kernel_shape())?;
    for pair in &f.pairs {
        accumulate_falcon_pair(&mut out, pair);
    }
    Ok(out)
}

fn accumulate_falcon_pair(out: &mut Tensor, pair: &FalconPair) {
    let &[n, m] = pair.pointwise.shape() else {
        unreachable!()
    };
    let pw = pair.pointwise.data();
    let dw = pair.depthwise.data();
    let taps = dw.len() / n;
    let k = out.data_mut();
    for tap in 0..taps {
        for mi in 0..m {
            let base = (tap * m + mi) * n;
            for ni in 0..n {
                k[base + ni] += pw[ni * m + mi] * dw[tap * n + ni];
            }
        }
    }
}

/// Per-group `K^l = D^l ⊙ P^l` for a grouped layer with `g` groups.
///
/// Each `depthwise[l]` is `D×D×(M/g)` and each `pointwise[l]` is `(M/g)×(N/g)`.
pub fn gep_group(depthwise: &[Tensor], pointwise: &[Tensor], groups: usize) -> Result<Vec<Tensor>> {
    if groups == 0 {
        return Err(Error::Shape("group count must be at least 1".into()));
    }
    if depthwise.len() != groups || pointwise.len() != groups {
        return Err(Error::Shape(format!(
            "expected {groups} depthwise and pointwise kernels, got {} and {}",
            depthwise.len(),
            pointwise.len()
        )));
    }
    let mut kernels = Vec::with_capacity(groups);
    for (l, (dw, pw)) in depthwise.iter().zip(pointwise).enumerate() {
        if dw.shape() != depthwise[0].shape() || pw.shape() != pointwise[0].shape() {
            return Err(Error::Shape(format!("group {l} differs in shape from group 0")));
        }
        kernels.push(gep_dpconv(&DpconvFactors::new(dw.clone(), pw.clone())?)?);
    }
    Ok(kernels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{transpose_3_4, unfold_output_slice};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn general_all_ones() {
        let k = gep_general(&t(&[2], &[1.0, 1.0]), &Tensor::full(&[2, 2], 1.0).unwrap()).unwrap();
        assert_eq!(k, Tensor::full(&[2, 2], 1.0).unwrap());
        let k = gep_general(
            &Tensor::full(&[2, 3, 4], 1.0).unwrap(),
            &Tensor::full(&[4, 5, 1], 1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(k, Tensor::full(&[2, 3, 4, 5, 1], 1.0).unwrap());
    }

    #[test]
    fn general_matrix_vector() {
        let k = gep_general(&Tensor::full(&[2, 3], 1.0).unwrap(), &t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(k.shape(), &[2, 3]);
        assert_eq!(k.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn general_matches_loop_nest() {
        let a = randn(&[2, 2, 3], 10);
        let b = randn(&[3, 2], 11);
        let k = gep_general(&a, &b).unwrap();
        assert_eq!(k.shape(), &[2, 2, 3, 2]);
        for i in 0..2 {
            for j in 0..2 {
                for m in 0..3 {
                    for q in 0..2 {
                        let want = a.get(&[i, j, m]).unwrap() * b.get(&[m, q]).unwrap();
                        let got = k.get(&[i, j, m, q]).unwrap();
                        assert!((got - want).abs() <= 1e-15 * want.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn general_rejects_axis_mismatch() {
        let err = gep_general(&Tensor::zeros(&[2, 3]).unwrap(), &Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn dpconv_all_ones_and_single_entry() {
        let f = DpconvFactors::new(
            Tensor::full(&[3, 3, 2], 1.0).unwrap(),
            Tensor::full(&[2, 4], 1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(gep_dpconv(&f).unwrap(), Tensor::full(&[3, 3, 2, 4], 1.0).unwrap());

        let mut dw = Tensor::zeros(&[3, 3, 2]).unwrap();
        dw.set(&[0, 0, 0], 2.0).unwrap();
        let f = DpconvFactors::new(dw, t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let k = gep_dpconv(&f).unwrap();
        let mut want = Tensor::zeros(&[3, 3, 2, 2]).unwrap();
        want.set(&[0, 0, 0, 0], 2.0).unwrap();
        assert_eq!(k, want);
    }

    #[test]
    fn dpconv_matches_loop_nest() {
        let dw = randn(&[3, 3, 2], 20);
        let pw = randn(&[2, 3], 21);
        let k = gep_dpconv(&DpconvFactors::new(dw.clone(), pw.clone()).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for m in 0..2 {
                    for n in 0..3 {
                        let want = dw.get(&[i, j, m]).unwrap() * pw.get(&[m, n]).unwrap();
                        assert!((k.get(&[i, j, m, n]).unwrap() - want).abs() <= 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn dpconv_factor_shape_checks() {
        assert!(DpconvFactors::new(Tensor::zeros(&[3, 3, 2]).unwrap(), Tensor::zeros(&[3, 2]).unwrap()).is_err());
        assert!(DpconvFactors::new(Tensor::zeros(&[3, 2, 2]).unwrap(), Tensor::zeros(&[2, 2]).unwrap()).is_err());
    }

    #[test]
    fn falcon_all_ones() {
        let f = FalconFactors::single(
            Tensor::full(&[2, 3], 1.0).unwrap(),
            Tensor::full(&[1, 1, 2], 1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(gep_falcon(&f).unwrap(), Tensor::full(&[1, 1, 3, 2], 1.0).unwrap());
    }

    #[test]
    fn falcon_identity_pointwise() {
        let f = FalconFactors::single(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), t(&[1, 1, 2], &[1.0, 2.0])).unwrap();
        let k = gep_falcon(&f).unwrap();
        // K[0,0,m,n] = (n+1)·[m=n]
        assert_eq!(k.data(), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn falcon_is_transposed_general_product() {
        let pw = randn(&[4, 3], 30);
        let dw = randn(&[3, 3, 4], 31);
        let f = FalconFactors::single(pw.clone(), dw.clone()).unwrap();
        let via_general = transpose_3_4(&gep_general(&dw, &pw).unwrap()).unwrap();
        assert_eq!(gep_falcon(&f).unwrap(), via_general);
    }

    #[test]
    fn falcon_requires_rank_one() {
        let f = FalconFactors::zeros(3, 2, 2, 2).unwrap();
        assert!(gep_falcon(&f).is_err());
    }

    #[test]
    fn falcon_factor_shape_checks() {
        let bad = FalconFactors::single(Tensor::zeros(&[3, 2]).unwrap(), Tensor::zeros(&[3, 3, 2]).unwrap());
        assert!(bad.is_err());
        let mismatched = FalconFactors::new(vec![
            FalconPair {
                pointwise: Tensor::zeros(&[2, 2]).unwrap(),
                depthwise: Tensor::zeros(&[3, 3, 2]).unwrap(),
            },
            FalconPair {
                pointwise: Tensor::zeros(&[2, 2]).unwrap(),
                depthwise: Tensor::zeros(&[1, 1, 2]).unwrap(),
            },
        ]);
        assert!(mismatched.is_err());
    }

    #[test]
    fn rank_k_reduces_and_cancels() {
        let pw = randn(&[3, 2], 40);
        let dw = randn(&[3, 3, 3], 41);
        let f1 = FalconFactors::single(pw.clone(), dw.clone()).unwrap();
        assert_eq!(gep_rank_k(&f1).unwrap(), gep_falcon(&f1).unwrap());

        let f2 = FalconFactors::new(vec![
            FalconPair {
                pointwise: pw.clone(),
                depthwise: dw.clone(),
            },
            FalconPair {
                pointwise: pw.scale(-1.0),
                depthwise: dw,
            },
        ])
        .unwrap();
        assert!(gep_rank_k(&f2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_k_is_sum_of_terms() {
        let pairs: Vec<_> = (0..3)
            .map(|r| FalconPair {
                pointwise: randn(&[4, 3], 50 + r),
                depthwise: randn(&[3, 3, 4], 60 + r),
            })
            .collect();
        let mut want = Tensor::zeros(&[3, 3, 3, 4]).unwrap();
        for p in &pairs {
            let term = gep_falcon(&FalconFactors::new(vec![p.clone()]).unwrap()).unwrap();
            want = want.add(&term).unwrap();
        }
        let got = gep_rank_k(&FalconFactors::new(pairs).unwrap()).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rank_k_slices_have_rank_at_most_k() {
        let pairs: Vec<_> = (0..2)
            .map(|r| FalconPair {
                pointwise: randn(&[3, 5], 70 + r),
                depthwise: randn(&[3, 3, 3], 80 + r),
            })
            .collect();
        let k = gep_rank_k(&FalconFactors::new(pairs).unwrap()).unwrap();
        for n in 0..3 {
            let s = unfold_output_slice(&k, n).unwrap();
            let sv: Vec<f64> = crate::svd::svd(9, 5, s.data()).iter().map(|t| t.value).collect();
            assert!(sv[2] <= 1e-10 * sv[0], "slice {n}: {sv:?}");
        }
    }

    #[test]
    fn bilinear_gauge_is_exact() {
        let pw = randn(&[3, 2], 90);
        let dw = randn(&[3, 3, 3], 91);
        let a = FalconFactors::single(pw.clone(), dw.clone()).unwrap();
        let b = FalconFactors::single(pw.scale(0.5), dw.scale(2.0)).unwrap();
        assert_eq!(gep_falcon(&a).unwrap(), gep_falcon(&b).unwrap());

        let dpw = randn(&[3, 2], 92);
        let ddw = randn(&[3, 3, 3], 93);
        let a = DpconvFactors::new(ddw.clone(), dpw.clone()).unwrap();
        let b = DpconvFactors::new(ddw.scale(2.0), dpw.scale(0.5)).unwrap();
        assert_eq!(gep_dpconv(&a).unwrap(), gep_dpconv(&b).unwrap());
    }

    #[test]
    fn group_degenerate_and_all_ones() {
        let dw = randn(&[3, 3, 4], 100);
        let pw = randn(&[4, 2], 101);
        let ks = gep_group(&[dw.clone()], &[pw.clone()], 1).unwrap();
        assert_eq!(ks, vec![gep_dpconv(&DpconvFactors::new(dw, pw).unwrap()).unwrap()]);

        let ones_d = Tensor::full(&[1, 1, 2], 1.0).unwrap();
        let ones_p = Tensor::full(&[2, 2], 1.0).unwrap();
        let ks = gep_group(&[ones_d.clone(), ones_d], &[ones_p.clone(), ones_p], 2).unwrap();
        assert_eq!(ks.len(), 2);
        for k in ks {
            assert_eq!(k, Tensor::full(&[1, 1, 2, 2], 1.0).unwrap());
        }
    }

    #[test]
    fn group_matches_per_group_loop() {
        let dws = [randn(&[3, 3, 2], 110), randn(&[3, 3, 2], 111)];
        let pws = [randn(&[2, 3], 112), randn(&[2, 3], 113)];
        let ks = gep_group(&dws, &pws, 2).unwrap();
        for l in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    for m in 0..2 {
                        for n in 0..3 {
                            let want = dws[l].get(&[i, j, m]).unwrap() * pws[l].get(&[m, n]).unwrap();
                            assert!((ks[l].get(&[i, j, m, n]).unwrap() - want).abs() <= 1e-15);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn group_rejects_length_mismatch() {
        let dw = Tensor::zeros(&[1, 1, 2]).unwrap();
        let pw = Tensor::zeros(&[2, 2]).unwrap();
        assert!(gep_group(&[dw.clone()], &[pw.clone(), pw], 2).is_err());
        assert!(gep_group(&[dw], &[Tensor::zeros(&[2, 2]).unwrap()], 0).is_err());
    }
}

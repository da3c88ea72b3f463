//! Reference 2-D convolutions over `H×W×C` feature maps.
//!
//! These are direct loop nests with zero padding and a fixed accumulation
//! order (kernel row, kernel column, then input channel), so results are
//! reproducible bit for bit. The `_counted` variants also return the number
//! of multiply-adds executed, padded taps included.

use crate::error::{Error, Result};
use crate::tensor::{output_extent, ConvDims, Tensor};

/// `(H′, W′)` of a layer.
pub fn output_dims(dims: &ConvDims) -> Result<(usize, usize)> {
    dims.output_size()
}

fn feature_map_dims(input: &Tensor) -> Result<(usize, usize, usize)> {
    input.expect_ndim(3)?;
    let s = input.shape();
    Ok((s[0], s[1], s[2]))
}

/// Input row (or column) read by output position `out` and tap `tap`, or
/// `None` when it falls in the zero padding.
#[inline]
fn tap_source(out: usize, tap: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
    (out * stride + tap)
        .checked_sub(padding)
        .filter(|&src| src < extent)
}

pub fn conv2d_standard(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_standard_counted(input, kernel, stride, padding).map(|(out, _)| out)
}

pub fn conv2d_standard_counted(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, u64)> {
    let (h, w, m) = feature_map_dims(input)?;
    kernel.expect_ndim(4)?;
    let &[d, d2, km, n] = kernel.shape() else {
        unreachable!()
    };
    if d != d2 {
        return Err(Error::Shape(format!("kernel {:?} is not square", kernel.shape())));
    }
    if km != m {
        return Err(Error::Shape(format!(
            "input has {m} channels but kernel {:?} expects {km}",
            kernel.shape()
        )));
    }
    let ho = output_extent(h, d, stride, padding, "H")?;
    let wo = output_extent(w, d, stride, padding, "W")?;
    let x = input.data();
    let k = kernel.data();
    let mut out = Vec::with_capacity(ho * wo * n);
    let mut ops = 0u64;
    for oh in 0..ho {
        for ow in 0..wo {
            for on in 0..n {
                let mut acc = 0.0;
                for i in 0..d {
                    let hi = tap_source(oh, i, stride, padding, h);
                    for j in 0..d {
                        // padded taps multiply the zero border and still count
                        ops += m as u64;
                        let (Some(hi), Some(wj)) = (hi, tap_source(ow, j, stride, padding, w)) else {
                            continue;
                        };
                        let xb = (hi * w + wj) * m;
                        let kb = (i * d + j) * m;
                        for c in 0..m {
                            acc += k[(kb + c) * n + on] * x[xb + c];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok((Tensor::new(vec![ho, wo, n], out)?, ops))
}

/// Per-channel spatial convolution with a `D×D×C` filter bank.
pub fn conv2d_depthwise(input: &Tensor, filters: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_depthwise_counted(input, filters, stride, padding).map(|(out, _)| out)
}

pub fn conv2d_depthwise_counted(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, u64)> {
    let (h, w, c) = feature_map_dims(input)?;
    filters.expect_ndim(3)?;
    let &[d, d2, fc] = filters.shape() else {
        unreachable!()
    };
    if d != d2 {
        return Err(Error::Shape(format!("filters {:?} are not square", filters.shape())));
    }
    if fc != c {
        return Err(Error::Shape(format!(
            "input has {c} channels but depthwise filters {:?} expect {fc}",
            filters.shape()
        )));
    }
    let ho = output_extent(h, d, stride, padding, "H")?;
    let wo = output_extent(w, d, stride, padding, "W")?;
    let x = input.data();
    let f = filters.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut ops = 0u64;
    for oh in 0..ho {
        for ow in 0..wo {
            for ch in 0..c {
                let mut acc = 0.0;
                for i in 0..d {
                    let hi = tap_source(oh, i, stride, padding, h);
                    for j in 0..d {
                        ops += 1;
                        let (Some(hi), Some(wj)) = (hi, tap_source(ow, j, stride, padding, w)) else {
                            continue;
                        };
                        acc += f[(i * d + j) * c + ch] * x[(hi * w + wj) * c + ch];
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok((Tensor::new(vec![ho, wo, c], out)?, ops))
}

/// 1×1 convolution with an `M×N` (input-major) matrix.
pub fn conv2d_pointwise(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    weights.expect_ndim(2)?;
    let &[m, n] = weights.shape() else {
        unreachable!()
    };
    let p = weights.data();
    pointwise_apply(input, m, n, |c, o| p[c * n + o]).map(|(out, _)| out)
}

/// Shared pointwise loop: `out[h,w,o] = Σ_c weight(c, o) · in[h,w,c]`.
pub(crate) fn pointwise_apply(
    input: &Tensor,
    in_channels: usize,
    out_channels: usize,
    weight: impl Fn(usize, usize) -> f64,
) -> Result<(Tensor, u64)> {
    let (h, w, m) = feature_map_dims(input)?;
    if m != in_channels {
        return Err(Error::Shape(format!(
            "input has {m} channels but the pointwise kernel expects {in_channels}"
        )));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(h * w * out_channels);
    let mut ops = 0u64;
    for px in 0..h * w {
        let row = &x[px * m..(px + 1) * m];
        for o in 0..out_channels {
            let mut acc = 0.0;
            for (c, &v) in row.iter().enumerate() {
                acc += weight(c, o) * v;
                ops += 1;
            }
            out.push(acc);
        }
    }
    Ok((Tensor::new(vec![h, w, out_channels], out)?, ops))
}

/// Grouped convolution: channel block `l` of the input is convolved with
/// `kernels[l]` (`D×D×(M/g)×(N/g)`) and the output blocks are concatenated.
pub fn conv2d_group(input: &Tensor, kernels: &[Tensor], stride: usize, padding: usize) -> Result<Tensor> {
    let (_, _, m) = feature_map_dims(input)?;
    let g = kernels.len();
    if g == 0 || m % g != 0 {
        return Err(Error::Shape(format!(
            "{g} groups do not divide {m} input channels"
        )));
    }
    let block = m / g;
    let mut outputs = Vec::with_capacity(g);
    for (l, k) in kernels.iter().enumerate() {
        if k.shape() != kernels[0].shape() {
            return Err(Error::Shape(format!("group {l} kernel differs in shape from group 0")));
        }
        let part = slice_channels(input, l * block, (l + 1) * block)?;
        outputs.push(conv2d_standard(&part, k, stride, padding)?);
    }
    concat_channels(&outputs)
}

/// Channels `[start, end)` of an `H×W×C` map.
pub fn slice_channels(input: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (h, w, c) = feature_map_dims(input)?;
    if start >= end || end > c {
        return Err(Error::Shape(format!(
            "channel range {start}..{end} is invalid for {c} channels"
        )));
    }
    let data = input
        .data()
        .chunks_exact(c)
        .flat_map(|px| px[start..end].iter().copied())
        .collect();
    Tensor::new(vec![h, w, end - start], data)
}

/// Concatenates `H×W×C_i` maps along the channel axis, in order.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::Shape("nothing to concatenate".into()));
    };
    let (h, w, _) = feature_map_dims(first)?;
    let mut total = 0;
    for p in parts {
        let (ph, pw, pc) = feature_map_dims(p)?;
        if (ph, pw) != (h, w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {ph}×{pw} with {h}×{w} maps"
            )));
        }
        total += pc;
    }
    let mut data = Vec::with_capacity(h * w * total);
    for px in 0..h * w {
        for p in parts {
            let c = p.shape()[2];
            data.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, total], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gep::{gep_dpconv, gep_group, DpconvFactors};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    /// Direct-definition oracle written with 1-based indices and signed arithmetic.
    fn standard_oracle(x: &Tensor, k: &Tensor, s: usize, p: usize) -> Tensor {
        let (h, w, m) = (x.shape()[0] as i64, x.shape()[1] as i64, x.shape()[2]);
        let d = k.shape()[0] as i64;
        let n = k.shape()[3];
        let (s, p) = (s as i64, p as i64);
        let ho = (h + 2 * p - d) / s + 1;
        let wo = (w + 2 * p - d) / s + 1;
        Tensor::from_fn(&[ho as usize, wo as usize, n], |o| {
            let (h1, w1) = (o[0] as i64 + 1, o[1] as i64 + 1);
            let mut acc = 0.0;
            for i in 1..=d {
                for j in 1..=d {
                    for c in 0..m {
                        let hi = (h1 - 1) * s + i - p;
                        let wj = (w1 - 1) * s + j - p;
                        if hi >= 1 && hi <= h && wj >= 1 && wj <= w {
                            acc += k.get(&[(i - 1) as usize, (j - 1) as usize, c, o[2]]).unwrap()
                                * x.get(&[(hi - 1) as usize, (wj - 1) as usize, c]).unwrap();
                        }
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    #[test]
    fn output_dims_examples() {
        let d = |k, h, s, p| ConvDims::new(k, 1, 1, h, h, s, p).and_then(|d| output_dims(&d));
        assert_eq!(d(3, 32, 1, 1).unwrap(), (32, 32));
        assert_eq!(d(7, 224, 2, 3).unwrap(), (112, 112));
        assert_eq!(d(1, 1, 1, 0).unwrap(), (1, 1));
        assert!(matches!(d(5, 3, 1, 0), Err(Error::Geometry(_))));
    }

    #[test]
    fn standard_scalar_and_tap_count() {
        let x = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(conv2d_standard(&x, &k, 1, 0).unwrap().data(), &[6.0]);

        let x = Tensor::full(&[3, 3, 1], 1.0).unwrap();
        let k = Tensor::full(&[2, 2, 1, 1], 1.0).unwrap();
        let o = conv2d_standard(&x, &k, 1, 0).unwrap();
        assert_eq!(o.shape(), &[2, 2, 1]);
        assert!(o.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn standard_matches_oracle_with_padding_and_stride() {
        let x = randn(&[5, 5, 3], 1);
        let k = randn(&[3, 3, 3, 2], 2);
        let got = conv2d_standard(&x, &k, 2, 1).unwrap();
        let want = standard_oracle(&x, &k, 2, 1);
        assert_eq!(got.shape(), &[3, 3, 2]);
        assert!(rel_err(&got, &want) <= 1e-12);
        for (s, p) in [(1, 0), (1, 1), (2, 0), (1, 2), (3, 2)] {
            let got = conv2d_standard(&x, &k, s, p).unwrap();
            assert!(rel_err(&got, &standard_oracle(&x, &k, s, p)) <= 1e-12, "s={s} p={p}");
        }
    }

    #[test]
    fn standard_shape_errors() {
        let x = randn(&[4, 4, 2], 3);
        assert!(matches!(
            conv2d_standard(&x, &randn(&[3, 3, 3, 1], 4), 1, 0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            conv2d_standard(&x, &randn(&[5, 5, 2, 1], 4), 1, 0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn standard_is_linear() {
        let x1 = randn(&[6, 6, 3], 5);
        let x2 = randn(&[6, 6, 3], 6);
        let k = randn(&[3, 3, 3, 4], 7);
        let (a, b) = (1.5, -0.75);
        let mixed = x1.scale(a).add(&x2.scale(b)).unwrap();
        let lhs = conv2d_standard(&mixed, &k, 1, 1).unwrap();
        let rhs = conv2d_standard(&x1, &k, 1, 1)
            .unwrap()
            .scale(a)
            .add(&conv2d_standard(&x2, &k, 1, 1).unwrap().scale(b))
            .unwrap();
        assert!(rel_err(&lhs, &rhs) <= 1e-10);
    }

    #[test]
    fn depthwise_identity_filter() {
        let x = randn(&[4, 5, 3], 8);
        let f = Tensor::full(&[1, 1, 3], 1.0).unwrap();
        assert_eq!(conv2d_depthwise(&x, &f, 1, 0).unwrap(), x);
    }

    #[test]
    fn depthwise_single_channel_is_standard() {
        let x = randn(&[5, 5, 1], 9);
        let f = randn(&[3, 3, 1], 10);
        let k = f.clone().reshape(&[3, 3, 1, 1]).unwrap();
        assert_eq!(
            conv2d_depthwise(&x, &f, 2, 1).unwrap(),
            conv2d_standard(&x, &k, 2, 1).unwrap()
        );
    }

    #[test]
    fn depthwise_matches_per_channel_oracle() {
        let x = randn(&[4, 4, 3], 11);
        let f = randn(&[3, 3, 3], 12);
        let got = conv2d_depthwise(&x, &f, 1, 1).unwrap();
        for c in 0..3 {
            let xc = slice_channels(&x, c, c + 1).unwrap();
            let kc = Tensor::from_fn(&[3, 3, 1, 1], |i| f.get(&[i[0], i[1], c]).unwrap()).unwrap();
            let want = standard_oracle(&xc, &kc, 1, 1);
            let gc = slice_channels(&got, c, c + 1).unwrap();
            assert!(rel_err(&gc, &want) <= 1e-12);
        }
    }

    #[test]
    fn pointwise_identity_and_sum() {
        let x = randn(&[3, 3, 2], 13);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv2d_pointwise(&x, &eye).unwrap(), x);
        let ones = Tensor::full(&[2, 1], 1.0).unwrap();
        let o = conv2d_pointwise(&x, &ones).unwrap();
        for px in 0..9 {
            assert_eq!(o.data()[px], x.data()[2 * px] + x.data()[2 * px + 1]);
        }
    }

    #[test]
    fn pointwise_matches_matrix_product() {
        let x = randn(&[3, 3, 4], 14);
        let p = randn(&[4, 2], 15);
        let o = conv2d_pointwise(&x, &p).unwrap();
        for h in 0..3 {
            for w in 0..3 {
                for n in 0..2 {
                    let want: f64 = (0..4)
                        .map(|m| p.get(&[m, n]).unwrap() * x.get(&[h, w, m]).unwrap())
                        .sum();
                    assert!((o.get(&[h, w, n]).unwrap() - want).abs() <= 1e-12 * want.abs().max(1.0));
                }
            }
        }
        assert!(conv2d_pointwise(&x, &randn(&[3, 2], 16)).is_err());
    }

    #[test]
    fn group_degenerate_and_diagonal() {
        let x = randn(&[5, 5, 4], 17);
        let k = randn(&[3, 3, 4, 4], 18);
        assert_eq!(
            conv2d_group(&x, std::slice::from_ref(&k), 1, 1).unwrap(),
            conv2d_standard(&x, &k, 1, 1).unwrap()
        );

        let scales = [2.0, -1.0, 0.5, 3.0];
        let ks: Vec<_> = scales
            .iter()
            .map(|&c| Tensor::new(vec![1, 1, 1, 1], vec![c]).unwrap())
            .collect();
        let o = conv2d_group(&x, &ks, 1, 0).unwrap();
        for px in 0..25 {
            for l in 0..4 {
                assert_eq!(o.data()[px * 4 + l], scales[l] * x.data()[px * 4 + l]);
            }
        }
        assert!(conv2d_group(&x, &ks[..3], 1, 0).is_err());
    }

    #[test]
    fn group_matches_per_group_oracle() {
        let x = randn(&[5, 5, 4], 19);
        let ks = [randn(&[3, 3, 2, 2], 20), randn(&[3, 3, 2, 2], 21)];
        let got = conv2d_group(&x, &ks, 1, 1).unwrap();
        for l in 0..2 {
            let want = standard_oracle(&slice_channels(&x, 2 * l, 2 * l + 2).unwrap(), &ks[l], 1, 1);
            let gl = slice_channels(&got, 2 * l, 2 * l + 2).unwrap();
            assert!(rel_err(&gl, &want) <= 1e-12);
        }
    }

    #[test]
    fn dpconv_kernel_equals_depthwise_then_pointwise() {
        for (s, p) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
            let x = randn(&[6, 7, 3], 22);
            let dw = randn(&[3, 3, 3], 23);
            let pw = randn(&[3, 5], 24);
            let k = gep_dpconv(&DpconvFactors::new(dw.clone(), pw.clone()).unwrap()).unwrap();
            let direct = conv2d_standard(&x, &k, s, p).unwrap();
            let split = conv2d_pointwise(&conv2d_depthwise(&x, &dw, s, p).unwrap(), &pw).unwrap();
            assert!(rel_err(&split, &direct) <= 1e-10, "s={s} p={p}");
        }
    }

    #[test]
    fn grouped_gep_equals_per_group_separable() {
        let x = randn(&[6, 6, 4], 25);
        let dws = [randn(&[3, 3, 2], 26), randn(&[3, 3, 2], 27)];
        let pws = [randn(&[2, 3], 28), randn(&[2, 3], 29)];
        let ks = gep_group(&dws, &pws, 2).unwrap();
        let grouped = conv2d_group(&x, &ks, 1, 1).unwrap();
        for l in 0..2 {
            let xl = slice_channels(&x, 2 * l, 2 * l + 2).unwrap();
            let want = conv2d_pointwise(&conv2d_depthwise(&xl, &dws[l], 1, 1).unwrap(), &pws[l]).unwrap();
            let got = slice_channels(&grouped, 3 * l, 3 * l + 3).unwrap();
            assert!(rel_err(&got, &want) <= 1e-10);
        }
    }

    #[test]
    fn counted_standard_reports_all_taps() {
        let x = randn(&[5, 4, 2], 30);
        let k = randn(&[3, 3, 2, 3], 31);
        let (o, ops) = conv2d_standard_counted(&x, &k, 2, 1).unwrap();
        let (ho, wo) = (o.shape()[0], o.shape()[1]);
        assert_eq!(ops, (ho * wo * 9 * 2 * 3) as u64);
    }
}

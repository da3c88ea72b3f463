//! Forward passes of the factorized operators.
//!
//! Batch normalization and activations that would normally follow these
//! operators are not modelled; everything here is linear.

use crate::conv::{concat_channels, conv2d_depthwise_counted, conv2d_pointwise, conv2d_standard, pointwise_apply, slice_channels};
use crate::error::{Error, Result};
use crate::gep::{DpconvFactors, FalconFactors, FalconPair};
use crate::tensor::Tensor;

/// Pointwise (stride 1, full input) then depthwise (carrying `stride`, `padding`).
pub fn falcon_forward(input: &Tensor, f: &FalconFactors, stride: usize, padding: usize) -> Result<Tensor> {
    falcon_forward_counted(input, f, stride, padding).map(|(out, _)| out)
}

/// [`falcon_forward`] plus the number of multiply-adds executed.
pub fn falcon_forward_counted(
    input: &Tensor,
    f: &FalconFactors,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, u64)> {
    if f.rank() != 1 {
        return Err(Error::Shape(format!(
            "expected rank-1 factors, got rank {}",
            f.rank()
        )));
    }
    pair_forward(input, &f.pairs()[0], stride, padding)
}

fn pair_forward(input: &Tensor, pair: &FalconPair, stride: usize, padding: usize) -> Result<(Tensor, u64)> {
    let &[n, m] = pair.pointwise.shape() else {
        unreachable!()
    };
    let p = pair.pointwise.data();
    let (mid, pw_ops) = pointwise_apply(input, m, n, |c, o| p[o * m + c])?;
    let (out, dw_ops) = conv2d_depthwise_counted(&mid, &pair.depthwise, stride, padding)?;
    Ok((out, pw_ops + dw_ops))
}

/// Depthwise (carrying `stride`, `padding`) then pointwise.
pub fn dpconv_forward(input: &Tensor, f: &DpconvFactors, stride: usize, padding: usize) -> Result<Tensor> {
    let (mid, _) = conv2d_depthwise_counted(input, f.depthwise(), stride, padding)?;
    conv2d_pointwise(&mid, f.pointwise())
}

/// Sum of `k` independent rank-1 forward passes, accumulated in ascending `r`.
pub fn falcon_rank_k_forward(input: &Tensor, f: &FalconFactors, stride: usize, padding: usize) -> Result<Tensor> {
    let mut pairs = f.pairs().iter();
    let first = pairs.next().expect("factors hold at least one pair");
    let (mut acc, _) = pair_forward(input, first, stride, padding)?;
    for pair in pairs {
        let (term, _) = pair_forward(input, pair, stride, padding)?;
        acc = acc.add(&term)?;
    }
    Ok(acc)
}

/// Destination of channel `c` under a `groups`-way shuffle of `channels`.
pub fn shuffle_position(c: usize, channels: usize, groups: usize) -> usize {
    let per_group = channels / groups;
    (c % per_group) * groups + c / per_group
}

/// Reshape-(g, C/g), transpose, flatten permutation of the channel axis.
pub fn channel_shuffle(t: &Tensor, groups: usize) -> Result<Tensor> {
    t.expect_ndim(3)?;
    let c = t.shape()[2];
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!(
            "{groups} shuffle groups do not divide {c} channels"
        )));
    }
    let mut out = vec![0.0; t.numel()];
    for (px, src) in t.data().chunks_exact(c).enumerate() {
        let dst = &mut out[px * c..(px + 1) * c];
        for (ch, &v) in src.iter().enumerate() {
            dst[shuffle_position(ch, c, groups)] = v;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn split_halves(input: &Tensor) -> Result<(Tensor, Tensor)> {
    input.expect_ndim(3)?;
    let m = input.shape()[2];
    if m % 2 != 0 {
        return Err(Error::Shape(format!(
            "branch split needs an even channel count, got {m}"
        )));
    }
    Ok((slice_channels(input, 0, m / 2)?, slice_channels(input, m / 2, m)?))
}

fn merge_halves(left: Tensor, right: Tensor, input: &Tensor) -> Result<Tensor> {
    if left.shape() != right.shape() {
        return Err(Error::Geometry(format!(
            "left branch produced {:?} but the identity branch is {:?}; \
             the kernel must preserve the spatial size",
            left.shape(),
            right.shape()
        )));
    }
    debug_assert_eq!(left.shape()[..2], input.shape()[..2]);
    channel_shuffle(&concat_channels(&[left, right])?, 2)
}

/// First half of the channels through a stride-1 FALCON, second half
/// untouched, concatenated (left first) and shuffled with two groups.
///
/// `padding` must keep the spatial size, i.e. `D = 2·padding + 1`.
pub fn falcon_branch_forward(input: &Tensor, f: &FalconFactors, padding: usize) -> Result<Tensor> {
    let (left, right) = split_halves(input)?;
    let half = right.shape()[2];
    if f.in_channels() != half || f.out_channels() != half {
        return Err(Error::Shape(format!(
            "branch factors map {} -> {} channels, expected {half} -> {half}",
            f.in_channels(),
            f.out_channels()
        )));
    }
    let left = falcon_forward(&left, f, 1, padding)?;
    merge_halves(left, right, input)
}

/// Same structure as [`falcon_branch_forward`] with a standard convolution
/// (`D×D×(M/2)×(M/2)` kernel) on the left branch.
pub fn stconv_branch_forward(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let (left, right) = split_halves(input)?;
    let left = conv2d_standard(&left, kernel, 1, padding)?;
    merge_halves(left, right, input)
}

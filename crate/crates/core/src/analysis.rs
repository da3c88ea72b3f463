//! Parameter and FLOP counts per convolution type, and the compression and
//! computation-reduction rates derived from them.
//!
//! One FLOP is one multiply-add. Counts are evaluated in exact rational
//! arithmetic; a formula whose value is not an integer for the given
//! dimensions is reported as an error rather than rounded.

use std::fmt;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::tensor::ConvDims;

type Q = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvType {
    StConv,
    Falcon,
    FalconBranch,
    Dpconv,
    /// Pointwise-depthwise-pointwise with expansion ratio `t`.
    Pdpconv { t: f64 },
    /// Group-depthwise-group with `g` groups.
    Gdgconv { g: usize },
    PdpconvSplit,
    StconvBranch,
}

impl ConvType {
    pub const TAGS: [&'static str; 8] = [
        "stconv",
        "falcon",
        "falcon_branch",
        "dpconv",
        "pdpconv",
        "gdgconv",
        "pdpconv_split",
        "stconv_branch",
    ];

    /// Builds a type from its tag. `t` is required by `pdpconv` and `g` by
    /// `gdgconv`; both are rejected elsewhere.
    pub fn from_tag(tag: &str, t: Option<f64>, g: Option<usize>) -> Result<Self> {
        let ty = match tag {
            "stconv" => ConvType::StConv,
            "falcon" => ConvType::Falcon,
            "falcon_branch" => ConvType::FalconBranch,
            "dpconv" => ConvType::Dpconv,
            "pdpconv" => {
                let t = t.ok_or_else(|| Error::Config("pdpconv needs an expansion ratio t".into()))?;
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::Config(format!("expansion ratio must be positive, got {t}")));
                }
                ConvType::Pdpconv { t }
            }
            "gdgconv" => {
                let g = g.ok_or_else(|| Error::Config("gdgconv needs a group count g".into()))?;
                if g == 0 {
                    return Err(Error::Config("group count must be at least 1".into()));
                }
                ConvType::Gdgconv { g }
            }
            "pdpconv_split" => ConvType::PdpconvSplit,
            "stconv_branch" => ConvType::StconvBranch,
            other => return Err(Error::Config(format!("unknown convolution type '{other}'"))),
        };
        if t.is_some() && !matches!(ty, ConvType::Pdpconv { .. }) {
            return Err(Error::Config(format!("t is only valid for pdpconv, not {tag}")));
        }
        if g.is_some() && !matches!(ty, ConvType::Gdgconv { .. }) {
            return Err(Error::Config(format!("g is only valid for gdgconv, not {tag}")));
        }
        Ok(ty)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ConvType::StConv => "stconv",
            ConvType::Falcon => "falcon",
            ConvType::FalconBranch => "falcon_branch",
            ConvType::Dpconv => "dpconv",
            ConvType::Pdpconv { .. } => "pdpconv",
            ConvType::Gdgconv { .. } => "gdgconv",
            ConvType::PdpconvSplit => "pdpconv_split",
            ConvType::StconvBranch => "stconv_branch",
        }
    }
}

impl fmt::Display for ConvType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One layer of an architecture. `rank` only affects `falcon` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub dims: ConvDims,
    pub conv: ConvType,
    pub rank: usize,
}

fn q(v: usize) -> Q {
    Q::from_integer(v as i128)
}

fn expansion(t: f64) -> Result<Q> {
    let r = Ratio::<i64>::approximate_float(t)
        .ok_or_else(|| Error::Count(format!("expansion ratio {t} has no rational form")))?;
    Ok(Q::new(*r.numer() as i128, *r.denom() as i128))
}

fn require_square(conv: ConvType, dims: &ConvDims) -> Result<()> {
    if dims.in_channels != dims.out_channels {
        return Err(Error::Count(format!(
            "{conv} requires M = N, got M={} N={}",
            dims.in_channels, dims.out_channels
        )));
    }
    Ok(())
}

fn check_rank(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Count("rank must be at least 1".into()));
    }
    Ok(())
}

/// `(params, flops)` as exact rationals.
fn counts(conv: ConvType, dims: &ConvDims, k: usize) -> Result<(Q, Q)> {
    dims.validate()?;
    check_rank(k)?;
    let (ho, wo) = dims.output_size()?;
    let d2 = q(dims.kernel * dims.kernel);
    let (m, n) = (q(dims.in_channels), q(dims.out_channels));
    let hw = q(dims.height * dims.width);
    let ow = q(ho * wo);
    let half = Q::new(1, 2);
    let quarter = Q::new(1, 4);
    Ok(match conv {
        ConvType::StConv => (d2 * m * n, ow * d2 * m * n),
        ConvType::Falcon => {
            let k = q(k);
            (k * (m * n + d2 * n), k * (hw * m * n + ow * d2 * n))
        }
        ConvType::FalconBranch => {
            require_square(conv, dims)?;
            (
                quarter * m * m + half * d2 * m,
                quarter * hw * m * m + half * hw * d2 * m,
            )
        }
        ConvType::Dpconv => (m * n + d2 * m, hw * d2 * m + ow * m * n),
        ConvType::Pdpconv { t } => {
            let t = expansion(t)?;
            (
                t * (m * m + d2 * m + m * n),
                t * (hw * m * m + ow * d2 * m + ow * m * n),
            )
        }
        ConvType::Gdgconv { g } => {
            if g == 0 || dims.in_channels % g != 0 || dims.out_channels % g != 0 {
                return Err(Error::Count(format!(
                    "gdgconv groups g={g} must divide M={} and N={}",
                    dims.in_channels, dims.out_channels
                )));
            }
            let g = q(g);
            (
                quarter * (m * n / g + d2 * n + n * n / g),
                quarter * (hw * m * n / g + ow * d2 * n + ow * n * n / g),
            )
        }
        ConvType::PdpconvSplit => {
            require_square(conv, dims)?;
            (half * (m * m + d2 * m), half * hw * (m * m + d2 * m))
        }
        ConvType::StconvBranch => {
            require_square(conv, dims)?;
            (quarter * d2 * m * m, quarter * hw * d2 * m * m)
        }
    })
}

fn integral(v: Q, what: &str, conv: ConvType, dims: &ConvDims) -> Result<u64> {
    if !v.is_integer() {
        return Err(Error::Count(format!(
            "{conv} {what} is not an integer ({v}) for D={} M={} N={}",
            dims.kernel, dims.in_channels, dims.out_channels
        )));
    }
    u64::try_from(v.to_integer()).map_err(|_| Error::Count(format!("{conv} {what} overflows")))
}

pub fn count_params(conv: ConvType, dims: &ConvDims, k: usize) -> Result<u64> {
    let (p, _) = counts(conv, dims, k)?;
    integral(p, "parameter count", conv, dims)
}

pub fn count_flops(conv: ConvType, dims: &ConvDims, k: usize) -> Result<u64> {
    let (_, f) = counts(conv, dims, k)?;
    integral(f, "FLOP count", conv, dims)
}

/// Standard-convolution parameters over rank-`k` FALCON parameters.
pub fn compression_rate_exact(dims: &ConvDims, k: usize) -> Result<Ratio<u64>> {
    let st = count_params(ConvType::StConv, dims, 1)?;
    let fa = count_params(ConvType::Falcon, dims, k)?;
    Ok(Ratio::new(st, fa))
}

/// Standard-convolution FLOPs over rank-`k` FALCON FLOPs.
pub fn computation_reduction_rate_exact(dims: &ConvDims, k: usize) -> Result<Ratio<u64>> {
    let st = count_flops(ConvType::StConv, dims, 1)?;
    let fa = count_flops(ConvType::Falcon, dims, k)?;
    Ok(Ratio::new(st, fa))
}

pub fn compression_rate(dims: &ConvDims, k: usize) -> Result<f64> {
    compression_rate_exact(dims, k).map(ratio_to_f64)
}

pub fn computation_reduction_rate(dims: &ConvDims, k: usize) -> Result<f64> {
    computation_reduction_rate_exact(dims, k).map(ratio_to_f64)
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub conv: ConvType,
    pub rank: usize,
    pub params: u64,
    pub flops: u64,
    pub stconv_params: u64,
    pub stconv_flops: u64,
}

/// Counts for a list of convolution layers. Non-convolution layers
/// (normalization, activations, pooling) are not represented.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureReport {
    pub layers: Vec<LayerReport>,
    pub total_params: u64,
    pub total_flops: u64,
    pub stconv_params: u64,
    pub stconv_flops: u64,
}

impl ArchitectureReport {
    pub fn compression_rate_exact(&self) -> Ratio<u64> {
        Ratio::new(self.stconv_params, self.total_params)
    }

    pub fn computation_reduction_rate_exact(&self) -> Ratio<u64> {
        Ratio::new(self.stconv_flops, self.total_flops)
    }

    pub fn compression_rate(&self) -> f64 {
        ratio_to_f64(self.compression_rate_exact())
    }

    pub fn computation_reduction_rate(&self) -> f64 {
        ratio_to_f64(self.computation_reduction_rate_exact())
    }
}

pub fn analyze_architecture(layers: &[LayerSpec]) -> Result<ArchitectureReport> {
    let mut report = ArchitectureReport {
        layers: Vec::with_capacity(layers.len()),
        total_params: 0,
        total_flops: 0,
        stconv_params: 0,
        stconv_flops: 0,
    };
    for layer in layers {
        let tagged = |e: Error| Error::Layer {
            name: layer.name.clone(),
            source: Box::new(e),
        };
        let row = LayerReport {
            name: layer.name.clone(),
            conv: layer.conv,
            rank: layer.rank,
            params: count_params(layer.conv, &layer.dims, layer.rank).map_err(tagged)?,
            flops: count_flops(layer.conv, &layer.dims, layer.rank).map_err(tagged)?,
            stconv_params: count_params(ConvType::StConv, &layer.dims, 1).map_err(tagged)?,
            stconv_flops: count_flops(ConvType::StConv, &layer.dims, 1).map_err(tagged)?,
        };
        report.total_params += row.params;
        report.total_flops += row.flops;
        report.stconv_params += row.stconv_params;
        report.stconv_flops += row.stconv_flops;
        report.layers.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(d: usize, m: usize, n: usize, h: usize, s: usize, p: usize) -> ConvDims {
        ConvDims::new(d, m, n, h, h, s, p).unwrap()
    }

    #[test]
    fn stconv_and_falcon_examples() {
        let d = dims(3, 64, 64, 32, 1, 1);
        assert_eq!(count_params(ConvType::StConv, &d, 1), Ok(36864));
        assert_eq!(count_params(ConvType::Falcon, &d, 1), Ok(4672));
        assert_eq!(count_params(ConvType::Falcon, &d, 2), Ok(9344));
        assert_eq!(count_flops(ConvType::StConv, &d, 1), Ok(37_748_736));
        assert_eq!(count_flops(ConvType::Falcon, &d, 1), Ok(4_784_128));
    }

    #[test]
    fn pointwise_only_falcon() {
        let d = dims(1, 5, 7, 6, 1, 0);
        let hw = 36;
        assert_eq!(count_flops(ConvType::Falcon, &d, 1), Ok(hw * 35 + hw * 7));
    }

    #[test]
    fn rates_examples() {
        let d = dims(3, 64, 64, 32, 1, 1);
        assert_eq!(compression_rate_exact(&d, 1).unwrap(), Ratio::new(36864, 4672));
        assert!((compression_rate(&d, 1).unwrap() - 7.8904).abs() < 1e-4);
        assert!((compression_rate(&d, 2).unwrap() - 3.9452).abs() < 1e-4);
        assert!((computation_reduction_rate(&d, 1).unwrap() - 7.8904).abs() < 1e-4);
        assert_eq!(
            computation_reduction_rate_exact(&d, 3).unwrap() * 3,
            computation_reduction_rate_exact(&d, 1).unwrap()
        );

        let d1 = dims(1, 3, 7, 5, 1, 0);
        assert_eq!(compression_rate_exact(&d1, 1).unwrap(), Ratio::new(3, 4));
        assert_eq!(computation_reduction_rate_exact(&d1, 1).unwrap(), Ratio::new(3, 4));
    }

    #[test]
    fn other_rows() {
        let d = dims(3, 8, 8, 4, 1, 1);
        // M = N = 8, D² = 9, HW = H'W' = 16
        assert_eq!(count_params(ConvType::FalconBranch, &d, 1), Ok(16 + 36));
        assert_eq!(count_flops(ConvType::FalconBranch, &d, 1), Ok(16 * 16 + 16 * 36));
        assert_eq!(count_params(ConvType::Dpconv, &d, 1), Ok(64 + 72));
        assert_eq!(count_flops(ConvType::Dpconv, &d, 1), Ok(16 * 72 + 16 * 64));
        assert_eq!(count_params(ConvType::Pdpconv { t: 2.0 }, &d, 1), Ok(2 * (64 + 72 + 64)));
        assert_eq!(count_params(ConvType::Pdpconv { t: 0.5 }, &d, 1), Ok(100));
        assert_eq!(count_params(ConvType::Gdgconv { g: 2 }, &d, 1), Ok((32 + 72 + 32) / 4));
        assert_eq!(count_params(ConvType::PdpconvSplit, &d, 1), Ok((64 + 72) / 2));
        assert_eq!(count_flops(ConvType::PdpconvSplit, &d, 1), Ok(16 * (64 + 72) / 2));
        assert_eq!(count_params(ConvType::StconvBranch, &d, 1), Ok(9 * 64 / 4));
        assert_eq!(count_flops(ConvType::StconvBranch, &d, 1), Ok(16 * 9 * 64 / 4));
    }

    #[test]
    fn dpconv_flops_use_input_extent_for_depthwise_term() {
        let d = dims(3, 4, 6, 8, 2, 1);
        // H'W' = 16, HW = 64
        assert_eq!(count_flops(ConvType::Dpconv, &d, 1), Ok(64 * 9 * 4 + 16 * 24));
    }

    #[test]
    fn count_errors() {
        let rect = dims(3, 4, 6, 8, 1, 1);
        for ty in [ConvType::FalconBranch, ConvType::PdpconvSplit, ConvType::StconvBranch] {
            assert!(matches!(count_params(ty, &rect, 1), Err(Error::Count(_))));
        }
        assert!(matches!(
            count_params(ConvType::Gdgconv { g: 4 }, &rect, 1),
            Err(Error::Count(_))
        ));
        let odd = dims(3, 3, 3, 4, 1, 1);
        assert!(matches!(count_params(ConvType::FalconBranch, &odd, 1), Err(Error::Count(_))));
        assert!(matches!(count_params(ConvType::Pdpconv { t: 0.1 }, &odd, 1), Err(Error::Count(_))));
        assert!(matches!(count_params(ConvType::Falcon, &odd, 0), Err(Error::Count(_))));
    }

    #[test]
    fn from_tag_round_trip_and_errors() {
        for tag in ConvType::TAGS {
            let t = (tag == "pdpconv").then_some(2.0);
            let g = (tag == "gdgconv").then_some(2);
            assert_eq!(ConvType::from_tag(tag, t, g).unwrap().tag(), tag);
        }
        assert!(ConvType::from_tag("pdpconv", None, None).is_err());
        assert!(ConvType::from_tag("pdpconv", Some(-1.0), None).is_err());
        assert!(ConvType::from_tag("gdgconv", None, Some(0)).is_err());
        assert!(ConvType::from_tag("falcon", Some(2.0), None).is_err());
        assert!(ConvType::from_tag("conv", None, None).is_err());
    }

    #[test]
    fn architecture_totals() {
        let layer = |name: &str, conv| LayerSpec {
            name: name.into(),
            dims: dims(3, 64, 64, 32, 1, 1),
            conv,
            rank: 1,
        };
        let one = analyze_architecture(&[layer("a", ConvType::StConv)]).unwrap();
        assert_eq!((one.total_params, one.total_flops), (36864, 37_748_736));
        assert_eq!(one.compression_rate_exact(), Ratio::from_integer(1));

        let two = analyze_architecture(&[layer("a", ConvType::Falcon), layer("b", ConvType::Falcon)]).unwrap();
        assert_eq!((two.total_params, two.total_flops), (2 * 4672, 2 * 4_784_128));
        assert_eq!(two.compression_rate_exact(), Ratio::new(36864, 4672));

        let bad = LayerSpec {
            dims: dims(3, 4, 6, 8, 1, 1),
            ..layer("odd", ConvType::StconvBranch)
        };
        match analyze_architecture(&[bad]) {
            Err(Error::Layer { name, .. }) => assert_eq!(name, "odd"),
            other => panic!("expected a layer error, got {other:?}"),
        }
    }
}

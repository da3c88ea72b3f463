//! Fitting factor pairs to a trained `D×D×M×N` kernel.
//!
//! The objective `‖K − Σ_r TT(D^(r) ⊙ P^(r))‖_F` decouples over output
//! channels: output slice `n` unfolds to a `D²×M` matrix that the factors
//! approximate with rank `k`. [`fit_svd`] solves every slice in closed form
//! by truncated SVD; [`fit_iterative`] runs full-batch AdamW on all factor
//! entries jointly. Both return factors in the canonical gauge of
//! [`normalize_factors`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gep::{gep_dpconv, gep_rank_k, DpconvFactors, FalconFactors, FalconPair};
use crate::optim::AdamW;
pub use crate::svd::SingularTriplet;
use crate::svd::svd;
use crate::tensor::{frobenius_norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Svd,
    Iterative,
}

/// Which axis the two factors share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Pointwise then depthwise, common axis = output channels.
    Falcon,
    /// Depthwise then pointwise, common axis = input channels.
    Dpconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    WarmSvd,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub method: Method,
    pub rank: usize,
    pub orientation: Orientation,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once `|Δresidual| ≤ tolerance · residual` between iterates.
    pub tolerance: f64,
    pub seed: u64,
    pub init: Init,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            method: Method::Svd,
            rank: 1,
            orientation: Orientation::Falcon,
            learning_rate: 1e-3,
            max_iters: 1000,
            tolerance: 1e-8,
            seed: 0,
            init: Init::WarmSvd,
        }
    }
}

impl FitConfig {
    /// Checks the configuration against a kernel of the given shape.
    pub fn validate(&self, kernel_shape: &[usize]) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be nonnegative, got {}",
                self.tolerance
            )));
        }
        match self.orientation {
            Orientation::Falcon => {
                let max = max_rank(kernel_shape)?;
                if self.rank > max {
                    return Err(Error::RankTooLarge { k: self.rank, max });
                }
            }
            Orientation::Dpconv => {
                if self.rank != 1 {
                    return Err(Error::RankTooLarge { k: self.rank, max: 1 });
                }
            }
        }
        Ok(())
    }
}

/// Fitted factors of either orientation.
#[derive(Debug, Clone, PartialEq)]
pub enum Factors {
    Falcon(FalconFactors),
    Dpconv(DpconvFactors),
}

impl Factors {
    pub fn reconstruct(&self) -> Result<Tensor> {
        match self {
            Factors::Falcon(f) => gep_rank_k(f),
            Factors::Dpconv(f) => gep_dpconv(f),
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        match self {
            Factors::Falcon(f) => f.kernel_shape(),
            Factors::Dpconv(f) => f.kernel_shape(),
        }
    }
}

/// `min(D², M)`: the rank beyond which output slices are reproduced exactly.
pub fn max_rank(kernel_shape: &[usize]) -> Result<usize> {
    let &[d1, d2, m, _] = kernel_shape else {
        return Err(Error::RankMismatch {
            expected: 4,
            got: kernel_shape.len(),
        });
    };
    Ok((d1 * d2).min(m))
}

fn kernel_dims(k: &Tensor) -> Result<(usize, usize, usize)> {
    k.expect_ndim(4)?;
    let &[d1, d2, m, n] = k.shape() else {
        unreachable!()
    };
    if d1 != d2 {
        return Err(Error::Shape(format!("kernel {:?} is not square", k.shape())));
    }
    Ok((d1, m, n))
}

/// Leading `k` singular triplets of a row-major `rows×cols` matrix, in
/// descending order of singular value.
pub fn truncated_svd(rows: usize, cols: usize, data: &[f64], k: usize) -> Vec<SingularTriplet> {
    let mut all = svd(rows, cols, data);
    all.truncate(k);
    all
}

/// All singular values of a 2-way tensor, descending.
pub fn singular_values(matrix: &Tensor) -> Result<Vec<f64>> {
    matrix.expect_ndim(2)?;
    let &[rows, cols] = matrix.shape() else {
        unreachable!()
    };
    Ok(svd(rows, cols, matrix.data()).into_iter().map(|t| t.value).collect())
}

/// Closed-form best rank-`k` pointwise-then-depthwise factors.
pub fn fit_svd(kernel: &Tensor, k: usize) -> Result<FalconFactors> {
    let (d, m, n) = kernel_dims(kernel)?;
    let max = max_rank(kernel.shape())?;
    if k == 0 || k > max {
        return Err(Error::RankTooLarge { k, max });
    }
    let taps = d * d;
    let mut pw = vec![vec![0.0; n * m]; k];
    let mut dw = vec![vec![0.0; taps * n]; k];
    let kd = kernel.data();
    for out in 0..n {
        // D²×M unfolding of output channel `out`
        let slice: Vec<f64> = kd.iter().skip(out).step_by(n).copied().collect();
        for (r, trip) in truncated_svd(taps, m, &slice, k).into_iter().enumerate() {
            let root = trip.value.sqrt();
            for (tap, u) in trip.left.iter().enumerate() {
                dw[r][tap * n + out] = root * u;
            }
            for (c, v) in trip.right.iter().enumerate() {
                pw[r][out * m + c] = root * v;
            }
        }
    }
    let pairs = pw
        .into_iter()
        .zip(dw)
        .map(|(p, q)| {
            Ok(FalconPair {
                pointwise: Tensor::new(vec![n, m], p)?,
                depthwise: Tensor::new(vec![d, d, n], q)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_factors(FalconFactors::new(pairs)?))
}

/// Closed-form best depthwise-then-pointwise factors: each input channel's
/// `D²×N` unfolding is approximated with rank 1.
pub fn fit_dpconv_svd(kernel: &Tensor) -> Result<DpconvFactors> {
    let (d, m, n) = kernel_dims(kernel)?;
    let taps = d * d;
    let kd = kernel.data();
    let mut dw = vec![0.0; taps * m];
    let mut pw = vec![0.0; m * n];
    for c in 0..m {
        let mut slice = Vec::with_capacity(taps * n);
        for tap in 0..taps {
            let base = (tap * m + c) * n;
            slice.extend_from_slice(&kd[base..base + n]);
        }
        if let Some(trip) = truncated_svd(taps, n, &slice, 1).into_iter().next() {
            let root = trip.value.sqrt();
            for (tap, u) in trip.left.iter().enumerate() {
                dw[tap * m + c] = root * u;
            }
            for (o, v) in trip.right.iter().enumerate() {
                pw[c * n + o] = root * v;
            }
        }
    }
    let f = DpconvFactors::new(Tensor::new(vec![d, d, m], dw)?, Tensor::new(vec![m, n], pw)?)?;
    Ok(normalize_dpconv(f))
}

/// Depthwise-then-pointwise fit by the method in `cfg` (rank is always 1).
pub fn fit_dpconv(kernel: &Tensor, cfg: &FitConfig) -> Result<DpconvFactors> {
    let cfg = FitConfig {
        orientation: Orientation::Dpconv,
        rank: 1,
        ..cfg.clone()
    };
    match cfg.method {
        Method::Svd => fit_dpconv_svd(kernel),
        Method::Iterative => match fit_iterative(kernel, &cfg)?.factors {
            Factors::Dpconv(f) => Ok(f),
            Factors::Falcon(_) => unreachable!("dpconv orientation yields dpconv factors"),
        },
    }
}

/// Dispatches on `cfg.method` and `cfg.orientation`.
pub fn fit(kernel: &Tensor, cfg: &FitConfig) -> Result<Factors> {
    cfg.validate(kernel.shape())?;
    match (cfg.method, cfg.orientation) {
        (Method::Svd, Orientation::Falcon) => fit_svd(kernel, cfg.rank).map(Factors::Falcon),
        (Method::Svd, Orientation::Dpconv) => fit_dpconv_svd(kernel).map(Factors::Dpconv),
        (Method::Iterative, _) => fit_iterative(kernel, cfg).map(|r| r.factors),
    }
}

/// `‖K − reconstruct(factors)‖_F`.
pub fn residual(kernel: &Tensor, factors: &Factors) -> Result<f64> {
    let rebuilt = factors.reconstruct()?;
    if rebuilt.shape() != kernel.shape() {
        return Err(Error::Shape(format!(
            "factors reconstruct {:?} but the kernel is {:?}",
            rebuilt.shape(),
            kernel.shape()
        )));
    }
    Ok(frobenius_norm(&kernel.sub(&rebuilt)?))
}

/// Gradient of `‖reconstruct(f) − K‖_F²` with respect to every factor entry,
/// laid out like `f`.
pub fn objective_gradient(kernel: &Tensor, f: &FalconFactors) -> Result<FalconFactors> {
    let diff = gep_rank_k(f)?;
    if diff.shape() != kernel.shape() {
        return Err(Error::Shape(format!(
            "factors reconstruct {:?} but the kernel is {:?}",
            diff.shape(),
            kernel.shape()
        )));
    }
    let diff = diff.sub(kernel)?;
    let [d, _, m, n] = f.kernel_shape();
    let taps = d * d;
    let rd = diff.data();
    let pairs = f
        .pairs()
        .iter()
        .map(|pair| {
            let p = pair.pointwise.data();
            let q = pair.depthwise.data();
            let mut gp = vec![0.0; n * m];
            let mut gq = vec![0.0; taps * n];
            for tap in 0..taps {
                for c in 0..m {
                    let base = (tap * m + c) * n;
                    for o in 0..n {
                        let r = rd[base + o];
                        gp[o * m + c] += 2.0 * r * q[tap * n + o];
                        gq[tap * n + o] += 2.0 * r * p[o * m + c];
                    }
                }
            }
            Ok(FalconPair {
                pointwise: Tensor::new(vec![n, m], gp)?,
                depthwise: Tensor::new(vec![d, d, n], gq)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FalconFactors::new(pairs)
}

/// Gradient of `‖D ⊙ P − K‖_F²` for depthwise-then-pointwise factors.
pub fn objective_gradient_dpconv(kernel: &Tensor, f: &DpconvFactors) -> Result<DpconvFactors> {
    let diff = gep_dpconv(f)?;
    if diff.shape() != kernel.shape() {
        return Err(Error::Shape(format!(
            "factors reconstruct {:?} but the kernel is {:?}",
            diff.shape(),
            kernel.shape()
        )));
    }
    let diff = diff.sub(kernel)?;
    let [d, _, m, n] = f.kernel_shape();
    let rd = diff.data();
    let p = f.pointwise().data();
    let q = f.depthwise().data();
    let mut gq = vec![0.0; d * d * m];
    let mut gp = vec![0.0; m * n];
    for tap in 0..d * d {
        for c in 0..m {
            let base = (tap * m + c) * n;
            for o in 0..n {
                let r = rd[base + o];
                gq[tap * m + c] += 2.0 * r * p[c * n + o];
                gp[c * n + o] += 2.0 * r * q[tap * m + c];
            }
        }
    }
    DpconvFactors::new(Tensor::new(vec![d, d, m], gq)?, Tensor::new(vec![m, n], gp)?)
}

/// Result of [`fit_iterative`].
#[derive(Debug, Clone, PartialEq)]
pub struct IterativeFit {
    pub factors: Factors,
    /// Optimizer steps taken.
    pub iterations: usize,
}

/// Flat parameter view used by the optimizer. Falcon factors are laid out
/// pair by pair as `[P^(r), D^(r)]`, dpconv factors as `[D, P]`.
struct Layout {
    orientation: Orientation,
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    rank: usize,
}

impl Layout {
    fn pointwise_len(&self) -> usize {
        self.in_channels * self.out_channels
    }

    fn depthwise_len(&self) -> usize {
        let ch = match self.orientation {
            Orientation::Falcon => self.out_channels,
            Orientation::Dpconv => self.in_channels,
        };
        self.kernel * self.kernel * ch
    }

    fn len(&self) -> usize {
        self.rank * (self.pointwise_len() + self.depthwise_len())
    }

    fn flatten(&self, f: &Factors) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        match f {
            Factors::Falcon(f) => {
                for pair in f.pairs() {
                    out.extend_from_slice(pair.pointwise.data());
                    out.extend_from_slice(pair.depthwise.data());
                }
            }
            Factors::Dpconv(f) => {
                out.extend_from_slice(f.depthwise().data());
                out.extend_from_slice(f.pointwise().data());
            }
        }
        out
    }

    fn unflatten(&self, params: &[f64]) -> Result<Factors> {
        let (d, m, n) = (self.kernel, self.in_channels, self.out_channels);
        match self.orientation {
            Orientation::Falcon => {
                let stride = self.pointwise_len() + self.depthwise_len();
                let pairs = params
                    .chunks_exact(stride)
                    .map(|chunk| {
                        let (p, q) = chunk.split_at(self.pointwise_len());
                        Ok(FalconPair {
                            pointwise: Tensor::new(vec![n, m], p.to_vec())?,
                            depthwise: Tensor::new(vec![d, d, n], q.to_vec())?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Factors::Falcon(FalconFactors::new(pairs)?))
            }
            Orientation::Dpconv => {
                let (q, p) = params.split_at(self.depthwise_len());
                Ok(Factors::Dpconv(DpconvFactors::new(
                    Tensor::new(vec![d, d, m], q.to_vec())?,
                    Tensor::new(vec![m, n], p.to_vec())?,
                )?))
            }
        }
    }

    /// Residual and flattened gradient at `params`.
    fn evaluate(&self, kernel: &Tensor, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let factors = self.unflatten(params)?;
        let res = residual(kernel, &factors)?;
        let grad = match &factors {
            Factors::Falcon(f) => self.flatten(&Factors::Falcon(objective_gradient(kernel, f)?)),
            Factors::Dpconv(f) => self.flatten(&Factors::Dpconv(objective_gradient_dpconv(kernel, f)?)),
        };
        Ok((res, grad))
    }
}

/// Full-batch AdamW (weight decay 0) on the squared Frobenius residual.
///
/// Stops after `cfg.max_iters` steps or once the residual changes by at most
/// `cfg.tolerance` relative to its previous value. The final iterate is
/// returned, canonically normalized.
pub fn fit_iterative(kernel: &Tensor, cfg: &FitConfig) -> Result<IterativeFit> {
    cfg.validate(kernel.shape())?;
    let (d, m, n) = kernel_dims(kernel)?;
    let layout = Layout {
        orientation: cfg.orientation,
        kernel: d,
        in_channels: m,
        out_channels: n,
        rank: cfg.rank,
    };
    let mut params = match cfg.init {
        Init::WarmSvd => {
            let warm = match cfg.orientation {
                Orientation::Falcon => Factors::Falcon(fit_svd(kernel, cfg.rank)?),
                Orientation::Dpconv => Factors::Dpconv(fit_dpconv_svd(kernel)?),
            };
            layout.flatten(&warm)
        }
        Init::Random => {
            let scale = frobenius_norm(kernel) / (d as f64 * ((m * n) as f64).sqrt());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Tensor::randn(&[layout.len()], &mut rng)?.scale(scale).into_data()
        }
    };

    let mut opt = AdamW::new(cfg.learning_rate, params.len()).with_weight_decay(0.0);
    let mut prev: Option<f64> = None;
    let mut iterations = 0;
    loop {
        let (res, grad) = layout.evaluate(kernel, &params)?;
        if !res.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: iterations,
            });
        }
        let converged = res == 0.0 || prev.is_some_and(|p| (p - res).abs() <= cfg.tolerance * p);
        if converged || iterations == cfg.max_iters {
            break;
        }
        opt.step(&mut params, &grad);
        iterations += 1;
        prev = Some(res);
    }

    let factors = match layout.unflatten(&params)? {
        Factors::Falcon(f) => Factors::Falcon(normalize_factors(f)),
        Factors::Dpconv(f) => Factors::Dpconv(normalize_dpconv(f)),
    };
    Ok(IterativeFit { factors, iterations })
}

/// Rescales one factor pair so both parts have equal norm and the
/// largest-magnitude depthwise entry is positive. `a` is the depthwise
/// part, `b` the pointwise part; zero parts are left alone.
fn balance(a: &mut [f64], b: &mut [f64]) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let c = (nb / na).sqrt();
    let pivot = a
        .iter()
        .copied()
        .reduce(|best, v| if v.abs() > best.abs() { v } else { best })
        .unwrap_or(0.0);
    let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
    a.iter_mut().for_each(|v| *v *= sign * c);
    b.iter_mut().for_each(|v| *v *= sign / c);
}

/// Canonical gauge for pointwise-then-depthwise factors: for every `r` and
/// output channel `n`, `‖D^(r)[:,:,n]‖ = ‖P^(r)[n,:]‖` and the
/// largest-magnitude entry of `D^(r)[:,:,n]` is positive.
pub fn normalize_factors(f: FalconFactors) -> FalconFactors {
    let [_, _, m, n] = f.kernel_shape();
    let pairs = f
        .into_pairs()
        .into_iter()
        .map(|mut pair| {
            let taps = pair.depthwise.numel() / n;
            for o in 0..n {
                let mut dcol: Vec<f64> = (0..taps).map(|t| pair.depthwise.data()[t * n + o]).collect();
                let prow = &mut pair.pointwise.data_mut()[o * m..(o + 1) * m];
                balance(&mut dcol, prow);
                for (t, v) in dcol.into_iter().enumerate() {
                    pair.depthwise.data_mut()[t * n + o] = v;
                }
            }
            pair
        })
        .collect();
    FalconFactors::new(pairs).expect("normalization preserves shapes")
}

/// Canonical gauge for depthwise-then-pointwise factors, per input channel.
pub fn normalize_dpconv(f: DpconvFactors) -> DpconvFactors {
    let [_, _, m, n] = f.kernel_shape();
    let (mut dw, mut pw) = f.into_parts();
    let taps = dw.numel() / m;
    for c in 0..m {
        let mut dcol: Vec<f64> = (0..taps).map(|t| dw.data()[t * m + c]).collect();
        balance(&mut dcol, &mut pw.data_mut()[c * n..(c + 1) * n]);
        for (t, v) in dcol.into_iter().enumerate() {
            dw.data_mut()[t * m + c] = v;
        }
    }
    DpconvFactors::new(dw, pw).expect("normalization preserves shapes")
}

//! Structural reparameterization of a MobileOne depthwise block.
//!
//! During training the block sums `k` parallel 3x3 conv+BN branches, a 1x1
//! conv+BN branch and an optional BN-only shortcut. Every branch is linear,
//! so the sum collapses into one 3x3 convolution for inference. The tensors
//! here are small dense reference implementations used to check that
//! collapse numerically. Activations sit outside the fused unit.

use std::fmt::Debug;

use num_traits::{Float, NumCast};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of the reference tensors.
pub trait Scalar: Float + Debug + Send + Sync + Serialize + for<'de> Deserialize<'de> + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn cast<T: Scalar, U: Scalar>(v: T) -> U {
    <U as NumCast>::from(v).expect("finite float converts")
}

/// Dense `(batch, channels, height, width)` tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor4<T = f64> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite tensor value".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| cast(v)).collect() }
    }

    fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }
}

/// Grouped convolution weights. `kernel_shape` is
/// `(out_channels, in_channels / groups, kh, kw)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConvParams<T = f64> {
    pub kernel_shape: [usize; 4],
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub groups: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(out_channels: usize, in_per_group: usize, k: usize, groups: usize) -> Self {
        Self {
            kernel_shape: [out_channels, in_per_group, k, k],
            kernel: vec![T::zero(); out_channels * in_per_group * k * k],
            bias: vec![T::zero(); out_channels],
            groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel_shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel_shape[1] * self.groups
    }

    pub fn validate(&self) -> Result<()> {
        let [o, i, kh, kw] = self.kernel_shape;
        if self.groups == 0 || o % self.groups != 0 {
            return Err(Error::Shape(format!("{o} output channels not divisible by {} groups", self.groups)));
        }
        if o == 0 || i == 0 || ![1, 3].contains(&kh) || ![1, 3].contains(&kw) {
            return Err(Error::Shape(format!("kernel shape {:?}", self.kernel_shape)));
        }
        if self.kernel.len() != o * i * kh * kw || self.bias.len() != o {
            return Err(Error::Shape(format!(
                "{} weights, {} biases for kernel shape {:?}",
                self.kernel.len(),
                self.bias.len(),
                self.kernel_shape
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, y: usize, x: usize) -> usize {
        let [_, ni, kh, kw] = self.kernel_shape;
        ((o * ni + i) * kh + y) * kw + x
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            kernel_shape: self.kernel_shape,
            kernel: self.kernel.iter().map(|&v| cast(v)).collect(),
            bias: self.bias.iter().map(|&v| cast(v)).collect(),
            groups: self.groups,
        }
    }

    fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.kernel_shape != other.kernel_shape || self.groups != other.groups {
            return Err(Error::Shape(format!(
                "cannot sum kernels {:?}/{} and {:?}/{}",
                self.kernel_shape, self.groups, other.kernel_shape, other.groups
            )));
        }
        for (a, b) in self.kernel.iter_mut().zip(&other.kernel) {
            *a = *a + *b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a = *a + *b;
        }
        Ok(())
    }
}

/// Inference-mode batch norm: `gamma (x - mean) / sqrt(var + eps) + beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BnParams<T = f64> {
    pub mean: Vec<T>,
    pub variance: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub epsilon: T,
}

impl<T: Scalar> BnParams<T> {
    /// Statistics that make the normalization an exact identity.
    pub fn identity(channels: usize, epsilon: T) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            variance: vec![T::one() - epsilon; channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.mean.len();
        if self.variance.len() != c || self.gamma.len() != c || self.beta.len() != c {
            return Err(Error::Shape("batch norm vectors differ in length".into()));
        }
        if self.epsilon <= T::zero() || self.variance.iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidArgument("batch norm needs variance >= 0 and epsilon > 0".into()));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` of the affine map.
    pub fn affine(&self) -> Vec<(T, T)> {
        (0..self.channels())
            .map(|c| {
                let s = self.gamma[c] / (self.variance[c] + self.epsilon).sqrt();
                (s, self.beta[c] - self.mean[c] * s)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> BnParams<U> {
        let f = |v: &Vec<T>| v.iter().map(|&x| cast(x)).collect();
        BnParams {
            mean: f(&self.mean),
            variance: f(&self.variance),
            gamma: f(&self.gamma),
            beta: f(&self.beta),
            epsilon: cast(self.epsilon),
        }
    }
}

/// Reference cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>, stride: usize, padding: usize) -> Result<Tensor4<T>> {
    p.validate()?;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let [n, c, h, w] = x.shape;
    if c != p.in_channels() {
        return Err(Error::Shape(format!("input has {c} channels, kernel expects {}", p.in_channels())));
    }
    let [oc, ipg, kh, kw] = p.kernel_shape;
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!("{h}x{w} input smaller than {kh}x{kw} kernel")));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let opg = oc / p.groups;
    let mut out = Tensor4::zeros([n, oc, oh, ow]);
    for b in 0..n {
        for o in 0..oc {
            let g = o / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias[o];
                    for i in 0..ipg {
                        let ci = g * ipg + i;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc
                                    + p.kernel[p.weight_index(o, i, ky, kx)] * x.get(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let k = out.index(b, o, oy, ox);
                    out.data[k] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Apply inference batch norm channel-wise.
pub fn bn_apply<T: Scalar>(x: &Tensor4<T>, bn: &BnParams<T>) -> Result<Tensor4<T>> {
    bn.validate()?;
    if x.shape[1] != bn.channels() {
        return Err(Error::Shape(format!("{} channels vs batch norm over {}", x.shape[1], bn.channels())));
    }
    let affine = bn.affine();
    let plane = x.shape[2] * x.shape[3];
    let mut out = x.clone();
    for (k, v) in out.data.iter_mut().enumerate() {
        let (s, t) = affine[(k / plane) % x.shape[1]];
        *v = *v * s + t;
    }
    Ok(out)
}

/// Fold a batch norm that follows `conv` into its weights and bias.
pub fn fuse_bn<T: Scalar>(conv: &ConvParams<T>, bn: &BnParams<T>) -> Result<ConvParams<T>> {
    conv.validate()?;
    bn.validate()?;
    if conv.out_channels() != bn.channels() {
        return Err(Error::Shape(format!(
            "conv has {} outputs, batch norm {} channels",
            conv.out_channels(),
            bn.channels()
        )));
    }
    let per_out = conv.kernel.len() / conv.out_channels();
    let mut fused = conv.clone();
    for (o, (s, _)) in bn.affine().into_iter().enumerate() {
        for w in &mut fused.kernel[o * per_out..(o + 1) * per_out] {
            *w = *w * s;
        }
        fused.bias[o] = bn.beta[o] + (conv.bias[o] - bn.mean[o]) * s;
    }
    Ok(fused)
}

/// Express a BN-only shortcut as a 3x3 grouped convolution: an identity
/// kernel (center tap 1) with the batch norm folded in.
pub fn bn_to_conv<T: Scalar>(bn: &BnParams<T>, groups: usize, stride: usize) -> Result<ConvParams<T>> {
    if stride != 1 {
        return Err(Error::IdentityBranchIllegal(format!("stride {stride}")));
    }
    let c = bn.channels();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::IdentityBranchIllegal(format!("{c} channels, {groups} groups")));
    }
    let ipg = c / groups;
    let mut id = ConvParams::zeros(c, ipg, 3, groups);
    for o in 0..c {
        let k = id.weight_index(o, o % ipg, 1, 1);
        id.kernel[k] = T::one();
    }
    fuse_bn(&id, bn)
}

/// Zero-pad a 1x1 kernel to 3x3 around the center tap.
pub fn pad_1x1_to_3x3<T: Scalar>(p: &ConvParams<T>) -> Result<ConvParams<T>> {
    p.validate()?;
    let [o, i, kh, kw] = p.kernel_shape;
    if kh != 1 || kw != 1 {
        return Err(Error::Shape(format!("expected a 1x1 kernel, got {kh}x{kw}")));
    }
    let mut out = ConvParams::zeros(o, i, 3, p.groups);
    for oc in 0..o {
        for ic in 0..i {
            let k = out.weight_index(oc, ic, 1, 1);
            out.kernel[k] = p.kernel[oc * i + ic];
        }
    }
    out.bias.clone_from(&p.bias);
    Ok(out)
}

/// Convolution followed by batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConvBn<T = f64> {
    pub conv: ConvParams<T>,
    pub bn: BnParams<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn cast<U: Scalar>(&self) -> ConvBn<U> {
        ConvBn { conv: self.conv.cast(), bn: self.bn.cast() }
    }
}

/// Training-time block: `k` 3x3 branches, one 1x1 branch, optional shortcut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MobileOneBlockParams<T = f64> {
    pub stride: usize,
    pub branches_3x3: Vec<ConvBn<T>>,
    pub branch_1x1: ConvBn<T>,
    pub skip_bn: Option<BnParams<T>>,
}

impl<T: Scalar> MobileOneBlockParams<T> {
    pub fn k(&self) -> usize {
        self.branches_3x3.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches_3x3.is_empty() {
            return Err(Error::InvalidArgument("block needs at least one 3x3 branch".into()));
        }
        let reference = &self.branch_1x1.conv;
        reference.validate()?;
        if reference.kernel_shape[2..] != [1, 1] {
            return Err(Error::Shape("1x1 branch has a larger kernel".into()));
        }
        for b in &self.branches_3x3 {
            b.conv.validate()?;
            if b.conv.kernel_shape[2..] != [3, 3] {
                return Err(Error::Shape("3x3 branch has a different kernel size".into()));
            }
            if b.conv.kernel_shape[..2] != reference.kernel_shape[..2] || b.conv.groups != reference.groups {
                return Err(Error::Shape("branches disagree on channels or groups".into()));
            }
        }
        if let Some(bn) = &self.skip_bn {
            if self.stride != 1 {
                return Err(Error::IdentityBranchIllegal(format!("stride {}", self.stride)));
            }
            if bn.channels() != reference.out_channels() || reference.in_channels() != reference.out_channels() {
                return Err(Error::IdentityBranchIllegal("input and output channels differ".into()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MobileOneBlockParams<U> {
        MobileOneBlockParams {
            stride: self.stride,
            branches_3x3: self.branches_3x3.iter().map(ConvBn::cast).collect(),
            branch_1x1: self.branch_1x1.cast(),
            skip_bn: self.skip_bn.as_ref().map(BnParams::cast),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("block serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let block: Self = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("block json: {e}")))?;
        block.validate()?;
        Ok(block)
    }
}

/// Multi-branch forward pass (linear part only).
pub fn forward_train<T: Scalar>(block: &MobileOneBlockParams<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    block.validate()?;
    let s = block.stride;
    let mut out = bn_apply(&conv2d(x, &block.branch_1x1.conv, s, 0)?, &block.branch_1x1.bn)?;
    for b in &block.branches_3x3 {
        out.add_assign(&bn_apply(&conv2d(x, &b.conv, s, 1)?, &b.bn)?)?;
    }
    if let Some(bn) = &block.skip_bn {
        out.add_assign(&bn_apply(x, bn)?)?;
    }
    Ok(out)
}

/// Collapse every branch into one 3x3 convolution (apply with padding 1).
pub fn reparameterize_block<T: Scalar>(block: &MobileOneBlockParams<T>) -> Result<ConvParams<T>> {
    block.validate()?;
    let mut fused = pad_1x1_to_3x3(&fuse_bn(&block.branch_1x1.conv, &block.branch_1x1.bn)?)?;
    for b in &block.branches_3x3 {
        fused.add_assign(&fuse_bn(&b.conv, &b.bn)?)?;
    }
    if let Some(bn) = &block.skip_bn {
        fused.add_assign(&bn_to_conv(bn, block.branch_1x1.conv.groups, block.stride)?)?;
    }
    Ok(fused)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random tensor with standard normal entries.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| normal(rng))
}

fn random_conv<R: Rng + ?Sized>(rng: &mut R, channels: usize, ksize: usize, groups: usize) -> ConvParams<f64> {
    let mut p = ConvParams::zeros(channels, channels / groups, ksize, groups);
    p.kernel.iter_mut().for_each(|w| *w = 0.5 * normal(rng));
    p.bias.iter_mut().for_each(|b| *b = 0.1 * normal(rng));
    p
}

/// Random batch norm with variance in `[1e-3, 2]`.
pub fn random_bn<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> BnParams<f64> {
    BnParams {
        mean: (0..channels).map(|_| 0.3 * normal(rng)).collect(),
        variance: (0..channels).map(|_| rng.random_range(1e-3..2.0)).collect(),
        gamma: (0..channels).map(|_| 1.0 + 0.3 * normal(rng)).collect(),
        beta: (0..channels).map(|_| 0.3 * normal(rng)).collect(),
        epsilon: 1e-5,
    }
}

/// Random depthwise block with `k` 3x3 branches and a shortcut (stride 1).
pub fn random_block<R: Rng + ?Sized>(rng: &mut R, k: usize, channels: usize) -> MobileOneBlockParams<f64> {
    let branch = |rng: &mut R, ksize| ConvBn { conv: random_conv(rng, channels, ksize, channels), bn: random_bn(rng, channels) };
    MobileOneBlockParams {
        stride: 1,
        branches_3x3: (0..k).map(|_| branch(rng, 3)).collect(),
        branch_1x1: branch(rng, 1),
        skip_bn: Some(random_bn(rng, channels)),
    }
}

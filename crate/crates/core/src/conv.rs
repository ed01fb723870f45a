//! Same-size 2-D convolution layers with exact backpropagation, and the
//! layer stacks used for the unary feature network and the pairwise network.
//!
//! Padding is zero. Output pixel `(r, c)` of a `kh × kw` kernel reads input
//! rows `r - (kh-1)/2 ..` and columns `c - (kw-1)/2 ..`, so odd kernels are
//! centred and even kernels anchor at the top-left of their central block
//! (a 2×2 kernel reads `(r, c), (r, c+1), (r+1, c), (r+1, c+1)`).

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::stereo_io::{FeatureMap, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
    Abs,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Abs => x.abs(),
        }
    }

    /// Derivative given the pre-activation and the activated value.
    /// `abs'(0)` is taken as 0.
    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
            Activation::Abs => {
                if pre > 0.0 {
                    1.0
                } else if pre < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
            Activation::Abs => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Abs),
            _ => None,
        }
    }
}

/// Kernel layout is `[out][in][kh][kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize, activation: Activation) -> Self {
        assert!(kh >= 1 && kw >= 1, "kernel must be at least 1x1");
        ConvLayer {
            out_channels,
            in_channels,
            kh,
            kw,
            kernel: vec![0.0; out_channels * in_channels * kh * kw],
            bias: vec![0.0; out_channels],
            activation,
        }
    }

    /// Glorot-uniform kernel, zero bias.
    pub fn random<R: Rng>(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(out_channels, in_channels, kh, kw, activation);
        let fan_in = (in_channels * kh * kw) as f64;
        let fan_out = (out_channels * kh * kw) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        layer.kernel.iter_mut().for_each(|w| *w = rng.gen_range(-limit..=limit));
        layer
    }

    #[inline]
    fn weight(&self, o: usize, i: usize, dy: usize, dx: usize) -> f64 {
        self.kernel[((o * self.in_channels + i) * self.kh + dy) * self.kw + dx]
    }

    #[inline]
    fn offsets(&self, dy: usize, dx: usize) -> (isize, isize) {
        (
            dy as isize - ((self.kh - 1) / 2) as isize,
            dx as isize - ((self.kw - 1) / 2) as isize,
        )
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Row/column range of output positions whose shifted read stays in bounds.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off.max(0)).max(0) as usize;
    (lo.min(len), hi)
}

fn pre_activation(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    if layer.in_channels != input.channels {
        return Err(dim_err(format!(
            "layer expects {} input channels, got {}",
            layer.in_channels, input.channels
        )));
    }
    let (h, w) = (input.height, input.width);
    let mut out = Image::zeros(h, w, layer.out_channels);
    for o in 0..layer.out_channels {
        let plane = out.plane_mut(o);
        plane.fill(layer.bias[o]);
        for i in 0..layer.in_channels {
            let src = input.plane(i);
            for dy in 0..layer.kh {
                for dx in 0..layer.kw {
                    let wgt = layer.weight(o, i, dy, dx);
                    if wgt == 0.0 {
                        continue;
                    }
                    let (oy, ox) = layer.offsets(dy, dx);
                    let (r0, r1) = valid_range(h, oy);
                    let (c0, c1) = valid_range(w, ox);
                    for r in r0..r1 {
                        let sr = (r as isize + oy) as usize;
                        let dst = &mut plane[r * w + c0..r * w + c1];
                        let s0 = (sr * w) as isize + c0 as isize + ox;
                        let s = &src[s0 as usize..s0 as usize + (c1 - c0)];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn activate(pre: &FeatureMap, act: Activation) -> FeatureMap {
    let mut out = pre.clone();
    out.data.iter_mut().for_each(|v| *v = act.apply(*v));
    out
}

pub fn conv2d_forward(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    let pre = pre_activation(input, layer)?;
    Ok(activate(&pre, layer.activation))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        LayerGrad {
            kernel: vec![0.0; layer.kernel.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

fn backward_from_pre(
    input: &FeatureMap,
    layer: &ConvLayer,
    pre: &FeatureMap,
    out: &FeatureMap,
    grad_out: &FeatureMap,
) -> Result<(LayerGrad, FeatureMap)> {
    if !grad_out.same_shape(pre) {
        return Err(dim_err("gradient shape differs from layer output"));
    }
    let (h, w) = (input.height, input.width);
    let mut grad_pre = grad_out.clone();
    for ((g, p), o) in grad_pre.data.iter_mut().zip(&pre.data).zip(&out.data) {
        *g *= layer.activation.derivative(*p, *o);
    }

    let mut grad = LayerGrad::zeros_like(layer);
    let mut grad_in = Image::zeros(h, w, input.channels);
    for o in 0..layer.out_channels {
        let gp = grad_pre.plane(o);
        grad.bias[o] = gp.iter().sum();
        for i in 0..layer.in_channels {
            let src = input.plane(i);
            for dy in 0..layer.kh {
                for dx in 0..layer.kw {
                    let widx = ((o * layer.in_channels + i) * layer.kh + dy) * layer.kw + dx;
                    let wgt = layer.kernel[widx];
                    let (oy, ox) = layer.offsets(dy, dx);
                    let (r0, r1) = valid_range(h, oy);
                    let (c0, c1) = valid_range(w, ox);
                    let mut acc = 0.0;
                    let gi = grad_in.plane_mut(i);
                    for r in r0..r1 {
                        let sr = (r as isize + oy) as usize;
                        let s0 = ((sr * w) as isize + c0 as isize + ox) as usize;
                        let g = &gp[r * w + c0..r * w + c1];
                        let s = &src[s0..s0 + (c1 - c0)];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if wgt != 0.0 {
                            for (d, gv) in gi[s0..s0 + (c1 - c0)].iter_mut().zip(g) {
                                *d += wgt * gv;
                            }
                        }
                    }
                    grad.kernel[widx] = acc;
                }
            }
        }
    }
    Ok((grad, grad_in))
}

/// Gradients of `sum(grad_out ⊙ conv2d_forward(input, layer))` with respect
/// to the kernel, the bias and the input.
pub fn conv2d_backward(
    input: &FeatureMap,
    layer: &ConvLayer,
    grad_out: &FeatureMap,
) -> Result<(LayerGrad, FeatureMap)> {
    let pre = pre_activation(input, layer)?;
    let out = activate(&pre, layer.activation);
    backward_from_pre(input, layer, &pre, &out, grad_out)
}

/// A stack of convolution layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub layers: Vec<ConvLayer>,
}

/// Activations kept by [`ConvNet::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NetCache {
    /// `inputs[l]` is the input of layer `l`; `inputs[len]` is the output.
    inputs: Vec<FeatureMap>,
    pre: Vec<FeatureMap>,
}

impl NetCache {
    pub fn output(&self) -> &FeatureMap {
        self.inputs.last().expect("cache holds at least the input")
    }
}

impl ConvNet {
    /// Feature network: a 3×3 first layer, 2×2 afterwards, tanh everywhere.
    pub fn unary<R: Rng>(in_channels: usize, depth: usize, filters: usize, rng: &mut R) -> Self {
        assert!(depth >= 1);
        let mut layers = Vec::with_capacity(depth);
        layers.push(ConvLayer::random(filters, in_channels, 3, 3, Activation::Tanh, rng));
        for _ in 1..depth {
            layers.push(ConvLayer::random(filters, filters, 2, 2, Activation::Tanh, rng));
        }
        ConvNet { layers }
    }

    /// Edge-weight network: two 3×3 tanh layers and a 1×1 abs layer with one
    /// output per edge orientation.
    pub fn pairwise<R: Rng>(in_channels: usize, hidden: usize, rng: &mut R) -> Self {
        ConvNet {
            layers: vec![
                ConvLayer::random(hidden, in_channels, 3, 3, Activation::Tanh, rng),
                ConvLayer::random(hidden, hidden, 3, 3, Activation::Tanh, rng),
                ConvLayer::random(2, hidden, 1, 1, Activation::Abs, rng),
            ],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn forward(&self, img: &Image) -> Result<FeatureMap> {
        let mut x = img.clone();
        for layer in &self.layers {
            x = conv2d_forward(&x, layer)?;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, img: &Image) -> Result<NetCache> {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(img.clone());
        for layer in &self.layers {
            let p = pre_activation(inputs.last().unwrap(), layer)?;
            inputs.push(activate(&p, layer.activation));
            pre.push(p);
        }
        Ok(NetCache { inputs, pre })
    }

    /// Per-layer parameter gradients and the gradient with respect to the
    /// network input.
    pub fn backward(&self, cache: &NetCache, grad_out: &FeatureMap) -> Result<(Vec<LayerGrad>, FeatureMap)> {
        if cache.pre.len() != self.layers.len() {
            return Err(dim_err("cache was produced by a different network"));
        }
        let mut grads = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            let (lg, gi) = backward_from_pre(
                &cache.inputs[l],
                &self.layers[l],
                &cache.pre[l],
                &cache.inputs[l + 1],
                &g,
            )?;
            grads[l] = Some(lg);
            g = gi;
        }
        Ok((grads.into_iter().map(Option::unwrap).collect(), g))
    }
}

/// Runs the feature network on one image.
pub fn unary_forward(img: &Image, net: &ConvNet) -> Result<FeatureMap> {
    net.forward(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        Image::from_vec(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct quadruple loop with explicit zero padding.
    fn naive_conv(input: &Image, layer: &ConvLayer) -> Image {
        let (h, w) = (input.height, input.width);
        let mut out = Image::zeros(h, w, layer.out_channels);
        for o in 0..layer.out_channels {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = layer.bias[o];
                    for i in 0..layer.in_channels {
                        for dy in 0..layer.kh {
                            for dx in 0..layer.kw {
                                let sr = r as isize + dy as isize - ((layer.kh - 1) / 2) as isize;
                                let sc = c as isize + dx as isize - ((layer.kw - 1) / 2) as isize;
                                if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                                    continue;
                                }
                                acc += layer.weight(o, i, dy, dx) * input.get(i, sr as usize, sc as usize);
                            }
                        }
                    }
                    out.set(o, r, c, layer.activation.apply(acc));
                }
            }
        }
        out
    }

    #[test]
    fn zero_kernel_gives_tanh_bias() {
        let mut layer = ConvLayer::zeros(2, 1, 3, 3, Activation::Tanh);
        layer.bias = vec![0.3, -0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = conv2d_forward(&random_image(&mut rng, 4, 5, 1), &layer).unwrap();
        assert!(out.plane(0).iter().all(|v| *v == 0.3f64.tanh()));
        assert!(out.plane(1).iter().all(|v| *v == (-0.7f64).tanh()));
    }

    #[test]
    fn one_by_one_identity_scales() {
        let mut layer = ConvLayer::zeros(1, 1, 1, 1, Activation::Identity);
        layer.kernel[0] = 2.5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 3, 3, 1);
        let out = conv2d_forward(&img, &layer).unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert_eq!(*a, 2.5 * b);
        }
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (kh, kw) in [(3, 3), (2, 2), (1, 1), (3, 2)] {
            let img = random_image(&mut rng, 5, 5, 2);
            let mut layer = ConvLayer::random(3, 2, kh, kw, Activation::Identity, &mut rng);
            layer.bias = vec![0.1, -0.2, 0.3];
            let fast = conv2d_forward(&img, &layer).unwrap();
            let slow = naive_conv(&img, &layer);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_reads_top_left_anchor() {
        let mut layer = ConvLayer::zeros(1, 1, 2, 2, Activation::Identity);
        layer.kernel = vec![1.0, 10.0, 100.0, 1000.0];
        let img = Image::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = conv2d_forward(&img, &layer).unwrap();
        assert_eq!(
            out.data,
            vec![1.0 + 20.0 + 300.0 + 4000.0, 2.0 + 400.0, 3.0 + 40.0, 4.0]
        );
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let layer = ConvLayer::zeros(1, 2, 3, 3, Activation::Tanh);
        assert!(matches!(
            conv2d_forward(&Image::zeros(3, 3, 1), &layer),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 4, 4, 2);
        let layer = ConvLayer::random(3, 2, 3, 3, Activation::Tanh, &mut rng);
        let (g, gi) = conv2d_backward(&img, &layer, &Image::zeros(4, 4, 3)).unwrap();
        assert!(g.kernel.iter().chain(&g.bias).chain(&gi.data).all(|v| *v == 0.0));
    }

    #[test]
    fn bias_gradient_one_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 3, 4, 1);
        let layer = ConvLayer::random(2, 1, 1, 1, Activation::Tanh, &mut rng);
        let grad_out = random_image(&mut rng, 3, 4, 2);
        let out = conv2d_forward(&img, &layer).unwrap();
        let (g, _) = conv2d_backward(&img, &layer, &grad_out).unwrap();
        for o in 0..2 {
            let expect: f64 = grad_out
                .plane(o)
                .iter()
                .zip(out.plane(o))
                .map(|(go, y)| go * (1.0 - y * y))
                .sum();
            assert!((g.bias[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn siamese_features_are_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = ConvNet::unary(1, 3, 8, &mut rng);
        let img = random_image(&mut rng, 6, 7, 1);
        let a = unary_forward(&img, &net).unwrap();
        let b = unary_forward(&img, &net).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height, a.width, a.channels), (6, 7, 8));
        assert!(a.data.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn default_geometry_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = ConvNet::unary(1, 3, 100, &mut rng);
        assert_eq!(net.layers[0].kh, 3);
        assert_eq!(net.layers[1].kh, 2);
        assert_eq!(net.layers[2].kw, 2);
        let out = unary_forward(&random_image(&mut rng, 16, 16, 1), &net).unwrap();
        assert_eq!((out.height, out.width, out.channels), (16, 16, 100));
    }

    #[test]
    fn zero_weight_network_is_spatially_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = ConvNet::unary(1, 3, 4, &mut rng);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            layer.kernel.fill(0.0);
            layer
                .bias
                .iter_mut()
                .enumerate()
                .for_each(|(o, b)| *b = 0.1 * (o + l) as f64);
        }
        let out = unary_forward(&random_image(&mut rng, 5, 5, 1), &net).unwrap();
        for o in 0..4 {
            let expect = (0.1 * (o + 2) as f64).tanh();
            assert!(out.plane(o).iter().all(|v| *v == expect));
        }
    }
}

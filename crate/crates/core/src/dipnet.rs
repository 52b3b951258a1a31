//! Encoder-decoder generator with skip connections and manual reverse mode.
//!
//! Depth is carried as channels: the `nz` slices of the noise volume are the
//! input channels of a 2D network over `(ny, nx)`, and the head emits `nz`
//! channels squashed to `(-c, c)` by `c * tanh`.
//!
//! Layout per downsampling stage: `conv3x3 -> lrelu -> conv3x3/2 -> lrelu`.
//! The decoder mirrors it with nearest-neighbour x2 upsampling, channel
//! concatenation with the matching pre-downsampling encoder activation,
//! and `conv3x3 -> lrelu`. All 3x3 convolutions use reflection padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume3D};

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Number of stride-2 stages; lateral dims must divide by `2^stages`.
    pub stages: usize,
    /// Encoder channel width per stage.
    pub widths: Vec<usize>,
    pub bottleneck_width: usize,
    pub bottleneck_convs: usize,
    pub leaky_slope: f64,
    pub output_bound: f64,
    pub init_gain: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stages: 2,
            widths: vec![32, 64],
            bottleneck_width: 64,
            bottleneck_convs: 1,
            leaky_slope: 0.1,
            output_bound: 0.03,
            init_gain: 0.2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.stages == 0 || self.widths.len() != self.stages {
            return Err(Error::InvalidArgument(format!(
                "need one width per stage: {} stages, {} widths",
                self.stages,
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.bottleneck_width == 0 {
            return Err(Error::InvalidArgument("channel widths must be positive".into()));
        }
        let f = 1usize << self.stages;
        if dims.nx % f != 0 || dims.ny % f != 0 {
            return Err(Error::Shape(format!(
                "lateral dims {}x{} must be divisible by {f} for {} downsampling stages",
                dims.nx, dims.ny, self.stages
            )));
        }
        if dims.nx / f < 2 || dims.ny / f < 2 || dims.nz == 0 {
            return Err(Error::Shape(format!("grid {dims} too small for {} stages", self.stages)));
        }
        if !(self.output_bound > 0.0) || !(self.leaky_slope >= 0.0) || !(self.init_gain >= 0.0) {
            return Err(Error::InvalidArgument("output_bound > 0, leaky_slope >= 0, init_gain >= 0 required".into()));
        }
        Ok(())
    }
}

/// Channel-major feature map: `data[c * h * w + y * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feature {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Feature { c, h, w, data: vec![0.0; c * h * w] }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl ConvLayer {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }
}

/// Entry of the checkpoint tensor table.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl NamedTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed random input `z ~ U[0, 0.1]` of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseInput {
    pub dims: Dims,
    pub seed: u64,
    pub values: Vec<f64>,
}

pub const NOISE_MAX: f64 = 0.1;

impl NoiseInput {
    pub fn new(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..dims.len()).map(|_| rng.gen_range(0.0..NOISE_MAX)).collect();
        NoiseInput { dims, seed, values }
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits.
        self.values.iter().fold(0xcbf2_9ce4_8422_2325u64 ^ self.seed, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Activations recorded by [`DipNetwork::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    noise: u64,
    inputs: Vec<Feature>,
    outputs: Vec<Feature>,
}

#[derive(Clone, Debug)]
pub struct DipNetwork {
    arch: ArchConfig,
    dims: Dims,
    voxel_nm: f64,
    layers: Vec<ConvLayer>,
    params: Vec<f64>,
    version: u64,
}

impl DipNetwork {
    pub fn new(arch: ArchConfig, dims: Dims, voxel_nm: f64, seed: u64) -> Result<Self> {
        arch.validate(dims)?;
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, cin: usize, cout: usize, kernel: usize, stride: usize| {
            let w_offset = offset;
            let b_offset = w_offset + cout * cin * kernel * kernel;
            offset = b_offset + cout;
            layers.push(ConvLayer { name, cin, cout, kernel, stride, w_offset, b_offset });
        };
        let mut ch = dims.nz;
        for (s, &w) in arch.widths.iter().enumerate() {
            push(format!("enc{s}.conv"), ch, w, 3, 1);
            push(format!("enc{s}.down"), w, w, 3, 2);
            ch = w;
        }
        for i in 0..arch.bottleneck_convs {
            push(format!("mid{i}.conv"), ch, arch.bottleneck_width, 3, 1);
            ch = arch.bottleneck_width;
        }
        for s in (0..arch.stages).rev() {
            push(format!("dec{s}.conv"), ch + arch.widths[s], arch.widths[s], 3, 1);
            ch = arch.widths[s];
        }
        push("head.conv".into(), ch, dims.nz, 1, 1);

        let mut net = DipNetwork {
            arch,
            dims,
            voxel_nm,
            layers,
            params: vec![0.0; offset],
            version: 0,
        };
        net.init_xavier(seed);
        Ok(net)
    }

    /// Xavier-uniform weights `U(-a, a)`, `a = gain sqrt(6 / (fan_in + fan_out))`; zero biases.
    fn init_xavier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = self.arch.init_gain;
        for l in &self.layers {
            let kk = l.kernel * l.kernel;
            let a = gain * (6.0 / ((l.cin * kk + l.cout * kk) as f64)).sqrt();
            for w in &mut self.params[l.w_offset..l.w_offset + l.weight_len()] {
                *w = if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
            }
            self.params[l.b_offset..l.b_offset + l.cout].fill(0.0);
        }
        self.version += 1;
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; invalidates every outstanding forward cache.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn tensor_table(&self) -> Vec<NamedTensor> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    NamedTensor {
                        name: format!("{}.weight", l.name),
                        offset: l.w_offset,
                        shape: vec![l.cout, l.cin, l.kernel, l.kernel],
                    },
                    NamedTensor {
                        name: format!("{}.bias", l.name),
                        offset: l.b_offset,
                        shape: vec![l.cout],
                    },
                ]
            })
            .collect()
    }

    fn lrelu(&self, f: &mut Feature) {
        let s = self.arch.leaky_slope;
        f.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= s
            }
        });
    }

    fn lrelu_back(&self, out: &Feature, g: &mut [f64]) {
        let s = self.arch.leaky_slope;
        g.iter_mut().zip(&out.data).for_each(|(g, &o)| {
            if o < 0.0 || (o == 0.0 && s == 0.0) {
                *g *= s
            }
        });
    }

    fn conv(&self, idx: usize, x: &Feature) -> Feature {
        let l = &self.layers[idx];
        let w = &self.params[l.w_offset..l.w_offset + l.weight_len()];
        let b = &self.params[l.b_offset..l.b_offset + l.cout];
        conv_forward(x, w, b, l.cout, l.kernel, l.stride)
    }

    /// Generator output `x = T_w(z)`, plus the cache needed by [`Self::backward`].
    pub fn forward(&self, z: &NoiseInput) -> Result<(Volume3D, ForwardCache)> {
        if z.dims != self.dims {
            return Err(Error::Shape(format!("noise is {}, network expects {}", z.dims, self.dims)));
        }
        let d = self.dims;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = Feature { c: d.nz, h: d.ny, w: d.nx, data: z.values.clone() };
        let mut idx = 0;
        let mut skips = Vec::with_capacity(self.arch.stages);
        let mut step = |this: &Self, x: Feature, act: bool, inputs: &mut Vec<Feature>, outputs: &mut Vec<Feature>| {
            let mut y = this.conv(idx, &x);
            if act {
                this.lrelu(&mut y);
            }
            inputs.push(x);
            outputs.push(y.clone());
            idx += 1;
            y
        };
        for _ in 0..self.arch.stages {
            x = step(self, x, true, &mut inputs, &mut outputs);
            skips.push(x.clone());
            x = step(self, x, true, &mut inputs, &mut outputs);
        }
        for _ in 0..self.arch.bottleneck_convs {
            x = step(self, x, true, &mut inputs, &mut outputs);
        }
        for s in (0..self.arch.stages).rev() {
            let up = upsample2(&x);
            let cat = concat(&up, &skips[s]);
            x = step(self, cat, true, &mut inputs, &mut outputs);
        }
        let mut head = step(self, x, false, &mut inputs, &mut outputs);
        let c = self.arch.output_bound;
        head.data.iter_mut().for_each(|a| *a = c * a.tanh());
        *outputs.last_mut().unwrap() = head.clone();
        let vol = Volume3D::from_values(d, self.voxel_nm, head.data)?;
        Ok((
            vol,
            ForwardCache {
                version: self.version,
                noise: z.fingerprint(),
                inputs,
                outputs,
            },
        ))
    }

    /// Gradient of `<grad_output, T_w(z)>` with respect to every parameter.
    pub fn backward(&self, z: &NoiseInput, cache: &ForwardCache, grad_output: &Volume3D) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(Error::StaleCache("parameters changed since the forward pass".into()));
        }
        if cache.noise != z.fingerprint() {
            return Err(Error::StaleCache("cache was recorded for a different noise input".into()));
        }
        if grad_output.dims() != self.dims {
            return Err(Error::Shape(format!("cotangent is {}, output is {}", grad_output.dims(), self.dims)));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut idx = self.layers.len() - 1;
        let c = self.arch.output_bound;
        let head_out = &cache.outputs[idx];
        let d = self.dims;
        let mut g = Feature {
            c: d.nz,
            h: d.ny,
            w: d.nx,
            data: grad_output
                .values()
                .iter()
                .zip(&head_out.data)
                .map(|(g, o)| {
                    let t = o / c;
                    g * c * (1.0 - t * t)
                })
                .collect(),
        };
        let back = |this: &Self, idx: usize, g: Feature, grads: &mut [f64]| -> Feature {
            let l = &this.layers[idx];
            let w = &this.params[l.w_offset..l.w_offset + l.weight_len()];
            let (gx, gw, gb) = conv_backward(&cache.inputs[idx], &g, w, l.cout, l.kernel, l.stride);
            grads[l.w_offset..l.w_offset + l.weight_len()].copy_from_slice(&gw);
            grads[l.b_offset..l.b_offset + l.cout].copy_from_slice(&gb);
            gx
        };
        g = back(self, idx, g, &mut grads);

        let mut skip_grads: Vec<Option<Feature>> = vec![None; self.arch.stages];
        for s in 0..self.arch.stages {
            idx -= 1;
            self.lrelu_back(&cache.outputs[idx], &mut g.data);
            let gcat = back(self, idx, g, &mut grads);
            let (gup, gskip) = split_channels(&gcat, gcat.c - self.arch.widths[s]);
            skip_grads[s] = Some(gskip);
            g = upsample2_back(&gup);
        }
        for _ in 0..self.arch.bottleneck_convs {
            idx -= 1;
            self.lrelu_back(&cache.outputs[idx], &mut g.data);
            g = back(self, idx, g, &mut grads);
        }
        for s in (0..self.arch.stages).rev() {
            idx -= 1;
            self.lrelu_back(&cache.outputs[idx], &mut g.data);
            g = back(self, idx, g, &mut grads);
            let skip = skip_grads[s].take().expect("decoder visited every stage");
            g.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
            idx -= 1;
            self.lrelu_back(&cache.outputs[idx], &mut g.data);
            g = back(self, idx, g, &mut grads);
        }
        debug_assert_eq!(idx, 0);
        Ok(grads)
    }
}

/// Reflection index for padding by one: `-1 -> 1`, `n -> n - 2`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

fn pad_reflect(x: &Feature) -> Vec<f64> {
    let (ph, pw) = (x.h + 2, x.w + 2);
    let mut out = vec![0.0; x.c * ph * pw];
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for py in 0..ph {
            let y = reflect(py as isize - 1, x.h);
            for px in 0..pw {
                dst[py * pw + px] = src[y * x.w + reflect(px as isize - 1, x.w)];
            }
        }
    }
    out
}

/// Adjoint of [`pad_reflect`].
fn unpad_reflect(gp: &[f64], c: usize, h: usize, w: usize) -> Feature {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = Feature::zeros(c, h, w);
    for ch in 0..c {
        let src = &gp[ch * ph * pw..(ch + 1) * ph * pw];
        let dst = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for py in 0..ph {
            let y = reflect(py as isize - 1, h);
            for px in 0..pw {
                dst[y * w + reflect(px as isize - 1, w)] += src[py * pw + px];
            }
        }
    }
    out
}

/// Input as seen by the kernel: reflect-padded for 3x3, as-is for 1x1.
fn conv_source(x: &Feature, kernel: usize) -> (std::borrow::Cow<'_, [f64]>, usize, usize) {
    if kernel == 3 {
        (std::borrow::Cow::Owned(pad_reflect(x)), x.h + 2, x.w + 2)
    } else {
        (std::borrow::Cow::Borrowed(&x.data[..]), x.h, x.w)
    }
}

pub fn conv_forward(x: &Feature, w: &[f64], b: &[f64], cout: usize, kernel: usize, stride: usize) -> Feature {
    let (src, sh, sw) = conv_source(x, kernel);
    let (oh, ow) = (x.h / stride, x.w / stride);
    let cin = x.c;
    let kk = kernel * kernel;
    let mut out = Feature::zeros(cout, oh, ow);
    out.data.par_chunks_mut(oh * ow).enumerate().for_each(|(co, plane)| {
        plane.fill(b[co]);
        for ci in 0..cin {
            let chan = &src[ci * sh * sw..(ci + 1) * sh * sw];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = w[(co * cin + ci) * kk + ky * kernel + kx];
                    for y in 0..oh {
                        let row = &chan[(y * stride + ky) * sw + kx..];
                        let o = &mut plane[y * ow..(y + 1) * ow];
                        if stride == 1 {
                            o.iter_mut().zip(&row[..ow]).for_each(|(o, r)| *o += wv * r);
                        } else {
                            o.iter_mut().enumerate().for_each(|(i, o)| *o += wv * row[i * stride]);
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv_backward(
    x: &Feature,
    g: &Feature,
    w: &[f64],
    cout: usize,
    kernel: usize,
    stride: usize,
) -> (Feature, Vec<f64>, Vec<f64>) {
    let (src, sh, sw) = conv_source(x, kernel);
    let (oh, ow) = (g.h, g.w);
    let cin = x.c;
    let kk = kernel * kernel;
    let mut gw = vec![0.0; cout * cin * kk];
    gw.par_chunks_mut(cin * kk).enumerate().for_each(|(co, gwc)| {
        for ci in 0..cin {
            let chan = &src[ci * sh * sw..(ci + 1) * sh * sw];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let row = &chan[(y * stride + ky) * sw + kx..];
                        let gr = &g.data[co * oh * ow + y * ow..][..ow];
                        if stride == 1 {
                            acc += gr.iter().zip(&row[..ow]).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            acc += gr.iter().enumerate().map(|(i, a)| a * row[i * stride]).sum::<f64>();
                        }
                    }
                    gwc[ci * kk + ky * kernel + kx] = acc;
                }
            }
        }
    });
    let gb: Vec<f64> = (0..cout).map(|co| g.data[co * oh * ow..(co + 1) * oh * ow].iter().sum()).collect();
    let mut gsrc = vec![0.0; cin * sh * sw];
    gsrc.par_chunks_mut(sh * sw).enumerate().for_each(|(ci, gs)| {
        for co in 0..cout {
            let gp = &g.data[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = w[(co * cin + ci) * kk + ky * kernel + kx];
                    for y in 0..oh {
                        let gr = &gp[y * ow..(y + 1) * ow];
                        let row = &mut gs[(y * stride + ky) * sw + kx..];
                        if stride == 1 {
                            row[..ow].iter_mut().zip(gr).for_each(|(r, a)| *r += wv * a);
                        } else {
                            gr.iter().enumerate().for_each(|(i, a)| row[i * stride] += wv * a);
                        }
                    }
                }
            }
        }
    });
    let gx = if kernel == 3 {
        unpad_reflect(&gsrc, cin, x.h, x.w)
    } else {
        Feature { c: cin, h: x.h, w: x.w, data: gsrc }
    };
    (gx, gw, gb)
}

pub fn upsample2(x: &Feature) -> Feature {
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut out = Feature::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[c * h * w + y * w + xx] = x.data[c * x.plane() + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_back(g: &Feature) -> Feature {
    let (h, w) = (g.h / 2, g.w / 2);
    let mut out = Feature::zeros(g.c, h, w);
    for c in 0..g.c {
        for y in 0..g.h {
            for x in 0..g.w {
                out.data[c * h * w + (y / 2) * w + x / 2] += g.data[c * g.plane() + y * g.w + x];
            }
        }
    }
    out
}

pub fn concat(a: &Feature, b: &Feature) -> Feature {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feature { c: a.c + b.c, h: a.h, w: a.w, data }
}

/// Adjoint of [`concat`]: first `c_first` channels, then the rest.
pub fn split_channels(g: &Feature, c_first: usize) -> (Feature, Feature) {
    let cut = c_first * g.plane();
    (
        Feature { c: c_first, h: g.h, w: g.w, data: g.data[..cut].to_vec() },
        Feature { c: g.c - c_first, h: g.h, w: g.w, data: g.data[cut..].to_vec() },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            stages: 1,
            widths: vec![2],
            bottleneck_width: 2,
            bottleneck_convs: 1,
            ..Default::default()
        }
    }

    fn random_feature(c: usize, h: usize, w: usize, seed: u64) -> Feature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Feature { c, h, w, data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect() }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let dims = Dims::new(8, 8, 4);
        let a = DipNetwork::new(ArchConfig::default(), dims, 1.0, 5).unwrap();
        let b = DipNetwork::new(ArchConfig::default(), dims, 1.0, 5).unwrap();
        assert_eq!(a.params(), b.params());
        for l in a.layers() {
            let kk = l.kernel * l.kernel;
            let bound = 0.2 * (6.0 / ((l.cin + l.cout) * kk) as f64).sqrt();
            let w = &a.params()[l.w_offset..l.w_offset + l.weight_len()];
            assert!(w.iter().all(|v| v.abs() <= bound));
            assert!(a.params()[l.b_offset..l.b_offset + l.cout].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn xavier_bound_for_square_3x3() {
        // 4 -> 4 channels, 3x3: fan_in = fan_out = 36.
        let arch = ArchConfig { stages: 1, widths: vec![4], bottleneck_width: 4, ..Default::default() };
        let net = DipNetwork::new(arch, Dims::new(8, 8, 4), 1.0, 9).unwrap();
        let a = 0.2 * (6.0f64 / 72.0).sqrt();
        assert!((a - 0.05774).abs() < 1e-5);
        // enc0.down, mid0.conv are 4 -> 4; pool their weights for statistics.
        let pooled: Vec<f64> = net
            .layers()
            .iter()
            .filter(|l| l.cin == 4 && l.cout == 4 && l.kernel == 3)
            .flat_map(|l| net.params()[l.w_offset..l.w_offset + l.weight_len()].to_vec())
            .collect();
        assert!(pooled.len() >= 288);
        assert!(pooled.iter().all(|w| w.abs() <= a));
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let std = (pooled.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / pooled.len() as f64).sqrt();
        assert!((std - a / 3f64.sqrt()).abs() < 0.1 * a / 3f64.sqrt(), "std {std}");
    }

    #[test]
    fn zero_gain_gives_zero_weights() {
        let arch = ArchConfig { init_gain: 0.0, ..tiny_arch() };
        let net = DipNetwork::new(arch, Dims::new(8, 8, 4), 1.0, 1).unwrap();
        assert!(net.params().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn rejects_indivisible_dims() {
        assert!(DipNetwork::new(ArchConfig::default(), Dims::new(10, 8, 4), 1.0, 1).is_err());
        assert!(DipNetwork::new(ArchConfig::default(), Dims::new(12, 12, 4), 1.0, 1).is_ok());
    }

    #[test]
    fn zeroed_head_outputs_zero() {
        let dims = Dims::new(8, 8, 4);
        let mut net = DipNetwork::new(tiny_arch(), dims, 1.0, 1).unwrap();
        let head = net.layers().last().unwrap().clone();
        net.params_mut()[head.w_offset..head.b_offset + head.cout].fill(0.0);
        let (out, _) = net.forward(&NoiseInput::new(dims, 2)).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_stays_inside_bound_for_huge_weights() {
        let dims = Dims::new(8, 8, 4);
        let mut net = DipNetwork::new(tiny_arch(), dims, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        net.params_mut().iter_mut().for_each(|w| *w = rng.gen_range(-1e3..1e3));
        let (out, _) = net.forward(&NoiseInput::new(dims, 2)).unwrap();
        assert!(out.values().iter().all(|v| v.abs() <= 0.03));
        assert!(out.max_abs() > 0.0);
    }

    #[test]
    fn noise_is_in_range() {
        let z = NoiseInput::new(Dims::new(8, 8, 4), 3);
        assert!(z.values.iter().all(|&v| (0.0..NOISE_MAX).contains(&v)));
    }

    #[test]
    fn stale_cache_rejected() {
        let dims = Dims::new(8, 8, 4);
        let mut net = DipNetwork::new(tiny_arch(), dims, 1.0, 1).unwrap();
        let z = NoiseInput::new(dims, 2);
        let (out, cache) = net.forward(&z).unwrap();
        net.params_mut()[0] += 1e-3;
        assert!(matches!(net.backward(&z, &cache, &out), Err(Error::StaleCache(_))));
        let (out, cache) = net.forward(&z).unwrap();
        assert!(matches!(net.backward(&NoiseInput::new(dims, 3), &cache, &out), Err(Error::StaleCache(_))));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let dims = Dims::new(8, 8, 4);
        let net = DipNetwork::new(tiny_arch(), dims, 1.0, 1).unwrap();
        let z = NoiseInput::new(dims, 2);
        let (_, cache) = net.forward(&z).unwrap();
        let g = net.backward(&z, &cache, &Volume3D::zeros(dims, 1.0)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_cotangent() {
        let dims = Dims::new(8, 8, 4);
        let net = DipNetwork::new(ArchConfig::default(), dims, 1.0, 1).unwrap();
        let z = NoiseInput::new(dims, 2);
        let (_, cache) = net.forward(&z).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g1 = Volume3D::from_fn(dims, 1.0, |_, _, _| rng.gen_range(-1.0..1.0));
        let g2 = Volume3D::from_fn(dims, 1.0, |_, _, _| rng.gen_range(-1.0..1.0));
        let mut g12 = g1.clone();
        g12.add_assign(&g2);
        let (a, b, c) = (
            net.backward(&z, &cache, &g1).unwrap(),
            net.backward(&z, &cache, &g2).unwrap(),
            net.backward(&z, &cache, &g12).unwrap(),
        );
        let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..c.len() {
            assert!((a[i] + b[i] - c[i]).abs() <= 1e-10 * scale.max(1.0));
        }
    }

    /// Adjoint test `<A x, g> = <x, A^T g>` for a building block.
    fn check_adjoint(fwd: impl Fn(&Feature) -> Feature, back: impl Fn(&Feature) -> Feature, x: Feature, seed: u64) {
        let y = fwd(&x);
        let g = random_feature(y.c, y.h, y.w, seed);
        let gx = back(&g);
        let lhs = dot(&y.data, &g.data);
        let rhs = dot(&x.data, &gx.data);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn upsample_and_concat_adjoints() {
        check_adjoint(upsample2, upsample2_back, random_feature(3, 4, 6, 1), 2);
        // Linear in the first operand when the second is zero.
        let b = Feature::zeros(2, 4, 6);
        check_adjoint(|a| concat(a, &b), |g| split_channels(g, 3).0, random_feature(3, 4, 6, 4), 5);
    }

    #[test]
    fn reflect_pad_adjoint() {
        let x = random_feature(2, 5, 4, 6);
        let (c, h, w) = (x.c, x.h, x.w);
        check_adjoint(
            |x| Feature { c, h: h + 2, w: w + 2, data: pad_reflect(x) },
            |g| unpad_reflect(&g.data, c, h, w),
            x,
            7,
        );
    }

    /// Central finite differences of `<g, layer(x, params)>`.
    fn conv_fd_check(kernel: usize, stride: usize) {
        let (cin, cout, h, w) = (3, 2, 6, 8);
        let x = random_feature(cin, h, w, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wt: Vec<f64> = (0..cout * cin * kernel * kernel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv_forward(&x, &wt, &bias, cout, kernel, stride);
        let g = random_feature(y.c, y.h, y.w, 12);
        let (gx, gw, gb) = conv_backward(&x, &g, &wt, cout, kernel, stride);
        let f = |x: &Feature, wt: &[f64], b: &[f64]| dot(&conv_forward(x, wt, b, cout, kernel, stride).data, &g.data);
        let h_step = 1e-4;
        for i in 0..wt.len() {
            let (mut p, mut m) = (wt.clone(), wt.clone());
            p[i] += h_step;
            m[i] -= h_step;
            let fd = (f(&x, &p, &bias) - f(&x, &m, &bias)) / (2.0 * h_step);
            assert!((fd - gw[i]).abs() < 1e-7 * fd.abs().max(1.0));
        }
        for i in 0..cout {
            let (mut p, mut m) = (bias.clone(), bias.clone());
            p[i] += h_step;
            m[i] -= h_step;
            let fd = (f(&x, &wt, &p) - f(&x, &wt, &m)) / (2.0 * h_step);
            assert!((fd - gb[i]).abs() < 1e-7 * fd.abs().max(1.0));
        }
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h_step;
            m.data[i] -= h_step;
            let fd = (f(&p, &wt, &bias) - f(&m, &wt, &bias)) / (2.0 * h_step);
            assert!((fd - gx.data[i]).abs() < 1e-7 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        conv_fd_check(3, 1);
        conv_fd_check(3, 2);
        conv_fd_check(1, 1);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        // Leaky ReLU and the tanh head through a 1x1 conv network stub.
        let dims = Dims::new(8, 8, 2);
        let net = DipNetwork::new(tiny_arch(), dims, 1.0, 3).unwrap();
        let mut f = random_feature(2, 3, 3, 1);
        let out = {
            let mut o = f.clone();
            net.lrelu(&mut o);
            o
        };
        let g = random_feature(2, 3, 3, 2);
        let mut gl = g.data.clone();
        net.lrelu_back(&out, &mut gl);
        for i in 0..f.data.len() {
            let slope = if f.data[i] < 0.0 { 0.1 } else { 1.0 };
            assert_eq!(gl[i], g.data[i] * slope);
        }
        // tanh head derivative: c (1 - tanh^2).
        let c = 0.03;
        for v in f.data.iter_mut() {
            let h = 1e-5;
            let fd = (c * (*v + h).tanh() - c * (*v - h).tanh()) / (2.0 * h);
            let t = (c * v.tanh()) / c;
            assert!((fd - c * (1.0 - t * t)).abs() < 1e-9);
        }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let dims = Dims::new(8, 8, 4);
        let mut net = DipNetwork::new(tiny_arch(), dims, 1.0, 21).unwrap();
        // Larger weights so every unit is in a non-trivial regime.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        net.params_mut().iter_mut().for_each(|w| *w = rng.gen_range(-0.8..0.8));
        let z = NoiseInput::new(dims, 23);
        let cot = Volume3D::from_fn(dims, 1.0, |_, _, _| rng.gen_range(-1.0..1.0));
        let (_, cache) = net.forward(&z).unwrap();
        let grads = net.backward(&z, &cache, &cot).unwrap();
        let h = 1e-4;
        for i in 0..net.n_params() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let fp = net.forward(&z).unwrap().0.dot(&cot);
            net.params_mut()[i] = orig - h;
            let fm = net.forward(&z).unwrap().0.dot(&cot);
            net.params_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-8);
            assert!((fd - grads[i]).abs() / denom < 1e-3, "param {i}: fd {fd} vs {}", grads[i]);
        }
    }
}

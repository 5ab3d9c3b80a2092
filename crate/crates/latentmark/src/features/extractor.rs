//! A small deterministic convolutional feature extractor with an exact
//! reverse-mode pixel gradient.
//!
//! The architecture family is a chain of 3×3-style conv blocks (each
//! followed by ReLU, replicate padding, configurable stride), optional
//! non-overlapping average pooling, and a final global average pool that
//! yields one `D_raw` vector for any input at or above the minimum size.
//! Replicate padding keeps spatially constant inputs constant through every
//! layer, so features of flat images are resolution-independent.
//!
//! Weights are either derived deterministically from a seed (He fan-in
//! scaling) or loaded from a container file; they are stored as `f32`, the
//! file payload width, so a save/load roundtrip is bit-exact. All forward
//! and backward arithmetic runs in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{Image, PixelDelta, CHANNELS};
use crate::tensorfile::{self, Tensor, VERSION_F32};

/// One stage of the extractor.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// 2-D convolution (odd kernel, replicate padding of `kernel/2`)
    /// followed by a pointwise ReLU.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Non-overlapping average pooling; trailing rows/columns that do not
    /// fill a tile are dropped.
    AvgPool { size: usize },
}

/// Architecture description. The final stage is always a global average
/// pool over the last conv layer's channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSpec {
    pub layers: Vec<LayerSpec>,
}

impl ExtractorSpec {
    /// Desk-scale default: four stride-2 conv blocks of widths 16/32/64/128,
    /// giving `D_raw = 128`.
    pub fn desk_default() -> Self {
        ExtractorSpec {
            layers: [16, 32, 64, 128]
                .iter()
                .map(|&c| LayerSpec::Conv {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("extractor spec has zero layers".into()));
        }
        let mut has_conv = false;
        for l in &self.layers {
            match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if out_channels == 0 || stride == 0 || kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::InvalidConfig(format!("bad conv layer {l:?}")));
                    }
                    has_conv = true;
                }
                LayerSpec::AvgPool { size } => {
                    if size == 0 {
                        return Err(Error::InvalidConfig("zero-size pool".into()));
                    }
                }
            }
        }
        if !has_conv {
            return Err(Error::InvalidConfig(
                "extractor needs at least one conv layer".into(),
            ));
        }
        match self.layers.last() {
            Some(LayerSpec::Conv { .. }) => Ok(()),
            _ => Err(Error::InvalidConfig(
                "final layer must be a conv (it defines the feature width)".into(),
            )),
        }
    }

    /// Output dimension of the raw (pre-whitening) feature.
    pub fn raw_dim(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Conv { out_channels, .. }) => *out_channels,
            _ => 0,
        }
    }

    /// Smallest input side length the chain accepts.
    pub fn min_input(&self) -> usize {
        // walk backwards: the last stage must keep at least one pixel
        let mut need = 1usize;
        for l in self.layers.iter().rev() {
            need = match *l {
                // out = (in + 2p − k)/s + 1 with p = k/2 ⇒ in ≥ (out−1)·s + 1
                LayerSpec::Conv { stride, .. } => (need - 1) * stride + 1,
                LayerSpec::AvgPool { size } => need * size,
            };
        }
        need.max(8)
    }
}

#[derive(Debug, Clone)]
struct ConvParams {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    /// `[out][in][ky][kx]`, row-major.
    weight: Vec<f32>,
    bias: Vec<f32>,
}

/// Immutable extractor: spec plus per-conv weights. Safe to share
/// read-only across parallel embedding jobs.
#[derive(Debug, Clone)]
pub struct Extractor {
    spec: ExtractorSpec,
    convs: Vec<ConvParams>,
}

/// Deterministically initialize an extractor from a seed (He fan-in
/// scaling); identical seed and spec give bit-identical weights.
pub fn build_extractor(spec: &ExtractorSpec, seed: u64) -> Result<Extractor> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut convs = Vec::new();
    let mut in_channels = CHANNELS;
    for l in &spec.layers {
        if let LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
        } = *l
        {
            let fan_in = (in_channels * kernel * kernel) as f64;
            let std = (2.0 / fan_in).sqrt();
            let weight: Vec<f32> = (0..out_channels * in_channels * kernel * kernel)
                .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            let bias: Vec<f32> = (0..out_channels)
                .map(|_| (0.05 * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            convs.push(ConvParams {
                in_channels,
                out_channels,
                kernel,
                stride,
                weight,
                bias,
            });
            in_channels = out_channels;
        }
    }
    Ok(Extractor {
        spec: spec.clone(),
        convs,
    })
}

struct Stage {
    channels: usize,
    h: usize,
    w: usize,
    /// post-ReLU activations for conv stages, plain outputs for pools
    data: Vec<f64>,
}

impl Extractor {
    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn raw_dim(&self) -> usize {
        self.spec.raw_dim()
    }

    pub fn min_input(&self) -> usize {
        self.spec.min_input()
    }

    fn check_size(&self, img: &Image) -> Result<()> {
        let need = self.min_input();
        if img.height() < need || img.width() < need {
            return Err(Error::UndersizedImage(format!(
                "{}x{} below the extractor minimum of {need}x{need}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Raw feature of an image: conv chain then global average pooling.
    pub fn forward(&self, img: &Image) -> Result<Vec<f64>> {
        self.check_size(img)?;
        let stages = self.run_stages(img);
        Ok(global_average(stages.last().expect("at least one layer")))
    }

    /// Exact gradient of `⟨forward(img), cotangent⟩` with respect to the
    /// pixels.
    pub fn input_gradient(&self, img: &Image, cotangent: &[f64]) -> Result<PixelDelta> {
        self.check_size(img)?;
        if cotangent.len() != self.raw_dim() {
            return Err(Error::ShapeMismatch(format!(
                "cotangent length {} vs feature dim {}",
                cotangent.len(),
                self.raw_dim()
            )));
        }
        let stages = self.run_stages(img);
        let last = stages.last().expect("at least one layer");

        // backward through global average pooling
        let area = (last.h * last.w) as f64;
        let mut grad = vec![0.0; last.channels * last.h * last.w];
        for c in 0..last.channels {
            let g = cotangent[c] / area;
            for v in &mut grad[c * last.h * last.w..(c + 1) * last.h * last.w] {
                *v = g;
            }
        }

        // backward through the stage chain
        let mut conv_idx = self.convs.len();
        for (li, layer) in self.spec.layers.iter().enumerate().rev() {
            let (in_c, in_h, in_w, in_data) = if li == 0 {
                (CHANNELS, img.height(), img.width(), img.data())
            } else {
                let s = &stages[li - 1];
                (s.channels, s.h, s.w, s.data.as_slice())
            };
            let out = &stages[li];
            match layer {
                LayerSpec::Conv { .. } => {
                    conv_idx -= 1;
                    let p = &self.convs[conv_idx];
                    // ReLU: pass gradient only where the activation is positive
                    for (g, &a) in grad.iter_mut().zip(&out.data) {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    grad = conv_input_grad(&grad, out.h, out.w, in_h, in_w, p);
                    let _ = (in_c, in_data);
                }
                LayerSpec::AvgPool { size } => {
                    grad = avgpool_input_grad(&grad, out.channels, out.h, out.w, in_h, in_w, *size);
                }
            }
        }
        Ok(PixelDelta::from_data(img.height(), img.width(), grad))
    }

    fn run_stages(&self, img: &Image) -> Vec<Stage> {
        let mut stages: Vec<Stage> = Vec::with_capacity(self.spec.layers.len());
        let mut conv_idx = 0;
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let (in_h, in_w, in_data): (usize, usize, &[f64]) = if li == 0 {
                (img.height(), img.width(), img.data())
            } else {
                let s = &stages[li - 1];
                (s.h, s.w, s.data.as_slice())
            };
            let stage = match layer {
                LayerSpec::Conv { .. } => {
                    let p = &self.convs[conv_idx];
                    conv_idx += 1;
                    let (mut data, oh, ow) = conv_forward(in_data, in_h, in_w, p);
                    for v in &mut data {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    Stage {
                        channels: p.out_channels,
                        h: oh,
                        w: ow,
                        data,
                    }
                }
                LayerSpec::AvgPool { size } => {
                    let channels = if li == 0 {
                        CHANNELS
                    } else {
                        stages[li - 1].channels
                    };
                    let (data, oh, ow) = avgpool_forward(in_data, channels, in_h, in_w, *size);
                    Stage {
                        channels,
                        h: oh,
                        w: ow,
                        data,
                    }
                }
            };
            stages.push(stage);
        }
        stages
    }
}

fn conv_out_len(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

/// Clamped source index per (output position, kernel offset), shared by the
/// forward gather and the backward scatter.
fn tap_table(out_len: usize, in_len: usize, kernel: usize, stride: usize) -> Vec<usize> {
    let pad = (kernel / 2) as i64;
    let mut t = vec![0usize; out_len * kernel];
    for o in 0..out_len {
        for k in 0..kernel {
            let i = (o * stride + k) as i64 - pad;
            t[o * kernel + k] = i.clamp(0, in_len as i64 - 1) as usize;
        }
    }
    t
}

fn conv_forward(input: &[f64], ih: usize, iw: usize, p: &ConvParams) -> (Vec<f64>, usize, usize) {
    let oh = conv_out_len(ih, p.kernel, p.stride);
    let ow = conv_out_len(iw, p.kernel, p.stride);
    let k = p.kernel;
    let ty = tap_table(oh, ih, k, p.stride);
    let tx = tap_table(ow, iw, k, p.stride);
    let mut out = vec![0.0; p.out_channels * oh * ow];
    for o in 0..p.out_channels {
        let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        out_plane.fill(p.bias[o] as f64);
        for i in 0..p.in_channels {
            let in_plane = &input[i * ih * iw..(i + 1) * ih * iw];
            let w_base = (o * p.in_channels + i) * k * k;
            for oy in 0..oh {
                for ky in 0..k {
                    let sy = ty[oy * k + ky];
                    let row = &in_plane[sy * iw..(sy + 1) * iw];
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for kx in 0..k {
                            let wgt = p.weight[w_base + ky * k + kx] as f64;
                            acc += wgt * row[tx[ox * k + kx]];
                        }
                        out_plane[oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Scatter the (post-ReLU-masked) output gradient back through a conv.
fn conv_input_grad(
    grad_out: &[f64],
    oh: usize,
    ow: usize,
    ih: usize,
    iw: usize,
    p: &ConvParams,
) -> Vec<f64> {
    let k = p.kernel;
    let ty = tap_table(oh, ih, k, p.stride);
    let tx = tap_table(ow, iw, k, p.stride);
    let mut grad_in = vec![0.0; p.in_channels * ih * iw];
    for o in 0..p.out_channels {
        let g_plane = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..p.in_channels {
            let gi_plane = &mut grad_in[i * ih * iw..(i + 1) * ih * iw];
            let w_base = (o * p.in_channels + i) * k * k;
            for oy in 0..oh {
                for ky in 0..k {
                    let sy = ty[oy * k + ky];
                    let row = &mut gi_plane[sy * iw..(sy + 1) * iw];
                    for ox in 0..ow {
                        let g = g_plane[oy * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for kx in 0..k {
                            let wgt = p.weight[w_base + ky * k + kx] as f64;
                            row[tx[ox * k + kx]] += wgt * g;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn avgpool_forward(
    input: &[f64],
    channels: usize,
    ih: usize,
    iw: usize,
    size: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = ih / size;
    let ow = iw / size;
    let norm = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        acc += input[(c * ih + oy * size + dy) * iw + ox * size + dx];
                    }
                }
                out[(c * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    (out, oh, ow)
}

fn avgpool_input_grad(
    grad_out: &[f64],
    channels: usize,
    oh: usize,
    ow: usize,
    ih: usize,
    iw: usize,
    size: usize,
) -> Vec<f64> {
    let norm = 1.0 / (size * size) as f64;
    let mut grad_in = vec![0.0; channels * ih * iw];
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(c * oh + oy) * ow + ox] * norm;
                for dy in 0..size {
                    for dx in 0..size {
                        grad_in[(c * ih + oy * size + dy) * iw + ox * size + dx] += g;
                    }
                }
            }
        }
    }
    grad_in
}

fn global_average(stage: &Stage) -> Vec<f64> {
    let area = (stage.h * stage.w) as f64;
    (0..stage.channels)
        .map(|c| {
            stage.data[c * stage.h * stage.w..(c + 1) * stage.h * stage.w]
                .iter()
                .sum::<f64>()
                / area
        })
        .collect()
}

// ---- weights file ----

const KIND_CONV: f64 = 0.0;
const KIND_POOL: f64 = 1.0;

/// Write the architecture and weights (f32 payload).
pub fn save_weights(e: &Extractor, path: &Path) -> Result<()> {
    let mut arch = Vec::new();
    for l in &e.spec.layers {
        match *l {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
            } => arch.extend_from_slice(&[
                KIND_CONV,
                out_channels as f64,
                kernel as f64,
                stride as f64,
            ]),
            LayerSpec::AvgPool { size } => {
                arch.extend_from_slice(&[KIND_POOL, size as f64, 0.0, 0.0])
            }
        }
    }
    let mut tensors = vec![Tensor::new(
        "arch",
        vec![e.spec.layers.len() as u64, 4],
        arch,
    )];
    for (j, c) in e.convs.iter().enumerate() {
        tensors.push(Tensor::new(
            format!("conv{j}.weight"),
            vec![
                c.out_channels as u64,
                c.in_channels as u64,
                c.kernel as u64,
                c.kernel as u64,
            ],
            c.weight.iter().map(|&v| v as f64).collect(),
        ));
        tensors.push(Tensor::new(
            format!("conv{j}.bias"),
            vec![c.out_channels as u64],
            c.bias.iter().map(|&v| v as f64).collect(),
        ));
    }
    tensorfile::write_tensors(path, VERSION_F32, &tensors)
}

/// Load an extractor saved by [`save_weights`].
pub fn load_weights(path: &Path) -> Result<Extractor> {
    let file = tensorfile::read_tensors(path)?;
    let arch = file.require("arch")?;
    if arch.dims.len() != 2 || arch.dims[1] != 4 {
        return Err(Error::CorruptFile("arch tensor must be Lx4".into()));
    }
    let mut layers = Vec::new();
    for row in arch.data.chunks(4) {
        if row[0] == KIND_CONV {
            layers.push(LayerSpec::Conv {
                out_channels: row[1] as usize,
                kernel: row[2] as usize,
                stride: row[3] as usize,
            });
        } else if row[0] == KIND_POOL {
            layers.push(LayerSpec::AvgPool {
                size: row[1] as usize,
            });
        } else {
            return Err(Error::CorruptFile(format!("unknown layer kind {}", row[0])));
        }
    }
    let spec = ExtractorSpec { layers };
    spec.validate()?;

    let mut convs = Vec::new();
    let mut in_channels = CHANNELS;
    let mut j = 0;
    for l in &spec.layers {
        if let LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
        } = *l
        {
            let wt = file.require(&format!("conv{j}.weight"))?;
            let bt = file.require(&format!("conv{j}.bias"))?;
            let expect = [
                out_channels as u64,
                in_channels as u64,
                kernel as u64,
                kernel as u64,
            ];
            if wt.dims != expect {
                return Err(Error::CorruptFile(format!(
                    "conv{j}.weight dims {:?}, expected {:?}",
                    wt.dims, expect
                )));
            }
            if bt.dims != [out_channels as u64] {
                return Err(Error::CorruptFile(format!(
                    "conv{j}.bias dims {:?}, expected [{out_channels}]",
                    bt.dims
                )));
            }
            convs.push(ConvParams {
                in_channels,
                out_channels,
                kernel,
                stride,
                weight: wt.data.iter().map(|&v| v as f32).collect(),
                bias: bt.data.iter().map(|&v| v as f32).collect(),
            });
            in_channels = out_channels;
            j += 1;
        }
    }
    Ok(Extractor { spec, convs })
}

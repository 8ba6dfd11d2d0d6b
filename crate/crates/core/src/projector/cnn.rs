//! Forward inference of the residual U-Net projector.
//!
//! The network takes 6 input planes (the three channels of `z` followed by
//! the three λ planes) and predicts the 3-channel estimate `x` directly.
//! Layout for `S` scales with widths `w₀..w_{S−1}` and `B` residual blocks per
//! scale, every convolution 3×3 with zero padding 1:
//!
//! ```text
//! head                      6 → w₀
//! for s in 0..S:
//!     enc{s}.block{b}       residual: h + conv2(relu(conv1(h)))
//!     down{s}  (s < S−1)    stride 2, w_s → w_{s+1}, relu
//! for s in S−2..=0:
//!     up{s}                 nearest ×2 upsample, then w_{s+1} → w_s, relu
//!     fuse{s}               concat [up, skip_s], 2·w_s → w_s, relu
//!     dec{s}.block{b}       residual
//! tail                      w₀ → 3
//! ```
//!
//! Inputs are replicate-padded on the bottom/right to a multiple of
//! `2^(S−1)` and the output is cropped back.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ProjectorInput;
use crate::error::{Error, Result};
use crate::image::{pad_replicate, Image};
use crate::psf::ByteReader;

const UABC_MAGIC: &[u8; 4] = b"UABC";
const UABC_VERSION: u32 = 1;

pub const INPUT_CHANNELS: usize = 6;
pub const OUTPUT_CHANNELS: usize = 3;

/// Upper bound on im2col scratch per strip, in floats.
const STRIP_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub scales: usize,
    pub widths: Vec<usize>,
    pub blocks_per_scale: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            scales: 3,
            widths: vec![32, 64, 128],
            blocks_per_scale: 2,
        }
    }
}

fn conv_shape(out: usize, inp: usize) -> Vec<usize> {
    vec![out, inp, 3, 3]
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales > 16 || self.widths.len() != self.scales || self.widths.contains(&0) {
            return Err(Error::ShapeMismatch {
                tensor: "<architecture>".into(),
                message: format!("inconsistent descriptor {self:?}"),
            });
        }
        Ok(())
    }

    /// Spatial multiple the padded input must satisfy.
    pub fn size_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }

    /// Every tensor the network needs, in canonical export order.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let w = &self.widths;
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, i: usize| {
            out.push((format!("{name}.weight"), conv_shape(o, i)));
            out.push((format!("{name}.bias"), vec![o]));
        };
        conv("head".into(), w[0], INPUT_CHANNELS);
        for s in 0..self.scales {
            for b in 0..self.blocks_per_scale {
                conv(format!("enc{s}.block{b}.conv1"), w[s], w[s]);
                conv(format!("enc{s}.block{b}.conv2"), w[s], w[s]);
            }
            if s + 1 < self.scales {
                conv(format!("down{s}"), w[s + 1], w[s]);
            }
        }
        for s in (0..self.scales - 1).rev() {
            conv(format!("up{s}"), w[s], w[s + 1]);
            conv(format!("fuse{s}"), w[s], 2 * w[s]);
            for b in 0..self.blocks_per_scale {
                conv(format!("dec{s}.block{b}.conv1"), w[s], w[s]);
                conv(format!("dec{s}.block{b}.conv2"), w[s], w[s]);
            }
        }
        conv("tail".into(), OUTPUT_CHANNELS, w[0]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
struct Conv {
    /// `[out, in·9]`
    weight: Array2<f32>,
    bias: Vec<f32>,
    in_ch: usize,
}

/// Validated, immutable projector weights.
#[derive(Debug, Clone)]
pub struct CnnWeights {
    arch: Architecture,
    tensors: Vec<Tensor>,
    convs: HashMap<String, Conv>,
}

impl PartialEq for CnnWeights {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.tensors == other.tensors
    }
}

impl CnnWeights {
    /// Checks tensors against the architecture and stores them in canonical
    /// order.
    pub fn new(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(tensors.len());
        for t in tensors {
            let numel: usize = t.dims.iter().product();
            if numel != t.data.len() {
                return Err(Error::ShapeMismatch {
                    message: format!("dims {:?} hold {numel} values, found {}", t.dims, t.data.len()),
                    tensor: t.name,
                });
            }
            if by_name.contains_key(&t.name) {
                return Err(Error::ShapeMismatch {
                    tensor: t.name,
                    message: "duplicate tensor".into(),
                });
            }
            by_name.insert(t.name.clone(), t);
        }

        let mut ordered = Vec::new();
        for (name, dims) in arch.expected_tensors() {
            let t = by_name.remove(&name).ok_or_else(|| Error::ShapeMismatch {
                tensor: name.clone(),
                message: "missing".into(),
            })?;
            if t.dims != dims {
                return Err(Error::ShapeMismatch {
                    tensor: name,
                    message: format!("expected dims {dims:?}, found {:?}", t.dims),
                });
            }
            ordered.push(t);
        }
        if let Some(name) = by_name.into_keys().min() {
            return Err(Error::ShapeMismatch {
                tensor: name,
                message: "not part of the architecture".into(),
            });
        }

        let mut convs = HashMap::new();
        for pair in ordered.chunks_exact(2) {
            let (w, b) = (&pair[0], &pair[1]);
            let layer = w.name.trim_end_matches(".weight").to_string();
            let (out_ch, in_ch) = (w.dims[0], w.dims[1]);
            convs.insert(
                layer,
                Conv {
                    weight: Array2::from_shape_vec((out_ch, in_ch * 9), w.data.clone()).expect("checked dims"),
                    bias: b.data.clone(),
                    in_ch,
                },
            );
        }
        Ok(CnnWeights {
            arch,
            tensors: ordered,
            convs,
        })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let tensors = arch
            .expected_tensors()
            .into_iter()
            .map(|(name, dims)| Tensor {
                data: vec![0.0; dims.iter().product()],
                name,
                dims,
            })
            .collect();
        CnnWeights::new(arch, tensors)
    }

    /// Uniform `±1/√fan_in` initialization from a seeded generator.
    pub fn random(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = 1;
        let tensors = arch
            .expected_tensors()
            .into_iter()
            .map(|(name, dims)| {
                if dims.len() == 4 {
                    fan_in = dims[1] * dims[2] * dims[3];
                }
                let bound = 1.0 / (fan_in as f32).sqrt();
                let data = (0..dims.iter().product::<usize>())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor { name, dims, data }
            })
            .collect();
        CnnWeights::new(arch, tensors)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn conv(&self, layer: &str) -> &Conv {
        &self.convs[layer]
    }
}

pub fn encode_weights(weights: &CnnWeights) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(UABC_MAGIC);
    put(UABC_VERSION, &mut out);
    let arch = weights.architecture();
    put(arch.scales as u32, &mut out);
    for &w in &arch.widths {
        put(w as u32, &mut out);
    }
    put(arch.blocks_per_scale as u32, &mut out);
    put(weights.tensors.len() as u32, &mut out);
    for t in &weights.tensors {
        put(t.name.len() as u32, &mut out);
        out.extend_from_slice(t.name.as_bytes());
        put(t.dims.len() as u32, &mut out);
        for &d in &t.dims {
            put(d as u32, &mut out);
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<CnnWeights> {
    let mut rd = ByteReader::new(bytes);
    rd.expect_magic(UABC_MAGIC)?;
    let at = rd.offset();
    let version = rd.u32("version")?;
    if version != UABC_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = rd.offset();
    let scales = rd.u32("scales")? as usize;
    if scales == 0 || scales > 16 {
        return Err(Error::format(at, format!("implausible scale count {scales}")));
    }
    let widths = (0..scales)
        .map(|_| rd.u32("widths").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let blocks_per_scale = rd.u32("blocks_per_scale")? as usize;
    let count = rd.u32("tensor_count")? as usize;

    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = rd.offset();
        let name_len = rd.u32("tensor name length")? as usize;
        if name_len > 4096 {
            return Err(Error::format(at, format!("tensor name length {name_len}")));
        }
        let at = rd.offset();
        let name = std::str::from_utf8(rd.take(name_len, "tensor name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let at = rd.offset();
        let rank = rd.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::format(at, format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| rd.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(at, format!("tensor `{name}` size overflows")))?;
        let data = rd.f32s(numel, "tensor data").map_err(|e| match e {
            Error::Format { offset, message } => Error::ShapeMismatch {
                tensor: name.clone(),
                message: format!("data truncated at byte {offset}: {message}"),
            },
            other => other,
        })?;
        tensors.push(Tensor { name, dims, data });
    }
    rd.expect_end()?;
    CnnWeights::new(
        Architecture {
            scales,
            widths,
            blocks_per_scale,
        },
        tensors,
    )
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<CnnWeights> {
    decode_weights(&fs::read(path)?)
}

pub fn save_weights(weights: &CnnWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(weights))?;
    Ok(())
}

fn conv2d(input: &Array3<f32>, conv: &Conv, stride: usize) -> Array3<f32> {
    let (cin, h, w) = input.dim();
    debug_assert_eq!(cin, conv.in_ch);
    let cout = conv.weight.nrows();
    let out_h = (h + 2 - 3) / stride + 1;
    let out_w = (w + 2 - 3) / stride + 1;
    let rows_per_strip = (STRIP_BUDGET / (cin * 9 * out_w).max(1)).clamp(1, out_h.max(1));
    let strips: Vec<(usize, usize)> = (0..out_h)
        .step_by(rows_per_strip)
        .map(|r0| (r0, (r0 + rows_per_strip).min(out_h)))
        .collect();

    let results: Vec<Array2<f32>> = strips
        .par_iter()
        .map(|&(r0, r1)| {
            let n = (r1 - r0) * out_w;
            let mut cols = Array2::<f32>::zeros((cin * 9, n));
            for ci in 0..cin {
                let plane = input.index_axis(Axis(0), ci);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut row = cols.row_mut(ci * 9 + ky * 3 + kx);
                        for (i, orow) in (r0..r1).enumerate() {
                            let iy = (orow * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..out_w {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix >= 0 && ix < w as isize {
                                    row[i * out_w + ox] = plane[[iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                }
            }
            let mut out = conv.weight.dot(&cols);
            for (mut row, &b) in out.outer_iter_mut().zip(&conv.bias) {
                row.mapv_inplace(|v| v + b);
            }
            out
        })
        .collect();

    let mut out = Array3::zeros((cout, out_h, out_w));
    for (&(r0, r1), strip) in strips.iter().zip(results) {
        let strip = strip.into_shape_with_order((cout, r1 - r0, out_w)).expect("strip shape");
        out.slice_mut(s![.., r0..r1, ..]).assign(&strip);
    }
    out
}

fn relu(mut x: Array3<f32>) -> Array3<f32> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

fn upsample2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, r, k)| x[[ch, r / 2, k / 2]])
}

fn concat(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

fn checked(x: Array3<f32>, layer: &str) -> Result<Array3<f32>> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("activation after layer `{layer}`")))
    }
}

fn residual(h: Array3<f32>, weights: &CnnWeights, prefix: &str) -> Result<Array3<f32>> {
    let c1 = format!("{prefix}.conv1");
    let c2 = format!("{prefix}.conv2");
    let t = relu(conv2d(&h, weights.conv(&c1), 1));
    let t = conv2d(&t, weights.conv(&c2), 1);
    checked(h + t, prefix)
}

/// Runs the network on a `(6, H, W)` tensor whose spatial dims are already a
/// multiple of the architecture's size multiple.
pub fn forward(weights: &CnnWeights, input: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
    let arch = weights.architecture();
    let (c, h, w) = input.dim();
    let m = arch.size_multiple();
    if c != INPUT_CHANNELS || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch {
            tensor: "<input>".into(),
            message: format!("network input {c}x{h}x{w}, needs {INPUT_CHANNELS} channels and sides divisible by {m}"),
        });
    }

    let mut x = checked(conv2d(&input.to_owned(), weights.conv("head"), 1), "head")?;
    let mut skips = Vec::with_capacity(arch.scales);
    for s in 0..arch.scales {
        for b in 0..arch.blocks_per_scale {
            x = residual(x, weights, &format!("enc{s}.block{b}"))?;
        }
        if s + 1 < arch.scales {
            let layer = format!("down{s}");
            let down = relu(conv2d(&x, weights.conv(&layer), 2));
            skips.push(x);
            x = checked(down, &layer)?;
        }
    }
    for s in (0..arch.scales - 1).rev() {
        let layer = format!("up{s}");
        x = checked(relu(conv2d(&upsample2(&x), weights.conv(&layer), 1)), &layer)?;
        let layer = format!("fuse{s}");
        x = checked(relu(conv2d(&concat(&x, &skips[s]), weights.conv(&layer), 1)), &layer)?;
        for b in 0..arch.blocks_per_scale {
            x = residual(x, weights, &format!("dec{s}.block{b}"))?;
        }
    }
    checked(conv2d(&x, weights.conv("tail"), 1), "tail")
}

/// Concatenates `z` and the λ planes, pads to the network's size multiple,
/// runs the network and crops back to the input size.
pub fn project_cnn(input: &ProjectorInput, weights: &CnnWeights) -> Result<Image> {
    let (c, h, w) = input.z.dim();
    if c != OUTPUT_CHANNELS {
        return Err(Error::ShapeMismatch {
            tensor: "<input>".into(),
            message: format!("cnn projector needs 3-channel images, got {c}"),
        });
    }
    let m = weights.architecture().size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let mut net_in = Array3::zeros((INPUT_CHANNELS, ph, pw));
    for (i, plane) in input
        .z
        .outer_iter()
        .chain(input.lambda.outer_iter())
        .enumerate()
    {
        net_in
            .index_axis_mut(Axis(0), i)
            .assign(&pad_replicate(&plane, 0, ph - h, 0, pw - w));
    }
    let out = forward(weights, net_in.view())?;
    Ok(out.slice(s![.., ..h, ..w]).to_owned())
}

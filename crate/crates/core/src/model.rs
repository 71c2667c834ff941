//! The Y-net encoder/decoder with a position path.
//!
//! Layer enumeration for `n_levels = L`, `base_kernels = b`, `c_l = b * 2^l`:
//!
//! ```text
//! encoder level l:  conv(c_{l-1} -> c_l), act, conv(c_l -> c_l), act, downsample
//! bottleneck:       [position concat] conv(c_{L-1} (+3) -> c_L), act
//! decoder level l:  upsample, concat skip_l, conv(c_{l+1} + c_l -> c_l), act,
//!                   conv(c_l -> c_l), act
//! head:             conv(b (+3) -> 1), sigmoid
//! ```
//!
//! `c_{-1}` is the single input channel (plus 3 when the position path enters
//! first). Strided downsampling adds a `conv(c_l -> c_l, stride 2)` + act per
//! level in place of max-pooling; strided upsampling adds a transposed
//! `conv(c_{l+1} -> c_{l+1})` + act in place of nearest-neighbour upsampling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ynet_tensor::rng::SeedRng;
use ynet_tensor::{
    activation, activation_backward, concat_channels, conv3d, conv3d_backward, conv3d_strided,
    conv3d_strided_backward, conv_transpose3d, conv_transpose3d_backward, maxpool3d,
    maxpool3d_backward, normal_init, split_channels, upsample3, upsample3_backward, xavier_init,
    Activation, ConvParams, PoolIndices, Scalar, Shape5, Tensor5,
};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
}

impl From<ActivationKind> for Activation {
    fn from(k: ActivationKind) -> Self {
        match k {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Tanh => Activation::Tanh,
            ActivationKind::Sigmoid => Activation::Sigmoid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    MaxPool,
    StridedConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    NeighborPadConv,
    StridedDeconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSite {
    EncoderFirst,
    EncoderLast,
    DecoderLast,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Xavier,
    NormalRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Morphology {
    None,
    Closing,
    Opening,
}

/// Std of the `NormalRandom` initializer.
pub const NORMAL_INIT_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct YNetConfig {
    pub activation: ActivationKind,
    pub n_levels: usize,
    pub base_kernels: usize,
    pub downsample: Downsample,
    pub upsample: Upsample,
    pub position_site: PositionSite,
    pub init: InitKind,
    pub patch_size: usize,
    pub morphology_post: Morphology,
}

impl Default for YNetConfig {
    fn default() -> Self {
        YNetConfig {
            activation: ActivationKind::Relu,
            n_levels: 2,
            base_kernels: 16,
            downsample: Downsample::MaxPool,
            upsample: Upsample::NeighborPadConv,
            position_site: PositionSite::EncoderLast,
            init: InitKind::Xavier,
            patch_size: 16,
            morphology_post: Morphology::None,
        }
    }
}

impl YNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 {
            return Err(Error::BadConfig("n_levels must be >= 1".into()));
        }
        if self.base_kernels == 0 {
            return Err(Error::BadConfig("base_kernels must be >= 1".into()));
        }
        let div = 1usize << self.n_levels.min(20);
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return Err(Error::BadConfig(format!(
                "patch_size {} not divisible by 2^{}",
                self.patch_size, self.n_levels
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_kernels << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    StridedConv,
    Deconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerSpec {
    pub fn num_params(&self) -> usize {
        self.c_out * (self.c_in * 27 + 1)
    }
}

/// Layers in build order.
pub fn layer_specs(cfg: &YNetConfig) -> Vec<LayerSpec> {
    let conv = |c_in, c_out| LayerSpec {
        kind: LayerKind::Conv,
        c_in,
        c_out,
    };
    let pos = |site| if cfg.position_site == site { 3 } else { 0 };
    let mut out = Vec::new();
    let mut prev = 1 + pos(PositionSite::EncoderFirst);
    for l in 0..cfg.n_levels {
        let c = cfg.channels(l);
        out.push(conv(prev, c));
        out.push(conv(c, c));
        if cfg.downsample == Downsample::StridedConv {
            out.push(LayerSpec {
                kind: LayerKind::StridedConv,
                c_in: c,
                c_out: c,
            });
        }
        prev = c;
    }
    out.push(conv(prev + pos(PositionSite::EncoderLast), cfg.channels(cfg.n_levels)));
    for l in (0..cfg.n_levels).rev() {
        let up = cfg.channels(l + 1);
        if cfg.upsample == Upsample::StridedDeconv {
            out.push(LayerSpec {
                kind: LayerKind::Deconv,
                c_in: up,
                c_out: up,
            });
        }
        out.push(conv(up + cfg.channels(l), cfg.channels(l)));
        out.push(conv(cfg.channels(l), cfg.channels(l)));
    }
    out.push(conv(cfg.base_kernels + pos(PositionSite::DecoderLast), 1));
    out
}

/// Normalized patch centre `(origin + patch/2) / dim` per axis, ordered
/// `(x, y, z)`.
pub fn patch_center(origin: [usize; 3], volume_dims: [usize; 3], patch: usize) -> Result<[f64; 3]> {
    if (0..3).any(|k| origin[k] >= volume_dims[k]) {
        return Err(Error::OutOfBounds {
            origin,
            dims: volume_dims,
        });
    }
    Ok([0, 1, 2].map(|k| (origin[k] as f64 + patch as f64 / 2.0) / volume_dims[k] as f64))
}

/// Three constant channels `(cx, cy, cz)` of the given spatial size.
pub fn position_channels<T: Scalar>(
    origin: [usize; 3],
    volume_dims: [usize; 3],
    patch: usize,
    spatial: [usize; 3],
) -> Result<Tensor5<T>> {
    let c = patch_center(origin, volume_dims, patch)?;
    Ok(position_tensor(&[c], spatial))
}

fn position_tensor<T: Scalar>(centers: &[[f64; 3]], spatial: [usize; 3]) -> Tensor5<T> {
    let [d, h, w] = spatial;
    let shape = Shape5::new(centers.len(), 3, d, h, w);
    let per = d * h * w;
    let mut data = Vec::with_capacity(shape.len());
    for c in centers {
        for &v in c {
            data.extend(std::iter::repeat(T::from_f64(v)).take(per));
        }
    }
    Tensor5::from_vec(shape, data).expect("position tensor shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct YNetModel<T = f32> {
    config: YNetConfig,
    layers: Vec<LayerSpec>,
    params: Vec<ConvParams<T>>,
}

/// Intermediate values kept by [`YNetModel::forward_train`] for the backward pass.
pub struct ForwardCache<T> {
    inputs: Vec<Tensor5<T>>,
    outputs: Vec<Tensor5<T>>,
    pools: Vec<PoolIndices>,
    skip_channels: Vec<usize>,
}

impl<T: Scalar> YNetModel<T> {
    pub fn build(config: &YNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = layer_specs(config);
        let mut rng = SeedRng::new(seed);
        let params = layers
            .iter()
            .map(|l| match config.init {
                InitKind::Xavier => xavier_init(l.c_in, l.c_out, &mut rng),
                InitKind::NormalRandom => normal_init(l.c_in, l.c_out, NORMAL_INIT_STD, &mut rng),
            })
            .collect();
        Ok(YNetModel {
            config: config.clone(),
            layers,
            params,
        })
    }

    pub fn config(&self) -> &YNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[ConvParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ConvParams<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.num_params()).sum()
    }

    /// Flat buffers in build order: weight then bias per layer.
    pub fn param_sizes(&self) -> Vec<usize> {
        self.params
            .iter()
            .flat_map(|p| [p.weight.len(), p.bias.len()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.params
            .iter_mut()
            .flat_map(|p| [p.weight.as_mut_slice(), p.bias.as_mut_slice()])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> YNetModel<U> {
        YNetModel {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    fn check_batch(&self, batch: &Tensor5<T>, centers: &[[f64; 3]]) -> Result<()> {
        let p = self.config.patch_size;
        let s = batch.shape();
        if s.c != 1 || s.d != p || s.h != p || s.w != p || centers.len() != s.n {
            return Err(Error::Tensor(ynet_tensor::TensorError::ShapeMismatch {
                op: "ynet forward",
                expected: format!("(B, 1, {p}, {p}, {p}) with B centres"),
                found: format!("{s} with {} centres", centers.len()),
            }));
        }
        Ok(())
    }

    /// Probability output for a `(B, 1, p, p, p)` batch. `centers` are the
    /// normalized patch centres from [`patch_center`].
    pub fn forward(&self, batch: &Tensor5<T>, centers: &[[f64; 3]]) -> Result<Tensor5<T>> {
        Ok(self.forward_train(batch, centers)?.0)
    }

    pub fn forward_train(
        &self,
        batch: &Tensor5<T>,
        centers: &[[f64; 3]],
    ) -> Result<(Tensor5<T>, ForwardCache<T>)> {
        self.check_batch(batch, centers)?;
        let cfg = &self.config;
        let act: Activation = cfg.activation.into();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
            pools: Vec::new(),
            skip_channels: Vec::new(),
        };
        let mut layer = 0;
        // Runs layer `layer` on `x`, caching its input and activated output.
        let mut run = |x: Tensor5<T>, kind: Activation, cache: &mut ForwardCache<T>| -> Result<Tensor5<T>> {
            let spec = self.layers[layer];
            let p = &self.params[layer];
            let z = match spec.kind {
                LayerKind::Conv => conv3d(&x, p)?,
                LayerKind::StridedConv => conv3d_strided(&x, p, 2)?,
                LayerKind::Deconv => conv_transpose3d(&x, p)?,
            };
            let y = activation(&z, kind);
            cache.inputs.push(x);
            cache.outputs.push(y.clone());
            layer += 1;
            Ok(y)
        };
        let spatial = |t: &Tensor5<T>| [t.shape().d, t.shape().h, t.shape().w];

        let mut h = batch.clone();
        if cfg.position_site == PositionSite::EncoderFirst {
            h = concat_channels(&h, &position_tensor(centers, spatial(&h)))?;
        }
        let mut skips = Vec::with_capacity(cfg.n_levels);
        for _ in 0..cfg.n_levels {
            h = run(h, act, &mut cache)?;
            h = run(h, act, &mut cache)?;
            skips.push(h.clone());
            h = match cfg.downsample {
                Downsample::MaxPool => {
                    let (y, idx) = maxpool3d(&h)?;
                    cache.pools.push(idx);
                    y
                }
                Downsample::StridedConv => run(h, act, &mut cache)?,
            };
        }
        if cfg.position_site == PositionSite::EncoderLast {
            h = concat_channels(&h, &position_tensor(centers, spatial(&h)))?;
        }
        h = run(h, act, &mut cache)?;
        for skip in skips.iter().rev() {
            h = match cfg.upsample {
                Upsample::NeighborPadConv => upsample3(&h),
                Upsample::StridedDeconv => run(h, act, &mut cache)?,
            };
            cache.skip_channels.push(h.shape().c);
            h = concat_channels(&h, skip)?;
            h = run(h, act, &mut cache)?;
            h = run(h, act, &mut cache)?;
        }
        if cfg.position_site == PositionSite::DecoderLast {
            h = concat_channels(&h, &position_tensor(centers, spatial(&h)))?;
        }
        let out = run(h, Activation::Sigmoid, &mut cache)?;
        Ok((out, cache))
    }

    /// Parameter gradients of `sum(grad_out * forward(..))`, shaped like
    /// [`Self::params`].
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor5<T>) -> Result<Vec<ConvParams<T>>> {
        let cfg = &self.config;
        let act: Activation = cfg.activation.into();
        let mut grads: Vec<Option<ConvParams<T>>> = vec![None; self.layers.len()];
        let mut layer = self.layers.len();
        let mut back = |g: Tensor5<T>, kind: Activation, grads: &mut Vec<Option<ConvParams<T>>>| -> Result<Tensor5<T>> {
            layer -= 1;
            let spec = self.layers[layer];
            let p = &self.params[layer];
            let x = &cache.inputs[layer];
            let gz = activation_backward(&cache.outputs[layer], &g, kind)?;
            let (gx, gp) = match spec.kind {
                LayerKind::Conv => conv3d_backward(x, p, &gz)?,
                LayerKind::StridedConv => conv3d_strided_backward(x, p, 2, &gz)?,
                LayerKind::Deconv => conv_transpose3d_backward(x, p, &gz)?,
            };
            grads[layer] = Some(gp);
            Ok(gx)
        };
        let drop_position = |g: Tensor5<T>| -> Result<Tensor5<T>> {
            let c = g.shape().c - 3;
            Ok(split_channels(&g, c)?.0)
        };

        let mut g = back(grad_out.clone(), Activation::Sigmoid, &mut grads)?;
        if cfg.position_site == PositionSite::DecoderLast {
            g = drop_position(g)?;
        }
        let mut skip_grads = Vec::with_capacity(cfg.n_levels);
        for (i, _) in (0..cfg.n_levels).enumerate() {
            g = back(g, act, &mut grads)?;
            g = back(g, act, &mut grads)?;
            // decoder levels were visited deepest-first in forward
            let up_c = cache.skip_channels[cfg.n_levels - 1 - i];
            let (g_up, g_skip) = split_channels(&g, up_c)?;
            skip_grads.push(g_skip);
            g = match cfg.upsample {
                Upsample::NeighborPadConv => upsample3_backward(&g_up)?,
                Upsample::StridedDeconv => back(g_up, act, &mut grads)?,
            };
        }
        g = back(g, act, &mut grads)?;
        if cfg.position_site == PositionSite::EncoderLast {
            g = drop_position(g)?;
        }
        // skip_grads[0] belongs to the shallowest level
        for level in (0..cfg.n_levels).rev() {
            g = match cfg.downsample {
                Downsample::MaxPool => maxpool3d_backward(&cache.pools[level], &g)?,
                Downsample::StridedConv => back(g, act, &mut grads)?,
            };
            let skip = &skip_grads[level];
            for (a, &b) in g.data_mut().iter_mut().zip(skip.data()) {
                *a += b;
            }
            g = back(g, act, &mut grads)?;
            g = back(g, act, &mut grads)?;
        }
        debug_assert_eq!(layer, 0);
        Ok(grads.into_iter().map(|g| g.expect("every layer visited")).collect())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"YNET";
const CHECKPOINT_VERSION: u32 = 1;

impl YNetModel<f32> {
    /// `YNET` magic, `u32` version, `u32`-length-prefixed JSON config, then
    /// per layer the weight and bias arrays, each as `u32` count + `f32` LE.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.params {
            for arr in [&p.weight, &p.bias] {
                buf.extend_from_slice(&(arr.len() as u32).to_le_bytes());
                for v in arr.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: "YNET".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() < pos + n {
                return Err(Error::TruncatedPayload(format!(
                    "checkpoint ends at byte {} while reading {n} bytes at {pos}",
                    bytes.len()
                )));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = read_u32(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::ConfigMismatch(format!("unsupported checkpoint version {version}")));
        }
        let json_len = read_u32(take(4)?) as usize;
        let config: YNetConfig = serde_json::from_slice(take(json_len)?)
            .map_err(|e| Error::ConfigMismatch(format!("config blob: {e}")))?;
        config
            .validate()
            .map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        let layers = layer_specs(&config);
        let mut params = Vec::with_capacity(layers.len());
        for spec in &layers {
            let mut p = ConvParams::zeros(spec.c_in, spec.c_out);
            for arr in [&mut p.weight, &mut p.bias] {
                let count = read_u32(take(4)?) as usize;
                if count != arr.len() {
                    return Err(Error::ConfigMismatch(format!(
                        "layer array has {count} values, config implies {}",
                        arr.len()
                    )));
                }
                let raw = take(4 * count)?;
                for (v, c) in arr.iter_mut().zip(raw.chunks_exact(4)) {
                    *v = f32::from_le_bytes(c.try_into().unwrap());
                }
            }
            params.push(p);
        }
        if pos != bytes.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} trailing bytes after the last layer",
                bytes.len() - pos
            )));
        }
        Ok(YNetModel { config, layers, params })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

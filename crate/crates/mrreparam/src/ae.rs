//! Image-reconstruction autoencoder. Encoder taps after each activation form
//! the feature pyramid the parameter network consumes; the decoder rebuilds
//! the image from the 1x1 bottleneck alone.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checkpoint::{
    collect_param_steps, load_checkpoint, pack_model, save_checkpoint, unpack_model, Archive,
    CheckpointMeta,
};
use crate::tensor::{
    xavier_init, BufferSet, Element, Mode, NodeId, ParamSet, Parameter, Tape, Tensor,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const CHECKPOINT_KIND_AE: &str = "autoencoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Number of stride-2 encoder layers; the bottleneck is 1x1 when the
    /// input is `r` = 2^depth.
    pub depth: usize,
    pub base_width: usize,
    pub width_cap: usize,
    pub r: usize,
}

impl AutoencoderConfig {
    pub fn new(depth: usize, base_width: usize) -> Self {
        AutoencoderConfig {
            depth,
            base_width,
            width_cap: 8 * base_width,
            r: 1 << depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.depth > 16 {
            return Err(Error::InvalidConfig(format!(
                "depth {} outside supported range 2..=16",
                self.depth
            )));
        }
        if self.base_width == 0 || self.width_cap < self.base_width {
            return Err(Error::InvalidConfig(format!(
                "base_width {} and width_cap {} must satisfy 1 <= base_width <= width_cap",
                self.base_width, self.width_cap
            )));
        }
        if self.r != 1usize << self.depth {
            return Err(Error::InvalidConfig(format!(
                "resolution {} must equal 2^depth = {}",
                self.r,
                1usize << self.depth
            )));
        }
        Ok(())
    }

    /// Encoder channel schedule, 1-based: c_i = min(base_width * 2^(i-1), cap).
    pub fn channels(&self, layer: usize) -> usize {
        debug_assert!((1..=self.depth).contains(&layer));
        self.width_cap
            .min(self.base_width.saturating_mul(1usize << (layer - 1)))
    }

    /// Expected shape of pyramid level `i` (1-based) for batch size `n`.
    pub fn level_shape(&self, level: usize, n: usize) -> [usize; 4] {
        [n, self.channels(level), self.r >> level, self.r >> level]
    }

    /// Checks a pyramid against this config's shape ledger; returns the
    /// batch size.
    pub fn validate_pyramid<E: Element>(&self, tape: &Tape<E>, pyramid: &[NodeId]) -> Result<usize> {
        if pyramid.len() != self.depth {
            return Err(Error::input(
                "feature_pyramid",
                format!("{} levels, expected {}", pyramid.len(), self.depth),
            ));
        }
        let n = tape.value(pyramid[0]).shape()[0];
        for (idx, &node) in pyramid.iter().enumerate() {
            let want = self.level_shape(idx + 1, n);
            let got = tape.value(node).shape();
            if got != want {
                return Err(Error::shape(
                    "feature_pyramid",
                    format!("level {} has shape {got:?}, expected {want:?}", idx + 1),
                ));
            }
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
    /// Buffer ids; unused by instance norm.
    pub mean: usize,
    pub var: usize,
}

pub(crate) fn add_conv<E: Element>(
    params: &mut ParamSet<E>,
    rng: &mut ChaCha8Rng,
    name: &str,
    w_shape: &[usize],
    bias_len: usize,
) -> Result<Conv> {
    let w = params.insert(Parameter::new(
        format!("{name}.weight"),
        xavier_init(w_shape, rng),
    ))?;
    let b = params.insert(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[bias_len])))?;
    Ok(Conv { w, b })
}

fn add_batchnorm<E: Element>(
    params: &mut ParamSet<E>,
    buffers: &mut BufferSet<E>,
    name: &str,
    ch: usize,
) -> Result<Norm> {
    let gamma = params.insert(Parameter::new(format!("{name}.gamma"), Tensor::full(&[ch], E::from_f64(1.0))))?;
    let beta = params.insert(Parameter::new(format!("{name}.beta"), Tensor::zeros(&[ch])))?;
    let mean = buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[ch]))?;
    let var = buffers.insert(format!("{name}.running_var"), Tensor::full(&[ch], E::from_f64(1.0)))?;
    Ok(Norm { gamma, beta, mean, var })
}

/// The autoencoder: `depth` stride-2 conv+BN+leaky-ReLU encoder layers,
/// `depth - 1` tconv+BN+ReLU decoder layers, one parameter-free 2x upsample
/// closing the resolution gap, and a conv3x3 / conv1x1 / tanh head.
#[derive(Debug, Clone)]
pub struct Autoencoder<E: Element = f32> {
    pub config: AutoencoderConfig,
    pub params: ParamSet<E>,
    pub buffers: BufferSet<E>,
    enc: Vec<(Conv, Norm)>,
    dec: Vec<(Conv, Norm)>,
    head3: Conv,
    head1: Conv,
}

impl<E: Element> Autoencoder<E> {
    pub fn build(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = BufferSet::new();
        let d = config.depth;

        let mut enc = Vec::with_capacity(d);
        for i in 1..=d {
            let in_ch = if i == 1 { 1 } else { config.channels(i - 1) };
            let out_ch = config.channels(i);
            let conv = add_conv(&mut params, &mut rng, &format!("enc{i}.conv"), &[out_ch, in_ch, 3, 3], out_ch)?;
            let bn = add_batchnorm(&mut params, &mut buffers, &format!("enc{i}.bn"), out_ch)?;
            enc.push((conv, bn));
        }

        // Decoder widths retrace the encoder schedule: layer j outputs the
        // width the encoder had at the same resolution.
        let mut dec = Vec::with_capacity(d - 1);
        for j in 1..d {
            let in_ch = if j == 1 { config.channels(d) } else { config.channels(d - (j - 1)) };
            let out_ch = config.channels(d - j);
            let conv = add_conv(&mut params, &mut rng, &format!("dec{j}.tconv"), &[in_ch, out_ch, 3, 3], out_ch)?;
            let bn = add_batchnorm(&mut params, &mut buffers, &format!("dec{j}.bn"), out_ch)?;
            dec.push((conv, bn));
        }

        let w1 = config.channels(1);
        let head3 = add_conv(&mut params, &mut rng, "head.conv3x3", &[w1, w1, 3, 3], w1)?;
        let head1 = add_conv(&mut params, &mut rng, "head.conv1x1", &[1, w1, 1, 1], 1)?;

        Ok(Autoencoder { config, params, buffers, enc, dec, head3, head1 })
    }

    /// Runs the encoder and returns all `depth` post-activation taps,
    /// coarse level last. Train mode updates BN running statistics.
    pub fn encode(&mut self, tape: &mut Tape<E>, x: NodeId, mode: Mode) -> Result<Vec<NodeId>> {
        let shape = tape.value(x).shape().to_vec();
        let r = self.config.r;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != r || shape[3] != r {
            return Err(Error::input(
                "ae_encode",
                format!("input shape {shape:?}, expected [N, 1, {r}, {r}]"),
            ));
        }
        let mut cur = x;
        let mut pyramid = Vec::with_capacity(self.config.depth);
        for (conv, bn) in self.enc.clone() {
            cur = tape.conv2d(&self.params, cur, conv.w, conv.b, 2)?;
            let running = self.buffers.pair_mut(bn.mean, bn.var);
            cur = tape.batchnorm(&self.params, cur, bn.gamma, bn.beta, BN_EPS, mode, Some(running), BN_MOMENTUM)?;
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
            pyramid.push(cur);
        }
        Ok(pyramid)
    }

    /// Decodes the bottleneck back to image space. Only the last pyramid
    /// level is consumed; the full pyramid is taken to enforce the ledger.
    pub fn decode(&mut self, tape: &mut Tape<E>, pyramid: &[NodeId], mode: Mode) -> Result<NodeId> {
        self.config.validate_pyramid(tape, pyramid)?;
        let mut cur = *pyramid.last().expect("depth >= 2");
        for (conv, bn) in self.dec.clone() {
            cur = tape.tconv2d(&self.params, cur, conv.w, conv.b)?;
            let running = self.buffers.pair_mut(bn.mean, bn.var);
            cur = tape.batchnorm(&self.params, cur, bn.gamma, bn.beta, BN_EPS, mode, Some(running), BN_MOMENTUM)?;
            cur = tape.relu(cur);
        }
        cur = tape.upsample2x(cur)?;
        cur = tape.conv2d(&self.params, cur, self.head3.w, self.head3.b, 1)?;
        cur = tape.conv2d(&self.params, cur, self.head1.w, self.head1.b, 1)?;
        Ok(tape.tanh(cur))
    }

    pub fn autoencode(&mut self, tape: &mut Tape<E>, x: NodeId, mode: Mode) -> Result<(Vec<NodeId>, NodeId)> {
        let pyramid = self.encode(tape, x, mode)?;
        let recon = self.decode(tape, &pyramid, mode)?;
        Ok((pyramid, recon))
    }
}

impl Autoencoder<f32> {
    pub fn to_archive(&self, seed: u64, step: u64, epoch: u64) -> Result<Archive> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND_AE.to_string(),
            mode: None,
            config: serde_json::to_value(self.config)
                .map_err(|e| Error::input("ae_save", e.to_string()))?,
            seed,
            step,
            epoch,
            param_steps: collect_param_steps(&self.params),
            crc32: 0,
        };
        Ok(Archive { meta, tensors: pack_model(&self.params, &self.buffers, true) })
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64, epoch: u64) -> Result<()> {
        let archive = self.to_archive(seed, step, epoch)?;
        save_checkpoint(path, &archive.meta, &archive.tensors)
    }

    pub fn from_archive(archive: &Archive) -> Result<(Self, CheckpointMeta)> {
        if archive.meta.kind != CHECKPOINT_KIND_AE {
            return Err(Error::ModeMismatch(format!(
                "checkpoint kind {:?} where {CHECKPOINT_KIND_AE:?} was expected",
                archive.meta.kind
            )));
        }
        let config: AutoencoderConfig = serde_json::from_value(archive.meta.config.clone())
            .map_err(|e| Error::InvalidConfig(format!("autoencoder checkpoint config: {e}")))?;
        let mut model = Autoencoder::build(config, 0)?;
        unpack_model(archive, &mut model.params, &mut model.buffers)?;
        Ok((model, archive.meta.clone()))
    }

    pub fn load(path: &Path, verify: bool) -> Result<(Self, CheckpointMeta)> {
        Self::from_archive(&load_checkpoint(path, verify)?)
    }
}

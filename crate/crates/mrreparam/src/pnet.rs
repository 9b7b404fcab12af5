//! Coarse-to-fine parameter network. Starting from the autoencoder's 1x1
//! bottleneck, each block doubles the resolution, merges the encoder tap at
//! the matching size, and re-stacks broadcast parameter planes so every
//! scale sees the target acquisition.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ae::{add_conv, AutoencoderConfig, Conv, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::io::checkpoint::{
    collect_param_steps, load_checkpoint, pack_model, save_checkpoint, unpack_model, Archive,
    CheckpointMeta,
};
use crate::sim::{DatasetMode, ScanParams, TE_MAX_S, TE_MIN_S, TR_MAX_S, TR_MIN_S};
use crate::tensor::{Element, NodeId, ParamSet, Parameter, Tape, Tensor};

pub const IN_EPS: f64 = 1e-5;
pub const CHECKPOINT_KIND_PN: &str = "paramnet";

impl DatasetMode {
    /// Conditioning channel count: output (te, tr), plus input (te, tr) when
    /// the input acquisition varies.
    pub fn param_channels(self) -> usize {
        match self {
            DatasetMode::D2p => 2,
            DatasetMode::P2p => 4,
        }
    }
}

/// How out-of-range acquisition parameters are treated when normalizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangePolicy {
    Strict,
    Clamp,
}

/// Maps (te, tr) to [-1, 1]^2: log scale for TE (short echoes matter most),
/// linear for TR. Both endpoints land exactly on -1 and +1.
pub fn normalize_params(params: ScanParams, policy: RangePolicy) -> Result<[f64; 2]> {
    if !(params.te_s.is_finite() && params.tr_s.is_finite()) {
        return Err(Error::input("normalize_params", "non-finite te/tr"));
    }
    let p = match policy {
        RangePolicy::Strict => {
            params.validate()?;
            params
        }
        RangePolicy::Clamp => ScanParams {
            te_s: params.te_s.clamp(TE_MIN_S, TE_MAX_S),
            tr_s: params.tr_s.clamp(TR_MIN_S, TR_MAX_S),
        },
    };
    let te_n = 2.0 * ((p.te_s / TE_MIN_S).ln() / (TE_MAX_S / TE_MIN_S).ln()) - 1.0;
    let tr_n = 2.0 * ((p.tr_s - TR_MIN_S) / (TR_MAX_S - TR_MIN_S)) - 1.0;
    Ok([te_n, tr_n])
}

/// The full conditioning vector for one sample: `[te_out, tr_out]` for
/// default-input nets (the input acquisition is fixed, so it carries no
/// information), `[te_in, tr_in, te_out, tr_out]` otherwise.
pub fn conditioning_vector(
    mode: DatasetMode,
    params_in: ScanParams,
    params_out: ScanParams,
    policy: RangePolicy,
) -> Result<Vec<f64>> {
    let out = normalize_params(params_out, policy)?;
    Ok(match mode {
        DatasetMode::D2p => out.to_vec(),
        DatasetMode::P2p => {
            let inp = normalize_params(params_in, policy)?;
            vec![inp[0], inp[1], out[0], out[1]]
        }
    })
}

/// One constant plane per conditioning value and sample, broadcast to
/// `[rows.len(), rows[0].len(), h, w]`.
pub fn param_planes<E: Element>(rows: &[Vec<f64>], h: usize, w: usize) -> Tensor<E> {
    let p = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * p * h * w);
    for row in rows {
        debug_assert_eq!(row.len(), p);
        for &v in row {
            data.extend(std::iter::repeat(E::from_f64(v)).take(h * w));
        }
    }
    Tensor::from_vec(&[rows.len(), p, h, w], data).expect("plane extent")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamNetConfig {
    pub mode: DatasetMode,
    /// Geometry of the paired autoencoder; block count equals its depth.
    pub ae: AutoencoderConfig,
}

impl ParamNetConfig {
    pub fn new(mode: DatasetMode, ae: AutoencoderConfig) -> Self {
        ParamNetConfig { mode, ae }
    }

    /// Block output widths mirror the encoder schedule at the matching
    /// resolution; the final block works at the base width.
    pub fn block_width(&self, block: usize) -> usize {
        debug_assert!((1..=self.ae.depth).contains(&block));
        if block < self.ae.depth {
            self.ae.channels(self.ae.depth - block)
        } else {
            self.ae.base_width
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct InNorm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    tconv: Conv,
    conv1: Conv,
    in1: InNorm,
    conv2: Conv,
    in2: InNorm,
    conv3: Conv,
    in3: InNorm,
}

fn add_instancenorm<E: Element>(params: &mut ParamSet<E>, name: &str, ch: usize) -> Result<InNorm> {
    let gamma = params.insert(Parameter::new(
        format!("{name}.gamma"),
        Tensor::full(&[ch], E::from_f64(1.0)),
    ))?;
    let beta = params.insert(Parameter::new(format!("{name}.beta"), Tensor::zeros(&[ch])))?;
    Ok(InNorm { gamma, beta })
}

/// Param-Net: `depth` upsampling blocks followed by a two-conv tanh head.
/// Instance norm throughout; no running state, so forward passes are pure.
#[derive(Debug, Clone)]
pub struct ParamNet<E: Element = f32> {
    pub config: ParamNetConfig,
    pub params: ParamSet<E>,
    blocks: Vec<Block>,
    head_a: Conv,
    head_b: Conv,
}

impl<E: Element> ParamNet<E> {
    pub fn build(config: ParamNetConfig, seed: u64) -> Result<Self> {
        config.ae.validate()?;
        let d = config.ae.depth;
        let p = config.mode.param_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let mut blocks = Vec::with_capacity(d);
        for i in 1..=d {
            let n_i = config.block_width(i);
            let prev = if i == 1 { config.ae.channels(d) } else { config.block_width(i - 1) };
            let prefix = format!("pn{i}");
            let tconv = add_conv(&mut params, &mut rng, &format!("{prefix}.tconv"), &[prev, n_i, 3, 3], n_i)?;
            // Skip concat doubles the width everywhere except the last
            // block, which has no matching encoder tap.
            let c1_in = if i < d { n_i + config.ae.channels(d - i) } else { n_i };
            let conv1 = add_conv(&mut params, &mut rng, &format!("{prefix}.conv1"), &[n_i, c1_in, 3, 3], n_i)?;
            let in1 = add_instancenorm(&mut params, &format!("{prefix}.in1"), n_i)?;
            let conv2 = add_conv(&mut params, &mut rng, &format!("{prefix}.conv2"), &[n_i, n_i + p, 3, 3], n_i)?;
            let in2 = add_instancenorm(&mut params, &format!("{prefix}.in2"), n_i)?;
            let conv3 = add_conv(&mut params, &mut rng, &format!("{prefix}.conv3"), &[n_i, n_i, 3, 3], n_i)?;
            let in3 = add_instancenorm(&mut params, &format!("{prefix}.in3"), n_i)?;
            blocks.push(Block { tconv, conv1, in1, conv2, in2, conv3, in3 });
        }
        let n_d = config.block_width(d);
        let head_a = add_conv(&mut params, &mut rng, "head.conv_a", &[n_d, n_d, 3, 3], n_d)?;
        let head_b = add_conv(&mut params, &mut rng, "head.conv_b", &[1, n_d, 3, 3], 1)?;

        Ok(ParamNet { config, params, blocks, head_a, head_b })
    }

    fn conv_in_lrelu(&self, tape: &mut Tape<E>, x: NodeId, conv: Conv, norm: InNorm) -> Result<NodeId> {
        let y = tape.conv2d(&self.params, x, conv.w, conv.b, 1)?;
        // Every instance-norm site sits at spatial size >= 2x2: block i works
        // at 2^i with i >= 1, so the 1x1 degenerate case cannot arise.
        let y = tape.instancenorm(&self.params, y, norm.gamma, norm.beta, IN_EPS)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }

    /// Predicts the target-parameter image from the pyramid and one
    /// conditioning row per sample. Pure: identical inputs give bitwise
    /// identical outputs.
    pub fn forward(&self, tape: &mut Tape<E>, pyramid: &[NodeId], cond: &[Vec<f64>]) -> Result<NodeId> {
        let n = self.config.ae.validate_pyramid(tape, pyramid)?;
        let p = self.config.mode.param_channels();
        if cond.len() != n || cond.iter().any(|row| row.len() != p) {
            return Err(Error::input(
                "pnet_forward",
                format!(
                    "conditioning must be {n} rows of {p} values, got {} rows of {:?}",
                    cond.len(),
                    cond.iter().map(Vec::len).collect::<Vec<_>>()
                ),
            ));
        }
        let d = self.config.ae.depth;
        let mut cur = pyramid[d - 1];
        for i in 1..=d {
            let blk = &self.blocks[i - 1];
            cur = tape.tconv2d(&self.params, cur, blk.tconv.w, blk.tconv.b)?;
            if i < d {
                cur = tape.concat_channels(cur, pyramid[d - i - 1])?;
            }
            cur = self.conv_in_lrelu(tape, cur, blk.conv1, blk.in1)?;
            let side = 1usize << i;
            let planes = tape.leaf(param_planes(cond, side, side));
            cur = tape.concat_channels(cur, planes)?;
            cur = self.conv_in_lrelu(tape, cur, blk.conv2, blk.in2)?;
            cur = self.conv_in_lrelu(tape, cur, blk.conv3, blk.in3)?;
        }
        cur = tape.conv2d(&self.params, cur, self.head_a.w, self.head_a.b, 1)?;
        cur = tape.conv2d(&self.params, cur, self.head_b.w, self.head_b.b, 1)?;
        Ok(tape.tanh(cur))
    }
}

impl ParamNet<f32> {
    pub fn to_archive(&self, seed: u64, step: u64, epoch: u64) -> Result<Archive> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND_PN.to_string(),
            mode: Some(self.config.mode.as_str().to_string()),
            config: serde_json::to_value(self.config)
                .map_err(|e| Error::input("pnet_save", e.to_string()))?,
            seed,
            step,
            epoch,
            param_steps: collect_param_steps(&self.params),
            crc32: 0,
        };
        let buffers = crate::tensor::BufferSet::new();
        Ok(Archive { meta, tensors: pack_model(&self.params, &buffers, true) })
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64, epoch: u64) -> Result<()> {
        let archive = self.to_archive(seed, step, epoch)?;
        save_checkpoint(path, &archive.meta, &archive.tensors)
    }

    pub fn from_archive(archive: &Archive) -> Result<(Self, CheckpointMeta)> {
        if archive.meta.kind != CHECKPOINT_KIND_PN {
            return Err(Error::ModeMismatch(format!(
                "checkpoint kind {:?} where {CHECKPOINT_KIND_PN:?} was expected",
                archive.meta.kind
            )));
        }
        let config: ParamNetConfig = serde_json::from_value(archive.meta.config.clone())
            .map_err(|e| Error::InvalidConfig(format!("paramnet checkpoint config: {e}")))?;
        if archive.meta.mode.as_deref() != Some(config.mode.as_str()) {
            return Err(Error::ModeMismatch(format!(
                "checkpoint metadata mode {:?} disagrees with config mode {:?}",
                archive.meta.mode,
                config.mode.as_str()
            )));
        }
        let mut model = ParamNet::build(config, 0)?;
        let mut buffers = crate::tensor::BufferSet::new();
        unpack_model(archive, &mut model.params, &mut buffers)?;
        Ok((model, archive.meta.clone()))
    }

    pub fn load(path: &Path, verify: bool) -> Result<(Self, CheckpointMeta)> {
        Self::from_archive(&load_checkpoint(path, verify)?)
    }
}

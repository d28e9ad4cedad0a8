//! U-Net with a Res-SE bottleneck.
//!
//! Layer table (resolution `n`):
//!
//! | id | op | in | out | k | s | p | BN | act |
//! |----|----|----|-----|---|---|---|----|-----|
//! | E1 | conv | 4 | 16 | 9 | 1 | 4 | yes | relu |
//! | E2 | conv | 16 | 32 | 8 | 2 | 3 | yes | relu |
//! | E3 | conv | 32 | 64 | 6 | 2 | 2 | yes | relu |
//! | E4 | conv | 64 | 128 | 4 | 2 | 1 | yes | relu |
//! | B1..B6 | Res-SE | 128 | 128 | 3 | 1 | 1 | yes | relu |
//! | D1 | convT | 256 | 64 | 4 | 2 | 1 | yes | relu |
//! | D2 | convT | 128 | 32 | 6 | 2 | 2 | yes | relu |
//! | D3 | convT | 64 | 16 | 8 | 2 | 3 | yes | relu |
//! | D4 | conv | 32 | 8 | 5 | 1 | 2 | yes | relu |
//! | D5 | conv | 8 | 1 or 3 | 5 | 1 | 2 | no | none |
//!
//! Decoder layer `Di` (i <= 4) consumes `[upstream, E(5-i)]` concatenated
//! along channels.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Mode, ParamKind, ParamSet, Session};
use super::se::ResSeLayer;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    ConvTranspose,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub batch_norm: bool,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub encoder: Vec<EncoderSpec>,
    pub bottleneck_layers: usize,
    pub se_reduction: usize,
    pub decoder: Vec<DecoderSpec>,
    pub out_channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetConfig {
    /// The reference architecture; `out_channels` is 1 for thinning, 3 for displacement.
    pub fn reference(resolution: usize, out_channels: usize) -> Self {
        let enc = |out_channels, kernel, stride, pad| EncoderSpec {
            out_channels,
            kernel,
            stride,
            pad,
        };
        let dec = |kind, in_channels, out_channels, kernel, stride, pad, last: bool| DecoderSpec {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            batch_norm: !last,
            relu: !last,
        };
        use DecoderKind::{Conv, ConvTranspose};
        Self {
            resolution,
            in_channels: 4,
            encoder: vec![enc(16, 9, 1, 4), enc(32, 8, 2, 3), enc(64, 6, 2, 2), enc(128, 4, 2, 1)],
            bottleneck_layers: 6,
            se_reduction: 16,
            decoder: vec![
                dec(ConvTranspose, 256, 64, 4, 2, 1, false),
                dec(ConvTranspose, 128, 32, 6, 2, 2, false),
                dec(ConvTranspose, 64, 16, 8, 2, 3, false),
                dec(Conv, 32, 8, 5, 1, 2, false),
                dec(Conv, 8, out_channels, 5, 1, 2, true),
            ],
            out_channels,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Checks channel and spatial arithmetic and returns the per-layer shapes.
    pub fn plan(&self) -> Result<Vec<LayerShape>> {
        let arch = |m: String| Err(Error::Architecture(m));
        if self.resolution < 8 || !self.resolution.is_multiple_of(8) {
            return arch(format!(
                "resolution {} must be a positive multiple of 8",
                self.resolution
            ));
        }
        if self.encoder.is_empty() {
            return arch("encoder is empty".into());
        }
        if self.decoder.len() != self.encoder.len() + 1 {
            return arch(format!(
                "{} decoder layers for {} encoder layers (expected one more)",
                self.decoder.len(),
                self.encoder.len()
            ));
        }
        let mut plan = Vec::new();
        let mut channels = self.in_channels;
        let mut size = self.resolution;
        let mut skips = Vec::new();
        for (i, e) in self.encoder.iter().enumerate() {
            let out = conv_out(size, e.kernel, e.stride, e.pad)
                .ok_or_else(|| Error::Architecture(format!("E{} collapses {size} px", i + 1)))?;
            plan.push(LayerShape {
                id: LayerId::Encoder(i as u8 + 1),
                in_channels: channels,
                out_channels: e.out_channels,
                in_size: size,
                out_size: out,
            });
            channels = e.out_channels;
            size = out;
            skips.push((channels, size));
        }
        if self.se_reduction == 0 || !channels.is_multiple_of(self.se_reduction) {
            return arch(format!(
                "bottleneck channels {channels} not divisible by SE reduction {}",
                self.se_reduction
            ));
        }
        for b in 0..self.bottleneck_layers {
            plan.push(LayerShape {
                id: LayerId::Bottleneck(b as u8 + 1),
                in_channels: channels,
                out_channels: channels,
                in_size: size,
                out_size: size,
            });
        }
        for (i, d) in self.decoder.iter().enumerate() {
            let id = LayerId::Decoder(i as u8 + 1);
            let mut expected_in = channels;
            if let Some(&(skip_c, skip_size)) = skips.len().checked_sub(i + 1).map(|k| &skips[k]) {
                if skip_size != size {
                    return arch(format!("{id}: upstream {size} px cannot join skip of {skip_size} px"));
                }
                expected_in += skip_c;
            }
            if d.in_channels != expected_in {
                return arch(format!(
                    "{id}: declared {} input channels, concatenation yields {expected_in}",
                    d.in_channels
                ));
            }
            let out = match d.kind {
                DecoderKind::Conv => conv_out(size, d.kernel, d.stride, d.pad),
                DecoderKind::ConvTranspose => ((size - 1) * d.stride + d.kernel).checked_sub(2 * d.pad),
            }
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::Architecture(format!("{id} collapses {size} px")))?;
            plan.push(LayerShape {
                id,
                in_channels: d.in_channels,
                out_channels: d.out_channels,
                in_size: size,
                out_size: out,
            });
            channels = d.out_channels;
            size = out;
        }
        let last = self.decoder.last().expect("non-empty decoder");
        if last.batch_norm || last.relu {
            return arch("final layer must have neither batch norm nor activation".into());
        }
        if channels != self.out_channels {
            return arch(format!(
                "final layer emits {channels} channels, config wants {}",
                self.out_channels
            ));
        }
        if size != self.resolution {
            return arch(format!("output is {size} px, input is {} px", self.resolution));
        }
        Ok(plan)
    }

    /// Number of trainable scalars, derived from the config alone.
    pub fn count_params(&self) -> Result<usize> {
        let plan = self.plan()?;
        let mut total = 0;
        let mut cin = self.in_channels;
        for e in &self.encoder {
            total += cin * e.out_channels * e.kernel * e.kernel + e.out_channels + 2 * e.out_channels;
            cin = e.out_channels;
        }
        let c = cin;
        let squeezed = c / self.se_reduction;
        let res_se = 2 * (c * c * 9 + c + 2 * c) + (c * squeezed + squeezed) + (squeezed * 2 * c + 2 * c);
        total += self.bottleneck_layers * res_se;
        for d in &self.decoder {
            total += d.in_channels * d.out_channels * d.kernel * d.kernel + d.out_channels;
            if d.batch_norm {
                total += 2 * d.out_channels;
            }
        }
        debug_assert!(!plan.is_empty());
        Ok(total)
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerId {
    Encoder(u8),
    Bottleneck(u8),
    Decoder(u8),
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Encoder(i) => write!(f, "E{i}"),
            LayerId::Bottleneck(i) => write!(f, "B{i}"),
            LayerId::Decoder(i) => write!(f, "D{i}"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownLayer(s.to_string());
        let (kind, num) = s.split_at(s.len().min(1));
        let index: u8 = num.parse().map_err(|_| unknown())?;
        match kind {
            "E" => Ok(LayerId::Encoder(index)),
            "B" => Ok(LayerId::Bottleneck(index)),
            "D" => Ok(LayerId::Decoder(index)),
            _ => Err(unknown()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub id: LayerId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_size: usize,
    pub out_size: usize,
}

#[derive(Clone, Debug)]
enum DecoderOp {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    op: DecoderOp,
    bn: Option<BatchNorm2d>,
    relu: bool,
}

#[derive(Clone, Debug)]
pub struct ResSeUNet<T: Scalar = f32> {
    config: NetConfig,
    plan: Vec<LayerShape>,
    params: ParamSet<T>,
    encoder: Vec<(Conv2d, BatchNorm2d)>,
    bottleneck: Vec<ResSeLayer>,
    decoder: Vec<DecoderLayer>,
}

impl<T: Scalar> ResSeUNet<T> {
    /// Builds the network; aborts with [`Error::Architecture`] if the
    /// config's channel or spatial arithmetic does not close.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = config.in_channels;
        let mut encoder = Vec::new();
        for (i, e) in config.encoder.iter().enumerate() {
            let name = format!("E{}", i + 1);
            let conv = Conv2d::new(
                &mut params,
                &format!("{name}.conv"),
                cin,
                e.out_channels,
                e.kernel,
                e.stride,
                e.pad,
                &mut rng,
            );
            let bn = BatchNorm2d::new(&mut params, &format!("{name}.bn"), e.out_channels, config.bn_eps);
            encoder.push((conv, bn));
            cin = e.out_channels;
        }
        let bottleneck = (0..config.bottleneck_layers)
            .map(|b| {
                ResSeLayer::new(
                    &mut params,
                    &format!("B{}", b + 1),
                    cin,
                    config.se_reduction,
                    config.bn_eps,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut decoder = Vec::new();
        for (i, d) in config.decoder.iter().enumerate() {
            let name = format!("D{}", i + 1);
            let op = match d.kind {
                DecoderKind::Conv => DecoderOp::Conv(Conv2d::new(
                    &mut params,
                    &format!("{name}.conv"),
                    d.in_channels,
                    d.out_channels,
                    d.kernel,
                    d.stride,
                    d.pad,
                    &mut rng,
                )),
                DecoderKind::ConvTranspose => DecoderOp::ConvTranspose(ConvTranspose2d::new(
                    &mut params,
                    &format!("{name}.convt"),
                    d.in_channels,
                    d.out_channels,
                    d.kernel,
                    d.stride,
                    d.pad,
                    &mut rng,
                )),
            };
            let bn = d
                .batch_norm
                .then(|| BatchNorm2d::new(&mut params, &format!("{name}.bn"), d.out_channels, config.bn_eps));
            decoder.push(DecoderLayer { op, bn, relu: d.relu });
        }
        Ok(Self {
            config,
            plan,
            params,
            encoder,
            bottleneck,
            decoder,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn plan(&self) -> &[LayerShape] {
        &self.plan
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let n = self.config.resolution;
        if dims.len() != 4 || dims[1] != self.config.in_channels || dims[2] != n || dims[3] != n {
            return Err(Error::Shape(format!(
                "network expects [N, {}, {n}, {n}], got {:?}",
                self.config.in_channels, dims
            )));
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        Ok(self.forward_capture(s, x, None)?.0)
    }

    /// Forward pass that also returns the post-activation output of `capture`.
    pub fn forward_capture(&self, s: &mut Session<T>, x: Var, capture: Option<LayerId>) -> Result<(Var, Option<Var>)> {
        self.check_input(s.graph.value(x).dims())?;
        let mut captured = None;
        let mut keep = |id: LayerId, v: Var| {
            if capture == Some(id) {
                captured = Some(v);
            }
        };
        let mut h = x;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, (conv, bn)) in self.encoder.iter().enumerate() {
            h = conv.forward(s, h)?;
            h = bn.forward(s, h)?;
            h = s.graph.relu(h);
            keep(LayerId::Encoder(i as u8 + 1), h);
            skips.push(h);
        }
        for (i, layer) in self.bottleneck.iter().enumerate() {
            h = layer.forward(s, h)?;
            keep(LayerId::Bottleneck(i as u8 + 1), h);
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            if let Some(skip) = skips.pop() {
                h = s.graph.concat_channels(h, skip)?;
            }
            h = match &layer.op {
                DecoderOp::Conv(c) => c.forward(s, h)?,
                DecoderOp::ConvTranspose(c) => c.forward(s, h)?,
            };
            if let Some(bn) = &layer.bn {
                h = bn.forward(s, h)?;
            }
            if layer.relu {
                h = s.graph.relu(h);
            }
            keep(LayerId::Decoder(i as u8 + 1), h);
        }
        Ok((h, captured))
    }

    /// Inference in eval mode without gradient tracking.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(&self.params, Mode::Eval, false);
        let x = s.graph.constant(input.clone());
        let y = self.forward(&mut s, x)?;
        Ok(s.graph.into_value(y))
    }

    /// Post-activation feature maps of one layer for the given input batch.
    pub fn dump_feature_maps(&self, layer: LayerId, input: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.plan.iter().any(|l| l.id == layer) {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        let mut s = Session::new(&self.params, Mode::Eval, false);
        let x = s.graph.constant(input.clone());
        let (_, captured) = self.forward_capture(&mut s, x, Some(layer))?;
        let v = captured.ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        Ok(s.graph.into_value(v))
    }
}

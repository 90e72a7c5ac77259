//! Small fully convolutional network used as denoiser, learned proximal map
//! and score model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, ConvShape};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::io;
use crate::tensor::{RealTensor2, RngStream};

use super::ReconError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetArch {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    /// Number of conv layers, including the output layer.
    pub depth: usize,
    pub kernel: usize,
    pub slope: f64,
    /// Adds channel 0 of the input to the (single-channel) output.
    pub residual: bool,
}

impl Default for NetArch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            hidden: 16,
            depth: 4,
            kernel: 3,
            slope: 0.1,
            residual: true,
        }
    }
}

impl NetArch {
    fn layer_channels(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let cin = if l == 0 {
                    self.in_channels
                } else {
                    self.hidden
                };
                let cout = if l + 1 == self.depth {
                    self.out_channels
                } else {
                    self.hidden
                };
                (cin, cout)
            })
            .collect()
    }

    fn validate(&self) -> Result<(), ReconError> {
        if self.depth == 0 || self.kernel % 2 == 0 || self.in_channels == 0 {
            return Err(ReconError::Config(format!("invalid architecture {self:?}")));
        }
        if self.residual && self.out_channels != 1 {
            return Err(ReconError::Config(
                "residual head needs a single output channel".into(),
            ));
        }
        Ok(())
    }
}

/// Conv stack `conv -> leaky_relu -> ... -> conv`. The output layer starts
/// at zero, so a fresh residual net is the identity and a fresh
/// non-residual net outputs zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    arch: NetArch,
    /// `[w0, b0, w1, b1, ...]`
    params: Vec<Tensor>,
}

impl DenoiserNet {
    pub fn new(arch: NetArch, rng: &mut RngStream) -> Result<Self, ReconError> {
        arch.validate()?;
        let k = arch.kernel;
        let layers = arch.layer_channels();
        let mut params = Vec::with_capacity(2 * layers.len());
        for (l, &(cin, cout)) in layers.iter().enumerate() {
            let fan_in = (cin * k * k) as f64;
            let std = if l + 1 == layers.len() {
                0.0
            } else {
                (2.0 / (fan_in * (1.0 + arch.slope * arch.slope))).sqrt()
            };
            let w: Vec<f64> = (0..cout * cin * k * k)
                .map(|_| std * rng.normal())
                .collect();
            params.push(Tensor::new(vec![cout, cin, k, k], w)?);
            params.push(Tensor::zeros(vec![cout]));
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: NetArch, params: Vec<Tensor>) -> Result<Self, ReconError> {
        arch.validate()?;
        let mut net = Self {
            arch,
            params: Vec::new(),
        };
        net.set_params(params)?;
        Ok(net)
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), ReconError> {
        let k = self.arch.kernel;
        let expected: Vec<Vec<usize>> = self
            .arch
            .layer_channels()
            .into_iter()
            .flat_map(|(cin, cout)| [vec![cout, cin, k, k], vec![cout]])
            .collect();
        if params.len() != expected.len() {
            return Err(AutodiffError::Count {
                expected: expected.len(),
                got: params.len(),
            }
            .into());
        }
        for (p, e) in params.iter().zip(&expected) {
            if p.shape() != e.as_slice() {
                return Err(AutodiffError::Shape {
                    op: "set_params",
                    left: p.shape().to_vec(),
                    right: e.clone(),
                }
                .into());
            }
        }
        self.params = params;
        Ok(())
    }

    /// Tape-free evaluation of a `[in_channels, h, w]` input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, ReconError> {
        let (cin, h, w) = match input.shape()[..] {
            [c, h, w] if c == self.arch.in_channels => (c, h, w),
            _ => {
                return Err(AutodiffError::Shape {
                    op: "net_forward",
                    left: input.shape().to_vec(),
                    right: vec![self.arch.in_channels, 0, 0],
                }
                .into())
            }
        };
        let layers = self.arch.layer_channels();
        let mut x = input.data().to_vec();
        debug_assert_eq!(cin, layers[0].0);
        for (l, &(cin, cout)) in layers.iter().enumerate() {
            let shape = ConvShape {
                cin,
                cout,
                h,
                w,
                k: self.arch.kernel,
            };
            x = kernels::conv2d_forward(
                shape,
                &x,
                self.params[2 * l].data(),
                self.params[2 * l + 1].data(),
            );
            if l + 1 < layers.len() {
                x = kernels::leaky_relu(&x, self.arch.slope);
            }
        }
        if self.arch.residual {
            for (o, i) in x.iter_mut().zip(&input.data()[..h * w]) {
                *o += i;
            }
        }
        Ok(Tensor::new(vec![self.arch.out_channels, h, w], x)?)
    }

    /// Single-channel image in, single-channel image out.
    pub fn apply(&self, image: &RealTensor2) -> Result<RealTensor2, ReconError> {
        Ok(self.forward(&Tensor::from_real(image))?.to_real()?)
    }

    /// Puts the parameters on `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    /// Records the forward pass using previously bound parameter leaves.
    pub fn record(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
    ) -> Result<Var, AutodiffError> {
        let layers = self.arch.layer_channels();
        if params.len() != 2 * layers.len() {
            return Err(AutodiffError::Count {
                expected: 2 * layers.len(),
                got: params.len(),
            });
        }
        let mut x = input;
        for l in 0..layers.len() {
            x = tape.conv2d(x, params[2 * l], params[2 * l + 1])?;
            if l + 1 < layers.len() {
                x = tape.leaky_relu(x, self.arch.slope);
            }
        }
        if self.arch.residual {
            let skip = if self.arch.in_channels == 1 {
                input
            } else {
                return Err(AutodiffError::Shape {
                    op: "residual",
                    left: tape.value(input).shape().to_vec(),
                    right: vec![1, 0, 0],
                });
            };
            x = tape.add(x, skip)?;
        }
        Ok(x)
    }
}

/// On-disk layout: `model.json` plus one TNSR file per parameter tensor,
/// each stored as a `1 x len` real tensor with its true shape in the JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub nets: Vec<NetEntry>,
    /// Free-form provenance: training config, seeds, reports.
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetEntry {
    pub arch: NetArch,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

pub const CHECKPOINT_FILE: &str = "model.json";

fn io_error(path: &Path, e: std::io::Error) -> ReconError {
    ReconError::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    kind: &str,
    nets: &[DenoiserNet],
    meta: serde_json::Value,
) -> Result<(), ReconError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut entries = Vec::new();
    for (n, net) in nets.iter().enumerate() {
        let mut params = Vec::new();
        for (i, p) in net.params().iter().enumerate() {
            let file = format!("net{n}_param{i}.tnsr");
            let flat = RealTensor2::from_vec(1, p.len(), p.data().to_vec())?;
            io::save_real(dir.join(&file), &flat)?;
            params.push(ParamEntry {
                file,
                shape: p.shape().to_vec(),
            });
        }
        entries.push(NetEntry {
            arch: net.arch().clone(),
            params,
        });
    }
    let header = CheckpointHeader {
        kind: kind.to_string(),
        nets: entries,
        meta,
    };
    let path = dir.join(CHECKPOINT_FILE);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&path, text).map_err(|e| io_error(&path, e))
}

pub fn load_checkpoint(
    dir: impl AsRef<Path>,
) -> Result<(CheckpointHeader, Vec<DenoiserNet>), ReconError> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|e| ReconError::Checkpoint(e.to_string()))?;
    let mut nets = Vec::new();
    for entry in &header.nets {
        let mut params = Vec::new();
        for p in &entry.params {
            let flat = io::load_real(dir.join(&p.file))?;
            params.push(Tensor::new(p.shape.clone(), flat.into_vec())?);
        }
        nets.push(DenoiserNet::from_params(entry.arch.clone(), params)?);
    }
    Ok((header, nets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_residual_net_is_identity() {
        let net = DenoiserNet::new(NetArch::default(), &mut RngStream::new(0)).unwrap();
        let x = crate::phantom::shepp_logan(16).unwrap().image;
        assert_eq!(net.apply(&x).unwrap(), x);
        // 1*16*9+16 + 2*(16*16*9+16) + 16*9+1
        assert_eq!(net.param_count(), 160 + 2 * 2320 + 145);
    }

    #[test]
    fn fresh_plain_net_outputs_zero() {
        let arch = NetArch {
            in_channels: 2,
            residual: false,
            ..NetArch::default()
        };
        let net = DenoiserNet::new(arch, &mut RngStream::new(0)).unwrap();
        let out = net.forward(&Tensor::zeros(vec![2, 8, 8]).clone()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let mut rng = RngStream::new(3);
        let mut net = DenoiserNet::new(NetArch::default(), &mut rng).unwrap();
        // randomize the zero-initialized head so the body matters
        let mut params = net.params().to_vec();
        for p in params.iter_mut() {
            for v in p.data_mut() {
                *v += 0.1 * rng.normal();
            }
        }
        net.set_params(params).unwrap();
        let x = crate::tensor::gaussian_real(&mut rng, 8, 8);
        let plain = net.apply(&x).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, false);
        let input = tape.constant(Tensor::from_real(&x));
        let out = net.record(&mut tape, &vars, input).unwrap();
        assert_eq!(tape.value(out).to_real().unwrap(), plain);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = DenoiserNet::new(NetArch::default(), &mut RngStream::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(
            dir.path(),
            "denoiser",
            &[net.clone()],
            serde_json::json!({"seed": 1}),
        )
        .unwrap();
        let (header, nets) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(header.kind, "denoiser");
        assert_eq!(nets, vec![net]);
    }
}

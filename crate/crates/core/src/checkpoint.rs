//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | offset     | size | content                                        |
//! |------------|------|------------------------------------------------|
//! | 0          | 8    | magic `SDMCKPT1`                               |
//! | 8          | 8    | `u64` length `N` of the JSON header            |
//! | 16         | N    | UTF-8 JSON header                              |
//! | 16 + N     | ...  | `f64` blocks, row-major, in header order       |
//!
//! The header is `{"format_version": 1, "config": MlpConfig,
//! "location_encoder": null | "sinusoidal", "loss": LossConfig | null,
//! "blocks": [{"name", "shape"}, ...]}`. Blocks are, in order:
//! `input.weight [D,H]`, `input.bias [H]`, then for each hidden layer `i`
//! `hidden.i.weight [H,H]`, `hidden.i.bias`, `hidden.i.gamma`,
//! `hidden.i.beta`, `hidden.i.running_mean`, `hidden.i.running_var` (all `[H]`),
//! then `output.weight [H,S]` and `output.bias [S]`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{HiddenLayer, LocationEncoder, MlpConfig, Parameters};

pub const MAGIC: &[u8; 8] = b"SDMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: MlpConfig,
    pub location_encoder: Option<LocationEncoder>,
    pub loss: Option<LossConfig>,
    pub blocks: Vec<BlockInfo>,
}

/// Parameters plus what is needed to rebuild their inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub location_encoder: Option<LocationEncoder>,
    pub loss: Option<LossConfig>,
}

fn vector(a: &Array1<f64>) -> (Vec<usize>, &[f64]) {
    (vec![a.len()], a.as_slice().expect("contiguous"))
}

fn matrix(a: &Array2<f64>) -> (Vec<usize>, &[f64]) {
    (a.shape().to_vec(), a.as_slice().expect("contiguous"))
}

type Block<'a> = (String, Vec<usize>, &'a [f64]);

fn blocks_of(p: &Parameters) -> Vec<Block<'_>> {
    let mut out = Vec::new();
    fn push<'a>(out: &mut Vec<Block<'a>>, name: String, (shape, data): (Vec<usize>, &'a [f64])) {
        out.push((name, shape, data));
    }
    let mut push = |name: String, block| push(&mut out, name, block);
    push("input.weight".into(), matrix(&p.input_weight));
    push("input.bias".into(), vector(&p.input_bias));
    for (i, l) in p.hidden.iter().enumerate() {
        push(format!("hidden.{i}.weight"), matrix(&l.weight));
        push(format!("hidden.{i}.bias"), vector(&l.bias));
        push(format!("hidden.{i}.gamma"), vector(&l.gamma));
        push(format!("hidden.{i}.beta"), vector(&l.beta));
        push(format!("hidden.{i}.running_mean"), vector(&l.running_mean));
        push(format!("hidden.{i}.running_var"), vector(&l.running_var));
    }
    push("output.weight".into(), matrix(&p.output_weight));
    push("output.bias".into(), vector(&p.output_bias));
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blocks = blocks_of(&self.params);
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.params.config.clone(),
            location_encoder: self.location_encoder,
            loss: self.loss,
            blocks: blocks
                .iter()
                .map(|(name, shape, _)| BlockInfo {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let values: usize = blocks.iter().map(|(_, _, d)| d.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &blocks {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..)
            .filter(|b| b.len() >= header_len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.format_version)));
        }
        header.config.validate()?;

        let cfg = &header.config;
        let (d, h, s) = (cfg.input_dim, cfg.hidden_width, cfg.output_dim);
        let mut expected = vec![
            BlockInfo { name: "input.weight".into(), shape: vec![d, h] },
            BlockInfo { name: "input.bias".into(), shape: vec![h] },
        ];
        for i in 0..cfg.hidden_layers {
            expected.push(BlockInfo { name: format!("hidden.{i}.weight"), shape: vec![h, h] });
            for part in ["bias", "gamma", "beta", "running_mean", "running_var"] {
                expected.push(BlockInfo { name: format!("hidden.{i}.{part}"), shape: vec![h] });
            }
        }
        expected.push(BlockInfo { name: "output.weight".into(), shape: vec![h, s] });
        expected.push(BlockInfo { name: "output.bias".into(), shape: vec![s] });
        if expected != header.blocks {
            return Err(bad("block list does not match the network configuration"));
        }

        let mut data = &body[header_len..];
        let mut next_block = |len: usize| -> Result<Vec<f64>> {
            let need = len * 8;
            if data.len() < need {
                return Err(bad("truncated data"));
            }
            let values: Vec<f64> = data[..need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("checkpoint parameters".into()));
            }
            data = &data[need..];
            Ok(values)
        };
        let shaped = |rows: usize, cols: usize, v: Vec<f64>| Array2::from_shape_vec((rows, cols), v).expect("length checked");

        let input_weight = shaped(d, h, next_block(d * h)?);
        let input_bias = Array1::from(next_block(h)?);
        let mut hidden = Vec::with_capacity(cfg.hidden_layers);
        for _ in 0..cfg.hidden_layers {
            hidden.push(HiddenLayer {
                weight: shaped(h, h, next_block(h * h)?),
                bias: Array1::from(next_block(h)?),
                gamma: Array1::from(next_block(h)?),
                beta: Array1::from(next_block(h)?),
                running_mean: Array1::from(next_block(h)?),
                running_var: Array1::from(next_block(h)?),
            });
        }
        let output_weight = shaped(h, s, next_block(h * s)?);
        let output_bias = Array1::from(next_block(s)?);
        if !data.is_empty() {
            return Err(bad("trailing bytes after the last block"));
        }
        let params = Parameters {
            config: header.config.clone(),
            input_weight,
            input_bias,
            hidden,
            output_weight,
            output_bias,
        };
        Ok(Self {
            params,
            location_encoder: header.location_encoder,
            loss: header.loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

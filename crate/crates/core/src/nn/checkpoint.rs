//! Checkpoint serialization for [`NetworkGraph`].
//!
//! Layout: 8-byte magic, u16 LE format version, u32 LE manifest length, a
//! JSON manifest (`dtype` + the graph's [`GraphSpec`]), then every tensor in
//! the fixed traversal order (stem conv, stem BN, per stage: downsample conv,
//! downsample BN, then each block's conv1/bn1/conv2/bn2/conv3/bn3, finally
//! the classifier). BN contributes gamma, beta, running mean, running var.
//! The write and read walks below must stay in lockstep; the round-trip test
//! is the tripwire.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{GraphSpec, NetworkGraph};
use crate::nn::layers::{BatchNorm2d, Conv2d, Linear};
use crate::tensor::{read_tensor, write_tensor, Parameter, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSPNCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    spec: GraphSpec,
}

fn put<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    write_tensor(out, t).expect("writing to a Vec cannot fail");
}

fn put_conv<T: Scalar>(out: &mut Vec<u8>, conv: &Conv2d<T>) {
    put(out, conv.weight().value());
    if let Some(b) = conv.bias() {
        put(out, b.value());
    }
}

fn put_bn<T: Scalar>(out: &mut Vec<u8>, bn: &BatchNorm2d<T>) {
    let c = bn.channels();
    put(out, bn.gamma().value());
    put(out, bn.beta().value());
    put(out, &Tensor::from_vec(bn.running_mean().to_vec(), &[c]).expect("stat length"));
    put(out, &Tensor::from_vec(bn.running_var().to_vec(), &[c]).expect("stat length"));
}

fn put_linear<T: Scalar>(out: &mut Vec<u8>, fc: &Linear<T>) {
    put(out, fc.weight().value());
    put(out, fc.bias().value());
}

/// Reads one tensor, translating stream-relative corruption offsets into
/// whole-file offsets under the caller's label.
fn take<T: Scalar>(cur: &mut Cursor<&[u8]>, label: &str, name: &str) -> Result<Tensor<T>> {
    let base = cur.position();
    read_tensor(cur).map_err(|e| match e {
        Error::Corrupt { offset, detail, .. } => Error::Corrupt {
            path: label.to_string(),
            offset: base + offset,
            detail: format!("{name}: {detail}"),
        },
        other => other,
    })
}

fn take_into_param<T: Scalar>(
    cur: &mut Cursor<&[u8]>,
    label: &str,
    name: &str,
    param: &mut Parameter<T>,
) -> Result<()> {
    let base = cur.position();
    let t = take(cur, label, name)?;
    if t.shape() != param.shape() {
        return Err(Error::Corrupt {
            path: label.to_string(),
            offset: base,
            detail: format!(
                "{name}: manifest implies shape {:?}, payload holds {:?}",
                param.shape(),
                t.shape()
            ),
        });
    }
    param.data_mut().copy_from_slice(t.data());
    Ok(())
}

fn take_into_stat<T: Scalar>(
    cur: &mut Cursor<&[u8]>,
    label: &str,
    name: &str,
    stat: &mut Vec<T>,
) -> Result<()> {
    let base = cur.position();
    let t = take(cur, label, name)?;
    if t.shape() != [stat.len()] {
        return Err(Error::Corrupt {
            path: label.to_string(),
            offset: base,
            detail: format!(
                "{name}: manifest implies {} channels, payload holds shape {:?}",
                stat.len(),
                t.shape()
            ),
        });
    }
    stat.copy_from_slice(t.data());
    Ok(())
}

fn take_conv<T: Scalar>(
    cur: &mut Cursor<&[u8]>,
    label: &str,
    name: &str,
    conv: &mut Conv2d<T>,
) -> Result<()> {
    take_into_param(cur, label, &format!("{name}.weight"), conv.weight_mut())?;
    if let Some(b) = conv.bias_mut() {
        take_into_param(cur, label, &format!("{name}.bias"), b)?;
    }
    Ok(())
}

fn take_bn<T: Scalar>(
    cur: &mut Cursor<&[u8]>,
    label: &str,
    name: &str,
    bn: &mut BatchNorm2d<T>,
) -> Result<()> {
    take_into_param(cur, label, &format!("{name}.gamma"), bn.gamma_mut())?;
    take_into_param(cur, label, &format!("{name}.beta"), bn.beta_mut())?;
    take_into_stat(cur, label, &format!("{name}.running_mean"), bn.running_mean_mut())?;
    take_into_stat(cur, label, &format!("{name}.running_var"), bn.running_var_mut())
}

impl<T: Scalar> NetworkGraph<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            dtype: T::DTYPE.to_string(),
            spec: self.spec(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest always serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);

        put_conv(&mut out, &self.stem_conv);
        put_bn(&mut out, &self.stem_bn);
        for stage in &self.stages {
            put_conv(&mut out, &stage.down_conv);
            put_bn(&mut out, &stage.down_bn);
            for block in &stage.blocks {
                put_conv(&mut out, &block.conv1);
                put_bn(&mut out, &block.bn1);
                put_conv(&mut out, &block.conv2);
                put_bn(&mut out, &block.bn2);
                put_conv(&mut out, &block.conv3);
                put_bn(&mut out, &block.bn3);
            }
        }
        put_linear(&mut out, &self.classifier);
        out
    }

    /// Inverse of [`Self::to_bytes`]. `label` names the source in errors
    /// (usually the file path).
    pub fn from_bytes(bytes: &[u8], label: &str) -> Result<Self> {
        let corrupt = |offset: u64, detail: String| Error::Corrupt {
            path: label.to_string(),
            offset,
            detail,
        };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| corrupt(0, "file shorter than the 8-byte magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt(0, format!("bad magic {magic:02x?}")));
        }
        let mut version = [0u8; 2];
        cur.read_exact(&mut version)
            .map_err(|_| corrupt(8, "missing version field".into()))?;
        let version = u16::from_le_bytes(version);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(
                8,
                format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let mut len = [0u8; 4];
        cur.read_exact(&mut len)
            .map_err(|_| corrupt(10, "missing manifest length".into()))?;
        let len = u32::from_le_bytes(len) as usize;
        let manifest_start = cur.position();
        let mut json = vec![0u8; len];
        cur.read_exact(&mut json)
            .map_err(|_| corrupt(manifest_start, format!("manifest truncated (expected {len} bytes)")))?;
        let manifest: Manifest = serde_json::from_slice(&json)
            .map_err(|e| corrupt(manifest_start, format!("manifest does not parse: {e}")))?;
        if manifest.dtype != T::DTYPE.to_string() {
            return Err(corrupt(
                manifest_start,
                format!("checkpoint holds {} tensors, requested {}", manifest.dtype, T::DTYPE),
            ));
        }
        manifest.spec.validate()?;

        let mut net = NetworkGraph::from_spec(&manifest.spec, 0)?;
        take_conv(&mut cur, label, "stem.conv", &mut net.stem_conv)?;
        take_bn(&mut cur, label, "stem.bn", &mut net.stem_bn)?;
        for s in 0..net.stages.len() {
            let stage = &mut net.stages[s];
            take_conv(&mut cur, label, &format!("s{s}.down.conv"), &mut stage.down_conv)?;
            take_bn(&mut cur, label, &format!("s{s}.down.bn"), &mut stage.down_bn)?;
            for b in 0..stage.blocks.len() {
                let block = &mut stage.blocks[b];
                let p = format!("s{s}.b{b}");
                take_conv(&mut cur, label, &format!("{p}.conv1"), &mut block.conv1)?;
                take_bn(&mut cur, label, &format!("{p}.bn1"), &mut block.bn1)?;
                take_conv(&mut cur, label, &format!("{p}.conv2"), &mut block.conv2)?;
                take_bn(&mut cur, label, &format!("{p}.bn2"), &mut block.bn2)?;
                take_conv(&mut cur, label, &format!("{p}.conv3"), &mut block.conv3)?;
                take_bn(&mut cur, label, &format!("{p}.bn3"), &mut block.bn3)?;
            }
        }
        take_into_param(&mut cur, label, "fc.weight", net.classifier.weight_mut())?;
        take_into_param(&mut cur, label, "fc.bias", net.classifier.bias_mut())?;

        let pos = cur.position();
        if pos != bytes.len() as u64 {
            return Err(corrupt(
                pos,
                format!("{} trailing bytes after the last tensor", bytes.len() as u64 - pos),
            ));
        }
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

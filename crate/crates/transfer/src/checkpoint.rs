//! Model checkpoints: a text header (format line, config, tensor index with
//! name, offset and shape) followed by the TFT1-encoded tensors.

use std::fs;
use std::path::Path;

use transfer_core::{TrainConfig, TransFer};

use crate::error::{CliError, Result};
use crate::tft;

const HEADER: &str = "TRANSFER-CHECKPOINT 1";

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(text: &str) -> Option<Vec<usize>> {
    if text == "scalar" {
        return Some(Vec::new());
    }
    text.split('x').map(|d| d.parse().ok()).collect()
}

/// Serializes the config and every parameter of `model`.
pub fn encode(model: &TransFer) -> Vec<u8> {
    let config = model.config.to_text();
    let mut header = format!("{HEADER}\nconfig {}\n{config}", config.lines().count());
    let mut blob = Vec::new();
    let names: Vec<(&str, _)> = model.params.iter().collect();
    header.push_str(&format!("tensors {}\n", names.len()));
    for (name, tensor) in names {
        header.push_str(&format!("{name} {} {}\n", blob.len(), shape_text(tensor.shape())));
        tft::encode(tensor, &mut blob);
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&blob);
    out
}

pub fn save(path: &Path, model: &TransFer) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| CliError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Option<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).ok()
    }
}

fn counted<'a>(line: Option<&'a str>, key: &str) -> std::result::Result<usize, String> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| format!("expected `{key} <count>`"))
}

/// Rebuilds a model from checkpoint bytes.
pub fn decode(bytes: &[u8]) -> std::result::Result<TransFer, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.line() != Some(HEADER) {
        return Err("not a checkpoint (bad header line)".into());
    }
    let config_lines = counted(cur.line(), "config ")?;
    let mut text = String::new();
    for _ in 0..config_lines {
        text.push_str(cur.line().ok_or("truncated config")?);
        text.push('\n');
    }
    let config = TrainConfig::parse_text(&text).map_err(|e| e.to_string())?;
    let count = counted(cur.line(), "tensors ")?;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let line = cur.line().ok_or("truncated tensor index")?;
        let mut parts = line.split(' ');
        let (Some(name), Some(offset), Some(shape), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(format!("malformed index line {line:?}"));
        };
        let offset: usize = offset.parse().map_err(|_| format!("bad offset in {line:?}"))?;
        let shape = parse_shape(shape).ok_or_else(|| format!("bad shape in {line:?}"))?;
        index.push((name.to_string(), offset, shape));
    }
    if cur.line() != Some("end") {
        return Err("missing end of header".into());
    }
    let blob = &bytes[cur.pos..];
    let mut model = TransFer::new(config).map_err(|e| e.to_string())?;
    if index.len() != model.params.len() {
        return Err(format!(
            "checkpoint holds {} tensors, model expects {}",
            index.len(),
            model.params.len()
        ));
    }
    for (name, offset, shape) in index {
        let mut slice = blob.get(offset..).ok_or_else(|| format!("{name}: offset past end of file"))?;
        let tensor = tft::decode(&mut slice).map_err(|e| format!("{name}: {e}"))?;
        if tensor.shape() != shape.as_slice() {
            return Err(format!("{name}: index shape {shape:?} disagrees with stored {:?}", tensor.shape()));
        }
        model.params.load(&name, tensor).map_err(|e| e.to_string())?;
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<TransFer> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|m| CliError::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            input_size: 16,
            stage: 2,
            stage_channels: [4, 8, 8, 8],
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mlp_hidden: 8,
            num_classes: 3,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        let model = TransFer::new(small()).unwrap();
        let back = decode(&encode(&model)).unwrap();
        assert_eq!(back.config, model.config);
        for ((na, a), (nb, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert!(a.bitwise_eq(b), "{na}");
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = encode(&TransFer::new(small()).unwrap());
        let b = encode(&TransFer::new(small()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = encode(&TransFer::new(small()).unwrap());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"hello\n").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("\nM=1\n", "\nM=2\n");
        let mut other = text.into_bytes();
        other.truncate(bytes.len());
        assert!(decode(&other).is_err());
    }
}

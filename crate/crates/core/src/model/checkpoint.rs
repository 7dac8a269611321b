//! Weight checkpoint file: a text manifest (key=value lines with config
//! fields, then one line per tensor with shape and byte offset) followed by
//! raw little-endian f32 blobs in manifest order. Save/load round-trips
//! bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{AttentionMode, ModelConfig, Weights};

const MAGIC: &str = "mechshift-checkpoint v1";

pub fn save_checkpoint(path: &Path, weights: &Weights) -> Result<()> {
    let cfg = &weights.config;
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("n_layers={}\n", cfg.n_layers));
    header.push_str(&format!("n_heads={}\n", cfg.n_heads));
    header.push_str(&format!("d_model={}\n", cfg.d_model));
    header.push_str(&format!("d_head={}\n", cfg.d_head));
    header.push_str(&format!("d_mlp={}\n", cfg.d_mlp));
    header.push_str(&format!("vocab_size={}\n", cfg.vocab_size));
    header.push_str(&format!("max_positions={}\n", cfg.max_positions));
    header.push_str(&format!("attention_mode={}\n", cfg.attention_mode.as_str()));

    let tensors = weights.tensors();
    let mut offset = 0usize;
    for (name, t) in &tensors {
        let shape = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        header.push_str(&format!("tensor={name} shape={shape} offset={offset}\n"));
        offset += t.numel() * 4;
    }
    header.push_str("end\n");

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(header.as_bytes())?;
    for (_, t) in &tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn parse_kv<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| Error::Format(format!("expected `{key}=...`, got {line:?}")))
}

fn parse_usize(line: &str, key: &str) -> Result<usize> {
    parse_kv(line, key)?
        .parse()
        .map_err(|_| Error::Format(format!("bad integer in {line:?}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Weights> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;

    // Split header (text up to and including the "end\n" line) from the blob.
    let end_marker = b"\nend\n";
    let end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| Error::Format("missing end-of-manifest marker".into()))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("manifest is not utf-8".into()))?;
    let blob = &bytes[end + end_marker.len()..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic line {magic:?}")));
    }
    let n_layers = parse_usize(lines.next().unwrap_or_default(), "n_layers")?;
    let n_heads = parse_usize(lines.next().unwrap_or_default(), "n_heads")?;
    let d_model = parse_usize(lines.next().unwrap_or_default(), "d_model")?;
    let d_head = parse_usize(lines.next().unwrap_or_default(), "d_head")?;
    let d_mlp = parse_usize(lines.next().unwrap_or_default(), "d_mlp")?;
    let vocab_size = parse_usize(lines.next().unwrap_or_default(), "vocab_size")?;
    let max_positions = parse_usize(lines.next().unwrap_or_default(), "max_positions")?;
    let mode = AttentionMode::parse(parse_kv(
        lines.next().unwrap_or_default(),
        "attention_mode",
    )?)?;
    let config = ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_head,
        d_mlp,
        vocab_size,
        max_positions,
        attention_mode: mode,
    };
    config.validate()?;

    // Start from a zero skeleton and fill tensors by manifest entries.
    let mut weights = Weights::zeros(config)?;
    let mut expected: Vec<(String, Vec<usize>)> = weights
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();

    let mut filled = 0usize;
    for line in lines {
        let Some(rest) = line.strip_prefix("tensor=") else {
            return Err(Error::Format(format!("unexpected manifest line {line:?}")));
        };
        let mut parts = rest.split(' ');
        let name = parts
            .next()
            .ok_or_else(|| Error::Format("tensor line missing name".into()))?;
        let shape_s = parse_kv(
            parts
                .next()
                .ok_or_else(|| Error::Format("tensor line missing shape".into()))?,
            "shape",
        )?;
        let offset = parse_usize(
            parts
                .next()
                .ok_or_else(|| Error::Format("tensor line missing offset".into()))?,
            "offset",
        )?;
        let shape: Vec<usize> = shape_s
            .split('x')
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Format(format!("bad shape {shape_s:?}")))
            })
            .collect::<Result<_>>()?;

        let slot = expected
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {name:?}")))?;
        if expected[slot].1 != shape {
            return Err(Error::Format(format!(
                "tensor {name} shape {shape:?} does not match config shape {:?}",
                expected[slot].1
            )));
        }
        let numel: usize = shape.iter().product();
        let end = offset + numel * 4;
        if end > blob.len() {
            return Err(Error::Format(format!(
                "tensor {name} blob range {offset}..{end} beyond file"
            )));
        }
        let data: Vec<f32> = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        for (n, t) in weights.tensors_mut() {
            if n == *name {
                *t = tensor;
                break;
            }
        }
        expected[slot].0.clear(); // mark consumed
        filled += 1;
    }
    if filled != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {filled} tensors, config requires {}",
            expected.len()
        )));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: 23,
            max_positions: 12,
            attention_mode: AttentionMode::Causal,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let w = Weights::init(cfg(), 11).unwrap();
        save_checkpoint(&path, &w).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(w, loaded);
        // Save the load again: files must match byte for byte.
        let path2 = dir.path().join("w2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let w = Weights::init(cfg(), 0).unwrap();
        save_checkpoint(&path, &w).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Io(_))
        ));
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! "PFCK" | u32 version | u32 descriptor length | descriptor (UTF-8) | f64 blocks
//! ```
//!
//! All integers and floats are little-endian. The descriptor is a line-based
//! text listing the architecture and training metadata; weight blocks follow
//! in descriptor order: per conv block its weight `[out][in][3][3]` then bias,
//! then the dense weight `[out][in]` and bias, then the class centres.

use std::fmt::Write as _;
use std::path::Path;

use super::{
    ConvLayer, DenseLayer, EmbedError, EmbedNet, EmbedNetConfig, ModelCheckpoint, Result,
    TrainingMetadata, LEAKY_SLOPE,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> EmbedError {
    EmbedError::CorruptCheckpoint(msg.into())
}

fn descriptor(ck: &ModelCheckpoint) -> String {
    let c = &ck.net.config;
    let mut s = String::new();
    let _ = writeln!(s, "input {} {} {}", c.input[0], c.input[1], c.input[2]);
    for conv in &ck.net.convs {
        let _ = writeln!(s, "conv {} {}", conv.in_channels, conv.out_channels);
    }
    let _ = writeln!(s, "dense {} {}", ck.net.dense.inputs, ck.net.dense.outputs);
    let _ = writeln!(s, "centers {} {}", ck.num_classes, c.embedding_dim);
    let _ = writeln!(s, "leaky_slope {LEAKY_SLOPE}");
    let _ = writeln!(s, "margin {}", c.margin);
    let _ = writeln!(s, "scale {}", c.scale);
    let _ = writeln!(s, "seed {}", c.seed);
    let _ = writeln!(s, "epochs {}", ck.metadata.epochs);
    let _ = writeln!(s, "train_accuracy {}", ck.metadata.train_accuracy);
    s
}

pub fn encode_checkpoint(ck: &ModelCheckpoint) -> Vec<u8> {
    let desc = descriptor(ck);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    for block in ck
        .net
        .blocks()
        .into_iter()
        .chain(std::iter::once(&ck.centers))
    {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(ck: &ModelCheckpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| EmbedError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| EmbedError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64_block(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("block too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn parse_usizes(fields: &[&str], n: usize, line: &str) -> Result<Vec<usize>> {
    if fields.len() != n {
        return Err(corrupt(format!("bad descriptor line `{line}`")));
    }
    fields
        .iter()
        .map(|f| {
            f.parse()
                .map_err(|_| corrupt(format!("bad number in `{line}`")))
        })
        .collect()
}

fn parse_f64(fields: &[&str], line: &str) -> Result<f64> {
    match fields {
        [v] => v
            .parse()
            .map_err(|_| corrupt(format!("bad number in `{line}`"))),
        _ => Err(corrupt(format!("bad descriptor line `{line}`"))),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(EmbedError::UnsupportedVersion(version));
    }
    let len = r.u32()? as usize;
    let desc = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("descriptor is not UTF-8"))?;

    let mut input = None;
    let mut conv_shapes = Vec::new();
    let mut dense_shape = None;
    let mut centers_shape = None;
    let mut config = EmbedNetConfig::default();
    let mut metadata = TrainingMetadata::default();
    for line in desc.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (key, rest) = fields.split_first().expect("non-empty line");
        match *key {
            "input" => input = Some(parse_usizes(rest, 3, line)?),
            "conv" => conv_shapes.push(parse_usizes(rest, 2, line)?),
            "dense" => dense_shape = Some(parse_usizes(rest, 2, line)?),
            "centers" => centers_shape = Some(parse_usizes(rest, 2, line)?),
            "leaky_slope" => {
                if parse_f64(rest, line)? != LEAKY_SLOPE {
                    return Err(corrupt("unsupported leaky slope"));
                }
            }
            "margin" => config.margin = parse_f64(rest, line)?,
            "scale" => config.scale = parse_f64(rest, line)?,
            "seed" => config.seed = parse_usizes(rest, 1, line)?[0] as u64,
            "epochs" => metadata.epochs = parse_usizes(rest, 1, line)?[0],
            "train_accuracy" => metadata.train_accuracy = parse_f64(rest, line)?,
            other => return Err(corrupt(format!("unknown descriptor key `{other}`"))),
        }
    }
    let input = input.ok_or_else(|| corrupt("missing input line"))?;
    let dense_shape = dense_shape.ok_or_else(|| corrupt("missing dense line"))?;
    let centers_shape = centers_shape.ok_or_else(|| corrupt("missing centers line"))?;
    config.input = [input[0], input[1], input[2]];
    config.channels = conv_shapes.iter().map(|s| s[1]).collect();
    config.embedding_dim = dense_shape[1];
    config.validate().map_err(|e| corrupt(e.to_string()))?;

    let mut expected_in = config.input[2];
    let mut convs = Vec::new();
    for shape in &conv_shapes {
        if shape[0] != expected_in {
            return Err(corrupt("conv channel chain is inconsistent"));
        }
        let weight = r.f64_block(shape[0] * shape[1] * 9)?;
        let bias = r.f64_block(shape[1])?;
        convs.push(ConvLayer {
            in_channels: shape[0],
            out_channels: shape[1],
            weight,
            bias,
        });
        expected_in = shape[1];
    }
    if dense_shape[0] != config.dense_inputs() || centers_shape[1] != config.embedding_dim {
        return Err(corrupt(
            "dense/centre shapes disagree with the architecture",
        ));
    }
    let dense = DenseLayer {
        inputs: dense_shape[0],
        outputs: dense_shape[1],
        weight: r.f64_block(dense_shape[0] * dense_shape[1])?,
        bias: r.f64_block(dense_shape[1])?,
    };
    let centers = r.f64_block(centers_shape[0] * centers_shape[1])?;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes after weight blocks"));
    }
    Ok(ModelCheckpoint {
        net: EmbedNet {
            config,
            convs,
            dense,
        },
        num_classes: centers_shape[0],
        centers,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint {
        let config = EmbedNetConfig {
            input: [8, 8, 3],
            channels: vec![2, 3],
            embedding_dim: 5,
            seed: 42,
            margin: 0.35,
            ..EmbedNetConfig::default()
        };
        ModelCheckpoint {
            net: EmbedNet::init(&config).unwrap(),
            num_classes: 2,
            centers: (0..10).map(|i| i as f64 * 0.1).collect(),
            metadata: TrainingMetadata {
                epochs: 7,
                train_accuracy: 0.9625,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pfck");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode_checkpoint(&sample());
        for cut in [2, 6, 11, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut]),
                Err(EmbedError::CorruptCheckpoint(_))
            ));
        }
    }

    #[test]
    fn wrong_magic_is_corrupt() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(EmbedError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert_eq!(
            decode_checkpoint(&bytes),
            Err(EmbedError::UnsupportedVersion(9))
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_checkpoint(&sample());
        bytes.push(0);
        assert!(decode_checkpoint(&bytes).is_err());
    }
}

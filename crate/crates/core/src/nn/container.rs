//! Binary model container.
//!
//! Layout: a UTF-8 text header (one `key value` record per line, layer specs,
//! group trainability, seed and the tensor table) terminated by a line `end`,
//! followed by every parameter tensor as little-endian `f32` in declaration
//! order, followed by the 32-byte SHA-256 digest of that payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::layer::{Group, LayerSpec};
use crate::nn::model::Model;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "MSSEG-MODEL";

pub fn write_model<W: Write>(model: &Model<f32>, mut w: W) -> Result<()> {
    let mut header = format!("{MAGIC}\nversion {FORMAT_VERSION}\nseed {}\n", model.seed());
    let flags: Vec<String> = Group::ALL
        .iter()
        .map(|&g| format!("{}={}", g, u8::from(model.is_trainable(g))))
        .collect();
    header += &format!("trainable {}\n", flags.join(" "));
    header += &format!(
        "frozen_bn_batch_stats {}\n",
        u8::from(model.frozen_bn_batch_stats())
    );
    header += &format!("layers {}\n", model.layers().len());
    for spec in model.layers() {
        header += &format!("layer {}\n", spec.render());
    }
    let mut payload = Vec::new();
    let mut table = String::new();
    let mut count = 0;
    for (i, spec) in model.layers().iter().enumerate() {
        for (name, t) in spec.param_names().iter().zip(model.params(i)) {
            let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            table += &format!("tensor {i}.{name} {}\n", dims.join("x"));
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            count += 1;
        }
    }
    header += &format!(
        "tensors {count}\n{table}payload_bytes {}\nend\n",
        payload.len()
    );
    let digest = Sha256::digest(&payload);
    let io = |e| Error::io("<model stream>", e);
    w.write_all(header.as_bytes()).map_err(io)?;
    w.write_all(&payload).map_err(io)?;
    w.write_all(&digest).map_err(io)?;
    Ok(())
}

pub(crate) fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::Format(format!("expected `{key}`, found {line:?}")))
}

pub(crate) fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad {what}: {s:?}")))
}

/// Reads `\n`-terminated header lines up to (excluding) the line `end`.
pub(crate) fn read_header<R: BufRead>(r: &mut R, what: &str) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        let n = r
            .read_line(&mut line)
            .map_err(|e| Error::io(format!("<{what} stream>"), e))?;
        if n == 0 {
            return Err(Error::Format(format!("unterminated {what} header")));
        }
        let line = line.trim_end_matches('\n').to_string();
        if line == "end" {
            return Ok(lines);
        }
        lines.push(line);
        if lines.len() > 10_000_000 {
            return Err(Error::Format(format!("{what} header too long")));
        }
    }
}

pub fn read_model<R: Read>(r: R) -> Result<Model<f32>> {
    let mut r = BufReader::new(r);
    let lines = read_header(&mut r, "model")?;
    let mut it = lines.iter().map(String::as_str);
    let mut next = || {
        it.next()
            .ok_or_else(|| Error::Format("truncated model header".into()))
    };
    if next()? != MAGIC {
        return Err(Error::Format("not a model container".into()));
    }
    let version: u32 = parse(field(next()?, "version")?, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let seed: u64 = parse(field(next()?, "seed")?, "seed")?;
    let mut trainable = [true; 5];
    for kv in field(next()?, "trainable")?.split_whitespace() {
        let (g, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad flag {kv:?}")))?;
        trainable[g.parse::<Group>()? as usize] = v == "1";
    }
    let frozen_bn = field(next()?, "frozen_bn_batch_stats")? == "1";
    let n_layers: usize = parse(field(next()?, "layers")?, "layer count")?;
    let layers = (0..n_layers)
        .map(|_| LayerSpec::parse(field(next()?, "layer")?))
        .collect::<Result<Vec<_>>>()?;
    let n_tensors: usize = parse(field(next()?, "tensors")?, "tensor count")?;
    let mut shapes = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let rec = field(next()?, "tensor")?;
        let (name, dims) = rec
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("bad tensor record {rec:?}")))?;
        let dims = dims
            .split('x')
            .map(|d| parse::<usize>(d, "extent"))
            .collect::<Result<Vec<_>>>()?;
        shapes.push((name.to_string(), dims));
    }
    let payload_len: usize = parse(field(next()?, "payload_bytes")?, "payload size")?;
    let expected_len: usize = shapes
        .iter()
        .map(|(_, d)| d.iter().product::<usize>() * 4)
        .sum();
    if expected_len != payload_len {
        return Err(Error::Format(format!(
            "payload size {payload_len} disagrees with tensor table ({expected_len})"
        )));
    }
    let mut payload = vec![0u8; payload_len];
    let mut digest = [0u8; 32];
    r.read_exact(&mut payload)
        .and_then(|_| r.read_exact(&mut digest))
        .map_err(|_| Error::Format("truncated model payload".into()))?;
    if Sha256::digest(&payload).as_slice() != digest {
        return Err(Error::Checksum("model payload".into()));
    }

    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut shapes = shapes.into_iter();
    let mut params = Vec::with_capacity(layers.len());
    for (i, spec) in layers.iter().enumerate() {
        let mut ps = Vec::new();
        for name in spec.param_names() {
            let (tname, dims) = shapes
                .next()
                .ok_or_else(|| Error::Format("missing tensors".into()))?;
            if tname != format!("{i}.{name}") {
                return Err(Error::Format(format!("tensor {tname:?} out of order")));
            }
            let len = dims.iter().product();
            ps.push(Tensor::from_vec(
                &dims,
                values.by_ref().take(len).collect(),
            )?);
        }
        params.push(ps);
    }
    if shapes.next().is_some() {
        return Err(Error::Format("unexpected extra tensors".into()));
    }
    let mut model = Model::from_parts(layers, params, seed)?;
    model.set_flags(trainable, frozen_bn);
    Ok(model)
}

pub fn save_model(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{FreezeConfig, FreezeMode};

    #[test]
    fn round_trip_is_lossless() {
        let mut m = Model::<f32>::canonical(17);
        m.set_trainable(&FreezeConfig::new(FreezeMode::Fc2Fc3));
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn detects_corruption_and_version() {
        let m = Model::<f32>::canonical(1);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        let n = bad.len();
        bad[n - 100] ^= 1;
        assert!(matches!(
            read_model(bad.as_slice()),
            Err(Error::Checksum(_))
        ));
        let text = String::from_utf8_lossy(&buf[..40]).replace("version 1", "version 7");
        let mut v = text.into_bytes();
        v.extend_from_slice(&buf[40..]);
        assert!(matches!(
            read_model(v.as_slice()),
            Err(Error::Version { found: 7, .. })
        ));
        assert!(read_model(&buf[..buf.len() - 10]).is_err());
    }
}

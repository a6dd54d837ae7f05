//! Binary model files.
//!
//! Layout: the five bytes `SSRM1`, a little-endian `u32` byte length followed
//! by that many bytes of UTF-8 `key=value` lines describing the architecture,
//! then every parameter value in declaration order as a little-endian `f64`.

use std::fs;
use std::path::Path;

use super::{ArchitectureConfig, ConvBlock, RegressorModel, SkipConnection};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 5] = b"SSRM1";

pub(crate) fn architecture_to_text(a: &ArchitectureConfig) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let blocks = a
        .conv_blocks
        .iter()
        .map(|b| format!("{}:{}", b.feature_maps, b.kernel_size))
        .collect::<Vec<_>>()
        .join(",");
    let skips = a
        .skip_connections
        .iter()
        .map(|s| format!("{}>{}", s.from, s.to))
        .collect::<Vec<_>>()
        .join(",");
    let dropout = a.dropout_rate.map_or("none".to_string(), |r| r.to_string());
    format!(
        "input_shape={}\ndims={}\nconv_blocks={}\nskip_connections={}\ndropout_rate={}\nzero_bias={}\nseed={}\n",
        join(&a.input_shape),
        a.dims,
        blocks,
        skips,
        dropout,
        a.zero_bias,
        a.seed
    )
}

pub fn parse_usize_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

pub fn parse_conv_blocks(s: &str) -> std::result::Result<Vec<ConvBlock>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (f, k) = p
                .split_once(':')
                .ok_or_else(|| format!("`{p}` is not feature_maps:kernel_size"))?;
            Ok(ConvBlock {
                feature_maps: f.trim().parse().map_err(|e| format!("`{p}`: {e}"))?,
                kernel_size: k.trim().parse().map_err(|e| format!("`{p}`: {e}"))?,
            })
        })
        .collect()
}

pub fn parse_skip_connections(s: &str) -> std::result::Result<Vec<SkipConnection>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (f, t) = p
                .split_once('>')
                .ok_or_else(|| format!("`{p}` is not from>to"))?;
            Ok(SkipConnection {
                from: f.trim().parse().map_err(|e| format!("`{p}`: {e}"))?,
                to: t.trim().parse().map_err(|e| format!("`{p}`: {e}"))?,
            })
        })
        .collect()
}

pub fn parse_dropout(s: &str) -> std::result::Result<Option<f64>, String> {
    match s.trim() {
        "" | "none" => Ok(None),
        v => v.parse().map(Some).map_err(|e| format!("`{v}`: {e}")),
    }
}

fn architecture_from_text(text: &str) -> std::result::Result<ArchitectureConfig, String> {
    let mut a = ArchitectureConfig::desk_scale(1);
    let mut seen = std::collections::BTreeSet::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("malformed line `{line}`"))?;
        let v = v.trim();
        match k.trim() {
            "input_shape" => a.input_shape = parse_usize_list(v)?,
            "dims" => a.dims = v.parse().map_err(|e| format!("dims: {e}"))?,
            "conv_blocks" => a.conv_blocks = parse_conv_blocks(v)?,
            "skip_connections" => a.skip_connections = parse_skip_connections(v)?,
            "dropout_rate" => a.dropout_rate = parse_dropout(v)?,
            "zero_bias" => a.zero_bias = v.parse().map_err(|e| format!("zero_bias: {e}"))?,
            "seed" => a.seed = v.parse().map_err(|e| format!("seed: {e}"))?,
            other => return Err(format!("unknown architecture key `{other}`")),
        }
        seen.insert(k.trim().to_string());
    }
    for key in ["input_shape", "dims", "conv_blocks", "zero_bias"] {
        if !seen.contains(key) {
            return Err(format!("missing architecture key `{key}`"));
        }
    }
    Ok(a)
}

pub fn model_to_bytes(model: &RegressorModel) -> Vec<u8> {
    let text = architecture_to_text(model.architecture());
    let mut out = Vec::with_capacity(9 + text.len() + 8 * model.parameter_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (_, _, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn model_from_bytes(bytes: &[u8], origin: &Path) -> Result<RegressorModel> {
    if bytes.len() < 5 || &bytes[..5] != MODEL_MAGIC {
        return Err(Error::format(
            origin,
            "bad magic: expected `SSRM1` model header",
        ));
    }
    let len_bytes: [u8; 4] = bytes
        .get(5..9)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::format(origin, "truncated architecture length"))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let text = bytes
        .get(9..9 + len)
        .ok_or_else(|| Error::format(origin, "truncated architecture block"))?;
    let text = std::str::from_utf8(text)
        .map_err(|e| Error::format(origin, format!("architecture block: {e}")))?;
    let arch = architecture_from_text(text).map_err(|m| Error::format(origin, m))?;
    let mut model =
        RegressorModel::build(arch).map_err(|e| Error::format(origin, e.to_string()))?;
    let payload = &bytes[9 + len..];
    let expected = model.parameter_count() * 8;
    if payload.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "parameter payload holds {} bytes but the architecture needs {}",
                payload.len(),
                expected
            ),
        ));
    }
    let mut chunks = payload.chunks_exact(8);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            let c = chunks.next().expect("payload length checked");
            *v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
    }
    Ok(model)
}

pub fn write_model(path: impl AsRef<Path>, model: &RegressorModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<RegressorModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut arch = ArchitectureConfig::desk_scale(8);
        arch.zero_bias = false;
        arch.dropout_rate = Some(0.3);
        arch.seed = 99;
        let mut model = RegressorModel::build(arch).unwrap();
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            for (i, v) in model
                .params_mut()
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .enumerate()
            {
                *v += (i as f64 * 1e-3).sin() / 3.0;
            }
        }
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.architecture(), model.architecture());
        for ((_, _, a), (_, _, b)) in back.params().iter().zip(model.params().iter()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let model = RegressorModel::build(ArchitectureConfig::desk_scale(8)).unwrap();
        let mut bytes = model_to_bytes(&model);
        let err = model_from_bytes(&bytes[..bytes.len() - 3], Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
        bytes[0] = b'X';
        let err = model_from_bytes(&bytes, Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}

//! Model persistence: the architecture as a JSON document and the weights
//! in the flat little-endian LSEG container.
//!
//! LSEG v1 layout:
//!
//! ```text
//! header  "LSEG" | u32 version | u32 record_count | u32 reserved
//! record  u32 layer_index | u32 role (0 weights, 1 bias) | u64 count | count × f32
//! ```
//!
//! Records are ordered by layer index, weights before bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderOrder, Network, NetworkConfig};

pub const MAGIC: [u8; 4] = *b"LSEG";
pub const FORMAT_VERSION: u32 = 1;
pub const ARCH_FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_HEADER_LEN: usize = 16;

const ROLE_WEIGHTS: u32 = 0;
const ROLE_BIAS: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureDoc {
    format_version: u32,
    input_dims: [usize; 3],
    encoder_filters: Vec<usize>,
    kernel_size: usize,
    num_classes: usize,
    decoder_order: DecoderOrder,
}

pub fn architecture_json(cfg: &NetworkConfig) -> String {
    let (c, h, w) = cfg.input_dims;
    let doc = ArchitectureDoc {
        format_version: ARCH_FORMAT_VERSION,
        input_dims: [c, h, w],
        encoder_filters: cfg.encoder_filters.clone(),
        kernel_size: cfg.kernel_size,
        num_classes: cfg.num_classes,
        decoder_order: cfg.decoder_order,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("architecture serializes");
    s.push('\n');
    s
}

pub fn parse_architecture(text: &str) -> Result<NetworkConfig> {
    let doc: ArchitectureDoc =
        serde_json::from_str(text).map_err(|e| Error::Architecture(e.to_string()))?;
    if doc.format_version != ARCH_FORMAT_VERSION {
        return Err(Error::Architecture(format!(
            "unsupported format_version {}",
            doc.format_version
        )));
    }
    let [c, h, w] = doc.input_dims;
    let cfg = NetworkConfig {
        input_dims: (c, h, w),
        encoder_filters: doc.encoder_filters,
        kernel_size: doc.kernel_size,
        num_classes: doc.num_classes,
        decoder_order: doc.decoder_order,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes every convolution's parameters into an LSEG buffer.
pub fn encode_weights(net: &Network) -> Vec<u8> {
    let convs: Vec<_> = net.conv_layers().collect();
    let mut buf = Vec::with_capacity(weights_file_len(net));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&((2 * convs.len()) as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for (index, p) in convs {
        for (role, values) in [(ROLE_WEIGHTS, p.weights.data()), (ROLE_BIAS, &p.bias[..])] {
            buf.extend_from_slice(&(index as u32).to_le_bytes());
            buf.extend_from_slice(&role.to_le_bytes());
            buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for &v in values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    buf
}

/// Exact size of the LSEG encoding of `net`.
pub fn weights_file_len(net: &Network) -> usize {
    HEADER_LEN
        + net
            .conv_layers()
            .map(|(_, p)| 2 * RECORD_HEADER_LEN + 4 * p.param_count())
            .sum::<usize>()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what} needs {n} bytes at offset {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Fills `net`'s parameters from an LSEG buffer, checking every record
/// against the architecture.
pub fn decode_weights_into(net: &mut Network, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let record_count = r.u32("record count")? as usize;
    r.u32("reserved")?;

    let expected: Vec<(usize, usize, usize)> = net
        .conv_layers()
        .map(|(i, p)| (i, p.weights.len(), p.bias.len()))
        .collect();
    if record_count != 2 * expected.len() {
        return Err(Error::ShapeMismatch(format!(
            "weights file holds {record_count} records, architecture has {} convolutions \
             needing {}",
            expected.len(),
            2 * expected.len()
        )));
    }

    let mut loaded: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(expected.len());
    for &(layer, n_weights, n_bias) in &expected {
        let mut pair = [Vec::new(), Vec::new()];
        for (role, count) in [(ROLE_WEIGHTS, n_weights), (ROLE_BIAS, n_bias)] {
            let got_layer = r.u32("record layer index")? as usize;
            let got_role = r.u32("record role")?;
            let got_count = r.u64("record element count")?;
            if got_layer != layer || got_role != role || got_count != count as u64 {
                return Err(Error::ShapeMismatch(format!(
                    "record (layer {got_layer}, role {got_role}, {got_count} values) where the \
                     architecture expects (layer {layer}, role {role}, {count} values)"
                )));
            }
            let raw = r.take(4 * count, "record values")?;
            pair[role as usize] = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
        }
        let [w, b] = pair;
        if let Some(v) = w.iter().chain(&b).find(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer} holds non-finite parameter {v}"
            )));
        }
        loaded.push((w, b));
    }
    if r.pos != bytes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} unexpected trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }

    for ((_, p), (w, b)) in net.conv_layers_mut().zip(loaded) {
        p.weights.data_mut().copy_from_slice(&w);
        p.bias = b;
    }
    Ok(())
}

pub fn save_model(net: &Network, arch_path: &Path, weights_path: &Path) -> Result<()> {
    fs::write(arch_path, architecture_json(net.config()))
        .map_err(|e| Error::io(arch_path, e))?;
    fs::write(weights_path, encode_weights(net)).map_err(|e| Error::io(weights_path, e))?;
    Ok(())
}

pub fn load_model(arch_path: &Path, weights_path: &Path) -> Result<Network> {
    let text = fs::read_to_string(arch_path).map_err(|e| Error::io(arch_path, e))?;
    let cfg = parse_architecture(&text)?;
    let bytes = fs::read(weights_path).map_err(|e| Error::io(weights_path, e))?;
    let mut net = Network::zeroed(&cfg)?;
    decode_weights_into(&mut net, &bytes)?;
    Ok(net)
}

/// File names used inside a model directory.
pub const ARCH_FILE: &str = "architecture.json";
pub const WEIGHTS_FILE: &str = "weights.lseg";

pub fn save_model_dir(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_model(net, &dir.join(ARCH_FILE), &dir.join(WEIGHTS_FILE))
}

pub fn load_model_dir(dir: &Path) -> Result<Network> {
    load_model(&dir.join(ARCH_FILE), &dir.join(WEIGHTS_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_network;
    use crate::tensor::{sample_gaussian, Rng};

    fn net(filters: Vec<usize>) -> Network {
        let cfg = NetworkConfig {
            input_dims: (3, 16, 32),
            encoder_filters: filters,
            kernel_size: 3,
            num_classes: 2,
            decoder_order: DecoderOrder::Paper,
        };
        build_network(&cfg, &mut Rng::new(17)).unwrap()
    }

    #[test]
    fn architecture_roundtrip() {
        let mut cfg = NetworkConfig::segnet_lite(160, 320);
        cfg.decoder_order = DecoderOrder::Conventional;
        let text = architecture_json(&cfg);
        assert!(text.contains("\"decoder_order\": \"conventional\""));
        assert_eq!(parse_architecture(&text).unwrap(), cfg);
    }

    #[test]
    fn architecture_schema_errors() {
        assert!(matches!(parse_architecture("{"), Err(Error::Architecture(_))));
        let bad_version = architecture_json(&NetworkConfig::segnet_lite(8, 8))
            .replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(parse_architecture(&bad_version), Err(Error::Architecture(_))));
    }

    #[test]
    fn weights_size_formula() {
        let n = net(vec![8, 16, 32]);
        let bytes = encode_weights(&n);
        // 7 convs, 14 records, 12546 parameters at this input depth
        let params = n.parameter_count();
        assert_eq!(params, 12_546);
        assert_eq!(bytes.len(), 16 + 14 * 16 + 4 * params);
        assert_eq!(bytes.len(), weights_file_len(&n));
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let n = net(vec![4, 8]);
        let mut back = Network::zeroed(n.config()).unwrap();
        decode_weights_into(&mut back, &encode_weights(&n)).unwrap();
        for ((_, a), (_, b)) in n.conv_layers().zip(back.conv_layers()) {
            assert_eq!(a, b);
        }
        let x = sample_gaussian(&mut Rng::new(2), n.input_dims(2), 1.0).unwrap();
        assert_eq!(n.probabilities(&x).unwrap(), back.probabilities(&x).unwrap());
    }

    #[test]
    fn typed_load_errors() {
        let n = net(vec![4, 8]);
        let bytes = encode_weights(&n);
        let mut target = Network::zeroed(n.config()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights_into(&mut target, &bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_weights_into(&mut target, &bad),
            Err(Error::UnsupportedVersion(9))
        ));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_weights_into(&mut target, cut), Err(Error::Truncated(_))));
        assert!(matches!(decode_weights_into(&mut target, &bytes[..10]), Err(Error::Truncated(_))));

        let mut deeper = Network::zeroed(net(vec![4, 8, 8]).config()).unwrap();
        assert!(matches!(
            decode_weights_into(&mut deeper, &bytes),
            Err(Error::ShapeMismatch(_))
        ));

        let mut wider = Network::zeroed(net(vec![4, 6]).config()).unwrap();
        assert!(matches!(
            decode_weights_into(&mut wider, &bytes),
            Err(Error::ShapeMismatch(_))
        ));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_weights_into(&mut target, &extra), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn save_reports_path_on_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope").join("arch.json");
        let err = save_model(&net(vec![2]), &missing, &dir.path().join("w")).unwrap_err();
        assert!(err.to_string().contains("arch.json"), "{err}");
    }
}

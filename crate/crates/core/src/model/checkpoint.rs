//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "RNABLCKP"
//! version    u32
//! config     u32 length + UTF-8 JSON of the ResNetConfig
//! records    u32 count, then per record:
//!              u16 name length + UTF-8 name
//!              u8 rank + u32 extent per axis
//!              f32 values (product of extents)
//! checksum   32 bytes, SHA-256 of everything above
//! ```
//!
//! Record names are `<address>.weight`, `<address>.bn.{gamma,beta,mean,var,hyper}`,
//! `<address>.zeroed`, `s{k}.u{u}.{branch_const,branch_map,proj_const}`,
//! `head.fc.{weight,bias}` and `head.out.bias`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::address::{LayerAddress, UnitSlot};
use super::config::ResNetConfig;
use super::resnet::{BorderMap, Branch, ConvBn, Head, Model, Shortcut};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RNABLCKP";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
struct Record {
    name: String,
    dims: Vec<u32>,
    values: Vec<f32>,
}

fn rec(name: impl Into<String>, dims: &[usize], values: &[f32]) -> Record {
    Record {
        name: name.into(),
        dims: dims.iter().map(|&d| d as u32).collect(),
        values: values.to_vec(),
    }
}

fn conv_bn_records(prefix: &str, c: &ConvBn, out: &mut Vec<Record>) {
    let k = &c.kernel;
    out.push(rec(
        format!("{prefix}.weight"),
        &[k.out_channels, k.in_channels, k.kh, k.kw],
        &k.weights,
    ));
    if k.zeroed {
        out.push(rec(format!("{prefix}.zeroed"), &[1], &[1.0]));
    }
    let n = c.bn.channels();
    out.push(rec(format!("{prefix}.bn.gamma"), &[n], &c.bn.gamma));
    out.push(rec(format!("{prefix}.bn.beta"), &[n], &c.bn.beta));
    out.push(rec(format!("{prefix}.bn.mean"), &[n], &c.bn.running_mean));
    out.push(rec(format!("{prefix}.bn.var"), &[n], &c.bn.running_var));
    out.push(rec(format!("{prefix}.bn.hyper"), &[2], &[c.bn.epsilon, c.bn.momentum]));
}

fn records(model: &Model) -> Vec<Record> {
    let mut out = Vec::new();
    conv_bn_records("stem", &model.stem, &mut out);
    for (k, stage) in model.stages.iter().enumerate() {
        for (u, unit) in stage.iter().enumerate() {
            match &unit.branch {
                Branch::Conv { conv1, conv2 } => {
                    conv_bn_records(&LayerAddress::unit(k, u, UnitSlot::Conv1).to_string(), conv1, &mut out);
                    conv_bn_records(&LayerAddress::unit(k, u, UnitSlot::Conv2).to_string(), conv2, &mut out);
                }
                Branch::Constant(c) => out.push(rec(format!("s{k}.u{u}.branch_const"), &[c.len()], c)),
                Branch::ConstantMap(m) => out.push(rec(
                    format!("s{k}.u{u}.branch_map"),
                    &[m.channels, 3, 3],
                    &m.values,
                )),
            }
            match &unit.shortcut {
                Shortcut::Identity => {}
                Shortcut::Projection(p) => {
                    conv_bn_records(&LayerAddress::unit(k, u, UnitSlot::Proj).to_string(), p, &mut out)
                }
                Shortcut::Constant(c) => out.push(rec(format!("s{k}.u{u}.proj_const"), &[c.len()], c)),
            }
        }
    }
    match &model.head {
        Head::Classify(fc) => {
            out.push(rec("head.fc.weight", &[fc.out_features, fc.in_features], &fc.weights));
            out.push(rec("head.fc.bias", &[fc.out_features], &fc.bias));
        }
        Head::Segment(seg) => {
            for (i, up) in seg.ups.iter().enumerate() {
                conv_bn_records(&LayerAddress::Head(i).to_string(), up, &mut out);
            }
            let prefix = LayerAddress::Head(seg.ups.len()).to_string();
            let k = &seg.out;
            out.push(rec(
                format!("{prefix}.weight"),
                &[k.out_channels, k.in_channels, k.kh, k.kw],
                &k.weights,
            ));
            if k.zeroed {
                out.push(rec(format!("{prefix}.zeroed"), &[1], &[1.0]));
            }
            out.push(rec("head.out.bias", &[seg.out_bias.len()], &seg.out_bias));
        }
    }
    out
}

/// Checkpoint bytes without the trailing checksum.
fn encode_body(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_string(&model.config).map_err(|e| Error::format(e.to_string()))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    let recs = records(model);
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for r in &recs {
        buf.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.push(r.dims.len() as u8);
        for d in &r.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut buf = encode_body(model)?;
    let sum = Sha256::digest(&buf);
    buf.extend_from_slice(&sum);
    Ok(buf)
}

/// Short stable identifier of a model's configuration and every stored value.
pub fn fingerprint(model: &Model) -> Result<String> {
    let body = encode_body(model)?;
    Ok(hex::encode(&Sha256::digest(&body)[..8]))
}

/// Number of kernel weight records (one per addressable kernel).
pub fn kernel_record_count(bytes: &[u8]) -> Result<usize> {
    let (_, recs) = parse(bytes)?;
    Ok(recs.iter().filter(|r| r.name.ends_with(".weight")).count())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn parse(bytes: &[u8]) -> Result<(ResNetConfig, Vec<Record>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic bytes)"));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| Error::format("config is not UTF-8"))?;
    let count = r.u32("record count")? as usize;
    let mut recs = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = u16::from_le_bytes(r.take(2, "record name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(nlen, "record name")?)
            .map_err(|_| Error::format("record name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "record rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("record extent")?);
        }
        let numel = dims.iter().map(|&d| d as usize).product::<usize>();
        let raw = r.take(numel * 4, &name)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        recs.push(Record { name, dims, values });
    }
    let body_end = r.pos;
    let sum = r.take(CHECKSUM_LEN, "checksum")?;
    if Sha256::digest(&bytes[..body_end]).as_slice() != sum {
        return Err(Error::Checksum);
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checksum"));
    }
    let config: ResNetConfig =
        serde_json::from_str(config_text).map_err(|e| Error::format(format!("bad config: {e}")))?;
    Ok((config, recs))
}

struct RecordSet {
    map: BTreeMap<String, Record>,
}

impl RecordSet {
    fn take(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        let r = self
            .map
            .remove(name)
            .ok_or_else(|| Error::format(format!("missing record {name}")))?;
        let expect: Vec<u32> = dims.iter().map(|&d| d as u32).collect();
        if r.dims != expect {
            return Err(Error::format(format!(
                "record {name} has extents {:?}, expected {expect:?}",
                r.dims
            )));
        }
        Ok(r.values)
    }

    fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    fn fill_conv_bn(&mut self, prefix: &str, c: &mut ConvBn) -> Result<()> {
        let k = &mut c.kernel;
        k.weights = self.take(
            &format!("{prefix}.weight"),
            &[k.out_channels, k.in_channels, k.kh, k.kw],
        )?;
        k.zeroed = self.map.remove(&format!("{prefix}.zeroed")).is_some();
        if k.zeroed && k.weights.iter().any(|&w| w != 0.0) {
            return Err(Error::format(format!("{prefix} flagged zeroed but has weights")));
        }
        let n = c.bn.channels();
        c.bn.gamma = self.take(&format!("{prefix}.bn.gamma"), &[n])?;
        c.bn.beta = self.take(&format!("{prefix}.bn.beta"), &[n])?;
        c.bn.running_mean = self.take(&format!("{prefix}.bn.mean"), &[n])?;
        c.bn.running_var = self.take(&format!("{prefix}.bn.var"), &[n])?;
        let hyper = self.take(&format!("{prefix}.bn.hyper"), &[2])?;
        c.bn.epsilon = hyper[0];
        c.bn.momentum = hyper[1];
        c.bn.validate().map_err(|e| Error::format(format!("{prefix}: {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let (config, recs) = parse(bytes)?;
    config.validate().map_err(|e| Error::format(format!("bad config: {e}")))?;
    let mut set = RecordSet {
        map: BTreeMap::new(),
    };
    for r in recs {
        if set.map.insert(r.name.clone(), r).is_some() {
            return Err(Error::format("duplicate record"));
        }
    }
    let mut model = Model::build(&config)?;
    set.fill_conv_bn("stem", &mut model.stem)?;
    for (k, stage) in model.stages.iter_mut().enumerate() {
        for (u, unit) in stage.iter_mut().enumerate() {
            let c = unit.out_channels;
            let const_name = format!("s{k}.u{u}.branch_const");
            let map_name = format!("s{k}.u{u}.branch_map");
            if set.has(&const_name) {
                unit.branch = Branch::Constant(set.take(&const_name, &[c])?);
            } else if set.has(&map_name) {
                unit.branch = Branch::ConstantMap(BorderMap {
                    channels: c,
                    values: set.take(&map_name, &[c, 3, 3])?,
                });
            } else if let Branch::Conv { conv1, conv2 } = &mut unit.branch {
                set.fill_conv_bn(&LayerAddress::unit(k, u, UnitSlot::Conv1).to_string(), conv1)?;
                set.fill_conv_bn(&LayerAddress::unit(k, u, UnitSlot::Conv2).to_string(), conv2)?;
            }
            let proj_const = format!("s{k}.u{u}.proj_const");
            if set.has(&proj_const) {
                if matches!(unit.shortcut, Shortcut::Identity) {
                    return Err(Error::format(format!("{proj_const} on an identity unit")));
                }
                unit.shortcut = Shortcut::Constant(set.take(&proj_const, &[c])?);
            } else if let Shortcut::Projection(p) = &mut unit.shortcut {
                set.fill_conv_bn(&LayerAddress::unit(k, u, UnitSlot::Proj).to_string(), p)?;
            }
        }
    }
    match &mut model.head {
        Head::Classify(fc) => {
            fc.weights = set.take("head.fc.weight", &[fc.out_features, fc.in_features])?;
            fc.bias = set.take("head.fc.bias", &[fc.out_features])?;
        }
        Head::Segment(seg) => {
            for (i, up) in seg.ups.iter_mut().enumerate() {
                set.fill_conv_bn(&LayerAddress::Head(i).to_string(), up)?;
            }
            let prefix = LayerAddress::Head(seg.ups.len()).to_string();
            let k = &mut seg.out;
            k.weights = set.take(
                &format!("{prefix}.weight"),
                &[k.out_channels, k.in_channels, k.kh, k.kw],
            )?;
            k.zeroed = set.map.remove(&format!("{prefix}.zeroed")).is_some();
            seg.out_bias = set.take("head.out.bias", &[seg.out_bias.len()])?;
        }
    }
    if let Some(name) = set.map.keys().next() {
        return Err(Error::format(format!("unexpected record {name}")));
    }
    Ok(model)
}

/// Writes atomically: temp file in the target directory, then rename.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(seed: u64, cfg: ResNetConfig) -> Model {
        let mut m = Model::build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for buf in m.param_buffers_mut() {
            buf.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        for cfg in [ResNetConfig::desk_classifier(5), ResNetConfig::desk_segmenter(6)] {
            let m = perturbed(1, cfg);
            let back = decode(&encode(&m).unwrap()).unwrap();
            assert_eq!(back, m);
            let x = Tensor::from_fn(m.input_shape(2), |i| ((i * 7919) % 13) as f32 / 13.0);
            assert_eq!(
                m.forward_eval(&x).unwrap().data(),
                back.forward_eval(&x).unwrap().data()
            );
        }
    }

    #[test]
    fn thirteen_kernel_records() {
        let m = Model::build(&ResNetConfig::desk_classifier(0)).unwrap();
        // the classifier head record is head.fc.weight
        assert_eq!(kernel_record_count(&encode(&m).unwrap()).unwrap(), 13);
    }

    #[test]
    fn distinct_load_errors() {
        let m = Model::build(&ResNetConfig::desk_classifier(0)).unwrap();
        let good = encode(&m).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xff;
        assert!(matches!(decode(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = good.clone();
        bad_version[8] = 9;
        assert!(matches!(decode(&bad_version), Err(Error::Version { found: 9, .. })));

        assert!(matches!(decode(&good[..good.len() - 40]), Err(Error::Truncated(_))));

        let mut flipped = good.clone();
        // last byte of the last stored value
        let pos = good.len() - CHECKSUM_LEN - 1;
        flipped[pos] ^= 0x01;
        assert!(matches!(decode(&flipped), Err(Error::Checksum)));

        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = perturbed(2, ResNetConfig::desk_classifier(1));
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let a = Model::build(&ResNetConfig::desk_classifier(0)).unwrap();
        let mut b = a.clone();
        assert_eq!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
        b.stem.kernel.weights[0] += 1.0;
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
    }
}

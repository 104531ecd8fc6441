use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, Reader, Writer};
use crate::quant::{ClipParam, QuantizedWeightView};
use crate::tensor::Tensor;

use super::arch::{ArchSpec, BitWidthSet, LayerSpec};
use super::bank::{BankSharing, BnState, PrecisionBank};
use super::net::{AdaptiveNet, LayerParams, WeightStore};

pub const BUNDLE_MAGIC: &[u8; 4] = b"AQDB";
pub const BUNDLE_VERSION: u32 = 1;

/// Byte accounting of a serialized bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleSummary {
    pub total_bytes: usize,
    /// Bytes of packed integer codes across the quantized layers.
    pub code_bytes: usize,
    /// Number of weights stored as codes.
    pub coded_weights: usize,
}

fn layer_name(spec: &LayerSpec, idx: usize) -> String {
    match spec {
        LayerSpec::Conv { .. } => format!("conv{idx}"),
        _ => format!("dense{idx}"),
    }
}

pub(crate) fn sharing_code(s: BankSharing) -> u8 {
    match s {
        BankSharing::Shared => 0,
        BankSharing::SharedClip => 1,
        BankSharing::PerPrecision => 2,
    }
}

pub(crate) fn sharing_from_code(c: u8, offset: usize) -> Result<BankSharing> {
    match c {
        0 => Ok(BankSharing::Shared),
        1 => Ok(BankSharing::SharedClip),
        2 => Ok(BankSharing::PerPrecision),
        _ => Err(Error::format(
            offset as u64,
            format!("unknown bank sharing {c}"),
        )),
    }
}

pub(crate) fn write_header(w: &mut Writer, net: &AdaptiveNet) -> Result<()> {
    w.bytes(serde_json::to_string(net.arch())?.as_bytes());
    let bits = net.bits().as_slice();
    w.u8(bits.len() as u8);
    for &b in bits {
        w.u8(b);
    }
    w.u8(sharing_code(net.banks().sharing));
    Ok(())
}

pub(crate) fn read_header(r: &mut Reader) -> Result<(ArchSpec, BitWidthSet, BankSharing)> {
    let at = r.pos();
    let arch: ArchSpec =
        serde_json::from_slice(r.bytes()?).map_err(|e| Error::format(at as u64, e.to_string()))?;
    let at = r.pos();
    let n = r.u8()? as usize;
    let bits = (0..n).map(|_| r.u8()).collect::<Result<Vec<_>>>()?;
    let bits = BitWidthSet::new(bits).map_err(|e| Error::format(at as u64, e.to_string()))?;
    let at = r.pos();
    let sharing = sharing_from_code(r.u8()?, at)?;
    Ok((arch, bits, sharing))
}

pub(crate) fn write_banks(w: &mut Writer, banks: &PrecisionBank) {
    let keys = banks.bn_keys();
    w.u32(keys.len() as u32);
    for b in keys {
        w.u8(b);
        let entry = banks.bn_entry(b).expect("listed key");
        w.u32(entry.len() as u32);
        for st in entry {
            w.f64s(st.gamma.data());
            w.f64s(st.beta.data());
            w.f64s(&st.running_mean);
            w.f64s(&st.running_var);
        }
    }
    let keys = banks.alpha_keys();
    w.u32(keys.len() as u32);
    for b in keys {
        w.u8(b);
        let entry = banks.alpha_entry(b).expect("listed key");
        w.u32(entry.len() as u32);
        for a in entry {
            w.f64(a.alpha());
        }
    }
}

pub(crate) fn read_banks(
    r: &mut Reader,
    arch: &ArchSpec,
    bits: BitWidthSet,
    sharing: BankSharing,
) -> Result<PrecisionBank> {
    let channels = arch.bn_channels();
    let mut bn = BTreeMap::new();
    for _ in 0..r.u32()? {
        let b = r.u8()?;
        let at = r.pos();
        let n = r.u32()? as usize;
        if n != channels.len() {
            return Err(Error::format(
                at as u64,
                format!("{n} batch norms, architecture has {}", channels.len()),
            ));
        }
        let mut entry = Vec::with_capacity(n);
        for &c in &channels {
            let at = r.pos();
            let gamma = r.f64s()?;
            let beta = r.f64s()?;
            let running_mean = r.f64s()?;
            let running_var = r.f64s()?;
            if [&gamma, &beta, &running_mean, &running_var]
                .iter()
                .any(|v| v.len() != c)
            {
                return Err(Error::format(
                    at as u64,
                    format!("batch norm arrays are not {c} long"),
                ));
            }
            entry.push(BnState {
                gamma: Tensor::new(vec![c], gamma)?,
                beta: Tensor::new(vec![c], beta)?,
                running_mean,
                running_var,
            });
        }
        bn.insert(b, entry);
    }
    let mut alpha = BTreeMap::new();
    for _ in 0..r.u32()? {
        let b = r.u8()?;
        let at = r.pos();
        let n = r.u32()? as usize;
        if n != arch.quantized_count() {
            return Err(Error::format(
                at as u64,
                format!("{n} clip values for {} blocks", arch.quantized_count()),
            ));
        }
        let entry = (0..n)
            .map(|_| r.f64().map(ClipParam::new))
            .collect::<Result<Vec<_>>>()?;
        alpha.insert(b, entry);
    }
    Ok(PrecisionBank::from_parts(sharing, bits, bn, alpha))
}

fn pack_codes(w: &mut Writer, codes: &[u16], bytes_per: usize) {
    for &c in codes {
        w.raw(&c.to_le_bytes()[..bytes_per]);
    }
}

/// Serializes `net` as a deployment bundle: packed `b1` codes for quantized
/// layers, full-precision first/last layers, every bank entry, and a CRC32.
pub fn export_bundle(net: &AdaptiveNet) -> Result<Vec<u8>> {
    let mut w = Writer::new(BUNDLE_MAGIC, BUNDLE_VERSION);
    write_header(&mut w, net)?;
    let b1 = net.bits().b1();
    let bytes_per = usize::from(b1).div_ceil(8);
    let specs: Vec<&LayerSpec> = net
        .arch()
        .layers
        .iter()
        .filter(|l| l.is_learnable())
        .collect();
    w.u32(net.layers().len() as u32);
    for (idx, layer) in net.layers().iter().enumerate() {
        w.str(&layer_name(specs[idx], idx));
        if net.arch().is_quantized(idx) {
            let view = net.view(idx)?;
            w.u8(b1);
            write_dims(&mut w, &view.shape);
            pack_codes(&mut w, &view.codes, bytes_per);
            w.f64(view.mean_b1);
        } else {
            let WeightStore::Latent(t) = &layer.weight else {
                return Err(Error::Structural(format!(
                    "full-precision layer {idx} has no latent weights"
                )));
            };
            w.u8(0);
            write_dims(&mut w, t.shape());
            for &v in t.data() {
                w.f64(v);
            }
        }
        match &layer.bias {
            Some(b) => {
                w.u8(1);
                w.f64s(b.data());
            }
            None => w.u8(0),
        }
    }
    write_banks(&mut w, net.banks());
    Ok(w.finish())
}

fn write_dims(w: &mut Writer, dims: &[usize]) {
    w.u8(dims.len() as u8);
    for &d in dims {
        w.u32(d as u32);
    }
}

/// Parses a bundle back into an inference-only network.
pub fn read_bundle(bytes: &[u8]) -> Result<(AdaptiveNet, BundleSummary)> {
    let (mut r, version) = Reader::open(bytes, BUNDLE_MAGIC)?;
    if version != BUNDLE_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported bundle version {version}"),
        ));
    }
    let (arch, bits, sharing) = read_header(&mut r)?;
    arch.validate()?;
    let specs: Vec<LayerSpec> = arch
        .layers
        .iter()
        .filter(|l| l.is_learnable())
        .cloned()
        .collect();
    let at = r.pos();
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(Error::format(
            at as u64,
            format!("{count} layers, architecture has {}", specs.len()),
        ));
    }
    let mut summary = BundleSummary {
        total_bytes: bytes.len(),
        code_bytes: 0,
        coded_weights: 0,
    };
    let mut layers = Vec::with_capacity(count);
    for (idx, spec) in specs.iter().enumerate() {
        let _name = r.str()?;
        let at = r.pos();
        let code_bits = r.u8()?;
        let nd = r.u8()? as usize;
        let dims = (0..nd)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if Some(&dims) != spec.weight_shape().as_ref() {
            return Err(Error::format(
                at as u64,
                format!("layer {idx} dims {dims:?} do not match architecture"),
            ));
        }
        let n: usize = dims.iter().product();
        let weight = if code_bits == 0 {
            if arch.is_quantized(idx) {
                return Err(Error::format(
                    at as u64,
                    format!("quantized layer {idx} stored without codes"),
                ));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            WeightStore::Latent(Tensor::new(dims, data)?)
        } else {
            if code_bits != bits.b1() {
                return Err(Error::format(
                    at as u64,
                    format!("codes at {code_bits} bits, b1 is {}", bits.b1()),
                ));
            }
            let bytes_per = usize::from(code_bits).div_ceil(8);
            let raw = r.raw(n * bytes_per)?;
            let max = (1u32 << code_bits) - 1;
            let mut codes = Vec::with_capacity(n);
            for chunk in raw.chunks(bytes_per) {
                let mut b = [0u8; 2];
                b[..bytes_per].copy_from_slice(chunk);
                let c = u16::from_le_bytes(b);
                if u32::from(c) > max {
                    return Err(Error::format(
                        at as u64,
                        format!("code {c} exceeds {code_bits}-bit range"),
                    ));
                }
                codes.push(c);
            }
            summary.code_bytes += raw.len();
            summary.coded_weights += n;
            let mean_b1 = r.f64()?;
            WeightStore::Codes(QuantizedWeightView {
                shape: dims,
                codes,
                b1: code_bits,
                mean_b1,
            })
        };
        let bias = match r.u8()? {
            0 => None,
            _ => {
                let b = r.f64s()?;
                Some(Tensor::new(vec![b.len()], b)?)
            }
        };
        layers.push(LayerParams { weight, bias });
    }
    let banks = read_banks(&mut r, &arch, bits.clone(), sharing)?;
    r.finish()?;
    Ok((AdaptiveNet::from_parts(arch, bits, layers, banks)?, summary))
}

pub fn write_bundle(net: &AdaptiveNet, path: &Path) -> Result<()> {
    atomic_write(path, &export_bundle(net)?)
}

pub fn load_bundle(path: &Path) -> Result<AdaptiveNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_bundle(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::network::ExecPlan;

    fn net() -> AdaptiveNet {
        let arch = ArchSpec::mlp(5, &[6, 6, 6], 3);
        let bits = BitWidthSet::new(vec![8, 4, 2]).unwrap();
        AdaptiveNet::new(
            arch,
            bits,
            BankSharing::PerPrecision,
            6.0,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_matches_logits() {
        let n = net();
        let (back, summary) = read_bundle(&export_bundle(&n).unwrap()).unwrap();
        let x = Tensor::new(
            vec![4, 5],
            (0..20).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        for &b in n.bits().as_slice() {
            let a = n.predict(&x, &ExecPlan::student(b)).unwrap();
            let c = back.predict(&x, &ExecPlan::student(b)).unwrap();
            assert_eq!(a.data(), c.data());
        }
        assert_eq!(summary.coded_weights, 6 * 6 * 2);
        assert_eq!(summary.code_bytes, 6 * 6 * 2);
    }

    #[test]
    fn corrupted_bundle_is_rejected() {
        let mut bytes = export_bundle(&net()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(read_bundle(&bytes), Err(Error::Checksum { .. })));
    }
}

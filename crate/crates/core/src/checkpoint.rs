//! Training checkpoints: config snapshot, latent weights, banks, optimizer
//! state, progress and RNG positions, framed like deployment bundles.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, Reader, Writer};
use crate::network::{
    read_banks, read_header, write_banks, write_header, AdaptiveNet, LayerParams, ParamId,
    WeightStore,
};
use crate::tensor::Tensor;
use crate::trainer::RunConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub net: AdaptiveNet,
    /// Epochs completed, counted across progressive phases.
    pub epochs_done: usize,
    pub velocities: BTreeMap<ParamId, Vec<f64>>,
    /// Word positions of the shuffle and swap RNG streams.
    pub shuffle_pos: u128,
    pub swap_pos: u128,
    pub eps_clamps: u64,
}

fn write_param_id(w: &mut Writer, id: ParamId) {
    match id {
        ParamId::Weight(i) => {
            w.u8(0);
            w.u32(i as u32);
        }
        ParamId::Bias(i) => {
            w.u8(1);
            w.u32(i as u32);
        }
        ParamId::Gamma { bits, bn } => {
            w.u8(2);
            w.u8(bits);
            w.u32(bn as u32);
        }
        ParamId::Beta { bits, bn } => {
            w.u8(3);
            w.u8(bits);
            w.u32(bn as u32);
        }
        ParamId::Alpha { bits, block } => {
            w.u8(4);
            w.u8(bits);
            w.u32(block as u32);
        }
    }
}

fn read_param_id(r: &mut Reader) -> Result<ParamId> {
    let at = r.pos();
    Ok(match r.u8()? {
        0 => ParamId::Weight(r.u32()? as usize),
        1 => ParamId::Bias(r.u32()? as usize),
        2 => ParamId::Gamma {
            bits: r.u8()?,
            bn: r.u32()? as usize,
        },
        3 => ParamId::Beta {
            bits: r.u8()?,
            bn: r.u32()? as usize,
        },
        4 => ParamId::Alpha {
            bits: r.u8()?,
            block: r.u32()? as usize,
        },
        t => {
            return Err(Error::format(
                at as u64,
                format!("unknown parameter tag {t}"),
            ))
        }
    })
}

fn write_u128(w: &mut Writer, v: u128) {
    w.u64(v as u64);
    w.u64((v >> 64) as u64);
}

fn read_u128(r: &mut Reader) -> Result<u128> {
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    Ok(lo | (hi << 64))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&self.config.to_json());
        write_header(&mut w, &self.net)?;
        w.u32(self.net.layers().len() as u32);
        for (i, layer) in self.net.layers().iter().enumerate() {
            let WeightStore::Latent(t) = &layer.weight else {
                return Err(Error::Contract(format!(
                    "layer {i} holds frozen codes; only trainable networks checkpoint"
                )));
            };
            w.u8(t.rank() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f64s(t.data());
            match &layer.bias {
                Some(b) => {
                    w.u8(1);
                    w.f64s(b.data());
                }
                None => w.u8(0),
            }
        }
        write_banks(&mut w, self.net.banks());
        w.u32(self.velocities.len() as u32);
        for (id, v) in &self.velocities {
            write_param_id(&mut w, *id);
            w.f64s(v);
        }
        w.u64(self.epochs_done as u64);
        write_u128(&mut w, self.shuffle_pos);
        write_u128(&mut w, self.swap_pos);
        w.u64(self.eps_clamps);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, CHECKPOINT_MAGIC)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let at = r.pos();
        let config: RunConfig =
            serde_json::from_str(r.str()?).map_err(|e| Error::format(at as u64, e.to_string()))?;
        config.validate()?;
        let (arch, bits, sharing) = read_header(&mut r)?;
        let at = r.pos();
        let count = r.u32()? as usize;
        let specs: Vec<_> = arch
            .layers
            .iter()
            .filter(|l| l.is_learnable())
            .cloned()
            .collect();
        if count != specs.len() {
            return Err(Error::format(
                at as u64,
                format!("{count} layers, architecture has {}", specs.len()),
            ));
        }
        let mut layers = Vec::with_capacity(count);
        for spec in &specs {
            let at = r.pos();
            let nd = r.u8()? as usize;
            let dims = (0..nd)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if Some(&dims) != spec.weight_shape().as_ref() {
                return Err(Error::format(
                    at as u64,
                    format!("weight dims {dims:?} do not match architecture"),
                ));
            }
            let data = r.f64s()?;
            let weight = WeightStore::Latent(
                Tensor::new(dims, data).map_err(|e| Error::format(at as u64, e.to_string()))?,
            );
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
        let net = AdaptiveNet::from_parts(arch, bits, layers, banks)?;
        let mut velocities = BTreeMap::new();
        for _ in 0..r.u32()? {
            let at = r.pos();
            let id = read_param_id(&mut r)?;
            let v = r.f64s()?;
            match net.param(id) {
                Some(t) if t.numel() == v.len() => {}
                _ => {
                    return Err(Error::format(
                        at as u64,
                        format!("velocity for unknown or mis-sized {id:?}"),
                    ))
                }
            }
            velocities.insert(id, v);
        }
        let epochs_done = r.u64()? as usize;
        let shuffle_pos = read_u128(&mut r)?;
        let swap_pos = read_u128(&mut r)?;
        let eps_clamps = r.u64()?;
        r.finish()?;
        Ok(Self {
            config,
            net,
            epochs_done,
            velocities,
            shuffle_pos,
            swap_pos,
            eps_clamps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

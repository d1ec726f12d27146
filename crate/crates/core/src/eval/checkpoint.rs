//! Binary checkpoints: magic `MMGR`, u32 version, u32 record count, then per
//! record a u16 name length, the UTF-8 name, a u8 rank, u32 dimensions and
//! f32 data. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{format_err, shape_err, Error, Result};
use crate::layers::Network;
use crate::optim::Sgd;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMGR";
pub const VERSION: u32 = 1;

const VELOCITY_PREFIX: &str = "optim.velocity.";
const ITERATION: &str = "optim.iteration";
const EPOCH: &str = "optim.epoch";

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// A counter as four exact 16-bit limbs, least significant first.
fn counter_tensor(n: u64) -> Tensor<f32> {
    Tensor::from_vec(&[4], (0..4).map(|i| ((n >> (16 * i)) & 0xffff) as f32).collect()).unwrap()
}

fn counter_value(t: &Tensor<f32>) -> Result<u64> {
    if t.len() != 4 || t.data().iter().any(|&v| v.fract() != 0.0 || !(0.0..65536.0).contains(&v)) {
        return Err(format_err!("malformed counter record"));
    }
    Ok(t.data().iter().enumerate().map(|(i, &v)| (v as u64) << (16 * i)).sum())
}

impl Checkpoint {
    /// Parameters, running statistics and, when given, optimizer state.
    pub fn capture(net: &Network<f32>, opt: Option<&Sgd<f32>>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = net.params().map(|p| (p.name.clone(), p.value.clone())).collect();
        tensors.extend(net.buffers().into_iter().map(|(n, t)| (n, t.clone())));
        if let Some(opt) = opt {
            let names: Vec<String> = net.params().map(|p| p.name.clone()).collect();
            for (name, v) in names.iter().zip(opt.velocities()) {
                tensors.push((format!("{VELOCITY_PREFIX}{name}"), v.clone()));
            }
            tensors.push((ITERATION.into(), counter_tensor(opt.iteration())));
            tensors.push((EPOCH.into(), counter_tensor(opt.epoch)));
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into `net` (and `opt`). Every parameter and buffer
    /// of the network must be present with a matching shape.
    pub fn restore(&self, net: &mut Network<f32>, opt: Option<&mut Sgd<f32>>) -> Result<()> {
        let mut names = Vec::new();
        for p in net.params_mut() {
            let t = self.get(&p.name).ok_or_else(|| format_err!("checkpoint lacks parameter {}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(shape_err!("{}: stored {:?}, network {:?}", p.name, t.shape(), p.value.shape()));
            }
            p.value = t.clone();
            names.push(p.name.clone());
        }
        let buffer_names: Vec<String> = net.buffers().into_iter().map(|(n, _)| n).collect();
        for name in buffer_names {
            let t = self.get(&name).ok_or_else(|| format_err!("checkpoint lacks buffer {name}"))?.clone();
            let slot = net.buffer_mut(&name).expect("listed buffer");
            if t.shape() != slot.shape() {
                return Err(shape_err!("{name}: stored {:?}, network {:?}", t.shape(), slot.shape()));
            }
            *slot = t;
        }
        if let Some(opt) = opt {
            if let Some(it) = self.get(ITERATION) {
                let velocities = names
                    .iter()
                    .map(|n| {
                        self.get(&format!("{VELOCITY_PREFIX}{n}"))
                            .cloned()
                            .ok_or_else(|| format_err!("checkpoint lacks velocity of {n}"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                opt.restore(velocities, counter_value(it)?);
                opt.epoch = self.get(EPOCH).map(counter_value).transpose()?.unwrap_or(0);
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| format_err!("tensor name too long: {name}"))?;
            let rank = u8::try_from(t.ndim()).map_err(|_| format_err!("{name}: rank {} too large", t.ndim()))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| format_err!("{name}: dimension {d} too large"))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err!("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| format_err!("tensor name at offset {at} is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| format_err!("{name}: shape {shape:?} overflows"))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| format_err!("{name}: {e}"))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format_err!("{} trailing bytes after offset {}", bytes.len() - r.pos, r.pos));
        }
        Ok(Self { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err!(
                "truncated at offset {}: needed {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, net: &Network<f32>, opt: Option<&Sgd<f32>>) -> Result<()> {
    fs::write(path, Checkpoint::capture(net, opt).encode()?)?;
    Ok(())
}

/// Reads a checkpoint; decoding failures name the file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Checkpoint::decode(&fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => format_err!("{}: {m}", path.display()),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Mode, NetworkConfig, StreamOptions};
    use crate::optim::{train_epoch, SgdConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained() -> (Network<f32>, Sgd<f32>, Tensor<f32>) {
        let opts = StreamOptions { batch_norm: true, dropout_keep: 1.0 };
        let mut net = Network::new(NetworkConfig::stream_2d([2, 6, 6], &[3], 3, opts).unwrap(), 4).unwrap();
        let x = Tensor::from_vec(&[2, 6, 6], (0..72).map(|i| (i as f32 * 0.3).cos()).collect()).unwrap();
        let y = x.map(|v| -v);
        let mut opt = Sgd::new(SgdConfig { learning_rate: 0.01, ..SgdConfig::stream_2d() }).unwrap();
        train_epoch(&mut net, &[(x.clone(), 0), (y, 2)], &mut opt, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (net, opt, x)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, opt, x) = trained();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &net, Some(&opt)).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck, Checkpoint::capture(&net, Some(&opt)));

        let mut fresh = Network::new(net.config().clone(), 99).unwrap();
        let mut fresh_opt = Sgd::new(opt.config).unwrap();
        ck.restore(&mut fresh, Some(&mut fresh_opt)).unwrap();
        for (a, b) in net.params().zip(fresh.params()) {
            assert!(a.value.data().iter().zip(b.value.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        assert_eq!(fresh_opt.iteration(), opt.iteration());
        assert_eq!(fresh_opt.velocities(), opt.velocities());
        assert_eq!(fresh.infer(std::slice::from_ref(&x)).unwrap(), net.infer(std::slice::from_ref(&x)).unwrap());
        let mut again = fresh.clone();
        assert_eq!(again.forward(&x, Mode::Eval).unwrap(), net.infer(&[x]).unwrap()[0]);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let (net, _, _) = trained();
        let bytes = Checkpoint::capture(&net, None).encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Checkpoint::decode(&v2).unwrap_err().to_string().contains("version"));
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("offset"), "{err}");
    }

    #[test]
    fn counters_survive_beyond_f32_precision() {
        let n = (1u64 << 40) + 12345;
        assert_eq!(counter_value(&counter_tensor(n)).unwrap(), n);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::RunConfig;
use crate::backbone::RunningStats;
use crate::datagen::Reader;
use crate::error::{Error, Result};
use crate::tensor::{ParamMap, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const STAT_PREFIX: &str = "stat:";
const VELOCITY_PREFIX: &str = "velocity:";
const PARAM_PREFIX: &str = "param:";

/// A trained (or freshly initialized) model with everything needed to resume or evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamMap<f32>,
    pub stats: RunningStats<f32>,
    /// Optimizer velocity per parameter; zero for an untrained model.
    pub velocity: BTreeMap<String, Vec<f32>>,
    pub epoch: u64,
    pub lr: f64,
    pub metrics: BTreeMap<String, f64>,
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Input("string too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn get_str(r: &mut Reader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Corrupt("checkpoint: invalid utf-8".into()))
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    put_str(out, name)?;
    let rank = u8::try_from(dims.len()).map_err(|_| Error::Input("rank exceeds 255".into()))?;
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Input("dimension exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    /// Every named tensor in file order: parameters, statistics, velocities.
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (k, t) in &self.params {
            out.push((format!("{PARAM_PREFIX}{k}"), t.shape().to_vec(), t.data()));
        }
        for (k, v) in &self.stats {
            out.push((format!("{STAT_PREFIX}{k}"), vec![v.len()], v.as_slice()));
        }
        for (k, v) in &self.velocity {
            out.push((format!("{VELOCITY_PREFIX}{k}"), vec![v.len()], v.as_slice()));
        }
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.digest());
        put_str(&mut out, &self.config.canonical())?;
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.lr.to_le_bytes());
        out.extend_from_slice(&(self.metrics.len() as u32).to_le_bytes());
        for (k, v) in &self.metrics {
            put_str(&mut out, k)?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in tensors {
            put_tensor(&mut out, &name, &dims, data)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let text = get_str(&mut r)?;
        let config = RunConfig::parse(&text).map_err(|e| Error::Corrupt(format!("checkpoint config: {e}")))?;
        if config.digest() != digest {
            return Err(Error::Corrupt("checkpoint: config digest mismatch".into()));
        }
        let epoch = r.u64()?;
        let lr = f64::from_bits(r.u64()?);
        let n_metrics = r.u32()? as usize;
        let mut metrics = BTreeMap::new();
        for _ in 0..n_metrics {
            let k = get_str(&mut r)?;
            let v = f64::from_bits(r.u64()?);
            metrics.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut params = ParamMap::new();
        let mut stats = RunningStats::new();
        let mut velocity = BTreeMap::new();
        for _ in 0..n {
            let name = get_str(&mut r)?;
            let rank = r.u8()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("checkpoint: `{name}` dims overflow")))?;
            let data = r.f32s(count)?;
            let dup = if let Some(k) = name.strip_prefix(PARAM_PREFIX) {
                let t = Tensor::new(dims, data).map_err(|e| Error::Corrupt(e.to_string()))?;
                params.insert(k.to_string(), t).is_some()
            } else if let Some(k) = name.strip_prefix(STAT_PREFIX) {
                stats.insert(k.to_string(), data).is_some()
            } else if let Some(k) = name.strip_prefix(VELOCITY_PREFIX) {
                velocity.insert(k.to_string(), data).is_some()
            } else {
                return Err(Error::Corrupt(format!("checkpoint: unknown tensor `{name}`")));
            };
            if dup {
                return Err(Error::Corrupt(format!("checkpoint: `{name}` appears twice")));
            }
        }
        if !r.finished() {
            return Err(Error::Corrupt("checkpoint: trailing bytes".into()));
        }
        Ok(Self {
            config,
            params,
            stats,
            velocity,
            epoch,
            lr,
            metrics,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamMap::new();
        params.insert(
            "a.w".into(),
            Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, -0.0, f32::MIN_POSITIVE]).unwrap(),
        );
        params.insert("b".into(), Tensor::new(vec![1], vec![7.0]).unwrap());
        let mut stats = RunningStats::new();
        stats.insert("bn0.running_mean".into(), vec![0.25, 0.5]);
        let mut metrics = BTreeMap::new();
        metrics.insert("train_accuracy".into(), 0.75);
        Checkpoint {
            config: RunConfig::teacher(),
            params,
            stats,
            velocity: BTreeMap::from([("b".to_string(), vec![0.0])]),
            epoch: 3,
            lr: 0.001,
            metrics,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.params["a.w"].data()[4].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn wrong_magic_names_both() {
        let mut bytes = sample().encode().unwrap();
        bytes[..4].copy_from_slice(b"ADVD");
        match Checkpoint::decode(&bytes) {
            Err(Error::Format { expected, actual, .. }) => {
                assert_eq!(expected, "ADCK");
                assert_eq!(actual, "ADVD");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_version_and_truncation() {
        let bytes = sample().encode().unwrap();
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::decode(&v), Err(Error::Format { .. })));
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::decode(&bytes[..cut]),
                Err(Error::Corrupt(_)) | Err(Error::Format { .. })
            ));
        }
    }

    #[test]
    fn tampered_config_is_detected() {
        let bytes = sample().encode().unwrap();
        let text = sample().config.canonical();
        let at = bytes.windows(6).position(|w| w == b"epochs").unwrap();
        let mut t = bytes.clone();
        let digit = at + "epochs = ".len();
        t[digit] = b'9';
        assert!(text.contains("epochs = 30"));
        assert!(matches!(Checkpoint::decode(&t), Err(Error::Corrupt(_))));
    }
}

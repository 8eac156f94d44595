//! FMDS dataset files: a fixed little-endian header followed by every
//! trajectory as contiguous `f64` values in `[traj][step][C][H][W]` order.

use std::io::{Read, Write};
use std::path::Path;

use super::{ChannelRole, Field, Normalization, Trajectory, TrajectoryMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FMDS";
const VERSION: u32 = 1;

/// Trajectories of physical channels in physical units, together with the
/// standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub norm: Normalization,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, norm: Normalization) -> Result<Self> {
        let first = trajectories.first().ok_or_else(|| Error::invalid("dataset has no trajectories"))?;
        let len = first.len();
        let head = first.states.first().ok_or_else(|| Error::invalid("empty trajectory"))?;
        for t in &trajectories {
            if t.len() != len || t.dt_sim != first.dt_sim {
                return Err(Error::shape("trajectories differ in length or time step"));
            }
            for s in &t.states {
                if s.channels.shape() != head.channels.shape() || s.roles != head.roles {
                    return Err(Error::shape(format!(
                        "state of shape {:?} in a dataset of {:?}",
                        s.channels.shape(),
                        head.channels.shape()
                    )));
                }
            }
        }
        if norm.mean.len() != head.roles.len() || norm.std.len() != head.roles.len() {
            return Err(Error::shape("normalization does not match the channel count"));
        }
        Ok(Dataset { trajectories, norm })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.trajectories[0].states[0].channels.shape();
        (s[0], s[1], s[2])
    }

    pub fn len(&self) -> usize {
        self.trajectories[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn dt_sim(&self) -> f64 {
        self.trajectories[0].dt_sim
    }

    pub fn roles(&self) -> &[ChannelRole] {
        &self.trajectories[0].states[0].roles
    }
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let (c, h, wd) = ds.shape();
    let field = |e: &str| Error::Format(format!("{e} does not fit the FMDS header"));
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(ds.trajectories.len()).map_err(|_| field("trajectory count"))?.to_le_bytes())?;
    w.write_all(&u32::try_from(ds.len()).map_err(|_| field("length"))?.to_le_bytes())?;
    w.write_all(&[u8::try_from(c).map_err(|_| field("channel count"))?])?;
    w.write_all(&u16::try_from(h).map_err(|_| field("height"))?.to_le_bytes())?;
    w.write_all(&u16::try_from(wd).map_err(|_| field("width"))?.to_le_bytes())?;
    w.write_all(&ds.dt_sim().to_le_bytes())?;
    for r in ds.roles() {
        w.write_all(&[r.tag()])?;
    }
    for (m, s) in ds.norm.mean.iter().zip(&ds.norm.std) {
        w.write_all(&m.to_le_bytes())?;
        w.write_all(&s.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(c * h * wd * 8);
    for t in &ds.trajectories {
        for s in &t.states {
            buf.clear();
            for v in s.channels.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated FMDS file: {e}")))?;
    Ok(b)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    if &take::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("missing FMDS magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported FMDS version {version}")));
    }
    let n_traj = u32::from_le_bytes(take(&mut r)?) as usize;
    let len = u32::from_le_bytes(take(&mut r)?) as usize;
    let c = take::<1, _>(&mut r)?[0] as usize;
    let h = u16::from_le_bytes(take(&mut r)?) as usize;
    let w = u16::from_le_bytes(take(&mut r)?) as usize;
    let dt_sim = f64::from_le_bytes(take(&mut r)?);
    let roles = (0..c).map(|_| ChannelRole::from_tag(take::<1, _>(&mut r)?[0])).collect::<Result<Vec<_>>>()?;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for _ in 0..c {
        mean.push(f64::from_le_bytes(take(&mut r)?));
        std.push(f64::from_le_bytes(take(&mut r)?));
    }
    let n = c * h * w;
    let mut bytes = vec![0u8; n * 8];
    let mut trajectories = Vec::with_capacity(n_traj);
    for ti in 0..n_traj {
        let mut states = Vec::with_capacity(len);
        for k in 0..len {
            r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated FMDS payload: {e}")))?;
            let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8"))).collect();
            states.push(Field::new(Tensor::new(vec![c, h, w], data)?, roles.clone(), k as f64 * dt_sim)?);
        }
        trajectories.push(Trajectory { states, dt_sim, meta: TrajectoryMeta { generator: "fmds".into(), seed: ti as u64 } });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after FMDS payload".into()));
    }
    Dataset::new(trajectories, Normalization { mean, std })
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        write_dataset(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        read_dataset(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::PHYSICAL_ROLES;

    fn tiny() -> Dataset {
        let states = (0..2)
            .map(|k| {
                let data = (0..12).map(|i| (i + 12 * k) as f64 * 0.5).collect();
                Field::new(Tensor::new(vec![3, 2, 2], data).unwrap(), PHYSICAL_ROLES.to_vec(), k as f64 * 0.25).unwrap()
            })
            .collect();
        let t = Trajectory { states, dt_sim: 0.25, meta: TrajectoryMeta { generator: "fmds".into(), seed: 0 } };
        Dataset::new(vec![t], Normalization { mean: vec![1.0, 2.0, 3.0], std: vec![0.5, 0.25, 2.0] }).unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let mut buf = Vec::new();
        write_dataset(&tiny(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FMDS");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(buf[16], 3);
        assert_eq!(&buf[17..19], &2u16.to_le_bytes());
        assert_eq!(&buf[19..21], &2u16.to_le_bytes());
        assert_eq!(&buf[21..29], &0.25f64.to_le_bytes());
        assert_eq!(&buf[29..32], &[0, 1, 2]);
        assert_eq!(&buf[32..40], &1.0f64.to_le_bytes());
        assert_eq!(&buf[40..48], &0.5f64.to_le_bytes());
        let payload = 80;
        assert_eq!(buf.len(), payload + 2 * 12 * 8);
        assert_eq!(&buf[payload + 8..payload + 16], &0.5f64.to_le_bytes());
    }

    #[test]
    fn round_trip_and_corruption() {
        let ds = tiny();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), ds);
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_dataset(&extra[..]).is_err());
        buf[0] = b'X';
        assert!(matches!(read_dataset(&buf[..]), Err(Error::Format(_))));
    }
}

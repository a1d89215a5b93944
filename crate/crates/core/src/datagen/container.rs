//! `BKDS` binary container and CSV export.
//!
//! Layout (little-endian): magic `BKDS`, `u32` version, `u32` name length
//! and UTF-8 preset name, `u32` state dim, control dim and window length,
//! `u64` seed and split seed, `u64` episode count followed by each episode
//! (`u8` source, `u64` index, `u64` pair count, states, controls), `u64`
//! window count followed by each window (`u32` episode, `u32` start, `u8`
//! split), the normalization statistics, and the trailer `BKDE`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, DatagenError, Episode, EpisodeSource, NormStats, Split, WindowRef};
use crate::simulators::Preset;

const MAGIC: &[u8; 4] = b"BKDS";
const TRAILER: &[u8; 4] = b"BKDE";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(d: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let name = d.preset.name().as_bytes();
    put_u32(&mut buf, name.len() as u32);
    buf.extend_from_slice(name);
    put_u32(&mut buf, d.state_dim as u32);
    put_u32(&mut buf, d.control_dim as u32);
    put_u32(&mut buf, d.window_len as u32);
    put_u64(&mut buf, d.seed);
    put_u64(&mut buf, d.split_seed);
    put_u64(&mut buf, d.episodes.len() as u64);
    for ep in &d.episodes {
        buf.push(match ep.source {
            EpisodeSource::TrainPool => 0,
            EpisodeSource::Test => 1,
        });
        put_u64(&mut buf, ep.index);
        put_u64(&mut buf, (ep.controls.len() / d.control_dim) as u64);
        put_f64s(&mut buf, &ep.states);
        put_f64s(&mut buf, &ep.controls);
    }
    put_u64(&mut buf, d.windows.len() as u64);
    for w in &d.windows {
        put_u32(&mut buf, w.episode);
        put_u32(&mut buf, w.start);
        buf.push(match w.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        });
    }
    put_f64s(&mut buf, &d.stats.state_mean);
    put_f64s(&mut buf, &d.stats.state_std);
    put_f64s(&mut buf, &d.stats.control_mean);
    put_f64s(&mut buf, &d.stats.control_std);
    buf.extend_from_slice(TRAILER);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatagenError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DatagenError::Integrity(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DatagenError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DatagenError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DatagenError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, DatagenError> {
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| DatagenError::Integrity("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn count(&mut self) -> Result<usize, DatagenError> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(DatagenError::Integrity(format!("implausible count {n}")));
        }
        Ok(n)
    }
}

fn decode(bytes: &[u8]) -> Result<Dataset, DatagenError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(DatagenError::Format("bad magic bytes".into()));
    }
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(DatagenError::Format(format!("unsupported version {version}")));
    }
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| DatagenError::Format("preset name is not UTF-8".into()))?;
    let preset: Preset = name.parse().map_err(|_| DatagenError::Format(format!("unknown preset `{name}`")))?;
    let state_dim = r.u32()? as usize;
    let control_dim = r.u32()? as usize;
    let window_len = r.u32()? as usize;
    let cfg = preset.config();
    if state_dim != cfg.state_dim() || control_dim != cfg.control_dim() || window_len == 0 {
        return Err(DatagenError::Format("dimensions do not match the preset".into()));
    }
    let seed = r.u64()?;
    let split_seed = r.u64()?;
    let n_episodes = r.count()?;
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let source = match r.u8()? {
            0 => EpisodeSource::TrainPool,
            1 => EpisodeSource::Test,
            b => return Err(DatagenError::Integrity(format!("bad episode source tag {b}"))),
        };
        let index = r.u64()?;
        let pairs = r.count()?;
        let states = r.f64s(pairs * state_dim)?;
        let controls = r.f64s(pairs * control_dim)?;
        episodes.push(Episode {
            source,
            index,
            states,
            controls,
        });
    }
    let n_windows = r.count()?;
    let mut windows = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let episode = r.u32()?;
        let start = r.u32()?;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            b => return Err(DatagenError::Integrity(format!("bad split tag {b}"))),
        };
        let ep = episodes
            .get(episode as usize)
            .ok_or_else(|| DatagenError::Integrity(format!("window references missing episode {episode}")))?;
        if start as usize + window_len > ep.controls.len() / control_dim {
            return Err(DatagenError::Integrity("window extends past its episode".into()));
        }
        windows.push(WindowRef { episode, start, split });
    }
    let stats = NormStats {
        state_mean: r.f64s(state_dim)?,
        state_std: r.f64s(state_dim)?,
        control_mean: r.f64s(control_dim)?,
        control_std: r.f64s(control_dim)?,
    };
    if r.take(4)? != TRAILER || r.pos != bytes.len() {
        return Err(DatagenError::Integrity("missing or misplaced trailer".into()));
    }
    Ok(Dataset {
        preset,
        state_dim,
        control_dim,
        window_len,
        seed,
        split_seed,
        episodes,
        windows,
        stats,
    })
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<(), DatagenError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(d))?;
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatagenError> {
    decode(&fs::read(path)?)
}

/// One row per window step: window id, split, step, time, states, controls.
pub fn write_windows_csv<W: Write>(d: &Dataset, out: W) -> Result<(), DatagenError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["window".to_string(), "split".into(), "step".into(), "time".into()];
    header.extend((0..d.state_dim).map(|i| format!("x{i}")));
    header.extend((0..d.control_dim).map(|i| format!("u{i}")));
    w.write_record(&header)?;
    let dt = d.preset.config().dt();
    for i in 0..d.windows.len() {
        let view = d.window(i);
        let split = d.windows[i].split.name();
        for k in 0..d.window_len {
            let mut row = vec![i.to_string(), split.to_string(), k.to_string(), (view.start_time + k as f64 * dt).to_string()];
            row.extend(view.state(k).iter().map(f64::to_string));
            row.extend(view.control(k).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, WindowTargets};
    use crate::Exec;

    fn sample() -> Dataset {
        generate_dataset(Preset::CartpoleTv, WindowTargets { train_pool: 120, test: 30 }, 3, Exec::default()).unwrap()
    }

    #[test]
    fn round_trip() {
        let d = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bkds");
        write_dataset(&d, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), d);
    }

    #[test]
    fn identical_seeds_give_identical_bytes() {
        assert_eq!(encode(&sample()), encode(&sample()));
    }

    #[test]
    fn corrupted_header_is_a_format_error() {
        let mut bytes = encode(&sample());
        bytes[1] ^= 0xff;
        assert!(matches!(decode(&bytes), Err(DatagenError::Format(_))));
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(DatagenError::Format(_))));
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let bytes = encode(&sample());
        for cut in [bytes.len() - 1, bytes.len() / 2, 40] {
            assert!(matches!(decode(&bytes[..cut]), Err(DatagenError::Integrity(_))), "cut {cut}");
        }
    }

    #[test]
    fn csv_has_sixty_rows_per_window() {
        let d = sample();
        let mut buf = Vec::new();
        write_windows_csv(&d, &mut buf).unwrap();
        let rows = String::from_utf8(buf).unwrap().lines().count();
        assert_eq!(rows, 1 + d.windows.len() * 60);
    }
}

//! `VGE1` episode records.
//!
//! ```text
//! file   := "VGE1" u32:meta_len meta[meta_len] u32:count record*
//! record := u32:task_id u32:len desc u32:len env_name
//!           u8:source u8:success u8:action_kind
//!           u32:obs_dim u32:action_dim u32:T
//!           f32[(T+1)*obs_dim] f32[T*action_dim]
//! ```
//!
//! Integers and floats are little-endian. `action_kind` is 0 for continuous
//! and 1 for discrete; discrete indices are stored as floats with
//! `action_dim = 1`. `meta` is free-form UTF-8 (run provenance).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{Action, Episode, EpisodeSource, Observation, Task};

pub const EPISODE_MAGIC: &[u8; 4] = b"VGE1";

// Guards against absurd allocations when reading corrupt files.
const MAX_LEN: u32 = 1 << 28;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, vs: &[f32]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b[0])
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_len(r: &mut impl Read) -> Result<usize> {
    let n = get_u32(r)?;
    if n > MAX_LEN {
        return Err(Error::Format(format!("length {n} out of range")));
    }
    Ok(n as usize)
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_len(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Format("invalid utf-8".into()))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated record".into())
    } else {
        Error::Io(e)
    }
}

pub fn write_episode(w: &mut impl Write, ep: &Episode) -> Result<()> {
    put_u32(w, ep.task().id)?;
    put_str(w, &ep.task().description)?;
    put_str(w, &ep.task().env_name)?;
    w.write_all(&[ep.source() as u8, u8::from(ep.success())])?;
    let (kind, adim) = match &ep.actions()[0] {
        Action::Continuous(v) => (0u8, v.len()),
        Action::Discrete(_) => (1u8, 1),
    };
    w.write_all(&[kind])?;
    put_u32(w, ep.obs_dim() as u32)?;
    put_u32(w, adim as u32)?;
    put_u32(w, ep.len() as u32)?;
    for o in ep.observations() {
        put_f32s(w, o.features())?;
    }
    for a in ep.actions() {
        match a {
            Action::Continuous(v) => put_f32s(w, v)?,
            Action::Discrete(i) => put_f32s(w, &[f32::from(*i)])?,
        }
    }
    Ok(())
}

pub fn read_episode(r: &mut impl Read) -> Result<Episode> {
    let id = get_u32(r)?;
    let description = get_str(r)?;
    let env_name = get_str(r)?;
    let source = match get_u8(r)? {
        0 => EpisodeSource::Random,
        1 => EpisodeSource::VideoGuided,
        2 => EpisodeSource::Expert,
        s => return Err(Error::Format(format!("unknown source tag {s}"))),
    };
    let success = match get_u8(r)? {
        0 => false,
        1 => true,
        s => return Err(Error::Format(format!("bad success flag {s}"))),
    };
    let kind = get_u8(r)?;
    let obs_dim = get_len(r)?;
    let adim = get_len(r)?;
    let t = get_len(r)?;
    if (t + 1).saturating_mul(obs_dim) > MAX_LEN as usize {
        return Err(Error::Format("episode too large".into()));
    }
    let obs = get_f32s(r, (t + 1) * obs_dim)?;
    let acts = get_f32s(r, t * adim)?;
    let observations = obs.chunks_exact(obs_dim.max(1)).map(|c| Observation(c.to_vec())).collect();
    let actions = match kind {
        0 => acts.chunks_exact(adim.max(1)).map(|c| Action::Continuous(c.to_vec())).collect(),
        1 if adim == 1 => acts
            .iter()
            .map(|v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(v) {
                    Ok(Action::Discrete(*v as u8))
                } else {
                    Err(Error::Format(format!("bad discrete action {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(Error::Format(format!("unknown action kind {kind}"))),
    };
    Episode::new(Task { id, description, env_name }, observations, actions, success, source)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_episodes(w: &mut impl Write, meta: &str, episodes: &[Episode]) -> Result<()> {
    w.write_all(EPISODE_MAGIC)?;
    put_str(w, meta)?;
    put_u32(w, episodes.len() as u32)?;
    for ep in episodes {
        write_episode(w, ep)?;
    }
    Ok(())
}

/// Returns `(meta, episodes)`.
pub fn read_episodes(r: &mut impl Read) -> Result<(String, Vec<Episode>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != EPISODE_MAGIC {
        return Err(Error::Format("not a VGE1 file".into()));
    }
    let meta = get_str(r)?;
    let n = get_len(r)?;
    let episodes = (0..n).map(|_| read_episode(r)).collect::<Result<Vec<_>>>()?;
    Ok((meta, episodes))
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_episodes(path: &Path, meta: &str, episodes: &[Episode]) -> Result<()> {
    let mut buf = Vec::new();
    write_episodes(&mut buf, meta, episodes)?;
    write_atomic(path, &buf)
}

pub fn load_episodes(path: &Path) -> Result<(String, Vec<Episode>)> {
    let bytes = fs::read(path)?;
    let mut cur = bytes.as_slice();
    let out = read_episodes(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after records".into()));
    }
    Ok(out)
}

//! Binary container for motion clips.
//!
//! Layout (little-endian):
//!   magic   4 bytes  "MCLP"
//!   version u32      currently 1
//!   fps     f64
//!   frames  u32
//!   dims    u32      always 135
//!   norm    u8       1 if the data is normalized
//!   stats   u32 len + UTF-8 bytes   normalization stats id ("" if none)
//!   meta    u32 len + UTF-8 bytes   free-form provenance (config + seed)
//!   data    frames * dims f64, row-major
//!
//! Writing the same clip twice produces identical bytes.

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::pose::{MotionClip, PoseFrame, FRAME_DIM};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MCLP";
const VERSION: u32 = 1;

pub fn write_clip(path: &Path, clip: &MotionClip, meta: &str) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&clip.fps.to_le_bytes());
    buf.extend_from_slice(&(clip.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(FRAME_DIM as u32).to_le_bytes());
    buf.push(clip.normalized as u8);
    let stats = clip.stats_id.clone().unwrap_or_default();
    buf.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    buf.extend_from_slice(stats.as_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    for f in &clip.frames {
        for x in f.encode() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<(MotionClip, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_clip(&bytes)
}

pub fn parse_clip(bytes: &[u8]) -> Result<(MotionClip, String)> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad clip magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported clip version {version}")));
    }
    let fps = r.f64()?;
    let frames = r.u32()? as usize;
    let dims = r.u32()? as usize;
    if dims != FRAME_DIM {
        return Err(Error::Format(format!("clip dims {dims}, expected {FRAME_DIM}")));
    }
    let normalized = r.u8()? != 0;
    let stats_len = r.u32()? as usize;
    let stats = String::from_utf8(r.take(stats_len)?.to_vec())
        .map_err(|_| Error::Format("stats id is not UTF-8".into()))?;
    let meta_len = r.u32()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::Format("meta is not UTF-8".into()))?;
    let mut m = Mat::zeros(frames, FRAME_DIM);
    for x in m.data.iter_mut() {
        *x = r.f64()?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in clip file".into()));
    }
    let pose_frames: Vec<PoseFrame> = (0..frames).map(|i| PoseFrame::decode(m.row(i))).collect();
    let clip = MotionClip {
        frames: pose_frames,
        fps,
        normalized,
        stats_id: if stats.is_empty() { None } else { Some(stats) },
    };
    if clip.fps <= 0.0 {
        return Err(Error::Format("non-positive fps".into()));
    }
    if clip.normalized && clip.stats_id.is_none() {
        return Err(Error::Format("normalized clip without stats id".into()));
    }
    Ok((clip, meta))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated clip file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_byte_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut frames = Vec::new();
        for _ in 0..7 {
            frames.push(PoseFrame::decode(&crate::math::gauss_vec(&mut rng, FRAME_DIM)));
        }
        let mut clip = MotionClip::new(frames, 20.0).unwrap();
        clip.normalized = true;
        clip.stats_id = Some("abc123".into());

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mclip");
        let p2 = dir.path().join("b.mclip");
        write_clip(&p1, &clip, "{\"seed\":7}").unwrap();
        write_clip(&p2, &clip, "{\"seed\":7}").unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let (back, meta) = read_clip(&p1).unwrap();
        assert_eq!(back, clip);
        assert_eq!(meta, "{\"seed\":7}");
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(parse_clip(b"XXXX").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.mclip");
        let clip = MotionClip::new(vec![PoseFrame::rest()], 30.0).unwrap();
        write_clip(&p, &clip, "").unwrap();
        let good = std::fs::read(&p).unwrap();
        // truncate
        assert!(parse_clip(&good[..good.len() - 4]).is_err());
        // trailing garbage
        let mut extended = good.clone();
        extended.push(0);
        assert!(parse_clip(&extended).is_err());
    }
}

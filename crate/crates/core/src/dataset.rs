//! Episode dataset files.
//!
//! Layout (little-endian): magic `ARTG`, `u16` version, `u32` record count,
//! then one length-prefixed record per episode. A text manifest next to the
//! data file lists `index offset length` for every record.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::world::{Episode, Event, FrameGrid, SceneObject};

pub const MAGIC: &[u8; 4] = b"ARTG";
pub const VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4;

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "dataset", detail: detail.into() }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: usize) -> Result<()> {
        let v = u16::try_from(v).map_err(|_| fmt_err(format!("{v} does not fit in u16")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| fmt_err(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bbox(&mut self, b: BBox) {
        for v in b.to_array() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bbox(&mut self) -> Result<BBox> {
        Ok(BBox::new(self.f64()?, self.f64()?, self.f64()?, self.f64()?))
    }
}

pub fn encode_episode(ep: &Episode) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.u64(ep.seed);
    w.u32(ep.len())?;
    w.u16(ep.grid_h)?;
    w.u16(ep.grid_w)?;
    w.u16(ep.channels)?;
    w.u16(ep.query.len())?;
    for &t in &ep.query {
        w.u32(t)?;
    }
    w.u32(ep.segment.0)?;
    w.u32(ep.segment.1)?;
    w.u32(ep.gt_boxes.len())?;
    for &b in &ep.gt_boxes {
        w.bbox(b);
    }
    w.u16(ep.events.len())?;
    for ev in &ep.events {
        w.u32(ev.id)?;
        w.u32(ev.start)?;
        w.u32(ev.end)?;
        w.u16(ev.actor)?;
        w.u16(ev.action)?;
    }
    w.u16(ep.actor_types.len())?;
    for &t in &ep.actor_types {
        w.u16(t)?;
    }
    let cells = ep.cells() * ep.channels;
    for frame in &ep.frames {
        if frame.grid.len() != cells {
            return Err(fmt_err("frame grid length disagrees with dimensions"));
        }
        w.u16(frame.objects.len())?;
        for obj in &frame.objects {
            w.u16(obj.actor)?;
            w.bbox(obj.bbox);
            w.i32(obj.action.map_or(-1, |a| a as i32));
        }
        for &v in &frame.grid {
            w.f64(v);
        }
    }
    Ok(w.0)
}

pub fn decode_episode(buf: &[u8]) -> Result<Episode> {
    let mut r = Reader { buf, pos: 0 };
    let seed = r.u64()?;
    let n_frames = r.u32()?;
    let grid_h = r.u16()?;
    let grid_w = r.u16()?;
    let channels = r.u16()?;
    let q_len = r.u16()?;
    let query = (0..q_len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let segment = (r.u32()?, r.u32()?);
    let n_boxes = r.u32()?;
    let gt_boxes = (0..n_boxes).map(|_| r.bbox()).collect::<Result<Vec<_>>>()?;
    let n_events = r.u16()?;
    let mut events = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        events.push(Event {
            id: r.u32()?,
            start: r.u32()?,
            end: r.u32()?,
            actor: r.u16()?,
            action: r.u16()?,
        });
    }
    let n_actors = r.u16()?;
    let actor_types = (0..n_actors).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let cells = grid_h * grid_w * channels;
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let n_obj = r.u16()?;
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let actor = r.u16()?;
            let bbox = r.bbox()?;
            let action = r.i32()?;
            objects.push(SceneObject {
                actor,
                bbox,
                action: (action >= 0).then_some(action as usize),
            });
        }
        let grid = (0..cells).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        frames.push(FrameGrid { grid, objects });
    }
    if r.pos != buf.len() {
        return Err(fmt_err(format!("{} trailing bytes in record", buf.len() - r.pos)));
    }
    let (s, e) = segment;
    if s > e || e >= n_frames.max(1) || gt_boxes.len() != e - s + 1 {
        return Err(fmt_err(format!("inconsistent segment ({s}, {e})")));
    }
    Ok(Episode {
        seed,
        grid_h,
        grid_w,
        channels,
        query,
        segment,
        gt_boxes,
        events,
        actor_types,
        frames,
    })
}

/// Serialised dataset and the matching manifest text.
pub fn encode_dataset(episodes: &[Episode]) -> Result<(Vec<u8>, String)> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(episodes.len()).map_err(|_| fmt_err("too many records"))?;
    out.extend_from_slice(&count.to_le_bytes());
    let mut manifest = String::from("# index offset length\n");
    for (i, ep) in episodes.iter().enumerate() {
        let rec = encode_episode(ep)?;
        let len = u32::try_from(rec.len()).map_err(|_| fmt_err("record too large"))?;
        out.extend_from_slice(&len.to_le_bytes());
        manifest.push_str(&format!("{i} {} {}\n", out.len(), rec.len()));
        out.extend_from_slice(&rec);
    }
    Ok((out, manifest))
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Episode>> {
    if buf.len() < HEADER_LEN || &buf[..4] != MAGIC {
        return Err(fmt_err("missing ARTG magic"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let mut r = Reader { buf, pos: 6 };
    let count = r.u32()?;
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        episodes.push(decode_episode(r.take(len)?)?);
    }
    if r.pos != buf.len() {
        return Err(fmt_err("trailing bytes after last record"));
    }
    Ok(episodes)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

/// Write `path` and its manifest.
pub fn save(path: &Path, episodes: &[Episode]) -> Result<()> {
    let (data, manifest) = encode_dataset(episodes)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)?.write_all(&data)?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Episode>> {
    decode_dataset(&fs::read(path)?)
}

/// Read one record through the manifest without decoding the others.
pub fn load_record(path: &Path, index: usize) -> Result<Episode> {
    let manifest = fs::read_to_string(manifest_path(path))?;
    let entries: Vec<(usize, usize)> = manifest
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<usize> = l
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| fmt_err(format!("bad manifest line {l:?}"))))
                .collect::<Result<_>>()?;
            match f.as_slice() {
                [_, off, len] => Ok((*off, *len)),
                _ => Err(fmt_err(format!("bad manifest line {l:?}"))),
            }
        })
        .collect::<Result<_>>()?;
    let &(off, len) = entries
        .get(index)
        .ok_or(Error::OutOfRange { index, len: entries.len() })?;
    let data = fs::read(path)?;
    let rec = data.get(off..off + len).ok_or_else(|| fmt_err("manifest points past end of file"))?;
    decode_episode(rec)
}

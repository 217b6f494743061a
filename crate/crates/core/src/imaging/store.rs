//! On-disk sequence datasets.
//!
//! A dataset directory holds `manifest.json` plus one packed file per
//! sequence. Packed layout (all little-endian):
//!
//! ```text
//! b"MSEQ0001"
//! u32 num_frames, u32 height, u32 width, u32 flags   (flags bit 0: poses present)
//! num_frames × height × width f32, row-major per frame
//! num_frames × (tx, ty, theta) f64                   (only when flagged)
//! ```

use std::borrow::Cow;
use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FrameSequence, GrayImage, ImageSequence, Pose2};
use crate::error::{Error, Result};

pub const SEQUENCE_MAGIC: &[u8; 8] = b"MSEQ0001";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_SCHEMA_VERSION: u32 = 1;
const FLAG_POSES: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub sequence_count: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub seed: Option<u64>,
    pub files: Vec<String>,
}

/// One stored sequence with optional ground-truth poses.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSequence {
    pub sequence: ImageSequence,
    pub poses: Option<Vec<Pose2>>,
}

pub fn encode_sequence(seq: &ImageSequence, poses: Option<&[Pose2]>) -> Result<Vec<u8>> {
    let frames = seq.frames();
    let (w, h) = frames
        .first()
        .map(|f| f.size())
        .ok_or_else(|| Error::invalid("cannot store an empty sequence"))?;
    if let Some(p) = poses {
        if p.len() != frames.len() {
            return Err(Error::invalid(format!(
                "{} poses for {} frames",
                p.len(),
                frames.len()
            )));
        }
    }
    let n = frames.len();
    let mut out = Vec::with_capacity(24 + n * w * h * 4 + n * 24);
    out.extend_from_slice(SEQUENCE_MAGIC);
    for v in [n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let flags = if poses.is_some() { FLAG_POSES } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for f in frames {
        for p in f.pixels() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    for p in poses.unwrap_or(&[]) {
        for v in [p.tx, p.ty, p.theta] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::corrupt(self.path, "unexpected end of file")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_sequence(bytes: &[u8], source_id: &str, path: &Path) -> Result<StoredSequence> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != SEQUENCE_MAGIC {
        return Err(Error::corrupt(path, "bad magic, expected MSEQ0001"));
    }
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let flags = r.u32()?;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::corrupt(path, "zero-sized sequence header"));
    }
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = r.take(w * h * 4)?;
        let pixels = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(GrayImage::new(w, h, pixels).map_err(|e| Error::corrupt(path, e.to_string()))?);
    }
    let poses = if flags & FLAG_POSES != 0 {
        let raw = r.take(n * 24)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some(
            vals.chunks_exact(3)
                .map(|v| Pose2 {
                    tx: v[0],
                    ty: v[1],
                    theta: v[2],
                })
                .collect(),
        )
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes after sequence data"));
    }
    let sequence = ImageSequence::from_frames(frames, source_id)
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(StoredSequence { sequence, poses })
}

pub fn write_sequence_file(
    path: &Path,
    seq: &ImageSequence,
    poses: Option<&[Pose2]>,
) -> Result<()> {
    let bytes = encode_sequence(seq, poses)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sequence_file(path: &Path) -> Result<StoredSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_sequence(&bytes, &id, path)
}

/// A stored sequence whose frames stay on disk until requested.
///
/// The header, file length and poses are checked when opened; each frame is
/// read with one positioned read.
#[derive(Debug, Clone)]
pub struct DiskSequence {
    path: PathBuf,
    id: String,
    len: usize,
    width: usize,
    height: usize,
    poses: Option<Vec<Pose2>>,
}

const HEADER_LEN: usize = 24;

impl DiskSequence {
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = [0u8; HEADER_LEN];
        f.read_exact(&mut head)
            .map_err(|_| Error::corrupt(path, "unexpected end of file"))?;
        if &head[..8] != SEQUENCE_MAGIC {
            return Err(Error::corrupt(path, "bad magic, expected MSEQ0001"));
        }
        let field =
            |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (n, h, w, flags) = (field(0), field(1), field(2), field(3) as u32);
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::corrupt(path, "zero-sized sequence header"));
        }
        let has_poses = flags & FLAG_POSES != 0;
        let expected = HEADER_LEN + n * h * w * 4 + if has_poses { n * 24 } else { 0 };
        let actual = f.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
        if actual != expected {
            return Err(Error::corrupt(
                path,
                format!("file is {actual} bytes, header implies {expected}"),
            ));
        }
        let poses = if has_poses {
            f.seek(SeekFrom::Start((HEADER_LEN + n * h * w * 4) as u64))
                .map_err(|e| Error::io(path, e))?;
            let mut raw = vec![0u8; n * 24];
            f.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
            Some(
                raw.chunks_exact(24)
                    .map(|c| {
                        let v =
                            |k: usize| f64::from_le_bytes(c[8 * k..8 * k + 8].try_into().unwrap());
                        Pose2 {
                            tx: v(0),
                            ty: v(1),
                            theta: v(2),
                        }
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self {
            path: path.to_path_buf(),
            id: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            len: n,
            width: w,
            height: h,
            poses,
        })
    }

    pub fn poses(&self) -> Option<&[Pose2]> {
        self.poses.as_deref()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl FrameSequence for DiskSequence {
    fn len(&self) -> usize {
        self.len
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn frame(&self, i: usize) -> Result<Cow<'_, GrayImage>> {
        if i >= self.len {
            return Err(Error::invalid(format!(
                "frame {i} out of range for sequence of length {}",
                self.len
            )));
        }
        let plane = self.width * self.height * 4;
        let mut f = fs::File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.seek(SeekFrom::Start((HEADER_LEN + i * plane) as u64))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut raw = vec![0u8; plane];
        f.read_exact(&mut raw)
            .map_err(|e| Error::io(&self.path, e))?;
        let pixels = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        GrayImage::new(self.width, self.height, pixels)
            .map(Cow::Owned)
            .map_err(|e| Error::corrupt(&self.path, e.to_string()))
    }

    fn source_id(&self) -> &str {
        &self.id
    }
}

/// Opens every sequence of a dataset directory without loading frames.
pub fn open_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<DiskSequence>)> {
    let m = read_manifest(dir)?;
    let seqs = m
        .files
        .iter()
        .map(|f| DiskSequence::open(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    if seqs
        .iter()
        .any(|s| s.frame_size() != (m.frame_width, m.frame_height))
    {
        return Err(Error::corrupt(
            dir,
            "sequence frame size disagrees with manifest",
        ));
    }
    Ok((m, seqs))
}

fn sequence_file_name(i: usize) -> String {
    format!("seq_{i:06}.mseq")
}

/// Writes every sequence plus `manifest.json` into `dir` (created if needed).
pub fn write_dataset<'a, I>(dir: &Path, seed: Option<u64>, sequences: I) -> Result<DatasetManifest>
where
    I: IntoIterator<Item = (&'a ImageSequence, Option<&'a [Pose2]>)>,
{
    write_dataset_with(
        dir,
        seed,
        sequences
            .into_iter()
            .map(|(s, p)| Ok((Cow::Borrowed(s), p.map(Cow::Borrowed)))),
    )
}

/// Like [`write_dataset`], but sequences are produced one at a time, so a
/// large dataset never has to be resident in memory.
pub fn write_dataset_with<'a, I>(
    dir: &Path,
    seed: Option<u64>,
    sequences: I,
) -> Result<DatasetManifest>
where
    I: IntoIterator<Item = Result<(Cow<'a, ImageSequence>, Option<Cow<'a, [Pose2]>>)>>,
{
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    for (i, item) in sequences.into_iter().enumerate() {
        let (seq, poses) = item?;
        let s = seq
            .frames()
            .first()
            .map(|f| f.size())
            .ok_or_else(|| Error::invalid("cannot store an empty sequence"))?;
        if *size.get_or_insert(s) != s {
            return Err(Error::invalid("dataset sequences differ in frame size"));
        }
        let name = sequence_file_name(i);
        write_sequence_file(&dir.join(&name), &seq, poses.as_deref())?;
        files.push(name);
    }
    let (frame_width, frame_height) = size.unwrap_or((0, 0));
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        sequence_count: files.len(),
        frame_width,
        frame_height,
        seed,
        files,
    };
    write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    if m.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::VersionMismatch {
            path,
            expected: DATASET_SCHEMA_VERSION,
            found: m.schema_version,
        });
    }
    if m.files.len() != m.sequence_count {
        return Err(Error::corrupt(
            &path,
            format!(
                "manifest lists {} files but sequence_count is {}",
                m.files.len(),
                m.sequence_count
            ),
        ));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<StoredSequence>)> {
    let m = read_manifest(dir)?;
    let seqs = m
        .files
        .iter()
        .map(|f| read_sequence_file(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    for s in &seqs {
        if s.sequence.frames()[0].size() != (m.frame_width, m.frame_height) {
            return Err(Error::corrupt(
                dir,
                "sequence frame size disagrees with manifest",
            ));
        }
    }
    Ok((m, seqs))
}

/// Serializes `value` as pretty JSON via a temp file and rename.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        path.with_file_name(name)
    };
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

//! Scene and proposal files.
//!
//! Scenes use a little-endian binary layout (`.sgpc`):
//!
//! | bytes | field                                            |
//! |-------|--------------------------------------------------|
//! | 4     | magic `SGPC`                                     |
//! | 4     | version (u32, currently 1)                       |
//! | 4     | flags: bit 0 colors, 1 ground truth, 2 scores, 3 offsets |
//! | 8     | point count N (u64)                              |
//! | 4     | class count C (u32)                              |
//!
//! followed by the present arrays in this order: positions `N x 3` f32,
//! colors `N x 3` f32, scores `N x C` f32, offsets `N x 3` f32,
//! semantic labels `N` i32, instance ids `N` i32.
//!
//! Files ending in `.txt` hold the same content as text: a header line
//! `sgpc 1 <N> <C> [colors] [gt] [scores] [offsets]` and one line per point
//! with the columns in binary order. Lines starting with `#` are comments.
//!
//! Proposal files (`.sgpr`) start with magic `SGPR`, version u32 and the
//! proposal count u64; each proposal is class u32, confidence f64, member
//! count u64 and the member indices as u32. `.json` proposal files hold the
//! serialized `ProposalSet` instead.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grouping::{InstanceProposal, ProposalSet};
use crate::scene::Scene;

pub const SCENE_MAGIC: &[u8; 4] = b"SGPC";
pub const PROPOSAL_MAGIC: &[u8; 4] = b"SGPR";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_COLORS: u32 = 1;
const FLAG_GT: u32 = 1 << 1;
const FLAG_SCORES: u32 = 1 << 2;
const FLAG_OFFSETS: u32 = 1 << 3;
const HEADER_LEN: usize = 24;

fn is_text(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("txt"))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path)?;
    if is_text(path) {
        let text = std::str::from_utf8(&bytes).map_err(|e| {
            Error::format(e.valid_up_to() as u64, "text scene is not valid UTF-8")
        })?;
        parse_scene_text(text)
    } else {
        decode_scene(&bytes)
    }
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    let bytes = if is_text(path) {
        scene_to_text(scene)?.into_bytes()
    } else {
        encode_scene(scene)?
    };
    write_atomic(path, &bytes)
}

fn flags(scene: &Scene) -> Result<u32> {
    let gt = match (&scene.gt_semantic, &scene.gt_instance) {
        (Some(_), Some(_)) => true,
        (None, None) => false,
        _ => {
            return Err(Error::invalid_data(
                "semantic and instance ground truth must be stored together",
            ))
        }
    };
    let mut f = 0;
    if scene.colors.is_some() {
        f |= FLAG_COLORS;
    }
    if gt {
        f |= FLAG_GT;
    }
    if scene.scores.is_some() {
        f |= FLAG_SCORES;
    }
    if scene.offsets.is_some() {
        f |= FLAG_OFFSETS;
    }
    Ok(f)
}

pub fn encode_scene(scene: &Scene) -> Result<Vec<u8>> {
    scene.validate()?;
    let flags = flags(scene)?;
    let n = scene.len();
    let c = scene.num_classes;
    let mut out = Vec::with_capacity(HEADER_LEN + n * (6 + c + 5) * 4);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    let floats = |out: &mut Vec<u8>, v: &[f32]| {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    floats(&mut out, scene.positions.as_flattened());
    if let Some(colors) = &scene.colors {
        floats(&mut out, colors.as_flattened());
    }
    if let Some(scores) = &scene.scores {
        floats(&mut out, scores);
    }
    if let Some(offsets) = &scene.offsets {
        floats(&mut out, offsets.as_flattened());
    }
    if let (Some(sem), Some(inst)) = (&scene.gt_semantic, &scene.gt_instance) {
        for x in sem.iter().chain(inst) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < len {
            return Err(Error::format(
                self.pos as u64,
                format!("{what} needs {len} bytes, only {left} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn array_len(&self, count: u64, width: u64, what: &str) -> Result<usize> {
        count
            .checked_mul(width)
            .and_then(|b| usize::try_from(b).ok())
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} size overflows")))
    }

    fn f32s(&mut self, count: u64, what: &str) -> Result<Vec<f32>> {
        let len = self.array_len(count, 4, what)?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn i32s(&mut self, count: u64, what: &str) -> Result<Vec<i32>> {
        let len = self.array_len(count, 4, what)?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, count: u64, what: &str) -> Result<Vec<u32>> {
        let len = self.array_len(count, 4, what)?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn triples(v: Vec<f32>) -> Vec<[f32; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn check_magic(r: &mut Reader, magic: &[u8; 4], kind: &str) -> Result<()> {
    let m = r.take(4, "magic")?;
    if m != magic {
        return Err(Error::format(0, format!("not a {kind} file (magic {m:?})")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported {kind} version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, SCENE_MAGIC, "scene")?;
    let flags = r.u32("flags")?;
    if flags & !(FLAG_COLORS | FLAG_GT | FLAG_SCORES | FLAG_OFFSETS) != 0 {
        return Err(Error::format(8, format!("unknown flag bits {flags:#x}")));
    }
    let n = r.u64("point count")?;
    let c = r.u32("class count")?;
    let c_len = u64::from(c);
    let n3 = n.checked_mul(3).ok_or_else(|| Error::format(12, "point count overflows"))?;

    let positions = triples(r.f32s(n3, "positions")?);
    let colors = if flags & FLAG_COLORS != 0 {
        Some(triples(r.f32s(n3, "colors")?))
    } else {
        None
    };
    let scores = if flags & FLAG_SCORES != 0 {
        let count = n
            .checked_mul(c_len)
            .ok_or_else(|| Error::format(r.pos as u64, "scores size overflows"))?;
        Some(r.f32s(count, "scores")?)
    } else {
        None
    };
    let offsets = if flags & FLAG_OFFSETS != 0 {
        Some(triples(r.f32s(n3, "offsets")?))
    } else {
        None
    };
    let (gt_semantic, gt_instance) = if flags & FLAG_GT != 0 {
        (Some(r.i32s(n, "gt_semantic")?), Some(r.i32s(n, "gt_instance")?))
    } else {
        (None, None)
    };
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after the payload", bytes.len() - r.pos),
        ));
    }
    let scene = Scene {
        positions,
        colors,
        num_classes: c as usize,
        scores,
        offsets,
        gt_semantic,
        gt_instance,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn scene_to_text(scene: &Scene) -> Result<String> {
    use std::fmt::Write as _;
    scene.validate()?;
    let flags = flags(scene)?;
    let mut out = format!("sgpc {FORMAT_VERSION} {} {}", scene.len(), scene.num_classes);
    for (bit, name) in [
        (FLAG_COLORS, "colors"),
        (FLAG_GT, "gt"),
        (FLAG_SCORES, "scores"),
        (FLAG_OFFSETS, "offsets"),
    ] {
        if flags & bit != 0 {
            out.push(' ');
            out.push_str(name);
        }
    }
    out.push('\n');
    let c = scene.num_classes;
    for i in 0..scene.len() {
        let mut cols: Vec<String> = scene.positions[i].iter().map(f32::to_string).collect();
        if let Some(colors) = &scene.colors {
            cols.extend(colors[i].iter().map(f32::to_string));
        }
        if let Some(scores) = &scene.scores {
            cols.extend(scores[i * c..(i + 1) * c].iter().map(f32::to_string));
        }
        if let Some(offsets) = &scene.offsets {
            cols.extend(offsets[i].iter().map(f32::to_string));
        }
        if let (Some(sem), Some(inst)) = (&scene.gt_semantic, &scene.gt_instance) {
            cols.push(sem[i].to_string());
            cols.push(inst[i].to_string());
        }
        writeln!(out, "{}", cols.join(" ")).unwrap();
    }
    Ok(out)
}

pub fn parse_scene_text(text: &str) -> Result<Scene> {
    let mut lines = text
        .split_inclusive('\n')
        .scan(0usize, |offset, line| {
            let start = *offset;
            *offset += line.len();
            Some((start, line.trim()))
        })
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (at, header) = lines
        .next()
        .ok_or_else(|| Error::format(0, "missing header line"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() < 4 || head[0] != "sgpc" {
        return Err(Error::format(at as u64, "header must be `sgpc <version> <N> <C> [fields]`"));
    }
    let int = |s: &str, what: &str| {
        s.parse::<u64>()
            .map_err(|_| Error::format(at as u64, format!("bad {what} `{s}` in header")))
    };
    if int(head[1], "version")? != u64::from(FORMAT_VERSION) {
        return Err(Error::format(at as u64, format!("unsupported version {}", head[1])));
    }
    let n = int(head[2], "point count")? as usize;
    let c = int(head[3], "class count")? as usize;
    let mut flags = 0;
    for field in &head[4..] {
        flags |= match *field {
            "colors" => FLAG_COLORS,
            "gt" => FLAG_GT,
            "scores" => FLAG_SCORES,
            "offsets" => FLAG_OFFSETS,
            other => return Err(Error::format(at as u64, format!("unknown field `{other}`"))),
        };
    }
    let has = |f: u32| flags & f != 0;
    let width = 3
        + if has(FLAG_COLORS) { 3 } else { 0 }
        + if has(FLAG_SCORES) { c } else { 0 }
        + if has(FLAG_OFFSETS) { 3 } else { 0 }
        + if has(FLAG_GT) { 2 } else { 0 };

    let mut scene = Scene::new(Vec::with_capacity(n), c);
    let mut colors = Vec::new();
    let mut scores = Vec::new();
    let mut offsets = Vec::new();
    let mut sem = Vec::new();
    let mut inst = Vec::new();
    for i in 0..n {
        let (at, line) = lines
            .next()
            .ok_or_else(|| Error::format(text.len() as u64, format!("expected {n} points, found {i}")))?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != width {
            return Err(Error::format(
                at as u64,
                format!("point {i} has {} columns, expected {width}", cols.len()),
            ));
        }
        let float = |s: &str| {
            s.parse::<f32>()
                .map_err(|_| Error::format(at as u64, format!("point {i}: bad number `{s}`")))
        };
        let label = |s: &str| {
            s.parse::<i32>()
                .map_err(|_| Error::format(at as u64, format!("point {i}: bad label `{s}`")))
        };
        let mut col = cols.into_iter();
        let triple = |col: &mut std::vec::IntoIter<&str>| -> Result<[f32; 3]> {
            Ok([float(col.next().unwrap())?, float(col.next().unwrap())?, float(col.next().unwrap())?])
        };
        scene.positions.push(triple(&mut col)?);
        if has(FLAG_COLORS) {
            colors.push(triple(&mut col)?);
        }
        if has(FLAG_SCORES) {
            for _ in 0..c {
                scores.push(float(col.next().unwrap())?);
            }
        }
        if has(FLAG_OFFSETS) {
            offsets.push(triple(&mut col)?);
        }
        if has(FLAG_GT) {
            sem.push(label(col.next().unwrap())?);
            inst.push(label(col.next().unwrap())?);
        }
    }
    if let Some((at, _)) = lines.next() {
        return Err(Error::format(at as u64, format!("more than {n} point lines")));
    }
    scene.colors = has(FLAG_COLORS).then_some(colors);
    scene.scores = has(FLAG_SCORES).then_some(scores);
    scene.offsets = has(FLAG_OFFSETS).then_some(offsets);
    if has(FLAG_GT) {
        scene.gt_semantic = Some(sem);
        scene.gt_instance = Some(inst);
    }
    scene.validate()?;
    Ok(scene)
}

pub fn encode_proposals(proposals: &ProposalSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PROPOSAL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(proposals.len() as u64).to_le_bytes());
    for p in proposals {
        out.extend_from_slice(&p.class_id.to_le_bytes());
        out.extend_from_slice(&p.confidence.to_le_bytes());
        out.extend_from_slice(&(p.members.len() as u64).to_le_bytes());
        for m in &p.members {
            out.extend_from_slice(&m.to_le_bytes());
        }
    }
    out
}

pub fn decode_proposals(bytes: &[u8]) -> Result<ProposalSet> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, PROPOSAL_MAGIC, "proposal")?;
    let count = r.u64("proposal count")?;
    let mut proposals = Vec::new();
    for i in 0..count {
        let what = format!("proposal {i}");
        let class_id = r.u32(&what)?;
        let confidence = r.f64(&what)?;
        let len = r.u64(&what)?;
        let members = r.u32s(len, &format!("proposal {i} members"))?;
        if members.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format(r.pos as u64, format!("{what} members are not strictly ascending")));
        }
        proposals.push(InstanceProposal {
            class_id,
            members,
            confidence,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after the proposals", bytes.len() - r.pos),
        ));
    }
    Ok(ProposalSet::new(proposals))
}

pub fn read_proposals(path: &Path) -> Result<ProposalSet> {
    let bytes = fs::read(path)?;
    if is_json(path) {
        let set: ProposalSet = serde_json::from_slice(&bytes).map_err(|e| {
            Error::format(0, format!("proposal JSON line {} column {}: {e}", e.line(), e.column()))
        })?;
        Ok(ProposalSet::new(set.proposals))
    } else {
        decode_proposals(&bytes)
    }
}

pub fn write_proposals(proposals: &ProposalSet, path: &Path) -> Result<()> {
    let bytes = if is_json(path) {
        serde_json::to_vec_pretty(proposals).map_err(|e| Error::invalid_data(e.to_string()))?
    } else {
        encode_proposals(proposals)
    };
    write_atomic(path, &bytes)
}

/// Serializes `value` as pretty JSON and writes it atomically.
pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::invalid_data(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

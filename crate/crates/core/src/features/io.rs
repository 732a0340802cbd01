//! Item feature files (binary) and event files (JSON lines).
//!
//! Feature file layout, little-endian:
//! `"GRIF" | version u32 | count u64 | content_dim u32` followed by `count`
//! rows of `item_id u64 | item_type u8 | content f32 × content_dim`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{InteractionEvent, ItemFeature, ItemType};

pub const FEATURE_MAGIC: &[u8; 4] = b"GRIF";
const FEATURE_VERSION: u32 = 1;

pub fn write_item_features<W: Write>(mut w: W, items: &[ItemFeature]) -> Result<()> {
    let dim = items.first().map_or(0, |i| i.content.len());
    if let Some(bad) = items.iter().find(|i| i.content.len() != dim) {
        return Err(Error::validation(format!("item {} has content dim {}, expected {dim}", bad.item_id, bad.content.len())));
    }
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(items.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for item in items {
        w.write_all(&item.item_id.to_le_bytes())?;
        w.write_all(&[item.item_type.code()])?;
        for v in &item.content {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("item feature file truncated"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_item_features<R: Read>(mut r: R) -> Result<Vec<ItemFeature>> {
    if &read_exact::<_, 4>(&mut r)? != FEATURE_MAGIC {
        return Err(Error::format("not an item feature file (bad magic)"));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != FEATURE_VERSION {
        return Err(Error::format(format!("unsupported item feature file version {version}")));
    }
    let count = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let dim = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut items = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let item_id = u64::from_le_bytes(read_exact(&mut r)?);
        let item_type = ItemType::from_code(read_exact::<_, 1>(&mut r)?[0]).map_err(|e| Error::format(e.to_string()))?;
        let content = (0..dim).map(|_| Ok(f32::from_le_bytes(read_exact(&mut r)?))).collect::<Result<_>>()?;
        items.push(ItemFeature { item_id, item_type, content });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after item features"));
    }
    Ok(items)
}

pub fn save_item_features(path: impl AsRef<Path>, items: &[ItemFeature]) -> Result<()> {
    write_item_features(BufWriter::new(File::create(path)?), items)
}

pub fn load_item_features(path: impl AsRef<Path>) -> Result<Vec<ItemFeature>> {
    read_item_features(BufReader::new(File::open(path)?))
}

pub fn write_events<W: Write>(mut w: W, events: &[InteractionEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads JSON-lines events; blank lines are skipped. Errors carry the line number.
pub fn read_events<R: BufRead>(r: R) -> Result<Vec<InteractionEvent>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| Error::format(format!("event line {}: {e}", n + 1)))?;
        out.push(e);
    }
    Ok(out)
}

pub fn save_events(path: impl AsRef<Path>, events: &[InteractionEvent]) -> Result<()> {
    write_events(BufWriter::new(File::create(path)?), events)
}

pub fn load_events(path: impl AsRef<Path>) -> Result<Vec<InteractionEvent>> {
    read_events(BufReader::new(File::open(path)?))
}

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::InteractionEvent;

pub const RECORD_PAYLOAD_LEN: usize = 40;
const HEADER_LEN: usize = 8;

pub fn encode_record(e: &InteractionEvent) -> Vec<u8> {
    let mut payload = Vec::with_capacity(RECORD_PAYLOAD_LEN);
    payload.extend_from_slice(&e.user_id.to_le_bytes());
    payload.extend_from_slice(&e.item_id.to_le_bytes());
    payload.extend_from_slice(&(e.action as u32).to_le_bytes());
    payload.extend_from_slice(&(e.surface as u32).to_le_bytes());
    payload.extend_from_slice(&e.ts.to_le_bytes());
    payload.extend_from_slice(&e.feed_id.to_le_bytes());
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decodes one record from the front of `buf`: `Ok(None)` for a torn or
/// corrupt record, otherwise the event and the bytes consumed.
pub fn decode_record(buf: &[u8]) -> Result<Option<(InteractionEvent, usize)>> {
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u32::from_le_bytes(buf[0..4].try_into().expect("4 bytes")) as usize;
    let crc = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    let Some(payload) = buf.get(HEADER_LEN..HEADER_LEN + len) else {
        return Ok(None);
    };
    if crc32fast::hash(payload) != crc {
        return Ok(None);
    }
    if len != RECORD_PAYLOAD_LEN {
        return Err(Error::format(format!("unsupported realtime record length {len}")));
    }
    let u64_at = |i: usize| u64::from_le_bytes(payload[i..i + 8].try_into().expect("8 bytes"));
    let u32_at = |i: usize| u32::from_le_bytes(payload[i..i + 4].try_into().expect("4 bytes"));
    let e = InteractionEvent {
        user_id: u64_at(0),
        item_id: u64_at(8),
        action: u32_at(16) as usize,
        surface: u32_at(20) as usize,
        ts: u64_at(24) as i64,
        feed_id: u64_at(32),
    };
    Ok(Some((e, HEADER_LEN + len)))
}

/// Append-only, length-prefixed, checksummed event log.
pub struct RealtimeLog {
    out: BufWriter<File>,
}

impl RealtimeLog {
    pub fn create(path: impl AsRef<Path>) -> Result<RealtimeLog> {
        Ok(RealtimeLog { out: BufWriter::new(File::create(path)?) })
    }

    /// Replays the valid prefix and truncates anything after it.
    pub fn open(path: impl AsRef<Path>) -> Result<(RealtimeLog, Vec<InteractionEvent>)> {
        let mut f = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        let mut events = Vec::new();
        let mut pos = 0;
        while let Some((e, used)) = decode_record(&buf[pos..])? {
            events.push(e);
            pos += used;
        }
        if pos < buf.len() {
            log::warn!("realtime log: dropping {} bytes after the last valid record", buf.len() - pos);
            f.set_len(pos as u64)?;
            f.sync_all()?;
        }
        f.seek(SeekFrom::Start(pos as u64))?;
        Ok((RealtimeLog { out: BufWriter::new(f) }, events))
    }

    pub fn append(&mut self, e: &InteractionEvent) -> Result<()> {
        self.out.write_all(&encode_record(e))?;
        Ok(())
    }

    /// Flushes buffered records and syncs them to disk.
    pub fn sync(&mut self) -> Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn records_round_trip(user in any::<u64>(), item in any::<u64>(), action in 0usize..100, ts in any::<i64>(), feed in any::<u64>()) {
            let e = InteractionEvent { user_id: user, item_id: item, action, surface: action % 3, ts, feed_id: feed };
            let bytes = encode_record(&e);
            prop_assert_eq!(decode_record(&bytes).unwrap(), Some((e, bytes.len())));
            for cut in 0..bytes.len() {
                prop_assert_eq!(decode_record(&bytes[..cut]).unwrap(), None);
            }
        }
    }

    #[test]
    fn flipped_bit_fails_the_checksum() {
        let e = InteractionEvent { user_id: 1, item_id: 2, action: 0, surface: 0, ts: 3, feed_id: 4 };
        let mut bytes = encode_record(&e);
        bytes[20] ^= 1;
        assert_eq!(decode_record(&bytes).unwrap(), None);
    }
}

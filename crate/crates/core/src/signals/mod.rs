//! User signal storage: an immutable batch segment plus an append-only
//! realtime log, merged and deduplicated on read.
//!
//! Layout of a store directory:
//! * `batch.jsonl`: events sorted by `(user_id, ts)`, one JSON object per line
//! * `batch.idx.json`: `{cutoff, users: [[user_id, byte_offset, byte_len], ...]}`
//! * `realtime.log`: records `len u32 | crc32 u32 | payload`, little-endian,
//!   payload = `user u64 | item u64 | action u32 | surface u32 | ts i64 | feed u64`

mod log;

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

pub use self::log::{decode_record, encode_record, RealtimeLog, RECORD_PAYLOAD_LEN};
use crate::error::{Error, Result};
use crate::events::{surfaces, InteractionEvent, ItemFeature, ItemType, SurfaceId};

pub const BATCH_FILE: &str = "batch.jsonl";
pub const INDEX_FILE: &str = "batch.idx.json";
pub const REALTIME_FILE: &str = "realtime.log";

/// Gap that starts a new feed session when sessionizing raw logs.
pub const SESSION_GAP_SECS: i64 = 30 * 60;

/// Assigns `feed_id`s by splitting each user's chronological events at gaps
/// longer than `gap_secs`. Ids are dense and globally unique.
pub fn sessionize(events: &mut [InteractionEvent], gap_secs: i64) {
    events.sort_by_key(|e| (e.user_id, e.ts));
    let mut feed = 0u64;
    for i in 0..events.len() {
        if i == 0 || events[i].user_id != events[i - 1].user_id || events[i].ts - events[i - 1].ts > gap_secs {
            feed += 1;
        }
        events[i].feed_id = feed;
    }
}

/// Bounds used to reject malformed appends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLimits {
    pub num_actions: usize,
    pub num_surfaces: usize,
}

impl EventLimits {
    pub fn check(&self, e: &InteractionEvent) -> Result<()> {
        if e.action >= self.num_actions {
            return Err(Error::validation(format!("action {} out of range 0..{}", e.action, self.num_actions)));
        }
        if e.surface >= self.num_surfaces {
            return Err(Error::validation(format!("surface {} out of range 0..{}", e.surface, self.num_surfaces)));
        }
        if e.ts < 0 {
            return Err(Error::validation("negative timestamp"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct BatchIndex {
    cutoff: i64,
    users: Vec<(u64, u64, u64)>,
}

/// Merge of two sources: dedup on `(item, action, ts)`, chronological order
/// (ties by key), and only the `max_len` most recent events.
pub fn merge_signals(batch: &[InteractionEvent], realtime: &[InteractionEvent], max_len: usize) -> Vec<InteractionEvent> {
    let mut seen = std::collections::HashSet::new();
    let mut out: Vec<InteractionEvent> = batch.iter().chain(realtime).filter(|e| seen.insert(e.dedup_key())).copied().collect();
    out.sort_by_key(|e| (e.ts, e.item_id, e.action));
    let drop = out.len().saturating_sub(max_len);
    out.drain(..drop);
    out
}

pub struct SignalStore {
    dir: PathBuf,
    limits: EventLimits,
    cutoff: i64,
    offsets: HashMap<u64, (u64, u64)>,
    realtime: RwLock<HashMap<u64, Vec<InteractionEvent>>>,
    log: Mutex<RealtimeLog>,
}

impl SignalStore {
    /// Writes a new store: events at or before `cutoff` go to the batch
    /// segment, later ones to the realtime log.
    pub fn create(dir: impl AsRef<Path>, events: &[InteractionEvent], cutoff: i64, limits: EventLimits) -> Result<SignalStore> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for e in events {
            limits.check(e)?;
        }
        let (batch, realtime): (Vec<_>, Vec<_>) = events.iter().copied().partition(|e| e.ts <= cutoff);
        write_batch(dir, &batch, cutoff)?;
        let mut log = RealtimeLog::create(dir.join(REALTIME_FILE))?;
        for e in &realtime {
            log.append(e)?;
        }
        log.sync()?;
        drop(log);
        SignalStore::open(dir, limits)
    }

    /// Opens an existing store, replaying the realtime log. A torn or
    /// corrupt tail record is dropped and the log truncated before it.
    pub fn open(dir: impl AsRef<Path>, limits: EventLimits) -> Result<SignalStore> {
        let dir = dir.as_ref().to_path_buf();
        let index: BatchIndex = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
        let offsets = index.users.iter().map(|&(u, o, l)| (u, (o, l))).collect();
        let (log, events) = RealtimeLog::open(dir.join(REALTIME_FILE))?;
        let mut realtime: HashMap<u64, Vec<InteractionEvent>> = HashMap::new();
        for e in events {
            realtime.entry(e.user_id).or_default().push(e);
        }
        Ok(SignalStore { dir, limits, cutoff: index.cutoff, offsets, realtime: RwLock::new(realtime), log: Mutex::new(log) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn cutoff(&self) -> i64 {
        self.cutoff
    }

    pub fn limits(&self) -> EventLimits {
        self.limits
    }

    /// Users present in either segment, ascending.
    pub fn users(&self) -> Vec<u64> {
        let rt = self.realtime.read().expect("realtime lock poisoned");
        let set: BTreeSet<u64> = self.offsets.keys().chain(rt.keys()).copied().collect();
        set.into_iter().collect()
    }

    fn batch_events(&self, user_id: u64) -> Result<Vec<InteractionEvent>> {
        let Some(&(offset, len)) = self.offsets.get(&user_id) else {
            return Ok(Vec::new());
        };
        let mut f = File::open(self.dir.join(BATCH_FILE))?;
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0; len as usize];
        f.read_exact(&mut buf)?;
        buf.lines().map(|l| Ok(serde_json::from_str(&l?)?)).collect()
    }

    /// Merged history of `user_id` up to `now`, at most `max_len` events.
    /// Unknown users get an empty history.
    pub fn read(&self, user_id: u64, now: i64, max_len: usize) -> Result<Vec<InteractionEvent>> {
        let mut batch = self.batch_events(user_id)?;
        batch.retain(|e| e.ts <= now);
        let rt: Vec<InteractionEvent> = {
            let guard = self.realtime.read().expect("realtime lock poisoned");
            guard.get(&user_id).map(|v| v.iter().filter(|e| e.ts <= now).copied().collect()).unwrap_or_default()
        };
        Ok(merge_signals(&batch, &rt, max_len))
    }

    /// Durably appends one event; it is visible to reads once this returns.
    pub fn append(&self, event: InteractionEvent) -> Result<()> {
        self.limits.check(&event)?;
        let mut log = self.log.lock().expect("log lock poisoned");
        log.append(&event)?;
        log.sync()?;
        self.realtime.write().expect("realtime lock poisoned").entry(event.user_id).or_default().push(event);
        Ok(())
    }

    /// Folds realtime events at or before `new_cutoff` into a new batch
    /// segment and rewrites the log with the rest.
    pub fn compact(self, new_cutoff: i64) -> Result<SignalStore> {
        if new_cutoff < self.cutoff {
            return Err(Error::validation(format!("new cutoff {new_cutoff} precedes current cutoff {}", self.cutoff)));
        }
        let mut all = Vec::new();
        for user in self.users() {
            all.extend(self.read(user, i64::MAX, usize::MAX)?);
        }
        let (dir, limits) = (self.dir.clone(), self.limits);
        drop(self);
        let (batch, rest): (Vec<_>, Vec<_>) = all.into_iter().partition(|e| e.ts <= new_cutoff);
        write_batch(&dir, &batch, new_cutoff)?;
        let tmp = dir.join(format!("{REALTIME_FILE}.tmp"));
        let mut log = RealtimeLog::create(&tmp)?;
        for e in &rest {
            log.append(e)?;
        }
        log.sync()?;
        drop(log);
        fs::rename(&tmp, dir.join(REALTIME_FILE))?;
        SignalStore::open(dir, limits)
    }
}

fn write_batch(dir: &Path, events: &[InteractionEvent], cutoff: i64) -> Result<()> {
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| (e.user_id, e.ts, e.item_id, e.action));
    let mut body = Vec::new();
    let mut index = BatchIndex { cutoff, users: Vec::new() };
    for e in &sorted {
        let start = body.len() as u64;
        serde_json::to_writer(&mut body, e)?;
        body.push(b'\n');
        match index.users.last_mut() {
            Some(last) if last.0 == e.user_id => last.2 = body.len() as u64 - last.1,
            _ => index.users.push((e.user_id, start, body.len() as u64 - start)),
        }
    }
    let tmp = dir.join(format!("{BATCH_FILE}.tmp"));
    let mut f = File::create(&tmp)?;
    f.write_all(&body)?;
    f.sync_all()?;
    let tmp_idx = dir.join(format!("{INDEX_FILE}.tmp"));
    fs::write(&tmp_idx, serde_json::to_vec(&index)?)?;
    fs::rename(&tmp, dir.join(BATCH_FILE))?;
    fs::rename(&tmp_idx, dir.join(INDEX_FILE))?;
    Ok(())
}

/// Appends the request context (a search query or a closeup pin) as the
/// final event. Homefeed takes no context.
pub fn context_inject(
    events: &[InteractionEvent],
    user_id: u64,
    context: Option<&ItemFeature>,
    surface: SurfaceId,
    now: i64,
) -> Result<Vec<InteractionEvent>> {
    let mut out = events.to_vec();
    let Some(item) = context else {
        return Ok(out);
    };
    let expected = match surface {
        surfaces::SEARCH => ItemType::Query,
        surfaces::RELATED_PINS => ItemType::Pin,
        other => return Err(Error::validation(format!("surface {other} takes no request context"))),
    };
    if item.item_type != expected {
        return Err(Error::validation(format!("context on surface {surface} must be a {expected}, got a {}", item.item_type)));
    }
    let ts = out.last().map_or(now, |e| e.ts.max(now));
    let feed_id = out.last().map_or(0, |e| e.feed_id);
    out.push(InteractionEvent { user_id, item_id: item.item_id, action: 0, surface, ts, feed_id });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const LIMITS: EventLimits = EventLimits { num_actions: 3, num_surfaces: 3 };

    fn ev(user: u64, item: u64, ts: i64) -> InteractionEvent {
        InteractionEvent { user_id: user, item_id: item, action: 0, surface: 0, ts, feed_id: 0 }
    }

    fn reference(batch: &[InteractionEvent], rt: &[InteractionEvent]) -> Vec<InteractionEvent> {
        let set: BTreeSet<(i64, u64, usize)> = batch.iter().chain(rt).map(|e| (e.ts, e.item_id, e.action)).collect();
        set.into_iter().map(|(ts, item, action)| InteractionEvent { action, ..ev(1, item, ts) }).collect()
    }

    #[test]
    fn merge_matches_set_reference_on_fuzzed_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let pool: Vec<InteractionEvent> = (0..rng.random_range(0..30))
                .map(|_| InteractionEvent { action: rng.random_range(0..2), ..ev(1, rng.random_range(0..6), rng.random_range(0..20)) })
                .collect();
            let batch: Vec<_> = pool.iter().filter(|_| rng.random_bool(0.6)).copied().collect();
            let rt: Vec<_> = pool.iter().filter(|_| rng.random_bool(0.6)).copied().collect();
            let merged = merge_signals(&batch, &rt, usize::MAX);
            assert_eq!(merged, reference(&batch, &rt));
            assert!(merged.windows(2).all(|w| (w[0].ts, w[0].item_id, w[0].action) < (w[1].ts, w[1].item_id, w[1].action)));
        }
    }

    #[test]
    fn merge_keeps_the_most_recent() {
        let batch: Vec<_> = (0..10).map(|i| ev(1, i, i as i64)).collect();
        let m = merge_signals(&batch, &[], 3);
        assert_eq!(m.iter().map(|e| e.ts).collect::<Vec<_>>(), vec![7, 8, 9]);
    }

    #[test]
    fn batch_and_realtime_merge_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let events = vec![ev(1, 10, 100), ev(1, 11, 200), ev(2, 12, 150), ev(1, 13, 300), ev(3, 14, 400)];
        let store = SignalStore::create(dir.path(), &events, 250, LIMITS).unwrap();
        assert_eq!(store.read(1, i64::MAX, 128).unwrap().len(), 3);
        assert_eq!(store.read(3, i64::MAX, 128).unwrap(), vec![ev(3, 14, 400)]);
        assert_eq!(store.read(1, 250, 128).unwrap().len(), 2);
        assert!(store.read(99, i64::MAX, 128).unwrap().is_empty());
        // Duplicate of a batch event.
        store.append(ev(1, 10, 100)).unwrap();
        store.append(ev(1, 15, 500)).unwrap();
        let h = store.read(1, i64::MAX, 128).unwrap();
        assert_eq!(h.iter().map(|e| e.item_id).collect::<Vec<_>>(), vec![10, 11, 13, 15]);
        assert_eq!(store.users(), vec![1, 2, 3]);
    }

    #[test]
    fn malformed_append_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = SignalStore::create(dir.path(), &[], 0, LIMITS).unwrap();
        let err = store.append(InteractionEvent { action: 7, ..ev(1, 1, 1) }).unwrap_err();
        assert!(err.to_string().contains("action 7"), "{err}");
    }

    #[test]
    fn appends_survive_reopen_and_compaction() {
        let dir = tempfile::tempdir().unwrap();
        let store = SignalStore::create(dir.path(), &[ev(1, 1, 10)], 50, LIMITS).unwrap();
        for i in 0..5 {
            store.append(ev(1, 100 + i, 60 + i as i64)).unwrap();
        }
        drop(store);
        let store = SignalStore::open(dir.path(), LIMITS).unwrap();
        let before = store.read(1, i64::MAX, 128).unwrap();
        assert_eq!(before.len(), 6);
        let store = store.compact(62).unwrap();
        assert_eq!(store.cutoff(), 62);
        assert_eq!(store.read(1, i64::MAX, 128).unwrap(), before);
        let (_, rest) = RealtimeLog::open(dir.path().join(REALTIME_FILE)).unwrap();
        assert_eq!(rest.len(), 2);
        assert!(store.compact(10).is_err());
    }

    #[test]
    fn torn_tail_record_is_dropped_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let store = SignalStore::create(dir.path(), &[], 0, LIMITS).unwrap();
        for i in 0..4 {
            store.append(ev(1, i, 10 + i as i64)).unwrap();
        }
        drop(store);
        let path = dir.path().join(REALTIME_FILE);
        let len = fs::metadata(&path).unwrap().len();
        let f = fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 5).unwrap();
        drop(f);
        let store = SignalStore::open(dir.path(), LIMITS).unwrap();
        assert_eq!(store.read(1, i64::MAX, 128).unwrap().len(), 3);
        // The log was repaired, so new appends land after the last good record.
        store.append(ev(1, 9, 99)).unwrap();
        drop(store);
        let store = SignalStore::open(dir.path(), LIMITS).unwrap();
        assert_eq!(store.read(1, i64::MAX, 128).unwrap().len(), 4);
    }

    #[test]
    fn sessionize_splits_on_long_gaps() {
        let mut events = vec![ev(1, 1, 0), ev(1, 2, 100), ev(1, 3, 100 + SESSION_GAP_SECS + 1), ev(2, 4, 5)];
        sessionize(&mut events, SESSION_GAP_SECS);
        let feeds: Vec<u64> = events.iter().map(|e| e.feed_id).collect();
        assert_eq!(feeds, vec![1, 1, 2, 3]);
    }

    #[test]
    fn context_rules() {
        let hist = vec![ev(1, 1, 10)];
        let query = ItemFeature { item_id: 77, item_type: ItemType::Query, content: vec![0.0; 2] };
        let pin = ItemFeature { item_id: 78, item_type: ItemType::Pin, content: vec![0.0; 2] };
        let s = context_inject(&hist, 1, Some(&query), surfaces::SEARCH, 20).unwrap();
        assert_eq!(s.last().unwrap().item_id, 77);
        assert_eq!(s.last().unwrap().ts, 20);
        let r = context_inject(&hist, 1, Some(&pin), surfaces::RELATED_PINS, 20).unwrap();
        assert_eq!(r.last().unwrap().item_id, 78);
        assert_eq!(context_inject(&hist, 1, None, surfaces::HOMEFEED, 20).unwrap(), hist);
        assert!(context_inject(&hist, 1, Some(&pin), surfaces::SEARCH, 20).is_err());
        assert!(context_inject(&hist, 1, Some(&query), surfaces::HOMEFEED, 20).is_err());
    }
}

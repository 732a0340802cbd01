//! Items, interaction events and the item catalog.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ActionId = usize;
pub type SurfaceId = usize;

/// Built-in surfaces. Worlds may define more; these ids are used for
/// context handling in serving.
pub mod surfaces {
    use super::SurfaceId;

    pub const HOMEFEED: SurfaceId = 0;
    pub const SEARCH: SurfaceId = 1;
    pub const RELATED_PINS: SurfaceId = 2;
    pub const NAMES: [&str; 3] = ["homefeed", "search", "related_pins"];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemType {
    Pin,
    Query,
}

impl ItemType {
    pub fn code(self) -> u8 {
        match self {
            ItemType::Pin => 0,
            ItemType::Query => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ItemType::Pin),
            1 => Ok(ItemType::Query),
            other => Err(Error::validation(format!("unknown item type code {other}"))),
        }
    }
}

impl fmt::Display for ItemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ItemType::Pin => "pin",
            ItemType::Query => "query",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemFeature {
    pub item_id: u64,
    pub item_type: ItemType,
    /// Stand-in for a pre-trained content embedding.
    pub content: Vec<f32>,
}

/// One `(item, action, surface, timestamp)` interaction. Timestamps are
/// seconds; `feed_id` groups events of one feed session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: u64,
    pub item_id: u64,
    pub action: ActionId,
    pub surface: SurfaceId,
    pub ts: i64,
    pub feed_id: u64,
}

impl InteractionEvent {
    /// Identity used when merging signal sources.
    pub fn dedup_key(&self) -> (u64, ActionId, i64) {
        (self.item_id, self.action, self.ts)
    }
}

pub fn check_chronological(events: &[InteractionEvent]) -> Result<()> {
    match events.windows(2).position(|w| w[1].ts < w[0].ts) {
        Some(i) => Err(Error::validation(format!(
            "events not chronologically sorted at index {} ({} < {})",
            i + 1,
            events[i + 1].ts,
            events[i].ts
        ))),
        None => Ok(()),
    }
}

/// All known items, addressable by id.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    items: Vec<ItemFeature>,
    by_id: HashMap<u64, usize>,
}

impl Catalog {
    pub fn new(items: Vec<ItemFeature>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if by_id.insert(item.item_id, i).is_some() {
                return Err(Error::validation(format!("duplicate item id {}", item.item_id)));
            }
        }
        Ok(Catalog { items, by_id })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemFeature] {
        &self.items
    }

    pub fn get(&self, item_id: u64) -> Option<&ItemFeature> {
        self.by_id.get(&item_id).map(|&i| &self.items[i])
    }

    pub fn require(&self, item_id: u64) -> Result<&ItemFeature> {
        self.get(item_id).ok_or_else(|| Error::validation(format!("unknown item id {item_id}")))
    }

    pub fn pins(&self) -> impl Iterator<Item = &ItemFeature> {
        self.items.iter().filter(|i| i.item_type == ItemType::Pin)
    }

    pub fn content_dim(&self) -> Option<usize> {
        self.items.first().map(|i| i.content.len())
    }
}

//! Synthetic interaction worlds with a planted action → cluster mechanism.
//!
//! Every user has a few latent interest clusters. Users browse in sessions
//! on one surface; each session has a focus cluster. An event draws its
//! action from the priors, then its cluster from a mixture of the action's
//! affinity row, the session focus and the user's interests, and finally an
//! item of that cluster by Zipf popularity.

mod mi;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal, Normal, Zipf};
use serde::{Deserialize, Serialize};

pub use mi::action_cluster_mutual_information;

use crate::error::{Error, Result};
use crate::events::{surfaces, ActionId, InteractionEvent, ItemFeature, ItemType};
use crate::features::splitmix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_items: usize,
    pub num_queries: usize,
    pub num_clusters: usize,
    pub content_dim: usize,
    pub num_users: usize,
    pub action_priors: Vec<f64>,
    pub surface_priors: Vec<f64>,
    /// Explicit action × cluster affinity. When absent each action puts
    /// `affinity_strength` of its mass on its home clusters `c ≡ a (mod actions)`.
    pub affinity: Option<Vec<Vec<f64>>>,
    pub affinity_strength: f64,
    /// Mixture weights of the cluster draw: action affinity, session focus;
    /// the remainder goes to the user's interests.
    pub action_weight: f64,
    pub session_weight: f64,
    pub interests_per_user: usize,
    pub sessions_per_user: (usize, usize),
    pub mean_session_len: f64,
    /// Log-normal (mu, sigma) of gaps inside a session, seconds.
    pub intra_gap: (f64, f64),
    /// Log-normal (mu, sigma) of gaps between sessions, seconds.
    pub inter_gap: (f64, f64),
    /// Probability that a search-surface event engages a query.
    pub query_rate: f64,
    pub item_noise: f64,
    pub popularity_exponent: f64,
    pub start_ts: i64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_items: 5000,
            num_queries: 250,
            num_clusters: 25,
            content_dim: 16,
            num_users: 2000,
            action_priors: vec![0.35, 0.25, 0.2, 0.12, 0.08],
            surface_priors: vec![0.6, 0.25, 0.15],
            affinity: None,
            affinity_strength: 0.9,
            action_weight: 0.5,
            session_weight: 0.3,
            interests_per_user: 3,
            sessions_per_user: (3, 8),
            mean_session_len: 8.0,
            intra_gap: (3.5, 1.0),
            inter_gap: (10.5, 1.2),
            query_rate: 0.3,
            item_noise: 0.35,
            popularity_exponent: 1.1,
            start_ts: 1_700_000_000,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn num_actions(&self) -> usize {
        self.action_priors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.num_clusters == 0 || self.content_dim == 0 || self.num_users == 0 {
            return Err(Error::validation("num_items, num_clusters, content_dim and num_users must be positive"));
        }
        if self.num_items < self.num_clusters {
            return Err(Error::validation("need at least one item per cluster"));
        }
        check_weights("action_priors", &self.action_priors)?;
        check_weights("surface_priors", &self.surface_priors)?;
        if let Some(a) = &self.affinity {
            if a.len() != self.num_actions() {
                return Err(Error::validation("affinity needs one row per action"));
            }
            for row in a {
                if row.len() != self.num_clusters {
                    return Err(Error::validation("affinity rows need one entry per cluster"));
                }
                check_weights("affinity row", row)?;
                if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                    return Err(Error::validation("affinity rows must sum to 1"));
                }
            }
        }
        let unit = [
            ("affinity_strength", self.affinity_strength),
            ("query_rate", self.query_rate),
            ("action_weight", self.action_weight),
            ("session_weight", self.session_weight),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must be in [0, 1]")));
            }
        }
        if self.action_weight + self.session_weight > 1.0 {
            return Err(Error::validation("action_weight + session_weight must not exceed 1"));
        }
        let (lo, hi) = self.sessions_per_user;
        if lo == 0 || hi < lo || self.interests_per_user == 0 || !(self.mean_session_len >= 1.0) {
            return Err(Error::validation("session and interest counts must be positive"));
        }
        if !(self.intra_gap.1 >= 0.0 && self.inter_gap.1 >= 0.0 && self.item_noise >= 0.0) {
            return Err(Error::validation("gap and noise scales must be non-negative"));
        }
        if !(self.popularity_exponent > 0.0) {
            return Err(Error::validation("popularity_exponent must be positive"));
        }
        Ok(())
    }

    /// The affinity matrix in effect.
    pub fn affinity_matrix(&self) -> Vec<Vec<f64>> {
        if let Some(a) = &self.affinity {
            return a.clone();
        }
        let (na, nc) = (self.num_actions(), self.num_clusters);
        // With fewer clusters than actions, actions share home clusters.
        let is_home = |a: usize, c: usize| if nc >= na { c % na == a } else { c == a % nc };
        (0..na)
            .map(|a| {
                let home = (0..nc).filter(|&c| is_home(a, c)).count();
                let rest = nc - home;
                (0..nc)
                    .map(|c| match (is_home(a, c), rest) {
                        (true, 0) => 1.0 / home as f64,
                        (true, _) => self.affinity_strength / home as f64,
                        (false, _) => (1.0 - self.affinity_strength) / rest as f64,
                    })
                    .collect()
            })
            .collect()
    }
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::validation(format!("{name} must be non-negative with positive sum")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct World {
    pub items: Vec<ItemFeature>,
    /// Cluster of each item, aligned with `items`.
    pub clusters: Vec<usize>,
    /// Events sorted by user, then time.
    pub events: Vec<InteractionEvent>,
    pub affinity: Vec<Vec<f64>>,
}

impl World {
    pub fn cluster_of(&self) -> std::collections::HashMap<u64, usize> {
        self.items.iter().zip(&self.clusters).map(|(i, &c)| (i.item_id, c)).collect()
    }

    /// Events grouped per user, each chronological.
    pub fn histories(&self) -> Vec<Vec<InteractionEvent>> {
        group_by_user(&self.events)
    }
}

/// Splits a `(user, ts)`-sorted or unsorted log into per-user chronological
/// histories, ordered by user id.
pub fn group_by_user(events: &[InteractionEvent]) -> Vec<Vec<InteractionEvent>> {
    let mut map: std::collections::BTreeMap<u64, Vec<InteractionEvent>> = Default::default();
    for e in events {
        map.entry(e.user_id).or_default().push(*e);
    }
    map.into_values()
        .map(|mut h| {
            h.sort_by_key(|e| e.ts);
            h
        })
        .collect()
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn item_near(rng: &mut impl Rng, proto: &[f64], noise: f64) -> Vec<f32> {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    let scale = noise / (proto.len() as f64).sqrt();
    let v: Vec<f64> = proto.iter().map(|p| p + scale * n.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

const PIN_ID_SALT: u64 = 0x5049_4e00;
const QUERY_ID_SALT: u64 = 0x5155_4552;

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nc = cfg.num_clusters;
    let protos: Vec<Vec<f64>> = (0..nc).map(|_| unit_gaussian(&mut rng, cfg.content_dim)).collect();

    let mut items = Vec::with_capacity(cfg.num_items + cfg.num_queries);
    let mut clusters = Vec::with_capacity(items.capacity());
    let mut pins_by_cluster = vec![Vec::new(); nc];
    let mut queries_by_cluster = vec![Vec::new(); nc];
    for i in 0..cfg.num_items {
        let c = i % nc;
        let id = splitmix64(i as u64 ^ PIN_ID_SALT) >> 12;
        pins_by_cluster[c].push(id);
        items.push(ItemFeature { item_id: id, item_type: ItemType::Pin, content: item_near(&mut rng, &protos[c], cfg.item_noise) });
        clusters.push(c);
    }
    for i in 0..cfg.num_queries {
        let c = i % nc;
        let id = splitmix64(i as u64 ^ QUERY_ID_SALT) >> 12;
        queries_by_cluster[c].push(id);
        items.push(ItemFeature { item_id: id, item_type: ItemType::Query, content: item_near(&mut rng, &protos[c], cfg.item_noise) });
        clusters.push(c);
    }
    {
        let mut seen = std::collections::HashSet::new();
        if !items.iter().all(|i| seen.insert(i.item_id)) {
            return Err(Error::State("synthetic item id collision".into()));
        }
    }
    // Popularity order within a cluster is a random permutation.
    for list in pins_by_cluster.iter_mut().chain(queries_by_cluster.iter_mut()) {
        list.shuffle(&mut rng);
    }

    let affinity = cfg.affinity_matrix();
    let action_dist = WeightedIndex::new(&cfg.action_priors).map_err(|e| Error::validation(e.to_string()))?;
    let surface_dist = WeightedIndex::new(&cfg.surface_priors).map_err(|e| Error::validation(e.to_string()))?;
    let affinity_dists: Vec<WeightedIndex<f64>> =
        affinity.iter().map(|r| WeightedIndex::new(r).map_err(|e| Error::validation(e.to_string()))).collect::<Result<_>>()?;
    let intra = LogNormal::new(cfg.intra_gap.0, cfg.intra_gap.1).map_err(|e| Error::validation(e.to_string()))?;
    let inter = LogNormal::new(cfg.inter_gap.0, cfg.inter_gap.1).map_err(|e| Error::validation(e.to_string()))?;
    let session_extra = Exp::new(1.0 / (cfg.mean_session_len - 1.0).max(1e-9)).map_err(|e| Error::validation(e.to_string()))?;
    let all_clusters: Vec<usize> = (0..nc).collect();

    let mut events = Vec::new();
    let mut feed = 0u64;
    for user in 0..cfg.num_users as u64 {
        let k = cfg.interests_per_user.min(nc);
        let interests: Vec<usize> = all_clusters.choose_multiple(&mut rng, k).copied().collect();
        let interest_w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let interest_dist = WeightedIndex::new(&interest_w).expect("positive weights");
        let mut ts = cfg.start_ts + rng.random_range(0..86_400);
        let sessions = rng.random_range(cfg.sessions_per_user.0..=cfg.sessions_per_user.1);
        for _ in 0..sessions {
            feed += 1;
            let surface = surface_dist.sample(&mut rng);
            let focus = interests[interest_dist.sample(&mut rng)];
            let len = 1 + session_extra.sample(&mut rng).round() as usize;
            for j in 0..len {
                if j > 0 {
                    ts += intra.sample(&mut rng).ceil().max(1.0) as i64;
                }
                let action: ActionId = action_dist.sample(&mut rng);
                let u: f64 = rng.random();
                let cluster = if u < cfg.action_weight {
                    affinity_dists[action].sample(&mut rng)
                } else if u < cfg.action_weight + cfg.session_weight {
                    focus
                } else {
                    interests[interest_dist.sample(&mut rng)]
                };
                let query = surface == surfaces::SEARCH && !queries_by_cluster[cluster].is_empty() && rng.random::<f64>() < cfg.query_rate;
                let pool = if query { &queries_by_cluster[cluster] } else { &pins_by_cluster[cluster] };
                let item_id = pick_popular(&mut rng, pool, cfg.popularity_exponent);
                events.push(InteractionEvent { user_id: user, item_id, action, surface, ts, feed_id: feed });
            }
            ts += inter.sample(&mut rng).ceil().max(1.0) as i64;
        }
    }
    Ok(World { items, clusters, events, affinity })
}

fn pick_popular(rng: &mut impl Rng, pool: &[u64], exponent: f64) -> u64 {
    if pool.len() == 1 {
        return pool[0];
    }
    let z = Zipf::new(pool.len() as f64, exponent).expect("valid zipf");
    pool[z.sample(rng) as usize - 1]
}

//! Synthetic catalogs and user histories with planted lifecycle structure.
//!
//! Items live in `(team, stage)` cells. A user follows one team through
//! stages that only move forward, occasionally switching teams, and buys
//! uniformly inside the current cell.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::OrderEvent;
use crate::rng::stream_rng;
use crate::{Error, ItemId, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCatalog {
    pub n_teams: usize,
    pub n_stages: usize,
    pub items_per_cell: usize,
    pub seed: u64,
    /// `(team, stage)` of item `k + 1`.
    cells: Vec<(usize, usize)>,
    /// Items of cell `team * n_stages + stage`, ascending.
    members: Vec<Vec<ItemId>>,
}

impl SyntheticCatalog {
    fn from_cells(n_teams: usize, n_stages: usize, items_per_cell: usize, seed: u64, cells: Vec<(usize, usize)>) -> Result<Self> {
        let mut members = vec![Vec::new(); n_teams * n_stages];
        for (k, &(team, stage)) in cells.iter().enumerate() {
            if team >= n_teams || stage >= n_stages {
                return Err(Error::invalid(format!("item {} has cell ({team}, {stage}) out of range", k + 1)));
            }
            members[team * n_stages + stage].push(k as ItemId + 1);
        }
        if members.iter().any(Vec::is_empty) {
            return Err(Error::invalid("every (team, stage) cell must hold an item"));
        }
        Ok(SyntheticCatalog {
            n_teams,
            n_stages,
            items_per_cell,
            seed,
            cells,
            members,
        })
    }

    pub fn n_items(&self) -> usize {
        self.cells.len()
    }

    /// `(team, stage)` of an item.
    pub fn cell_of(&self, item: ItemId) -> Option<(usize, usize)> {
        let k = (item as usize).checked_sub(1)?;
        self.cells.get(k).copied()
    }

    pub fn stage_of(&self, item: ItemId) -> Option<usize> {
        self.cell_of(item).map(|c| c.1)
    }

    pub fn items_in(&self, team: usize, stage: usize) -> &[ItemId] {
        &self.members[team * self.n_stages + stage]
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        (1..=self.cells.len()).map(|k| k as ItemId)
    }
}

/// Builds `n_teams * n_stages * items_per_cell` items with ids `1..=N`.
/// Ids are assigned to cells by a seeded permutation, so the numeric id
/// carries no cell information.
pub fn gen_catalog(n_teams: usize, n_stages: usize, items_per_cell: usize, seed: u64) -> Result<SyntheticCatalog> {
    if n_teams == 0 || n_stages == 0 || items_per_cell == 0 {
        return Err(Error::invalid("catalog counts must be at least 1"));
    }
    let n = n_teams
        .checked_mul(n_stages)
        .and_then(|c| c.checked_mul(items_per_cell))
        .filter(|&n| n < ItemId::MAX as usize)
        .ok_or_else(|| Error::invalid("catalog exceeds the item id range"))?;
    let mut slots: Vec<(usize, usize)> = (0..n)
        .map(|k| {
            let cell = k / items_per_cell;
            (cell / n_stages, cell % n_stages)
        })
        .collect();
    slots.shuffle(&mut stream_rng(seed, 0));
    SyntheticCatalog::from_cells(n_teams, n_stages, items_per_cell, seed, slots)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub n_users: usize,
    pub min_orders: usize,
    pub max_orders: usize,
    /// Chance of moving to the next stage before each order after the first.
    pub p_adv: f64,
    /// Chance of moving to a different team before each order after the first.
    pub p_switch: f64,
    /// Extra same-cell browsing events per order.
    pub views_per_order: usize,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            n_users: 5000,
            min_orders: 2,
            max_orders: 20,
            p_adv: 0.3,
            p_switch: 0.05,
            views_per_order: 3,
            seed: 0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::invalid("n_users must be at least 1"));
        }
        if self.min_orders < 2 || self.min_orders > self.max_orders {
            return Err(Error::invalid(format!(
                "need 2 <= min_orders <= max_orders, got {}..{}",
                self.min_orders, self.max_orders
            )));
        }
        for (name, p) in [("p_adv", self.p_adv), ("p_switch", self.p_switch)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histories {
    pub orders: Vec<OrderEvent>,
    pub views: Vec<OrderEvent>,
}

/// Spacing between a user's consecutive browsing events, in milliseconds.
const VIEW_GAP_MS: i64 = 1000;

/// Runs the per-user walks. Users are named `u00000`, `u00001`, ...
pub fn gen_histories(catalog: &SyntheticCatalog, params: &GenParams) -> Result<Histories> {
    params.validate()?;
    let mut rng = stream_rng(params.seed, 1);
    let mut orders = Vec::new();
    let mut views = Vec::new();
    let width = params.n_users.saturating_sub(1).to_string().len().max(5);
    let min_gap = VIEW_GAP_MS * (params.views_per_order as i64 + 2);

    for u in 0..params.n_users {
        let user = format!("u{u:0width$}");
        let n_orders = rng.random_range(params.min_orders..=params.max_orders);
        let mut team = rng.random_range(0..catalog.n_teams);
        let mut stage = rng.random_range(0..catalog.n_stages);
        let mut t: i64 = rng.random_range(0..86_400_000);
        for k in 0..n_orders {
            if k > 0 {
                if stage + 1 < catalog.n_stages && rng.random_bool(params.p_adv) {
                    stage += 1;
                }
                if catalog.n_teams > 1 && rng.random_bool(params.p_switch) {
                    let other = rng.random_range(0..catalog.n_teams - 1);
                    team = if other >= team { other + 1 } else { other };
                }
                t += rng.random_range(min_gap..=min_gap * 1000);
            }
            let cell = catalog.items_in(team, stage);
            for v in 0..params.views_per_order {
                let item = *cell.choose(&mut rng).expect("cells are nonempty");
                views.push(OrderEvent {
                    user_id: user.clone(),
                    timestamp: t - VIEW_GAP_MS * (params.views_per_order - v) as i64,
                    item_id: item,
                });
            }
            let item = *cell.choose(&mut rng).expect("cells are nonempty");
            let event = OrderEvent {
                user_id: user.clone(),
                timestamp: t,
                item_id: item,
            };
            views.push(event.clone());
            orders.push(event);
        }
    }
    Ok(Histories { orders, views })
}

/// Event records in the `user_id<TAB>timestamp_ms<TAB>item_id` grammar.
pub fn events_to_string(events: &[OrderEvent]) -> String {
    let mut s = String::from("# user_id\ttimestamp_ms\titem_id\n");
    for e in events {
        let _ = writeln!(s, "{}\t{}\t{}", e.user_id, e.timestamp, e.item_id);
    }
    s
}

/// `item_id<TAB>team<TAB>stage`, after a header comment carrying the sizes.
pub fn catalog_to_string(catalog: &SyntheticCatalog) -> String {
    let mut s = format!(
        "# teams={} stages={} items_per_cell={} seed={}\n# item_id\tteam\tstage\n",
        catalog.n_teams, catalog.n_stages, catalog.items_per_cell, catalog.seed
    );
    for item in catalog.items() {
        let (team, stage) = catalog.cells[item as usize - 1];
        let _ = writeln!(s, "{item}\t{team}\t{stage}");
    }
    s
}

pub fn catalog_from_str(text: &str) -> Result<SyntheticCatalog> {
    let mut header = None;
    let mut cells = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let bad = |msg: &str| Error::Parse {
            line: line_no,
            msg: msg.to_owned(),
        };
        if let Some(rest) = line.strip_prefix("# teams=") {
            let nums: Vec<u64> = rest
                .split(|c: char| !c.is_ascii_digit())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad("bad catalog header")))
                .collect::<Result<_>>()?;
            if nums.len() != 4 {
                return Err(bad("bad catalog header"));
            }
            header = Some(nums);
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let [item, team, stage] = f.as_slice() else {
            return Err(bad("expected item_id<TAB>team<TAB>stage"));
        };
        let item: usize = item.parse().map_err(|_| bad("bad item id"))?;
        if item != cells.len() + 1 {
            return Err(bad("item ids must be dense and ascending from 1"));
        }
        cells.push((
            team.parse().map_err(|_| bad("bad team"))?,
            stage.parse().map_err(|_| bad("bad stage"))?,
        ));
    }
    let h = header.ok_or_else(|| Error::invalid("catalog lacks its size header"))?;
    let (teams, stages, per_cell) = (h[0] as usize, h[1] as usize, h[2] as usize);
    if cells.len() != teams * stages * per_cell {
        return Err(Error::invalid("catalog size disagrees with its header"));
    }
    SyntheticCatalog::from_cells(teams, stages, per_cell, h[3], cells)
}

/// Writes `orders.tsv`, `views.tsv` and `catalog.tsv` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, catalog: &SyntheticCatalog, histories: &Histories) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [
        ("orders.tsv", events_to_string(&histories.orders)),
        ("views.tsv", events_to_string(&histories.views)),
        ("catalog.tsv", catalog_to_string(catalog)),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<SyntheticCatalog> {
    let path = path.as_ref();
    catalog_from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn by_user(events: &[OrderEvent]) -> BTreeMap<&str, Vec<&OrderEvent>> {
        let mut m: BTreeMap<&str, Vec<&OrderEvent>> = BTreeMap::new();
        for e in events {
            m.entry(e.user_id.as_str()).or_default().push(e);
        }
        m
    }

    #[test]
    fn catalog_sizes() {
        let c = gen_catalog(20, 3, 10, 1).unwrap();
        assert_eq!(c.n_items(), 600);
        for team in 0..20 {
            for stage in 0..3 {
                assert_eq!(c.items_in(team, stage).len(), 10);
            }
        }
        assert_eq!(gen_catalog(1, 1, 1, 0).unwrap().n_items(), 1);
        assert_eq!(gen_catalog(20, 3, 10, 1).unwrap(), c);
        assert_ne!(gen_catalog(20, 3, 10, 2).unwrap(), c);
        assert!(gen_catalog(0, 3, 10, 1).is_err());
        assert!(gen_catalog(1 << 20, 1 << 10, 1 << 10, 1).is_err());
    }

    #[test]
    fn catalog_text_round_trip() {
        let c = gen_catalog(4, 3, 2, 7).unwrap();
        assert_eq!(catalog_from_str(&catalog_to_string(&c)).unwrap(), c);
    }

    #[test]
    fn stages_never_regress() {
        let c = gen_catalog(5, 3, 4, 3).unwrap();
        let params = GenParams {
            n_users: 300,
            p_adv: 0.5,
            p_switch: 0.2,
            ..Default::default()
        };
        let h = gen_histories(&c, &params).unwrap();
        for events in by_user(&h.orders).values() {
            assert!(events.len() >= 2);
            let stages: Vec<usize> = events.iter().map(|e| c.stage_of(e.item_id).unwrap()).collect();
            assert!(stages.windows(2).all(|p| p[0] <= p[1]));
            assert!(events.windows(2).all(|p| p[0].timestamp < p[1].timestamp));
        }
        for events in by_user(&h.views).values() {
            assert!(events.windows(2).all(|p| p[0].timestamp < p[1].timestamp));
        }
        assert_eq!(h.views.len(), h.orders.len() * 4);
    }

    #[test]
    fn degenerate_walks() {
        let c = gen_catalog(5, 3, 4, 3).unwrap();
        let still = GenParams {
            n_users: 100,
            p_adv: 0.0,
            p_switch: 0.0,
            ..Default::default()
        };
        let h = gen_histories(&c, &still).unwrap();
        for events in by_user(&h.orders).values() {
            let first = c.cell_of(events[0].item_id).unwrap();
            assert!(events.iter().all(|e| c.cell_of(e.item_id).unwrap() == first));
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let c = gen_catalog(3, 2, 2, 0).unwrap();
        let p = GenParams {
            n_users: 20,
            ..Default::default()
        };
        assert_eq!(gen_histories(&c, &p).unwrap(), gen_histories(&c, &p).unwrap());
        for bad in [
            GenParams { min_orders: 1, ..p },
            GenParams { max_orders: 1, ..p },
            GenParams { p_adv: 1.5, ..p },
            GenParams { n_users: 0, ..p },
        ] {
            assert!(gen_histories(&c, &bad).is_err());
        }
    }
}

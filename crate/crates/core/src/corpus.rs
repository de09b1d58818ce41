//! Order ingestion, per-user ordering, vocabularies and moving windows.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::keyed_hash;
use crate::{Error, ItemId, Result, PAD};

/// One purchase (or view) record.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OrderEvent {
    pub user_id: String,
    /// Milliseconds; only the relative order matters.
    pub timestamp: i64,
    pub item_id: ItemId,
}

/// A user's items in purchase-rank order (rank = position + 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PurchaseSequence {
    pub user_id: String,
    pub items: Vec<ItemId>,
}

impl PurchaseSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A standardized example: `seq_len - 1` input slots (padding first) and a label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingWindow {
    pub inputs: Vec<ItemId>,
    pub label: ItemId,
    pub source_user: String,
    pub window_index: usize,
}

impl TrainingWindow {
    /// Number of leading padding slots.
    pub fn padding(&self) -> usize {
        self.inputs.iter().take_while(|&&i| i == PAD).count()
    }

    /// Checks the window invariants: padding is a contiguous prefix, at
    /// least one real input, nonzero label.
    pub fn validate(&self) -> Result<()> {
        let pad = self.padding();
        if pad == self.inputs.len() {
            return Err(Error::invalid("window has no real input item"));
        }
        if self.inputs[pad..].contains(&PAD) {
            return Err(Error::invalid("padding is not a contiguous prefix"));
        }
        if self.label == PAD {
            return Err(Error::invalid("window label is the padding id"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Window length including the label slot.
    pub seq_len: usize,
    /// Events after this timestamp are ignored.
    pub cutoff_time: Option<i64>,
    pub tie_break_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seq_len: 12,
            cutoff_time: None,
            tie_break_seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::invalid(format!(
                "seq_len must be at least 2, got {}",
                self.seq_len
            )));
        }
        Ok(())
    }

    /// Input slots per window.
    pub fn input_len(&self) -> usize {
        self.seq_len - 1
    }
}

/// Reads a `user_id<TAB>timestamp_ms<TAB>item_id` file.
pub fn parse_orders(path: impl AsRef<Path>, cutoff: Option<i64>) -> Result<Vec<OrderEvent>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(BufReader::new(file), cutoff).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses event records from any reader. Lines starting with `#` and blank
/// lines are skipped; line numbers in errors are 1-based.
pub fn parse_events<R: BufRead>(reader: R, cutoff: Option<i64>) -> Result<Vec<OrderEvent>> {
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let event = parse_event_line(line, line_no)?;
        if cutoff.is_none_or(|t| event.timestamp <= t) {
            events.push(event);
        }
    }
    Ok(events)
}

fn parse_event_line(line: &str, line_no: usize) -> Result<OrderEvent> {
    let parse_err = |msg: String| Error::Parse { line: line_no, msg };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(parse_err(format!(
            "expected 3 tab-separated fields, found {}",
            fields.len()
        )));
    }
    let user_id = fields[0];
    if user_id.is_empty() {
        return Err(parse_err("empty user_id".into()));
    }
    let timestamp: i64 = fields[1]
        .parse()
        .map_err(|_| parse_err(format!("bad timestamp {:?}", fields[1])))?;
    let item_id: ItemId = fields[2]
        .parse()
        .map_err(|_| parse_err(format!("bad item_id {:?}", fields[2])))?;
    if item_id == PAD {
        return Err(parse_err("item_id 0 is the reserved padding id".into()));
    }
    Ok(OrderEvent {
        user_id: user_id.to_owned(),
        timestamp,
        item_id,
    })
}

/// Groups events per user and orders each user's items by timestamp.
///
/// Equal timestamps are broken by a key hashed from `(tie_break_seed, user,
/// item, occurrence)`, where `occurrence` counts earlier events of the same
/// `(user, item)` in timestamp order. The key depends only on event content,
/// so the output is identical for every permutation of `events`. Output is
/// sorted by `user_id`.
pub fn group_ordered(events: &[OrderEvent], cfg: &CorpusConfig) -> Result<Vec<PurchaseSequence>> {
    if events.is_empty() {
        return Err(Error::invalid("no events to group"));
    }
    let mut by_user: BTreeMap<&str, Vec<(i64, ItemId)>> = BTreeMap::new();
    for ev in events {
        by_user
            .entry(ev.user_id.as_str())
            .or_default()
            .push((ev.timestamp, ev.item_id));
    }

    let seed = cfg.tie_break_seed.to_le_bytes();
    let mut out = Vec::with_capacity(by_user.len());
    for (user, mut orders) in by_user {
        orders.sort_unstable();
        let mut seen: BTreeMap<ItemId, u64> = BTreeMap::new();
        let mut keyed: Vec<(i64, u64, ItemId, u64)> = orders
            .into_iter()
            .map(|(ts, item)| {
                let occ = seen.entry(item).or_insert(0);
                let this = *occ;
                *occ += 1;
                let tie = keyed_hash(&[
                    &seed,
                    user.as_bytes(),
                    &item.to_le_bytes(),
                    &this.to_le_bytes(),
                ]);
                (ts, tie, item, this)
            })
            .collect();
        keyed.sort_unstable();
        out.push(PurchaseSequence {
            user_id: user.to_owned(),
            items: keyed.into_iter().map(|(_, _, item, _)| item).collect(),
        });
    }
    Ok(out)
}

/// Drops users with fewer than two purchases.
pub fn filter_min_length(seqs: Vec<PurchaseSequence>) -> Vec<PurchaseSequence> {
    seqs.into_iter().filter(|s| s.len() >= 2).collect()
}

/// Full item set and output (label) set, each with a dense index in
/// ascending item-id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    full_items: Vec<ItemId>,
    output_items: Vec<ItemId>,
    max_item_id: ItemId,
}

impl Vocabulary {
    /// Builds from parts, enforcing every invariant.
    pub fn from_parts(
        mut full_items: Vec<ItemId>,
        mut output_items: Vec<ItemId>,
        max_item_id: ItemId,
    ) -> Result<Self> {
        full_items.sort_unstable();
        full_items.dedup();
        output_items.sort_unstable();
        output_items.dedup();
        if output_items.is_empty() {
            return Err(Error::invalid("no trainable labels"));
        }
        if full_items.first() == Some(&PAD) {
            return Err(Error::invalid("vocabulary contains the padding id"));
        }
        if let Some(missing) = output_items
            .iter()
            .find(|i| full_items.binary_search(i).is_err())
        {
            return Err(Error::invalid(format!(
                "output item {missing} missing from full item set"
            )));
        }
        let actual_max = *full_items.last().expect("nonempty: contains outputs");
        if max_item_id < actual_max {
            return Err(Error::invalid(format!(
                "max_item_id {max_item_id} below largest item {actual_max}"
            )));
        }
        Ok(Vocabulary {
            full_items,
            output_items,
            max_item_id,
        })
    }

    pub fn full_items(&self) -> &[ItemId] {
        &self.full_items
    }

    pub fn output_items(&self) -> &[ItemId] {
        &self.output_items
    }

    pub fn max_item_id(&self) -> ItemId {
        self.max_item_id
    }

    pub fn n_items(&self) -> usize {
        self.full_items.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.output_items.len()
    }

    pub fn index_of(&self, item: ItemId) -> Option<usize> {
        self.full_items.binary_search(&item).ok()
    }

    pub fn output_index_of(&self, item: ItemId) -> Option<usize> {
        self.output_items.binary_search(&item).ok()
    }

    pub fn output_item(&self, index: usize) -> ItemId {
        self.output_items[index]
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.index_of(item).is_some()
    }
}

/// Builds the vocabulary from length-filtered sequences. The output set is
/// every item that occurs at rank 2 or later for at least one user.
pub fn build_vocab(seqs: &[PurchaseSequence]) -> Result<Vocabulary> {
    if seqs.is_empty() {
        return Err(Error::invalid("no sequences to build a vocabulary from"));
    }
    let mut full = Vec::new();
    let mut outputs = Vec::new();
    for seq in seqs {
        full.extend_from_slice(&seq.items);
        outputs.extend(seq.items.iter().skip(1).copied());
    }
    let max = full.iter().copied().max().unwrap_or(PAD);
    Vocabulary::from_parts(full, outputs, max)
}

/// Windows cut from one sequence plus the count of windows discarded
/// because their label is outside the output vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Windowed {
    pub windows: Vec<TrainingWindow>,
    pub dropped: usize,
}

/// Cuts a sequence into standardized windows.
///
/// Sequences at least `seq_len` long yield `len - seq_len + 1` moving
/// windows. Shorter ones yield a single window aligned with the last order
/// and left-padded with [`PAD`].
pub fn windowize(seq: &PurchaseSequence, cfg: &CorpusConfig, vocab: &Vocabulary) -> Result<Windowed> {
    cfg.validate()?;
    let m = seq.len();
    if m < 2 {
        return Err(Error::invalid(format!(
            "user {} has {} purchase(s); at least 2 required",
            seq.user_id, m
        )));
    }
    let n_in = cfg.input_len();
    let mut out = Windowed::default();
    let mut push = |inputs: Vec<ItemId>, label: ItemId, window_index: usize| {
        if vocab.output_index_of(label).is_none() {
            out.dropped += 1;
            return;
        }
        out.windows.push(TrainingWindow {
            inputs,
            label,
            source_user: seq.user_id.clone(),
            window_index,
        });
    };
    if m >= cfg.seq_len {
        for (k, win) in seq.items.windows(cfg.seq_len).enumerate() {
            push(win[..n_in].to_vec(), win[n_in], k);
        }
    } else {
        let mut inputs = vec![PAD; cfg.seq_len - m];
        inputs.extend_from_slice(&seq.items[..m - 1]);
        push(inputs, seq.items[m - 1], 0);
    }
    Ok(out)
}

/// Windowizes every sequence, accumulating the dropped-label count.
pub fn windowize_all(
    seqs: &[PurchaseSequence],
    cfg: &CorpusConfig,
    vocab: &Vocabulary,
) -> Result<Windowed> {
    let mut all = Windowed::default();
    for seq in seqs {
        let w = windowize(seq, cfg, vocab)?;
        all.windows.extend(w.windows);
        all.dropped += w.dropped;
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, t: i64, item: ItemId) -> OrderEvent {
        OrderEvent {
            user_id: user.into(),
            timestamp: t,
            item_id: item,
        }
    }

    fn seq(user: &str, items: &[ItemId]) -> PurchaseSequence {
        PurchaseSequence {
            user_id: user.into(),
            items: items.to_vec(),
        }
    }

    #[test]
    fn parse_three_rows_in_file_order() {
        let text = "# header\nu1\t5\t3\nu2\t10\t1\n\nu1\t15\t2\n";
        let events = parse_events(text.as_bytes(), None).unwrap();
        assert_eq!(
            events,
            vec![ev("u1", 5, 3), ev("u2", 10, 1), ev("u1", 15, 2)]
        );
    }

    #[test]
    fn parse_applies_cutoff() {
        let text = "u\t5\t1\nu\t10\t2\nu\t15\t3\n";
        let events = parse_events(text.as_bytes(), Some(10)).unwrap();
        assert_eq!(events.len(), 2);
    }

    #[test]
    fn parse_rejects_padding_id() {
        let err = parse_events("u\t1\t2\nu\t2\t0\n".as_bytes(), None).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("reserved padding id"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_names_malformed_line() {
        let err = parse_events("u\t1\t2\nu\tx\t3\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_events("u\t1\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn parse_empty_is_empty() {
        assert!(parse_events("".as_bytes(), None).unwrap().is_empty());
    }

    #[test]
    fn group_sorts_by_timestamp() {
        let events = vec![ev("u", 3, 30), ev("u", 1, 10), ev("u", 2, 20)];
        let seqs = group_ordered(&events, &CorpusConfig::default()).unwrap();
        assert_eq!(seqs, vec![seq("u", &[10, 20, 30])]);
    }

    #[test]
    fn group_ties_are_seed_deterministic() {
        let events = vec![ev("u", 1, 7), ev("u", 1, 8), ev("u", 0, 1), ev("u", 2, 9)];
        let cfg = CorpusConfig {
            tie_break_seed: 42,
            ..Default::default()
        };
        let a = group_ordered(&events, &cfg).unwrap();
        let b = group_ordered(&events, &cfg).unwrap();
        assert_eq!(a, b);
        // Tied items stay strictly between their neighbours' ranks.
        assert_eq!(a[0].items[0], 1);
        assert_eq!(a[0].items[3], 9);
    }

    #[test]
    fn group_tie_order_depends_on_seed() {
        let events: Vec<_> = (1..=20).map(|i| ev("u", 0, i)).collect();
        let orders: std::collections::BTreeSet<Vec<ItemId>> = (0..5)
            .map(|s| {
                let cfg = CorpusConfig {
                    tie_break_seed: s,
                    ..Default::default()
                };
                group_ordered(&events, &cfg).unwrap()[0].items.clone()
            })
            .collect();
        assert!(orders.len() > 1);
    }

    #[test]
    fn group_output_sorted_by_user() {
        let events = vec![ev("b", 1, 1), ev("a", 1, 2), ev("c", 1, 3), ev("a", 2, 4)];
        let seqs = group_ordered(&events, &CorpusConfig::default()).unwrap();
        let users: Vec<_> = seqs.iter().map(|s| s.user_id.as_str()).collect();
        assert_eq!(users, ["a", "b", "c"]);
    }

    #[test]
    fn filter_keeps_multi_purchase_users() {
        let kept = filter_min_length(vec![seq("a", &[1]), seq("b", &[1, 2])]);
        assert_eq!(kept, vec![seq("b", &[1, 2])]);
        assert!(filter_min_length(vec![]).is_empty());
        let all = vec![seq("a", &[1, 2]), seq("b", &[3, 4, 5])];
        assert_eq!(filter_min_length(all.clone()), all);
    }

    #[test]
    fn vocab_output_set_is_label_set() {
        let v = build_vocab(&[seq("A", &[1, 2]), seq("B", &[2, 3])]).unwrap();
        assert_eq!(v.full_items(), &[1, 2, 3]);
        assert_eq!(v.output_items(), &[2, 3]);

        let v = build_vocab(&[seq("A", &[5, 6, 7])]).unwrap();
        assert_eq!(v.output_items(), &[6, 7]);

        let v = build_vocab(&[seq("A", &[3, 500_000, 7])]).unwrap();
        assert_eq!(v.max_item_id(), 500_000);
        assert_eq!(v.index_of(7), Some(1));
    }

    #[test]
    fn vocab_without_labels_is_an_error() {
        let err = build_vocab(&[seq("A", &[1])]).unwrap_err();
        assert!(err.to_string().contains("no trainable labels"));
    }

    fn vocab_for(seqs: &[PurchaseSequence]) -> Vocabulary {
        build_vocab(seqs).unwrap()
    }

    #[test]
    fn long_sequence_moving_windows() {
        let s = seq("u", &(1..=15).collect::<Vec<_>>());
        let w = windowize(&s, &CorpusConfig::default(), &vocab_for(std::slice::from_ref(&s))).unwrap();
        assert_eq!(w.windows.len(), 4);
        assert_eq!(w.windows[0].inputs, (1..=11).collect::<Vec<_>>());
        assert_eq!(w.windows[0].label, 12);
        assert_eq!(w.windows[3].label, 15);
        assert_eq!(w.windows[3].window_index, 3);
    }

    #[test]
    fn exact_length_single_unpadded_window() {
        let s = seq("u", &(1..=12).collect::<Vec<_>>());
        let w = windowize(&s, &CorpusConfig::default(), &vocab_for(std::slice::from_ref(&s))).unwrap();
        assert_eq!(w.windows.len(), 1);
        assert_eq!(w.windows[0].padding(), 0);
    }

    #[test]
    fn pair_is_padded_to_last_slot() {
        let s = seq("u", &[4, 9]);
        let w = windowize(&s, &CorpusConfig::default(), &vocab_for(std::slice::from_ref(&s))).unwrap();
        let mut expected = vec![PAD; 10];
        expected.push(4);
        assert_eq!(w.windows[0].inputs, expected);
        assert_eq!(w.windows[0].label, 9);
        w.windows[0].validate().unwrap();
    }

    #[test]
    fn short_sequence_rejected() {
        let s = seq("u", &[4]);
        let v = vocab_for(&[seq("x", &[4, 5])]);
        assert!(windowize(&s, &CorpusConfig::default(), &v).is_err());
    }

    #[test]
    fn foreign_labels_dropped_and_counted() {
        let v = vocab_for(&[seq("x", &[1, 2])]);
        let s = seq("u", &[2, 1]);
        let w = windowize(&s, &CorpusConfig::default(), &v).unwrap();
        assert!(w.windows.is_empty());
        assert_eq!(w.dropped, 1);
    }

    #[test]
    fn configurable_seq_len() {
        let cfg = CorpusConfig {
            seq_len: 3,
            ..Default::default()
        };
        let s = seq("u", &[1, 2, 3, 4]);
        let w = windowize(&s, &cfg, &vocab_for(std::slice::from_ref(&s))).unwrap();
        assert_eq!(w.windows.len(), 2);
        assert_eq!(w.windows[1].inputs, vec![2, 3]);
        let bad = CorpusConfig {
            seq_len: 1,
            ..Default::default()
        };
        assert!(windowize(&s, &bad, &vocab_for(std::slice::from_ref(&s))).is_err());
    }
}

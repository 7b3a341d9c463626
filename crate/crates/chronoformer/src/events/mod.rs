//! Event-sequence data model: atomic events, fixed-width time bins, patient
//! sequences, and vocabularies with reserved PAD/MASK ids.

mod corpus;
mod synth;

pub use corpus::{
    parse_corpus, parse_corpus_with_vocab, read_vocabulary, write_corpus, write_vocabulary,
    SchemaConfig,
};
pub use synth::{
    generate_sequences, generate_synthetic, planted_label, planted_score, GenConfig, GenOutput,
    Manifest, TaskFamily,
};

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
/// Number of reserved vocabulary ids (PAD, MASK).
pub const RESERVED_TOKENS: usize = 2;

/// One clinical event: concept token, hours since sequence origin, optional
/// scalar metadata (lab value, dosage).
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub code: usize,
    pub time: f64,
    pub value: Option<f64>,
}

/// Fixed-width time window holding its events in ascending time order.
/// `reference_time` is the mean of the contained event times and is the
/// timestamp used for inter-bin attention bias.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeBin {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub events: Vec<EventRecord>,
    pub reference_time: f64,
}

/// Task label attached to a sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Binary(f64),
    MultiHot(Vec<f64>),
}

impl Label {
    pub fn as_binary(&self) -> Option<f64> {
        match self {
            Label::Binary(v) => Some(*v),
            Label::MultiHot(_) => None,
        }
    }
}

/// Ordered non-empty bins plus labels and the prediction-time anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSequence {
    pub id: String,
    pub bins: Vec<TimeBin>,
    pub labels: BTreeMap<String, Label>,
    pub anchor_time: f64,
}

impl PatientSequence {
    /// Events in cross-bin chronological order (bins ascending, events
    /// ascending within each bin).
    pub fn events_flat(&self) -> impl Iterator<Item = &EventRecord> {
        self.bins.iter().flat_map(|b| b.events.iter())
    }

    pub fn n_events(&self) -> usize {
        self.bins.iter().map(|b| b.events.len()).sum()
    }

    pub fn max_bin_occupancy(&self) -> usize {
        self.bins.iter().map(|b| b.events.len()).max().unwrap_or(0)
    }

    /// Check every structural invariant; used after parsing and by tests.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.bins.is_empty() || self.bins.iter().all(|b| b.events.is_empty()) {
            return Err(Error::Validation(format!(
                "patient {}: no non-empty bins",
                self.id
            )));
        }
        let mut prev_index: Option<usize> = None;
        for bin in &self.bins {
            if let Some(p) = prev_index {
                if bin.index <= p {
                    return Err(Error::Validation(format!(
                        "patient {}: bin indices not strictly increasing",
                        self.id
                    )));
                }
            }
            prev_index = Some(bin.index);
            let mut prev_time = f64::NEG_INFINITY;
            for ev in &bin.events {
                if !ev.time.is_finite() || ev.time < 0.0 {
                    return Err(Error::Validation(format!(
                        "patient {}: invalid event time {}",
                        self.id, ev.time
                    )));
                }
                if ev.time < bin.start || ev.time >= bin.end {
                    return Err(Error::Validation(format!(
                        "patient {}: event time {} outside bin [{}, {})",
                        self.id, ev.time, bin.start, bin.end
                    )));
                }
                if ev.time < prev_time {
                    return Err(Error::Validation(format!(
                        "patient {}: events not sorted within bin {}",
                        self.id, bin.index
                    )));
                }
                prev_time = ev.time;
                if ev.code >= vocab_size {
                    return Err(Error::Validation(format!(
                        "patient {}: code {} outside vocabulary of size {}",
                        self.id, ev.code, vocab_size
                    )));
                }
                if ev.time >= self.anchor_time {
                    return Err(Error::Validation(format!(
                        "patient {}: event time {} at or past anchor {}",
                        self.id, ev.time, self.anchor_time
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Bijective token <-> id map with per-token salience utilities in [0, 1].
/// Ids 0 and 1 are reserved for PAD and MASK; real tokens start at id 2.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    tokens: Vec<String>,
    utility: Vec<f64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary::default()
    }

    /// Total size including the two reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED_TOKENS
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Id for a token, inserting it (utility 1.0) if unseen.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() + RESERVED_TOKENS;
        self.tokens.push(token.to_string());
        self.utility.push(1.0);
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        match id {
            PAD_ID => Some("<PAD>"),
            MASK_ID => Some("<MASK>"),
            _ => self.tokens.get(id - RESERVED_TOKENS).map(String::as_str),
        }
    }

    /// Salience utility for an id; reserved ids have utility 0.
    pub fn utility_of(&self, id: usize) -> f64 {
        if id < RESERVED_TOKENS {
            0.0
        } else {
            self.utility.get(id - RESERVED_TOKENS).copied().unwrap_or(0.0)
        }
    }

    pub fn set_utility(&mut self, id: usize, u: f64) {
        assert!(id >= RESERVED_TOKENS, "reserved ids have no utility");
        assert!((0.0..=1.0).contains(&u), "utility outside [0,1]");
        self.utility[id - RESERVED_TOKENS] = u;
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn utilities(&self) -> &[f64] {
        &self.utility
    }

    pub fn from_parts(tokens: Vec<String>, utility: Vec<f64>) -> Result<Self> {
        if tokens.len() != utility.len() {
            return Err(Error::Validation(format!(
                "vocabulary tokens ({}) and utilities ({}) differ in length",
                tokens.len(),
                utility.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i + RESERVED_TOKENS).is_some() {
                return Err(Error::Validation(format!("duplicate token '{t}'")));
            }
        }
        Ok(Vocabulary {
            tokens,
            utility,
            index,
        })
    }
}

/// Partition events into fixed-width bins: the event at time `t` lands in
/// bin `floor(t / bin_width)` (half-open intervals, so `t == bin_width`
/// belongs to bin 1). Empty bins are omitted. Events are stably sorted by
/// time, ties keeping input order.
pub fn bin_events(events: &[EventRecord], bin_width: f64) -> Result<Vec<TimeBin>> {
    if !(bin_width > 0.0) {
        return Err(Error::Config(format!("bin_width must be > 0, got {bin_width}")));
    }
    for ev in events {
        if !ev.time.is_finite() || ev.time < 0.0 {
            return Err(Error::Validation(format!(
                "event time {} is not finite and nonnegative",
                ev.time
            )));
        }
    }
    let mut sorted: Vec<EventRecord> = events.to_vec();
    sorted.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());

    let mut bins: Vec<TimeBin> = Vec::new();
    for ev in sorted {
        let index = (ev.time / bin_width).floor() as usize;
        match bins.last_mut() {
            Some(last) if last.index == index => last.events.push(ev),
            _ => bins.push(TimeBin {
                index,
                start: index as f64 * bin_width,
                end: (index as f64 + 1.0) * bin_width,
                events: vec![ev],
                reference_time: 0.0,
            }),
        }
    }
    for bin in &mut bins {
        bin.reference_time =
            bin.events.iter().map(|e| e.time).sum::<f64>() / bin.events.len() as f64;
    }
    Ok(bins)
}

/// Per-event time delta in cross-bin chronological order. The globally first
/// event gets delta 0; later events get the gap to the immediately preceding
/// event in the full timeline.
pub fn compute_deltas(seq: &PatientSequence) -> Vec<f64> {
    let mut deltas = Vec::with_capacity(seq.n_events());
    let mut prev: Option<f64> = None;
    for ev in seq.events_flat() {
        deltas.push(match prev {
            None => 0.0,
            Some(p) => ev.time - p,
        });
        prev = Some(ev.time);
    }
    deltas
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(time: f64) -> EventRecord {
        EventRecord {
            code: 2,
            time,
            value: None,
        }
    }

    #[test]
    fn binning_follows_floor_rule() {
        let bins = bin_events(&[ev(0.0), ev(10.0), ev(30.0)], 24.0).unwrap();
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0].index, 0);
        assert_eq!(bins[0].events.len(), 2);
        assert_eq!(bins[1].index, 1);
        assert_eq!(bins[1].events[0].time, 30.0);
    }

    #[test]
    fn time_exactly_at_boundary_goes_to_next_bin() {
        let bins = bin_events(&[ev(24.0)], 24.0).unwrap();
        assert_eq!(bins[0].index, 1);
        assert_eq!(bins[0].start, 24.0);
    }

    #[test]
    fn binning_matches_brute_force_partition() {
        use crate::numeric::rng::CounterRng;
        let mut rng = CounterRng::new(99);
        let events: Vec<EventRecord> = (0..1000).map(|_| ev(rng.range_f64(0.0, 500.0))).collect();
        let width = 24.0;
        let bins = bin_events(&events, width).unwrap();

        // oracle: independent floor partition into a map
        let mut expected: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for e in &events {
            expected
                .entry((e.time / width).floor() as usize)
                .or_default()
                .push(e.time);
        }
        for v in expected.values_mut() {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        let got: std::collections::BTreeMap<usize, Vec<f64>> = bins
            .iter()
            .map(|b| (b.index, b.events.iter().map(|e| e.time).collect()))
            .collect();
        assert_eq!(expected, got);

        // partition is exhaustive and disjoint
        let total: usize = bins.iter().map(|b| b.events.len()).sum();
        assert_eq!(total, events.len());
        for b in &bins {
            for e in &b.events {
                assert!(e.time >= b.start && e.time < b.end);
            }
        }
    }

    #[test]
    fn non_finite_time_rejected() {
        assert!(bin_events(&[ev(f64::NAN)], 24.0).is_err());
        assert!(bin_events(&[ev(f64::INFINITY)], 24.0).is_err());
    }

    #[test]
    fn nonpositive_width_rejected() {
        assert!(matches!(bin_events(&[ev(1.0)], 0.0), Err(Error::Config(_))));
    }

    fn seq_from_times(times: &[f64]) -> PatientSequence {
        let events: Vec<EventRecord> = times.iter().map(|&t| ev(t)).collect();
        PatientSequence {
            id: "p".into(),
            bins: bin_events(&events, 24.0).unwrap(),
            labels: BTreeMap::new(),
            anchor_time: 1e9,
        }
    }

    #[test]
    fn deltas_forced_by_definition() {
        let seq = seq_from_times(&[0.0, 10.0, 30.0]);
        assert_eq!(compute_deltas(&seq), vec![0.0, 10.0, 20.0]);
    }

    #[test]
    fn single_event_delta_is_zero() {
        let seq = seq_from_times(&[5.0]);
        assert_eq!(compute_deltas(&seq), vec![0.0]);
    }

    #[test]
    fn shuffled_input_deltas_equal_sorted_input_deltas() {
        use crate::numeric::rng::CounterRng;
        let mut rng = CounterRng::new(4);
        for _ in 0..20 {
            let mut times: Vec<f64> = (0..30).map(|_| rng.range_f64(0.0, 200.0)).collect();
            let shuffled = {
                let mut t = times.clone();
                rng.shuffle(&mut t);
                t
            };
            let from_shuffled = compute_deltas(&seq_from_times(&shuffled));
            // oracle: sort then diff
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut oracle = vec![0.0];
            for w in times.windows(2) {
                oracle.push(w[1] - w[0]);
            }
            assert_eq!(from_shuffled, oracle);
        }
    }

    #[test]
    fn deltas_are_nonnegative() {
        use crate::numeric::rng::CounterRng;
        let mut rng = CounterRng::new(8);
        let times: Vec<f64> = (0..200).map(|_| rng.range_f64(0.0, 400.0)).collect();
        let seq = seq_from_times(&times);
        assert!(compute_deltas(&seq).iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn vocabulary_reserves_pad_and_mask() {
        let mut v = Vocabulary::new();
        let a = v.intern("DX_A");
        let b = v.intern("DX_B");
        assert_eq!(a, 2);
        assert_eq!(b, 3);
        assert_eq!(v.intern("DX_A"), 2);
        assert_eq!(v.size(), 4);
        assert_eq!(v.token_of(PAD_ID), Some("<PAD>"));
        assert_eq!(v.token_of(MASK_ID), Some("<MASK>"));
        assert_eq!(v.utility_of(PAD_ID), 0.0);
    }
}

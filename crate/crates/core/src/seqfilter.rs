//! Median-window correction of per-frame predictions.
//!
//! A prediction that lands more than `a + 1` frames away from the lower
//! median of the last `2a` outputs is replaced by `median + a + 1`.

use std::collections::VecDeque;

/// Rolling window over the most recent `2a` filter outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterState {
    a: usize,
    history: VecDeque<u64>,
}

impl FilterState {
    pub fn new(a: usize) -> Self {
        FilterState {
            a,
            history: VecDeque::with_capacity(2 * a),
        }
    }

    /// State whose window already holds `history` (oldest first). Only the
    /// last `2a` entries are kept.
    pub fn with_history(a: usize, history: &[u64]) -> Self {
        let mut state = Self::new(a);
        for &h in history {
            state.push(h);
        }
        state
    }

    pub fn window(&self) -> usize {
        self.a
    }

    pub fn history(&self) -> impl ExactSizeIterator<Item = u64> + '_ {
        self.history.iter().copied()
    }

    /// Lower median of a full window, `None` while warming up.
    pub fn median(&self) -> Option<u64> {
        if self.a == 0 || self.history.len() < 2 * self.a {
            return None;
        }
        let mut sorted: Vec<u64> = self.history.iter().copied().collect();
        sorted.sort_unstable();
        Some(sorted[self.a - 1])
    }

    fn push(&mut self, v: u64) {
        if self.a == 0 {
            return;
        }
        if self.history.len() == 2 * self.a {
            self.history.pop_front();
        }
        self.history.push_back(v);
    }
}

/// Filters one raw prediction and records the output in the window.
pub fn filter_predict(state: &mut FilterState, raw: u64) -> u64 {
    let jump = state.a as u64 + 1;
    let out = match state.median() {
        Some(m) if raw.abs_diff(m) > jump => m + jump,
        _ => raw,
    };
    state.push(out);
    out
}

/// Runs a fresh filter with window `a` over a whole sequence.
pub fn filter_sequence(a: usize, raws: &[u64]) -> Vec<u64> {
    let mut state = FilterState::new(a);
    raws.iter().map(|&r| filter_predict(&mut state, r)).collect()
}

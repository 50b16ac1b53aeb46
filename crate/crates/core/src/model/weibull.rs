//! Sufficient statistics of a participant-level study grouped by
//! (biomarker, arm) cell, so that likelihood evaluations for fixed shape cost
//! O(1) per cell.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::evidence::IpdStudy;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    // study id -> two most recent (shape bits, per-cell Σ t^γ)
    static SUMS: RefCell<HashMap<u64, [(u64, [f64; 4]); 2]>> = RefCell::new(HashMap::new());
}

#[derive(Debug, Clone, Default)]
struct Cell {
    events: f64,
    sum_log_t_events: f64,
    log_t: Vec<f64>,
}

/// Cells are indexed `2 * biomarker + arm`.
#[derive(Debug)]
pub(crate) struct GroupedStudy {
    id: u64,
    cells: [Cell; 4],
    /// Mean log event time (log time of all subjects if none had events);
    /// used to decorrelate the shape from the baseline in the sampler.
    pub shift: f64,
}

impl GroupedStudy {
    /// Groups subjects by cell. With `pool_biomarker` every subject is treated
    /// as biomarker-negative.
    pub fn new(study: &IpdStudy, pool_biomarker: bool) -> Self {
        let mut cells: [Cell; 4] = Default::default();
        let (mut sum_events, mut n_events, mut sum_all) = (0.0, 0.0, 0.0);
        for r in &study.subjects {
            let x = if pool_biomarker { 0 } else { r.biomarker as usize };
            let c = &mut cells[2 * x + r.arm as usize];
            let lt = r.time.ln();
            c.log_t.push(lt);
            sum_all += lt;
            if r.event {
                c.events += 1.0;
                c.sum_log_t_events += lt;
                sum_events += lt;
                n_events += 1.0;
            }
        }
        let shift = if n_events > 0.0 {
            sum_events / n_events
        } else {
            sum_all / study.subjects.len().max(1) as f64
        };
        Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            cells,
            shift,
        }
    }

    pub fn has_cell(&self, cell: usize) -> bool {
        !self.cells[cell].log_t.is_empty()
    }

    pub fn events(&self, cell: usize) -> f64 {
        self.cells[cell].events
    }

    pub fn n(&self, cell: usize) -> usize {
        self.cells[cell].log_t.len()
    }

    fn compute_sums(&self, gamma: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, c) in out.iter_mut().zip(&self.cells) {
            *o = c.log_t.iter().map(|&lt| (gamma * lt).exp()).sum();
        }
        out
    }

    /// Per-cell `Σ t^γ`, memoized per thread on the exact shape value.
    fn sums(&self, gamma: f64) -> [f64; 4] {
        let bits = gamma.to_bits();
        SUMS.with(|memo| {
            let mut memo = memo.borrow_mut();
            let entry = memo.entry(self.id).or_insert([(u64::MAX, [0.0; 4]); 2]);
            if entry[0].0 == bits {
                return entry[0].1;
            }
            if entry[1].0 == bits {
                entry.swap(0, 1);
                return entry[0].1;
            }
            let s = self.compute_sums(gamma);
            entry[1] = entry[0];
            entry[0] = (bits, s);
            s
        })
    }

    /// Log-likelihood given the shape and the log-rate of each cell.
    pub fn loglik(&self, gamma: f64, eta: [f64; 4]) -> f64 {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return f64::NEG_INFINITY;
        }
        let sums = self.sums(gamma);
        let ln_gamma = gamma.ln();
        let mut total = 0.0;
        for ((c, &s), &e) in self.cells.iter().zip(&sums).zip(&eta) {
            if c.log_t.is_empty() {
                continue;
            }
            total += c.events * (ln_gamma + e) + (gamma - 1.0) * c.sum_log_t_events - e.exp() * s;
        }
        total
    }
}

impl Drop for GroupedStudy {
    fn drop(&mut self) {
        // only this thread's entry can be reached; others age out harmlessly
        let _ = SUMS.try_with(|m| m.borrow_mut().remove(&self.id));
    }
}

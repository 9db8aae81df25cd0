//! Cylinder-set sequences that drive layer-by-layer probability sharing.
//!
//! A sequence is an ordered list of one-dimensional sharing steps over the
//! first `m` ("window") coordinates: the first row frees window coordinate 0
//! with every other coordinate at 0, and each later block frees the next
//! window coordinate once per lexicographic assignment of the previous ones.
//! Sequence `s` applies the same construction with the window coordinates
//! rotated `s` positions, so row `l` of sequence `s` always shares along a
//! different unit than row `l` of sequence `s'`. Padding repeats rows so
//! that block boundaries land at the same depths for every sequence
//! regardless of mixed cardinalities.
//!
//! In a full schedule every row additionally leaves the select coordinate
//! `m` free (sharing splits are keyed by its value) and fixes the suffix
//! coordinates `m+1..n` to the sequence's pattern.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::state_space::{CylinderSet, StateSpace};

/// One sharing step: at depth `level`, spread mass along `unit` within
/// `cylinder`. The cylinder frees `unit` (and the select coordinate when
/// present); the source states are its members with `unit = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRow {
    /// 1-based firing depth, counted from the top of the directed stack.
    pub level: usize,
    /// The sharing (output) coordinate.
    pub unit: usize,
    /// Coordinate whose value selects the sharing split, if any.
    pub select: Option<usize>,
    /// Spread region: free on `unit` and `select`, fixed elsewhere.
    pub cylinder: CylinderSet,
}

impl ScheduleRow {
    /// The row's source states: the spread region with the sharing
    /// coordinate pinned back to 0.
    pub fn source_cylinder(&self) -> CylinderSet {
        let mut fixed = self.cylinder.fixed().clone();
        fixed.insert(self.unit, 0);
        let free: BTreeSet<usize> = self
            .cylinder
            .free()
            .iter()
            .copied()
            .filter(|&c| c != self.unit)
            .collect();
        CylinderSet::new(self.cylinder.n_units(), fixed, free).expect("row cylinders are valid")
    }
}

fn check_window(space: &StateSpace, m: usize, suffix: &[u32]) -> Result<()> {
    if m == 0 {
        return Err(Error::Schema("window must contain at least one coordinate".into()));
    }
    let select_len = space.num_units() - m - suffix.len();
    if m + suffix.len() > space.num_units() || select_len > 1 {
        return Err(Error::Schema(format!(
            "window {m} + suffix {} does not fit space {space}",
            suffix.len()
        )));
    }
    Ok(())
}

/// Rows of one sequence. `rot[t]` is the window coordinate freed by block
/// `t`; `select` (when present) stays free in every row; `suffix` pins the
/// trailing coordinates.
fn sequence_rows(
    space: &StateSpace,
    rot: &[usize],
    select: Option<usize>,
    suffix: &[(usize, u32)],
) -> Result<Vec<ScheduleRow>> {
    let n = space.num_units();
    let mut rows = Vec::new();
    let mut level = 1;
    for (block, &unit) in rot.iter().enumerate() {
        // lexicographic assignments of the previously freed coordinates,
        // earliest coordinate most significant
        let prefix_cards: Vec<u32> = rot[..block].iter().map(|&c| space.card(c)).collect();
        let mut assignment = vec![0u32; block];
        loop {
            let mut fixed: Vec<(usize, u32)> = Vec::with_capacity(n - 1);
            for (t, &c) in rot[..block].iter().enumerate() {
                fixed.push((c, assignment[t]));
            }
            for &c in &rot[block + 1..] {
                fixed.push((c, 0));
            }
            fixed.extend_from_slice(suffix);
            let mut free: BTreeSet<usize> = BTreeSet::new();
            free.insert(unit);
            if let Some(sel) = select {
                free.insert(sel);
            }
            let fixed_map = fixed.into_iter().collect();
            let cylinder = CylinderSet::new(n, fixed_map, free)?;
            cylinder.validate(space)?;
            rows.push(ScheduleRow {
                level,
                unit,
                select,
                cylinder,
            });
            level += 1;
            // odometer, last prefix coordinate fastest
            let mut pos = block;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                assignment[pos] += 1;
                if assignment[pos] < prefix_cards[pos] {
                    break;
                }
                assignment[pos] = 0;
            }
            if assignment.iter().all(|&a| a == 0) {
                break;
            }
        }
    }
    Ok(rows)
}

/// The base sequence over window coordinates `0..m` in natural order.
/// `space` covers the window plus optional suffix coordinates (and a select
/// coordinate when it sits between them).
pub fn build_g1(space: &StateSpace, m: usize, suffix: &[u32]) -> Result<Vec<ScheduleRow>> {
    check_window(space, m, suffix)?;
    let n = space.num_units();
    let rot: Vec<usize> = (0..m).collect();
    let select = if n > m + suffix.len() { Some(m) } else { None };
    let suffix_pairs: Vec<(usize, u32)> = suffix
        .iter()
        .enumerate()
        .map(|(i, &v)| (n - suffix.len() + i, v))
        .collect();
    sequence_rows(space, &rot, select, &suffix_pairs)
}

/// Sequence `s`: the window coordinates of the base sequence rotated `s`
/// positions (block `t` frees window coordinate `(t + s) mod m`), suffix
/// pinned to this sequence's pattern.
pub fn build_gs(space: &StateSpace, m: usize, s: usize, suffix: &[u32]) -> Result<Vec<ScheduleRow>> {
    check_window(space, m, suffix)?;
    if s < 1 || s > m {
        return Err(Error::Schema(format!(
            "sequence index {s} out of range 1..={m}"
        )));
    }
    let n = space.num_units();
    let rot: Vec<usize> = (0..m).map(|t| (t + s) % m).collect();
    let select = if n > m + suffix.len() { Some(m) } else { None };
    let suffix_pairs: Vec<(usize, u32)> = suffix
        .iter()
        .enumerate()
        .map(|(i, &v)| (n - suffix.len() + i, v))
        .collect();
    sequence_rows(space, &rot, select, &suffix_pairs)
}

/// Pads each block (a maximal run of rows sharing along one unit) to
/// `q_max^block` rows by repeating its last row, then renumbers levels.
/// Block boundaries then fall at the same depths for every sequence.
pub fn pad_to_gtilde(rows: &[ScheduleRow], q_max: u32) -> Vec<ScheduleRow> {
    let mut out: Vec<ScheduleRow> = Vec::new();
    let mut block_idx = 0usize;
    let mut i = 0usize;
    while i < rows.len() {
        let unit = rows[i].unit;
        let mut block: Vec<ScheduleRow> = Vec::new();
        while i < rows.len() && rows[i].unit == unit {
            block.push(rows[i].clone());
            i += 1;
        }
        let want = (q_max as usize).pow(block_idx as u32);
        while block.len() < want {
            block.push(block.last().expect("blocks are non-empty").clone());
        }
        out.extend(block);
        block_idx += 1;
    }
    for (idx, row) in out.iter_mut().enumerate() {
        row.level = idx + 1;
    }
    out
}

/// The padded sequences, seeds, and bookkeeping for one choice of window
/// size `m` on a full space (window, select coordinate, suffix).
#[derive(Debug, Clone)]
pub struct SharingSchedule {
    space: StateSpace,
    m: usize,
    k: usize,
    q_max: u32,
    rows_per_seq: usize,
    seqs: Vec<Vec<ScheduleRow>>,
    seeds: Vec<CylinderSet>,
    suffixes: Vec<Vec<u32>>,
}

impl SharingSchedule {
    /// Builds all `k` padded sequences for window size `m` on `space`.
    /// Requires `1 <= m < n` and the feasibility condition `m >= k` where
    /// `k` is the number of suffix assignments.
    pub fn build(space: &StateSpace, m: usize) -> Result<Self> {
        let n = space.num_units();
        if m == 0 || m + 1 > n {
            return Err(Error::Schema(format!(
                "window size {m} needs 1 <= m <= {} on {space}",
                n.saturating_sub(1)
            )));
        }
        let suffix_cards: Vec<u32> = space.cards()[m + 1..].to_vec();
        let k: usize = suffix_cards.iter().map(|&q| q as usize).product();
        if m < k {
            return Err(Error::Constraint(format!(
                "feasibility requires window {m} >= suffix assignments {k}"
            )));
        }
        let q_max = space.cards()[..m].iter().copied().max().expect("m >= 1");
        let rows_per_seq: usize = (0..m).map(|t| (q_max as usize).pow(t as u32)).sum();

        let suffix_space = if suffix_cards.is_empty() {
            None
        } else {
            Some(StateSpace::new(&suffix_cards)?)
        };
        let mut seqs = Vec::with_capacity(k);
        let mut seeds = Vec::with_capacity(k);
        let mut suffixes = Vec::with_capacity(k);
        for s in 1..=k {
            let suffix: Vec<u32> = match &suffix_space {
                Some(sp) => sp.unindex(s - 1),
                None => Vec::new(),
            };
            let rows = build_gs(space, m, s, &suffix)?;
            seqs.push(pad_to_gtilde(&rows, q_max));

            let mut fixed: Vec<(usize, u32)> = (0..m).map(|c| (c, 0)).collect();
            for (i, &v) in suffix.iter().enumerate() {
                fixed.push((m + 1 + i, v));
            }
            seeds.push(CylinderSet::from_fixed(n, &fixed)?);
            suffixes.push(suffix);
        }
        Ok(Self {
            space: space.clone(),
            m,
            k,
            q_max,
            rows_per_seq,
            seqs,
            seeds,
            suffixes,
        })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn window(&self) -> usize {
        self.m
    }

    pub fn select_coord(&self) -> usize {
        self.m
    }

    pub fn num_sequences(&self) -> usize {
        self.k
    }

    pub fn max_window_card(&self) -> u32 {
        self.q_max
    }

    /// Depth (number of levels) of each padded sequence.
    pub fn rows_per_sequence(&self) -> usize {
        self.rows_per_seq
    }

    pub fn sequences(&self) -> &[Vec<ScheduleRow>] {
        &self.seqs
    }

    pub fn seeds(&self) -> &[CylinderSet] {
        &self.seeds
    }

    pub fn suffixes(&self) -> &[Vec<u32>] {
        &self.suffixes
    }

    /// Window coordinate order of sequence `s` (1-based): block `t` shares
    /// along `rotation(s)[t]`.
    pub fn rotation(&self, s: usize) -> Vec<usize> {
        (0..self.m).map(|t| (t + s) % self.m).collect()
    }

    /// All rows firing at `level` (one per sequence).
    pub fn rows_at_level(&self, level: usize) -> Vec<&ScheduleRow> {
        self.seqs
            .iter()
            .filter_map(|seq| seq.get(level - 1))
            .collect()
    }

    /// States covered by the seeds plus all rows up to `depth` levels.
    pub fn coverage(&self, depth: usize) -> Result<Vec<bool>> {
        let mut covered = vec![false; self.space.size()];
        for seed in &self.seeds {
            for idx in seed.enumerate(&self.space)? {
                covered[idx] = true;
            }
        }
        for seq in &self.seqs {
            for row in seq.iter().take(depth) {
                for idx in row.cylinder.enumerate(&self.space)? {
                    covered[idx] = true;
                }
            }
        }
        Ok(covered)
    }

    /// Text rendering of one sequence: one row per line, the sharing
    /// coordinate bracketed, other free coordinates starred.
    pub fn render_sequence(&self, s_index: usize) -> String {
        let mut out = String::new();
        for row in &self.seqs[s_index] {
            out.push_str(&format!("{:>3}  ", row.level));
            for c in 0..self.space.num_units() {
                let cell = if c == row.unit {
                    "[*]".to_string()
                } else if row.cylinder.free().contains(&c) {
                    " * ".to_string()
                } else {
                    format!(" {} ", row.cylinder.fixed()[&c])
                };
                out.push_str(&cell);
            }
            out.push('\n');
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn tamper_suffix_for_tests(&mut self, seq: usize, suffix: Vec<u32>) {
        // rebuild the sequence with a wrong suffix to exercise validation
        let rows = build_gs(&self.space, self.m, seq + 1, &suffix).expect("valid rebuild");
        self.seqs[seq] = pad_to_gtilde(&rows, self.q_max);
        let mut fixed: Vec<(usize, u32)> = (0..self.m).map(|c| (c, 0)).collect();
        for (i, &v) in suffix.iter().enumerate() {
            fixed.push((self.m + 1 + i, v));
        }
        self.seeds[seq] = CylinderSet::from_fixed(self.space.num_units(), &fixed).unwrap();
        self.suffixes[seq] = suffix;
    }
}

/// Outcome of schedule validation: pass/fail with the first counterexamples.
#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub ok: bool,
    pub failures: Vec<String>,
    /// Covered state count after each depth, starting at depth 0 (seeds only).
    pub coverage_by_depth: Vec<usize>,
}

/// Checks per-level disjointness across sequences, suffix distinctness,
/// sharing-unit distinctness per level, and full coverage at terminal depth.
pub fn validate_schedule(schedule: &SharingSchedule) -> ScheduleReport {
    let mut failures = Vec::new();

    // suffixes pairwise distinct
    for a in 0..schedule.k {
        for b in a + 1..schedule.k {
            if schedule.suffixes[a] == schedule.suffixes[b] {
                failures.push(format!(
                    "sequences {a} and {b} share the suffix {:?}",
                    schedule.suffixes[a]
                ));
            }
        }
    }

    for level in 1..=schedule.rows_per_seq {
        let rows = schedule.rows_at_level(level);
        for a in 0..rows.len() {
            for b in a + 1..rows.len() {
                if !rows[a].cylinder.is_disjoint_with(&rows[b].cylinder) {
                    failures.push(format!(
                        "level {level}: cylinders of sequences {a} and {b} intersect"
                    ));
                }
                if rows[a].unit == rows[b].unit {
                    failures.push(format!(
                        "level {level}: sequences {a} and {b} both share along unit {}",
                        rows[a].unit
                    ));
                }
            }
        }
    }

    let mut coverage_by_depth = Vec::with_capacity(schedule.rows_per_seq + 1);
    let mut prev = 0usize;
    for depth in 0..=schedule.rows_per_seq {
        match schedule.coverage(depth) {
            Ok(mask) => {
                let count = mask.iter().filter(|&&c| c).count();
                if count < prev {
                    failures.push(format!("coverage shrank at depth {depth}"));
                }
                prev = count;
                coverage_by_depth.push(count);
            }
            Err(e) => failures.push(format!("coverage enumeration failed: {e}")),
        }
    }
    if coverage_by_depth.last() != Some(&schedule.space.size()) {
        failures.push(format!(
            "terminal coverage {:?} misses part of the space (size {})",
            coverage_by_depth.last(),
            schedule.space.size()
        ));
    }

    ScheduleReport {
        ok: failures.is_empty(),
        failures,
        coverage_by_depth,
    }
}

//! Salient anchor selection over the agreement score.
//!
//! Selection is a hard top-k: highest score first, ties to the lower
//! index, padded timesteps excluded.

use std::cmp::Ordering;

fn by_score_then_index(s: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b))
}

fn top_valid(s: &[f64], valid: &[bool], range: std::ops::Range<usize>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = range.filter(|&t| valid[t]).collect();
    let cmp = by_score_then_index(s);
    if idx.len() > k {
        idx.select_nth_unstable_by(k, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Indices of the `k` highest-scoring valid timesteps, ordered by
/// descending score.
///
/// With fewer than `k` valid timesteps every valid one is taken and the
/// last is repeated up to length `k`.
pub fn identify_global_anchors(s: &[f64], valid: &[bool], k: usize) -> Vec<usize> {
    assert_eq!(s.len(), valid.len(), "score and mask lengths differ");
    let mut idx = top_valid(s, valid, 0..s.len(), k);
    if idx.len() < k {
        log::warn!("only {} valid timesteps for {} global anchors; repeating the last", idx.len(), k);
        let last = *idx.last().expect("at least one valid timestep");
        idx.resize(k, last);
    }
    idx
}

/// `[start, end)` of window `m` out of `windows` over `t_len` timesteps.
/// Every window spans `floor(t_len / windows)` steps; the remainder goes
/// to the final window.
pub fn window_bounds(t_len: usize, windows: usize, m: usize) -> (usize, usize) {
    let w = t_len / windows;
    let start = m * w;
    let end = if m + 1 == windows { t_len } else { start + w };
    (start, end)
}

/// Per-window top-`k` anchors, one row of `k` indices per window.
///
/// A window with fewer than `k` valid timesteps repeats its best index; a
/// window with none borrows the best valid timestep of the whole sequence.
pub fn identify_local_anchors(s: &[f64], valid: &[bool], windows: usize, k: usize) -> Vec<Vec<usize>> {
    assert_eq!(s.len(), valid.len(), "score and mask lengths differ");
    assert!(windows >= 1 && k >= 1);
    let mut global_best = None;
    (0..windows)
        .map(|m| {
            let (start, end) = window_bounds(s.len(), windows, m);
            let mut idx = top_valid(s, valid, start..end, k);
            if idx.len() < k {
                let fill = match idx.first() {
                    Some(&best) => best,
                    None => *global_best.get_or_insert_with(|| {
                        top_valid(s, valid, 0..s.len(), 1)
                            .first()
                            .copied()
                            .expect("at least one valid timestep")
                    }),
                };
                log::debug!("window {m} has {} valid timesteps for {k} anchors", idx.len());
                idx.resize(k, fill);
            }
            idx
        })
        .collect()
}

//! CLEAR MOT counts, IDF1 and mostly-tracked / mostly-lost ratios.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::frame::MotBox;
use crate::{Error, Result};

/// Default overlap gate for a ground-truth / prediction correspondence.
pub const DEFAULT_IOU_GATE: f64 = 0.5;

/// Minimum-cost assignment for a dense `rows × cols` cost matrix.
///
/// Returns, for every row, the assigned column (`None` for surplus rows when
/// `rows > cols`). Potentials-based Hungarian method, `O(n² m)`.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    debug_assert_eq!(cost.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        let col_to_row = min_cost_assignment(&t, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    let (n, m) = (rows, cols);
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

fn by_frame(boxes: &[MotBox]) -> BTreeMap<u32, Vec<&MotBox>> {
    let mut out: BTreeMap<u32, Vec<&MotBox>> = BTreeMap::new();
    for b in boxes {
        out.entry(b.frame).or_default().push(b);
    }
    out
}

/// Frame-by-frame CLEAR MOT accumulation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClearMot {
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub matches: usize,
    pub gt_count: usize,
    /// Per ground-truth id: `(frames matched, frames present)`.
    pub coverage: BTreeMap<i64, (usize, usize)>,
}

impl ClearMot {
    pub fn mota(&self) -> Result<f64> {
        if self.gt_count == 0 {
            return Err(Error::Undefined("MOTA is undefined without ground truth"));
        }
        Ok(1.0 - (self.fp + self.fn_ + self.idsw) as f64 / self.gt_count as f64)
    }
}

/// CLEAR MOT correspondence protocol. Correspondences from earlier frames are
/// kept while they still overlap by at least `iou_thr`; the remaining pairs
/// are matched by an optimal assignment maximising total IOU among gated
/// pairs. A ground-truth id matched to a different prediction id than its
/// last match counts as an identity switch.
pub fn clear_mot(gt: &[MotBox], pred: &[MotBox], iou_thr: f64) -> ClearMot {
    let gt_frames = by_frame(gt);
    let pred_frames = by_frame(pred);
    let mut frames: Vec<u32> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();

    let empty: Vec<&MotBox> = Vec::new();
    let mut last_match: BTreeMap<i64, i64> = BTreeMap::new();
    let mut acc = ClearMot::default();
    for f in frames {
        let gs = gt_frames.get(&f).unwrap_or(&empty);
        let ps = pred_frames.get(&f).unwrap_or(&empty);
        acc.gt_count += gs.len();
        let mut g_done = vec![false; gs.len()];
        let mut p_done = vec![false; ps.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();

        for (gi, g) in gs.iter().enumerate() {
            let Some(&pid) = last_match.get(&g.id) else {
                continue;
            };
            if let Some(pi) = ps
                .iter()
                .enumerate()
                .position(|(pi, p)| !p_done[pi] && p.id == pid && g.iou(p) >= iou_thr)
            {
                g_done[gi] = true;
                p_done[pi] = true;
                pairs.push((gi, pi));
            }
        }

        let rg: Vec<usize> = (0..gs.len()).filter(|&i| !g_done[i]).collect();
        let rp: Vec<usize> = (0..ps.len()).filter(|&i| !p_done[i]).collect();
        if !rg.is_empty() && !rp.is_empty() {
            // Gated-out pairs cost more than any full set of valid pairs, so
            // the optimum maximises the number of matches first.
            let forbidden = 1.0 + rg.len().max(rp.len()) as f64;
            let mut cost = vec![forbidden; rg.len() * rp.len()];
            for (i, &gi) in rg.iter().enumerate() {
                for (j, &pj) in rp.iter().enumerate() {
                    let o = gs[gi].iou(ps[pj]);
                    if o >= iou_thr {
                        cost[i * rp.len() + j] = 1.0 - o;
                    }
                }
            }
            for (i, j) in min_cost_assignment(&cost, rg.len(), rp.len())
                .into_iter()
                .enumerate()
            {
                let Some(j) = j else { continue };
                if cost[i * rp.len() + j] < forbidden {
                    let (gi, pj) = (rg[i], rp[j]);
                    if let Some(&prev) = last_match.get(&gs[gi].id) {
                        if prev != ps[pj].id {
                            acc.idsw += 1;
                        }
                    }
                    g_done[gi] = true;
                    p_done[pj] = true;
                    pairs.push((gi, pj));
                }
            }
        }

        for &(gi, pi) in &pairs {
            last_match.insert(gs[gi].id, ps[pi].id);
        }
        acc.matches += pairs.len();
        acc.fn_ += g_done.iter().filter(|d| !**d).count();
        acc.fp += p_done.iter().filter(|d| !**d).count();
        for (gi, g) in gs.iter().enumerate() {
            let e = acc.coverage.entry(g.id).or_insert((0, 0));
            e.1 += 1;
            if g_done[gi] {
                e.0 += 1;
            }
        }
    }
    acc
}

/// Identity-level precision/recall via the best global one-to-one mapping
/// between ground-truth ids and predicted ids.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdScores {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

impl IdScores {
    pub fn idf1(&self) -> Result<f64> {
        let denom = 2 * self.idtp + self.idfp + self.idfn;
        if denom == 0 {
            return Err(Error::Undefined("IDF1 is undefined for empty inputs"));
        }
        Ok(2.0 * self.idtp as f64 / denom as f64)
    }
}

/// Number of frames in which each `(gt id, pred id)` pair overlaps by at
/// least `iou_thr`, as a dense matrix over the sorted id lists.
pub fn cooccurrence(gt: &[MotBox], pred: &[MotBox], iou_thr: f64) -> (Vec<i64>, Vec<i64>, Vec<usize>) {
    let mut gids: Vec<i64> = gt.iter().map(|b| b.id).collect();
    gids.sort_unstable();
    gids.dedup();
    let mut pids: Vec<i64> = pred.iter().map(|b| b.id).collect();
    pids.sort_unstable();
    pids.dedup();
    let mut counts = vec![0usize; gids.len() * pids.len()];
    let pred_frames = by_frame(pred);
    for g in gt {
        let Some(ps) = pred_frames.get(&g.frame) else {
            continue;
        };
        let gi = gids.binary_search(&g.id).expect("id collected above");
        for p in ps {
            if g.iou(p) >= iou_thr {
                let pi = pids.binary_search(&p.id).expect("id collected above");
                counts[gi * pids.len() + pi] += 1;
            }
        }
    }
    (gids, pids, counts)
}

pub fn id_scores(gt: &[MotBox], pred: &[MotBox], iou_thr: f64) -> IdScores {
    let (gids, pids, counts) = cooccurrence(gt, pred, iou_thr);
    let cost: Vec<f64> = counts.iter().map(|&c| -(c as f64)).collect();
    let idtp: usize = min_cost_assignment(&cost, gids.len(), pids.len())
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| counts[i * pids.len() + j]))
        .sum();
    IdScores {
        idtp,
        idfp: pred.len() - idtp,
        idfn: gt.len() - idtp,
    }
}

pub fn idf1(gt: &[MotBox], pred: &[MotBox], iou_thr: f64) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Undefined("IDF1 is undefined without ground truth"));
    }
    id_scores(gt, pred, iou_thr).idf1()
}

/// Coverage at or above this marks an identity as mostly tracked.
pub const MT_COVERAGE: f64 = 0.8;
/// Coverage at or below this marks an identity as mostly lost.
pub const ML_COVERAGE: f64 = 0.2;

/// Fractions of ground-truth identities that are mostly tracked and mostly
/// lost, from a finished CLEAR accumulation.
pub fn mt_ml_from(acc: &ClearMot) -> Result<(f64, f64)> {
    let n = acc.coverage.len();
    if n == 0 {
        return Err(Error::Undefined("MT/ML are undefined without ground truth"));
    }
    let mut mt = 0;
    let mut ml = 0;
    for &(matched, total) in acc.coverage.values() {
        let cov = matched as f64 / total as f64;
        if cov >= MT_COVERAGE {
            mt += 1;
        }
        if cov <= ML_COVERAGE {
            ml += 1;
        }
    }
    Ok((mt as f64 / n as f64, ml as f64 / n as f64))
}

pub fn mt_ml(gt: &[MotBox], pred: &[MotBox], iou_thr: f64) -> Result<(f64, f64)> {
    mt_ml_from(&clear_mot(gt, pred, iou_thr))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mota: f64,
    pub idf1: f64,
    pub mt_ratio: f64,
    pub ml_ratio: f64,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub gt_count: usize,
    pub restored_count: usize,
}

/// Runs every metric. `restored_count` is carried through from the tracker.
pub fn evaluate(gt: &[MotBox], pred: &[MotBox], iou_thr: f64, restored_count: usize) -> Result<EvalReport> {
    let acc = clear_mot(gt, pred, iou_thr);
    let mota = acc.mota()?;
    let (mt_ratio, ml_ratio) = mt_ml_from(&acc)?;
    Ok(EvalReport {
        mota,
        idf1: idf1(gt, pred, iou_thr)?,
        mt_ratio,
        ml_ratio,
        fp: acc.fp,
        fn_: acc.fn_,
        idsw: acc.idsw,
        gt_count: acc.gt_count,
        restored_count,
    })
}

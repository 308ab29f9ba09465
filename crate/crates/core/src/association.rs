//! Tracklet lifecycle, greedy association and the per-frame pipeline.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::detection::{
    decode_boxes, greedy_nms, iou, BBox, BarParams, DecodeMode, DEFAULT_IOU_THR, DEFAULT_SCORE_THR,
};
use crate::error::{invalid, shape_err};
use crate::frame::{FrameContainer, MotBox};
use crate::fusion::{fuse, Candidate, FusionConfig};
use crate::numerics::{dot, l2_normalize_in_place, Grid};
use crate::recheck::{
    aggregate, cross_correlate, normalize_cells, refine, transductive_detections, EmbeddingSet,
    RefineWeights, DEFAULT_RADIUS,
};
use crate::Result;

/// Frames a tracklet survives without a match.
pub const DEFAULT_RETENTION: u32 = 30;
/// Public detections overlapping a tracked box at or above this IOU never
/// start a new trajectory.
pub const PUBLIC_SPAWN_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingMode {
    /// Keep the embedding from the tracklet's first frame.
    First,
    /// Replace with the latest matched embedding.
    Last,
    /// Exponential moving average, renormalised.
    #[default]
    Updated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Active,
    Removed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u64,
    pub embedding: Vec<f32>,
    pub last_box: BBox,
    pub miss_count: u32,
    pub state: TrackState,
    pub history: Vec<(u32, BBox)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Retention window `K`.
    pub retention: u32,
    /// Momentum of the embedding moving average.
    pub alpha: f32,
    pub emb_match_thr: f32,
    pub iou_match_thr: f32,
    pub embedding_mode: EmbeddingMode,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            retention: DEFAULT_RETENTION,
            alpha: 0.9,
            emb_match_thr: 0.6,
            iou_match_thr: 0.5,
            embedding_mode: EmbeddingMode::Updated,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, v) in [
            ("emb_match_thr", self.emb_match_thr),
            ("iou_match_thr", self.iou_match_thr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid!("{} must lie in [0, 1], got {}", name, v));
            }
        }
        if self.retention == 0 {
            return Err(invalid!("retention K must be at least 1"));
        }
        Ok(())
    }
}

/// Reads one normalised embedding per box at the box's centre cell.
pub fn extract_embeddings(boxes: &[BBox], f_id: &Grid) -> EmbeddingSet {
    let mut set = EmbeddingSet::new(f_id.channels());
    if f_id.cells() == 0 {
        return set;
    }
    for (i, b) in boxes.iter().enumerate() {
        let (y, x) = b.center_cell(f_id.height(), f_id.width());
        set.push(i as u64, f_id.cell(y, x))
            .expect("grid cells have the set's dimension");
    }
    set
}

/// Greedy matching on a dense `rows × cols` score matrix: repeatedly take the
/// largest remaining entry that reaches `thr` and retire its row and column.
/// Ties go to the lower row, then the lower column.
pub fn greedy_match(scores: &[f64], rows: usize, cols: usize, thr: f64) -> Vec<(usize, usize)> {
    debug_assert_eq!(scores.len(), rows * cols);
    let mut entries: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| scores[r * cols + c] >= thr)
        .collect();
    entries.sort_by(|a, b| {
        scores[b.0 * cols + b.1]
            .total_cmp(&scores[a.0 * cols + a.1])
            .then(a.cmp(b))
    });
    let mut row_used = alloc::vec![false; rows];
    let mut col_used = alloc::vec![false; cols];
    let mut out = Vec::new();
    for (r, c) in entries {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            out.push((r, c));
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// `(tracklet id, box index)` pairs.
    pub matches: Vec<(u64, usize)>,
    pub unmatched_tracklets: Vec<u64>,
    pub unmatched_boxes: Vec<usize>,
}

/// Two-stage greedy association: cosine similarity of embeddings first, then
/// IOU against each tracklet's last box for whatever is left.
pub fn associate(
    tracklets: &[Tracklet],
    boxes: &[BBox],
    e_set: &EmbeddingSet,
    cfg: &TrackerConfig,
) -> Result<Assignment> {
    if boxes.len() != e_set.len() {
        return Err(shape_err!(
            "{} boxes but {} embeddings",
            boxes.len(),
            e_set.len()
        ));
    }
    let (nt, nb) = (tracklets.len(), boxes.len());
    let mut sim = alloc::vec![0.0f64; nt * nb];
    for (r, t) in tracklets.iter().enumerate() {
        if t.embedding.len() != e_set.dim() {
            return Err(shape_err!(
                "tracklet {} has {} dims, embeddings have {}",
                t.id,
                t.embedding.len(),
                e_set.dim()
            ));
        }
        for c in 0..nb {
            sim[r * nb + c] = dot(&t.embedding, e_set.get(c));
        }
    }
    let first = greedy_match(&sim, nt, nb, f64::from(cfg.emb_match_thr));

    let mut row_done = alloc::vec![false; nt];
    let mut col_done = alloc::vec![false; nb];
    for &(r, c) in &first {
        row_done[r] = true;
        col_done[c] = true;
    }
    let rest_rows: Vec<usize> = (0..nt).filter(|&r| !row_done[r]).collect();
    let rest_cols: Vec<usize> = (0..nb).filter(|&c| !col_done[c]).collect();
    let mut overlap = alloc::vec![0.0f64; rest_rows.len() * rest_cols.len()];
    for (i, &r) in rest_rows.iter().enumerate() {
        for (j, &c) in rest_cols.iter().enumerate() {
            overlap[i * rest_cols.len() + j] = iou(&tracklets[r].last_box, &boxes[c]);
        }
    }
    let second = greedy_match(
        &overlap,
        rest_rows.len(),
        rest_cols.len(),
        f64::from(cfg.iou_match_thr),
    );

    let mut matches: Vec<(usize, usize)> = first;
    matches.extend(second.into_iter().map(|(i, j)| (rest_rows[i], rest_cols[j])));
    for &(r, c) in &matches {
        row_done[r] = true;
        col_done[c] = true;
    }
    Ok(Assignment {
        matches: matches
            .into_iter()
            .map(|(r, c)| (tracklets[r].id, c))
            .collect(),
        unmatched_tracklets: (0..nt)
            .filter(|&r| !row_done[r])
            .map(|r| tracklets[r].id)
            .collect(),
        unmatched_boxes: (0..nb).filter(|&c| !col_done[c]).collect(),
    })
}

/// Applies an assignment: refreshes matched tracklets, ages unmatched ones
/// and spawns a tracklet for every unmatched box. Returns the ids spawned.
pub fn update_tracklets(
    tracklets: &mut [Tracklet],
    assignment: &Assignment,
    boxes: &[BBox],
    e_set: &EmbeddingSet,
    frame: u32,
    cfg: &TrackerConfig,
    next_id: &mut u64,
) -> Vec<Tracklet> {
    for &(id, bi) in &assignment.matches {
        let Some(t) = tracklets.iter_mut().find(|t| t.id == id) else {
            continue;
        };
        t.miss_count = 0;
        t.last_box = boxes[bi];
        t.history.push((frame, boxes[bi]));
        let new = e_set.get(bi);
        match cfg.embedding_mode {
            EmbeddingMode::First => {}
            EmbeddingMode::Last => t.embedding.copy_from_slice(new),
            EmbeddingMode::Updated => {
                let a = f64::from(cfg.alpha);
                for (old, &n) in t.embedding.iter_mut().zip(new) {
                    *old = (a * f64::from(*old) + (1.0 - a) * f64::from(n)) as f32;
                }
                l2_normalize_in_place(&mut t.embedding);
            }
        }
    }
    for &id in &assignment.unmatched_tracklets {
        if let Some(t) = tracklets.iter_mut().find(|t| t.id == id) {
            t.miss_count += 1;
            if t.miss_count >= cfg.retention {
                t.state = TrackState::Removed;
            }
        }
    }
    assignment
        .unmatched_boxes
        .iter()
        .map(|&bi| {
            let id = *next_id;
            *next_id += 1;
            Tracklet {
                id,
                embedding: e_set.get(bi).to_vec(),
                last_box: boxes[bi],
                miss_count: 0,
                state: TrackState::Active,
                history: alloc::vec![(frame, boxes[bi])],
            }
        })
        .collect()
}

/// Everything the per-frame pipeline needs besides the tracker state.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tracker: TrackerConfig,
    pub decode: DecodeMode,
    pub bar: BarParams,
    pub score_thr: f32,
    pub nms_iou_thr: f32,
    /// Shrinking radius; `None` sums the full response maps.
    pub radius: Option<usize>,
    pub fusion: FusionConfig,
    pub recheck: bool,
    /// Pixels per feature-map cell.
    pub stride: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            decode: DecodeMode::Bar,
            bar: BarParams::default(),
            score_thr: DEFAULT_SCORE_THR,
            nms_iou_thr: DEFAULT_IOU_THR,
            radius: Some(DEFAULT_RADIUS),
            fusion: FusionConfig::default(),
            recheck: true,
            stride: 8.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        for (name, v) in [("score_thr", self.score_thr), ("nms_iou_thr", self.nms_iou_thr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid!("{} must lie in [0, 1], got {}", name, v));
            }
        }
        if !(self.stride > 0.0 && self.stride.is_finite()) {
            return Err(invalid!("stride must be positive, got {}", self.stride));
        }
        Ok(())
    }

    /// Pixel-space MOT row to a box in cells.
    pub fn mot_to_cells(&self, m: &MotBox) -> BBox {
        let s = f64::from(self.stride);
        BBox::from_corner(
            (m.x / s) as f32,
            (m.y / s) as f32,
            (m.w / s) as f32,
            (m.h / s) as f32,
            m.conf.clamp(0.0, 1.0) as f32,
        )
    }

    pub fn cells_to_mot(&self, frame: u32, id: i64, b: &BBox) -> MotBox {
        let s = f64::from(self.stride);
        MotBox {
            frame,
            id,
            x: b.left() * s,
            y: b.top() * s,
            w: f64::from(b.w) * s,
            h: f64::from(b.h) * s,
            conf: f64::from(b.score),
        }
    }
}

/// One emitted track box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOutput {
    pub id: u64,
    pub bbox: BBox,
    pub restored: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub frame: u32,
    /// Sorted by tracklet id.
    pub tracks: Vec<TrackOutput>,
    pub base_count: usize,
    pub trans_count: usize,
    /// Set when the frame failed validation and was treated as all-miss.
    pub skipped: Option<String>,
}

/// Per-sequence tracker state.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: PipelineConfig,
    weights: RefineWeights,
    tracklets: Vec<Tracklet>,
    next_id: u64,
    removed: usize,
}

impl Tracker {
    pub fn new(cfg: PipelineConfig, weights: RefineWeights) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            weights,
            tracklets: Vec::new(),
            next_id: 1,
            removed: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Active tracklets, oldest first.
    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn removed_count(&self) -> usize {
        self.removed
    }

    /// Runs the full pipeline on one frame. `public` replaces the detector's
    /// own boxes when given (pixel units, this frame only).
    pub fn step(&mut self, frame: &FrameContainer, public: Option<&[MotBox]>) -> StepOutput {
        match self.try_step(frame, public) {
            Ok(out) => out,
            Err(e) => {
                let all_missed = Assignment {
                    unmatched_tracklets: self.tracklets.iter().map(|t| t.id).collect(),
                    ..Assignment::default()
                };
                let empty = EmbeddingSet::new(0);
                update_tracklets(
                    &mut self.tracklets,
                    &all_missed,
                    &[],
                    &empty,
                    frame.frame_index,
                    &self.cfg.tracker,
                    &mut self.next_id,
                );
                self.prune();
                StepOutput {
                    frame: frame.frame_index,
                    skipped: Some(e.to_string()),
                    ..StepOutput::default()
                }
            }
        }
    }

    fn try_step(&mut self, frame: &FrameContainer, public: Option<&[MotBox]>) -> Result<StepOutput> {
        frame.validate()?;
        let cfg = &self.cfg;
        let mut f_id = frame.embed.clone();
        normalize_cells(&mut f_id);
        let decoded = decode_boxes(&frame.prob, &frame.boxes, cfg.decode, cfg.bar)?;

        let d_base: Vec<BBox> = match public {
            Some(rows) => rows.iter().map(|m| cfg.mot_to_cells(m)).collect(),
            None => greedy_nms(&decoded, cfg.score_thr, cfg.nms_iou_thr),
        };

        let d_trans = if cfg.recheck && !self.tracklets.is_empty() {
            let mut e_prev = EmbeddingSet::new(f_id.channels());
            for t in &self.tracklets {
                e_prev.push(t.id, &t.embedding)?;
            }
            let stack = cross_correlate(&e_prev, &f_id)?;
            let m_s = aggregate(&stack, cfg.radius);
            let m_p = refine(&m_s, &frame.feat, &self.weights)?;
            transductive_detections(&m_p, &decoded, cfg.score_thr, cfg.nms_iou_thr)?
        } else {
            Vec::new()
        };

        let candidates: Vec<Candidate> = fuse(&d_trans, &d_base, cfg.fusion);
        let boxes: Vec<BBox> = candidates.iter().map(|c| c.bbox).collect();
        let e_set = extract_embeddings(&boxes, &f_id);
        let mut assignment = associate(&self.tracklets, &boxes, &e_set, &cfg.tracker)?;

        if public.is_some() {
            // Only public boxes clear of every tracked box may start a track.
            let tracked: Vec<BBox> = assignment.matches.iter().map(|&(_, b)| boxes[b]).collect();
            assignment.unmatched_boxes.retain(|&b| {
                !candidates[b].restored
                    && tracked.iter().all(|t| iou(t, &boxes[b]) < PUBLIC_SPAWN_IOU)
            });
        }

        let spawned = update_tracklets(
            &mut self.tracklets,
            &assignment,
            &boxes,
            &e_set,
            frame.frame_index,
            &cfg.tracker,
            &mut self.next_id,
        );

        let mut tracks: Vec<TrackOutput> = assignment
            .matches
            .iter()
            .map(|&(id, b)| TrackOutput {
                id,
                bbox: boxes[b],
                restored: candidates[b].restored,
            })
            .collect();
        tracks.extend(spawned.iter().zip(&assignment.unmatched_boxes).map(|(t, &b)| {
            TrackOutput {
                id: t.id,
                bbox: boxes[b],
                restored: candidates[b].restored,
            }
        }));
        tracks.sort_by_key(|t| t.id);
        self.tracklets.extend(spawned);
        self.prune();

        Ok(StepOutput {
            frame: frame.frame_index,
            tracks,
            base_count: d_base.len(),
            trans_count: d_trans.len(),
            skipped: None,
        })
    }

    fn prune(&mut self) {
        let before = self.tracklets.len();
        self.tracklets.retain(|t| t.state == TrackState::Active);
        self.removed += before - self.tracklets.len();
    }

    /// MOT rows (pixel units) for one step's output.
    pub fn to_mot_rows(&self, out: &StepOutput) -> Vec<MotBox> {
        out.tracks
            .iter()
            .map(|t| self.cfg.cells_to_mot(out.frame, t.id as i64, &t.bbox))
            .collect()
    }
}

/// Result of tracking a whole sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceOutcome {
    pub rows: Vec<MotBox>,
    pub frames: usize,
    pub restored: usize,
    pub skipped: Vec<(u32, String)>,
}

/// Tracks every frame in order. `public` holds pixel-space detections for the
/// whole sequence; rows are picked per frame by their `frame` field.
pub fn track_sequence<I>(
    frames: I,
    cfg: PipelineConfig,
    weights: RefineWeights,
    public: Option<&[MotBox]>,
) -> Result<SequenceOutcome>
where
    I: IntoIterator,
    I::Item: core::borrow::Borrow<FrameContainer>,
{
    use core::borrow::Borrow;
    let mut tracker = Tracker::new(cfg, weights)?;
    let mut outcome = SequenceOutcome::default();
    let mut per_frame: Vec<MotBox> = Vec::new();
    for frame in frames {
        let frame = frame.borrow();
        let dets = public.map(|all| {
            per_frame.clear();
            per_frame.extend(all.iter().filter(|m| m.frame == frame.frame_index).copied());
            per_frame.as_slice()
        });
        let out = tracker.step(frame, dets);
        outcome.frames += 1;
        outcome.restored += out.tracks.iter().filter(|t| t.restored).count();
        if let Some(reason) = &out.skipped {
            outcome.skipped.push((out.frame, reason.clone()));
        }
        outcome.rows.extend(tracker.to_mot_rows(&out));
    }
    Ok(outcome)
}

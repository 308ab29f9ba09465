//! Deterministic synthetic sequences with controllable detector dropout.
//!
//! Targets move linearly and bounce off the grid border. Every frame carries
//! detector maps that are exact apart from one failure mode: with probability
//! `dropout` a target's foreground score collapses to 0.01, so the detector
//! sees it as background while its embedding and box regression stay intact.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::detection::{encode_offset_bar, BarParams, BBox};
use crate::error::invalid;
use crate::frame::{FrameContainer, MotBox, EMBED_DIM, FEAT_DIM};
use crate::numerics::{dot, l2_normalize_in_place, Grid};
use crate::Result;

/// Foreground score left on a dropped target's centre cell.
pub const DROPPED_PROB: f32 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub num_targets: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Speed range in cells per frame.
    pub speed: (f64, f64),
    /// Box width range in cells.
    pub box_w: (f64, f64),
    /// Box height range in cells.
    pub box_h: (f64, f64),
    pub dropout: f64,
    /// Norm of the Gaussian perturbation added to identity embeddings.
    pub embedding_noise: f64,
    /// Highest cosine similarity a background cell may have with any identity.
    pub clutter_similarity: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub feat_dim: usize,
    /// Scale used to encode box offsets; must match the tracker's decode.
    pub bar: BarParams,
    /// Pixels per cell for the ground-truth rows.
    pub stride: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_targets: 6,
            height: 24,
            width: 32,
            frames: 200,
            speed: (0.1, 0.5),
            box_w: (2.0, 3.5),
            box_h: (4.0, 6.5),
            dropout: 0.3,
            embedding_noise: 0.0,
            clutter_similarity: 0.3,
            seed: 0,
            embed_dim: EMBED_DIM,
            feat_dim: FEAT_DIM,
            bar: BarParams::default(),
            stride: 8.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid!("grid must be non-empty"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.clutter_similarity) {
            return Err(invalid!(
                "clutter_similarity must lie in [0, 1), got {}",
                self.clutter_similarity
            ));
        }
        if !(self.embedding_noise >= 0.0 && self.embedding_noise.is_finite()) {
            return Err(invalid!("embedding_noise must be non-negative"));
        }
        if self.embed_dim < 2 {
            return Err(invalid!("embed_dim must be at least 2"));
        }
        if !(self.stride > 0.0) {
            return Err(invalid!("stride must be positive"));
        }
        for (name, (lo, hi)) in [("speed", self.speed), ("box_w", self.box_w), ("box_h", self.box_h)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(invalid!("{} range ({}, {}) is invalid", name, lo, hi));
            }
        }
        if self.box_w.0 < 1.0 || self.box_h.0 < 1.0 {
            return Err(invalid!("boxes must be at least one cell wide and high"));
        }
        if self.box_w.1 > self.width as f64 || self.box_h.1 > self.height as f64 {
            return Err(invalid!(
                "boxes up to {}x{} cells do not fit a {}x{} grid",
                self.box_w.1,
                self.box_h.1,
                self.width,
                self.height
            ));
        }
        // Any cell inside a box must be able to encode the offset to its centre.
        let reach = self.box_w.1.max(self.box_h.1) / 2.0 + 0.5;
        if reach >= f64::from(self.bar.h_scale()) / 2.0 {
            return Err(invalid!(
                "boxes reach {} cells from their centre, beyond the decode range",
                reach
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TargetState {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// A generated scenario. Frames are produced on demand, so long sequences do
/// not need to be held in memory at once.
#[derive(Debug, Clone)]
pub struct Scenario {
    cfg: ScenarioConfig,
    identities: Vec<Vec<f32>>,
    /// `states[t][i]`: target `i` at frame index `t` (0-based).
    states: Vec<Vec<TargetState>>,
    dropped: Vec<Vec<bool>>,
    /// Positional pattern shared by every frame.
    feat: Grid,
}

fn positional_pattern(h: usize, w: usize, channels: usize) -> Grid {
    let mut feat = Grid::zeros(h, w, channels);
    let freqs: Vec<f64> = (0..channels)
        .map(|c| 1.0 / libm::pow(100.0, (c / 2) as f64 * 2.0 / channels as f64))
        .collect();
    for y in 0..h {
        for x in 0..w {
            for (c, slot) in feat.cell_mut(y, x).iter_mut().enumerate() {
                let pos = if c % 2 == 0 { x as f64 } else { y as f64 };
                *slot = libm::sin(pos * freqs[c] + c as f64) as f32;
            }
        }
    }
    feat
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..dim)
            .map(|_| StandardNormal.sample(rng))
            .map(|x: f64| x as f32)
            .collect();
        if crate::numerics::l2_norm(&v) > 1e-6 {
            l2_normalize_in_place(&mut v);
            return v;
        }
    }
}

impl Scenario {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let identities: Vec<Vec<f32>> = (0..cfg.num_targets)
            .map(|_| gaussian_unit(&mut rng, cfg.embed_dim))
            .collect();

        let (gw, gh) = (cfg.width as f64, cfg.height as f64);
        let mut current: Vec<TargetState> = Vec::with_capacity(cfg.num_targets);
        let mut velocity: Vec<(f64, f64)> = Vec::with_capacity(cfg.num_targets);
        for _ in 0..cfg.num_targets {
            let w = rng.random_range(cfg.box_w.0..=cfg.box_w.1);
            let h = rng.random_range(cfg.box_h.0..=cfg.box_h.1);
            current.push(TargetState {
                cx: rng.random_range(w / 2.0..=gw - w / 2.0),
                cy: rng.random_range(h / 2.0..=gh - h / 2.0),
                w,
                h,
            });
            let speed = rng.random_range(cfg.speed.0..=cfg.speed.1);
            let angle = rng.random_range(0.0..core::f64::consts::TAU);
            velocity.push((speed * libm::cos(angle), speed * libm::sin(angle)));
        }

        // Centres stay strictly inside the grid; boxes may hang over the edge.
        let reflect = |pos: &mut f64, vel: &mut f64, limit: f64| {
            let margin = 1e-3;
            if *pos < margin {
                *pos = 2.0 * margin - *pos;
                *vel = -*vel;
            } else if *pos > limit - margin {
                *pos = 2.0 * (limit - margin) - *pos;
                *vel = -*vel;
            }
            *pos = pos.clamp(margin, limit - margin);
        };
        let mut states = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            if t > 0 {
                for (s, v) in current.iter_mut().zip(velocity.iter_mut()) {
                    s.cx += v.0;
                    s.cy += v.1;
                    reflect(&mut s.cx, &mut v.0, gw);
                    reflect(&mut s.cy, &mut v.1, gh);
                }
            }
            states.push(current.clone());
        }

        // Dropout has its own stream so it does not shift with other draws.
        let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        drop_rng.set_stream(u64::MAX);
        let dropped = (0..cfg.frames)
            .map(|t| {
                (0..cfg.num_targets)
                    .map(|_| {
                        let hit = drop_rng.random_bool(cfg.dropout);
                        t > 0 && hit
                    })
                    .collect()
            })
            .collect();

        let feat = positional_pattern(cfg.height, cfg.width, cfg.feat_dim);
        Ok(Self {
            cfg,
            identities,
            states,
            dropped,
            feat,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn frame_count(&self) -> usize {
        self.cfg.frames
    }

    pub fn identities(&self) -> &[Vec<f32>] {
        &self.identities
    }

    /// Ground-truth box of target `i` (0-based) at frame index `t`, in cells.
    pub fn target_box(&self, t: usize, i: usize) -> BBox {
        let s = self.states[t][i];
        BBox::new(s.cx as f32, s.cy as f32, s.w as f32, s.h as f32, 1.0)
    }

    pub fn is_dropped(&self, t: usize, i: usize) -> bool {
        self.dropped[t][i]
    }

    /// Ground truth in pixels; ids are 1-based target indices.
    pub fn ground_truth(&self) -> Vec<MotBox> {
        let s = self.cfg.stride;
        let mut out = Vec::with_capacity(self.cfg.frames * self.cfg.num_targets);
        for (t, frame) in self.states.iter().enumerate() {
            for (i, st) in frame.iter().enumerate() {
                out.push(MotBox {
                    frame: t as u32 + 1,
                    id: i as i64 + 1,
                    x: (st.cx - st.w / 2.0) * s,
                    y: (st.cy - st.h / 2.0) * s,
                    w: st.w * s,
                    h: st.h * s,
                    conf: 1.0,
                });
            }
        }
        out
    }

    /// `(frame, id)` pairs, 1-based, whose detection was dropped.
    pub fn dropped_pairs(&self) -> Vec<(u32, i64)> {
        let mut out = Vec::new();
        for (t, row) in self.dropped.iter().enumerate() {
            for (i, &d) in row.iter().enumerate() {
                if d {
                    out.push((t as u32 + 1, i as i64 + 1));
                }
            }
        }
        out
    }

    fn center_cell(&self, s: &TargetState) -> (usize, usize) {
        let y = (libm::floor(s.cy) as usize).min(self.cfg.height - 1);
        let x = (libm::floor(s.cx) as usize).min(self.cfg.width - 1);
        (y, x)
    }

    /// Which target, if any, paints cell `(y, x)`. A target always owns its
    /// own centre cell (lowest index wins a shared one); other cells inside
    /// one or more boxes go to the nearest centre.
    fn owners(&self, t: usize) -> Vec<Option<usize>> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let states = &self.states[t];
        let mut owner = vec![None; h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut best: Option<(usize, f64)> = None;
                for (i, s) in states.iter().enumerate() {
                    if (px - s.cx).abs() >= s.w / 2.0 || (py - s.cy).abs() >= s.h / 2.0 {
                        continue;
                    }
                    let d = (px - s.cx) * (px - s.cx) + (py - s.cy) * (py - s.cy);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                owner[y * w + x] = best.map(|(i, _)| i);
            }
        }
        for (i, s) in states.iter().enumerate().rev() {
            let (y, x) = self.center_cell(s);
            owner[y * w + x] = Some(i);
        }
        owner
    }

    fn clutter_vector(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let dim = self.cfg.embed_dim;
        let bound = self.cfg.clutter_similarity;
        loop {
            let mut v = gaussian_unit(rng, dim);
            if !self.identities.is_empty() && bound > 0.0 {
                // Tilt towards one identity by a cosine drawn below the bound.
                let anchor = &self.identities[rng.random_range(0..self.identities.len())];
                let s = rng.random_range(0.0..bound);
                let along = dot(&v, anchor) as f32;
                v.iter_mut().zip(anchor).for_each(|(x, a)| *x -= along * a);
                l2_normalize_in_place(&mut v);
                let k = libm::sqrt(1.0 - s * s) as f32;
                v.iter_mut()
                    .zip(anchor)
                    .for_each(|(x, a)| *x = k * *x + s as f32 * a);
                l2_normalize_in_place(&mut v);
            }
            if self.identities.iter().all(|e| dot(&v, e) <= bound) {
                return v;
            }
        }
    }

    fn identity_sample(&self, i: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let e = &self.identities[i];
        if self.cfg.embedding_noise == 0.0 {
            return e.clone();
        }
        let scale = self.cfg.embedding_noise / libm::sqrt(self.cfg.embed_dim as f64);
        let mut v: Vec<f32> = e
            .iter()
            .map(|&x| {
                let n: f64 = StandardNormal.sample(rng);
                (f64::from(x) + scale * n) as f32
            })
            .collect();
        l2_normalize_in_place(&mut v);
        v
    }

    /// Detector output for frame index `t` (0-based; `frame_index` is `t + 1`).
    pub fn frame(&self, t: usize) -> FrameContainer {
        let cfg = &self.cfg;
        let (h, w) = (cfg.height, cfg.width);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(t as u64 + 1);
        let owners = self.owners(t);
        let states = &self.states[t];

        let mut prob = Grid::zeros(h, w, 1);
        let mut boxes = Grid::zeros(h, w, 4);
        let mut embed = Grid::zeros(h, w, cfg.embed_dim);

        for y in 0..h {
            for x in 0..w {
                let v = match owners[y * w + x] {
                    Some(i) => {
                        let s = &states[i];
                        let dx = s.cx - (x as f64 + 0.5);
                        let dy = s.cy - (y as f64 + 0.5);
                        let raw = boxes.cell_mut(y, x);
                        raw[0] = encode_offset_bar(dx, cfg.bar).expect("validated reach");
                        raw[1] = encode_offset_bar(dy, cfg.bar).expect("validated reach");
                        raw[2] = libm::log(s.w) as f32;
                        raw[3] = libm::log(s.h) as f32;
                        self.identity_sample(i, &mut rng)
                    }
                    None => self.clutter_vector(&mut rng),
                };
                embed.cell_mut(y, x).copy_from_slice(&v);
            }
        }

        for (i, s) in states.iter().enumerate() {
            let (y, x) = self.center_cell(s);
            let p = if self.dropped[t][i] { DROPPED_PROB } else { 1.0 };
            if p > prob.get(y, x, 0) {
                prob.set(y, x, 0, p);
            }
        }

        FrameContainer {
            frame_index: t as u32 + 1,
            prob,
            boxes,
            embed,
            feat: self.feat.clone(),
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = FrameContainer> + '_ {
        (0..self.cfg.frames).map(move |t| self.frame(t))
    }
}

/// Materialised scenario: every frame, the ground truth and the dropped pairs.
#[derive(Debug, Clone)]
pub struct Generated {
    pub frames: Vec<FrameContainer>,
    pub gt: Vec<MotBox>,
    pub dropped: Vec<(u32, i64)>,
}

pub fn generate(cfg: ScenarioConfig) -> Result<Generated> {
    let sc = Scenario::new(cfg)?;
    Ok(Generated {
        frames: sc.frames().collect(),
        gt: sc.ground_truth(),
        dropped: sc.dropped_pairs(),
    })
}

/// How many dropped detections came back under the right identity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RestorationReport {
    pub dropped: usize,
    pub restored: usize,
    /// `(frame, dropped, restored)` for every frame with a drop.
    pub per_frame: Vec<(u32, usize, usize)>,
}

impl RestorationReport {
    /// Restoration recall; 1 when nothing was dropped.
    pub fn recall(&self) -> f64 {
        if self.dropped == 0 {
            1.0
        } else {
            self.restored as f64 / self.dropped as f64
        }
    }
}

/// Checks every dropped `(frame, id)` pair against the tracker output.
///
/// A ground-truth id's tracker identity is the output id that best overlaps
/// it (IOU ≥ 0.5) on its first frame. A dropped pair counts as restored when
/// that identity is reported at that frame with IOU ≥ 0.5 against the truth.
pub fn restoration_report(output: &[MotBox], gt: &[MotBox], dropped: &[(u32, i64)]) -> RestorationReport {
    const GATE: f64 = 0.5;
    let mut first: alloc::collections::BTreeMap<i64, &MotBox> = alloc::collections::BTreeMap::new();
    for g in gt {
        first
            .entry(g.id)
            .and_modify(|b| {
                if g.frame < b.frame {
                    *b = g;
                }
            })
            .or_insert(g);
    }
    let identity = |gid: i64| -> Option<i64> {
        let g = first.get(&gid)?;
        output
            .iter()
            .filter(|o| o.frame == g.frame)
            .map(|o| (o.id, g.iou(o)))
            .filter(|&(_, v)| v >= GATE)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(id, _)| id)
    };

    let mut report = RestorationReport::default();
    for &(frame, gid) in dropped {
        report.dropped += 1;
        let Some(g) = gt.iter().find(|g| g.frame == frame && g.id == gid) else {
            continue;
        };
        let ok = identity(gid).is_some_and(|tid| {
            output
                .iter()
                .any(|o| o.frame == frame && o.id == tid && g.iou(o) >= GATE)
        });
        if ok {
            report.restored += 1;
        }
        match report.per_frame.last_mut() {
            Some(last) if last.0 == frame => {
                last.1 += 1;
                last.2 += usize::from(ok);
            }
            _ => report.per_frame.push((frame, 1, usize::from(ok))),
        }
    }
    report
}

//! Tracklet propagation by global embedding search.
//!
//! Each live tracklet embedding is correlated against every cell of the
//! current embedding grid, giving one similarity map per tracklet. Maps are
//! cut down to a square window around their peak, summed, refined with the
//! visual features, and finally used to re-score the frame's decoded boxes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::detection::{greedy_nms, BBox};
use crate::error::{invalid, shape_err};
use crate::frame::NamedTensor;
use crate::numerics::{
    conv3x3_forward, l2_normalize_in_place, matmul_nt, relu_grid, sigmoid_grid, Conv3x3, Grid,
};
use crate::{Error, Result};

/// Shrinking radius used unless configured otherwise.
pub const DEFAULT_RADIUS: usize = 3;

/// Ordered set of unit-length identity embeddings, one per source tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f32>,
    source_ids: Vec<u64>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            source_ids: Vec::new(),
        }
    }

    /// Appends `v` after L2-normalizing it.
    pub fn push(&mut self, source_id: u64, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(shape_err!(
                "embedding has {} dims, set holds {}",
                v.len(),
                self.dim
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let start = self.data.len();
        self.data.extend_from_slice(v);
        l2_normalize_in_place(&mut self.data[start..]);
        self.source_ids.push(source_id);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn source_ids(&self) -> &[u64] {
        &self.source_ids
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.len())
    }

    /// Row-major `n × dim` buffer.
    pub fn as_matrix_data(&self) -> &[f32] {
        &self.data
    }
}

/// One `H×W×1` similarity map per embedding, in embedding order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseStack {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Grid>,
}

/// L2-normalizes every cell vector of an embedding grid in place.
pub fn normalize_cells(grid: &mut Grid) {
    let c = grid.channels();
    if c == 0 {
        return;
    }
    for cell in grid.data_mut().chunks_exact_mut(c) {
        l2_normalize_in_place(cell);
    }
}

/// Correlates every embedding against every cell of `f_id`.
///
/// The grid is viewed as an `(H·W) × C` matrix, so the whole stack is one
/// `n × C` by `C × (H·W)` product whose rows are the per-target maps.
pub fn cross_correlate(e_set: &EmbeddingSet, f_id: &Grid) -> Result<ResponseStack> {
    if f_id.channels() != e_set.dim() {
        return Err(shape_err!(
            "embedding grid has {} channels, embeddings have {}",
            f_id.channels(),
            e_set.dim()
        ));
    }
    let (h, w) = (f_id.height(), f_id.width());
    let cells = h * w;
    let product = matmul_nt(e_set.as_matrix_data(), f_id.data(), e_set.len(), cells, e_set.dim());
    let maps = product
        .chunks_exact(cells.max(1))
        .take(e_set.len())
        .map(|row| Grid::from_vec(h, w, 1, row.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResponseStack {
        height: h,
        width: w,
        maps,
    })
}

/// Position `(y, x)` of the first maximum in row-major order.
pub fn argmax(m: &Grid) -> Option<(usize, usize)> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in m.data().iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| (i / m.width(), i % m.width()))
}

/// Binary `H×W` mask that is 1 within Chebyshev distance `r` of the map's
/// peak and 0 elsewhere.
pub fn shrink_mask(m: &Grid, r: usize) -> Grid {
    let mut mask = Grid::zeros(m.height(), m.width(), 1);
    let Some((cy, cx)) = argmax(m) else {
        return mask;
    };
    let y0 = cy.saturating_sub(r);
    let y1 = (cy + r).min(m.height() - 1);
    let x0 = cx.saturating_sub(r);
    let x1 = (cx + r).min(m.width() - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            mask.set(y, x, 0, 1.0);
        }
    }
    mask
}

/// Sums the (optionally shrunk) response maps. `radius = None` disables
/// shrinking and sums the full maps.
pub fn aggregate(stack: &ResponseStack, radius: Option<usize>) -> Grid {
    let mut acc = vec![0.0f64; stack.height * stack.width];
    for m in &stack.maps {
        match radius {
            Some(r) => {
                let mask = shrink_mask(m, r);
                for ((a, &v), &k) in acc.iter_mut().zip(m.data()).zip(mask.data()) {
                    if k != 0.0 {
                        *a += f64::from(v);
                    }
                }
            }
            None => {
                for (a, &v) in acc.iter_mut().zip(m.data()) {
                    *a += f64::from(v);
                }
            }
        }
    }
    let data = acc.into_iter().map(|v| v as f32).collect();
    Grid::from_vec(stack.height, stack.width, 1, data)
        .expect("aggregate of finite maps is finite")
}

/// Convolution stack of the learned refinement head.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedRefine {
    /// Lifts the 1-channel similarity map to `mid` channels.
    pub conv1: Conv3x3,
    /// Projects back to one channel.
    pub conv2: Conv3x3,
    /// Operates on the enhanced visual feature.
    pub head1: Conv3x3,
    pub head2: Conv3x3,
}

/// Tensor names expected in a refinement weight file.
pub const REFINE_TENSORS: [&str; 8] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "head1.w", "head1.b", "head2.w", "head2.b",
];

impl LearnedRefine {
    pub fn new(conv1: Conv3x3, conv2: Conv3x3, head1: Conv3x3, head2: Conv3x3) -> Result<Self> {
        if conv1.in_channels() != 1
            || conv2.in_channels() != conv1.out_channels()
            || conv2.out_channels() != 1
            || head2.in_channels() != head1.out_channels()
            || head2.out_channels() != 1
        {
            return Err(shape_err!(
                "refine weights must chain 1->{}->1 and {}->{}->1",
                conv1.out_channels(),
                head1.in_channels(),
                head1.out_channels()
            ));
        }
        Ok(Self {
            conv1,
            conv2,
            head1,
            head2,
        })
    }

    /// All-zero weights with the given widths; predicts 0.5 everywhere.
    pub fn zeros(mid: usize, feat: usize, hidden: usize) -> Self {
        Self {
            conv1: Conv3x3::zeros(mid, 1),
            conv2: Conv3x3::zeros(1, mid),
            head1: Conv3x3::zeros(hidden, feat),
            head2: Conv3x3::zeros(1, hidden),
        }
    }

    /// Builds the head from named tensors (`conv1.w` as `out×in×3×3`,
    /// `conv1.b` as `out`, and so on).
    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedTensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| invalid!("weight tensor {:?} missing", name))
        };
        let conv = |prefix: &str| -> Result<Conv3x3> {
            let w = find(&[prefix, ".w"].concat())?;
            let b = find(&[prefix, ".b"].concat())?;
            match w.dims.as_slice() {
                &[o, i, 3, 3] => Conv3x3::new(o, i, w.data.clone(), b.data.clone()),
                other => Err(shape_err!("{}.w must be out x in x 3 x 3, got {:?}", prefix, other)),
            }
        };
        Self::new(conv("conv1")?, conv("conv2")?, conv("head1")?, conv("head2")?)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(8);
        for (prefix, c) in [
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("head1", &self.head1),
            ("head2", &self.head2),
        ] {
            out.push(NamedTensor {
                name: String::from(prefix) + ".w",
                dims: vec![c.out_channels(), c.in_channels(), 3, 3],
                data: c.weights().to_vec(),
            });
            out.push(NamedTensor {
                name: String::from(prefix) + ".b",
                dims: vec![c.out_channels()],
                data: c.bias().to_vec(),
            });
        }
        out
    }
}

/// How the aggregated map is turned into a foreground probability.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum RefineWeights {
    /// `clamp(M_s, 0, 1)`; no learned parameters.
    #[default]
    Bypass,
    Learned(LearnedRefine),
}

/// Turns the aggregated similarity map into the propagated foreground map.
pub fn refine(m_s: &Grid, f_t: &Grid, weights: &RefineWeights) -> Result<Grid> {
    if m_s.channels() != 1 || !m_s.same_spatial(f_t) {
        return Err(shape_err!(
            "refine needs HxWx1 similarity and matching feature grid, got {}x{}x{} and {}x{}",
            m_s.height(),
            m_s.width(),
            m_s.channels(),
            f_t.height(),
            f_t.width()
        ));
    }
    match weights {
        RefineWeights::Bypass => Ok(m_s.map(|v| v.clamp(0.0, 1.0))),
        RefineWeights::Learned(net) => {
            if net.head1.in_channels() != f_t.channels() {
                return Err(shape_err!(
                    "head1 expects {} feature channels, grid has {}",
                    net.head1.in_channels(),
                    f_t.channels()
                ));
            }
            let lifted = relu_grid(&conv3x3_forward(m_s, &net.conv1)?);
            let gate = conv3x3_forward(&lifted, &net.conv2)?;
            let mut enhanced = f_t.clone();
            let c = enhanced.channels();
            for (cell, &g) in enhanced.data_mut().chunks_exact_mut(c.max(1)).zip(gate.data()) {
                cell.iter_mut().for_each(|v| *v *= g);
            }
            let hidden = relu_grid(&conv3x3_forward(&enhanced, &net.head1)?);
            Ok(sigmoid_grid(&conv3x3_forward(&hidden, &net.head2)?))
        }
    }
}

/// Re-scores each cell's decoded box with the propagated map and runs NMS.
pub fn transductive_detections(
    m_p: &Grid,
    boxes: &[BBox],
    score_thr: f32,
    iou_thr: f32,
) -> Result<Vec<BBox>> {
    if boxes.len() != m_p.cells() || m_p.channels() != 1 {
        return Err(shape_err!(
            "{} boxes for a {}x{}x{} map",
            boxes.len(),
            m_p.height(),
            m_p.width(),
            m_p.channels()
        ));
    }
    let rescored: Vec<BBox> = boxes
        .iter()
        .zip(m_p.data())
        .map(|(b, &s)| b.with_score(s.clamp(0.0, 1.0)))
        .collect();
    Ok(greedy_nms(&rescored, score_thr, iou_thr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, l2_normalize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        l2_normalize(&v)
    }

    fn random_embed_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid {
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            data.extend(random_unit(rng, c));
        }
        Grid::from_vec(h, w, c, data).unwrap()
    }

    /// Per-target, per-cell dot products.
    fn correlate_oracle(e: &EmbeddingSet, f: &Grid) -> Vec<Vec<f64>> {
        (0..e.len())
            .map(|i| {
                let mut m = Vec::new();
                for y in 0..f.height() {
                    for x in 0..f.width() {
                        m.push(dot(e.get(i), f.cell(y, x)));
                    }
                }
                m
            })
            .collect()
    }

    #[test]
    fn empty_set_gives_empty_stack() {
        let f = Grid::zeros(4, 4, 8);
        let stack = cross_correlate(&EmbeddingSet::new(8), &f).unwrap();
        assert!(stack.maps.is_empty());
        assert_eq!(aggregate(&stack, Some(3)), Grid::zeros(4, 4, 1));
    }

    #[test]
    fn identical_cell_is_the_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e1 = random_unit(&mut rng, 8);
        let mut f = Grid::zeros(5, 6, 8);
        // Every other cell holds a vector orthogonal to e1.
        let mut ortho = random_unit(&mut rng, 8);
        let d = dot(&ortho, &e1) as f32;
        ortho.iter_mut().zip(&e1).for_each(|(o, e)| *o -= d * e);
        let ortho = l2_normalize(&ortho);
        for y in 0..5 {
            for x in 0..6 {
                f.cell_mut(y, x).copy_from_slice(&ortho);
            }
        }
        f.cell_mut(3, 2).copy_from_slice(&e1);
        let mut set = EmbeddingSet::new(8);
        set.push(1, &e1).unwrap();
        let stack = cross_correlate(&set, &f).unwrap();
        assert_eq!(argmax(&stack.maps[0]), Some((3, 2)));
        assert!((stack.maps[0].get(3, 2, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn correlate_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut set = EmbeddingSet::new(16);
        for i in 0..3 {
            set.push(i, &random_unit(&mut rng, 16)).unwrap();
        }
        let f = random_embed_grid(&mut rng, 8, 8, 16);
        let stack = cross_correlate(&set, &f).unwrap();
        for (map, want) in stack.maps.iter().zip(correlate_oracle(&set, &f)) {
            for (g, w) in map.data().iter().zip(want) {
                assert!((f64::from(*g) - w).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn correlate_rejects_channel_mismatch() {
        let f = Grid::zeros(2, 2, 4);
        assert!(cross_correlate(&EmbeddingSet::new(3), &f).is_err());
    }

    #[test]
    fn shrink_interior_window_is_7x7() {
        let mut m = Grid::zeros(20, 20, 1);
        m.set(10, 9, 0, 1.0);
        let mask = shrink_mask(&m, 3);
        assert_eq!(mask.data().iter().filter(|&&v| v == 1.0).count(), 49);
        for y in 0..20usize {
            for x in 0..20usize {
                let inside = y.abs_diff(10) <= 3 && x.abs_diff(9) <= 3;
                assert_eq!(mask.get(y, x, 0) == 1.0, inside);
            }
        }
    }

    #[test]
    fn shrink_corner_is_clipped() {
        let mut m = Grid::filled(6, 6, 1, -1.0);
        m.set(0, 0, 0, 0.5);
        let mask = shrink_mask(&m, 1);
        assert_eq!(mask.data().iter().filter(|&&v| v == 1.0).count(), 4);
    }

    #[test]
    fn shrink_matches_brute_force_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (h, w, r) = (rng.random_range(1..16), rng.random_range(1..16), rng.random_range(0..5));
            let data = (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let m = Grid::from_vec(h, w, 1, data).unwrap();
            let (mut cy, mut cx, mut best) = (0, 0, f32::NEG_INFINITY);
            for y in 0..h {
                for x in 0..w {
                    if m.get(y, x, 0) > best {
                        (cy, cx, best) = (y, x, m.get(y, x, 0));
                    }
                }
            }
            let mask = shrink_mask(&m, r);
            for y in 0..h {
                for x in 0..w {
                    let inside = y.abs_diff(cy) <= r && x.abs_diff(cx) <= r;
                    assert_eq!(mask.get(y, x, 0) == 1.0, inside);
                }
            }
        }
    }

    #[test]
    fn argmax_ties_take_first() {
        let m = Grid::filled(3, 3, 1, 1.0);
        assert_eq!(argmax(&m), Some((0, 0)));
    }

    #[test]
    fn aggregate_full_radius_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..30).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let m = Grid::from_vec(5, 6, 1, data).unwrap();
        let stack = ResponseStack {
            height: 5,
            width: 6,
            maps: vec![m.clone()],
        };
        assert_eq!(aggregate(&stack, Some(6)), m);
        assert_eq!(aggregate(&stack, None), m);
    }

    #[test]
    fn aggregate_disjoint_windows_paste_additively() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut maps = Vec::new();
        for peak in [(3usize, 3usize), (12, 14)] {
            let data: Vec<f32> = (0..16 * 18).map(|_| rng.random_range(0.0f32..0.5)).collect();
            let mut m = Grid::from_vec(16, 18, 1, data).unwrap();
            m.set(peak.0, peak.1, 0, 1.0);
            maps.push(m);
        }
        let stack = ResponseStack {
            height: 16,
            width: 18,
            maps: maps.clone(),
        };
        let got = aggregate(&stack, Some(3));
        let mut want = vec![0.0f64; 16 * 18];
        for (m, (py, px)) in maps.iter().zip([(3usize, 3usize), (12, 14)]) {
            for y in 0..16usize {
                for x in 0..18usize {
                    if y.abs_diff(py) <= 3 && x.abs_diff(px) <= 3 {
                        want[y * 18 + x] += f64::from(m.get(y, x, 0));
                    }
                }
            }
        }
        for (g, w) in got.data().iter().zip(want) {
            assert!((f64::from(*g) - w).abs() < 1e-6);
        }
        assert!(got.data().iter().filter(|&&v| v != 0.0).count() <= 2 * 49);
    }

    #[test]
    fn bypass_keeps_peak() {
        let mut m_s = Grid::zeros(6, 6, 1);
        m_s.set(2, 4, 0, 1.0);
        let m_p = refine(&m_s, &Grid::zeros(6, 6, 3), &RefineWeights::Bypass).unwrap();
        assert_eq!(m_p.get(2, 4, 0), 1.0);
        assert_eq!(argmax(&m_p), Some((2, 4)));
    }

    #[test]
    fn zero_learned_weights_give_half() {
        let m_s = Grid::filled(5, 4, 1, 0.7);
        let f = Grid::filled(5, 4, 8, 0.3);
        let w = RefineWeights::Learned(LearnedRefine::zeros(16, 8, 4));
        let m_p = refine(&m_s, &f, &w).unwrap();
        assert!(m_p.data().iter().all(|&v| v == 0.5));
    }

    fn random_conv(rng: &mut ChaCha8Rng, o: usize, i: usize) -> Conv3x3 {
        let w = (0..o * i * 9).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let b = (0..o).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        Conv3x3::new(o, i, w, b).unwrap()
    }

    #[test]
    fn learned_refine_matches_conv_chain_and_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = LearnedRefine::new(
            random_conv(&mut rng, 8, 1),
            random_conv(&mut rng, 1, 8),
            random_conv(&mut rng, 6, 5),
            random_conv(&mut rng, 1, 6),
        )
        .unwrap();
        let m_s = Grid::from_vec(7, 9, 1, (0..63).map(|_| rng.random_range(-1.0f32..2.0)).collect()).unwrap();
        let f = Grid::from_vec(7, 9, 5, (0..315).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let m_p = refine(&m_s, &f, &RefineWeights::Learned(net.clone())).unwrap();
        assert_eq!((m_p.height(), m_p.width(), m_p.channels()), (7, 9, 1));
        assert!(m_p.data().iter().all(|&v| v > 0.0 && v < 1.0));

        // Same chain spelled out step by step.
        let gate = conv3x3_forward(&relu_grid(&conv3x3_forward(&m_s, &net.conv1).unwrap()), &net.conv2).unwrap();
        let mut enhanced = f.clone();
        for y in 0..7 {
            for x in 0..9 {
                let g = gate.get(y, x, 0);
                enhanced.cell_mut(y, x).iter_mut().for_each(|v| *v *= g);
            }
        }
        let hidden = relu_grid(&conv3x3_forward(&enhanced, &net.head1).unwrap());
        let logits = conv3x3_forward(&hidden, &net.head2).unwrap();
        for (p, l) in m_p.data().iter().zip(logits.data()) {
            assert!((p - crate::numerics::sigmoid(*l)).abs() < 1e-6);
        }
    }

    #[test]
    fn learned_refine_rejects_feature_width_mismatch() {
        let w = RefineWeights::Learned(LearnedRefine::zeros(4, 8, 4));
        assert!(refine(&Grid::zeros(3, 3, 1), &Grid::zeros(3, 3, 7), &w).is_err());
    }

    #[test]
    fn weights_round_trip_through_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = LearnedRefine::new(
            random_conv(&mut rng, 4, 1),
            random_conv(&mut rng, 1, 4),
            random_conv(&mut rng, 3, 2),
            random_conv(&mut rng, 1, 3),
        )
        .unwrap();
        let tensors = net.to_tensors();
        let names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, REFINE_TENSORS);
        assert_eq!(LearnedRefine::from_tensors(&tensors).unwrap(), net);
        assert!(LearnedRefine::from_tensors(&tensors[1..]).is_err());
    }

    #[test]
    fn transductive_rescoring() {
        let boxes: Vec<BBox> = (0..12)
            .map(|i| BBox::new((i % 4) as f32 * 3.0 + 0.5, (i / 4) as f32 * 3.0 + 0.5, 1.0, 1.0, 0.9))
            .collect();
        let zeros = Grid::zeros(3, 4, 1);
        assert!(transductive_detections(&zeros, &boxes, 0.5, 0.45).unwrap().is_empty());
        let mut peak = Grid::zeros(3, 4, 1);
        peak.set(1, 2, 0, 0.8);
        let got = transductive_detections(&peak, &boxes, 0.5, 0.45).unwrap();
        assert_eq!(got, vec![boxes[6].with_score(0.8)]);
        assert!(transductive_detections(&peak, &boxes[1..], 0.5, 0.45).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn responses_bounded_and_window_count(seed in any::<u64>(), n in 0usize..6, r in 0usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut set = EmbeddingSet::new(12);
                for i in 0..n {
                    set.push(i as u64, &random_unit(&mut rng, 12)).unwrap();
                }
                let f = random_embed_grid(&mut rng, 9, 11, 12);
                let stack = cross_correlate(&set, &f).unwrap();
                for m in &stack.maps {
                    prop_assert!(m.data().iter().all(|v| v.abs() <= 1.0 + 1e-5));
                }
                let m_s = aggregate(&stack, Some(r));
                let nonzero = m_s.data().iter().filter(|&&v| v != 0.0).count();
                prop_assert!(nonzero <= n * (2 * r + 1) * (2 * r + 1));
                let bypass = refine(&m_s, &Grid::zeros(9, 11, 1), &RefineWeights::Bypass).unwrap();
                if n > 0 && m_s.data().iter().any(|&v| v > 0.0) && m_s.data().iter().all(|&v| v <= 1.0) {
                    prop_assert_eq!(argmax(&bypass), argmax(&m_s));
                }
            }
        }
    }
}

//! Evaluation suite: semantic metrics (Dice, mIoU, F1, Hausdorff distance)
//! and instance metrics (AJI, DQ/SQ/PQ) plus connected-component instance
//! extraction.
//!
//! AJI matching is greedy over ground-truth instances in descending size
//! order (lowest label first on ties); each picks the unused prediction with
//! the highest IoU (lowest label on ties), considering only predictions it
//! actually overlaps. Remaining prediction area is added to the union.
//! Panoptic matching pairs instances at IoU strictly greater than 0.5, which
//! makes the matching unique. IoU comparisons are done in exact integer
//! arithmetic so results never depend on floating-point tie behavior.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_usize(v: usize) -> Result<Self> {
        match v {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            _ => Err(Error::Validation(format!("connectivity {v} not 4 or 8"))),
        }
    }

    fn offsets(&self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Foreground/background mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    /// Threshold probabilities; ties map to foreground (inclusive >=).
    pub fn from_probability(prob: &Tensor, threshold: f64) -> Self {
        let (h, w) = prob.dims2();
        Self {
            h,
            w,
            data: prob.data().iter().map(|&p| p >= threshold).collect(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::from_probability(t, 0.5)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }
}

/// Integer label image: 0 background, 1..n instances, labels contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), h * w);
        Self { h, w, labels }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    /// Highest label value (instance count when labels are contiguous).
    pub fn n_instances(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn to_binary(&self) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self.labels.iter().map(|&l| l > 0).collect(),
        }
    }

    /// Check the invariants: labels contiguous from 1 and every instance one
    /// connected region under `conn`.
    pub fn validate(&self, conn: Connectivity) -> Result<()> {
        let n = self.n_instances();
        let mut seen = vec![false; n + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        for l in 1..=n {
            if !seen[l] {
                return Err(Error::Validation(format!(
                    "label {l} missing from 1..={n}"
                )));
            }
        }
        // each label's pixels must form one component
        let cc = connected_components(&self.to_binary(), conn);
        let mut rep: HashMap<u32, u32> = HashMap::new();
        for (i, (&l, &c)) in self.labels.iter().zip(cc.labels.iter()).enumerate() {
            if l == 0 {
                continue;
            }
            match rep.get(&l) {
                None => {
                    rep.insert(l, c);
                }
                Some(&r) if r == c => {}
                Some(_) => {
                    return Err(Error::Validation(format!(
                        "instance {l} is disconnected (pixel {i})"
                    )));
                }
            }
        }
        // two labels may not share a component only if they touch; sharing a
        // component is fine (adjacent instances), disconnection is not.
        Ok(())
    }

    fn areas(&self) -> Vec<usize> {
        let n = self.n_instances();
        let mut areas = vec![0usize; n + 1];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }
}

/// Label maximal connected foreground regions 1..n in first-encounter
/// (row-major) order.
pub fn connected_components(mask: &BinaryMask, conn: Connectivity) -> InstanceLabelMap {
    let (h, w) = (mask.h, mask.w);
    let mut labels = vec![0u32; h * w];
    let mut next = 1u32;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.at(y, x) || labels[y * w + x] != 0 {
                continue;
            }
            labels[y * w + x] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for &(dy, dx) in conn.offsets() {
                    let ny = cy as i64 + dy;
                    let nx = cx as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask.at(ny, nx) && labels[ny * w + nx] == 0 {
                        labels[ny * w + nx] = next;
                        stack.push((ny, nx));
                    }
                }
            }
            next += 1;
        }
    }
    InstanceLabelMap { h, w, labels }
}

fn check_mask_shapes(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a:?} vs {b:?} masks")));
    }
    Ok(())
}

fn overlap_counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data.iter().zip(gt.data.iter()) {
        if a {
            p += 1;
        }
        if b {
            g += 1;
        }
        if a && b {
            inter += 1;
        }
    }
    (inter, p, g)
}

/// Dice coefficient 2|P&G| / (|P|+|G|); both empty counts as 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_mask_shapes((pred.h, pred.w), (gt.h, gt.w))?;
    let (inter, p, g) = overlap_counts(pred, gt);
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

/// Mean of foreground and background IoU; an empty/empty class scores 1.
pub fn miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_mask_shapes((pred.h, pred.w), (gt.h, gt.w))?;
    let (inter, p, g) = overlap_counts(pred, gt);
    let fg_union = p + g - inter;
    let fg = if fg_union == 0 {
        1.0
    } else {
        inter as f64 / fg_union as f64
    };
    let total = pred.data.len();
    let bg_inter = total - fg_union;
    let bg_union = total - inter;
    let bg = if bg_union == 0 {
        1.0
    } else {
        bg_inter as f64 / bg_union as f64
    };
    Ok(0.5 * (fg + bg))
}

/// Foreground F1 (harmonic mean of pixel precision and recall).
pub fn f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_mask_shapes((pred.h, pred.w), (gt.h, gt.w))?;
    let (inter, p, g) = overlap_counts(pred, gt);
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

/// Foreground boundary pixels: any foreground pixel with a 4-neighbor outside
/// the foreground or on the image edge.
fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if !mask.at(y, x) {
                continue;
            }
            let on_edge = y == 0 || x == 0 || y == mask.h - 1 || x == mask.w - 1;
            let bg_neighbor = !on_edge
                && (!mask.at(y - 1, x)
                    || !mask.at(y + 1, x)
                    || !mask.at(y, x - 1)
                    || !mask.at(y, x + 1));
            if on_edge || bg_neighbor {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed_hausdorff_sq(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let mut worst = 0.0f64;
    for &(ay, ax) in a {
        let mut best = f64::INFINITY;
        for &(by, bx) in b {
            let dy = ay as f64 - by as f64;
            let dx = ax as f64 - bx as f64;
            let d = dy * dy + dx * dx;
            if d < best {
                best = d;
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

/// Symmetric Hausdorff distance between foreground boundaries, in pixels.
/// `None` when either mask is empty.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    check_mask_shapes((pred.h, pred.w), (gt.h, gt.w))?;
    let pb = boundary(pred);
    let gb = boundary(gt);
    if pb.is_empty() || gb.is_empty() {
        return Ok(None);
    }
    let fwd = directed_hausdorff_sq(&pb, &gb);
    let bwd = directed_hausdorff_sq(&gb, &pb);
    Ok(Some(fwd.max(bwd).sqrt()))
}

/// Intersection counts between every (gt label, pred label) pair of two
/// instance maps, plus per-label areas.
struct Contingency {
    inter: HashMap<(u32, u32), usize>,
    gt_areas: Vec<usize>,
    pred_areas: Vec<usize>,
}

fn contingency(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Contingency {
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&g, &p) in gt.labels.iter().zip(pred.labels.iter()) {
        if g > 0 && p > 0 {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    Contingency {
        inter,
        gt_areas: gt.areas(),
        pred_areas: pred.areas(),
    }
}

/// Exact comparison of inter_a/union_a vs inter_b/union_b.
fn iou_gt(inter_a: usize, union_a: usize, inter_b: usize, union_b: usize) -> bool {
    (inter_a as u128) * (union_b as u128) > (inter_b as u128) * (union_a as u128)
}

/// Aggregated Jaccard index.
pub fn aji(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64> {
    check_mask_shapes((gt.h, gt.w), (pred.h, pred.w))?;
    let con = contingency(gt, pred);
    let n_gt = gt.n_instances();
    let n_pred = pred.n_instances();

    // greedy over GT: descending area, lowest label first on ties
    let mut order: Vec<u32> = (1..=n_gt as u32).collect();
    order.sort_by(|&a, &b| {
        con.gt_areas[b as usize]
            .cmp(&con.gt_areas[a as usize])
            .then(a.cmp(&b))
    });

    let mut used = vec![false; n_pred + 1];
    let mut c_sum = 0usize;
    let mut u_sum = 0usize;
    for g in order {
        let g_area = con.gt_areas[g as usize];
        let mut best: Option<(u32, usize, usize)> = None; // (pred, inter, union)
        for p in 1..=n_pred as u32 {
            if used[p as usize] {
                continue;
            }
            let Some(&i) = con.inter.get(&(g, p)) else {
                continue;
            };
            let u = g_area + con.pred_areas[p as usize] - i;
            best = match best {
                None => Some((p, i, u)),
                Some((bp, bi, bu)) => {
                    if iou_gt(i, u, bi, bu) {
                        Some((p, i, u))
                    } else {
                        Some((bp, bi, bu))
                    }
                }
            };
        }
        match best {
            Some((p, i, u)) => {
                used[p as usize] = true;
                c_sum += i;
                u_sum += u;
            }
            None => u_sum += g_area,
        }
    }
    for p in 1..=n_pred {
        if !used[p] {
            u_sum += con.pred_areas[p];
        }
    }
    Ok(if u_sum == 0 {
        1.0
    } else {
        c_sum as f64 / u_sum as f64
    })
}

/// Panoptic scores: matches are pairs with IoU strictly above the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanopticScores {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// False when TP = 0 and sq fell back to its convention value of 1.
    pub sq_defined: bool,
}

pub fn panoptic(
    gt: &InstanceLabelMap,
    pred: &InstanceLabelMap,
    iou_threshold: f64,
) -> Result<PanopticScores> {
    check_mask_shapes((gt.h, gt.w), (pred.h, pred.w))?;
    let con = contingency(gt, pred);
    let n_gt = gt.n_instances();
    let n_pred = pred.n_instances();
    let mut gt_matched = vec![false; n_gt + 1];
    let mut pred_matched = vec![false; n_pred + 1];
    let mut iou_sum = 0.0;
    let mut tp = 0usize;
    // matches above 0.5 are unique, so enumeration order cannot collide;
    // iterate gt labels ascending for a deterministic iou_sum order
    for g in 1..=n_gt as u32 {
        for p in 1..=n_pred as u32 {
            let Some(&i) = con.inter.get(&(g, p)) else {
                continue;
            };
            let u = con.gt_areas[g as usize] + con.pred_areas[p as usize] - i;
            let matched = if iou_threshold == 0.5 {
                // exact integer form of iou > 1/2
                2 * i > u
            } else {
                (i as f64 / u as f64) > iou_threshold
            };
            if matched {
                debug_assert!(!gt_matched[g as usize] && !pred_matched[p as usize]);
                gt_matched[g as usize] = true;
                pred_matched[p as usize] = true;
                iou_sum += i as f64 / u as f64;
                tp += 1;
            }
        }
    }
    let fp = (1..=n_pred).filter(|&p| !pred_matched[p]).count();
    let fn_ = (1..=n_gt).filter(|&g| !gt_matched[g]).count();
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let dq = if denom == 0.0 { 1.0 } else { tp as f64 / denom };
    let (sq, sq_defined) = if tp == 0 {
        (1.0, false)
    } else {
        (iou_sum / tp as f64, true)
    };
    Ok(PanopticScores {
        dq,
        sq,
        pq: dq * sq,
        tp,
        fp,
        fn_,
        sq_defined,
    })
}

/// All eight per-image metrics in report column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub dice: f64,
    pub miou: f64,
    pub f1: f64,
    pub hd: Option<f64>,
}

/// Score one image given predicted and ground-truth semantic masks and
/// instance maps.
pub fn score_image(
    pred_sem: &BinaryMask,
    pred_inst: &InstanceLabelMap,
    gt_sem: &BinaryMask,
    gt_inst: &InstanceLabelMap,
) -> Result<ImageMetrics> {
    let pan = panoptic(gt_inst, pred_inst, 0.5)?;
    Ok(ImageMetrics {
        aji: aji(gt_inst, pred_inst)?,
        dq: pan.dq,
        sq: pan.sq,
        pq: pan.pq,
        dice: dice(pred_sem, gt_sem)?,
        miou: miou(pred_sem, gt_sem)?,
        f1: f1(pred_sem, gt_sem)?,
        hd: hausdorff(pred_sem, gt_sem)?,
    })
}

/// Dataset-level report: per-image rows plus unweighted means.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub rows: Vec<(String, ImageMetrics)>,
}

/// Mean metrics; `hd` averages only the defined rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanMetrics {
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub dice: f64,
    pub miou: f64,
    pub f1: f64,
    pub hd: Option<f64>,
    pub hd_defined: usize,
}

impl MetricsReport {
    pub fn push(&mut self, id: String, m: ImageMetrics) {
        self.rows.push((id, m));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mean(&self) -> MeanMetrics {
        let n = self.rows.len().max(1) as f64;
        let mut acc = [0.0f64; 7];
        let mut hd_sum = 0.0;
        let mut hd_n = 0usize;
        for (_, m) in &self.rows {
            for (slot, v) in acc
                .iter_mut()
                .zip([m.aji, m.dq, m.sq, m.pq, m.dice, m.miou, m.f1])
            {
                *slot += v;
            }
            if let Some(hd) = m.hd {
                hd_sum += hd;
                hd_n += 1;
            }
        }
        MeanMetrics {
            aji: acc[0] / n,
            dq: acc[1] / n,
            sq: acc[2] / n,
            pq: acc[3] / n,
            dice: acc[4] / n,
            miou: acc[5] / n,
            f1: acc[6] / n,
            hd: if hd_n > 0 {
                Some(hd_sum / hd_n as f64)
            } else {
                None
            },
            hd_defined: hd_n,
        }
    }

    /// CSV with the instance block first, then the semantic block.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,aji,dq,sq,pq,dice,miou,f1,hd\n");
        let fmt_hd = |hd: Option<f64>| hd.map(|v| format!("{v:.6}")).unwrap_or_default();
        for (id, m) in &self.rows {
            s.push_str(&format!(
                "{id},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                m.aji,
                m.dq,
                m.sq,
                m.pq,
                m.dice,
                m.miou,
                m.f1,
                fmt_hd(m.hd)
            ));
        }
        let mean = self.mean();
        s.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            mean.aji,
            mean.dq,
            mean.sq,
            mean.pq,
            mean.dice,
            mean.miou,
            mean.f1,
            fmt_hd(mean.hd)
        ));
        s
    }

    pub fn to_json(&self) -> String {
        fn esc(s: &str) -> String {
            s.replace('\\', "\\\\").replace('"', "\\\"")
        }
        fn num(v: f64) -> String {
            if v.is_finite() {
                format!("{v}")
            } else {
                "null".into()
            }
        }
        fn hd_str(hd: Option<f64>) -> String {
            hd.map(num).unwrap_or_else(|| "null".into())
        }
        let mut s = String::from("{\n  \"images\": [\n");
        for (i, (id, m)) in self.rows.iter().enumerate() {
            s.push_str(&format!(
                "    {{\"id\": \"{}\", \"aji\": {}, \"dq\": {}, \"sq\": {}, \"pq\": {}, \"dice\": {}, \"miou\": {}, \"f1\": {}, \"hd\": {}}}{}\n",
                esc(id),
                num(m.aji),
                num(m.dq),
                num(m.sq),
                num(m.pq),
                num(m.dice),
                num(m.miou),
                num(m.f1),
                hd_str(m.hd),
                if i + 1 < self.rows.len() { "," } else { "" }
            ));
        }
        let mean = self.mean();
        s.push_str(&format!(
            "  ],\n  \"mean\": {{\"aji\": {}, \"dq\": {}, \"sq\": {}, \"pq\": {}, \"dice\": {}, \"miou\": {}, \"f1\": {}, \"hd\": {}, \"hd_defined_images\": {}}}\n}}\n",
            num(mean.aji),
            num(mean.dq),
            num(mean.sq),
            num(mean.pq),
            num(mean.dice),
            num(mean.miou),
            num(mean.f1),
            hd_str(mean.hd),
            mean.hd_defined
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, fg: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for &(y, x) in fg {
            m.data[y * w + x] = true;
        }
        m
    }

    fn inst(h: usize, w: usize, pixels: &[(usize, usize, u32)]) -> InstanceLabelMap {
        let mut m = InstanceLabelMap::empty(h, w);
        for &(y, x, l) in pixels {
            m.labels[y * w + x] = l;
        }
        m
    }

    #[test]
    fn probability_threshold_tie_is_foreground() {
        let prob = Tensor::new(vec![1, 3], vec![0.499999, 0.5, 0.500001]);
        let m = BinaryMask::from_probability(&prob, 0.5);
        assert_eq!(m.data, vec![false, true, true]);
    }

    #[test]
    fn cc_corner_cases() {
        let m = mask(3, 3, &[(0, 0), (2, 2)]);
        assert_eq!(connected_components(&m, Connectivity::Eight).n_instances(), 2);

        let diag = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(connected_components(&diag, Connectivity::Eight).n_instances(), 1);
        assert_eq!(connected_components(&diag, Connectivity::Four).n_instances(), 2);

        let empty = BinaryMask::zeros(4, 4);
        assert_eq!(connected_components(&empty, Connectivity::Eight).n_instances(), 0);
    }

    #[test]
    fn cc_labels_in_row_major_first_encounter_order() {
        // two blobs: one starting at row 0 col 3, one at row 1 col 0
        let m = mask(3, 5, &[(0, 3), (0, 4), (1, 0), (2, 0)]);
        let cc = connected_components(&m, Connectivity::Eight);
        assert_eq!(cc.labels[3], 1);
        assert_eq!(cc.labels[5], 2);
        cc.validate(Connectivity::Eight).unwrap();
    }

    #[test]
    fn semantic_metrics_hand_examples() {
        let gt = mask(2, 2, &[(0, 0)]);
        let pred = mask(2, 2, &[(0, 0), (0, 1)]);
        assert!((dice(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((miou(&pred, &gt).unwrap() - 7.0 / 12.0).abs() < 1e-12);
        assert!((f1(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);

        assert_eq!(dice(&gt, &gt).unwrap(), 1.0);
        assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(f1(&gt, &gt).unwrap(), 1.0);

        let a = mask(2, 2, &[(0, 0)]);
        let b = mask(2, 2, &[(1, 1)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);

        let bad = BinaryMask::zeros(3, 3);
        assert!(dice(&a, &bad).is_err());
    }

    #[test]
    fn semantic_metrics_are_symmetric() {
        let a = mask(3, 3, &[(0, 0), (1, 1), (2, 0)]);
        let b = mask(3, 3, &[(0, 0), (0, 1)]);
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        assert_eq!(miou(&a, &b).unwrap(), miou(&b, &a).unwrap());
        assert_eq!(f1(&a, &b).unwrap(), f1(&b, &a).unwrap());
        assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask(4, 5, &[(0, 0)]);
        assert_eq!(hausdorff(&a, &a).unwrap(), Some(0.0));
        let b = mask(4, 5, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b).unwrap(), Some(5.0));
        let empty = BinaryMask::zeros(4, 5);
        assert_eq!(hausdorff(&a, &empty).unwrap(), None);
    }

    #[test]
    fn aji_hand_fixtures() {
        // one 4px GT; prediction covers 3 of them plus one outside pixel
        let gt = inst(3, 3, &[(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1)]);
        let pred = inst(3, 3, &[(0, 0, 1), (0, 1, 1), (1, 0, 1), (0, 2, 1)]);
        assert!((aji(&gt, &pred).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(aji(&gt, &gt).unwrap(), 1.0);

        // plus a spurious 2px prediction instance
        let pred2 = inst(
            4,
            4,
            &[(0, 0, 1), (0, 1, 1), (1, 0, 1), (0, 2, 1), (3, 2, 2), (3, 3, 2)],
        );
        let gt2 = inst(4, 4, &[(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1)]);
        assert!((aji(&gt2, &pred2).unwrap() - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn aji_is_order_sensitive() {
        // one prediction overlapping two GT instances: the larger GT claims
        // it greedily even though the smaller one fits better
        let mut gt = InstanceLabelMap::empty(4, 8);
        for x in 0..6 {
            gt.labels[x] = 1; // A: 6px row 0
        }
        for x in 0..3 {
            gt.labels[8 + x] = 2; // B: 3px row 1
        }
        let mut pred = InstanceLabelMap::empty(4, 8);
        pred.labels[0] = 1; // overlaps A by 1
        pred.labels[8] = 1; // overlaps B by 1
        pred.labels[9] = 1; // overlaps B by 1
        let forward = aji(&gt, &pred).unwrap();
        let reversed = aji(&pred, &gt).unwrap();
        // forward: A (6px) claims the prediction (iou 1/8); B unmatched
        assert!((forward - 1.0 / (8.0 + 3.0)).abs() < 1e-12);
        // reversed: the 3px prediction-as-GT prefers B (iou 2/4)
        assert!((reversed - 2.0 / (4.0 + 6.0)).abs() < 1e-12);
        assert_ne!(forward, reversed);
    }

    #[test]
    fn panoptic_hand_fixtures() {
        let gt = inst(3, 3, &[(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1)]);
        let perfect = panoptic(&gt, &gt, 0.5).unwrap();
        assert_eq!(
            (perfect.dq, perfect.sq, perfect.pq),
            (1.0, 1.0, 1.0)
        );

        // single pair with IoU 0.6
        let pred = inst(3, 3, &[(0, 0, 1), (0, 1, 1), (1, 0, 1), (0, 2, 1)]);
        let p = panoptic(&gt, &pred, 0.5).unwrap();
        assert_eq!(p.tp, 1);
        assert!((p.dq - 1.0).abs() < 1e-12);
        assert!((p.sq - 0.6).abs() < 1e-12);
        assert!((p.pq - 0.6).abs() < 1e-12);
        assert!((p.pq - p.dq * p.sq).abs() < 1e-15);

        // single pair with IoU 0.4: below threshold
        let gt5 = inst(3, 5, &[(0, 0, 1), (0, 1, 1), (0, 2, 1), (0, 3, 1)]);
        let pred5 = inst(3, 5, &[(0, 3, 1), (0, 4, 1)]);
        // inter 1, union 5 -> iou 0.2 < 0.5... build iou 0.4: |gt|=4,|pred|=2,inter=2 -> union 4, iou 0.5 not > 0.5
        let gt4 = inst(3, 5, &[(0, 0, 1), (0, 1, 1), (0, 2, 1)]);
        let pred4 = inst(3, 5, &[(0, 2, 1), (0, 3, 1)]);
        // inter 1, union 4 -> 0.25
        for (g, pr) in [(&gt5, &pred5), (&gt4, &pred4)] {
            let p = panoptic(g, pr, 0.5).unwrap();
            assert_eq!(p.tp, 0);
            assert_eq!((p.fp, p.fn_), (1, 1));
            assert_eq!(p.dq, 0.0);
            assert_eq!(p.pq, 0.0);
            assert!(!p.sq_defined);
        }
    }

    #[test]
    fn iou_exactly_half_is_not_a_match() {
        // |gt| = 2, |pred| = 2, inter = ... iou 0.5 needs inter/union = 1/2
        let gt = inst(2, 4, &[(0, 0, 1), (0, 1, 1)]);
        let pred = inst(2, 4, &[(0, 1, 1), (0, 2, 1)]);
        // inter 1, union 3 -> 1/3 no; use 2/4: gt {0,1}, pred {0,1,2,3}? inter 2, union 4 = 0.5
        let pred2 = inst(2, 4, &[(0, 0, 1), (0, 1, 1), (0, 2, 1), (0, 3, 1)]);
        let p = panoptic(&gt, &pred2, 0.5).unwrap();
        assert_eq!(p.tp, 0, "iou == 0.5 must not match");
        let q = panoptic(&gt, &pred, 0.5).unwrap();
        assert_eq!(q.tp, 0);
    }

    #[test]
    fn relabeling_leaves_instance_metrics_unchanged() {
        let gt = inst(4, 4, &[(0, 0, 1), (0, 1, 1), (2, 2, 2), (2, 3, 2), (3, 3, 3)]);
        let pred = inst(4, 4, &[(0, 0, 1), (2, 2, 2), (2, 3, 2), (3, 3, 3), (0, 3, 4)]);
        // permute pred labels 1..4 -> 3,1,4,2
        let perm = [0u32, 3, 1, 4, 2];
        let permuted = InstanceLabelMap::new(
            4,
            4,
            pred.labels.iter().map(|&l| perm[l as usize]).collect(),
        );
        assert_eq!(aji(&gt, &pred).unwrap(), aji(&gt, &permuted).unwrap());
        let a = panoptic(&gt, &pred, 0.5).unwrap();
        let b = panoptic(&gt, &permuted, 0.5).unwrap();
        assert_eq!((a.dq, a.sq, a.pq), (b.dq, b.sq, b.pq));
    }

    #[test]
    fn score_image_perfect_fixed_point() {
        let gt_inst = inst(4, 4, &[(0, 0, 1), (0, 1, 1), (2, 2, 2)]);
        let gt_sem = gt_inst.to_binary();
        let m = score_image(&gt_sem, &gt_inst, &gt_sem, &gt_inst).unwrap();
        assert_eq!(
            (m.aji, m.dq, m.sq, m.pq, m.dice, m.miou, m.f1),
            (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(m.hd, Some(0.0));
    }

    #[test]
    fn report_csv_and_json_shape() {
        let mut rep = MetricsReport::default();
        rep.push(
            "img_000".into(),
            ImageMetrics {
                aji: 0.5,
                dq: 0.6,
                sq: 0.7,
                pq: 0.42,
                dice: 0.8,
                miou: 0.7,
                f1: 0.8,
                hd: Some(2.0),
            },
        );
        rep.push(
            "img_001".into(),
            ImageMetrics {
                aji: 1.0,
                dq: 1.0,
                sq: 1.0,
                pq: 1.0,
                dice: 1.0,
                miou: 1.0,
                f1: 1.0,
                hd: None,
            },
        );
        let csv = rep.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "image,aji,dq,sq,pq,dice,miou,f1,hd");
        assert_eq!(csv.lines().count(), 4); // header + 2 rows + mean
        let mean = rep.mean();
        assert_eq!(mean.hd, Some(2.0));
        assert_eq!(mean.hd_defined, 1);
        let json = rep.to_json();
        assert!(json.contains("\"hd\": null"));
        assert!(json.contains("\"hd_defined_images\": 1"));
    }

    #[test]
    fn validate_catches_broken_invariants() {
        // missing label 1
        let m = inst(2, 2, &[(0, 0, 2)]);
        assert!(m.validate(Connectivity::Eight).is_err());
        // disconnected instance
        let m2 = inst(3, 3, &[(0, 0, 1), (2, 2, 1)]);
        assert!(m2.validate(Connectivity::Eight).is_err());
        // fine
        let ok = inst(3, 3, &[(0, 0, 1), (0, 1, 1), (2, 2, 2)]);
        ok.validate(Connectivity::Eight).unwrap();
    }
}

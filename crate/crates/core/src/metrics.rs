//! Evaluation: per-class semantic recall/precision at a score threshold,
//! mask IoU, greedy proposal matching and the average-precision family.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{score_threshold, ProposalSet};
use crate::scene::{tight_bbox, to_f64, Aabb, GtInstance, Point3, IGNORE_LABEL};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub class_id: u32,
    pub tau: f64,
    /// `None` when the class has no ground-truth points.
    pub recall: Option<f64>,
    /// `None` when no point scores above `tau` for the class.
    pub precision: Option<f64>,
    pub hits: usize,
    pub gt_count: usize,
    pub predicted_count: usize,
}

/// Recall and precision of the soft class subsets against semantic labels.
/// Points labeled with the ignore sentinel are skipped.
pub fn semantic_pr(
    scores: &[f32],
    num_classes: usize,
    gt_semantic: &[i32],
    tau: f64,
) -> Result<Vec<PrPoint>> {
    if scores.len() != gt_semantic.len() * num_classes {
        return Err(Error::invalid_arg("score matrix does not match label count"));
    }
    let t = score_threshold(tau);
    let mut hits = vec![0usize; num_classes];
    let mut gt_count = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    for (row, &label) in scores.chunks_exact(num_classes.max(1)).zip(gt_semantic) {
        if label == IGNORE_LABEL {
            continue;
        }
        if label < 0 || label as usize >= num_classes {
            return Err(Error::invalid_data(format!("label {label} out of range")));
        }
        gt_count[label as usize] += 1;
        for (c, &s) in row.iter().enumerate() {
            if s as f64 > t {
                predicted[c] += 1;
                if c == label as usize {
                    hits[c] += 1;
                }
            }
        }
    }
    Ok((0..num_classes)
        .map(|c| PrPoint {
            class_id: c as u32,
            tau,
            recall: (gt_count[c] > 0).then(|| hits[c] as f64 / gt_count[c] as f64),
            precision: (predicted[c] > 0).then(|| hits[c] as f64 / predicted[c] as f64),
            hits: hits[c],
            gt_count: gt_count[c],
            predicted_count: predicted[c],
        })
        .collect())
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean recall over classes where it is defined.
pub fn macro_recall(points: &[PrPoint]) -> Option<f64> {
    mean_defined(points.iter().map(|p| p.recall))
}

/// Mean precision over classes where it is defined.
pub fn macro_precision(points: &[PrPoint]) -> Option<f64> {
    mean_defined(points.iter().map(|p| p.precision))
}

/// `|a ∩ b| / |a ∪ b|` for sorted index sets; 0 when both are empty.
pub fn mask_iou(a: &[u32], b: &[u32]) -> f64 {
    let inter = sorted_intersection(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn sorted_intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Outcome for one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub proposal: usize,
    /// Ground-truth instance (index into the gt list) this proposal claimed.
    pub gt: Option<usize>,
    /// IoU with the best unmatched same-class instance (0 if none).
    pub iou: f64,
    pub true_positive: bool,
}

/// Overlap counts between proposals and ground-truth instances.
struct Overlaps {
    /// Per proposal: (gt index, intersection size).
    inter: Vec<Vec<(usize, usize)>>,
}

impl Overlaps {
    fn new(proposals: &ProposalSet, gt: &[GtInstance]) -> Self {
        let mut owner: HashMap<u32, Vec<usize>> = HashMap::new();
        for (g, inst) in gt.iter().enumerate() {
            for &i in &inst.members {
                owner.entry(i).or_default().push(g);
            }
        }
        let inter = proposals
            .iter()
            .map(|p| {
                let mut counts: HashMap<usize, usize> = HashMap::new();
                for i in &p.members {
                    if let Some(gs) = owner.get(i) {
                        for &g in gs {
                            *counts.entry(g).or_default() += 1;
                        }
                    }
                }
                let mut v: Vec<_> = counts.into_iter().collect();
                v.sort_unstable();
                v
            })
            .collect();
        Overlaps { inter }
    }
}

/// Proposal indices by descending confidence; ties keep canonical order,
/// i.e. class then smallest member.
fn ranking(proposals: &ProposalSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals.proposals[b]
            .confidence
            .total_cmp(&proposals.proposals[a].confidence)
            .then(a.cmp(&b))
    });
    order
}

fn greedy(
    proposals: &ProposalSet,
    gt: &[GtInstance],
    overlaps: &Overlaps,
    threshold: f64,
) -> Vec<Match> {
    let mut taken = vec![false; gt.len()];
    let mut out = vec![
        Match {
            proposal: 0,
            gt: None,
            iou: 0.0,
            true_positive: false,
        };
        proposals.len()
    ];
    for pi in ranking(proposals) {
        let p = &proposals.proposals[pi];
        let mut best: Option<(f64, usize)> = None;
        for &(g, inter) in &overlaps.inter[pi] {
            if taken[g] || gt[g].class_id != p.class_id {
                continue;
            }
            let iou = inter as f64 / (p.members.len() + gt[g].members.len() - inter) as f64;
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        let m = &mut out[pi];
        m.proposal = pi;
        if let Some((iou, g)) = best {
            m.iou = iou;
            if iou > threshold {
                taken[g] = true;
                m.gt = Some(g);
                m.true_positive = true;
            }
        }
    }
    out
}

/// Greedy class-consistent matching in descending confidence; each
/// ground-truth instance is claimed at most once. Returned in proposal
/// order.
pub fn match_proposals(proposals: &ProposalSet, gt: &[GtInstance], threshold: f64) -> Vec<Match> {
    greedy(proposals, gt, &Overlaps::new(proposals, gt), threshold)
}

/// All-point interpolated AP from ranked true-positive flags.
pub fn average_precision_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub gt_count: usize,
    pub proposal_count: usize,
    /// AP at each of `ApResult::thresholds`.
    pub ap: Vec<f64>,
    pub ap25: f64,
    pub ap50: f64,
    pub ap_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground-truth instance.
    pub per_class: Vec<ClassAp>,
    pub ap25: f64,
    pub ap50: f64,
    /// Mean over IoU 0.50:0.95.
    pub ap: f64,
    /// True-positive (proposal, gt) pairs at IoU 0.5.
    pub matched50: Vec<(usize, usize)>,
}

fn ap_for(
    proposals: &ProposalSet,
    gt: &[GtInstance],
    num_classes: usize,
    matcher: impl Fn(f64) -> Vec<Match>,
) -> ApResult {
    let thresholds = coco_thresholds();
    let mut gt_count = vec![0usize; num_classes];
    for g in gt {
        gt_count[g.class_id as usize] += 1;
    }
    let mut prop_count = vec![0usize; num_classes];
    for p in proposals {
        if (p.class_id as usize) < num_classes {
            prop_count[p.class_id as usize] += 1;
        }
    }
    let order = ranking(proposals);
    let per_threshold = |t: f64| -> Vec<f64> {
        let matches = matcher(t);
        (0..num_classes)
            .map(|c| {
                let flags: Vec<bool> = order
                    .iter()
                    .filter(|&&pi| proposals.proposals[pi].class_id as usize == c)
                    .map(|&pi| matches[pi].true_positive)
                    .collect();
                average_precision_from_flags(&flags, gt_count[c])
            })
            .collect()
    };
    let ap25 = per_threshold(0.25);
    let grid: Vec<Vec<f64>> = thresholds.iter().map(|&t| per_threshold(t)).collect();
    let per_class: Vec<ClassAp> = (0..num_classes)
        .filter(|&c| gt_count[c] > 0)
        .map(|c| {
            let ap: Vec<f64> = grid.iter().map(|row| row[c]).collect();
            ClassAp {
                class_id: c as u32,
                gt_count: gt_count[c],
                proposal_count: prop_count[c],
                ap25: ap25[c],
                ap50: ap[0],
                ap_mean: ap.iter().sum::<f64>() / ap.len() as f64,
                ap,
            }
        })
        .collect();
    let macro_of = |f: fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    let matched50 = matcher(0.5)
        .iter()
        .filter_map(|m| m.gt.map(|g| (m.proposal, g)))
        .collect();
    ApResult {
        ap25: macro_of(|c| c.ap25),
        ap50: macro_of(|c| c.ap50),
        ap: macro_of(|c| c.ap_mean),
        thresholds,
        per_class,
        matched50,
    }
}

/// Mask AP at IoU 0.25, 0.5 and averaged over 0.50:0.95, macro-averaged
/// over classes that have ground truth.
pub fn average_precision(proposals: &ProposalSet, gt: &[GtInstance], num_classes: usize) -> ApResult {
    let overlaps = Overlaps::new(proposals, gt);
    ap_for(proposals, gt, num_classes, |t| greedy(proposals, gt, &overlaps, t))
}

/// Matching precision and recall at IoU 0.5 without ranking, averaged over
/// classes (precision over classes with proposals, recall over classes with
/// ground truth).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecRec50 {
    pub mprec50: f64,
    pub mrec50: f64,
}

pub fn prec_rec50(proposals: &ProposalSet, gt: &[GtInstance], num_classes: usize) -> PrecRec50 {
    let matches = match_proposals(proposals, gt, 0.5);
    let mut tp = vec![0usize; num_classes];
    let mut props = vec![0usize; num_classes];
    let mut gts = vec![0usize; num_classes];
    for (p, m) in proposals.iter().zip(&matches) {
        let c = p.class_id as usize;
        props[c] += 1;
        tp[c] += m.true_positive as usize;
    }
    for g in gt {
        gts[g.class_id as usize] += 1;
    }
    let prec = mean_defined((0..num_classes).map(|c| (props[c] > 0).then(|| tp[c] as f64 / props[c] as f64)));
    let rec = mean_defined((0..num_classes).map(|c| (gts[c] > 0).then(|| tp[c] as f64 / gts[c] as f64)));
    PrecRec50 {
        mprec50: prec.unwrap_or(0.0),
        mrec50: rec.unwrap_or(0.0),
    }
}

/// Detection AP: tight boxes around proposals and ground-truth instances,
/// matched greedily by box IoU.
pub fn box_average_precision(
    proposals: &ProposalSet,
    gt: &[GtInstance],
    positions: &[Point3],
    num_classes: usize,
) -> Result<ApResult> {
    let boxes = |members: &[u32]| -> Result<Aabb<3>> {
        if let Some(&bad) = members.iter().find(|&&i| i as usize >= positions.len()) {
            return Err(Error::invalid_data(format!("index {bad} out of range")));
        }
        tight_bbox(members.iter().map(|&i| to_f64(&positions[i as usize])))
    };
    let pboxes = proposals.iter().map(|p| boxes(&p.members)).collect::<Result<Vec<_>>>()?;
    let gboxes = gt.iter().map(|g| boxes(&g.members)).collect::<Result<Vec<_>>>()?;
    let order = ranking(proposals);
    let matcher = |t: f64| {
        let mut taken = vec![false; gt.len()];
        let mut out = vec![
            Match {
                proposal: 0,
                gt: None,
                iou: 0.0,
                true_positive: false,
            };
            proposals.len()
        ];
        for &pi in &order {
            let p = &proposals.proposals[pi];
            let mut best: Option<(f64, usize)> = None;
            for (g, inst) in gt.iter().enumerate() {
                if taken[g] || inst.class_id != p.class_id {
                    continue;
                }
                let iou = pboxes[pi].iou(&gboxes[g]);
                if best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            out[pi].proposal = pi;
            if let Some((iou, g)) = best {
                out[pi].iou = iou;
                if iou > t {
                    taken[g] = true;
                    out[pi].gt = Some(g);
                    out[pi].true_positive = true;
                }
            }
        }
        out
    };
    Ok(ap_for(proposals, gt, num_classes, matcher))
}

pub const METRICS_VERSION: u32 = 1;

/// Everything `eval` reports for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub num_points: usize,
    pub num_proposals: usize,
    pub num_gt_instances: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub mprec50: f64,
    pub mrec50: f64,
    pub box_ap50: f64,
    pub box_ap25: f64,
    pub semantic_tau: f64,
    pub semantic_macro_recall: Option<f64>,
    pub semantic_macro_precision: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub semantic: Vec<PrPoint>,
}

impl MetricsReport {
    /// Evaluates proposals against the scene's ground truth.
    pub fn evaluate(
        scene: &crate::scene::Scene,
        proposals: &ProposalSet,
        semantic_tau: f64,
    ) -> Result<Self> {
        let gt = scene.gt_instances()?;
        proposals.validate(scene.len(), scene.num_classes)?;
        let c = scene.num_classes;
        let ap = average_precision(proposals, &gt, c);
        let pr = prec_rec50(proposals, &gt, c);
        let boxes = box_average_precision(proposals, &gt, &scene.positions, c)?;
        let semantic = match (&scene.scores, &scene.gt_semantic) {
            (Some(s), Some(l)) => semantic_pr(s, c, l, semantic_tau)?,
            _ => Vec::new(),
        };
        Ok(MetricsReport {
            version: METRICS_VERSION,
            num_points: scene.len(),
            num_proposals: proposals.len(),
            num_gt_instances: gt.len(),
            ap: ap.ap,
            ap50: ap.ap50,
            ap25: ap.ap25,
            mprec50: pr.mprec50,
            mrec50: pr.mrec50,
            box_ap50: boxes.ap50,
            box_ap25: boxes.ap25,
            semantic_tau,
            semantic_macro_recall: macro_recall(&semantic),
            semantic_macro_precision: macro_precision(&semantic),
            per_class: ap.per_class,
            semantic,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::InstanceProposal;
    use proptest::prelude::*;

    fn gt(class_id: u32, members: Vec<u32>) -> GtInstance {
        GtInstance {
            id: 0,
            class_id,
            members,
        }
    }

    fn prop(class_id: u32, members: Vec<u32>, confidence: f64) -> InstanceProposal {
        InstanceProposal {
            class_id,
            members,
            confidence,
        }
    }

    #[test]
    fn semantic_pr_hand_count() {
        // class 0 column [0.3, 0.1, 0.25, 0.05], class 1 column is 1 - that
        let scores = [0.3f32, 0.7, 0.1, 0.9, 0.25, 0.75, 0.05, 0.95];
        let pr = semantic_pr(&scores, 2, &[0, 0, 1, 1], 0.2).unwrap();
        assert_eq!(pr[0].recall, Some(0.5));
        assert_eq!(pr[0].precision, Some(0.5));
        assert_eq!((pr[0].hits, pr[0].gt_count, pr[0].predicted_count), (1, 2, 2));
    }

    #[test]
    fn semantic_pr_perfect_and_undefined() {
        let scores = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let pr = semantic_pr(&scores, 3, &[0, 1, 0], 0.2).unwrap();
        assert_eq!((pr[0].recall, pr[0].precision), (Some(1.0), Some(1.0)));
        assert_eq!((pr[1].recall, pr[1].precision), (Some(1.0), Some(1.0)));
        assert_eq!((pr[2].recall, pr[2].precision), (None, None));
        assert_eq!(macro_recall(&pr), Some(1.0));
    }

    #[test]
    fn semantic_pr_skips_ignored_points() {
        let scores = [0.9f32, 0.9];
        let pr = semantic_pr(&scores, 1, &[0, IGNORE_LABEL], 0.2).unwrap();
        assert_eq!((pr[0].gt_count, pr[0].predicted_count), (1, 1));
    }

    #[test]
    fn mask_iou_examples() {
        assert_eq!(mask_iou(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(mask_iou(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(mask_iou(&[1, 2], &[2, 3]), 1.0 / 3.0);
        assert_eq!(mask_iou(&[], &[]), 0.0);
    }

    #[test]
    fn perfect_proposals_all_match() {
        let gts = vec![gt(0, vec![0, 1, 2]), gt(1, vec![3, 4])];
        let props = ProposalSet::new(vec![prop(0, vec![0, 1, 2], 0.9), prop(1, vec![3, 4], 0.8)]);
        for t in [0.25, 0.5, 0.95] {
            assert!(match_proposals(&props, &gts, t).iter().all(|m| m.true_positive));
        }
        let ap = average_precision(&props, &gts, 2);
        assert_eq!((ap.ap, ap.ap50, ap.ap25), (1.0, 1.0, 1.0));
        assert_eq!(ap.matched50, vec![(0, 0), (1, 1)]);
        let pr = prec_rec50(&props, &gts, 2);
        assert_eq!((pr.mprec50, pr.mrec50), (1.0, 1.0));
    }

    #[test]
    fn duplicates_give_one_true_positive() {
        let gts = vec![gt(0, vec![0, 1, 2, 3])];
        let props = ProposalSet::new(vec![prop(0, vec![0, 1, 2, 3], 0.9), prop(0, vec![0, 1, 2], 0.5)]);
        let m = match_proposals(&props, &gts, 0.5);
        assert_eq!(m.iter().filter(|m| m.true_positive).count(), 1);
        let tp = m.iter().find(|m| m.true_positive).unwrap();
        assert_eq!(props.proposals[tp.proposal].confidence, 0.9);
        // the lower-ranked duplicate does not hurt AP
        assert_eq!(average_precision(&props, &gts, 1).ap50, 1.0);
        let pr = prec_rec50(&props, &gts, 1);
        assert_eq!((pr.mprec50, pr.mrec50), (0.5, 1.0));
    }

    #[test]
    fn low_iou_is_false_positive() {
        // IoU 0.4: 2 shared of 5 in the union
        let gts = vec![gt(0, vec![0, 1, 2, 3])];
        let props = ProposalSet::new(vec![prop(0, vec![2, 3, 4], 0.9)]);
        let m = match_proposals(&props, &gts, 0.5);
        assert!((m[0].iou - 0.4).abs() < 1e-12);
        assert!(!m[0].true_positive);
        assert!(match_proposals(&props, &gts, 0.25)[0].true_positive);
    }

    #[test]
    fn class_mismatch_never_matches() {
        let gts = vec![gt(0, vec![0, 1])];
        let props = ProposalSet::new(vec![prop(1, vec![0, 1], 0.9)]);
        assert!(!match_proposals(&props, &gts, 0.5)[0].true_positive);
        assert_eq!(average_precision(&props, &gts, 2).ap50, 0.0);
    }

    #[test]
    fn ap_hand_cases() {
        let gts = vec![gt(0, vec![0, 1, 2])];
        assert_eq!(average_precision(&ProposalSet::default(), &gts, 1).ap, 0.0);
        // one TP then a lower-confidence FP
        let props = ProposalSet::new(vec![prop(0, vec![0, 1, 2], 0.8), prop(0, vec![7, 8], 0.3)]);
        assert_eq!(average_precision(&props, &gts, 1).ap50, 1.0);
        // FP ranked first halves precision at full recall
        let props = ProposalSet::new(vec![prop(0, vec![0, 1, 2], 0.3), prop(0, vec![7, 8], 0.8)]);
        assert_eq!(average_precision(&props, &gts, 1).ap50, 0.5);
        let ap = average_precision_from_flags(&[true, false, true], 4);
        assert!((ap - (0.25 + 0.25 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let gts = vec![gt(0, vec![0, 1])];
        let props = ProposalSet::new(vec![prop(0, vec![0, 1], 0.9), prop(2, vec![5], 0.9)]);
        let ap = average_precision(&props, &gts, 3);
        assert_eq!(ap.per_class.len(), 1);
        assert_eq!(ap.ap50, 1.0);
    }

    #[test]
    fn box_ap_on_cuboids() {
        let positions: Vec<Point3> = vec![
            [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.5, 0.5],
            [5.0, 5.0, 5.0], [6.0, 6.0, 6.0],
        ];
        let gts = vec![gt(0, vec![0, 1, 2]), gt(0, vec![3, 4])];
        // proposal missing the interior point still has the exact box
        let props = ProposalSet::new(vec![prop(0, vec![0, 1], 0.9), prop(0, vec![3], 0.8)]);
        let ap = box_average_precision(&props, &gts, &positions, 1).unwrap();
        assert_eq!(ap.ap50, 0.5);
        assert_eq!(ap.matched50, vec![(0, 0)]);
    }

    fn random_case() -> impl Strategy<Value = (Vec<GtInstance>, ProposalSet)> {
        let gts = prop::collection::vec((0u32..2, 1usize..12), 1..6);
        let props = prop::collection::vec((0u32..2, prop::collection::btree_set(0u32..60, 1..15), 0.0f64..1.0), 0..10);
        (gts, props).prop_map(|(g, p)| {
            let mut next = 0u32;
            let gts = g
                .into_iter()
                .map(|(c, n)| {
                    let members = (next..next + n as u32).collect();
                    next += n as u32;
                    gt(c, members)
                })
                .collect();
            let props = p
                .into_iter()
                .map(|(c, m, conf)| prop(c, m.into_iter().collect(), conf))
                .collect();
            (gts, ProposalSet::new(props))
        })
    }

    proptest! {
        #[test]
        fn ap_is_monotone_in_threshold((gts, props) in random_case()) {
            let ap = average_precision(&props, &gts, 2);
            for c in &ap.per_class {
                prop_assert!(c.ap.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", c.ap);
                prop_assert!(c.ap_mean <= c.ap50 + 1e-12 && c.ap50 <= c.ap25 + 1e-12);
                prop_assert!(c.ap.iter().all(|a| (0.0..=1.0).contains(a)));
            }
            prop_assert!(ap.ap <= ap.ap50 + 1e-12 && ap.ap50 <= ap.ap25 + 1e-12);
        }

        #[test]
        fn matching_is_deterministic((gts, props) in random_case(), t in 0.1f64..0.9) {
            let a = match_proposals(&props, &gts, t);
            prop_assert_eq!(&a, &match_proposals(&props, &gts, t));
            let claimed: Vec<usize> = a.iter().filter_map(|m| m.gt).collect();
            let mut unique = claimed.clone();
            unique.sort_unstable();
            unique.dedup();
            prop_assert_eq!(unique.len(), claimed.len());
        }

        #[test]
        fn recall_is_monotone_in_tau(
            scores in prop::collection::vec(0.0f32..=1.0, 60),
            labels in prop::collection::vec(-1i32..3, 20),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = semantic_pr(&scores, 3, &labels, lo).unwrap();
            let b = semantic_pr(&scores, 3, &labels, hi).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(x.hits >= y.hits);
                if let (Some(rx), Some(ry)) = (x.recall, y.recall) {
                    prop_assert!(rx >= ry);
                }
            }
        }
    }
}

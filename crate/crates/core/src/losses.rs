//! Matching costs and training losses.
//!
//! Each loss exists twice: a plain `f64` form used for the assignment cost
//! matrix and for evaluation, and a tape form used for training. The two are
//! checked against each other in tests.

use crate::boxes::{self, Box4};
use crate::matching::{hungarian_assign, MatchAssignment};
use crate::scalar::{sigmoid as sigmoid_s, softplus as softplus_s, Scalar};
use crate::tape::{Result, Tape, Tensor, TensorError};

pub const DICE_EPS: f64 = 1e-6;

/// Balance weights of Eq-style matching cost and detection loss.
#[derive(Debug, Clone, Copy)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { cls: 2.0, l1: 5.0, giou: 2.0, mask: 1.0 }
    }
}

// ---------------------------------------------------------------- pure forms

/// Focal loss of a single logit (stable log-sigmoid form).
pub fn focal(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let u = if target { -logit } else { logit };
    let coef = if target { alpha } else { 1.0 - alpha };
    coef * sigmoid_s(u).powf(gamma) * softplus_s(u)
}

/// Generalized IoU in (-1, 1]; degenerate boxes contribute zero area.
pub fn giou(a: Box4, b: Box4) -> f64 {
    let inter = boxes::intersection(a, b);
    let union = boxes::area(a) + boxes::area(b) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull_w = (a[2].max(b[2]) - a[0].min(b[0])).max(0.0);
    let hull_h = (a[3].max(b[3]) - a[1].min(b[1])).max(0.0);
    let hull = hull_w * hull_h;
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

/// Dice loss in [0, 1]; the epsilon in numerator and denominator makes the
/// all-zero pair come out as 0.
pub fn dice(pred: &[f64], gt: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut pg = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        pg += p * g;
        pp += p * p;
        gg += g * g;
    }
    1.0 - (2.0 * pg + DICE_EPS) / (pp + gg + DICE_EPS)
}

/// `1 - cos(a, b)`; zero vectors cost 1.
pub fn mask_cost(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na <= 0.0 || nb <= 0.0 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Detached per-image predictions used to build the matching cost.
#[derive(Debug, Clone)]
pub struct DetachedPreds {
    pub logits: Vec<f64>,
    pub boxes: Vec<Box4>,
    pub codes: Vec<Vec<f64>>,
}

/// Ground-truth side of matching and loss.
#[derive(Debug, Clone)]
pub struct GtSet {
    pub boxes: Vec<Box4>,
    pub codes: Vec<Vec<f64>>,
    /// 28x28 binary masks rendered in each ground-truth box.
    pub masks: Vec<Vec<f64>>,
}

/// Cost matrix of Eq.-1 form: focal + normalized L1 + (1 - GIoU) + cosine
/// mask distance, `n_pred x n_gt` row-major.
pub fn match_cost_matrix(
    preds: &DetachedPreds,
    gts: &GtSet,
    w: &CostWeights,
    img_w: f64,
    img_h: f64,
) -> Vec<f64> {
    let n = preds.logits.len();
    let m = gts.boxes.len();
    let mut cost = vec![0.0; n * m];
    let norm = [1.0 / img_w, 1.0 / img_h, 1.0 / img_w, 1.0 / img_h];
    for i in 0..n {
        let cls = focal(preds.logits[i], true, 0.25, 2.0);
        for j in 0..m {
            let mut l1 = 0.0;
            for c in 0..4 {
                l1 += ((preds.boxes[i][c] - gts.boxes[j][c]) * norm[c]).abs();
            }
            let g = giou(preds.boxes[i], gts.boxes[j]);
            let mc = mask_cost(&preds.codes[i], &gts.codes[j]);
            cost[i * m + j] = w.cls * cls + w.l1 * l1 + w.giou * (1.0 - g) + w.mask * mc;
        }
    }
    cost
}

/// Hungarian matching over the Eq.-1 cost.
pub fn assign(
    preds: &DetachedPreds,
    gts: &GtSet,
    w: &CostWeights,
    img_w: f64,
    img_h: f64,
) -> MatchAssignment {
    let cost = match_cost_matrix(preds, gts, w, img_w, img_h);
    hungarian_assign(&cost, preds.logits.len(), gts.boxes.len())
}

// ---------------------------------------------------------------- tape forms

/// Sum of focal losses over a logit vector with per-element binary targets.
pub fn focal_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Tensor,
    targets: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<Tensor> {
    let n = tape.val(logits).numel();
    if n != targets.len() {
        return Err(TensorError::dim(format!(
            "focal: {n} logits vs {} targets",
            targets.len()
        )));
    }
    let shape = tape.shape(logits).to_vec();
    let sgn: Vec<S> = targets
        .iter()
        .map(|&t| if t { S::from_f64(-1.0) } else { S::ONE })
        .collect();
    let coef: Vec<S> = targets
        .iter()
        .map(|&t| S::from_f64(if t { alpha } else { 1.0 - alpha }))
        .collect();
    let sgn = tape.constant(shape.clone(), sgn)?;
    let coef = tape.constant(shape, coef)?;
    let u = tape.mul(logits, sgn)?;
    let sig = tape.sigmoid(u)?;
    let pw = tape.powf(sig, gamma)?;
    let sp = tape.softplus(u)?;
    let t1 = tape.mul(pw, sp)?;
    let t2 = tape.mul(t1, coef)?;
    tape.sum_all(t2)
}

/// Column slices of an `[M, 4]` box tensor.
fn box_cols<S: Scalar>(tape: &mut Tape<S>, b: Tensor) -> Result<[Tensor; 4]> {
    Ok([
        tape.slice_cols(b, 0, 1)?,
        tape.slice_cols(b, 1, 2)?,
        tape.slice_cols(b, 2, 3)?,
        tape.slice_cols(b, 3, 4)?,
    ])
}

/// GIoU of predicted boxes against constant ground-truth boxes, `[M, 1]`.
/// Matches [`giou`] exactly for valid (non-degenerate) boxes.
pub fn giou_graph<S: Scalar>(tape: &mut Tape<S>, pred: Tensor, gt: &[Box4]) -> Result<Tensor> {
    let m = gt.len();
    if tape.shape(pred) != [m, 4] {
        return Err(TensorError::dim(format!(
            "giou_graph: pred {:?} vs {m} gt boxes",
            tape.shape(pred)
        )));
    }
    let gt_flat: Vec<S> = gt
        .iter()
        .flat_map(|b| b.iter().map(|&v| S::from_f64(v)))
        .collect();
    let gt_t = tape.constant(vec![m, 4], gt_flat)?;
    let [px1, py1, px2, py2] = box_cols(tape, pred)?;
    let [gx1, gy1, gx2, gy2] = box_cols(tape, gt_t)?;

    let ix2 = tape.min2(px2, gx2)?;
    let ix1 = tape.max2(px1, gx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let iy2 = tape.min2(py2, gy2)?;
    let iy1 = tape.max2(py1, gy1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(px2, px1)?;
    let pw = tape.relu(pw)?;
    let ph = tape.sub(py2, py1)?;
    let ph = tape.relu(ph)?;
    let area_p = tape.mul(pw, ph)?;
    let gw = tape.sub(gx2, gx1)?;
    let gh = tape.sub(gy2, gy1)?;
    let area_g = tape.mul(gw, gh)?;

    let union = tape.add(area_p, area_g)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let hx2 = tape.max2(px2, gx2)?;
    let hx1 = tape.min2(px1, gx1)?;
    let hw = tape.sub(hx2, hx1)?;
    let hy2 = tape.max2(py2, gy2)?;
    let hy1 = tape.min2(py1, gy1)?;
    let hh = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hw, hh)?;

    let slack = tape.sub(hull, union)?;
    let slack = tape.div(slack, hull)?;
    tape.sub(iou, slack)
}

/// Sum of |pred - gt| over box coordinates normalized by the image size.
pub fn l1_box_graph<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Tensor,
    gt: &[Box4],
    img_w: f64,
    img_h: f64,
) -> Result<Tensor> {
    let m = gt.len();
    if tape.shape(pred) != [m, 4] {
        return Err(TensorError::dim(format!(
            "l1_box_graph: pred {:?} vs {m} gt boxes",
            tape.shape(pred)
        )));
    }
    let norm = [1.0 / img_w, 1.0 / img_h, 1.0 / img_w, 1.0 / img_h];
    let scale: Vec<S> = (0..m)
        .flat_map(|_| norm.iter().map(|&v| S::from_f64(v)))
        .collect();
    let gt_flat: Vec<S> = gt
        .iter()
        .flat_map(|b| b.iter().zip(&norm).map(|(&v, &s)| S::from_f64(v * s)))
        .collect();
    let scale_t = tape.constant(vec![m, 4], scale)?;
    let gt_t = tape.constant(vec![m, 4], gt_flat)?;
    let scaled = tape.mul(pred, scale_t)?;
    let diff = tape.sub(scaled, gt_t)?;
    let a = tape.abs(diff)?;
    tape.sum_all(a)
}

/// Dice loss between a predicted mask (any real values) and a constant
/// ground-truth mask, as a scalar graph node.
pub fn dice_graph<S: Scalar>(tape: &mut Tape<S>, pred: Tensor, gt: &[f64]) -> Result<Tensor> {
    let n = tape.val(pred).numel();
    if n != gt.len() {
        return Err(TensorError::dim(format!("dice_graph: {n} vs {}", gt.len())));
    }
    let shape = tape.shape(pred).to_vec();
    let gt_t = tape.constant(shape, gt.iter().map(|&v| S::from_f64(v)).collect())?;
    let gg: f64 = gt.iter().map(|&v| v * v).sum();
    let pg = tape.mul(pred, gt_t)?;
    let pg = tape.sum_all(pg)?;
    let num = tape.scale(pg, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let pp = tape.mul(pred, pred)?;
    let pp = tape.sum_all(pp)?;
    let den = tape.add_scalar(pp, gg + DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio)?;
    tape.add_scalar(neg, 1.0)
}

/// Sequence cross-entropy of Eq.-13 form: softmax over the alphabet at each
/// of the `T` steps, averaged over the fixed length (padding included).
pub fn recognition_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    seq_logits: Tensor,
    target_ids: &[usize],
) -> Result<Tensor> {
    let shape = tape.shape(seq_logits).to_vec();
    if shape.len() != 2 || shape[0] != target_ids.len() {
        return Err(TensorError::dim(format!(
            "recognition loss: logits {:?} vs {} targets",
            shape,
            target_ids.len()
        )));
    }
    let t_len = shape[0];
    let logp = tape.log_softmax_lastdim(seq_logits)?;
    let picked = tape.select_lastdim(logp, target_ids)?;
    let s = tape.sum_all(picked)?;
    tape.scale(s, -1.0 / t_len as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::tape::Buf;

    #[test]
    fn focal_confident_correct_goes_to_zero() {
        assert!(focal(10.0, true, 0.25, 2.0) < 1e-3);
    }

    #[test]
    fn focal_definitional_point() {
        // p = 0.9 -> 0.25 * 0.01 * (-ln 0.9)
        let logit = (0.9f64 / 0.1).ln();
        let want = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((focal(logit, true, 0.25, 2.0) - want).abs() < 1e-9);
    }

    #[test]
    fn focal_gamma_zero_is_half_ce() {
        let x = 0.73;
        let p = 1.0 / (1.0 + (-x as f64).exp());
        assert!((focal(x, true, 0.5, 0.0) - 0.5 * -(p.ln())).abs() < 1e-12);
        assert!((focal(x, false, 0.5, 0.0) - 0.5 * -((1.0 - p).ln())).abs() < 1e-12);
    }

    #[test]
    fn giou_identical_is_one() {
        assert!((giou([1.0, 2.0, 4.0, 5.0], [1.0, 2.0, 4.0, 5.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_definitional_point() {
        let want = 1.0 / 7.0 - 2.0 / 9.0;
        assert!((giou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]) - want).abs() < 1e-12);
    }

    #[test]
    fn giou_far_apart_approaches_minus_one() {
        let g = giou([0.0, 0.0, 1.0, 1.0], [999.0, 999.0, 1000.0, 1000.0]);
        assert!(g > -1.0 && g < -0.99);
    }

    #[test]
    fn dice_perfect_and_disjoint_and_half() {
        let gt = vec![1.0, 1.0, 0.0, 0.0];
        assert!(dice(&gt, &gt).abs() < 1e-9);
        assert!((dice(&[0.0, 0.0, 1.0, 1.0], &gt) - 1.0).abs() < 1e-6);
        let half: Vec<f64> = gt.iter().map(|v| 0.5 * v).collect();
        assert!((dice(&half, &gt) - 0.2).abs() < 1e-7);
    }

    #[test]
    fn dice_all_zero_is_zero() {
        assert_eq!(dice(&[0.0; 8], &[0.0; 8]), 0.0);
    }

    #[test]
    fn mask_cost_extremes() {
        assert!(mask_cost(&[1.0, 0.0], &[1.0, 0.0]).abs() < 1e-12);
        assert!((mask_cost(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!((mask_cost(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-12);
        assert!((mask_cost(&[0.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cost_matrix_matches_term_oracle() {
        let preds = DetachedPreds {
            logits: vec![0.5, -1.0, 2.0],
            boxes: vec![
                [10.0, 10.0, 30.0, 20.0],
                [5.0, 5.0, 15.0, 25.0],
                [40.0, 40.0, 60.0, 80.0],
            ],
            codes: vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]],
        };
        let gts = GtSet {
            boxes: vec![
                [11.0, 9.0, 29.0, 21.0],
                [42.0, 38.0, 61.0, 79.0],
                [0.0, 0.0, 8.0, 8.0],
            ],
            codes: vec![vec![1.0, 0.1], vec![0.1, 1.0], vec![1.0, 1.0]],
            masks: vec![],
        };
        let w = CostWeights::default();
        let cost = match_cost_matrix(&preds, &gts, &w, 64.0, 64.0);
        for i in 0..3 {
            for j in 0..3 {
                let mut l1 = 0.0;
                for c in 0..4 {
                    let s = if c % 2 == 0 { 64.0 } else { 64.0 };
                    l1 += ((preds.boxes[i][c] - gts.boxes[j][c]) / s).abs();
                }
                let want = w.cls * focal(preds.logits[i], true, 0.25, 2.0)
                    + w.l1 * l1
                    + w.giou * (1.0 - giou(preds.boxes[i], gts.boxes[j]))
                    + w.mask * mask_cost(&preds.codes[i], &gts.codes[j]);
                assert!((cost[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_matrix() {
        let preds = DetachedPreds {
            logits: vec![0.5],
            boxes: vec![[0.0, 0.0, 4.0, 4.0]],
            codes: vec![vec![1.0]],
        };
        let gts = GtSet {
            boxes: vec![[1.0, 1.0, 3.0, 3.0]],
            codes: vec![vec![0.5]],
            masks: vec![],
        };
        let w = CostWeights { cls: 0.0, l1: 0.0, giou: 0.0, mask: 0.0 };
        let cost = match_cost_matrix(&preds, &gts, &w, 8.0, 8.0);
        assert_eq!(cost, vec![0.0]);
    }

    #[test]
    fn giou_graph_matches_pure() {
        let pred = [3.0, 2.0, 11.0, 9.0];
        let gt = [[4.0, 1.0, 10.0, 8.0]];
        let mut t = Tape::<f64>::new();
        let p = t.leaf(vec![1, 4], pred.to_vec(), true).unwrap();
        let g = giou_graph(&mut t, p, &gt).unwrap();
        assert!((t.data(g)[0] - giou(pred, gt[0])).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_recognition_loss_is_ln_alphabet() {
        let (t_len, a) = (8, 39);
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(vec![t_len, a], vec![0.7; t_len * a], true).unwrap();
        let loss = recognition_loss_graph(&mut tape, logits, &vec![5; t_len]).unwrap();
        assert!((tape.item(loss) - (a as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn saturated_recognition_loss_is_tiny() {
        let (t_len, a) = (4, 6);
        let targets = vec![2usize, 0, 5, 1];
        let mut logits = vec![-10.0; t_len * a];
        for (i, &c) in targets.iter().enumerate() {
            logits[i * a + c] = 10.0;
        }
        let mut tape = Tape::<f64>::new();
        let lt = tape.leaf(vec![t_len, a], logits, true).unwrap();
        let loss = recognition_loss_graph(&mut tape, lt, &targets).unwrap();
        assert!(tape.item(loss) < 1e-3);
    }

    #[test]
    fn loss_graphs_pass_gradcheck() {
        // focal
        let logits = Buf::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]);
        let rep = finite_diff_check(
            |t, xs| focal_loss_graph(t, xs[0], &[true, false, true, false], 0.25, 2.0),
            &[logits],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(rep.pass(), "focal: {rep:?}");

        // giou + l1 on a box
        let pred = Buf::new(vec![1, 4], vec![3.0, 2.0, 11.0, 9.0]);
        let rep = finite_diff_check(
            |t, xs| {
                let g = giou_graph(t, xs[0], &[[4.0, 1.0, 10.0, 8.0]])?;
                let g = t.sum_all(g)?;
                let l = l1_box_graph(t, xs[0], &[[4.0, 1.0, 10.0, 8.0]], 16.0, 16.0)?;
                t.add(g, l)
            },
            &[pred],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(rep.pass(), "giou/l1: {rep:?}");

        // dice
        let pred = Buf::new(vec![6], vec![0.2, 0.9, 0.4, 0.1, 0.8, 0.5]);
        let rep = finite_diff_check(
            |t, xs| dice_graph(t, xs[0], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]),
            &[pred],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(rep.pass(), "dice: {rep:?}");

        // recognition CE
        let logits = Buf::new(vec![3, 5], (0..15).map(|i| (i as f64) * 0.13 - 1.0).collect());
        let rep = finite_diff_check(
            |t, xs| recognition_loss_graph(t, xs[0], &[1, 4, 0]),
            &[logits],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(rep.pass(), "rec: {rep:?}");
    }

    #[test]
    fn assign_prefers_perfect_prediction() {
        let preds = DetachedPreds {
            logits: vec![4.0, 4.0],
            boxes: vec![[10.0, 10.0, 20.0, 20.0], [40.0, 40.0, 50.0, 52.0]],
            codes: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let gts = GtSet {
            boxes: vec![[40.0, 40.0, 50.0, 52.0], [10.0, 10.0, 20.0, 20.0]],
            codes: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            masks: vec![],
        };
        let a = assign(&preds, &gts, &CostWeights::default(), 64.0, 64.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }
}

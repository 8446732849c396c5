//! The evaluation protocol on small fixtures, from tied-score AUC and
//! field-of-view counting up to the JSON report.

use swin_res_net::metrics::{auc, auc_trapezoid, confusion, evaluate, scalar_metrics, EvalItem};

fn main() -> swin_res_net::Result<()> {
    let probs = [0.1, 0.4, 0.35, 0.8];
    let gt = [0.0, 0.0, 1.0, 1.0];
    println!("AUC of {probs:?} against {gt:?}: {:?}", auc(&probs, &gt, None)?);

    let tied = [0.2, 0.2, 0.2, 0.9, 0.9, 0.1];
    let tied_gt = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    println!(
        "with ties: rank {:?}, trapezoid {:?}",
        auc(&tied, &tied_gt, None)?,
        auc_trapezoid(&tied, &tied_gt, None)?
    );

    let pred = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let fov = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
    let c = confusion(&pred, &tied_gt, Some(&fov))?;
    let m = scalar_metrics(&c);
    println!("inside the FOV: {c:?}");
    println!("  Se {:.3} Sp {:.3} Acc {:.3} F1 {:.3} IoU {:.3}", m.sensitivity, m.specificity, m.accuracy, m.f1, m.iou);

    let empty_gt = [0.0; 4];
    let blank = scalar_metrics(&confusion(&[0.0; 4], &empty_gt, None)?);
    println!("no vessels anywhere: Se {} IoU {} flagged {:?}", blank.sensitivity, blank.iou, blank.degenerate);

    let items = [
        EvalItem {
            name: "fixture",
            probs: &probs,
            gt: &gt,
            fov: None,
        },
        EvalItem {
            name: "tied",
            probs: &tied,
            gt: &tied_gt,
            fov: Some(&fov),
        },
        EvalItem {
            name: "background",
            probs: &[0.1, 0.2, 0.3, 0.05],
            gt: &empty_gt,
            fov: None,
        },
    ];
    println!("{}", evaluate(&items, 0.5)?.to_json()?);
    Ok(())
}

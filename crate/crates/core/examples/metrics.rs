//! OA, AA and kappa on a hand-sized confusion.

use sdmamba::train::EvalReport;

fn main() {
    // Labels 1,2,2,2 predicted as 1,1,2,2 (0-based below).
    let mut report = EvalReport::from_predictions(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
    report.class_names = vec!["meadow".into(), "gravel".into()];
    println!("{report}");
    println!("confusion {:?}", report.confusion);
}

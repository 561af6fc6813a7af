//! One-pass evaluation of a hand-made trace: per-frame errors, the three
//! scalar scores and the report formats.

use stmt_track::evaluation::{curves_csv, evaluate, report_csv, report_text, SequenceReport};
use stmt_track::geometry::BBox;

fn main() -> stmt_track::Result<()> {
    let gt: Vec<BBox> = (0..10).map(|i| BBox::new(10.0 + 2.0 * i as f64, 20.0, 16.0, 12.0)).collect();
    // Drifts away from the target by 3 px per frame.
    let pred: Vec<BBox> = gt.iter().enumerate().map(|(i, b)| BBox::new(b.x + 3.0 * i as f64, b.y, b.w, b.h)).collect();
    let result = evaluate(&pred, &gt)?;
    for (i, (e, o)) in result.center_errors.iter().zip(&result.overlaps).enumerate() {
        println!("frame {:>2}  centre error {e:5.1}  overlap {o:.3}", i + 1);
    }
    let rows = vec![SequenceReport {
        name: "drift".into(),
        n_frames: gt.len(),
        result: result.clone(),
    }];
    print!("{}", report_text(&rows));
    print!("{}", report_csv(&rows));
    let curves = curves_csv(&result);
    println!("{} curve rows, first: {}", curves.lines().count() - 1, curves.lines().nth(1).unwrap_or(""));
    Ok(())
}

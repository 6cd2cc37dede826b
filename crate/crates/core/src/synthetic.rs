//! Small synthetic feature videos for tests and demos.

use crate::feature_store::FrameFeatureSequence;
use crate::geometry::BBox;

/// A 2x2 target whose four cells carry distinct one-hot features (`D = 4`) on a zero
/// background, starting at `x = 1` and moving one cell right per frame. Returns the sequence
/// and the true box of every frame, in grid units.
pub fn moving_square(frames: usize, w: usize, h: usize) -> (FrameFeatureSequence, Vec<BBox>) {
    square_video(frames, w, h, |t| 1 + t)
}

/// The same target held at column `x0` in every frame.
pub fn static_square(frames: usize, w: usize, h: usize, x0: usize) -> (FrameFeatureSequence, Vec<BBox>) {
    square_video(frames, w, h, |_| x0)
}

fn square_video(frames: usize, w: usize, h: usize, x_at: impl Fn(usize) -> usize) -> (FrameFeatureSequence, Vec<BBox>) {
    assert!(h >= 2, "grid must be at least two cells tall");
    let y0 = h / 2 - 1;
    let seq = FrameFeatureSequence::from_fn(frames, h, w, 4, |t, y, x, d| {
        let x0 = x_at(t);
        if (x0..x0 + 2).contains(&x) && (y0..y0 + 2).contains(&y) {
            let cell = 2 * (y - y0) + (x - x0);
            (cell == d) as u8 as f32
        } else {
            0.0
        }
    })
    .expect("valid synthetic shape");
    let truth = (0..frames)
        .map(|t| {
            let x0 = x_at(t) as f64;
            BBox::new(x0, y0 as f64, x0 + 2.0, y0 as f64 + 2.0).expect("non-degenerate box")
        })
        .collect();
    (seq, truth)
}

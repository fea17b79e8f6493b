//! Center/size box-delta parameterization used by the box regressor.

use crate::dataset::BBox;
use crate::error::{Error, Result};

/// Upper bound applied to the log-size deltas before exponentiation.
pub const LOG_SCALE_CLIP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Deltas `(t_x, t_y, t_w, t_h)` that move `proposal` onto `gt`.
pub fn encode_reg_target(proposal: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    for (name, b) in [("proposal", proposal), ("gt", gt)] {
        if !b.has_positive_size() {
            return Err(Error::InvalidArgument(format!(
                "{name} box must have positive width and height, got {:?}",
                b.to_array()
            )));
        }
    }
    let (pcx, pcy) = proposal.center();
    let (gcx, gcy) = gt.center();
    Ok([
        (gcx - pcx) / proposal.w,
        (gcy - pcy) / proposal.h,
        (gt.w / proposal.w).ln(),
        (gt.h / proposal.h).ln(),
    ])
}

/// Applies deltas to `proposal`; the inverse of [`encode_reg_target`].
pub fn decode_reg_target(deltas: &[f64; 4], proposal: &BBox) -> BBox {
    let (pcx, pcy) = proposal.center();
    let cx = pcx + deltas[0] * proposal.w;
    let cy = pcy + deltas[1] * proposal.h;
    let w = proposal.w * deltas[2].min(LOG_SCALE_CLIP).exp();
    let h = proposal.h * deltas[3].min(LOG_SCALE_CLIP).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
}

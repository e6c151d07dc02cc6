//! Detection geometry and head mechanics.

pub mod anchors;
pub mod geometry;
pub mod io;
pub mod nms;
pub mod proposal;
pub mod psroi;

pub use anchors::{generate_anchors, AnchorSpec};
pub use io::{format_g6, parse_detections, render_detections, DetectionRecord};
pub use geometry::{decode_box, decode_box_clipped, encode_box, iou, BBox, Detection, Roi};
pub use nms::nms;
pub use proposal::{rpn_propose, ProposalConfig};
pub use psroi::{ps_roi_pool, ps_roi_pool_reg, ps_vote_classify, roi_average_pool, PsHeadConfig};

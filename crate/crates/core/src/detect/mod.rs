//! SSD-style detection: boxes, priors, offset codec, suppression and the network.

mod boxes;
mod codec;
mod model;
mod nms;
mod priors;

pub use boxes::{format_detections, iou, iou_unchecked, parse_detections, BBox, Detection};
pub use codec::{decode_boxes, decode_one, encode_box};
pub use model::{detect, postprocess, softmax_rows, Adapters, Detector, DetectorConfig, HeadVars, Injection, Port};
pub use nms::fast_nms;
pub use priors::{generate_priors, AnchorSpec, PriorBox};

//! Network path: features to masks and variances, masks to spatial
//! covariances, and the resulting Wiener posterior with optional EM refinement.

mod net;
mod scm;

pub use net::{
    net_backward, net_forward, net_forward_trace, power_scale, Activation, Dense, MaskNetConfig, MaskNetParams,
    MaskSet, NetTrace,
};
pub(crate) use net::head_backward;
pub use scm::{dnn_posterior, infer_and_refine, masks_to_scm, MaskScm};
pub(crate) use scm::masks_to_scm_backward;

//! Order-free pooling of frame sequences: attention pooling and soft-assignment VLAD.

mod attention;
mod vlad;

pub use attention::{attention_pool, AttentionPool};
pub use vlad::{
    aggregate, assign_alpha, assign_attention, assign_decoupled, cluster_loss, normalize_descriptor, vlad_aggregate,
    vlad_assign, vlad_cluster_loss, DescriptorNorm, KernelParams, KernelSpec, SoftmaxAxis, Vlad, VladSpec, NORM_EPS,
};

//! The hypernetwork: parameters, configuration and the generation pass.

mod config;
pub mod generator;
mod network;
mod params;

pub use config::HyperNetConfig;
pub use generator::{
    build_module_input, generate_classifier, generate_layer, nearest_anchors, task_loss,
    task_loss_and_grads, PreparedTask,
};
pub use network::{
    generate_network, generate_network_with_map, local_classes, nn_bias_logits, prepare_task,
    AnchorStage, GeneratedNetwork,
};
pub use params::HyperNetParams;

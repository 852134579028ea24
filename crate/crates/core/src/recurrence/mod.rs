//! The (Gated) DeltaProduct recurrence and the model stack built on it.

mod checkpoint;
mod core;
mod model;

pub use self::checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry, FORMAT_VERSION};
pub use self::core::{
    forward_chunked, forward_expanded, forward_sequential, stability_bound, step, EigenvalueMode,
    HiddenState, StepInputs,
};
pub(crate) use self::core::{micro_step, readout, sigmoid};
pub use self::model::{
    compute_step_inputs, layer_forward, layer_forward_tape, model_forward, model_forward_batch,
    model_forward_tape, trace_step_inputs, weights_on_tape, ConvKernels, ForwardOutput, LayerParams,
    LayerTrace, ModelConfig, ModelWeights, TokenBatch, CONV_WIDTH,
};

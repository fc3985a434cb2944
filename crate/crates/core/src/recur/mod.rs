//! GRU/LSTM cells and the stacked, context-injected, hierarchical and
//! multi-scale sequence encoders.

mod cell;
mod encoder;

pub use cell::{gru_step, lstm_step, CellKind, CellState, RnnCell};
pub use encoder::{
    encode_hierarchical, encode_multiscale, encode_stacked, encode_with_context, subsample_rows, Encoder,
    EncoderParts, EncoderSpec, EncoderVariant, Stack, DEFAULT_WINDOW,
};

#[cfg(test)]
mod tests;

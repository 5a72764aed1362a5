//! Desk-scale differentially private masked-autoencoder training.
//!
//! The crate covers Rényi-DP accounting ([`accountant`]), a reverse-mode
//! autodiff engine with per-sample gradients ([`tensor`]), a ViT masked
//! autoencoder ([`mae`]), DP-SGD / DP-AdamW training ([`dp`]), procedural
//! data ([`data`]) and downstream evaluation ([`evaluate`]).

pub mod accountant;
pub mod data;
pub mod dp;
pub mod evaluate;
pub mod mae;
pub mod numfmt;
pub mod seed;
pub mod tensor;

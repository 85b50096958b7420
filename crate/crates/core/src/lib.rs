//! MaskMamba: Bi-Mamba-v2 and Transformer hybrid backbones for masked image
//! modeling, built on a small reverse-mode tensor engine.

pub mod alloc;
pub mod backbone;
pub mod bench;
pub mod data;
pub mod decode;
pub mod error;
pub mod float;
pub mod functional;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod mim;
pub mod ops;
pub mod optim;
pub mod params;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod tokenizer;

pub use error::{Error, Result};
pub use float::{Float, Precision};
pub use ops::{Eager, Ops, Value};
pub use params::{ParamGrads, ParamId, ParamLayout, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[global_allocator]
static GLOBAL: alloc::CountingAlloc = alloc::CountingAlloc;

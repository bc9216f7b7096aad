pub mod bfp;
pub mod datapath;
pub mod executor;
pub mod fixtures;
pub mod io;
pub mod ir;
pub mod mcode;
pub mod scalar;
pub mod tensor;
pub mod oracle;
pub mod postproc;

pub type Half = half::f16;
pub type HalfTensor = tensor::Tensor<half::f16>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;

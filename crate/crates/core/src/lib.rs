pub mod attention;
pub mod backends;
pub mod diffusion;
pub mod layout;
pub mod paca;
pub mod regca;
pub mod tensor;
pub mod cc;
pub mod error;
pub mod segmentation;
pub mod sog;
pub mod eval;
pub mod config;
pub mod engine;
pub mod server;

//! Experiment runner for the energy-based diffusion generator: TOML
//! configs, checkpoints and CSV outputs around [`edg_core`].

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod targets;

pub use error::{RunError, RunResult};

// The autodiff graph allocates and frees large row blocks on every step; the
// system allocator returns them to the kernel each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

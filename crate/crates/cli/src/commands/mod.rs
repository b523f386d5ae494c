mod eval;
mod infer;
mod search;
mod train;

pub use eval::eval;
pub use infer::infer;
pub use search::search;
pub use train::train;

use anyhow::Result;

use crate::cases::write_phantoms;
use crate::config::RunConfig;

pub fn phantom(cfg: &RunConfig) -> Result<()> {
    let names = write_phantoms(&cfg.output_dir, &cfg.phantom.spec(), cfg.phantom.count, cfg.seed)?;
    log::info!("wrote {} phantoms to {}", names.len(), cfg.output_dir.display());
    Ok(())
}

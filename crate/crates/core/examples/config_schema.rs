//! Prints the full configuration schema with the values of a preset.
//!
//! cargo run -p coral --example config_schema [desk|paper]

use coral::config::{Preset, RunConfig};

fn main() -> coral::Result<()> {
    let preset: Preset = std::env::args().nth(1).as_deref().unwrap_or("desk").parse()?;
    print!("{}", RunConfig::preset(preset).to_text());
    Ok(())
}

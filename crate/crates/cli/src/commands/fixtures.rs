use std::path::Path;

use dexrefine::fixtures::generate_fixtures;
use serde_json::{json, Value};

use crate::error::CliResult;

pub fn generate(seed: u64, out: &Path, dry_run: bool) -> CliResult<Value> {
    if dry_run {
        return Ok(json!({"command": "fixtures generate", "dry_run": true, "seed": seed, "out": out.display().to_string()}));
    }
    let manifest = generate_fixtures(seed, out)?;
    Ok(json!({
        "command": "fixtures generate",
        "seed": seed,
        "out": out.display().to_string(),
        "fixtures": manifest.fixtures.iter().map(|f| f.name.as_str()).collect::<Vec<_>>(),
        "files": manifest.files.len(),
    }))
}

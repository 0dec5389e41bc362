use std::path::Path;

use super::generate::quantize;
use super::Scenario;
use crate::error::{Error, Result};

/// Pretty JSON with every float rounded to 9 significant digits.
pub fn scenario_to_string(scenario: &Scenario) -> Result<String> {
    let mut s = scenario.clone();
    quantize(&mut s);
    let mut text = serde_json::to_string_pretty(&s)?;
    text.push('\n');
    Ok(text)
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = scenario_to_string(scenario)?;
    crate::grid::write_file(path, text.as_bytes())
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| Error::ScenarioParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text)
}

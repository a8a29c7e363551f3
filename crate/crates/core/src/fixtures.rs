//! Bundled structure files.
//!
//! The six dimers carry published couplings and phosphorus coordinates. The monomer
//! coupling and both six-spin clusters are synthetic stand-ins.

use crate::error::Result;
use crate::io::parse_structure_str;
use crate::spin::SpinSystem;

pub const DIMERS: [&str; 6] = ["dimer_c2_a", "dimer_s4", "dimer_c2_b", "dimer_cs", "dimer_c2v", "dimer_td"];
pub const SYNTHETIC: [&str; 2] = ["hexa_c1", "hexa_d3d"];
pub const ALL: [&str; 9] = [
    "dimer_c2_a",
    "dimer_s4",
    "dimer_c2_b",
    "dimer_cs",
    "dimer_c2v",
    "dimer_td",
    "monomer",
    "hexa_c1",
    "hexa_d3d",
];

pub fn fixture_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "dimer_c2_a" => include_str!("../fixtures/dimer_c2_a.toml"),
        "dimer_s4" => include_str!("../fixtures/dimer_s4.toml"),
        "dimer_c2_b" => include_str!("../fixtures/dimer_c2_b.toml"),
        "dimer_cs" => include_str!("../fixtures/dimer_cs.toml"),
        "dimer_c2v" => include_str!("../fixtures/dimer_c2v.toml"),
        "dimer_td" => include_str!("../fixtures/dimer_td.toml"),
        "monomer" => include_str!("../fixtures/monomer.toml"),
        "hexa_c1" => include_str!("../fixtures/hexa_c1.toml"),
        "hexa_d3d" => include_str!("../fixtures/hexa_d3d.toml"),
        _ => return None,
    })
}

pub fn fixture(name: &str) -> Result<SpinSystem> {
    let text = fixture_text(name).ok_or_else(|| crate::error::SpinError::InvalidArgument(format!("unknown fixture `{name}`")))?;
    parse_structure_str(text, &format!("fixture:{name}"), true)
}

pub fn dimers() -> Vec<SpinSystem> {
    DIMERS.iter().map(|n| fixture(n).expect("bundled dimer parses")).collect()
}

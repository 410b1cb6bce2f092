//! Grammars bundled with the engine.

use crate::simulator::{load_simulator, Simulator};

pub const COUNTDOWN_MINI: &str = include_str!("../fixtures/countdown-mini.json");
pub const LIFTOFF_JAVA: &str = include_str!("../fixtures/liftoff-java.json");

/// Source text of a bundled grammar by name.
pub fn source(name: &str) -> Option<&'static str> {
    match name {
        "countdown-mini" => Some(COUNTDOWN_MINI),
        "liftoff-java" => Some(LIFTOFF_JAVA),
        _ => None,
    }
}

pub fn countdown_mini() -> Simulator {
    load_simulator(COUNTDOWN_MINI).expect("bundled grammar loads")
}

pub fn liftoff_java() -> Simulator {
    load_simulator(LIFTOFF_JAVA).expect("bundled grammar loads")
}

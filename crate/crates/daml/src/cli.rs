//! Placeholder.
pub fn main(_argv: Vec<String>) -> i32 { 0 }

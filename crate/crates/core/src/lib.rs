pub mod engine;
pub mod midi;
pub mod neural;
pub mod representation;
pub mod theory;
pub mod toy;

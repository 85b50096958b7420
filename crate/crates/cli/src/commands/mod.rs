pub mod ablate;
pub mod bench;
pub mod generate;
pub mod inspect;
pub mod tools;
pub mod train;

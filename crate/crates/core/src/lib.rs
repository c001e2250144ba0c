pub mod bench;
pub mod distort;
pub mod energy;
pub mod hopfield;
pub mod metatrain;
pub mod patterns;
pub mod reader;
pub mod tape;
pub mod util;
pub mod writer;

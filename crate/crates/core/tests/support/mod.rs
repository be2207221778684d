pub mod oracles;
pub mod scenegen;

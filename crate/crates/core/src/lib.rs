pub mod error;
pub mod objective;
pub mod sphere;
pub mod blowup;
pub mod flow;
pub mod lnn;
pub mod centerstable;
pub mod cli;

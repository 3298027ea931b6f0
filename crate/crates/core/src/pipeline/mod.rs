pub mod backend;
pub mod gate;
pub mod transform;
pub mod worker;

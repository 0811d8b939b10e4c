pub mod doubled;
pub mod experiments;
pub mod homodyne;
pub mod interconnect;
pub mod linalg;
pub mod qsystem;
pub mod synthesis;

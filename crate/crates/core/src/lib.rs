pub mod edg;
pub mod encoder;
pub mod evallab;
pub mod gradcheck;
pub mod magdata;
pub mod model;
pub mod ndr;
pub mod numerics;
pub mod objective;
pub mod trainer;

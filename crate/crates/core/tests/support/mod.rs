pub mod data;
pub mod gradcheck;

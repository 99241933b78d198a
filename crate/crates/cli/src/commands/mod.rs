pub mod compare;
pub mod fit;
pub mod predict;
pub mod simulate;

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod imagecore;
pub mod losses;
pub mod networks;
pub mod training;

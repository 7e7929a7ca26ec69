pub mod autodiff;
pub mod baselines;
pub mod grid;
pub mod io;
pub mod losses;
pub mod network;
pub mod synthetic;
pub mod training;
pub mod variogram;

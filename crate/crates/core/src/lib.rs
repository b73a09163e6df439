pub mod autodiff;
pub mod tke;
pub mod tpa;
pub mod traj;
pub mod secure_agg;
pub mod surrogate;
pub mod tasks;
pub mod fpo;

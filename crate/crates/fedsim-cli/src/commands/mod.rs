pub mod marginals;
pub mod plot_cmd;
pub mod run;
pub mod sweep;
pub mod verify;

pub mod autodiff;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod training;
pub mod synthetic;
pub mod theory;

//! Generative grading: probabilistic grammars of student solutions, sampling,
//! inference of decision traces from text, and feedback derived from them.

pub mod dataset;
pub mod eval;
pub mod feedback;
pub mod fixtures;
pub mod knn;
pub mod nap;
pub mod par;
pub mod sampling;
pub mod simulator;

pub use par::Exec;

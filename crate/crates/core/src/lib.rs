pub mod error;
pub mod linalg;
pub mod model;
pub mod polytope;
pub mod slack;
pub mod lmi;
pub mod sdp;
pub mod verify;
pub mod refine;
pub mod envelope;
pub mod synth;
pub mod sim;
pub mod io;

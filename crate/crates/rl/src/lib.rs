//! RL side of the recipe: the objective mathematics (`rlcore`) and a
//! desk-scale training harness over a tabular softmax policy (`toylab`).

pub mod rlcore;
pub mod toylab;

#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Backward Euler-Maruyama simulation of Markov-switching SDEs with
//! polynomially growing coefficients, and empirical checks of their
//! long-time behaviour.

pub mod bem_stepper;
pub mod config;
pub mod experiments;
pub mod hybrid_model;
pub mod markov_chain;
pub mod measure_lab;
pub mod output;
pub mod parallel;
pub mod rng;
pub mod simulator;

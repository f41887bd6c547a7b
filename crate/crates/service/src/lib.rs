//! Networked services around the navhop core: the scheduler, the node
//! agent, and a harness that runs them as processes and preempts them.

pub mod agent;
pub mod harness;
pub mod net;
pub mod scheduler;

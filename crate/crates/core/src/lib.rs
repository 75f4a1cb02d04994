pub mod dqn;
pub mod dsp;
pub mod envsim;
pub mod grid;
pub mod nav;
pub mod protonet;
pub mod similarity;
pub mod tensor;

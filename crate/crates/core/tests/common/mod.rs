#![allow(dead_code)]

pub mod gradcheck;
pub mod reward_oracle;
pub mod ucs;

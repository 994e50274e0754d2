#![allow(dead_code)]

pub mod cover_oracle;
pub mod lease_fuzz;
pub mod presence_oracle;

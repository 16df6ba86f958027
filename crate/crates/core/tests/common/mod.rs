#![allow(dead_code)]

pub mod patterns;

//! Taint-tracking EVM interpreter that classifies transactions by integer
//! overflow behavior and constructs transactions to trigger potential
//! overflows.

pub mod asm;
pub mod detector;
pub mod driver;
pub mod evm;
pub mod fixtures;
pub mod keccak;
pub mod opcode;
pub mod protection;
#[cfg(feature = "rpc")]
pub mod rpc;
pub mod state;
pub mod taint;
pub mod tracelog;
pub mod txgen;
pub mod word;

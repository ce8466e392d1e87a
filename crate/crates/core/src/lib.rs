pub mod bits;
pub mod consensus;
pub mod crypto;
pub mod keydist;
pub mod keystore;
pub mod time;
pub mod topology;
pub mod scenario;
pub mod report;
pub mod simnet;

//! Benchmarks for the physics solve, the adjoint gradient and the network.
//! See `benches/`.

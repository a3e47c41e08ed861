//! Criterion benchmarks for the pricing engine; see `benches/engine.rs`.

//! Benchmark-only crate; the interesting content lives under `benches/`.

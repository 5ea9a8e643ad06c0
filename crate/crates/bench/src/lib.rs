//! Criterion benchmarks for the tensor, similarity and classifier kernels. Run with `cargo bench -p syncmatrix-bench`.

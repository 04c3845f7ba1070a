#pragma once

namespace instcal {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel on every iteration. No-op outside glibc.
void tune_allocator();

}  // namespace instcal

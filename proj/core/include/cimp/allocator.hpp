#pragma once

namespace cimp {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// OS. Training allocates and frees the same large buffers every step; with
/// glibc defaults a third of the run time goes to page faults. Process-wide,
/// so only executables call it. No-op elsewhere.
void retain_heap_memory() noexcept;

}  // namespace cimp

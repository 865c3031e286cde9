#pragma once

namespace cdkd {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every step. Training allocates and frees the same large
/// blocks each step; with glibc defaults each one is a fresh mmap and a page
/// fault storm. No effect on other C libraries.
void tune_allocator();

}  // namespace cdkd

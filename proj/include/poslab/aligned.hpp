#pragma once

#include <cstddef>
#include <cstdlib>
#include <new>
#include <vector>

namespace poslab {

// 64-byte-aligned allocator. Numeric buffers are aligned to the widest SIMD
// packet so vectorized reduction order (and therefore rounding) depends only
// on offsets, never on where the heap happened to place the buffer. That is
// what makes training traces reproducible run to run.
template <typename T>
struct AlignedAlloc64 {
    using value_type = T;
    static constexpr std::size_t alignment = 64;

    AlignedAlloc64() = default;
    template <typename U>
    AlignedAlloc64(const AlignedAlloc64<U>&) {}

    T* allocate(std::size_t n) {
        void* p = std::aligned_alloc(alignment, ((n * sizeof(T) + alignment - 1) / alignment) *
                                                    alignment);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, std::size_t) noexcept { std::free(p); }

    template <typename U>
    bool operator==(const AlignedAlloc64<U>&) const {
        return true;
    }
};

template <typename T>
using avector = std::vector<T, AlignedAlloc64<T>>;

}  // namespace poslab

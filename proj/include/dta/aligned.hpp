#pragma once

#include <cstddef>
#include <new>
#include <vector>

namespace dta {

/// 64-byte-aligned allocator. Vectorized kernels pick alignment-dependent
/// code paths; pinning every numeric buffer to one alignment keeps results
/// bitwise reproducible regardless of heap layout.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}

    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(Align));
    }

    friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
    friend bool operator!=(const AlignedAllocator&, const AlignedAllocator&) { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

}  // namespace dta

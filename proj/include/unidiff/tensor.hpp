#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unidiff {

// Cache-line aligned storage. Vectorized kernels peel differently depending
// on pointer alignment, so a fixed alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense row-major tensor. Image batches use NCHW.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, T fill = T{0})
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    Tensor(std::vector<int> shape, const std::vector<T>& data)
        : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (data_.size() != element_count(shape_)) {
            throw std::invalid_argument("tensor data size does not match shape");
        }
    }
    Tensor(std::vector<int> shape, AlignedVector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != element_count(shape_)) {
            throw std::invalid_argument("tensor data size does not match shape");
        }
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // NCHW accessor.
    T& at(int n, int c, int h, int w) {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(int n, int c, int h, int w) const {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(std::vector<int> shape) const {
        if (element_count(shape) != data_.size()) {
            throw std::invalid_argument("reshape changes element count");
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        AlignedVector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    static std::size_t element_count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("negative tensor dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

private:
    std::vector<int> shape_;
    AlignedVector<T> data_;
};

inline std::string shape_string(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace unidiff

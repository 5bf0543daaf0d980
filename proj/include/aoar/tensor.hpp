#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace aoar {

// Dense row-major matrix. Rows are contiguous so a row can be handed to
// kernels as a plain pointer.
template <class T>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    T* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
    const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
    std::span<T> row_span(int r) { return {row(r), static_cast<std::size_t>(cols)}; }
    std::span<const T> row_span(int r) const { return {row(r), static_cast<std::size_t>(cols)}; }

    T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    void resize(int r, int c) {
        rows = r;
        cols = c;
        data.assign(static_cast<std::size_t>(r) * c, T{});
    }
};

}  // namespace aoar

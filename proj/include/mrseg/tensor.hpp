#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mrseg/errors.hpp"

namespace mrseg {

// Dense n-d array. Shapes here are concrete; no broadcasting, no views.
template <typename T>
struct Array {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Array() = default;
    Array(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {}

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }

    static Array zeros(std::vector<int64_t> s) {
        Array a;
        a.shape = std::move(s);
        a.data.assign(static_cast<size_t>(a.numel()), T(0));
        return a;
    }

    static Array full(std::vector<int64_t> s, T v) {
        Array a;
        a.shape = std::move(s);
        a.data.assign(static_cast<size_t>(a.numel()), v);
        return a;
    }

    static Array scalar(T v) { return Array({1}, {v}); }

    template <typename U>
    Array<U> cast() const {
        Array<U> out;
        out.shape = shape;
        out.data.reserve(data.size());
        for (T v : data) out.data.push_back(static_cast<U>(v));
        return out;
    }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
void require_shape(const Array<T>& a, const std::vector<int64_t>& want, const char* what) {
    if (a.shape != want)
        throw ConfigError(std::string(what) + ": expected shape " + shape_str(want) + ", got " +
                          shape_str(a.shape));
}

}  // namespace mrseg

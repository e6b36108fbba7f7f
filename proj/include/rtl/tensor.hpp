#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtl/error.hpp"

namespace rtl {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written as raw little-endian words");

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major array of doubles with an optional gradient slot.
class Tensor {
public:
    Tensor() : shape_{1}, data_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        validate_shape(shape_);
        data_.assign(shape_size(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape(shape_);
        if (shape_size(shape_) != data_.size()) {
            throw DimensionError("tensor shape " + shape_string(shape_) + " holds " +
                                 std::to_string(shape_size(shape_)) + " values, got " +
                                 std::to_string(data_.size()));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t dim(std::size_t axis) const {
        if (axis >= shape_.size()) {
            throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                                 shape_string(shape_));
        }
        return shape_[axis];
    }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// 4-d accessor for NCHW tensors.
    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    bool requires_grad() const noexcept { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const noexcept { return grad_.has_value(); }
    std::span<const double> grad() const {
        if (!grad_) throw StateError("tensor has no gradient");
        return *grad_;
    }
    std::span<double> mutable_grad() {
        if (!grad_) grad_.emplace(data_.size(), 0.0);
        return *grad_;
    }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
    }
    void clear_grad() { grad_.reset(); }

    Tensor reshaped(Shape shape) const {
        Tensor t(std::move(shape), data_);
        return t;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    /// Bitwise equality of shape and values (NaN payloads included).
    bool bit_equal(const Tensor& other) const {
        return shape_ == other.shape_ &&
               (data_.empty() ||
                std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
    }

    /// Rows [begin, begin+count) along axis 0.
    Tensor slice_rows(std::size_t begin, std::size_t count) const {
        if (shape_.empty() || begin + count > shape_[0]) {
            throw DimensionError("row slice out of range for shape " + shape_string(shape_));
        }
        const std::size_t row = data_.size() / shape_[0];
        Shape s = shape_;
        s[0] = count;
        return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                                        data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * row)));
    }

    /// Gather rows along axis 0 in the given order.
    Tensor gather_rows(std::span<const std::size_t> rows) const {
        const std::size_t row = shape_[0] ? data_.size() / shape_[0] : 0;
        Shape s = shape_;
        s[0] = rows.size();
        std::vector<double> out;
        out.reserve(rows.size() * row);
        for (std::size_t r : rows) {
            if (r >= shape_[0]) throw IndexError("row " + std::to_string(r) + " out of range");
            out.insert(out.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * row),
                       data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * row));
        }
        return Tensor(std::move(s), std::move(out));
    }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
        for (std::size_t e : shape) {
            if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_string(shape));
        }
    }

    Shape shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    std::optional<std::vector<double>> grad_;
};

// Serialization: one JSON header line {"shape":[...],"dtype":"f64"} followed by
// the values as raw little-endian doubles.

inline void write_tensor(std::ostream& out, const Tensor& t) {
    nlohmann::json header;
    header["shape"] = t.shape();
    header["dtype"] = "f64";
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline Tensor read_tensor(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw LoadError("tensor header missing");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("tensor header is not JSON: ") + e.what());
    }
    if (!header.contains("dtype") || header["dtype"] != "f64" || !header.contains("shape")) {
        throw LoadError("tensor header must carry shape and dtype f64");
    }
    Shape shape;
    try {
        shape = header["shape"].get<Shape>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("bad tensor shape: ") + e.what());
    }
    if (shape.empty() || std::find(shape.begin(), shape.end(), 0u) != shape.end()) {
        throw LoadError("bad tensor shape " + shape_string(shape));
    }
    std::vector<double> data(shape_size(shape));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != data.size() * sizeof(double)) {
        throw LoadError("tensor data truncated for shape " + shape_string(shape));
    }
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace rtl

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace skid {

using Scalar = double;

/// Deterministic RNG stream. Workers derive independent streams via
/// `Rng(base_seed ^ worker_id)`.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    // inclusive range
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
    }
    Scalar uniform_real(Scalar lo, Scalar hi) {
        return std::uniform_real_distribution<Scalar>(lo, hi)(gen_);
    }
    Scalar normal(Scalar mean, Scalar stddev) {
        return std::normal_distribution<Scalar>(mean, stddev)(gen_);
    }
    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

/// Dense row-major tensor of Scalar. Shape conventions are documented at
/// each use site ((N,C,H,W) for conv inputs, (C,H,W) for single maps, ...).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)),
          data_(std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                                std::multiplies<>()),
                Scalar{0}) {}

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, Scalar v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    Scalar& operator[](std::size_t i) { return data_[i]; }
    Scalar operator[](std::size_t i) const { return data_[i]; }

    Scalar& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    Scalar at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](Scalar v) { return std::isfinite(v); });
    }

    const std::vector<Scalar>& vec() const { return data_; }
    std::vector<Scalar>& vec() { return data_; }

private:
    std::vector<std::size_t> shape_;
    std::vector<Scalar> data_;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

}  // namespace skid

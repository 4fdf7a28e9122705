#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <unistd.h>

#include "adamix/adamix.hpp"

namespace adamix::testing {

inline Tensor uniform_tensor(Shape shape, Rng& rng, bool requires_grad = true, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Scalar probe sum(f(...) * weights) so non-scalar ops can be gradient checked.
inline Tensor weighted_sum(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

/// Scratch directory unique to this process and `name`, emptied on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("adamix_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline TokenBatch random_tokens(std::size_t batch, std::size_t seq, std::size_t vocab, Rng& rng) {
    std::uniform_int_distribution<int> id(1, static_cast<int>(vocab) - 1);
    TokenBatch t{batch, seq, {}};
    for (std::size_t i = 0; i < batch * seq; ++i) t.ids.push_back(id(rng));
    return t;
}

inline bool same_values(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && a.values() == b.values(); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace adamix::testing
